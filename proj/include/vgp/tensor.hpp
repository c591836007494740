#ifndef VGP_TENSOR_HPP
#define VGP_TENSOR_HPP

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace vgp {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct ShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct NonFiniteError : std::runtime_error {
    explicit NonFiniteError(const std::string& op)
        : std::runtime_error("non-finite value produced by op '" + op + "'"), op_name(op) {}
    std::string op_name;
};

/// Scoped switch that disables tape construction (forward values only).
/// Used by finite-difference loops and topology builders.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

bool grad_enabled();

/// When on, every op scans its output for NaN/Inf and throws NonFiniteError
/// naming the op. Off by default; gradcheck turns it on.
void set_finite_checks(bool on);
bool finite_checks();

struct TensorImpl;
using TensorImplPtr = std::shared_ptr<TensorImpl>;

struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until first accumulation
    bool requires_grad = false;
    const char* op = "leaf";
    std::string name;  // optional, for parameters and diagnostics
    std::vector<TensorImplPtr> parents;
    std::function<void(TensorImpl&)> backward_fn;

    void ensure_grad();
};

/// Dense row-major f64 array with optional reverse-mode gradient tracking.
/// Copies share storage; leaves are mutable only through mutable_data(),
/// everything downstream of an op is treated as immutable.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(TensorImplPtr impl) : impl_(std::move(impl)) {}

    static Tensor zeros(Shape shape);
    static Tensor full(Shape shape, double value);
    static Tensor from(Shape shape, std::vector<double> data);
    static Tensor eye(std::size_t n);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    std::size_t ndim() const { return impl_->shape.size(); }
    std::size_t size() const { return impl_->data.size(); }
    std::size_t rows() const;
    std::size_t cols() const;

    const std::vector<double>& data() const { return impl_->data; }
    std::vector<double>& mutable_data() { return impl_->data; }
    const std::vector<double>& grad() const;
    bool has_grad() const { return !impl_->grad.empty(); }
    void zero_grad();

    double item() const;
    double at(std::size_t i) const { return impl_->data[i]; }
    double at(std::size_t i, std::size_t j) const { return impl_->data[i * cols() + j]; }

    bool requires_grad() const { return impl_->requires_grad; }
    Tensor& set_requires_grad(bool v);
    Tensor& set_name(std::string n);
    const std::string& name() const { return impl_->name; }

    TensorImplPtr impl() const { return impl_; }

private:
    TensorImplPtr impl_;
};

// ---- graph-building operations -------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor vecmat(const Tensor& x, const Tensor& w);  // [k] . [k x n] -> [n]
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);  // elementwise
Tensor scale(const Tensor& a, double c);
Tensor gelu(const Tensor& a);
Tensor concat_cols(const Tensor& a, const Tensor& b);
Tensor concat_vec(const Tensor& a, const Tensor& b);
Tensor vstack(const Tensor& a, const Tensor& b);
Tensor gather_rows(const Tensor& a, const std::vector<std::uint32_t>& idx);
Tensor stack_rows(const std::vector<Tensor>& rows);  // n x [d] -> [n x d]
Tensor row(const Tensor& a, std::size_t i);          // [n x d] -> [d]
Tensor slice_rows(const Tensor& a, std::size_t start, std::size_t count);
Tensor sub_rowvec(const Tensor& a, const Tensor& x);  // a[k x d] - x[d] per row
Tensor mean_rows(const Tensor& a);                    // [n x d] -> [d]

/// Elementwise max over the rows of a [k x d] stack; k >= 1. Gradient routes
/// to the argmax row per component, ties to the lowest row index.
Tensor rowwise_max(const Tensor& stack);

/// Batched max-relative term: out[i] = max over j in lists[i] of
/// (sources[j] - centers[i]), elementwise; empty list -> zero row.
/// lists[i] indexes rows of `sources`; ties keep the earliest list entry.
Tensor neighbor_max_diff(const Tensor& sources, const Tensor& centers,
                         const std::vector<std::vector<std::uint32_t>>& lists);

/// out[i] = mean of sources rows listed in lists[i]; empty list -> zero row.
Tensor neighbor_mean(const Tensor& sources,
                     const std::vector<std::vector<std::uint32_t>>& lists);

/// Softmax cross-entropy of a logit vector against an integer label.
Tensor cross_entropy_logits(const Tensor& logits, std::size_t label);

/// Reverse-mode pass from a scalar; fills grad on every reachable
/// requires_grad tensor.
void backward(const Tensor& loss);

// ---- VGPT binary tensor format -------------------------------------------
// magic "VGPT", u32 LE ndim, ndim u32 LE dims, row-major f32 payload.

void write_vgpt(const std::string& path, const Tensor& t);
Tensor read_vgpt(const std::string& path);
std::vector<unsigned char> vgpt_bytes(const Tensor& t);

}  // namespace vgp

#endif
