#include "vgp/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace vgp {

namespace {

thread_local bool g_grad_enabled = true;
thread_local bool g_finite_checks = false;

constexpr double kGeluCoef = 0.044715;

double gelu_scalar(double x) {
    // tanh approximation: 0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3)))
    static const double kSqrt2OverPi = std::sqrt(2.0 / M_PI);
    const double u = kSqrt2OverPi * (x + kGeluCoef * x * x * x);
    return 0.5 * x * (1.0 + std::tanh(u));
}

double gelu_grad_scalar(double x) {
    static const double kSqrt2OverPi = std::sqrt(2.0 / M_PI);
    const double u = kSqrt2OverPi * (x + kGeluCoef * x * x * x);
    const double t = std::tanh(u);
    const double du = kSqrt2OverPi * (1.0 + 3.0 * kGeluCoef * x * x);
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

void check_output_finite(const TensorImpl& out) {
    if (!g_finite_checks) return;
    for (double v : out.data) {
        if (!std::isfinite(v)) throw NonFiniteError(out.op);
    }
}

Tensor make_result(Shape shape, std::vector<double> data, const char* op,
                   std::vector<Tensor> inputs,
                   std::function<void(TensorImpl&)> backward_fn) {
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    impl->op = op;
    bool needs_grad = false;
    for (const auto& in : inputs) needs_grad = needs_grad || in.impl()->requires_grad;
    if (g_grad_enabled && needs_grad) {
        impl->requires_grad = true;
        impl->parents.reserve(inputs.size());
        for (const auto& in : inputs) impl->parents.push_back(in.impl());
        impl->backward_fn = std::move(backward_fn);
    }
    check_output_finite(*impl);
    return Tensor(std::move(impl));
}

void require(bool cond, const std::string& msg) {
    if (!cond) throw ShapeError(msg);
}

}  // namespace

std::size_t numel(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

bool grad_enabled() { return g_grad_enabled; }
void set_finite_checks(bool on) { g_finite_checks = on; }
bool finite_checks() { return g_finite_checks; }

void TensorImpl::ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
}

Tensor Tensor::zeros(Shape shape) {
    return from(std::move(shape), {});
}

Tensor Tensor::full(Shape shape, double value) {
    std::size_t n = numel(shape);
    return from(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::from(Shape shape, std::vector<double> data) {
    auto impl = std::make_shared<TensorImpl>();
    std::size_t n = numel(shape);
    if (data.empty()) data.assign(n, 0.0);
    require(data.size() == n, "tensor data length " + std::to_string(data.size()) +
                                  " does not match shape " + shape_str(shape));
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    return Tensor(std::move(impl));
}

Tensor Tensor::eye(std::size_t n) {
    std::vector<double> d(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) d[i * n + i] = 1.0;
    return from({n, n}, std::move(d));
}

std::size_t Tensor::rows() const {
    require(ndim() == 2, "rows(): tensor is not 2-D: " + shape_str(shape()));
    return shape()[0];
}

std::size_t Tensor::cols() const {
    require(ndim() == 2, "cols(): tensor is not 2-D: " + shape_str(shape()));
    return shape()[1];
}

const std::vector<double>& Tensor::grad() const {
    static const std::vector<double> empty;
    return impl_->grad.empty() ? empty : impl_->grad;
}

void Tensor::zero_grad() {
    if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

double Tensor::item() const {
    require(size() == 1, "item(): tensor has " + std::to_string(size()) + " elements");
    return impl_->data[0];
}

Tensor& Tensor::set_requires_grad(bool v) {
    impl_->requires_grad = v;
    return *this;
}

Tensor& Tensor::set_name(std::string n) {
    impl_->name = std::move(n);
    return *this;
}

// ---- ops -------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    require(a.ndim() == 2 && b.ndim() == 2,
            "matmul: expects 2-D operands, got " + shape_str(a.shape()) + " and " +
                shape_str(b.shape()));
    require(a.cols() == b.rows(), "matmul: inner dimensions disagree: " +
                                      shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    std::vector<double> out(m * n, 0.0);
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    for (std::size_t i = 0; i < m; ++i) {
        double* oi = out.data() + i * n;
        const double* ai = pa + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = ai[p];
            const double* bp = pb + p * n;
            for (std::size_t j = 0; j < n; ++j) oi[j] += av * bp[j];
        }
    }
    auto ai = a.impl();
    auto bi = b.impl();
    return make_result({m, n}, std::move(out), "matmul", {a, b},
                       [m, k, n, ai, bi](TensorImpl& self) {
                           const double* g = self.grad.data();
                           if (ai->requires_grad) {
                               ai->ensure_grad();
                               for (std::size_t i = 0; i < m; ++i)
                                   for (std::size_t p = 0; p < k; ++p) {
                                       double s = 0.0;
                                       const double* bp = bi->data.data() + p * n;
                                       const double* gi = g + i * n;
                                       for (std::size_t j = 0; j < n; ++j) s += gi[j] * bp[j];
                                       ai->grad[i * k + p] += s;
                                   }
                           }
                           if (bi->requires_grad) {
                               bi->ensure_grad();
                               for (std::size_t p = 0; p < k; ++p)
                                   for (std::size_t i = 0; i < m; ++i) {
                                       const double av = ai->data[i * k + p];
                                       const double* gi = g + i * n;
                                       double* bg = bi->grad.data() + p * n;
                                       for (std::size_t j = 0; j < n; ++j) bg[j] += av * gi[j];
                                   }
                           }
                       });
}

Tensor vecmat(const Tensor& x, const Tensor& w) {
    require(x.ndim() == 1, "vecmat: x must be 1-D, got " + shape_str(x.shape()));
    require(w.ndim() == 2 && x.size() == w.rows(),
            "vecmat: dimensions disagree: " + shape_str(x.shape()) + " vs " +
                shape_str(w.shape()));
    const std::size_t k = x.size(), n = w.cols();
    std::vector<double> out(n, 0.0);
    for (std::size_t p = 0; p < k; ++p) {
        const double xv = x.at(p);
        const double* wp = w.data().data() + p * n;
        for (std::size_t j = 0; j < n; ++j) out[j] += xv * wp[j];
    }
    auto xi = x.impl();
    auto wi = w.impl();
    return make_result({n}, std::move(out), "vecmat", {x, w},
                       [k, n, xi, wi](TensorImpl& self) {
                           const double* g = self.grad.data();
                           if (xi->requires_grad) {
                               xi->ensure_grad();
                               for (std::size_t p = 0; p < k; ++p) {
                                   double s = 0.0;
                                   const double* wp = wi->data.data() + p * n;
                                   for (std::size_t j = 0; j < n; ++j) s += g[j] * wp[j];
                                   xi->grad[p] += s;
                               }
                           }
                           if (wi->requires_grad) {
                               wi->ensure_grad();
                               for (std::size_t p = 0; p < k; ++p) {
                                   const double xv = xi->data[p];
                                   double* wg = wi->grad.data() + p * n;
                                   for (std::size_t j = 0; j < n; ++j) wg[j] += xv * g[j];
                               }
                           }
                       });
}

Tensor add(const Tensor& a, const Tensor& b) {
    require(a.shape() == b.shape(), "add: shapes disagree: " + shape_str(a.shape()) +
                                        " vs " + shape_str(b.shape()));
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) + b.at(i);
    auto ai = a.impl();
    auto bi = b.impl();
    return make_result(a.shape(), std::move(out), "add", {a, b}, [ai, bi](TensorImpl& self) {
        if (ai->requires_grad) {
            ai->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) ai->grad[i] += self.grad[i];
        }
        if (bi->requires_grad) {
            bi->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) bi->grad[i] += self.grad[i];
        }
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require(a.shape() == b.shape(), "sub: shapes disagree: " + shape_str(a.shape()) +
                                        " vs " + shape_str(b.shape()));
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) - b.at(i);
    auto ai = a.impl();
    auto bi = b.impl();
    return make_result(a.shape(), std::move(out), "sub", {a, b}, [ai, bi](TensorImpl& self) {
        if (ai->requires_grad) {
            ai->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) ai->grad[i] += self.grad[i];
        }
        if (bi->requires_grad) {
            bi->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) bi->grad[i] -= self.grad[i];
        }
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require(a.shape() == b.shape(), "mul: shapes disagree: " + shape_str(a.shape()) + " vs " +
                                        shape_str(b.shape()));
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) * b.at(i);
    auto ai = a.impl();
    auto bi = b.impl();
    return make_result(a.shape(), std::move(out), "mul", {a, b}, [ai, bi](TensorImpl& self) {
        if (ai->requires_grad) {
            ai->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i)
                ai->grad[i] += bi->data[i] * self.grad[i];
        }
        if (bi->requires_grad) {
            bi->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i)
                bi->grad[i] += ai->data[i] * self.grad[i];
        }
    });
}

Tensor scale(const Tensor& a, double c) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = c * a.at(i);
    auto ai = a.impl();
    return make_result(a.shape(), std::move(out), "scale", {a}, [ai, c](TensorImpl& self) {
        if (!ai->requires_grad) return;
        ai->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) ai->grad[i] += c * self.grad[i];
    });
}

Tensor gelu(const Tensor& a) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = gelu_scalar(a.at(i));
    auto ai = a.impl();
    return make_result(a.shape(), std::move(out), "gelu", {a}, [ai](TensorImpl& self) {
        if (!ai->requires_grad) return;
        ai->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
            ai->grad[i] += gelu_grad_scalar(ai->data[i]) * self.grad[i];
    });
}

Tensor concat_cols(const Tensor& a, const Tensor& b) {
    require(a.ndim() == 2 && b.ndim() == 2 && a.rows() == b.rows(),
            "concat_cols: incompatible shapes " + shape_str(a.shape()) + " and " +
                shape_str(b.shape()));
    const std::size_t m = a.rows(), p = a.cols(), q = b.cols();
    std::vector<double> out(m * (p + q));
    for (std::size_t i = 0; i < m; ++i) {
        std::copy_n(a.data().data() + i * p, p, out.data() + i * (p + q));
        std::copy_n(b.data().data() + i * q, q, out.data() + i * (p + q) + p);
    }
    auto ai = a.impl();
    auto bi = b.impl();
    return make_result({m, p + q}, std::move(out), "concat_cols", {a, b},
                       [m, p, q, ai, bi](TensorImpl& self) {
                           for (std::size_t i = 0; i < m; ++i) {
                               const double* g = self.grad.data() + i * (p + q);
                               if (ai->requires_grad) {
                                   ai->ensure_grad();
                                   for (std::size_t j = 0; j < p; ++j) ai->grad[i * p + j] += g[j];
                               }
                               if (bi->requires_grad) {
                                   bi->ensure_grad();
                                   for (std::size_t j = 0; j < q; ++j)
                                       bi->grad[i * q + j] += g[p + j];
                               }
                           }
                       });
}

Tensor concat_vec(const Tensor& a, const Tensor& b) {
    require(a.ndim() == 1 && b.ndim() == 1, "concat_vec: expects 1-D operands");
    const std::size_t p = a.size(), q = b.size();
    std::vector<double> out(p + q);
    std::copy_n(a.data().data(), p, out.data());
    std::copy_n(b.data().data(), q, out.data() + p);
    auto ai = a.impl();
    auto bi = b.impl();
    return make_result({p + q}, std::move(out), "concat_vec", {a, b},
                       [p, q, ai, bi](TensorImpl& self) {
                           if (ai->requires_grad) {
                               ai->ensure_grad();
                               for (std::size_t j = 0; j < p; ++j) ai->grad[j] += self.grad[j];
                           }
                           if (bi->requires_grad) {
                               bi->ensure_grad();
                               for (std::size_t j = 0; j < q; ++j) bi->grad[j] += self.grad[p + j];
                           }
                       });
}

Tensor vstack(const Tensor& a, const Tensor& b) {
    require(a.ndim() == 2 && b.ndim() == 2 && a.cols() == b.cols(),
            "vstack: incompatible shapes " + shape_str(a.shape()) + " and " +
                shape_str(b.shape()));
    const std::size_t m = a.rows(), n = b.rows(), d = a.cols();
    std::vector<double> out(a.data());
    out.insert(out.end(), b.data().begin(), b.data().end());
    auto ai = a.impl();
    auto bi = b.impl();
    return make_result({m + n, d}, std::move(out), "vstack", {a, b},
                       [m, n, d, ai, bi](TensorImpl& self) {
                           if (ai->requires_grad) {
                               ai->ensure_grad();
                               for (std::size_t i = 0; i < m * d; ++i) ai->grad[i] += self.grad[i];
                           }
                           if (bi->requires_grad) {
                               bi->ensure_grad();
                               for (std::size_t i = 0; i < n * d; ++i)
                                   bi->grad[i] += self.grad[m * d + i];
                           }
                       });
}

Tensor gather_rows(const Tensor& a, const std::vector<std::uint32_t>& idx) {
    require(a.ndim() == 2, "gather_rows: expects 2-D input, got " + shape_str(a.shape()));
    const std::size_t d = a.cols();
    std::vector<double> out(idx.size() * d);
    for (std::size_t i = 0; i < idx.size(); ++i) {
        require(idx[i] < a.rows(), "gather_rows: index out of range");
        std::copy_n(a.data().data() + idx[i] * d, d, out.data() + i * d);
    }
    auto ai = a.impl();
    auto indices = idx;
    return make_result({idx.size(), d}, std::move(out), "gather_rows", {a},
                       [d, ai, indices](TensorImpl& self) {
                           if (!ai->requires_grad) return;
                           ai->ensure_grad();
                           for (std::size_t i = 0; i < indices.size(); ++i)
                               for (std::size_t j = 0; j < d; ++j)
                                   ai->grad[indices[i] * d + j] += self.grad[i * d + j];
                       });
}

Tensor stack_rows(const std::vector<Tensor>& rows) {
    require(!rows.empty(), "stack_rows: needs at least one row");
    const std::size_t d = rows[0].size();
    std::vector<double> out;
    out.reserve(rows.size() * d);
    for (const auto& r : rows) {
        require(r.ndim() == 1 && r.size() == d, "stack_rows: rows must share one 1-D shape");
        out.insert(out.end(), r.data().begin(), r.data().end());
    }
    std::vector<Tensor> inputs = rows;
    const std::size_t n = rows.size();
    return make_result({n, d}, std::move(out), "stack_rows", inputs, [n, d](TensorImpl& self) {
        for (std::size_t i = 0; i < n; ++i) {
            auto& p = self.parents[i];
            if (!p->requires_grad) continue;
            p->ensure_grad();
            for (std::size_t j = 0; j < d; ++j) p->grad[j] += self.grad[i * d + j];
        }
    });
}

Tensor row(const Tensor& a, std::size_t i) {
    require(a.ndim() == 2 && i < a.rows(), "row: index out of range for " + shape_str(a.shape()));
    const std::size_t d = a.cols();
    std::vector<double> out(a.data().begin() + i * d, a.data().begin() + (i + 1) * d);
    auto ai = a.impl();
    return make_result({d}, std::move(out), "row", {a}, [d, i, ai](TensorImpl& self) {
        if (!ai->requires_grad) return;
        ai->ensure_grad();
        for (std::size_t j = 0; j < d; ++j) ai->grad[i * d + j] += self.grad[j];
    });
}

Tensor slice_rows(const Tensor& a, std::size_t start, std::size_t count) {
    require(a.ndim() == 2 && start + count <= a.rows(),
            "slice_rows: range out of bounds for " + shape_str(a.shape()));
    const std::size_t d = a.cols();
    std::vector<double> out(a.data().begin() + start * d, a.data().begin() + (start + count) * d);
    auto ai = a.impl();
    return make_result({count, d}, std::move(out), "slice_rows", {a},
                       [d, start, count, ai](TensorImpl& self) {
                           if (!ai->requires_grad) return;
                           ai->ensure_grad();
                           for (std::size_t i = 0; i < count * d; ++i)
                               ai->grad[start * d + i] += self.grad[i];
                       });
}

Tensor sub_rowvec(const Tensor& a, const Tensor& x) {
    require(a.ndim() == 2 && x.ndim() == 1 && a.cols() == x.size(),
            "sub_rowvec: incompatible shapes " + shape_str(a.shape()) + " and " +
                shape_str(x.shape()));
    const std::size_t k = a.rows(), d = a.cols();
    std::vector<double> out(k * d);
    for (std::size_t i = 0; i < k; ++i)
        for (std::size_t j = 0; j < d; ++j) out[i * d + j] = a.at(i, j) - x.at(j);
    auto ai = a.impl();
    auto xi = x.impl();
    return make_result({k, d}, std::move(out), "sub_rowvec", {a, x},
                       [k, d, ai, xi](TensorImpl& self) {
                           if (ai->requires_grad) {
                               ai->ensure_grad();
                               for (std::size_t i = 0; i < k * d; ++i) ai->grad[i] += self.grad[i];
                           }
                           if (xi->requires_grad) {
                               xi->ensure_grad();
                               for (std::size_t i = 0; i < k; ++i)
                                   for (std::size_t j = 0; j < d; ++j)
                                       xi->grad[j] -= self.grad[i * d + j];
                           }
                       });
}

Tensor mean_rows(const Tensor& a) {
    require(a.ndim() == 2 && a.rows() >= 1, "mean_rows: expects non-empty 2-D input");
    const std::size_t n = a.rows(), d = a.cols();
    std::vector<double> out(d, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) out[j] += a.at(i, j);
    for (std::size_t j = 0; j < d; ++j) out[j] /= static_cast<double>(n);
    auto ai = a.impl();
    return make_result({d}, std::move(out), "mean_rows", {a}, [n, d, ai](TensorImpl& self) {
        if (!ai->requires_grad) return;
        ai->ensure_grad();
        const double inv = 1.0 / static_cast<double>(n);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < d; ++j) ai->grad[i * d + j] += inv * self.grad[j];
    });
}

Tensor rowwise_max(const Tensor& stack) {
    require(stack.ndim() == 2, "rowwise_max: expects 2-D stack, got " + shape_str(stack.shape()));
    require(stack.rows() >= 1, "rowwise_max: empty stack rejected; caller substitutes zeros");
    const std::size_t k = stack.rows(), d = stack.cols();
    std::vector<double> out(d);
    std::vector<std::uint32_t> arg(d, 0);
    for (std::size_t j = 0; j < d; ++j) {
        double best = stack.at(0, j);
        std::uint32_t bi = 0;
        for (std::size_t i = 1; i < k; ++i) {
            const double v = stack.at(i, j);
            if (v > best) {  // strict: ties keep the lowest row index
                best = v;
                bi = static_cast<std::uint32_t>(i);
            }
        }
        out[j] = best;
        arg[j] = bi;
    }
    auto si = stack.impl();
    return make_result({d}, std::move(out), "rowwise_max", {stack},
                       [d, si, arg = std::move(arg)](TensorImpl& self) {
                           if (!si->requires_grad) return;
                           si->ensure_grad();
                           for (std::size_t j = 0; j < d; ++j)
                               si->grad[arg[j] * d + j] += self.grad[j];
                       });
}

Tensor neighbor_max_diff(const Tensor& sources, const Tensor& centers,
                         const std::vector<std::vector<std::uint32_t>>& lists) {
    require(sources.ndim() == 2 && centers.ndim() == 2 && sources.cols() == centers.cols(),
            "neighbor_max_diff: incompatible shapes " + shape_str(sources.shape()) + " and " +
                shape_str(centers.shape()));
    require(lists.size() == centers.rows(), "neighbor_max_diff: one list per center required");
    const std::size_t n = centers.rows(), d = centers.cols();
    std::vector<double> out(n * d, 0.0);
    std::vector<std::uint32_t> arg(n * d, 0);
    std::vector<unsigned char> nonempty(n, 0);
    for (std::size_t i = 0; i < n; ++i) {
        const auto& nb = lists[i];
        if (nb.empty()) continue;  // convention: zero row
        nonempty[i] = 1;
        for (std::size_t j = 0; j < d; ++j) {
            double best = sources.at(nb[0], j) - centers.at(i, j);
            std::uint32_t bi = nb[0];
            for (std::size_t t = 1; t < nb.size(); ++t) {
                const double v = sources.at(nb[t], j) - centers.at(i, j);
                if (v > best) {
                    best = v;
                    bi = nb[t];
                }
            }
            out[i * d + j] = best;
            arg[i * d + j] = bi;
        }
    }
    auto si = sources.impl();
    auto ci = centers.impl();
    return make_result(
        {n, d}, std::move(out), "neighbor_max_diff", {sources, centers},
        [n, d, si, ci, arg = std::move(arg), nonempty = std::move(nonempty)](TensorImpl& self) {
            for (std::size_t i = 0; i < n; ++i) {
                if (!nonempty[i]) continue;
                for (std::size_t j = 0; j < d; ++j) {
                    const double g = self.grad[i * d + j];
                    if (si->requires_grad) {
                        si->ensure_grad();
                        si->grad[arg[i * d + j] * d + j] += g;
                    }
                    if (ci->requires_grad) {
                        ci->ensure_grad();
                        ci->grad[i * d + j] -= g;
                    }
                }
            }
        });
}

Tensor neighbor_mean(const Tensor& sources, const std::vector<std::vector<std::uint32_t>>& lists) {
    require(sources.ndim() == 2, "neighbor_mean: expects 2-D sources");
    const std::size_t n = lists.size(), d = sources.cols();
    std::vector<double> out(n * d, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        const auto& nb = lists[i];
        if (nb.empty()) continue;
        for (std::uint32_t j : nb)
            for (std::size_t c = 0; c < d; ++c) out[i * d + c] += sources.at(j, c);
        const double inv = 1.0 / static_cast<double>(nb.size());
        for (std::size_t c = 0; c < d; ++c) out[i * d + c] *= inv;
    }
    auto si = sources.impl();
    auto copies = lists;
    return make_result({n, d}, std::move(out), "neighbor_mean", {sources},
                       [n, d, si, copies = std::move(copies)](TensorImpl& self) {
                           if (!si->requires_grad) return;
                           si->ensure_grad();
                           for (std::size_t i = 0; i < n; ++i) {
                               const auto& nb = copies[i];
                               if (nb.empty()) continue;
                               const double inv = 1.0 / static_cast<double>(nb.size());
                               for (std::uint32_t j : nb)
                                   for (std::size_t c = 0; c < d; ++c)
                                       si->grad[j * d + c] += inv * self.grad[i * d + c];
                           }
                       });
}

Tensor cross_entropy_logits(const Tensor& logits, std::size_t label) {
    require(logits.ndim() == 1 && logits.size() >= 2,
            "cross_entropy_logits: expects a logit vector with >= 2 classes");
    require(label < logits.size(), "cross_entropy_logits: label out of range");
    const std::size_t c = logits.size();
    double mx = logits.at(0);
    for (std::size_t i = 1; i < c; ++i) mx = std::max(mx, logits.at(i));
    double sum = 0.0;
    for (std::size_t i = 0; i < c; ++i) sum += std::exp(logits.at(i) - mx);
    const double lse = mx + std::log(sum);
    std::vector<double> out{lse - logits.at(label)};
    auto li = logits.impl();
    return make_result({1}, std::move(out), "cross_entropy", {logits},
                       [c, label, mx, sum, li](TensorImpl& self) {
                           if (!li->requires_grad) return;
                           li->ensure_grad();
                           const double g = self.grad[0];
                           for (std::size_t i = 0; i < c; ++i) {
                               const double p = std::exp(li->data[i] - mx) / sum;
                               li->grad[i] += g * (p - (i == label ? 1.0 : 0.0));
                           }
                       });
}

void backward(const Tensor& loss) {
    require(loss.size() == 1, "backward: loss must be scalar, got " + shape_str(loss.shape()));
    if (!loss.impl()->requires_grad) return;

    // iterative post-order topological sort
    std::vector<TensorImpl*> order;
    std::unordered_set<TensorImpl*> visited;
    std::vector<std::pair<TensorImpl*, std::size_t>> stack;
    stack.emplace_back(loss.impl().get(), 0);
    visited.insert(loss.impl().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            TensorImpl* p = node->parents[next++].get();
            if (p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    loss.impl()->ensure_grad();
    loss.impl()->grad[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorImpl* node = *it;
        if (node->backward_fn && !node->grad.empty()) node->backward_fn(*node);
    }
}

// ---- VGPT IO ----------------------------------------------------------------

namespace {

void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
    out.push_back(static_cast<unsigned char>(v & 0xff));
    out.push_back(static_cast<unsigned char>((v >> 8) & 0xff));
    out.push_back(static_cast<unsigned char>((v >> 16) & 0xff));
    out.push_back(static_cast<unsigned char>((v >> 24) & 0xff));
}

std::uint32_t get_u32(const unsigned char* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

}  // namespace

std::vector<unsigned char> vgpt_bytes(const Tensor& t) {
    std::vector<unsigned char> out;
    out.reserve(8 + 4 * t.shape().size() + 4 * t.size());
    out.push_back('V');
    out.push_back('G');
    out.push_back('P');
    out.push_back('T');
    put_u32(out, static_cast<std::uint32_t>(t.shape().size()));
    for (std::size_t d : t.shape()) put_u32(out, static_cast<std::uint32_t>(d));
    for (double v : t.data()) {
        float f = static_cast<float>(v);
        std::uint32_t bits;
        std::memcpy(&bits, &f, 4);
        put_u32(out, bits);
    }
    return out;
}

void write_vgpt(const std::string& path, const Tensor& t) {
    auto bytes = vgpt_bytes(t);
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("write_vgpt: cannot open " + path);
    os.write(reinterpret_cast<const char*>(bytes.data()),
             static_cast<std::streamsize>(bytes.size()));
    if (!os) throw std::runtime_error("write_vgpt: write failed for " + path);
}

Tensor read_vgpt(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("read_vgpt: cannot open " + path);
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(is)),
                                     std::istreambuf_iterator<char>());
    if (bytes.size() < 8 || bytes[0] != 'V' || bytes[1] != 'G' || bytes[2] != 'P' ||
        bytes[3] != 'T')
        throw std::runtime_error("read_vgpt: bad magic in " + path);
    const std::uint32_t ndim = get_u32(bytes.data() + 4);
    if (bytes.size() < 8 + 4 * static_cast<std::size_t>(ndim))
        throw std::runtime_error("read_vgpt: truncated header in " + path);
    Shape shape(ndim);
    for (std::uint32_t i = 0; i < ndim; ++i) shape[i] = get_u32(bytes.data() + 8 + 4 * i);
    const std::size_t n = numel(shape);
    const std::size_t payload = 8 + 4 * ndim;
    if (bytes.size() != payload + 4 * n)
        throw std::runtime_error("read_vgpt: payload size mismatch in " + path);
    std::vector<double> data(n);
    for (std::size_t i = 0; i < n; ++i) {
        const std::uint32_t bits = get_u32(bytes.data() + payload + 4 * i);
        float f;
        std::memcpy(&f, &bits, 4);
        data[i] = static_cast<double>(f);
    }
    return Tensor::from(std::move(shape), std::move(data));
}

}  // namespace vgp
