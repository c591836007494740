#ifndef VGP_TRAIN_HPP
#define VGP_TRAIN_HPP

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "vgp/backbone.hpp"
#include "vgp/prompts.hpp"
#include "vgp/tensor.hpp"

namespace vgp {

struct TrainConfig {
    double lr = 1e-3;
    double weight_decay = 0.05;
    std::size_t epochs = 20;
    std::string schedule = "cosine";
    std::size_t batch_size = 16;
    std::uint64_t seed = 7;
    bool grad_clip = false;
    double clip_norm = 1.0;

    void validate() const;
};

/// Thrown when a training step produces a non-finite loss.
struct NumericFailure : std::runtime_error {
    NumericFailure(double lr, std::size_t step, const std::string& tensor)
        : std::runtime_error("non-finite loss at step " + std::to_string(step) +
                             " (lr=" + std::to_string(lr) + ", tensor=" + tensor + ")") {}
};

/// Decoupled-weight-decay Adam over an explicit trainable set. Frozen
/// backbone tensors are simply never registered.
class AdamW {
public:
    explicit AdamW(std::vector<Tensor> params, double beta1 = 0.9, double beta2 = 0.999,
                   double eps = 1e-8);

    void zero_grad();
    void step(double lr, double weight_decay);
    /// Scales every gradient so the global norm stays within `max_norm`.
    void clip_gradients(double max_norm);
    std::size_t steps_taken() const { return t_; }
    const std::vector<Tensor>& params() const { return params_; }

private:
    std::vector<Tensor> params_;
    std::vector<std::vector<double>> m_, v_;
    double beta1_, beta2_, eps_;
    std::size_t t_ = 0;
};

double cosine_lr(double base_lr, std::size_t epoch, std::size_t total_epochs);

// ---- data -------------------------------------------------------------------

struct Dataset {
    std::vector<Tensor> images;  // [h x w x c] each
    std::vector<int> labels;
    std::size_t classes = 2;
};

/// Seeded two-class synthetic task: class-dependent oriented frequency
/// patterns plus Gaussian pixel noise.
Dataset synthetic_dataset(std::uint64_t seed, std::size_t n, std::size_t image_h,
                          std::size_t image_w, std::size_t channels);

void save_dataset(const std::string& dir, const Dataset& ds);
Dataset load_dataset(const std::string& dir);

// ---- model glue ---------------------------------------------------------------

/// Mean-pool over nodes then a linear map to C logits.
Tensor head_forward(const Tensor& node_features, const Tensor& w_head);

/// Forward closure: image -> logits. Built once per training/eval arm.
using LogitsFn = std::function<Tensor(const Tensor& image)>;

LogitsFn make_logits_fn(const BackboneParams& backbone, const BackboneConfig& cfg,
                        const PromptParams* prompts, const Tensor& w_head);

/// Average cross-entropy over a batch; fills gradients of the trainable set.
/// Returns the batch loss. Aborts with NumericFailure on a non-finite loss.
double train_step(const std::vector<std::size_t>& batch, const Dataset& data,
                  const LogitsFn& logits_fn, AdamW& opt, double lr, double weight_decay,
                  bool grad_clip, double clip_norm);

/// Top-1 accuracy (ties resolved to the lowest class index).
double evaluate(const Dataset& data, const LogitsFn& logits_fn);

struct EpochMetrics {
    std::size_t epoch = 0;
    double lr = 0.0;
    double train_loss = 0.0;
    double train_acc = 0.0;
    double val_acc = 0.0;
};

struct TrainResult {
    std::vector<EpochMetrics> epochs;
    double best_val_acc = 0.0;
};

/// Frozen-backbone fine-tuning loop. `prompts == nullptr` trains the head
/// only (linear probing). Metrics are streamed one JSON object per line when
/// `metrics_path` is non-empty.
TrainResult train_model(const BackboneParams& backbone, const BackboneConfig& cfg,
                        PromptParams* prompts, Tensor& w_head, const Dataset& train_set,
                        const Dataset& val_set, const TrainConfig& tc,
                        const std::string& metrics_path = "");

// ---- accounting ---------------------------------------------------------------

struct ParamReport {
    std::size_t total_params = 0;
    std::size_t trainable_params = 0;
    std::size_t frozen_params = 0;
    double reduction_pct = 0.0;  // vs the fully-trainable (backbone + head) count
    std::size_t approx_flops_forward = 0;
};

ParamReport count_params(const BackboneParams& backbone, const BackboneConfig& cfg,
                         const PromptParams* prompts, const Tensor& w_head);

std::string param_report_json(const ParamReport& report);

}  // namespace vgp

#endif
