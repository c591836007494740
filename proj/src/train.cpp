#include "vgp/train.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <unordered_map>

#include <json.hpp>

namespace fs = std::filesystem;
using nlohmann::json;

namespace vgp {

void TrainConfig::validate() const {
    if (lr <= 0.0) throw ConfigError("train config: lr must be > 0");
    if (epochs < 1) throw ConfigError("train config: epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("train config: batch_size must be >= 1");
    if (weight_decay < 0.0) throw ConfigError("train config: weight_decay must be >= 0");
    if (schedule != "cosine") throw ConfigError("train config: schedule must be 'cosine'");
}

AdamW::AdamW(std::vector<Tensor> params, double beta1, double beta2, double eps)
    : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps) {
    m_.resize(params_.size());
    v_.resize(params_.size());
    for (std::size_t i = 0; i < params_.size(); ++i) {
        m_[i].assign(params_[i].size(), 0.0);
        v_[i].assign(params_[i].size(), 0.0);
    }
}

void AdamW::zero_grad() {
    for (auto& p : params_) p.zero_grad();
}

void AdamW::step(double lr, double weight_decay) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        Tensor& p = params_[i];
        if (!p.has_grad()) continue;  // never touched this step
        const auto& g = p.grad();
        auto& data = p.mutable_data();
        for (std::size_t c = 0; c < data.size(); ++c) {
            m_[i][c] = beta1_ * m_[i][c] + (1.0 - beta1_) * g[c];
            v_[i][c] = beta2_ * v_[i][c] + (1.0 - beta2_) * g[c] * g[c];
            const double mhat = m_[i][c] / bc1;
            const double vhat = v_[i][c] / bc2;
            data[c] -= lr * mhat / (std::sqrt(vhat) + eps_);
            data[c] -= lr * weight_decay * data[c];  // decoupled decay
        }
    }
}

void AdamW::clip_gradients(double max_norm) {
    double sq = 0.0;
    for (const auto& p : params_)
        if (p.has_grad())
            for (double g : p.grad()) sq += g * g;
    const double norm = std::sqrt(sq);
    if (norm <= max_norm || norm == 0.0) return;
    const double s = max_norm / norm;
    for (auto& p : params_)
        if (p.has_grad())
            for (double& g : p.impl()->grad) g *= s;
}

double cosine_lr(double base_lr, std::size_t epoch, std::size_t total_epochs) {
    if (total_epochs == 0) return base_lr;
    const double frac = static_cast<double>(epoch) / static_cast<double>(total_epochs);
    return base_lr * 0.5 * (1.0 + std::cos(M_PI * frac));
}

Dataset synthetic_dataset(std::uint64_t seed, std::size_t n, std::size_t image_h,
                          std::size_t image_w, std::size_t channels) {
    Rng rng(seed);
    Dataset ds;
    ds.classes = 2;
    ds.images.reserve(n);
    ds.labels.reserve(n);
    const double two_pi = 6.283185307179586476925286766559;
    for (std::size_t i = 0; i < n; ++i) {
        const int label = static_cast<int>(i % 2);
        const double freq = label == 0 ? 1.5 : 4.0;  // cycles across the image
        const double theta = rng.uniform(0.0, two_pi);
        const double phase = rng.uniform(0.0, two_pi);
        const double cx = std::cos(theta), sx = std::sin(theta);
        std::vector<double> img(image_h * image_w * channels);
        for (std::size_t y = 0; y < image_h; ++y)
            for (std::size_t x = 0; x < image_w; ++x) {
                const double u =
                    (static_cast<double>(x) * cx + static_cast<double>(y) * sx) /
                    static_cast<double>(image_w);
                const double base = std::sin(two_pi * freq * u + phase);
                for (std::size_t c = 0; c < channels; ++c)
                    img[(y * image_w + x) * channels + c] = base + 0.35 * rng.normal();
            }
        ds.images.push_back(Tensor::from({image_h, image_w, channels}, std::move(img)));
        ds.labels.push_back(label);
    }
    return ds;
}

void save_dataset(const std::string& dir, const Dataset& ds) {
    fs::create_directories(dir);
    json manifest;
    manifest["kind"] = "vgp-dataset";
    manifest["classes"] = ds.classes;
    json entries = json::array();
    for (std::size_t i = 0; i < ds.images.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof(name), "sample_%05zu.vgpt", i);
        write_vgpt((fs::path(dir) / name).string(), ds.images[i]);
        entries.push_back({{"file", name}, {"label", ds.labels[i]}});
    }
    manifest["samples"] = entries;
    std::ofstream os(fs::path(dir) / "manifest.json");
    os << manifest.dump(2) << "\n";
}

Dataset load_dataset(const std::string& dir) {
    std::ifstream is(fs::path(dir) / "manifest.json");
    if (!is) throw std::runtime_error("load_dataset: missing manifest in " + dir);
    json manifest = json::parse(is);
    Dataset ds;
    ds.classes = manifest.at("classes").get<std::size_t>();
    for (const auto& e : manifest.at("samples")) {
        ds.images.push_back(read_vgpt((fs::path(dir) / e.at("file").get<std::string>()).string()));
        ds.labels.push_back(e.at("label").get<int>());
    }
    return ds;
}

Tensor head_forward(const Tensor& node_features, const Tensor& w_head) {
    if (w_head.ndim() != 2 || w_head.cols() < 2)
        throw ShapeError("head_forward: W_head must map to >= 2 classes, got " +
                         shape_str(w_head.shape()));
    return vecmat(mean_rows(node_features), w_head);
}

LogitsFn make_logits_fn(const BackboneParams& backbone, const BackboneConfig& cfg,
                        const PromptParams* prompts, const Tensor& w_head) {
    if (prompts) {
        PromptParams copy_handle = *prompts;  // shares tensor storage
        return [&backbone, cfg, copy_handle, w_head](const Tensor& image) {
            return head_forward(prompted_forward(image, backbone, cfg, copy_handle), w_head);
        };
    }
    // frozen features never change under head-only training: pool once per image
    auto cache = std::make_shared<std::unordered_map<const TensorImpl*, Tensor>>();
    return [&backbone, cfg, w_head, cache](const Tensor& image) {
        auto it = cache->find(image.impl().get());
        if (it == cache->end()) {
            NoGradGuard ng;
            Tensor pooled = mean_rows(backbone_forward(image, backbone, cfg));
            it = cache->emplace(image.impl().get(), pooled).first;
        }
        return vecmat(it->second, w_head);
    };
}

double train_step(const std::vector<std::size_t>& batch, const Dataset& data,
                  const LogitsFn& logits_fn, AdamW& opt, double lr, double weight_decay,
                  bool grad_clip, double clip_norm) {
    opt.zero_grad();
    double loss_sum = 0.0;
    const double inv_batch = 1.0 / static_cast<double>(batch.size());
    for (std::size_t idx : batch) {
        Tensor logits = logits_fn(data.images[idx]);
        Tensor loss = cross_entropy_logits(logits, static_cast<std::size_t>(data.labels[idx]));
        if (!std::isfinite(loss.item()))
            throw NumericFailure(lr, opt.steps_taken(), "loss");
        loss_sum += loss.item();
        backward(scale(loss, inv_batch));
    }
    if (grad_clip) opt.clip_gradients(clip_norm);
    opt.step(lr, weight_decay);
    return loss_sum * inv_batch;
}

double evaluate(const Dataset& data, const LogitsFn& logits_fn) {
    if (data.images.empty()) throw std::runtime_error("evaluate: empty dataset");
    NoGradGuard ng;
    std::size_t correct = 0;
    for (std::size_t i = 0; i < data.images.size(); ++i) {
        Tensor logits = logits_fn(data.images[i]);
        std::size_t best = 0;
        for (std::size_t c = 1; c < logits.size(); ++c)
            if (logits.at(c) > logits.at(best)) best = c;  // ties keep lowest index
        if (static_cast<int>(best) == data.labels[i]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(data.images.size());
}

TrainResult train_model(const BackboneParams& backbone, const BackboneConfig& cfg,
                        PromptParams* prompts, Tensor& w_head, const Dataset& train_set,
                        const Dataset& val_set, const TrainConfig& tc,
                        const std::string& metrics_path) {
    tc.validate();
    if (train_set.images.empty()) throw std::runtime_error("train_model: empty training set");

    std::vector<Tensor> trainable;
    if (prompts) {
        auto pt = prompts->all_tensors();
        trainable.insert(trainable.end(), pt.begin(), pt.end());
    }
    w_head.set_requires_grad(true);
    trainable.push_back(w_head);
    AdamW opt(trainable);

    LogitsFn logits_fn = make_logits_fn(backbone, cfg, prompts, w_head);

    std::ofstream metrics;
    if (!metrics_path.empty()) {
        metrics.open(metrics_path, std::ios::trunc);
        if (!metrics) throw std::runtime_error("train_model: cannot open " + metrics_path);
    }

    Rng shuffle_rng(tc.seed ^ 0x9e3779b97f4a7c15ull);
    std::vector<std::size_t> order(train_set.images.size());
    std::iota(order.begin(), order.end(), 0);

    TrainResult result;
    for (std::size_t epoch = 0; epoch < tc.epochs; ++epoch) {
        const double lr = cosine_lr(tc.lr, epoch, tc.epochs);
        // Fisher-Yates with the seeded generator
        for (std::size_t i = order.size(); i > 1; --i) {
            const std::size_t j = static_cast<std::size_t>(shuffle_rng.integer(i));
            std::swap(order[i - 1], order[j]);
        }
        double loss_acc = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < order.size(); start += tc.batch_size) {
            const std::size_t end = std::min(order.size(), start + tc.batch_size);
            std::vector<std::size_t> batch(order.begin() + start, order.begin() + end);
            loss_acc += train_step(batch, train_set, logits_fn, opt, lr, tc.weight_decay,
                                   tc.grad_clip, tc.clip_norm);
            ++batches;
        }
        EpochMetrics em;
        em.epoch = epoch;
        em.lr = lr;
        em.train_loss = loss_acc / static_cast<double>(batches);
        em.train_acc = evaluate(train_set, logits_fn);
        em.val_acc = val_set.images.empty() ? 0.0 : evaluate(val_set, logits_fn);
        result.best_val_acc = std::max(result.best_val_acc, em.val_acc);
        result.epochs.push_back(em);
        if (metrics.is_open()) {
            json line = {{"epoch", em.epoch},
                         {"lr", em.lr},
                         {"train_loss", em.train_loss},
                         {"train_acc", em.train_acc},
                         {"val_acc", em.val_acc}};
            metrics << line.dump() << "\n";
        }
    }
    return result;
}

ParamReport count_params(const BackboneParams& backbone, const BackboneConfig& cfg,
                         const PromptParams* prompts, const Tensor& w_head) {
    ParamReport report;
    for (const auto& t : backbone.all_tensors()) report.frozen_params += t.size();
    report.trainable_params = w_head.size();
    if (prompts)
        for (const auto& t : prompts->all_tensors()) report.trainable_params += t.size();
    report.total_params = report.trainable_params + report.frozen_params;

    const std::size_t full_ft = report.frozen_params + w_head.size();
    report.reduction_pct =
        100.0 * (1.0 - static_cast<double>(report.trainable_params) /
                           static_cast<double>(full_ft));

    // 2 * (matmul mult-adds) over one forward pass
    const std::size_t n = cfg.n_patches();
    const std::size_t d = cfg.d, dff = cfg.d_ff;
    const std::size_t m = prompts ? prompts->m : 0;
    const std::size_t rh = prompts ? prompts->r_hidden : 0;
    const std::size_t r = prompts ? prompts->r : 0;
    std::size_t ma = n * cfg.patch_vec() * d;  // embed
    for (std::size_t b = 0; b < cfg.blocks; ++b) {
        ma += n * (2 * d) * d;  // aggregation
        ma += n * d * d;        // update
        ma += n * d * dff + n * dff * d;  // ffn
        if (prompts) {
            ma += (n + m) * (d * rh + rh * r);  // shared semantic extractor
            ma += n * r * d;                    // node projection
            ma += m * r * d;                    // virtual-node projection
            ma += n * r * d;                    // edge projection
        }
    }
    ma += d * w_head.cols();  // head
    report.approx_flops_forward = 2 * ma;
    return report;
}

std::string param_report_json(const ParamReport& report) {
    json j = {{"total_params", report.total_params},
              {"trainable_params", report.trainable_params},
              {"frozen_params", report.frozen_params},
              {"reduction_pct", report.reduction_pct},
              {"approx_flops_forward", report.approx_flops_forward}};
    return j.dump(2);
}

}  // namespace vgp
