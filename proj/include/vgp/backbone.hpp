#ifndef VGP_BACKBONE_HPP
#define VGP_BACKBONE_HPP

#include <optional>
#include <string>
#include <vector>

#include "vgp/graph.hpp"
#include "vgp/rng.hpp"
#include "vgp/tensor.hpp"

namespace vgp {

struct BackboneConfig {
    std::size_t image_h = 32;
    std::size_t image_w = 32;
    std::size_t channels = 1;
    std::size_t patch = 4;
    std::size_t d = 64;
    std::size_t d_ff = 256;
    std::size_t blocks = 4;
    std::size_t k = 9;
    bool freeze_topology = false;  // reuse block-1 neighbor lists in later blocks

    std::size_t n_patches() const { return (image_h / patch) * (image_w / patch); }
    std::size_t patch_vec() const { return patch * patch * channels; }
    PatchConfig patch_config() const {
        return PatchConfig{image_h, image_w, patch, d, k};
    }
    void validate() const;
};

struct BlockParams {
    Tensor w_agg;     // [2d x d]
    Tensor w_update;  // [d x d]
    Tensor w1;        // [d x d_ff]
    Tensor w2;        // [d_ff x d]
};

/// Frozen ViG weights. "Frozen" is a hard contract: the optimizer never sees
/// these tensors, and checksum() gives byte-level evidence.
struct BackboneParams {
    Tensor embedder;  // [patch_vec x d]
    std::vector<BlockParams> blocks;
    bool frozen = true;

    static BackboneParams random(const BackboneConfig& cfg, Rng& rng, double stddev = 0.05);
    std::vector<Tensor> all_tensors() const;
    std::uint64_t checksum() const;  // FNV-1a over the raw f64 bytes
};

// ---- single-block operations -------------------------------------------------

/// Max-relative aggregation for one node: [x_i || m] . W_agg with
/// m = rowwise max of {x_j - x_i}; an empty neighborhood contributes m = 0.
Tensor aggregate(const Tensor& x_i, const Tensor& neighbors, const Tensor& w_agg);

/// Residual update: x_i + agg . W_update.
Tensor update(const Tensor& x_i, const Tensor& agg, const Tensor& w_update);

/// Feed-forward with residual: gelu(X . W1) . W2 + X, rowwise.
Tensor ffn(const Tensor& x, const Tensor& w1, const Tensor& w2);

/// One grapher block over a fixed topology (aggregate + update then ffn),
/// batched over nodes.
Tensor block_forward(const Tensor& x, const GraphTopology& topo, const BlockParams& bp);

/// Full backbone: embed, then per block {knn -> aggregate+update -> ffn}.
/// If `taps` is non-null it receives the feature matrix after every block
/// (and the embedding when blocks == 0 contributes nothing extra).
Tensor backbone_forward(const Tensor& image, const BackboneParams& params,
                        const BackboneConfig& cfg, std::vector<Tensor>* taps = nullptr);

// ---- checkpoint: directory of VGPT tensors + JSON manifest ------------------

void save_backbone(const std::string& dir, const BackboneParams& params,
                   const BackboneConfig& cfg);
std::pair<BackboneParams, BackboneConfig> load_backbone(const std::string& dir);

}  // namespace vgp

#endif
