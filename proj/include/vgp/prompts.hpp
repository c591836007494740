#ifndef VGP_PROMPTS_HPP
#define VGP_PROMPTS_HPP

#include <optional>
#include <string>
#include <vector>

#include "vgp/backbone.hpp"
#include "vgp/graph.hpp"
#include "vgp/rng.hpp"
#include "vgp/tensor.hpp"

namespace vgp {

struct PromptBlock {
    Tensor seeds;  // [M x r] virtual-node seeds
    Tensor p_g;    // [r x d] graph-level projection
    Tensor p_e;    // [r x d] edge-level projection
    Tensor p_n;    // [r x d] node-level projection
    Tensor s1;     // [d x r_hidden] semantic extractor, layer 1
    Tensor s2;     // [r_hidden x r] semantic extractor, layer 2
};

/// Trainable prompt state. One PromptBlock per backbone block; the semantic
/// extractor is shared between node and edge prompts within a block and
/// independent across blocks. None of these tensors overlap BackboneParams.
struct PromptParams {
    double alpha = 0.2;
    double beta = 0.2;
    std::size_t m = 4;
    std::size_t r = 32;
    std::size_t r_hidden = 32;
    std::vector<PromptBlock> blocks;

    /// Training init: P_g/P_e/P_n zero (node and edge deltas vanish at step
    /// 0), seeds and MLP_s Gaussian(0, 0.02^2).
    static PromptParams init(const BackboneConfig& cfg, std::size_t m, std::size_t r,
                             double alpha, double beta, Rng& rng);

    /// Fully random init for gradient checks and equivalence trials.
    static PromptParams random(const BackboneConfig& cfg, std::size_t m, std::size_t r,
                               double alpha, double beta, Rng& rng, double stddev = 0.3);

    /// Same, for a bare feature dimension (block-level tests).
    static PromptParams random_for_dim(std::size_t d, std::size_t blocks, std::size_t m,
                                       std::size_t r, double alpha, double beta, Rng& rng,
                                       double stddev = 0.3);

    static std::size_t hidden_width(std::size_t r, std::size_t d);

    std::vector<Tensor> all_tensors() const;
    void validate(std::size_t d) const;
};

/// Extended node set plus the wiring built around it.
struct AttachResult {
    Tensor x_ext;        // [(N+M) x d]; equals the input when M == 0
    GraphTopology topo;  // real lists over the full pool (euclidean),
                         // virtual lists over real nodes (cosine)
};

// ---- the three prompt operations -------------------------------------------

/// Two-layer semantic extractor: gelu(x . S1) . S2 -> r components.
Tensor semantic_extract(const Tensor& x, const Tensor& s1, const Tensor& s2);

/// Projects the seeds into feature space, appends them as virtual nodes and
/// wires the graph: each virtual node takes its top-K real nodes by cosine
/// similarity; real-node KNN is rebuilt over the extended candidate pool so
/// the virtual nodes can feed back into real neighborhoods.
AttachResult selo_graph_attach(const Tensor& x, const PromptBlock& pb, std::size_t m,
                               std::size_t k);

/// alpha-blend of the low-rank semantic refinement into a node feature.
/// alpha == 0 returns the input tensor itself.
Tensor selo_node_apply(const Tensor& x_i, const PromptBlock& pb, double alpha);

/// beta-blend of the averaged neighbor semantics into a center feature.
/// beta == 0 returns the input tensor itself; an empty neighborhood
/// contributes only the (1-beta) scaling.
Tensor selo_edge_apply(const Tensor& x_c, const Tensor& neighbor_feats, const PromptBlock& pb,
                       double beta);

// ---- the two block paths ----------------------------------------------------

/// Per-node composition of attach, node prompt, aggregation, update and edge
/// prompt, then the feed-forward layer. Virtual nodes are dropped at exit.
Tensor prompted_block_compositional(const Tensor& x, const BlockParams& bp,
                                    const PromptBlock& pb, const PromptParams& pp,
                                    std::size_t k,
                                    const GraphTopology* frozen_topo = nullptr);

/// Straight-line batched reformulation of the same block; shares only the
/// attach step and the primitive tensor ops with the compositional path.
Tensor prompted_block_fused(const Tensor& x, const BlockParams& bp, const PromptBlock& pb,
                            const PromptParams& pp, std::size_t k,
                            const GraphTopology* frozen_topo = nullptr);

enum class BlockPath { fused, compositional };

/// Full prompted network: embed, then one prompted block per backbone block.
Tensor prompted_forward(const Tensor& image, const BackboneParams& params,
                        const BackboneConfig& cfg, const PromptParams& prompts,
                        BlockPath path = BlockPath::fused, std::vector<Tensor>* taps = nullptr);

// ---- checkpoint -------------------------------------------------------------

void save_prompts(const std::string& dir, const PromptParams& prompts);
PromptParams load_prompts(const std::string& dir, const BackboneConfig& cfg);

}  // namespace vgp

#endif
