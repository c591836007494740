#ifndef VGP_GRAPH_HPP
#define VGP_GRAPH_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "vgp/tensor.hpp"

namespace vgp {

enum class Metric { euclidean, cosine };

std::string metric_name(Metric m);

/// Per-sample directed neighborhood structure: neighbors[i] lists the
/// in-neighbors j of node i (edge j -> i), sorted by rank (closest first,
/// ties by lowest index). Indices may point at virtual prompt nodes, which
/// occupy rows [n_real, n_real + n_virtual).
struct GraphTopology {
    std::size_t n_real = 0;
    std::size_t n_virtual = 0;
    std::vector<std::vector<std::uint32_t>> neighbors;
    std::string metric_tag;

    std::size_t n_total() const { return n_real + n_virtual; }
    void validate() const;  // throws on self-loops, duplicates, range errors
};

/// JSON export: array of neighbor arrays (one per node, real then virtual).
std::string topology_to_json(const GraphTopology& topo);

struct PatchConfig {
    std::size_t image_h = 0;
    std::size_t image_w = 0;
    std::size_t patch_size = 0;
    std::size_t d = 0;
    std::size_t k = 0;

    std::size_t patches_h() const { return image_h / patch_size; }
    std::size_t patches_w() const { return image_w / patch_size; }
    std::size_t n_patches() const { return patches_h() * patches_w(); }
    void validate() const;
};

/// Splits an [h x w x c] image into non-overlapping patches (row-major patch
/// order), flattens each patch row-major (rows, then pixels, then channels)
/// and maps it through the embedder: returns [N x d].
Tensor embed_patches(const Tensor& image, const PatchConfig& cfg, const Tensor& embedder);

/// Cosine similarity with the zero-norm convention: any zero-norm operand
/// yields similarity 0.
double cosine_similarity(const double* a, const double* b, std::size_t d);

/// Brute-force KNN over feature rows. Each node's in-neighbors are the
/// min(K, n-1) other nodes with the smallest Euclidean distance (or largest
/// cosine similarity), ties broken by lowest index, lists sorted by rank.
GraphTopology knn_build(const Tensor& features, std::size_t k, Metric metric);

/// Neighbor lists of the min(k, n_candidates) best-ranked candidates for one
/// query row. Used by knn_build and by the virtual-node wiring.
std::vector<std::uint32_t> top_candidates(const double* query, const Tensor& candidates,
                                          std::size_t k, Metric metric,
                                          std::int64_t exclude_index);

}  // namespace vgp

#endif
