#include "vgp/graph.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

namespace vgp {

std::string metric_name(Metric m) {
    return m == Metric::euclidean ? "euclidean" : "cosine";
}

void GraphTopology::validate() const {
    if (neighbors.size() != n_total())
        throw std::runtime_error("topology: neighbor list count mismatch");
    for (std::size_t i = 0; i < neighbors.size(); ++i) {
        std::set<std::uint32_t> seen;
        for (std::uint32_t j : neighbors[i]) {
            if (j >= n_total()) throw std::runtime_error("topology: neighbor index out of range");
            if (j == i) throw std::runtime_error("topology: self-loop");
            if (!seen.insert(j).second) throw std::runtime_error("topology: duplicate neighbor");
        }
    }
}

std::string topology_to_json(const GraphTopology& topo) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < topo.neighbors.size(); ++i) {
        if (i) os << ',';
        os << '[';
        for (std::size_t t = 0; t < topo.neighbors[i].size(); ++t) {
            if (t) os << ',';
            os << topo.neighbors[i][t];
        }
        os << ']';
    }
    os << ']';
    return os.str();
}

void PatchConfig::validate() const {
    if (patch_size == 0 || image_h == 0 || image_w == 0)
        throw ConfigError("patch config: image and patch sizes must be positive");
    if (image_h % patch_size != 0 || image_w % patch_size != 0)
        throw ConfigError("patch config: image " + std::to_string(image_h) + "x" +
                          std::to_string(image_w) + " not divisible by patch size " +
                          std::to_string(patch_size));
    if (d < 1) throw ConfigError("patch config: d must be >= 1");
    if (k < 1) throw ConfigError("patch config: K must be >= 1");
}

Tensor embed_patches(const Tensor& image, const PatchConfig& cfg, const Tensor& embedder) {
    cfg.validate();
    if (image.ndim() != 3 || image.shape()[0] != cfg.image_h || image.shape()[1] != cfg.image_w)
        throw ConfigError("embed_patches: image shape " + shape_str(image.shape()) +
                          " does not match config " + std::to_string(cfg.image_h) + "x" +
                          std::to_string(cfg.image_w));
    const std::size_t c = image.shape()[2];
    const std::size_t p = cfg.patch_size;
    const std::size_t pvec = p * p * c;
    if (embedder.ndim() != 2 || embedder.rows() != pvec)
        throw ConfigError("embed_patches: embedder shape " + shape_str(embedder.shape()) +
                          " does not match patch vector length " + std::to_string(pvec));

    const std::size_t ph = cfg.patches_h(), pw = cfg.patches_w();
    const std::size_t n = ph * pw;
    const std::size_t w = cfg.image_w;
    std::vector<double> flat(n * pvec);
    for (std::size_t gy = 0; gy < ph; ++gy)
        for (std::size_t gx = 0; gx < pw; ++gx) {
            double* dst = flat.data() + (gy * pw + gx) * pvec;
            for (std::size_t py = 0; py < p; ++py)
                for (std::size_t px = 0; px < p; ++px)
                    for (std::size_t ch = 0; ch < c; ++ch)
                        *dst++ = image.at(((gy * p + py) * w + (gx * p + px)) * c + ch);
        }
    Tensor patches = Tensor::from({n, pvec}, std::move(flat));
    return matmul(patches, embedder);
}

double cosine_similarity(const double* a, const double* b, std::size_t d) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na == 0.0 || nb == 0.0) return 0.0;
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

std::vector<std::uint32_t> top_candidates(const double* query, const Tensor& candidates,
                                          std::size_t k, Metric metric,
                                          std::int64_t exclude_index) {
    const std::size_t n = candidates.rows(), d = candidates.cols();
    std::vector<std::pair<double, std::uint32_t>> keyed;
    keyed.reserve(n);
    for (std::size_t j = 0; j < n; ++j) {
        if (static_cast<std::int64_t>(j) == exclude_index) continue;
        const double* cj = candidates.data().data() + j * d;
        double key;
        if (metric == Metric::euclidean) {
            double s = 0.0;
            for (std::size_t t = 0; t < d; ++t) {
                const double diff = query[t] - cj[t];
                s += diff * diff;
            }
            key = s;
        } else {
            key = -cosine_similarity(query, cj, d);
        }
        keyed.emplace_back(key, static_cast<std::uint32_t>(j));
    }
    std::sort(keyed.begin(), keyed.end());
    const std::size_t take = std::min(k, keyed.size());
    std::vector<std::uint32_t> out(take);
    for (std::size_t t = 0; t < take; ++t) out[t] = keyed[t].second;
    return out;
}

GraphTopology knn_build(const Tensor& features, std::size_t k, Metric metric) {
    if (features.ndim() != 2 || features.rows() < 1)
        throw ShapeError("knn_build: expects a non-empty [n x d] feature matrix, got " +
                         shape_str(features.shape()));
    const std::size_t n = features.rows(), d = features.cols();
    GraphTopology topo;
    topo.n_real = n;
    topo.metric_tag = metric_name(metric);
    topo.neighbors.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double* qi = features.data().data() + i * d;
        topo.neighbors[i] =
            top_candidates(qi, features, k, metric, static_cast<std::int64_t>(i));
    }
    return topo;
}

}  // namespace vgp
