#include "vgp/backbone.hpp"

#include <filesystem>
#include <fstream>

#include <json.hpp>

namespace fs = std::filesystem;
using nlohmann::json;

namespace vgp {

void BackboneConfig::validate() const {
    patch_config().validate();
    if (channels < 1) throw ConfigError("backbone config: channels must be >= 1");
    if (d_ff < 1) throw ConfigError("backbone config: d_ff must be >= 1");
}

BackboneParams BackboneParams::random(const BackboneConfig& cfg, Rng& rng, double stddev) {
    BackboneParams p;
    p.embedder = rng.normal_tensor({cfg.patch_vec(), cfg.d}, stddev).set_name("embedder");
    p.blocks.resize(cfg.blocks);
    for (std::size_t b = 0; b < cfg.blocks; ++b) {
        const std::string tag = "block" + std::to_string(b) + ".";
        p.blocks[b].w_agg =
            rng.normal_tensor({2 * cfg.d, cfg.d}, stddev).set_name(tag + "w_agg");
        p.blocks[b].w_update =
            rng.normal_tensor({cfg.d, cfg.d}, stddev).set_name(tag + "w_update");
        p.blocks[b].w1 = rng.normal_tensor({cfg.d, cfg.d_ff}, stddev).set_name(tag + "w1");
        p.blocks[b].w2 = rng.normal_tensor({cfg.d_ff, cfg.d}, stddev).set_name(tag + "w2");
    }
    p.frozen = true;
    return p;
}

std::vector<Tensor> BackboneParams::all_tensors() const {
    std::vector<Tensor> out{embedder};
    for (const auto& b : blocks) {
        out.push_back(b.w_agg);
        out.push_back(b.w_update);
        out.push_back(b.w1);
        out.push_back(b.w2);
    }
    return out;
}

std::uint64_t BackboneParams::checksum() const {
    std::uint64_t h = 1469598103934665603ull;
    auto mix = [&h](const Tensor& t) {
        const auto* bytes = reinterpret_cast<const unsigned char*>(t.data().data());
        for (std::size_t i = 0; i < t.size() * sizeof(double); ++i) {
            h ^= bytes[i];
            h *= 1099511628211ull;
        }
    };
    for (const auto& t : all_tensors()) mix(t);
    return h;
}

Tensor aggregate(const Tensor& x_i, const Tensor& neighbors, const Tensor& w_agg) {
    if (x_i.ndim() != 1)
        throw ShapeError("aggregate: x_i must be 1-D, got " + shape_str(x_i.shape()));
    const std::size_t d = x_i.size();
    if (w_agg.ndim() != 2 || w_agg.rows() != 2 * d)
        throw ShapeError("aggregate: W_agg shape " + shape_str(w_agg.shape()) +
                         " does not match 2d = " + std::to_string(2 * d));
    Tensor m;
    if (neighbors.size() == 0 || neighbors.rows() == 0) {
        m = Tensor::zeros({d});  // empty neighborhood convention
    } else {
        if (neighbors.cols() != d)
            throw ShapeError("aggregate: neighbor width " + shape_str(neighbors.shape()) +
                             " does not match center " + shape_str(x_i.shape()));
        m = rowwise_max(sub_rowvec(neighbors, x_i));
    }
    return vecmat(concat_vec(x_i, m), w_agg);
}

Tensor update(const Tensor& x_i, const Tensor& agg, const Tensor& w_update) {
    return add(x_i, vecmat(agg, w_update));
}

Tensor ffn(const Tensor& x, const Tensor& w1, const Tensor& w2) {
    return add(matmul(gelu(matmul(x, w1)), w2), x);
}

Tensor block_forward(const Tensor& x, const GraphTopology& topo, const BlockParams& bp) {
    Tensor m = neighbor_max_diff(x, x, topo.neighbors);
    Tensor agg = matmul(concat_cols(x, m), bp.w_agg);
    Tensor updated = add(x, matmul(agg, bp.w_update));
    return ffn(updated, bp.w1, bp.w2);
}

Tensor backbone_forward(const Tensor& image, const BackboneParams& params,
                        const BackboneConfig& cfg, std::vector<Tensor>* taps) {
    cfg.validate();
    if (params.blocks.size() != cfg.blocks)
        throw ConfigError("backbone_forward: params cover " +
                          std::to_string(params.blocks.size()) + " blocks, config wants " +
                          std::to_string(cfg.blocks));
    Tensor x = embed_patches(image, cfg.patch_config(), params.embedder);
    GraphTopology topo;
    for (std::size_t b = 0; b < cfg.blocks; ++b) {
        if (b == 0 || !cfg.freeze_topology) {
            NoGradGuard ng;
            topo = knn_build(x, cfg.k, Metric::euclidean);
        }
        x = block_forward(x, topo, params.blocks[b]);
        if (taps) taps->push_back(x);
    }
    return x;
}

void save_backbone(const std::string& dir, const BackboneParams& params,
                   const BackboneConfig& cfg) {
    fs::create_directories(dir);
    json manifest;
    manifest["kind"] = "vgp-backbone";
    manifest["image_h"] = cfg.image_h;
    manifest["image_w"] = cfg.image_w;
    manifest["channels"] = cfg.channels;
    manifest["patch"] = cfg.patch;
    manifest["d"] = cfg.d;
    manifest["d_ff"] = cfg.d_ff;
    manifest["blocks"] = cfg.blocks;
    manifest["k"] = cfg.k;
    manifest["freeze_topology"] = cfg.freeze_topology;
    manifest["frozen"] = params.frozen;
    std::ofstream os(fs::path(dir) / "manifest.json");
    os << manifest.dump(2) << "\n";

    write_vgpt((fs::path(dir) / "embedder.vgpt").string(), params.embedder);
    for (std::size_t b = 0; b < params.blocks.size(); ++b) {
        const std::string tag = "block" + std::to_string(b);
        write_vgpt((fs::path(dir) / (tag + ".w_agg.vgpt")).string(), params.blocks[b].w_agg);
        write_vgpt((fs::path(dir) / (tag + ".w_update.vgpt")).string(),
                   params.blocks[b].w_update);
        write_vgpt((fs::path(dir) / (tag + ".w1.vgpt")).string(), params.blocks[b].w1);
        write_vgpt((fs::path(dir) / (tag + ".w2.vgpt")).string(), params.blocks[b].w2);
    }
}

std::pair<BackboneParams, BackboneConfig> load_backbone(const std::string& dir) {
    std::ifstream is(fs::path(dir) / "manifest.json");
    if (!is) throw std::runtime_error("load_backbone: missing manifest in " + dir);
    json manifest = json::parse(is);
    BackboneConfig cfg;
    cfg.image_h = manifest.at("image_h").get<std::size_t>();
    cfg.image_w = manifest.at("image_w").get<std::size_t>();
    cfg.channels = manifest.at("channels").get<std::size_t>();
    cfg.patch = manifest.at("patch").get<std::size_t>();
    cfg.d = manifest.at("d").get<std::size_t>();
    cfg.d_ff = manifest.at("d_ff").get<std::size_t>();
    cfg.blocks = manifest.at("blocks").get<std::size_t>();
    cfg.k = manifest.at("k").get<std::size_t>();
    cfg.freeze_topology = manifest.value("freeze_topology", false);
    cfg.validate();

    BackboneParams p;
    p.frozen = manifest.value("frozen", true);
    p.embedder = read_vgpt((fs::path(dir) / "embedder.vgpt").string()).set_name("embedder");
    if (p.embedder.shape() != Shape{cfg.patch_vec(), cfg.d})
        throw ConfigError("load_backbone: embedder shape mismatch");
    p.blocks.resize(cfg.blocks);
    for (std::size_t b = 0; b < cfg.blocks; ++b) {
        const std::string tag = "block" + std::to_string(b);
        auto& blk = p.blocks[b];
        blk.w_agg = read_vgpt((fs::path(dir) / (tag + ".w_agg.vgpt")).string());
        blk.w_update = read_vgpt((fs::path(dir) / (tag + ".w_update.vgpt")).string());
        blk.w1 = read_vgpt((fs::path(dir) / (tag + ".w1.vgpt")).string());
        blk.w2 = read_vgpt((fs::path(dir) / (tag + ".w2.vgpt")).string());
        if (blk.w_agg.shape() != Shape{2 * cfg.d, cfg.d} ||
            blk.w_update.shape() != Shape{cfg.d, cfg.d} ||
            blk.w1.shape() != Shape{cfg.d, cfg.d_ff} || blk.w2.shape() != Shape{cfg.d_ff, cfg.d})
            throw ConfigError("load_backbone: block " + std::to_string(b) + " shape mismatch");
    }
    return {std::move(p), cfg};
}

}  // namespace vgp
