#include "vgp/prompts.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>

#include <json.hpp>

namespace fs = std::filesystem;
using nlohmann::json;

namespace vgp {

std::size_t PromptParams::hidden_width(std::size_t r, std::size_t d) {
    return std::max(r, d / 4);
}

namespace {

PromptParams make_prompts(std::size_t d, std::size_t blocks, std::size_t m, std::size_t r,
                          double alpha, double beta, Rng& rng, bool zero_projections,
                          double stddev) {
    PromptParams pp;
    pp.alpha = alpha;
    pp.beta = beta;
    pp.m = m;
    pp.r = r;
    pp.r_hidden = PromptParams::hidden_width(r, d);
    pp.blocks.resize(blocks);
    for (std::size_t b = 0; b < blocks; ++b) {
        const std::string tag = "prompt" + std::to_string(b) + ".";
        auto& pb = pp.blocks[b];
        pb.seeds = rng.normal_tensor({m, r}, stddev).set_name(tag + "seeds");
        if (zero_projections) {
            pb.p_g = Tensor::zeros({r, d}).set_name(tag + "p_g");
            pb.p_e = Tensor::zeros({r, d}).set_name(tag + "p_e");
            pb.p_n = Tensor::zeros({r, d}).set_name(tag + "p_n");
        } else {
            pb.p_g = rng.normal_tensor({r, d}, stddev).set_name(tag + "p_g");
            pb.p_e = rng.normal_tensor({r, d}, stddev).set_name(tag + "p_e");
            pb.p_n = rng.normal_tensor({r, d}, stddev).set_name(tag + "p_n");
        }
        pb.s1 = rng.normal_tensor({d, pp.r_hidden}, stddev).set_name(tag + "s1");
        pb.s2 = rng.normal_tensor({pp.r_hidden, r}, stddev).set_name(tag + "s2");
        for (Tensor* t : {&pb.seeds, &pb.p_g, &pb.p_e, &pb.p_n, &pb.s1, &pb.s2})
            t->set_requires_grad(true);
    }
    pp.validate(d);
    return pp;
}

}  // namespace

PromptParams PromptParams::init(const BackboneConfig& cfg, std::size_t m, std::size_t r,
                                double alpha, double beta, Rng& rng) {
    return make_prompts(cfg.d, cfg.blocks, m, r, alpha, beta, rng, /*zero_projections=*/true,
                        0.02);
}

PromptParams PromptParams::random(const BackboneConfig& cfg, std::size_t m, std::size_t r,
                                  double alpha, double beta, Rng& rng, double stddev) {
    return make_prompts(cfg.d, cfg.blocks, m, r, alpha, beta, rng, /*zero_projections=*/false,
                        stddev);
}

PromptParams PromptParams::random_for_dim(std::size_t d, std::size_t blocks, std::size_t m,
                                          std::size_t r, double alpha, double beta, Rng& rng,
                                          double stddev) {
    return make_prompts(d, blocks, m, r, alpha, beta, rng, /*zero_projections=*/false, stddev);
}

std::vector<Tensor> PromptParams::all_tensors() const {
    std::vector<Tensor> out;
    for (const auto& pb : blocks) {
        out.push_back(pb.seeds);
        out.push_back(pb.p_g);
        out.push_back(pb.p_e);
        out.push_back(pb.p_n);
        out.push_back(pb.s1);
        out.push_back(pb.s2);
    }
    return out;
}

void PromptParams::validate(std::size_t d) const {
    if (r >= d) throw ConfigError("prompts: rank r = " + std::to_string(r) +
                                  " must be strictly less than d = " + std::to_string(d));
    if (r < 1) throw ConfigError("prompts: rank r must be >= 1");
    if (r_hidden < r) throw ConfigError("prompts: r_hidden must be >= r");
    if (alpha < 0.0 || alpha > 1.0) throw ConfigError("prompts: alpha must lie in [0, 1]");
    if (beta < 0.0 || beta > 1.0) throw ConfigError("prompts: beta must lie in [0, 1]");
    for (const auto& pb : blocks) {
        if (pb.seeds.shape() != Shape{m, r} || pb.p_g.shape() != Shape{r, d} ||
            pb.p_e.shape() != Shape{r, d} || pb.p_n.shape() != Shape{r, d} ||
            pb.s1.shape() != Shape{d, r_hidden} || pb.s2.shape() != Shape{r_hidden, r})
            throw ConfigError("prompts: tensor shapes inconsistent with (M, r, r_hidden, d)");
    }
}

Tensor semantic_extract(const Tensor& x, const Tensor& s1, const Tensor& s2) {
    return vecmat(gelu(vecmat(x, s1)), s2);
}

AttachResult selo_graph_attach(const Tensor& x, const PromptBlock& pb, std::size_t m,
                               std::size_t k) {
    AttachResult out;
    const std::size_t n = x.rows();
    if (m == 0) {
        out.x_ext = x;
        NoGradGuard ng;
        out.topo = knn_build(x, k, Metric::euclidean);
        return out;
    }
    Tensor virtual_feats = matmul(pb.seeds, pb.p_g);  // [M x d]
    out.x_ext = vstack(x, virtual_feats);

    NoGradGuard ng;
    out.topo.n_real = n;
    out.topo.n_virtual = m;
    out.topo.metric_tag = "euclidean+cosine";
    out.topo.neighbors.resize(n + m);
    const std::size_t d = x.cols();
    // real nodes pick from the full pool so virtual nodes can feed back
    for (std::size_t i = 0; i < n; ++i) {
        const double* qi = out.x_ext.data().data() + i * d;
        out.topo.neighbors[i] =
            top_candidates(qi, out.x_ext, k, Metric::euclidean, static_cast<std::int64_t>(i));
    }
    // virtual nodes attach to real nodes only, by cosine similarity
    for (std::size_t v = 0; v < m; ++v) {
        const double* qv = out.x_ext.data().data() + (n + v) * d;
        out.topo.neighbors[n + v] = top_candidates(qv, x, k, Metric::cosine, -1);
    }
    return out;
}

Tensor selo_node_apply(const Tensor& x_i, const PromptBlock& pb, double alpha) {
    if (alpha == 0.0) return x_i;  // exact recovery
    Tensor s = semantic_extract(x_i, pb.s1, pb.s2);
    return add(scale(vecmat(s, pb.p_n), alpha), scale(x_i, 1.0 - alpha));
}

Tensor selo_edge_apply(const Tensor& x_c, const Tensor& neighbor_feats, const PromptBlock& pb,
                       double beta) {
    if (beta == 0.0) return x_c;  // exact recovery
    Tensor out = scale(x_c, 1.0 - beta);
    const std::size_t k = neighbor_feats.size() == 0 ? 0 : neighbor_feats.rows();
    if (k == 0) return out;
    Tensor acc;
    for (std::size_t t = 0; t < k; ++t) {
        Tensor term = vecmat(semantic_extract(row(neighbor_feats, t), pb.s1, pb.s2), pb.p_e);
        acc = t == 0 ? term : add(acc, term);
    }
    return add(out, scale(acc, beta / static_cast<double>(k)));
}

Tensor prompted_block_compositional(const Tensor& x, const BlockParams& bp,
                                    const PromptBlock& pb, const PromptParams& pp,
                                    std::size_t k, const GraphTopology* frozen_topo) {
    const std::size_t n = x.rows();
    AttachResult ar = selo_graph_attach(x, pb, pp.m, k);
    const GraphTopology& topo = frozen_topo ? *frozen_topo : ar.topo;

    std::vector<Tensor> updated;
    updated.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        Tensor x_i = row(x, i);
        Tensor center = selo_node_apply(x_i, pb, pp.alpha);
        Tensor nbrs = gather_rows(ar.x_ext, topo.neighbors[i]);
        Tensor g = aggregate(center, nbrs, bp.w_agg);
        // the residual path carries the edge-prompted center
        Tensor base = selo_edge_apply(x_i, nbrs, pb, pp.beta);
        updated.push_back(update(base, g, bp.w_update));
    }
    return ffn(stack_rows(updated), bp.w1, bp.w2);
}

Tensor prompted_block_fused(const Tensor& x, const BlockParams& bp, const PromptBlock& pb,
                            const PromptParams& pp, std::size_t k,
                            const GraphTopology* frozen_topo) {
    const std::size_t n = x.rows();
    AttachResult ar = selo_graph_attach(x, pb, pp.m, k);
    const GraphTopology& topo = frozen_topo ? *frozen_topo : ar.topo;
    const std::vector<std::vector<std::uint32_t>> real_lists(topo.neighbors.begin(),
                                                             topo.neighbors.begin() + n);

    Tensor semantics;  // [(N+M) x r], computed only when a prompt term needs it
    if (pp.alpha != 0.0 || pp.beta != 0.0)
        semantics = matmul(gelu(matmul(ar.x_ext, pb.s1)), pb.s2);

    Tensor centers = x;
    if (pp.alpha != 0.0) {
        Tensor s_real = pp.m == 0 ? semantics : slice_rows(semantics, 0, n);
        centers = add(scale(matmul(s_real, pb.p_n), pp.alpha), scale(x, 1.0 - pp.alpha));
    }

    Tensor max_diff = neighbor_max_diff(ar.x_ext, centers, real_lists);
    Tensor agg = matmul(concat_cols(centers, max_diff), bp.w_agg);

    Tensor updated;
    if (pp.beta == 0.0) {
        updated = add(x, matmul(agg, bp.w_update));
    } else {
        Tensor mean_sem = neighbor_mean(semantics, real_lists);  // [N x r]
        Tensor edge_term = scale(matmul(mean_sem, pb.p_e), pp.beta);
        updated = add(add(scale(x, 1.0 - pp.beta), matmul(agg, bp.w_update)), edge_term);
    }
    return ffn(updated, bp.w1, bp.w2);
}

Tensor prompted_forward(const Tensor& image, const BackboneParams& params,
                        const BackboneConfig& cfg, const PromptParams& prompts,
                        BlockPath path, std::vector<Tensor>* taps) {
    cfg.validate();
    prompts.validate(cfg.d);
    if (prompts.blocks.size() != cfg.blocks)
        throw ConfigError("prompted_forward: prompt blocks " +
                          std::to_string(prompts.blocks.size()) + " vs backbone blocks " +
                          std::to_string(cfg.blocks));
    Tensor x = embed_patches(image, cfg.patch_config(), params.embedder);
    std::optional<GraphTopology> frozen;
    for (std::size_t b = 0; b < cfg.blocks; ++b) {
        const GraphTopology* topo_in = nullptr;
        if (cfg.freeze_topology && b > 0) topo_in = &*frozen;
        Tensor next;
        if (path == BlockPath::fused)
            next = prompted_block_fused(x, params.blocks[b], prompts.blocks[b], prompts, cfg.k,
                                        topo_in);
        else
            next = prompted_block_compositional(x, params.blocks[b], prompts.blocks[b], prompts,
                                                cfg.k, topo_in);
        if (cfg.freeze_topology && b == 0)
            frozen = selo_graph_attach(x, prompts.blocks[0], prompts.m, cfg.k).topo;
        x = next;
        if (taps) taps->push_back(x);
    }
    return x;
}

void save_prompts(const std::string& dir, const PromptParams& prompts) {
    fs::create_directories(dir);
    json manifest;
    manifest["kind"] = "vgp-prompts";
    json blocks = json::array();
    for (std::size_t b = 0; b < prompts.blocks.size(); ++b) {
        blocks.push_back({{"m", prompts.m},
                          {"r", prompts.r},
                          {"alpha", prompts.alpha},
                          {"beta", prompts.beta}});
    }
    manifest["blocks"] = blocks;
    manifest["r_hidden"] = prompts.r_hidden;
    std::ofstream os(fs::path(dir) / "manifest.json");
    os << manifest.dump(2) << "\n";
    for (std::size_t b = 0; b < prompts.blocks.size(); ++b) {
        const std::string tag = "prompt" + std::to_string(b);
        const auto& pb = prompts.blocks[b];
        write_vgpt((fs::path(dir) / (tag + ".seeds.vgpt")).string(), pb.seeds);
        write_vgpt((fs::path(dir) / (tag + ".p_g.vgpt")).string(), pb.p_g);
        write_vgpt((fs::path(dir) / (tag + ".p_e.vgpt")).string(), pb.p_e);
        write_vgpt((fs::path(dir) / (tag + ".p_n.vgpt")).string(), pb.p_n);
        write_vgpt((fs::path(dir) / (tag + ".s1.vgpt")).string(), pb.s1);
        write_vgpt((fs::path(dir) / (tag + ".s2.vgpt")).string(), pb.s2);
    }
}

PromptParams load_prompts(const std::string& dir, const BackboneConfig& cfg) {
    std::ifstream is(fs::path(dir) / "manifest.json");
    if (!is) throw std::runtime_error("load_prompts: missing manifest in " + dir);
    json manifest = json::parse(is);
    const auto& blocks = manifest.at("blocks");
    if (blocks.size() != cfg.blocks)
        throw ConfigError("load_prompts: manifest covers " + std::to_string(blocks.size()) +
                          " blocks, backbone has " + std::to_string(cfg.blocks));
    PromptParams pp;
    pp.m = blocks.at(0).at("m").get<std::size_t>();
    pp.r = blocks.at(0).at("r").get<std::size_t>();
    pp.alpha = blocks.at(0).at("alpha").get<double>();
    pp.beta = blocks.at(0).at("beta").get<double>();
    pp.r_hidden = manifest.at("r_hidden").get<std::size_t>();
    pp.blocks.resize(cfg.blocks);
    for (std::size_t b = 0; b < cfg.blocks; ++b) {
        const std::string tag = "prompt" + std::to_string(b);
        auto& pb = pp.blocks[b];
        pb.seeds = read_vgpt((fs::path(dir) / (tag + ".seeds.vgpt")).string());
        pb.p_g = read_vgpt((fs::path(dir) / (tag + ".p_g.vgpt")).string());
        pb.p_e = read_vgpt((fs::path(dir) / (tag + ".p_e.vgpt")).string());
        pb.p_n = read_vgpt((fs::path(dir) / (tag + ".p_n.vgpt")).string());
        pb.s1 = read_vgpt((fs::path(dir) / (tag + ".s1.vgpt")).string());
        pb.s2 = read_vgpt((fs::path(dir) / (tag + ".s2.vgpt")).string());
        for (Tensor* t : {&pb.seeds, &pb.p_g, &pb.p_e, &pb.p_n, &pb.s1, &pb.s2})
            t->set_requires_grad(true);
    }
    pp.validate(cfg.d);
    return pp;
}

}  // namespace vgp
