#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "vgp/backbone.hpp"
#include "vgp/rng.hpp"

using namespace vgp;

namespace {

double gelu_oracle(double x) {
    return 0.5 * x * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (x + 0.044715 * x * x * x)));
}

// straight-line recomputation of the whole backbone with plain loops;
// no vgp::Tensor machinery on this path
std::vector<double> backbone_oracle(const Tensor& image, const BackboneParams& params,
                                    const BackboneConfig& cfg) {
    const std::size_t p = cfg.patch, c = cfg.channels, d = cfg.d, dff = cfg.d_ff;
    const std::size_t ph = cfg.image_h / p, pw = cfg.image_w / p, n = ph * pw;
    const std::size_t pvec = p * p * c;

    // embed
    std::vector<double> x(n * d, 0.0);
    for (std::size_t gy = 0; gy < ph; ++gy)
        for (std::size_t gx = 0; gx < pw; ++gx) {
            std::vector<double> flat(pvec);
            std::size_t t = 0;
            for (std::size_t py = 0; py < p; ++py)
                for (std::size_t px = 0; px < p; ++px)
                    for (std::size_t ch = 0; ch < c; ++ch)
                        flat[t++] =
                            image.at(((gy * p + py) * cfg.image_w + (gx * p + px)) * c + ch);
            const std::size_t node = gy * pw + gx;
            for (std::size_t a = 0; a < pvec; ++a)
                for (std::size_t j = 0; j < d; ++j)
                    x[node * d + j] += flat[a] * params.embedder.at(a, j);
        }

    for (std::size_t b = 0; b < cfg.blocks; ++b) {
        // brute-force euclidean KNN
        std::vector<std::vector<std::size_t>> lists(n);
        for (std::size_t i = 0; i < n; ++i) {
            std::vector<std::pair<double, std::size_t>> keyed;
            for (std::size_t j = 0; j < n; ++j) {
                if (j == i) continue;
                double s = 0.0;
                for (std::size_t t = 0; t < d; ++t) {
                    const double diff = x[i * d + t] - x[j * d + t];
                    s += diff * diff;
                }
                keyed.emplace_back(s, j);
            }
            std::sort(keyed.begin(), keyed.end());
            for (std::size_t t = 0; t < std::min(cfg.k, keyed.size()); ++t)
                lists[i].push_back(keyed[t].second);
        }

        const auto& bp = params.blocks[b];
        std::vector<double> updated(n * d, 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            std::vector<double> cat(2 * d, 0.0);
            for (std::size_t t = 0; t < d; ++t) cat[t] = x[i * d + t];
            for (std::size_t t = 0; t < d; ++t) {
                double best = 0.0;
                bool any = false;
                for (std::size_t j : lists[i]) {
                    const double diff = x[j * d + t] - x[i * d + t];
                    if (!any || diff > best) best = diff;
                    any = true;
                }
                cat[d + t] = any ? best : 0.0;
            }
            std::vector<double> agg(d, 0.0);
            for (std::size_t a = 0; a < 2 * d; ++a)
                for (std::size_t j = 0; j < d; ++j) agg[j] += cat[a] * bp.w_agg.at(a, j);
            for (std::size_t j = 0; j < d; ++j) {
                double up = 0.0;
                for (std::size_t a = 0; a < d; ++a) up += agg[a] * bp.w_update.at(a, j);
                updated[i * d + j] = x[i * d + j] + up;
            }
        }
        // ffn with residual
        std::vector<double> out(n * d, 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            std::vector<double> hidden(dff, 0.0);
            for (std::size_t a = 0; a < d; ++a)
                for (std::size_t j = 0; j < dff; ++j)
                    hidden[j] += updated[i * d + a] * bp.w1.at(a, j);
            for (double& h : hidden) h = gelu_oracle(h);
            for (std::size_t a = 0; a < dff; ++a)
                for (std::size_t j = 0; j < d; ++j) out[i * d + j] += hidden[a] * bp.w2.at(a, j);
            for (std::size_t j = 0; j < d; ++j) out[i * d + j] += updated[i * d + j];
        }
        x = std::move(out);
    }
    return x;
}

}  // namespace

TEST(Aggregate, EqualNeighborsGiveZeroMaxDiff) {
    Tensor x = Tensor::from({2}, {1.0, -2.0});
    Tensor nbrs = Tensor::from({3, 2}, {1, -2, 1, -2, 1, -2});
    Rng rng(4);
    Tensor w = rng.normal_tensor({4, 2}, 1.0);
    Tensor out = aggregate(x, nbrs, w);
    // expected: [x || 0] . W
    for (std::size_t j = 0; j < 2; ++j)
        EXPECT_NEAR(out.at(j), x.at(0) * w.at(0, j) + x.at(1) * w.at(1, j), 1e-15);
}

TEST(Aggregate, EmptyNeighborhoodUsesZeroVector) {
    Tensor x = Tensor::from({2}, {0.5, 0.25});
    Rng rng(5);
    Tensor w = rng.normal_tensor({4, 2}, 1.0);
    Tensor with_empty = aggregate(x, Tensor::zeros({0, 2}), w);
    Tensor with_self = aggregate(x, Tensor::from({1, 2}, {0.5, 0.25}), w);
    for (std::size_t j = 0; j < 2; ++j) EXPECT_EQ(with_empty.at(j), with_self.at(j));
}

TEST(Aggregate, MaxDiffOracleThroughSelectorWeights) {
    Tensor x = Tensor::from({2}, {0.0, 0.0});
    Tensor nbrs = Tensor::from({2, 2}, {1, 5, 3, 2});
    // W_agg = [0; I]: output exposes the max-relative term directly
    Tensor w = Tensor::from({4, 2}, {0, 0, 0, 0, 1, 0, 0, 1});
    Tensor out = aggregate(x, nbrs, w);
    EXPECT_EQ(out.at(0), 3.0);
    EXPECT_EQ(out.at(1), 5.0);
}

TEST(Update, ZeroPathsAreIdentity) {
    Tensor x = Tensor::from({2}, {1.5, -0.25});
    Tensor agg = Tensor::from({2}, {3.0, 4.0});
    Tensor out = update(x, agg, Tensor::zeros({2, 2}));
    EXPECT_EQ(out.at(0), 1.5);
    EXPECT_EQ(out.at(1), -0.25);
    Tensor out2 = update(x, Tensor::zeros({2}), Tensor::eye(2));
    EXPECT_EQ(out2.at(0), 1.5);
    EXPECT_EQ(out2.at(1), -0.25);
}

TEST(Update, HandComputedResidual) {
    Tensor x = Tensor::from({2}, {1, 0});
    Tensor agg = Tensor::from({2}, {1, 1});
    Tensor out = update(x, agg, Tensor::eye(2));
    EXPECT_EQ(out.at(0), 2.0);
    EXPECT_EQ(out.at(1), 1.0);
}

TEST(Ffn, ZeroSecondLayerIsIdentity) {
    Rng rng(6);
    Tensor x = rng.normal_tensor({3, 4}, 1.0);
    Tensor w1 = rng.normal_tensor({4, 6}, 1.0);
    Tensor out = ffn(x, w1, Tensor::zeros({6, 4}));
    EXPECT_EQ(out.data(), x.data());
}

TEST(Ffn, ZeroInputStaysZero) {
    Tensor x = Tensor::zeros({2, 3});
    Rng rng(7);
    Tensor out = ffn(x, rng.normal_tensor({3, 5}, 1.0), rng.normal_tensor({5, 3}, 1.0));
    for (std::size_t i = 0; i < out.size(); ++i) EXPECT_EQ(out.at(i), 0.0);
}

TEST(Ffn, MatchesScalarGeluOracle) {
    Tensor x = Tensor::from({1, 2}, {0.7, -1.2});
    Tensor w1 = Tensor::from({2, 2}, {1.0, 0.5, -0.25, 2.0});
    Tensor w2 = Tensor::from({2, 2}, {0.3, -1.0, 0.8, 0.1});
    Tensor out = ffn(x, w1, w2);
    const double h0 = gelu_oracle(0.7 * 1.0 + (-1.2) * (-0.25));
    const double h1 = gelu_oracle(0.7 * 0.5 + (-1.2) * 2.0);
    EXPECT_NEAR(out.at(0, 0), h0 * 0.3 + h1 * 0.8 + 0.7, 1e-14);
    EXPECT_NEAR(out.at(0, 1), h0 * (-1.0) + h1 * 0.1 + (-1.2), 1e-14);
}

TEST(BackboneForward, ZeroBlocksReturnsEmbeddings) {
    Rng rng(8);
    BackboneConfig cfg;
    cfg.image_h = cfg.image_w = 6;
    cfg.patch = 2;
    cfg.d = 5;
    cfg.d_ff = 7;
    cfg.blocks = 0;
    cfg.k = 3;
    BackboneParams params = BackboneParams::random(cfg, rng);
    Tensor image = rng.normal_tensor({6, 6, 1}, 1.0);
    Tensor out = backbone_forward(image, params, cfg);
    Tensor embedded = embed_patches(image, cfg.patch_config(), params.embedder);
    EXPECT_EQ(out.data(), embedded.data());
}

TEST(BackboneForward, ResidualOnlyNetworkIsIdentityAtAnyDepth) {
    Rng rng(9);
    for (std::size_t blocks : {std::size_t{1}, std::size_t{3}}) {
        BackboneConfig cfg;
        cfg.image_h = cfg.image_w = 6;
        cfg.patch = 2;
        cfg.d = 4;
        cfg.d_ff = 6;
        cfg.blocks = blocks;
        cfg.k = 2;
        BackboneParams params = BackboneParams::random(cfg, rng);
        for (auto& b : params.blocks) {
            b.w_update = Tensor::zeros({cfg.d, cfg.d});
            b.w2 = Tensor::zeros({cfg.d_ff, cfg.d});
        }
        Tensor image = rng.normal_tensor({6, 6, 1}, 1.0);
        Tensor out = backbone_forward(image, params, cfg);
        Tensor embedded = embed_patches(image, cfg.patch_config(), params.embedder);
        EXPECT_EQ(out.data(), embedded.data());
    }
}

TEST(BackboneForward, MatchesStraightLineOracle) {
    Rng rng(10);
    BackboneConfig cfg;
    cfg.image_h = cfg.image_w = 6;
    cfg.patch = 2;  // N = 9
    cfg.d = 8;
    cfg.d_ff = 12;
    cfg.blocks = 2;
    cfg.k = 3;
    BackboneParams params = BackboneParams::random(cfg, rng, 0.3);
    Tensor image = rng.normal_tensor({6, 6, 1}, 1.0);
    Tensor out = backbone_forward(image, params, cfg);
    std::vector<double> oracle = backbone_oracle(image, params, cfg);
    ASSERT_EQ(out.size(), oracle.size());
    for (std::size_t i = 0; i < oracle.size(); ++i)
        EXPECT_NEAR(out.at(i), oracle[i], 1e-12) << "component " << i;
}

TEST(BackboneForward, NeighborOrderDoesNotChangeBlockOutput) {
    Rng rng(12);
    const std::size_t n = 6, d = 4;
    Tensor x = rng.normal_tensor({n, d}, 1.0);
    BlockParams bp;
    bp.w_agg = rng.normal_tensor({2 * d, d}, 0.4);
    bp.w_update = rng.normal_tensor({d, d}, 0.4);
    bp.w1 = rng.normal_tensor({d, 6}, 0.4);
    bp.w2 = rng.normal_tensor({6, d}, 0.4);
    GraphTopology topo = knn_build(x, 3, Metric::euclidean);
    Tensor base = block_forward(x, topo, bp);
    GraphTopology reversed = topo;
    for (auto& list : reversed.neighbors) std::reverse(list.begin(), list.end());
    Tensor flipped = block_forward(x, reversed, bp);
    for (std::size_t i = 0; i < base.size(); ++i) EXPECT_EQ(base.at(i), flipped.at(i));
}

TEST(BackboneForward, FreezeTopologyReusesBlockOneGraph) {
    Rng rng(26);
    BackboneConfig cfg;
    cfg.image_h = cfg.image_w = 8;
    cfg.patch = 2;  // N = 16
    cfg.d = 6;
    cfg.d_ff = 8;
    cfg.blocks = 3;
    cfg.k = 3;
    BackboneParams params = BackboneParams::random(cfg, rng, 0.4);
    Tensor image = rng.normal_tensor({8, 8, 1}, 1.0);

    cfg.freeze_topology = false;
    Tensor dynamic = backbone_forward(image, params, cfg);
    cfg.freeze_topology = true;
    Tensor frozen = backbone_forward(image, params, cfg);

    // manual recomputation with the block-1 graph carried through
    Tensor x = embed_patches(image, cfg.patch_config(), params.embedder);
    GraphTopology topo = knn_build(x, cfg.k, Metric::euclidean);
    for (std::size_t b = 0; b < cfg.blocks; ++b) x = block_forward(x, topo, params.blocks[b]);
    EXPECT_EQ(frozen.data(), x.data());

    // with these weights the dynamic graph diverges after block 1
    bool differs = false;
    for (std::size_t i = 0; i < dynamic.size(); ++i)
        differs = differs || dynamic.at(i) != frozen.at(i);
    EXPECT_TRUE(differs);
}

TEST(BackboneParams, ChecksumDetectsAnyByteChange) {
    Rng rng(13);
    BackboneConfig cfg;
    cfg.image_h = cfg.image_w = 4;
    cfg.patch = 2;
    cfg.d = 3;
    cfg.d_ff = 5;
    cfg.blocks = 1;
    cfg.k = 2;
    BackboneParams params = BackboneParams::random(cfg, rng);
    const std::uint64_t sum = params.checksum();
    EXPECT_EQ(sum, params.checksum());
    double& v = params.blocks[0].w1.mutable_data()[0];
    v = std::nextafter(v, 1e300);  // one ulp
    EXPECT_NE(sum, params.checksum());
}

TEST(BackboneCheckpoint, SaveLoadRoundTripIsByteStable) {
    namespace fs = std::filesystem;
    Rng rng(14);
    BackboneConfig cfg;
    cfg.image_h = cfg.image_w = 8;
    cfg.patch = 4;
    cfg.d = 6;
    cfg.d_ff = 10;
    cfg.blocks = 2;
    cfg.k = 3;
    BackboneParams params = BackboneParams::random(cfg, rng);
    const fs::path dir_a = fs::temp_directory_path() / "vgp_ckpt_a";
    const fs::path dir_b = fs::temp_directory_path() / "vgp_ckpt_b";
    fs::remove_all(dir_a);
    fs::remove_all(dir_b);
    save_backbone(dir_a.string(), params, cfg);
    auto [loaded, loaded_cfg] = load_backbone(dir_a.string());
    EXPECT_EQ(loaded_cfg.d, cfg.d);
    EXPECT_EQ(loaded_cfg.blocks, cfg.blocks);
    save_backbone(dir_b.string(), loaded, loaded_cfg);
    // a second save of the loaded params reproduces every tensor file exactly
    for (const auto& entry : fs::directory_iterator(dir_a)) {
        if (entry.path().extension() != ".vgpt") continue;
        std::ifstream fa(entry.path(), std::ios::binary);
        std::ifstream fb(dir_b / entry.path().filename(), std::ios::binary);
        std::vector<char> ba((std::istreambuf_iterator<char>(fa)),
                             std::istreambuf_iterator<char>());
        std::vector<char> bb((std::istreambuf_iterator<char>(fb)),
                             std::istreambuf_iterator<char>());
        EXPECT_EQ(ba, bb) << entry.path().filename();
    }
    fs::remove_all(dir_a);
    fs::remove_all(dir_b);
}
