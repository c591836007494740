#include "vgp/verify.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "vgp/backbone.hpp"
#include "vgp/gradcheck.hpp"
#include "vgp/graph.hpp"
#include "vgp/pca.hpp"
#include "vgp/prompts.hpp"
#include "vgp/train.hpp"

namespace fs = std::filesystem;

namespace vgp {

namespace {

BlockParams random_block(std::size_t d, std::size_t dff, Rng& rng, double stddev = 0.25) {
    BlockParams bp;
    bp.w_agg = rng.normal_tensor({2 * d, d}, stddev);
    bp.w_update = rng.normal_tensor({d, d}, stddev);
    bp.w1 = rng.normal_tensor({d, dff}, stddev);
    bp.w2 = rng.normal_tensor({dff, d}, stddev);
    return bp;
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) return false;
    return std::memcmp(a.data().data(), b.data().data(), a.size() * sizeof(double)) == 0;
}

std::string temp_dir(const std::string& stem) {
    static int counter = 0;
    fs::path p = fs::temp_directory_path() / (stem + std::to_string(counter++));
    fs::remove_all(p);
    fs::create_directories(p);
    return p.string();
}

bool files_identical(const fs::path& a, const fs::path& b) {
    std::ifstream fa(a, std::ios::binary), fb(b, std::ios::binary);
    if (!fa || !fb) return false;
    std::vector<char> ba((std::istreambuf_iterator<char>(fa)), std::istreambuf_iterator<char>());
    std::vector<char> bb((std::istreambuf_iterator<char>(fb)), std::istreambuf_iterator<char>());
    return ba == bb;
}

}  // namespace

SuiteResult suite_gradcheck() {
    SuiteResult res{"gradcheck", false, ""};
    Rng rng(41);
    BackboneConfig cfg;
    cfg.image_h = cfg.image_w = 6;
    cfg.channels = 1;
    cfg.patch = 2;  // N = 9
    cfg.d = 16;
    cfg.d_ff = 32;
    cfg.blocks = 2;
    cfg.k = 3;
    BackboneParams backbone = BackboneParams::random(cfg, rng, 0.2);
    PromptParams prompts = PromptParams::random(cfg, /*m=*/2, /*r=*/4, 0.3, 0.4, rng, 0.3);
    Tensor head = rng.normal_tensor({cfg.d, 2}, 0.3).set_name("head");
    head.set_requires_grad(true);
    Tensor image = rng.normal_tensor({cfg.image_h, cfg.image_w, cfg.channels}, 0.8);

    auto f = [&]() {
        Tensor feats = prompted_forward(image, backbone, cfg, prompts, BlockPath::fused);
        return cross_entropy_logits(head_forward(feats, head), 1);
    };
    std::vector<Tensor> params = prompts.all_tensors();
    params.push_back(head);
    GradCheckReport report = gradcheck(f, params, 1e-5, 1e-4);
    res.passed = report.passed;
    double worst = 0.0;
    std::string worst_name;
    for (const auto& e : report.entries)
        if (e.max_rel_error > worst) {
            worst = e.max_rel_error;
            worst_name = e.tensor_name;
        }
    std::ostringstream os;
    os << params.size() << " tensors, worst rel err " << worst << " (" << worst_name << ")";
    res.detail = os.str();
    return res;
}

SuiteResult suite_dual_path(std::size_t trials, bool mutate_edge_path) {
    SuiteResult res{"dual-path-equivalence", false, ""};
    Rng rng(1234);
    const std::size_t d_choices[] = {8, 16};
    const std::size_t r_choices[] = {2, 8};
    const std::size_t k_choices[] = {1, 3, 5};
    const std::size_t m_choices[] = {0, 1, 4};
    const std::size_t n_choices[] = {1, 4, 9, 12};
    const double blend_choices[] = {0.0, 0.2, 0.7, 1.0};

    double worst = 0.0;
    for (std::size_t t = 0; t < trials; ++t) {
        std::size_t d = d_choices[rng.integer(2)];
        std::size_t r = r_choices[rng.integer(2)];
        std::size_t k = k_choices[rng.integer(3)];
        std::size_t m = m_choices[rng.integer(3)];
        std::size_t n = n_choices[rng.integer(4)];
        double alpha = blend_choices[rng.integer(4)];
        double beta = blend_choices[rng.integer(4)];
        if (t == 0) {  // pin the empty-neighborhood case (n=1, m=0 -> k_i = 0)
            n = 1;
            m = 0;
        } else if (t == 1) {  // and the single-neighbor case
            n = 2;
            m = 0;
            k = 1;
        }
        if (r >= d) r = 2;  // rank must stay strictly below d
        if (mutate_edge_path) {  // make sure the edge path is exercised
            beta = std::max(beta, 0.2);
            n = std::max<std::size_t>(n, 4);
        }

        PromptParams prompts = PromptParams::random_for_dim(d, 1, m, r, alpha, beta, rng, 0.4);
        BlockParams bp = random_block(d, 2 * d, rng);
        Tensor x = rng.normal_tensor({n, d}, 0.8);

        Tensor a = prompted_block_compositional(x, bp, prompts.blocks[0], prompts, k);

        PromptParams fused_prompts = prompts;
        if (mutate_edge_path) {
            PromptBlock mutated = prompts.blocks[0];
            std::vector<double> v = mutated.p_e.data();
            v[0] += 0.05;
            mutated.p_e = Tensor::from(mutated.p_e.shape(), std::move(v)).set_requires_grad(true);
            fused_prompts.blocks[0] = mutated;
        }
        Tensor b = prompted_block_fused(x, bp, fused_prompts.blocks[0], fused_prompts, k);

        for (std::size_t i = 0; i < a.size(); ++i)
            worst = std::max(worst, std::abs(a.at(i) - b.at(i)));
    }
    res.passed = worst <= 1e-10;
    std::ostringstream os;
    os << trials << " trials, max abs diff " << worst;
    res.detail = os.str();
    return res;
}

SuiteResult suite_recovery(std::size_t inputs) {
    SuiteResult res{"recovery", false, ""};
    Rng rng(77);
    BackboneConfig cfg;
    cfg.image_h = cfg.image_w = 12;
    cfg.channels = 1;
    cfg.patch = 4;  // N = 9
    cfg.d = 16;
    cfg.d_ff = 24;
    cfg.blocks = 2;
    cfg.k = 3;
    BackboneParams backbone = BackboneParams::random(cfg, rng, 0.2);
    // alpha = beta = 0 and M = 0; every other prompt value is arbitrary
    PromptParams prompts = PromptParams::random(cfg, /*m=*/0, /*r=*/4, 0.0, 0.0, rng, 0.5);

    std::size_t matched = 0;
    for (std::size_t i = 0; i < inputs; ++i) {
        Tensor image = rng.normal_tensor({cfg.image_h, cfg.image_w, cfg.channels}, 1.0);
        Tensor plain = backbone_forward(image, backbone, cfg);
        Tensor fused = prompted_forward(image, backbone, cfg, prompts, BlockPath::fused);
        Tensor comp = prompted_forward(image, backbone, cfg, prompts, BlockPath::compositional);
        if (bitwise_equal(plain, fused) && bitwise_equal(plain, comp)) ++matched;
    }
    res.passed = matched == inputs;
    res.detail = std::to_string(matched) + "/" + std::to_string(inputs) + " inputs bitwise equal";
    return res;
}

SuiteResult suite_lowrank() {
    SuiteResult res{"low-rank-structure", false, ""};
    Rng rng(99);
    double worst_tail = 0.0;
    for (std::size_t r : {std::size_t{4}, std::size_t{8}, std::size_t{32}}) {
        const std::size_t d = 64, n = 96;
        const double alpha = 0.3, beta = 0.25;
        PromptParams prompts = PromptParams::random_for_dim(d, 1, 2, r, alpha, beta, rng, 0.4);
        const PromptBlock& pb = prompts.blocks[0];
        Tensor x = rng.normal_tensor({n, d}, 0.8);
        GraphTopology topo = knn_build(x, 5, Metric::euclidean);

        std::vector<Tensor> node_deltas, edge_terms;
        for (std::size_t i = 0; i < n; ++i) {
            Tensor x_i = row(x, i);
            node_deltas.push_back(sub(selo_node_apply(x_i, pb, alpha), scale(x_i, 1.0 - alpha)));
            Tensor nbrs = gather_rows(x, topo.neighbors[i]);
            edge_terms.push_back(sub(selo_edge_apply(x_i, nbrs, pb, beta),
                                     scale(x_i, 1.0 - beta)));
        }
        for (const auto& matrix : {stack_rows(node_deltas), stack_rows(edge_terms)}) {
            auto sigma = singular_values(matrix);
            for (std::size_t i = r; i < sigma.size(); ++i)
                worst_tail = std::max(worst_tail, sigma[i]);
        }
    }
    res.passed = worst_tail <= 1e-8;
    std::ostringstream os;
    os << "largest singular value beyond rank: " << worst_tail;
    res.detail = os.str();
    return res;
}

SuiteResult suite_frozen_backbone() {
    SuiteResult res{"frozen-backbone", false, ""};
    Rng rng(7);
    BackboneConfig cfg;
    cfg.image_h = cfg.image_w = 16;
    cfg.channels = 1;
    cfg.patch = 8;  // N = 4
    cfg.d = 12;
    cfg.d_ff = 16;
    cfg.blocks = 2;
    cfg.k = 3;
    BackboneParams backbone = BackboneParams::random(cfg, rng, 0.2);
    PromptParams prompts = PromptParams::init(cfg, 2, 4, 0.2, 0.2, rng);
    Tensor head = Tensor::zeros({cfg.d, 2}).set_name("head");

    Dataset train_set = synthetic_dataset(11, 16, cfg.image_h, cfg.image_w, cfg.channels);
    Dataset val_set = synthetic_dataset(12, 8, cfg.image_h, cfg.image_w, cfg.channels);

    const std::string before = temp_dir("vgp_frozen_before_");
    const std::string after = temp_dir("vgp_frozen_after_");
    save_backbone(before, backbone, cfg);
    const std::uint64_t sum_before = backbone.checksum();

    TrainConfig tc;
    tc.lr = 0.01;
    tc.epochs = 2;
    tc.batch_size = 8;
    tc.seed = 3;
    train_model(backbone, cfg, &prompts, head, train_set, val_set, tc);

    const std::uint64_t sum_after = backbone.checksum();
    save_backbone(after, backbone, cfg);

    bool files_ok = true;
    for (const auto& entry : fs::directory_iterator(before))
        files_ok = files_ok &&
                   files_identical(entry.path(), fs::path(after) / entry.path().filename());

    res.passed = (sum_before == sum_after) && files_ok;
    res.detail = res.passed ? "checksum and checkpoint bytes unchanged"
                            : "backbone bytes changed during training";
    fs::remove_all(before);
    fs::remove_all(after);
    return res;
}

SuiteResult suite_pca() {
    SuiteResult res{"pca-analyzer", false, ""};
    Rng rng(2025);
    std::ostringstream os;
    bool ok = true;

    // constructed rank-k data: orthonormal factors give a flat leading spectrum
    for (std::size_t k : {std::size_t{1}, std::size_t{3}, std::size_t{5}}) {
        const std::size_t n = 200, d = 64;
        Tensor left = rng.normal_tensor({n, k}, 1.0);
        Tensor right = rng.normal_tensor({k, d}, 1.0);
        // Gram-Schmidt on the k columns of `left` and the k rows of `right`
        auto orthonormalize_cols = [](Tensor& t) {
            const std::size_t rows = t.rows(), cols = t.cols();
            auto& v = t.mutable_data();
            for (std::size_t c = 0; c < cols; ++c) {
                for (std::size_t p = 0; p < c; ++p) {
                    double dot = 0.0;
                    for (std::size_t i = 0; i < rows; ++i)
                        dot += v[i * cols + c] * v[i * cols + p];
                    for (std::size_t i = 0; i < rows; ++i) v[i * cols + c] -= dot * v[i * cols + p];
                }
                double norm = 0.0;
                for (std::size_t i = 0; i < rows; ++i) norm += v[i * cols + c] * v[i * cols + c];
                norm = std::sqrt(norm);
                for (std::size_t i = 0; i < rows; ++i) v[i * cols + c] /= norm;
            }
        };
        auto orthonormalize_rows = [](Tensor& t) {
            const std::size_t rows = t.rows(), cols = t.cols();
            auto& v = t.mutable_data();
            for (std::size_t rr = 0; rr < rows; ++rr) {
                for (std::size_t p = 0; p < rr; ++p) {
                    double dot = 0.0;
                    for (std::size_t j = 0; j < cols; ++j)
                        dot += v[rr * cols + j] * v[p * cols + j];
                    for (std::size_t j = 0; j < cols; ++j) v[rr * cols + j] -= dot * v[p * cols + j];
                }
                double norm = 0.0;
                for (std::size_t j = 0; j < cols; ++j) norm += v[rr * cols + j] * v[rr * cols + j];
                norm = std::sqrt(norm);
                for (std::size_t j = 0; j < cols; ++j) v[rr * cols + j] /= norm;
            }
        };
        orthonormalize_cols(left);
        orthonormalize_rows(right);
        Tensor x;
        {
            NoGradGuard ng;
            x = matmul(left, right);
        }
        PcaResult clean = pca_analyze(x, 0.25, RankMode::relative, "none");
        if (clean.est_rank != k) {
            ok = false;
            os << "rank-" << k << " clean gave " << clean.est_rank << "; ";
        }
        std::vector<double> noisy_data = x.data();
        for (double& v : noisy_data) v += 1e-3 * rng.normal();
        PcaResult noisy =
            pca_analyze(Tensor::from({n, d}, std::move(noisy_data)), 0.25, RankMode::relative,
                        "none");
        if (noisy.est_rank != k) {
            ok = false;
            os << "rank-" << k << " noisy gave " << noisy.est_rank << "; ";
        }
    }

    // top-r spectral reconstruction error equals lambda_{r+1}
    {
        const std::size_t n = 50, d = 12, r = 3;
        Tensor x = rng.normal_tensor({n, d}, 0.5);
        PcaResult pca = pca_analyze(x, 0.25, RankMode::relative, "none");
        const auto& v = pca.eigenvectors;
        std::vector<double> residual(d * d, 0.0);
        for (std::size_t c = r; c < d; ++c)
            for (std::size_t i = 0; i < d; ++i)
                for (std::size_t j = 0; j < d; ++j)
                    residual[i * d + j] += pca.eigenvalues[c] * v.at(i, c) * v.at(j, c);
        EighResult eig = jacobi_eigh(Tensor::from({d, d}, std::move(residual)));
        double spectral = 0.0;
        for (double lambda : eig.eigenvalues) spectral = std::max(spectral, std::abs(lambda));
        if (std::abs(spectral - pca.eigenvalues[r]) > 1e-8) {
            ok = false;
            os << "reconstruction error " << spectral << " vs lambda_{r+1} "
               << pca.eigenvalues[r] << "; ";
        }
    }

    // est_rank monotone non-increasing in epsilon
    {
        Tensor x = rng.normal_tensor({40, 10}, 1.0);
        std::size_t prev = 11;
        for (double eps : {0.001, 0.01, 0.1, 0.25, 0.5, 0.9}) {
            PcaResult pca = pca_analyze(x, eps, RankMode::relative, "none");
            if (pca.est_rank > prev) {
                ok = false;
                os << "est_rank not monotone at eps " << eps << "; ";
            }
            prev = pca.est_rank;
        }
    }

    res.passed = ok;
    res.detail = ok ? "constructed ranks, reconstruction and monotonicity hold" : os.str();
    return res;
}

std::vector<SuiteResult> run_all_suites(std::size_t dual_path_trials, bool mutate_edge_path) {
    return {suite_gradcheck(),
            suite_dual_path(dual_path_trials, mutate_edge_path),
            suite_recovery(),
            suite_lowrank(),
            suite_frozen_backbone(),
            suite_pca()};
}

}  // namespace vgp
