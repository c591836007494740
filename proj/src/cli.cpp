#include "vgp/cli.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "vgp/backbone.hpp"
#include "vgp/config.hpp"
#include "vgp/pca.hpp"
#include "vgp/prompts.hpp"
#include "vgp/train.hpp"
#include "vgp/verify.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace vgp {

namespace {

constexpr int kExitOk = 0;
constexpr int kExitVerifyFailure = 1;
constexpr int kExitConfigError = 2;
constexpr int kExitNumericFailure = 3;

struct TrainArgs {
    std::string config_path;
    std::string out_base;
    bool synthetic = false;
    bool linear_probe = false;
    std::int64_t seed = -1;
    std::int64_t epochs = -1;
};

RunConfig load_config_or_default(const std::string& path) {
    if (path.empty()) return parse_run_config(default_config_text());
    return load_run_config(path);
}

fs::path resolve_dir(const std::string& out_base, const std::string& dir) {
    if (out_base.empty()) return dir;
    return fs::path(out_base) / dir;
}

json param_pair_json(const ParamReport& vgp_report, const ParamReport& full_ft) {
    json j;
    j["vgp"] = json::parse(param_report_json(vgp_report));
    j["full_ft"] = json::parse(param_report_json(full_ft));
    return j;
}

int cmd_train(const TrainArgs& args) {
    RunConfig cfg = load_config_or_default(args.config_path);
    if (args.seed >= 0) cfg.train.seed = static_cast<std::uint64_t>(args.seed);
    if (args.epochs >= 0) cfg.train.epochs = static_cast<std::size_t>(args.epochs);
    cfg.validate();

    const fs::path ckpt_dir = resolve_dir(args.out_base, cfg.checkpoint_dir);
    const fs::path report_dir = resolve_dir(args.out_base, cfg.report_dir);
    fs::create_directories(ckpt_dir);
    fs::create_directories(report_dir);

    Rng rng(cfg.train.seed);
    BackboneParams backbone = BackboneParams::random(cfg.model, rng, 0.05);

    Dataset train_set, val_set;
    if (args.synthetic) {
        train_set = synthetic_dataset(cfg.train.seed * 2 + 1, cfg.train_samples,
                                      cfg.model.image_h, cfg.model.image_w, cfg.model.channels);
        val_set = synthetic_dataset(cfg.train.seed * 2 + 2, cfg.val_samples, cfg.model.image_h,
                                    cfg.model.image_w, cfg.model.channels);
    } else {
        const fs::path data = resolve_dir(args.out_base, cfg.data_dir);
        train_set = load_dataset((data / "train").string());
        val_set = load_dataset((data / "val").string());
    }

    PromptParams prompts;
    const bool use_prompts = !args.linear_probe;
    if (use_prompts)
        prompts = PromptParams::init(cfg.model, cfg.prompt_m, cfg.prompt_r, cfg.alpha, cfg.beta,
                                     rng);
    Tensor head = Tensor::zeros({cfg.model.d, cfg.classes}).set_name("head");

    const std::string metrics_path = (report_dir / "metrics.jsonl").string();
    TrainResult result = train_model(backbone, cfg.model, use_prompts ? &prompts : nullptr, head,
                                     train_set, val_set, cfg.train, metrics_path);

    save_backbone((ckpt_dir / "backbone").string(), backbone, cfg.model);
    if (use_prompts) save_prompts((ckpt_dir / "prompts").string(), prompts);
    write_vgpt((ckpt_dir / "head.vgpt").string(), head);

    ParamReport vgp_report = count_params(backbone, cfg.model, use_prompts ? &prompts : nullptr,
                                          head);
    ParamReport full_ft = count_params(backbone, cfg.model, nullptr, head);
    full_ft.trainable_params = full_ft.total_params;  // every weight updated
    full_ft.frozen_params = 0;
    full_ft.reduction_pct = 0.0;
    {
        std::ofstream os(report_dir / "param_report.json");
        os << param_pair_json(vgp_report, full_ft).dump(2) << "\n";
    }

    const auto& last = result.epochs.back();
    std::cout << "trained " << cfg.train.epochs << " epochs ("
              << (use_prompts ? "prompt-tuned" : "linear-probe")
              << "): train_loss=" << last.train_loss << " train_acc=" << last.train_acc
              << " best_val_acc=" << result.best_val_acc << "\n";
    std::cout << "checkpoints: " << ckpt_dir.string() << "\n";
    std::cout << "metrics: " << metrics_path << "\n";
    return kExitOk;
}

std::pair<BackboneParams, BackboneConfig> load_checkpoint_backbone(const std::string& ckpt) {
    return load_backbone((fs::path(ckpt) / "backbone").string());
}

int cmd_eval(const std::string& config_path, const std::string& ckpt, bool synthetic,
             const std::string& out_base, const std::string& dump_dir) {
    RunConfig cfg = load_config_or_default(config_path);
    auto [backbone, model_cfg] = load_checkpoint_backbone(ckpt);
    if (model_cfg.d != cfg.model.d || model_cfg.blocks != cfg.model.blocks)
        throw ConfigError("eval: checkpoint dims (d=" + std::to_string(model_cfg.d) +
                          ", blocks=" + std::to_string(model_cfg.blocks) +
                          ") do not match config");
    Tensor head = read_vgpt((fs::path(ckpt) / "head.vgpt").string());

    PromptParams prompts;
    bool with_prompts = fs::exists(fs::path(ckpt) / "prompts" / "manifest.json");
    if (with_prompts) prompts = load_prompts((fs::path(ckpt) / "prompts").string(), model_cfg);

    Dataset val_set;
    if (synthetic) {
        val_set = synthetic_dataset(cfg.train.seed * 2 + 2, cfg.val_samples, model_cfg.image_h,
                                    model_cfg.image_w, model_cfg.channels);
    } else {
        val_set = load_dataset(
            (resolve_dir(out_base, cfg.data_dir) / "val").string());
    }
    LogitsFn fn = make_logits_fn(backbone, model_cfg, with_prompts ? &prompts : nullptr, head);
    json out = {{"accuracy", evaluate(val_set, fn)}, {"samples", val_set.images.size()}};
    std::cout << out.dump() << "\n";

    if (!dump_dir.empty()) {
        // per-layer feature dumps for the analyzer, rows pooled over samples
        NoGradGuard ng;
        fs::create_directories(dump_dir);
        const std::size_t samples = std::min<std::size_t>(4, val_set.images.size());
        std::vector<Tensor> per_layer(model_cfg.blocks);
        for (std::size_t s = 0; s < samples; ++s) {
            std::vector<Tensor> taps;
            backbone_forward(val_set.images[s], backbone, model_cfg, &taps);
            for (std::size_t b = 0; b < taps.size(); ++b)
                per_layer[b] = s == 0 ? taps[b] : vstack(per_layer[b], taps[b]);
        }
        for (std::size_t b = 0; b < per_layer.size(); ++b)
            write_vgpt(
                (fs::path(dump_dir) / ("features_layer" + std::to_string(b) + ".vgpt"))
                    .string(),
                per_layer[b]);
    }
    return kExitOk;
}

int cmd_gen_data(const std::string& out_dir, std::size_t n_train, std::size_t n_val,
                 std::uint64_t seed, std::size_t image, std::size_t channels) {
    save_dataset((fs::path(out_dir) / "train").string(),
                 synthetic_dataset(seed * 2 + 1, n_train, image, image, channels));
    save_dataset((fs::path(out_dir) / "val").string(),
                 synthetic_dataset(seed * 2 + 2, n_val, image, image, channels));
    std::cout << "wrote " << n_train << " train / " << n_val << " val samples to " << out_dir
              << "\n";
    return kExitOk;
}

int cmd_verify(std::size_t trials, bool mutate_edge_path) {
    auto results = run_all_suites(trials, mutate_edge_path);
    bool all = true;
    for (const auto& r : results) {
        std::cout << (r.passed ? "[PASS] " : "[FAIL] ") << r.name << ": " << r.detail << "\n";
        all = all && r.passed;
    }
    std::cout << (all ? "verification OK" : "verification FAILED") << " (" << results.size()
              << " suites)\n";
    return all ? kExitOk : kExitVerifyFailure;
}

int cmd_analyze(const std::string& config_path, const std::string& ckpt, bool synthetic,
                double epsilon, const std::string& mode_str, const std::string& norm,
                std::size_t samples, std::int64_t center, const std::string& out_dir,
                const std::string& out_base) {
    RunConfig cfg = load_config_or_default(config_path);
    auto [backbone, model_cfg] = load_checkpoint_backbone(ckpt);
    if (model_cfg.d != cfg.model.d || model_cfg.blocks != cfg.model.blocks)
        throw ConfigError("analyze: checkpoint dims do not match config");
    RankMode mode;
    if (mode_str == "relative")
        mode = RankMode::relative;
    else if (mode_str == "absolute")
        mode = RankMode::absolute;
    else
        throw ConfigError("analyze: --mode must be relative or absolute, got '" + mode_str + "'");

    Dataset ds;
    if (synthetic) {
        ds = synthetic_dataset(cfg.train.seed * 2 + 2, std::max<std::size_t>(samples, 1),
                               model_cfg.image_h, model_cfg.image_w, model_cfg.channels);
    } else {
        ds = load_dataset((resolve_dir(out_base, cfg.data_dir) / "val").string());
    }
    samples = std::min(samples, ds.images.size());
    if (samples == 0) throw ConfigError("analyze: no samples available");

    // per-layer feature dumps, rows concatenated over samples
    std::vector<std::vector<Tensor>> taps_per_sample(samples);
    for (std::size_t s = 0; s < samples; ++s)
        backbone_forward(ds.images[s], backbone, model_cfg, &taps_per_sample[s]);
    const std::size_t layers = model_cfg.blocks;

    fs::path out = out_dir.empty() ? resolve_dir(out_base, cfg.report_dir) : fs::path(out_dir);
    fs::create_directories(out);

    std::vector<Tensor> per_layer;
    for (std::size_t layer = 0; layer < layers; ++layer) {
        std::vector<Tensor> pieces;
        for (std::size_t s = 0; s < samples; ++s) {
            Tensor feats = taps_per_sample[s][layer];
            if (center >= 0) {
                // restrict to the semantically connected subset around the center
                NoGradGuard ng;
                GraphTopology topo = knn_build(feats, model_cfg.k, Metric::euclidean);
                const std::size_t c = static_cast<std::size_t>(center);
                if (c >= feats.rows())
                    throw ConfigError("analyze: --center out of range for N=" +
                                      std::to_string(feats.rows()));
                std::vector<std::uint32_t> subset{static_cast<std::uint32_t>(c)};
                for (auto j : topo.neighbors[c]) subset.push_back(j);
                feats = gather_rows(feats, subset);
            }
            pieces.push_back(feats);
        }
        Tensor stacked = pieces[0];
        for (std::size_t s = 1; s < pieces.size(); ++s) stacked = vstack(stacked, pieces[s]);
        write_vgpt((out / ("features_layer" + std::to_string(layer) + ".vgpt")).string(),
                   stacked);
        per_layer.push_back(stacked);
    }

    RankProfileReport profile = rank_profile(per_layer, epsilon, mode, norm);

    json report;
    report["epsilon"] = epsilon;
    report["mode"] = rank_mode_name(mode);
    report["normalization"] = norm;
    report["reference"] = {{"note", "reported ranks of semantically connected patches"},
                           {"CUB", 50},
                           {"Flowers", 60},
                           {"feature_dim", 768},
                           {"epsilon", 0.25}};
    json layers_json = json::array();
    for (const auto& lp : profile.layers) {
        layers_json.push_back({{"layer", lp.layer},
                               {"est_rank", lp.est_rank},
                               {"eigenvalues", lp.eigenvalues}});
        // histogram CSV: component index, eigenvalue, mean |coefficient|
        std::ofstream csv(out / ("coeff_hist_layer" + std::to_string(lp.layer) + ".csv"));
        csv << "component,eigenvalue,mean_abs_coefficient\n";
        for (std::size_t c = 0; c < lp.mean_abs_coefficient.size(); ++c)
            csv << c << "," << lp.eigenvalues[c] << "," << lp.mean_abs_coefficient[c] << "\n";
    }
    report["layers"] = layers_json;
    {
        std::ofstream os(out / "rank_report.json");
        os << report.dump(2) << "\n";
    }

    // RGB maps of the first three PCA components per layer
    for (std::size_t layer = 0; layer < layers; ++layer) {
        Tensor prepared = normalize_rows(per_layer[layer], norm);
        PcaResult pca = pca_analyze(prepared, epsilon, mode, norm);
        if (pca.coefficients.cols() >= 3)
            write_vgpt((out / ("rgb_layer" + std::to_string(layer) + ".vgpt")).string(),
                       rgb_map(pca.coefficients));
    }

    // topology fixture for the first sample (graph entering block 1)
    {
        NoGradGuard ng;
        Tensor embedded =
            embed_patches(ds.images[0], model_cfg.patch_config(), backbone.embedder);
        GraphTopology topo = knn_build(embedded, model_cfg.k, Metric::euclidean);
        std::ofstream os(out / "topology_sample0.json");
        os << topology_to_json(topo) << "\n";
    }

    std::cout << "analysis written to " << out.string() << "\n";
    for (const auto& lp : profile.layers)
        std::cout << "layer " << lp.layer << ": est_rank " << lp.est_rank << " of "
                  << lp.mean_abs_coefficient.size() << "\n";
    return kExitOk;
}

std::string format_millions(std::size_t params) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.4fM", static_cast<double>(params) / 1e6);
    return buf;
}

std::string format_flops(double flops) {
    char buf[32];
    if (flops >= 1e9)
        std::snprintf(buf, sizeof(buf), "%.2fG", flops / 1e9);
    else if (flops >= 1e6)
        std::snprintf(buf, sizeof(buf), "%.2fM", flops / 1e6);
    else
        std::snprintf(buf, sizeof(buf), "%.0f", flops);
    return buf;
}

int cmd_report(const std::string& params_path, const std::string& metrics_path,
               const std::string& csv_path) {
    std::ifstream pis(params_path);
    if (!pis) throw ConfigError("report: cannot open params file '" + params_path + "'");
    json pj = json::parse(pis);
    const auto& vgp_j = pj.at("vgp");
    const auto& ft_j = pj.at("full_ft");

    const double vgp_train = vgp_j.at("trainable_params").get<double>();
    const double ft_train = ft_j.at("trainable_params").get<double>();
    const double vgp_flops = vgp_j.at("approx_flops_forward").get<double>();
    const double ft_flops = ft_j.at("approx_flops_forward").get<double>();
    const double reduction = 100.0 * (1.0 - vgp_train / ft_train);
    const double overhead = 100.0 * (vgp_flops / ft_flops - 1.0);

    double best_val = 0.0;
    bool have_metrics = false;
    if (!metrics_path.empty()) {
        std::ifstream mis(metrics_path);
        if (!mis) throw ConfigError("report: cannot open metrics file '" + metrics_path + "'");
        std::string line;
        while (std::getline(mis, line)) {
            if (line.empty()) continue;
            json rec = json::parse(line);
            best_val = std::max(best_val, rec.at("val_acc").get<double>());
            have_metrics = true;
        }
    }

    std::ostringstream table;
    char row[256];
    table << "method                     trainable     vs full-FT   FLOPs        overhead\n";
    table << "-------------------------  ------------  -----------  -----------  --------\n";
    // reference row: published pyramid ViG-M averages
    table << "full fine-tune (ViG-M)     48.68M        --           8.94G        --\n";
    table << "VGP (ViG-M, reported)      2.61M         -94.6%       9.22G        +3.1%\n";
    std::snprintf(row, sizeof(row), "%-25s  %-12s  %-11s  %-11s  %s\n", "full fine-tune (toy)",
                  format_millions(static_cast<std::size_t>(ft_train)).c_str(), "--",
                  format_flops(ft_flops).c_str(), "--");
    table << row;
    char red[32], ov[32];
    if (reduction < 0.05)
        std::snprintf(red, sizeof(red), "0.0%%");
    else
        std::snprintf(red, sizeof(red), "-%.1f%%", reduction);
    std::snprintf(ov, sizeof(ov), "+%.1f%%", overhead);
    std::snprintf(row, sizeof(row), "%-25s  %-12s  %-11s  %-11s  %s\n", "VGP (toy)",
                  format_millions(static_cast<std::size_t>(vgp_train)).c_str(), red,
                  format_flops(vgp_flops).c_str(), ov);
    table << row;
    if (have_metrics) {
        std::snprintf(row, sizeof(row), "best validation accuracy: %.4f\n", best_val);
        table << row;
    }
    std::cout << table.str();

    if (!csv_path.empty()) {
        std::ofstream csv(csv_path);
        csv << "method,trainable_params,reduction_pct,flops,overhead_pct\n";
        csv << "full_fine_tune_vig_m,48680000,,8940000000,\n";
        csv << "vgp_vig_m_reported,2610000,-94.6,9220000000,3.1\n";
        csv << "full_fine_tune_toy," << static_cast<std::size_t>(ft_train) << ",,"
            << static_cast<std::size_t>(ft_flops) << ",\n";
        char redcsv[32];
        std::snprintf(redcsv, sizeof(redcsv), "%.1f", -reduction);
        char ovcsv[32];
        std::snprintf(ovcsv, sizeof(ovcsv), "%.1f", overhead);
        csv << "vgp_toy," << static_cast<std::size_t>(vgp_train) << "," << redcsv << ","
            << static_cast<std::size_t>(vgp_flops) << "," << ovcsv << "\n";
    }
    return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args) {
    CLI::App app{"vision graph prompting toolkit"};
    app.require_subcommand(1);

    TrainArgs targs;
    auto* train_cmd = app.add_subcommand("train", "fine-tune prompts + head on a frozen backbone");
    train_cmd->add_option("--config", targs.config_path, "run config file");
    train_cmd->add_flag("--synthetic", targs.synthetic, "generate the seeded synthetic dataset");
    train_cmd->add_flag("--linear-probe", targs.linear_probe, "train the head only");
    train_cmd->add_option("--seed", targs.seed, "override train.seed");
    train_cmd->add_option("--epochs", targs.epochs, "override train.epochs");
    train_cmd->add_option("--out", targs.out_base, "base directory for outputs");

    std::string eval_config, eval_ckpt, eval_out, eval_dump;
    bool eval_synth = false;
    auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
    eval_cmd->add_option("--config", eval_config, "run config file");
    eval_cmd->add_option("--checkpoint", eval_ckpt, "checkpoint directory")->required();
    eval_cmd->add_flag("--synthetic", eval_synth, "use the seeded synthetic dataset");
    eval_cmd->add_option("--out", eval_out, "base directory for data paths");
    eval_cmd->add_option("--dump-features", eval_dump,
                         "write per-layer VGPT feature dumps to this directory");

    std::string an_config, an_ckpt, an_mode = "relative", an_norm = "l2", an_out, an_base;
    double an_eps = 0.25;
    std::size_t an_samples = 4;
    std::int64_t an_center = -1;
    bool an_synth = false;
    auto* an_cmd = app.add_subcommand("analyze", "PCA rank analysis of backbone features");
    an_cmd->add_option("--config", an_config, "run config file");
    an_cmd->add_option("--checkpoint", an_ckpt, "checkpoint directory")->required();
    an_cmd->add_flag("--synthetic", an_synth, "use the seeded synthetic dataset");
    an_cmd->add_option("--epsilon", an_eps, "rank threshold (default 0.25)");
    an_cmd->add_option("--mode", an_mode, "relative|absolute eigenvalue threshold");
    an_cmd->add_option("--norm", an_norm, "row normalization: l2|center|none");
    an_cmd->add_option("--samples", an_samples, "number of images to pool");
    an_cmd->add_option("--center", an_center, "restrict to a center node and its neighbors");
    an_cmd->add_option("--report-out", an_out, "output directory");
    an_cmd->add_option("--out", an_base, "base directory for data paths");

    std::size_t verify_trials = 50;
    bool verify_mutate = false;
    auto* verify_cmd = app.add_subcommand("verify", "run the module invariant suites");
    verify_cmd->add_option("--seeds", verify_trials, "randomized equivalence trials");
    verify_cmd
        ->add_flag("--mutate-edge-path", verify_mutate,
                   "plant a fault in the fused edge path (self-test)")
        ->group("");  // hidden

    std::string rep_params, rep_metrics, rep_csv;
    auto* report_cmd = app.add_subcommand("report", "parameter/FLOP comparison table");
    report_cmd->add_option("--params", rep_params, "param_report.json path")->required();
    report_cmd->add_option("--metrics", rep_metrics, "metrics.jsonl path");
    report_cmd->add_option("--csv", rep_csv, "also write the table as CSV");

    std::string gd_out = "data";
    std::size_t gd_train = 64, gd_val = 128, gd_image = 32, gd_channels = 1;
    std::uint64_t gd_seed = 7;
    auto* gd_cmd = app.add_subcommand("gen-data", "emit the synthetic dataset in VGPT format");
    gd_cmd->add_option("--out", gd_out, "output directory");
    gd_cmd->add_option("--train", gd_train, "training samples");
    gd_cmd->add_option("--val", gd_val, "validation samples");
    gd_cmd->add_option("--seed", gd_seed, "generator seed");
    gd_cmd->add_option("--image", gd_image, "square image size");
    gd_cmd->add_option("--channels", gd_channels, "image channels");

    std::vector<std::string> argv_rev(args.rbegin(), args.rend());
    try {
        app.parse(argv_rev);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? kExitOk : kExitConfigError;
    }

    try {
        if (app.got_subcommand(train_cmd)) return cmd_train(targs);
        if (app.got_subcommand(eval_cmd))
            return cmd_eval(eval_config, eval_ckpt, eval_synth, eval_out, eval_dump);
        if (app.got_subcommand(an_cmd))
            return cmd_analyze(an_config, an_ckpt, an_synth, an_eps, an_mode, an_norm, an_samples,
                               an_center, an_out, an_base);
        if (app.got_subcommand(verify_cmd)) return cmd_verify(verify_trials, verify_mutate);
        if (app.got_subcommand(report_cmd)) return cmd_report(rep_params, rep_metrics, rep_csv);
        if (app.got_subcommand(gd_cmd))
            return cmd_gen_data(gd_out, gd_train, gd_val, gd_seed, gd_image, gd_channels);
    } catch (const NumericFailure& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return kExitNumericFailure;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfigError;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitConfigError;
    }
    return kExitConfigError;
}

}  // namespace vgp
