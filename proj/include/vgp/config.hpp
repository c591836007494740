#ifndef VGP_CONFIG_HPP
#define VGP_CONFIG_HPP

#include <string>

#include "vgp/backbone.hpp"
#include "vgp/train.hpp"

namespace vgp {

/// Whole-run configuration, parsed from a sectioned key-value file.
/// Grammar (documented in README): `[section]` headers, `key = value` lines,
/// `#` comments, blank lines. Unknown sections or keys are rejected, every
/// value is validated against the owning module's invariants before any work
/// starts.
struct RunConfig {
    BackboneConfig model;

    // prompt section
    std::size_t prompt_m = 4;
    std::size_t prompt_r = 32;
    double alpha = 0.2;
    double beta = 0.2;

    TrainConfig train;

    // paths
    std::string data_dir = "data";
    std::string checkpoint_dir = "checkpoints";
    std::string report_dir = "reports";

    std::size_t classes = 2;
    std::size_t train_samples = 64;
    std::size_t val_samples = 128;

    void validate() const;
};

RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::string& path);
std::string default_config_text();

}  // namespace vgp

#endif
