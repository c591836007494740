#ifndef VGP_VERIFY_HPP
#define VGP_VERIFY_HPP

#include <string>
#include <vector>

#include "vgp/tensor.hpp"

namespace vgp {

struct SuiteResult {
    std::string name;
    bool passed = false;
    std::string detail;
};

/// Full prompted forward + cross-entropy against central finite differences
/// for every trainable tensor (d=16, N=9, K=3, r=4, M=2).
SuiteResult suite_gradcheck();

/// Compositional vs fused block over randomized configs; max abs diff must
/// stay within 1e-10. `mutate_edge_path` perturbs the P_e tensor seen by the
/// fused path only — a planted fault the suite is expected to catch.
SuiteResult suite_dual_path(std::size_t trials, bool mutate_edge_path = false);

/// alpha = beta = 0, M = 0 must reproduce the frozen backbone bitwise.
SuiteResult suite_recovery(std::size_t inputs = 20);

/// Singular values of stacked node deltas / edge terms vanish past index r.
SuiteResult suite_lowrank();

/// Backbone bytes are identical across a short training run.
SuiteResult suite_frozen_backbone();

/// Constructed-rank PCA checks, spectral reconstruction, threshold
/// monotonicity.
SuiteResult suite_pca();

std::vector<SuiteResult> run_all_suites(std::size_t dual_path_trials,
                                        bool mutate_edge_path = false);

}  // namespace vgp

#endif
