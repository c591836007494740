#ifndef VGP_CLI_HPP
#define VGP_CLI_HPP

#include <string>
#include <vector>

namespace vgp {

/// Exit-code contract: 0 ok, 1 verification failure, 2 config/input error,
/// 3 numeric failure.
int run_cli(const std::vector<std::string>& args);

}  // namespace vgp

#endif
