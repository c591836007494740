#ifndef VGP_RNG_HPP
#define VGP_RNG_HPP

#include <cstdint>
#include <random>

#include "vgp/tensor.hpp"

namespace vgp {

/// Seeded generator with a hand-rolled Box-Muller normal so that streams are
/// identical across standard libraries (std::normal_distribution is not
/// portable between implementations).
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    double uniform() {  // [0, 1)
        return static_cast<double>(engine_() >> 11) * (1.0 / 9007199254740992.0);
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    std::uint64_t integer(std::uint64_t n) {  // [0, n)
        return engine_() % n;
    }

    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 1e-300) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(theta);
        have_spare_ = true;
        return r * std::cos(theta);
    }

    Tensor normal_tensor(Shape shape, double stddev) {
        std::vector<double> data(numel(shape));
        for (double& v : data) v = stddev * normal();
        return Tensor::from(std::move(shape), std::move(data));
    }

    std::uint64_t raw() { return engine_(); }

private:
    std::mt19937_64 engine_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace vgp

#endif
