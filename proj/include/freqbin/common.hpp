// common.hpp — Shared scalar types, flagged errors, and deterministic RNG helpers

#pragma once

#include <complex>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

#include <Eigen/Dense>

namespace freqbin {

using Complex = std::complex<double>;
using Matrix = Eigen::MatrixXcd;
using Vector = Eigen::VectorXcd;
using RealVector = Eigen::VectorXd;

inline constexpr double kTwoPi = 6.283185307179586476925286766559;

// All user-facing frequencies are linear (value of omega/2pi) in GHz or MHz.
// The conversion to angular rad/us happens once, at the dynamics boundary.
inline double angular_from_mhz(double f_mhz) { return kTwoPi * f_mhz; }
inline double mhz_from_angular(double w) { return w / kTwoPi; }

// ---------------------------------------------------------------------------
// Flagged errors. The flag string is the stable identifier a front end echoes;
// the kind selects the process exit code (2 usage, 3 numerical, 4 invariant).
// ---------------------------------------------------------------------------

enum class ErrorKind { Usage = 2, Numerical = 3, Invariant = 4 };

class FlagError : public std::runtime_error {
public:
    FlagError(ErrorKind kind, std::string flag, const std::string& detail = "")
        : std::runtime_error(detail.empty() ? flag : flag + ": " + detail),
          kind_(kind),
          flag_(std::move(flag)) {}

    ErrorKind kind() const { return kind_; }
    const std::string& flag() const { return flag_; }

private:
    ErrorKind kind_;
    std::string flag_;
};

[[noreturn]] inline void throw_usage(const std::string& flag, const std::string& detail = "") {
    throw FlagError(ErrorKind::Usage, flag, detail);
}
[[noreturn]] inline void throw_numerical(const std::string& flag, const std::string& detail = "") {
    throw FlagError(ErrorKind::Numerical, flag, detail);
}
[[noreturn]] inline void throw_invariant(const std::string& flag, const std::string& detail = "") {
    throw FlagError(ErrorKind::Invariant, flag, detail);
}

// ---------------------------------------------------------------------------
// Deterministic RNG. Gaussian variates use an explicit Box-Muller transform so
// that seeded streams are reproducible independent of the standard library's
// normal_distribution implementation.
// ---------------------------------------------------------------------------

class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    double uniform() {
        // 53-bit mantissa uniform in [0,1)
        return (engine_() >> 11) * 0x1.0p-53;
    }

    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 1e-300) u1 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = kTwoPi * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    // Circularly symmetric complex Gaussian with E|z|^2 = 1
    Complex complex_normal() {
        return Complex(normal(), normal()) / std::sqrt(2.0);
    }

    std::uint64_t raw() { return engine_(); }

private:
    std::mt19937_64 engine_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

// splitmix64 step, used to derive independent substream seeds from (seed, index)
inline std::uint64_t substream_seed(std::uint64_t seed, std::uint64_t index) {
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (index + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

} // namespace freqbin
