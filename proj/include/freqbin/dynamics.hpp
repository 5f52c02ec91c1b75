// dynamics.hpp — Time-dependent Lindblad evolution of the effective system,
// spectroscopy sweeps, photon-envelope extraction via two-time correlations,
// and cascaded capture of the traveling modes into virtual cavities.

#pragma once

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "freqbin/device.hpp"
#include "freqbin/qlinalg.hpp"

namespace freqbin::dynamics {

using device::DeviceParams;
using device::DriveConfig;
using device::HybridizedFrame;
using qlinalg::DensityMatrix;

// Subsystem layout: [data qubit (3), a_A (2), a_S (2)] and, with capture
// cavities, additionally [v_A (2), v_S (2)].
inline const std::vector<int> kEmissionDims = {3, 2, 2};
inline const std::vector<int> kCaptureDims = {3, 2, 2, 2, 2};

// ---------------------------------------------------------------------------
// System specification
// ---------------------------------------------------------------------------

/// One Hamiltonian term: coeff(t) * op + conj(coeff(t)) * op^dag when
/// `hermitian_pair` is set, else coeff(t) * op (op must then be Hermitian and
/// the coefficient real). A null coeff means the constant 1.
struct HamTerm {
    Matrix op;
    std::function<Complex(double)> coeff;
    bool hermitian_pair = false;
};

/// One collapse operator L(t) = base + sum_j coeff_j(t) * op_j.
struct CollapseOp {
    Matrix base;
    struct Part {
        Matrix op;
        std::function<Complex(double)> coeff;
    };
    std::vector<Part> parts;
    std::string label;
    bool time_dependent() const { return !parts.empty(); }
};

struct SystemSpec {
    std::vector<int> dims;
    std::vector<HamTerm> hamiltonian;
    std::vector<CollapseOp> collapse;
    std::string rotating_frame; // record of the removed H0

    int size() const;
    Matrix hamiltonian_at(double t) const;
    /// Largest angular scale (Hamiltonian coefficients and collapse rates),
    /// rad/us, for the dt precondition dt <= 1/(20 * scale).
    double max_angular_scale() const;
};

struct SystemOptions {
    bool decoherence = true;
    bool full_model = false;
    bool with_capture = false;
    double detuning_param_MHz = 0.0; // drive offset from the calibrated resonance
    double detuning_2nd_MHz = 0.0;
};

/// Effective Hamiltonian of Eq.-(1) form in the frame co-rotating with the
/// calibrated drives: the parametric term couples |e><g| a_A, the second-order
/// term couples sqrt(2) |f><g| a_S, and detunings enter as -delta n_k. The
/// anharmonicity is absorbed by the two-photon resonance condition; its
/// residual cross-Kerr and Stark corrections enter with `full_model`.
SystemSpec build_emission_system(const DeviceParams& params, const HybridizedFrame& frame,
                                 const DriveConfig& drive, const SystemOptions& opts);

/// Same system enlarged by the two capture cavities with the cascaded
/// Hamiltonian and total Lindblad operators for the supplied envelopes.
struct Envelope; // fwd
SystemSpec build_capture_system(const DeviceParams& params, const HybridizedFrame& frame,
                                const DriveConfig& drive, const SystemOptions& opts,
                                const Envelope& env_A, const Envelope& env_S, double dt_us);

// ---------------------------------------------------------------------------
// Evolution
// ---------------------------------------------------------------------------

struct Trajectory {
    std::vector<double> times;                            // us
    std::map<std::string, std::vector<Complex>> series;   // expectation records
    std::vector<Matrix> states;                           // stored states (stride applied)
    std::vector<double> state_times;
    int state_stride = 0;

    const std::vector<Complex>& at(const std::string& name) const;
};

struct EvolveOptions {
    double dt_us = 1e-3; // fixed RK4 step, default 1 ns
    int store_stride = 0;
    std::map<std::string, Matrix> observables;
    double trace_tol = 1e-6;
};

/// Fixed-step RK4 integration of rho' = -i[H(t), rho] + sum_j D[L_j] rho.
/// Throws step-size-too-large if the trace drifts by more than trace_tol.
Trajectory evolve(const DensityMatrix& rho0, const SystemSpec& spec, double t_end,
                  const EvolveOptions& opts);

// ---------------------------------------------------------------------------
// Envelopes and two-time correlations
// ---------------------------------------------------------------------------

struct Envelope {
    std::vector<double> times;      // us
    std::vector<Complex> samples;   // f_k(t); when normalized, sum |f|^2 dt = 1
    double carrier_GHz = 0.0;
    double photons_per_mode = 0.0;  // n_k
    double gamma_eff_MHz = 0.0;     // fitted |f|^2 decay rate, 0 until fitted
    double purity = 1.0;            // leading eigenvalue fraction of G2
    bool normalized = false;
    bool multimode_warning = false; // purity < 0.95
    bool empty = false;             // n below threshold

    double dt() const { return times.size() > 1 ? times[1] - times[0] : 0.0; }
};

/// Two-time correlation G2(t1,t2) = <L^dag(t1) L(t2)> on the stored-state grid
/// of `traj`, computed with the quantum regression theorem and Hermitian
/// extension for t2 < t1.
Matrix two_time_correlation(const SystemSpec& spec, const Trajectory& traj, const Matrix& L,
                            int substeps = 2);

/// All second-order correlations needed for temporal filtering of both
/// channels: G2_A, G2_S, the cross correlation <L_A^dag(t1) L_S(t2)>, and the
/// anomalous <L_A(t1) L_S(t2)>.
struct CorrelationSet {
    std::vector<double> times;
    Matrix g2_A, g2_S;
    Matrix cross;   // <L_A^dag(t1) L_S(t2)>
    Matrix anomalous; // <L_A(t1) L_S(t2)>
};
CorrelationSet two_time_correlations(const SystemSpec& spec, const Trajectory& traj,
                                     const Matrix& L_A, const Matrix& L_S, int substeps = 2);

/// Dominant eigenpair of G2*dt: photon number, normalized envelope (phase
/// fixed so the peak sample is real positive), and purity report.
Envelope mode_decompose(const Matrix& g2, const std::vector<double>& times, double carrier_GHz = 0.0);

/// Least-squares fit of log|f| from the peak onward; returns the decay rate of
/// the |f|^2 convention in MHz.
double fit_exponential_decay(const std::vector<double>& times, const std::vector<double>& magnitude);

// ---------------------------------------------------------------------------
// Protocol runs
// ---------------------------------------------------------------------------

enum class Protocol { Encoded, Displaced };

struct CaptureResult {
    DensityMatrix state;      // joint state of (v_A, v_S)
    double captured_photons = 0.0;
    double emitted_photons = 0.0;
    double efficiency = 0.0;
    bool mismatch_warning = false;
};

/// Cascaded capture of the two traveling modes: evolves the enlarged system
/// and returns the final joint state of the capture cavities. With `strict`,
/// a capture deviating from the emitted photon number by more than 2 percent
/// raises envelope-mismatch.
CaptureResult cascaded_capture(const DeviceParams& params, const HybridizedFrame& frame,
                               const DriveConfig& drive, const SystemOptions& opts,
                               const DensityMatrix& rho0_emission, const Envelope& env_A,
                               const Envelope& env_S, double dt_us, bool strict = false);

struct EmissionResult {
    Trajectory trajectory;
    Envelope env_A, env_S;
    CaptureResult capture;
    CorrelationSet correlations;
};

struct EmissionRunOptions {
    SystemOptions system;
    double dt_us = 1e-3;
    int g2_points = 384;        // coarse grid size for the correlation stage
    bool with_capture = true;
    bool with_anomalous = false; // also compute <L_A L_S>
    bool strict_capture = false;
};

/// Full generation run: state preparation (ideal instantaneous rotations),
/// simultaneous drives, envelope extraction, and capture.
/// Encoded protocol prepares cos(theta/2)|e> + e^{i phase} sin(theta/2)|f>;
/// displaced prepares |g>/2 + |e>/sqrt2 + |f>/2.
EmissionResult simulate_emission(double theta, Protocol protocol, const DeviceParams& params,
                                 const HybridizedFrame& frame, const DriveConfig& drive,
                                 const EmissionRunOptions& opts, double phase = 0.0);

DensityMatrix initial_emission_state(double theta, Protocol protocol, double phase = 0.0);

/// Ideal frequency-bin state cos(theta/2)|10> + e^{i phase} sin(theta/2)|01>
/// on the (2,2) two-mode space.
DensityMatrix ideal_two_mode_state(double theta, double phase = 0.0);

// ---------------------------------------------------------------------------
// Spectroscopy
// ---------------------------------------------------------------------------

enum class SpectroscopyDrive { Parametric, SecondOrder };

struct SpectroscopySurface {
    std::vector<double> freqs_GHz;
    std::vector<double> amps_MHz;
    // population[amp_index * freqs.size() + freq_index]
    std::vector<double> population;
    double duration_us = 1.0;
};

struct SpectroscopyOptions {
    double duration_us = 1.0;
    double dt_us = 5e-4;
    bool decoherence = true;
    bool full_model = true;
    device::AmplitudeConvention convention = device::AmplitudeConvention::RabiRate;
    int jobs = 0; // 0 = hardware concurrency
};

/// Residual population of the prepared level (|e> for the parametric drive,
/// |f> for the second-order drive) after a fixed drive window, over a
/// frequency x amplitude grid.
SpectroscopySurface spectroscopy_sweep(SpectroscopyDrive which, const std::vector<double>& freqs_GHz,
                                       const std::vector<double>& amps_MHz,
                                       const DeviceParams& params, const HybridizedFrame& frame,
                                       const SpectroscopyOptions& opts);

/// Local minima of a population trace, refined by parabolic interpolation.
std::vector<double> find_dips(const std::vector<double>& freqs, const std::vector<double>& pop);

/// Deterministic worker pool over `count` items; results keyed by index.
void parallel_for(int count, int jobs, const std::function<void(int)>& body);

} // namespace freqbin::dynamics
