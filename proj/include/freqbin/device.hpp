// device.hpp — Device parameterization, coupler+emitter hybridization, flux-to-frequency
// mapping, and drive calibration including Stark shifts.

#pragma once

#include <string>

#include "freqbin/common.hpp"

namespace freqbin::device {

// ---------------------------------------------------------------------------
// Domain types
// ---------------------------------------------------------------------------

/// Circuit frequencies, couplings, decay and coherence rates. All frequencies
/// are linear (omega/2pi) in GHz or MHz; times in microseconds.
struct DeviceParams {
    double omega_D_ge_GHz = 5.05;   // data qubit g-e transition
    double alpha_D_MHz = -215.0;    // anharmonicity, negative sign convention (alpha = 2 chi_d)
    double omega_C0_GHz = 8.46;     // coupler maximum frequency at zero flux
    double omega_E0_GHz = 6.17;     // emitter maximum frequency at zero flux
    double omega_E_op_GHz = 5.745;  // flux-biased operating frequency of the emitter
    double g_dc_MHz = 37.5;         // data-qubit <-> coupler coupling
    double g_ec_MHz = 46.0;         // coupler <-> emitter coupling
    double Gamma_E_MHz = 8.0;       // emitter decay into the waveguide
    double T1_ge_us = 20.8;         // operating-point values for the data qubit
    double T1_ef_us = 27.0;
    double T2_ge_us = 14.0;
    double T2_ef_us = 8.8;
    double T1_coupler_us = 2.3;
    double T2_coupler_us = 1.4;
    double phi_dc_rad = 1.09149;    // DC flux working point (pi*Phi/Phi_0)

    double chi_d_MHz() const { return 0.5 * alpha_D_MHz; }

    void validate() const;
};

/// Result of diagonalizing the single-excitation block over {data qubit,
/// coupler, emitter}. Each bare mode is expressed in the dressed eigenbasis
/// ordered (d, A, S); the triples are rows of an orthogonal matrix and have
/// unit Euclidean norm.
struct ModeTriple {
    double d = 0.0;
    double A = 0.0;
    double S = 0.0;
    double norm() const { return std::sqrt(d * d + A * A + S * S); }
};

struct HybridizedFrame {
    double omega_A_GHz = 0.0;
    double omega_S_GHz = 0.0;   // omega_S > omega_A
    double omega_d_GHz = 0.0;   // dressed data-qubit frequency
    ModeTriple phi;             // bare d-hat in dressed modes
    ModeTriple phi_p;           // bare a_S in dressed modes
    ModeTriple phi_pp;          // bare a_A in dressed modes

    double splitting_MHz() const { return (omega_S_GHz - omega_A_GHz) * 1e3; }
};

/// Drive amplitude convention. The device documentation quotes amplitudes as
/// oscillation (Rabi) rates; the Hamiltonian coefficient is then half the
/// quoted value. `Coefficient` uses the quoted value directly.
enum class AmplitudeConvention { RabiRate, Coefficient };

inline double convention_factor(AmplitudeConvention c) {
    return c == AmplitudeConvention::RabiRate ? 0.5 : 1.0;
}

/// Calibrated drive settings. Drive frequencies are reported as positive
/// generator settings (the magnitude of the stated difference-frequency
/// conditions); Stark compensation is folded in.
struct DriveConfig {
    double eta_MHz = 1.1;           // parametric amplitude
    double zeta_MHz = 0.0;          // second-order amplitude, eta/sqrt(2)
    double eta_prime_rad = 0.0;     // flux-drive amplitude behind eta
    double epsilon = 0.0;           // displacement parameter behind zeta
    double omega_param_GHz = 0.0;   // omega_A - omega_D - omega_AC
    double omega_2nd_GHz = 0.0;     // 2 omega_D + 2 chi_d + 2 omega_AC - omega_S
    double omega_AC_MHz = 0.0;      // AC Stark shift of the data qubit, 4 eps^2 chi_d phi_d^4
    double stark_param_MHz = 0.0;   // parametric-drive Stark shift S(eta')
    double duration_us = 0.0;       // emission window
    double ramp_us = 0.01;          // cosine ramp at each pulse edge
    AmplitudeConvention convention = AmplitudeConvention::RabiRate;
    bool weak_drive_warning = false; // set when eta exceeds Gamma_E/2
};

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

/// Diagonalizes the 3x3 single-excitation coupling block with the coupler
/// tuned resonant with the emitter. With g_dc = 0 this returns exactly
/// omega_{S,A} = omega_E +- g_ec.
HybridizedFrame hybridize(const DeviceParams& params);

/// omega_C = omega_c0 sqrt(|cos(phi)|)
double coupler_frequency(double phi_rad, double omega_c0_GHz);
double coupler_frequency_derivative(double phi_rad, double omega_c0_GHz);   // GHz/rad
double coupler_frequency_second_derivative(double phi_rad, double omega_c0_GHz); // GHz/rad^2

/// Parametric amplitude from the flux modulation amplitude:
/// eta = 1/2 (d omega_c / d phi) eta' (phi'_d - phi''_d)(phi'_A - phi''_A), in MHz.
double flux_amplitude_to_eta(double eta_prime_rad, const HybridizedFrame& frame,
                             const DeviceParams& params);

/// Fixes zeta = eta/sqrt(2), derives the displacement epsilon that realizes
/// this zeta through the dressed coefficients, and assigns the Stark-shifted
/// drive frequencies.
DriveConfig calibrate_drives(const HybridizedFrame& frame, const DeviceParams& params,
                             double eta_MHz,
                             AmplitudeConvention convention = AmplitudeConvention::RabiRate);

/// Slow-pole estimate of the emitted envelope's population decay rate in MHz,
/// used to size the emission window (duration defaults to 8 / rate).
double effective_decay_estimate_MHz(double eta_MHz, const DeviceParams& params,
                                    AmplitudeConvention convention);

// Flat key-value config document, one `key = value` per line, units in key names.
DeviceParams load_device_params(const std::string& path);
void save_device_params(const DeviceParams& params, const std::string& path);

} // namespace freqbin::device
