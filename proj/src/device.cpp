#include "freqbin/device.hpp"

#include <array>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>

namespace freqbin::device {

void DeviceParams::validate() const {
    auto positive = [](double v, const char* name) {
        if (!(v > 0))
            throw_invariant("invalid-device-params", std::string(name) + " must be positive");
    };
    positive(omega_D_ge_GHz, "omega_D_ge_GHz");
    positive(omega_C0_GHz, "omega_C0_GHz");
    positive(omega_E0_GHz, "omega_E0_GHz");
    positive(omega_E_op_GHz, "omega_E_op_GHz");
    positive(g_ec_MHz, "g_ec_MHz");
    positive(Gamma_E_MHz, "Gamma_E_MHz");
    positive(T1_ge_us, "T1_ge_us");
    positive(T1_ef_us, "T1_ef_us");
    positive(T2_ge_us, "T2_ge_us");
    positive(T2_ef_us, "T2_ef_us");
    positive(T1_coupler_us, "T1_coupler_us");
    positive(T2_coupler_us, "T2_coupler_us");
    if (g_dc_MHz < 0)
        throw_invariant("invalid-device-params", "g_dc_MHz must be nonnegative");
    if (alpha_D_MHz >= 0)
        throw_invariant("invalid-device-params", "alpha_D_MHz must be negative");
    if (T2_ge_us > 2 * T1_ge_us + 1e-12 || T2_ef_us > 2 * T1_ef_us + 1e-12 ||
        T2_coupler_us > 2 * T1_coupler_us + 1e-12)
        throw_invariant("invalid-device-params", "T2 must not exceed 2*T1");
}

HybridizedFrame hybridize(const DeviceParams& params) {
    params.validate();
    const double wd = params.omega_D_ge_GHz;
    const double we = params.omega_E_op_GHz; // coupler tuned resonant with the emitter
    const double gdc = params.g_dc_MHz * 1e-3;
    const double gec = params.g_ec_MHz * 1e-3;

    // Single-excitation block over the bare modes {d, c, e}, GHz.
    Eigen::Matrix3d block;
    block << wd, gdc, 0.0,
             gdc, we, gec,
             0.0, gec, we;
    Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es(block);
    const Eigen::Vector3d evals = es.eigenvalues();
    for (int i = 0; i < 3; ++i)
        for (int j = i + 1; j < 3; ++j)
            if (std::abs(evals(i) - evals(j)) < 1e-9)
                throw_numerical("ill-conditioned-hybridization",
                                "degenerate eigenvalues in the coupling block");

    // Identify the dressed data-qubit branch by its d-weight, then order the
    // remaining two as (A, S) by frequency.
    std::array<int, 3> order{}; // dressed (d, A, S) -> eigenvalue index
    int d_idx = 0;
    for (int i = 1; i < 3; ++i)
        if (std::abs(es.eigenvectors()(0, i)) > std::abs(es.eigenvectors()(0, d_idx))) d_idx = i;
    std::array<int, 2> rest{};
    int r = 0;
    for (int i = 0; i < 3; ++i)
        if (i != d_idx) rest[r++] = i;
    if (evals(rest[0]) > evals(rest[1])) std::swap(rest[0], rest[1]);
    order = {d_idx, rest[0], rest[1]};

    // Rows of R: dressed modes expressed over {d, a_A, a_S}, where the
    // hybridized bare pair is a_S = (e+c)/sqrt2, a_A = (e-c)/sqrt2.
    Eigen::Matrix3d R;
    for (int row = 0; row < 3; ++row) {
        Eigen::Vector3d v = es.eigenvectors().col(order[row]); // over {d, c, e}
        Eigen::Vector3d h;
        h << v(0), (v(2) - v(1)) / std::sqrt(2.0), (v(2) + v(1)) / std::sqrt(2.0);
        // fix the sign so the dominant component is positive
        int dom = 0;
        for (int k = 1; k < 3; ++k)
            if (std::abs(h(k)) > std::abs(h(dom))) dom = k;
        if (h(dom) < 0) h = -h;
        R.row(row) = h;
    }

    HybridizedFrame frame;
    frame.omega_d_GHz = evals(order[0]);
    frame.omega_A_GHz = evals(order[1]);
    frame.omega_S_GHz = evals(order[2]);
    auto column = [&](int j) { return ModeTriple{R(0, j), R(1, j), R(2, j)}; };
    frame.phi = column(0);    // bare d-hat
    frame.phi_pp = column(1); // bare a_A
    frame.phi_p = column(2);  // bare a_S
    return frame;
}

double coupler_frequency(double phi_rad, double omega_c0_GHz) {
    return omega_c0_GHz * std::sqrt(std::abs(std::cos(phi_rad)));
}

double coupler_frequency_derivative(double phi_rad, double omega_c0_GHz) {
    const double c = std::cos(phi_rad);
    if (std::abs(c) < 1e-6)
        throw_numerical("singular-working-point", "coupler flux derivative diverges near pi/2");
    const double s = std::sin(phi_rad);
    const double sign = c >= 0 ? 1.0 : -1.0;
    return -0.5 * omega_c0_GHz * sign * s / std::sqrt(std::abs(c));
}

double coupler_frequency_second_derivative(double phi_rad, double omega_c0_GHz) {
    const double c = std::cos(phi_rad);
    if (std::abs(c) < 1e-6)
        throw_numerical("singular-working-point", "coupler flux curvature diverges near pi/2");
    const double s = std::sin(phi_rad);
    const double ac = std::abs(c);
    const double sign = c >= 0 ? 1.0 : -1.0;
    return -0.5 * omega_c0_GHz * sign * (std::sqrt(ac) + s * s / (2.0 * std::pow(ac, 1.5)));
}

double flux_amplitude_to_eta(double eta_prime_rad, const HybridizedFrame& frame,
                             const DeviceParams& params) {
    const double slope_MHz = coupler_frequency_derivative(params.phi_dc_rad, params.omega_C0_GHz) * 1e3;
    const double coeff = (frame.phi_p.d - frame.phi_pp.d) * (frame.phi_p.A - frame.phi_pp.A);
    return 0.5 * slope_MHz * eta_prime_rad * coeff;
}

double effective_decay_estimate_MHz(double eta_MHz, const DeviceParams& params,
                                    AmplitudeConvention convention) {
    // Slowest pole of the damped two-state transfer (amplitude damping of the
    // hybridized mode is Gamma_E/4 in angular units).
    const double a = angular_from_mhz(params.Gamma_E_MHz) / 4.0;
    const double eta = angular_from_mhz(eta_MHz * convention_factor(convention));
    double amp_rate;
    if (eta < a)
        amp_rate = a - std::sqrt(a * a - eta * eta);
    else
        amp_rate = a;
    return mhz_from_angular(2.0 * amp_rate);
}

DriveConfig calibrate_drives(const HybridizedFrame& frame, const DeviceParams& params,
                             double eta_MHz, AmplitudeConvention convention) {
    if (eta_MHz < 0) throw_invariant("invalid-drive", "eta must be nonnegative");
    DriveConfig drive;
    drive.convention = convention;
    drive.eta_MHz = eta_MHz;
    drive.zeta_MHz = eta_MHz / std::sqrt(2.0);
    drive.weak_drive_warning = eta_MHz > 0.5 * params.Gamma_E_MHz;

    const double chi = params.chi_d_MHz();
    const double phi_d = frame.phi.d;
    const double phi_S = frame.phi.S;

    // Displacement calibrated from the target |zeta| = 2 |eps chi phi_d^3 phi_S|.
    if (std::abs(phi_S) > 1e-12 && drive.zeta_MHz > 0)
        drive.epsilon = drive.zeta_MHz /
                        (2.0 * std::abs(chi) * std::pow(std::abs(phi_d), 3) * std::abs(phi_S));
    else
        drive.epsilon = 0.0;
    drive.omega_AC_MHz = 4.0 * drive.epsilon * drive.epsilon * chi * std::pow(phi_d, 4);

    drive.omega_param_GHz =
        frame.omega_A_GHz - params.omega_D_ge_GHz - drive.omega_AC_MHz * 1e-3;
    drive.omega_2nd_GHz = 2.0 * params.omega_D_ge_GHz + (2.0 * chi + 2.0 * drive.omega_AC_MHz) * 1e-3 -
                          frame.omega_S_GHz;

    // Flux amplitude behind eta, then the parametric-drive Stark shift.
    const double coeff = (frame.phi_p.d - frame.phi_pp.d) * (frame.phi_p.A - frame.phi_pp.A);
    if (std::abs(coeff) > 1e-12 && eta_MHz > 0) {
        const double slope_MHz =
            coupler_frequency_derivative(params.phi_dc_rad, params.omega_C0_GHz) * 1e3;
        drive.eta_prime_rad = 2.0 * eta_MHz / (slope_MHz * coeff);
        const double curv_MHz =
            coupler_frequency_second_derivative(params.phi_dc_rad, params.omega_C0_GHz) * 1e3;
        drive.stark_param_MHz =
            0.25 * curv_MHz * drive.eta_prime_rad * drive.eta_prime_rad;
    } else {
        drive.eta_prime_rad = 0.0;
        drive.stark_param_MHz = 0.0;
    }

    const double rate = effective_decay_estimate_MHz(std::max(eta_MHz, 1e-6), params, convention);
    drive.duration_us = 8.0 / angular_from_mhz(rate);
    return drive;
}

// ---------------------------------------------------------------------------
// Flat key-value persistence
// ---------------------------------------------------------------------------

namespace {

std::map<std::string, double*> field_map(DeviceParams& p) {
    return {
        {"omega_D_ge_GHz", &p.omega_D_ge_GHz},
        {"alpha_D_MHz", &p.alpha_D_MHz},
        {"omega_C0_GHz", &p.omega_C0_GHz},
        {"omega_E0_GHz", &p.omega_E0_GHz},
        {"omega_E_op_GHz", &p.omega_E_op_GHz},
        {"g_dc_MHz", &p.g_dc_MHz},
        {"g_ec_MHz", &p.g_ec_MHz},
        {"Gamma_E_MHz", &p.Gamma_E_MHz},
        {"T1_ge_us", &p.T1_ge_us},
        {"T1_ef_us", &p.T1_ef_us},
        {"T2_ge_us", &p.T2_ge_us},
        {"T2_ef_us", &p.T2_ef_us},
        {"T1_coupler_us", &p.T1_coupler_us},
        {"T2_coupler_us", &p.T2_coupler_us},
        {"phi_dc_rad", &p.phi_dc_rad},
    };
}

} // namespace

DeviceParams load_device_params(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw_usage("config-not-found", path);
    DeviceParams p;
    auto fields = field_map(p);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            if (line.find_first_not_of(" \t\r") != std::string::npos)
                throw_usage("config-parse-error",
                            path + ":" + std::to_string(lineno) + " expected key = value");
            continue;
        }
        auto trim = [](std::string s) {
            const auto b = s.find_first_not_of(" \t\r");
            const auto e = s.find_last_not_of(" \t\r");
            return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
        };
        const std::string key = trim(line.substr(0, eq));
        const std::string val = trim(line.substr(eq + 1));
        auto it = fields.find(key);
        if (it == fields.end())
            throw_usage("config-parse-error", path + ": unknown key " + key);
        try {
            *it->second = std::stod(val);
        } catch (const std::exception&) {
            throw_usage("config-parse-error", path + ": bad value for " + key);
        }
    }
    p.validate();
    return p;
}

void save_device_params(const DeviceParams& params, const std::string& path) {
    DeviceParams copy = params;
    std::ofstream out(path);
    if (!out) throw_usage("config-write-error", path);
    out << "# freqbin-lab device parameters\n";
    char buf[64];
    for (const auto& [key, ptr] : field_map(copy)) {
        std::snprintf(buf, sizeof(buf), "%.17g", *ptr);
        out << key << " = " << buf << "\n";
    }
}

} // namespace freqbin::device
