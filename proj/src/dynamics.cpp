#include "freqbin/dynamics.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <memory>
#include <mutex>
#include <thread>

#include <Eigen/Eigenvalues>
#include <Eigen/SparseCore>

namespace freqbin::dynamics {

using qlinalg::annihilation;
using qlinalg::basis_ket;
using qlinalg::basis_op;
using qlinalg::embed;
using SpMat = Eigen::SparseMatrix<Complex>;

namespace {

int product(const std::vector<int>& dims) {
    int n = 1;
    for (int d : dims) n *= d;
    return n;
}

Matrix embed_op(const Matrix& local, int which, const std::vector<int>& dims) {
    return embed(local, which, dims).data;
}

// Drive pulse envelope: cosine ramps of length `ramp` at both window edges.
double pulse_envelope(double t, double duration, double ramp) {
    if (t < 0 || t > duration) return 0.0;
    if (ramp <= 0) return 1.0;
    if (t < ramp) return 0.5 * (1.0 - std::cos(kTwoPi * 0.5 * t / ramp));
    if (t > duration - ramp) return 0.5 * (1.0 - std::cos(kTwoPi * 0.5 * (duration - t) / ramp));
    return 1.0;
}

} // namespace

// ---------------------------------------------------------------------------
// SystemSpec
// ---------------------------------------------------------------------------

int SystemSpec::size() const { return product(dims); }

Matrix SystemSpec::hamiltonian_at(double t) const {
    Matrix h = Matrix::Zero(size(), size());
    for (const auto& term : hamiltonian) {
        const Complex c = term.coeff ? term.coeff(t) : Complex(1.0, 0.0);
        if (term.hermitian_pair) {
            h += c * term.op;
            h += std::conj(c) * term.op.adjoint();
        } else {
            h += c * term.op;
        }
    }
    return h;
}

double SystemSpec::max_angular_scale() const {
    double scale = 0.0;
    for (const auto& term : hamiltonian) {
        const Complex c = term.coeff ? term.coeff(0.0) : Complex(1.0, 0.0);
        scale = std::max(scale, std::abs(c) * term.op.cwiseAbs().maxCoeff());
    }
    for (const auto& col : collapse) {
        double m = col.base.size() > 0 ? col.base.cwiseAbs().maxCoeff() : 0.0;
        scale = std::max(scale, m * m);
    }
    return scale;
}

const std::vector<Complex>& Trajectory::at(const std::string& name) const {
    auto it = series.find(name);
    if (it == series.end()) throw_invariant("unknown-series", name);
    return it->second;
}

// ---------------------------------------------------------------------------
// Compiled system and RK4 propagation
// ---------------------------------------------------------------------------

namespace {

struct CompiledHTerm {
    SpMat op;
    SpMat op_adj;
    std::function<Complex(double)> coeff;
    bool pair = false;
};

struct CompiledCollapse {
    // constant form
    SpMat L, Ld, LdL;
    // time-dependent form
    bool td = false;
    SpMat base;
    std::vector<std::pair<SpMat, std::function<Complex(double)>>> parts;
};

class CompiledSystem {
public:
    explicit CompiledSystem(const SystemSpec& spec) : n_(spec.size()) {
        for (const auto& term : spec.hamiltonian) {
            CompiledHTerm ct;
            ct.op = term.op.sparseView();
            if (term.hermitian_pair) ct.op_adj = Matrix(term.op.adjoint()).sparseView();
            ct.coeff = term.coeff;
            ct.pair = term.hermitian_pair;
            hterms_.push_back(std::move(ct));
        }
        for (const auto& col : spec.collapse) {
            CompiledCollapse cc;
            if (col.time_dependent()) {
                cc.td = true;
                cc.base = col.base.sparseView();
                for (const auto& part : col.parts)
                    cc.parts.emplace_back(part.op.sparseView(), part.coeff);
            } else {
                cc.L = col.base.sparseView();
                cc.Ld = Matrix(col.base.adjoint()).sparseView();
                cc.LdL = (cc.Ld * cc.L).pruned();
            }
            collapse_.push_back(std::move(cc));
        }
    }

    int size() const { return n_; }

    // dX = -i (H X - X H) + sum_j [ L X L^dag - (L^dag L X + X L^dag L)/2 ]
    Matrix rhs(const Matrix& x, double t) const {
        Matrix dx = Matrix::Zero(n_, n_);
        for (const auto& term : hterms_) {
            const Complex c = term.coeff ? term.coeff(t) : Complex(1.0, 0.0);
            if (c != Complex(0.0, 0.0)) {
                dx.noalias() += Complex(0, -1) * c * (term.op * x);
                dx.noalias() += Complex(0, 1) * c * (x * term.op);
                if (term.pair) {
                    dx.noalias() += Complex(0, -1) * std::conj(c) * (term.op_adj * x);
                    dx.noalias() += Complex(0, 1) * std::conj(c) * (x * term.op_adj);
                }
            }
        }
        for (const auto& col : collapse_) {
            if (!col.td) {
                dissipator(col.L, col.Ld, col.LdL, x, dx);
            } else {
                SpMat L = col.base;
                for (const auto& [op, coeff] : col.parts) {
                    const Complex c = coeff(t);
                    if (c != Complex(0.0, 0.0)) L = L + SpMat(c * op);
                }
                SpMat Ld = SpMat(L.adjoint());
                SpMat LdL = SpMat(Ld * L);
                dissipator(L, Ld, LdL, x, dx);
            }
        }
        return dx;
    }

    void rk4_step(Matrix& x, double t, double dt) const {
        const Matrix k1 = rhs(x, t);
        const Matrix k2 = rhs(x + 0.5 * dt * k1, t + 0.5 * dt);
        const Matrix k3 = rhs(x + 0.5 * dt * k2, t + 0.5 * dt);
        const Matrix k4 = rhs(x + dt * k3, t + dt);
        x += (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    }

private:
    static void dissipator(const SpMat& L, const SpMat& Ld, const SpMat& LdL, const Matrix& x,
                           Matrix& dx) {
        const Matrix lx = L * x;
        dx.noalias() += lx * Ld;
        dx.noalias() -= 0.5 * (LdL * x);
        dx.noalias() -= 0.5 * (x * LdL);
    }

    int n_;
    std::vector<CompiledHTerm> hterms_;
    std::vector<CompiledCollapse> collapse_;
};

Complex sparse_trace_product(const SpMat& a, const Matrix& b) {
    // Tr(a * b) over the sparse pattern of a
    Complex sum = 0.0;
    for (int k = 0; k < a.outerSize(); ++k)
        for (SpMat::InnerIterator it(a, k); it; ++it) sum += it.value() * b(it.col(), it.row());
    return sum;
}

} // namespace

// ---------------------------------------------------------------------------
// evolve
// ---------------------------------------------------------------------------

Trajectory evolve(const DensityMatrix& rho0, const SystemSpec& spec, double t_end,
                  const EvolveOptions& opts) {
    if (rho0.dims != spec.dims)
        throw_invariant("dimension-mismatch", "initial state does not match system dims");
    if (t_end <= 0) throw_invariant("invalid-duration", "t_end must be positive");

    const int nsteps = std::max(1, static_cast<int>(std::llround(t_end / opts.dt_us)));
    const double dt = t_end / nsteps;

    CompiledSystem sys(spec);
    std::vector<std::pair<std::string, SpMat>> obs;
    for (const auto& [name, op] : opts.observables) obs.emplace_back(name, op.sparseView());

    Trajectory traj;
    traj.times.reserve(nsteps + 1);
    for (const auto& [name, op] : obs) traj.series[name].reserve(nsteps + 1);
    traj.state_stride = opts.store_stride;

    Matrix rho = rho0.data;
    for (int i = 0; i <= nsteps; ++i) {
        const double t = i * dt;
        traj.times.push_back(t);
        for (const auto& [name, op] : obs) traj.series[name].push_back(sparse_trace_product(op, rho));
        if (opts.store_stride > 0 && i % opts.store_stride == 0) {
            traj.states.push_back(rho);
            traj.state_times.push_back(t);
        }
        if (i == nsteps) break;
        sys.rk4_step(rho, t, dt);
        rho = 0.5 * (rho + rho.adjoint().eval());
        const double tr = rho.trace().real();
        if (std::abs(tr - 1.0) > opts.trace_tol)
            throw_numerical("step-size-too-large",
                            "trace drift " + std::to_string(tr - 1.0) + " at t=" + std::to_string(t));
    }
    return traj;
}

// ---------------------------------------------------------------------------
// System builders
// ---------------------------------------------------------------------------

namespace {

struct Ops {
    std::vector<int> dims;
    Matrix a_A, a_S, n_A, n_S; // hybridized modes
    Matrix sig_ge;             // |g><e|
    Matrix sig_ef;             // |e><f|
    Matrix sig_gf;             // |g><f|
    Matrix proj_e, proj_f, n_D;
    Matrix a_vA, a_vS, n_vA, n_vS;
};

Ops make_ops(bool with_capture) {
    Ops ops;
    ops.dims = with_capture ? kCaptureDims : kEmissionDims;
    const Matrix a2 = annihilation(2).data;
    ops.a_A = embed_op(a2, 1, ops.dims);
    ops.a_S = embed_op(a2, 2, ops.dims);
    ops.n_A = ops.a_A.adjoint() * ops.a_A;
    ops.n_S = ops.a_S.adjoint() * ops.a_S;
    ops.sig_ge = embed_op(basis_op(3, 0, 1), 0, ops.dims);
    ops.sig_ef = embed_op(basis_op(3, 1, 2), 0, ops.dims);
    ops.sig_gf = embed_op(basis_op(3, 0, 2), 0, ops.dims);
    ops.proj_e = embed_op(basis_op(3, 1, 1), 0, ops.dims);
    ops.proj_f = embed_op(basis_op(3, 2, 2), 0, ops.dims);
    Matrix nd = Matrix::Zero(3, 3);
    nd(1, 1) = 1.0;
    nd(2, 2) = 2.0;
    ops.n_D = embed_op(nd, 0, ops.dims);
    if (with_capture) {
        ops.a_vA = embed_op(a2, 3, ops.dims);
        ops.a_vS = embed_op(a2, 4, ops.dims);
        ops.n_vA = ops.a_vA.adjoint() * ops.a_vA;
        ops.n_vS = ops.a_vS.adjoint() * ops.a_vS;
    }
    return ops;
}

void add_waveguide_channels(SystemSpec& spec, const Ops& ops, const DeviceParams& params) {
    const double rate = angular_from_mhz(params.Gamma_E_MHz) / 2.0;
    spec.collapse.push_back({std::sqrt(rate) * ops.a_A, {}, "waveguide-A"});
    spec.collapse.push_back({std::sqrt(rate) * ops.a_S, {}, "waveguide-S"});
}

// Data-qubit T1/T2 channels for both transitions plus coupler relaxation and
// dephasing carried by the hybridized modes (secular form: the 2g splitting is
// far larger than any intrinsic rate).
void add_decoherence_channels(SystemSpec& spec, const Ops& ops, const DeviceParams& params) {
    const double g1_ge = 1.0 / params.T1_ge_us;
    const double g1_ef = 1.0 / params.T1_ef_us;
    spec.collapse.push_back({std::sqrt(g1_ge) * ops.sig_ge, {}, "D-relax-ge"});
    spec.collapse.push_back({std::sqrt(g1_ef) * ops.sig_ef, {}, "D-relax-ef"});

    const double gphi_ge = std::max(0.0, 1.0 / params.T2_ge_us - 0.5 * g1_ge);
    const double gamma_e = 2.0 * gphi_ge;
    const double gphi_ef = std::max(0.0, 1.0 / params.T2_ef_us - 0.5 * (g1_ge + g1_ef));
    const double gamma_f = std::max(0.0, 2.0 * gphi_ef - gamma_e);
    if (gamma_e > 0)
        spec.collapse.push_back({std::sqrt(gamma_e) * ops.proj_e, {}, "D-dephase-e"});
    if (gamma_f > 0)
        spec.collapse.push_back({std::sqrt(gamma_f) * ops.proj_f, {}, "D-dephase-f"});

    const double g1_c = 1.0 / params.T1_coupler_us;
    spec.collapse.push_back({std::sqrt(0.5 * g1_c) * ops.a_A, {}, "coupler-relax-A"});
    spec.collapse.push_back({std::sqrt(0.5 * g1_c) * ops.a_S, {}, "coupler-relax-S"});
    const double gphi_c = std::max(0.0, 1.0 / params.T2_coupler_us - 0.5 * g1_c);
    if (gphi_c > 0) {
        spec.collapse.push_back(
            {std::sqrt(0.5 * gphi_c) * (ops.n_A + ops.n_S), {}, "coupler-dephase"});
        spec.collapse.push_back(
            {std::sqrt(0.5 * gphi_c) * (ops.a_S.adjoint() * ops.a_A), {}, "coupler-hop-AS"});
        spec.collapse.push_back(
            {std::sqrt(0.5 * gphi_c) * (ops.a_A.adjoint() * ops.a_S), {}, "coupler-hop-SA"});
    }
}

std::function<Complex(double)> drive_coeff(double amp_angular, double duration, double ramp) {
    if (ramp <= 0)
        return nullptr; // constant; handled by the caller when amp is folded into op
    return [=](double t) { return Complex(amp_angular * pulse_envelope(t, duration, ramp), 0.0); };
}

void add_emission_couplings(SystemSpec& spec, const Ops& ops, const DeviceParams& params,
                            const HybridizedFrame& frame, const DriveConfig& drive,
                            const SystemOptions& opts) {
    const double kappa = device::convention_factor(drive.convention);
    const double eta = angular_from_mhz(drive.eta_MHz * kappa);
    const double zeta = angular_from_mhz(drive.zeta_MHz * kappa);

    const Matrix couple_A = ops.sig_ge.adjoint() * ops.a_A;            // |e><g| a_A
    const Matrix couple_S = std::sqrt(2.0) * ops.sig_gf.adjoint() * ops.a_S; // d^dag2 a_S part

    auto env_A = drive_coeff(eta, drive.duration_us, drive.ramp_us);
    auto env_S = drive_coeff(zeta, drive.duration_us, drive.ramp_us);
    if (drive.ramp_us <= 0) {
        spec.hamiltonian.push_back({eta * couple_A, nullptr, true});
        spec.hamiltonian.push_back({zeta * couple_S, nullptr, true});
    } else {
        spec.hamiltonian.push_back({couple_A, env_A, true});
        spec.hamiltonian.push_back({couple_S, env_S, true});
    }

    // Detunings from the calibrated drive frequencies: the level |g,1_k>
    // sits at -delta_k relative to the emptied data-qubit level.
    double coef_A = -angular_from_mhz(opts.detuning_param_MHz);
    double coef_S = -angular_from_mhz(opts.detuning_2nd_MHz);
    double coef_D = 0.0;
    if (opts.full_model) {
        // Residual dressed-mode corrections: cross-Kerr, displacement Stark
        // shifts, and the parametric-drive Stark shift. The data-qubit shift
        // omega_AC and its twin on the drive frequencies cancel on resonance;
        // both sides are kept explicit here.
        const double chi = params.chi_d_MHz();
        const double pd2 = frame.phi.d * frame.phi.d;
        const double pS2 = frame.phi.S * frame.phi.S;
        const double pA2 = frame.phi.A * frame.phi.A;
        const double eps2 = drive.epsilon * drive.epsilon;
        coef_D += angular_from_mhz(4.0 * eps2 * chi * pd2 * pd2); // == omega_AC
        coef_A += angular_from_mhz(4.0 * eps2 * chi * pd2 * pA2 - drive.omega_AC_MHz);
        coef_S += angular_from_mhz(4.0 * eps2 * chi * pd2 * pS2 - 2.0 * drive.omega_AC_MHz);
        const double s = drive.stark_param_MHz;
        coef_D += angular_from_mhz(s * std::pow(frame.phi_p.d - frame.phi_pp.d, 2));
        coef_A += angular_from_mhz(s * std::pow(frame.phi_p.A - frame.phi_pp.A, 2));
        coef_S += angular_from_mhz(s * std::pow(frame.phi_p.S - frame.phi_pp.S, 2));
        const double k_S = angular_from_mhz(4.0 * chi * pd2 * pS2);
        const double k_A = angular_from_mhz(4.0 * chi * pd2 * pA2);
        Matrix kerr = k_S * (ops.n_D * ops.n_S) + k_A * (ops.n_D * ops.n_A);
        spec.hamiltonian.push_back({std::move(kerr), nullptr, false});
    }
    if (coef_A != 0.0) spec.hamiltonian.push_back({coef_A * ops.n_A, nullptr, false});
    if (coef_S != 0.0) spec.hamiltonian.push_back({coef_S * ops.n_S, nullptr, false});
    if (coef_D != 0.0) spec.hamiltonian.push_back({coef_D * ops.n_D, nullptr, false});
}

} // namespace

SystemSpec build_emission_system(const DeviceParams& params, const HybridizedFrame& frame,
                                 const DriveConfig& drive, const SystemOptions& opts) {
    const Ops ops = make_ops(opts.with_capture);
    SystemSpec spec;
    spec.dims = ops.dims;
    spec.rotating_frame =
        "H0 = omega_D d'd + chi_d d'2d2 + omega_A nA + omega_S nS, co-rotating with the calibrated drives";
    add_emission_couplings(spec, ops, params, frame, drive, opts);
    add_waveguide_channels(spec, ops, params);
    if (opts.decoherence) add_decoherence_channels(spec, ops, params);
    return spec;
}

// ---------------------------------------------------------------------------
// Capture
// ---------------------------------------------------------------------------

namespace {

// Time-dependent capture rate g(t) = -f*(t)/sqrt(int_0^t |f|^2), sampled on the
// integration grid. |g|^2 is clamped at 10*Gamma_E (the virtual cavity's
// instantaneous decay rate cap) and the window opens one step after envelope
// onset.
struct CaptureRate {
    std::vector<double> times;
    std::vector<Complex> g;

    Complex at(double t) const {
        if (times.empty()) return 0.0;
        const double dt = times[1] - times[0];
        const double x = (t - times.front()) / dt;
        if (x <= 0) return g.front();
        const int i = static_cast<int>(x);
        if (i + 1 >= static_cast<int>(g.size())) return g.back();
        const double w = x - i;
        return (1.0 - w) * g[i] + w * g[i + 1];
    }
};

std::shared_ptr<CaptureRate> make_capture_rate(const Envelope& env, double t_end, double dt,
                                               double gamma_E_angular) {
    auto rate = std::make_shared<CaptureRate>();
    const int n = static_cast<int>(std::llround(t_end / dt)) + 1;
    rate->times.resize(n);
    rate->g.assign(n, Complex(0.0, 0.0));
    for (int i = 0; i < n; ++i) rate->times[i] = i * dt;
    if (env.empty || env.samples.empty()) return rate;

    // Interpolate the envelope onto the fine grid and renormalize there.
    std::vector<Complex> f(n, Complex(0.0, 0.0));
    const double env_dt = env.dt();
    for (int i = 0; i < n; ++i) {
        const double t = rate->times[i];
        const double x = (t - env.times.front()) / env_dt;
        if (x < 0) continue;
        const int j = static_cast<int>(x);
        if (j + 1 < static_cast<int>(env.samples.size())) {
            const double w = x - j;
            f[i] = (1.0 - w) * env.samples[j] + w * env.samples[j + 1];
        } else if (j < static_cast<int>(env.samples.size())) {
            f[i] = env.samples[j];
        }
    }
    double norm = 0.0;
    for (int i = 0; i + 1 < n; ++i) norm += 0.5 * (std::norm(f[i]) + std::norm(f[i + 1])) * dt;
    if (norm <= 0) return rate;
    const double scale = 1.0 / std::sqrt(norm);
    for (auto& v : f) v *= scale;

    double peak = 0.0;
    for (const auto& v : f) peak = std::max(peak, std::abs(v));
    int onset = 0;
    while (onset < n && std::abs(f[onset]) <= 1e-9 * peak) ++onset;

    const double gmax2 = 10.0 * gamma_E_angular;
    double cum = 0.0;
    for (int i = 1; i < n; ++i) {
        cum += 0.5 * (std::norm(f[i - 1]) + std::norm(f[i])) * dt;
        if (i <= onset + 1 || cum <= 0) continue;
        Complex g = -std::conj(f[i]) / std::sqrt(cum);
        if (std::norm(g) > gmax2) g *= std::sqrt(gmax2 / std::norm(g));
        rate->g[i] = g;
    }
    return rate;
}

} // namespace

SystemSpec build_capture_system(const DeviceParams& params, const HybridizedFrame& frame,
                                const DriveConfig& drive, const SystemOptions& opts,
                                const Envelope& env_A, const Envelope& env_S, double dt_us) {
    SystemOptions copts = opts;
    copts.with_capture = true;
    SystemSpec spec = build_emission_system(params, frame, drive, copts);
    const Ops ops = make_ops(true);

    const double gamma = angular_from_mhz(params.Gamma_E_MHz); // full emitter rate, angular
    const double q = std::sqrt(gamma / 2.0) / 2.0;
    auto gA = make_capture_rate(env_A, drive.duration_us, dt_us, gamma);
    auto gS = make_capture_rate(env_S, drive.duration_us, dt_us, gamma);

    // The plain waveguide channels are replaced by the cascaded total Lindblads.
    std::erase_if(spec.collapse, [](const CollapseOp& c) {
        return c.label == "waveguide-A" || c.label == "waveguide-S";
    });

    struct Channel {
        const Matrix* a;
        const Matrix* v;
        std::shared_ptr<CaptureRate> g;
        const char* label;
    };
    const Channel channels[2] = {{&ops.a_A, &ops.a_vA, gA, "cascade-A"},
                                 {&ops.a_S, &ops.a_vS, gS, "cascade-S"}};
    for (const auto& ch : channels) {
        // H += i q [g* a^dag v - g a v^dag]
        Matrix op = (*ch.a).adjoint() * (*ch.v);
        auto g = ch.g;
        spec.hamiltonian.push_back(
            {std::move(op),
             [g, q](double t) { return Complex(0, 1) * q * std::conj(g->at(t)); }, true});
        // total Lindblad L = sqrt(gamma/2) a + g*(t) v
        CollapseOp col;
        col.base = std::sqrt(gamma / 2.0) * (*ch.a);
        col.parts.push_back({*ch.v, [g](double t) { return std::conj(g->at(t)); }});
        col.label = ch.label;
        spec.collapse.push_back(std::move(col));
    }
    return spec;
}

CaptureResult cascaded_capture(const DeviceParams& params, const HybridizedFrame& frame,
                               const DriveConfig& drive, const SystemOptions& opts,
                               const DensityMatrix& rho0_emission, const Envelope& env_A,
                               const Envelope& env_S, double dt_us, bool strict) {
    SystemSpec spec = build_capture_system(params, frame, drive, opts, env_A, env_S, dt_us);
    // rho0 = rho_emission (x) |00><00| on the capture cavities
    Matrix vac = basis_op(4, 0, 0);
    DensityMatrix rho0(kCaptureDims, qlinalg::kron(rho0_emission.data, vac));

    EvolveOptions eopts;
    eopts.dt_us = dt_us;
    eopts.store_stride = std::max(1, static_cast<int>(std::llround(drive.duration_us / dt_us)));
    Trajectory traj = evolve(rho0, spec, drive.duration_us, eopts);
    const Matrix& final_state = traj.states.back();

    CaptureResult result;
    DensityMatrix full(kCaptureDims, final_state);
    result.state = qlinalg::partial_trace(full, {3, 4});
    const Ops ops = make_ops(true);
    result.captured_photons = ((ops.n_vA + ops.n_vS) * final_state).trace().real();
    result.emitted_photons = (env_A.empty ? 0.0 : env_A.photons_per_mode) +
                             (env_S.empty ? 0.0 : env_S.photons_per_mode);
    result.efficiency =
        result.emitted_photons > 1e-12 ? result.captured_photons / result.emitted_photons : 0.0;
    if (result.emitted_photons > 1e-9 &&
        std::abs(result.captured_photons - result.emitted_photons) >
            0.02 * result.emitted_photons) {
        result.mismatch_warning = true;
        if (strict)
            throw_numerical("envelope-mismatch",
                            "capture efficiency " + std::to_string(result.efficiency));
    }
    return result;
}

// ---------------------------------------------------------------------------
// Two-time correlations (quantum regression theorem)
// ---------------------------------------------------------------------------

namespace {

// One propagated family per initial operator X0 = rho(t1) * factor (or
// factor * rho(t1)); several recorders can read traces from the same family.
struct RegressionFamily {
    SpMat factor;
    bool left_multiplied = false;
    std::vector<std::pair<SpMat, Matrix*>> recorders; // (R, out): out(i,j) = Tr(R X(t2))
};

void regression_pass(const CompiledSystem& sys, const Trajectory& traj,
                     std::vector<RegressionFamily>& families, int substeps) {
    const int m = static_cast<int>(traj.states.size());
    if (m < 2) throw_invariant("stored-states-required", "trajectory must carry stored states");
    const double dtc = traj.state_times[1] - traj.state_times[0];
    const double h = dtc / substeps;

    for (int i = 0; i < m; ++i) {
        std::vector<Matrix> xs;
        xs.reserve(families.size());
        for (const auto& fam : families)
            xs.push_back(fam.left_multiplied ? Matrix(fam.factor * traj.states[i])
                                             : Matrix(traj.states[i] * fam.factor));
        for (int j = i; j < m; ++j) {
            if (j > i) {
                const double t = traj.state_times[j - 1];
                for (auto& x : xs)
                    for (int s = 0; s < substeps; ++s) sys.rk4_step(x, t + s * h, h);
            }
            for (size_t r = 0; r < families.size(); ++r)
                for (auto& [rec, out] : families[r].recorders)
                    (*out)(i, j) = sparse_trace_product(rec, xs[r]);
        }
    }
}

} // namespace

Matrix two_time_correlation(const SystemSpec& spec, const Trajectory& traj, const Matrix& L,
                            int substeps) {
    CompiledSystem sys(spec);
    const int m = static_cast<int>(traj.states.size());
    Matrix g2 = Matrix::Zero(m, m);
    // G2(t1,t2) = <L^dag(t1) L(t2)> = Tr[L V_{t2<-t1}(rho(t1) L^dag)] for t2 >= t1
    std::vector<RegressionFamily> families(1);
    families[0].factor = Matrix(L.adjoint()).sparseView();
    families[0].recorders = {{L.sparseView(), &g2}};
    regression_pass(sys, traj, families, substeps);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < i; ++j) g2(i, j) = std::conj(g2(j, i));
    return g2;
}

CorrelationSet two_time_correlations(const SystemSpec& spec, const Trajectory& traj,
                                     const Matrix& L_A, const Matrix& L_S, int substeps) {
    CompiledSystem sys(spec);
    const int m = static_cast<int>(traj.states.size());
    CorrelationSet set;
    set.times = traj.state_times;
    set.g2_A = Matrix::Zero(m, m);
    set.g2_S = Matrix::Zero(m, m);
    set.cross = Matrix::Zero(m, m);
    set.anomalous = Matrix::Zero(m, m);
    Matrix cross_sa = Matrix::Zero(m, m);   // <L_S^dag(t1) L_A(t2)>
    Matrix anom_lower = Matrix::Zero(m, m); // <L_A(t2') L_S(t1')> recorded as (t1'=i, t2'=j>=i)

    const SpMat sLA = L_A.sparseView();
    const SpMat sLS = L_S.sparseView();
    const SpMat sLAd = Matrix(L_A.adjoint()).sparseView();
    const SpMat sLSd = Matrix(L_S.adjoint()).sparseView();

    // Four propagated families per t1:
    //  X_A = rho L_A^dag -> records G2_A (vs L_A) and cross (vs L_S)
    //  X_S = rho L_S^dag -> records G2_S (vs L_S) and cross_sa (vs L_A)
    //  Y   = rho L_A     -> records anomalous upper (vs L_S)
    //  Y2  = L_S rho     -> records anomalous lower (vs L_A)
    Matrix cross_up = Matrix::Zero(m, m);
    std::vector<RegressionFamily> families(4);
    families[0].factor = sLAd;
    families[0].recorders = {{sLA, &set.g2_A}, {sLS, &cross_up}};
    families[1].factor = sLSd;
    families[1].recorders = {{sLS, &set.g2_S}, {sLA, &cross_sa}};
    families[2].factor = sLA;
    families[2].recorders = {{sLS, &set.anomalous}};
    families[3].factor = sLS;
    families[3].left_multiplied = true;
    families[3].recorders = {{sLA, &anom_lower}};
    regression_pass(sys, traj, families, substeps);

    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < i; ++j) {
            set.g2_A(i, j) = std::conj(set.g2_A(j, i));
            set.g2_S(i, j) = std::conj(set.g2_S(j, i));
        }
        for (int j = 0; j < m; ++j) {
            if (j >= i) set.cross(i, j) = cross_up(i, j);
            else set.cross(i, j) = std::conj(cross_sa(j, i));
            // anomalous lower triangle: <L_A(t1) L_S(t2)> with t1 > t2 equals
            // Tr[L_A V_{t1<-t2}(L_S rho(t2))], recorded in anom_lower(t2, t1)
            if (j < i) set.anomalous(i, j) = anom_lower(j, i);
        }
    }
    return set;
}

// ---------------------------------------------------------------------------
// Mode decomposition and envelope fitting
// ---------------------------------------------------------------------------

Envelope mode_decompose(const Matrix& g2, const std::vector<double>& times, double carrier_GHz) {
    if (times.size() < 2 || g2.rows() != static_cast<Eigen::Index>(times.size()))
        throw_invariant("dimension-mismatch", "g2 grid does not match time grid");
    const double dt = times[1] - times[0];
    const double scale = std::max(1.0, g2.cwiseAbs().maxCoeff());
    if (qlinalg::max_hermiticity_defect(g2) > 1e-8 * scale)
        throw_invariant("non-hermitian-g2", "two-time correlation must be Hermitian");

    Eigen::SelfAdjointEigenSolver<Matrix> es(0.5 * (g2 + g2.adjoint()) * dt);
    const RealVector ev = es.eigenvalues();
    const double lead = ev(ev.size() - 1);
    if (ev.minCoeff() < -1e-8 * std::max(lead, 1.0))
        throw_invariant("non-psd-g2", "two-time correlation must be positive semidefinite");

    Envelope env;
    env.times = times;
    env.carrier_GHz = carrier_GHz;
    env.samples.assign(times.size(), Complex(0.0, 0.0));
    if (lead < 1e-9) {
        env.empty = true;
        env.photons_per_mode = std::max(lead, 0.0);
        env.purity = 1.0;
        return env;
    }
    double total = 0.0;
    for (Eigen::Index i = 0; i < ev.size(); ++i) total += std::max(ev(i), 0.0);
    env.photons_per_mode = lead;
    env.purity = lead / total;
    env.multimode_warning = env.purity < 0.95;

    Vector v = es.eigenvectors().col(ev.size() - 1);
    Eigen::Index peak = 0;
    for (Eigen::Index i = 1; i < v.size(); ++i)
        if (std::abs(v(i)) > std::abs(v(peak))) peak = i;
    v *= std::conj(v(peak)) / std::abs(v(peak)); // peak sample real positive
    const double root_dt = std::sqrt(dt);
    for (Eigen::Index i = 0; i < v.size(); ++i) env.samples[i] = v(i) / root_dt;
    env.normalized = true;
    return env;
}

double fit_exponential_decay(const std::vector<double>& times,
                             const std::vector<double>& magnitude) {
    if (times.size() != magnitude.size() || times.size() < 8)
        throw_numerical("fit-failed", "too few samples");
    size_t peak = 0;
    for (size_t i = 1; i < magnitude.size(); ++i)
        if (magnitude[i] > magnitude[peak]) peak = i;
    const double floor = 0.02 * magnitude[peak];
    std::vector<double> ts, ys;
    for (size_t i = peak; i < magnitude.size(); ++i) {
        if (magnitude[i] >= floor && magnitude[i] > 0) {
            ts.push_back(times[i]);
            ys.push_back(std::log(magnitude[i]));
        }
    }
    if (ts.size() < 8) throw_numerical("fit-failed", "envelope has no usable decay window");

    const double n = static_cast<double>(ts.size());
    double st = 0, sy = 0, stt = 0, sty = 0;
    for (size_t i = 0; i < ts.size(); ++i) {
        st += ts[i];
        sy += ys[i];
        stt += ts[i] * ts[i];
        sty += ts[i] * ys[i];
    }
    const double denom = n * stt - st * st;
    if (std::abs(denom) < 1e-30) throw_numerical("fit-failed", "degenerate time grid");
    const double slope = (n * sty - st * sy) / denom;
    const double intercept = (sy - slope * st) / n;

    if (slope >= 0) throw_numerical("fit-failed", "envelope does not decay");
    const double efolds = -slope * (ts.back() - ts.front());
    if (efolds < 1.0) throw_numerical("fit-failed", "envelope is flat over the fit window");
    double ss = 0;
    for (size_t i = 0; i < ts.size(); ++i) {
        const double r = ys[i] - (intercept + slope * ts[i]);
        ss += r * r;
    }
    if (std::sqrt(ss / n) > 1.0)
        throw_numerical("fit-failed", "non-monotone tail beyond tolerance");
    return mhz_from_angular(-2.0 * slope);
}

// ---------------------------------------------------------------------------
// Protocol runs
// ---------------------------------------------------------------------------

DensityMatrix initial_emission_state(double theta, Protocol protocol, double phase) {
    if (theta < 0 || theta > kTwoPi / 2.0 + 1e-12)
        throw_invariant("invalid-theta", "theta must lie in [0, pi]");
    Vector d = Vector::Zero(3);
    if (protocol == Protocol::Encoded) {
        d(1) = std::cos(theta / 2.0);
        d(2) = std::exp(Complex(0, phase)) * std::sin(theta / 2.0);
    } else {
        d(0) = 0.5;
        d(1) = 1.0 / std::sqrt(2.0);
        d(2) = 0.5;
    }
    Vector full = Vector::Zero(12);
    for (int i = 0; i < 3; ++i) full(i * 4) = d(i); // modes in vacuum
    return qlinalg::pure_state(kEmissionDims, full);
}

DensityMatrix ideal_two_mode_state(double theta, double phase) {
    Vector psi = Vector::Zero(4);
    psi(2) = std::cos(theta / 2.0);                                // |10>
    psi(1) = std::exp(Complex(0, phase)) * std::sin(theta / 2.0); // |01>
    return qlinalg::pure_state({2, 2}, psi);
}

EmissionResult simulate_emission(double theta, Protocol protocol, const DeviceParams& params,
                                 const HybridizedFrame& frame, const DriveConfig& drive,
                                 const EmissionRunOptions& opts, double phase) {
    SystemOptions sys_opts = opts.system;
    sys_opts.with_capture = false;
    SystemSpec spec = build_emission_system(params, frame, drive, sys_opts);
    const Ops ops = make_ops(false);
    const double rate = angular_from_mhz(params.Gamma_E_MHz) / 2.0;
    const Matrix L_A = std::sqrt(rate) * ops.a_A;
    const Matrix L_S = std::sqrt(rate) * ops.a_S;

    DensityMatrix rho0 = initial_emission_state(theta, protocol, phase);

    EvolveOptions eopts;
    eopts.dt_us = opts.dt_us;
    const int nsteps = std::max(1, static_cast<int>(std::llround(drive.duration_us / opts.dt_us)));
    eopts.store_stride = std::max(1, nsteps / opts.g2_points);
    eopts.observables = {{"pop_g", embed_op(basis_op(3, 0, 0), 0, kEmissionDims)},
                         {"pop_e", ops.proj_e},
                         {"pop_f", ops.proj_f},
                         {"n_A", ops.n_A},
                         {"n_S", ops.n_S},
                         {"out_A", L_A},
                         {"out_S", L_S}};

    EmissionResult result;
    result.trajectory = evolve(rho0, spec, drive.duration_us, eopts);

    if (opts.with_anomalous) {
        result.correlations = two_time_correlations(spec, result.trajectory, L_A, L_S);
    } else {
        result.correlations.times = result.trajectory.state_times;
        result.correlations.g2_A = two_time_correlation(spec, result.trajectory, L_A);
        result.correlations.g2_S = two_time_correlation(spec, result.trajectory, L_S);
    }
    result.env_A = mode_decompose(result.correlations.g2_A, result.correlations.times,
                                  frame.omega_A_GHz);
    result.env_S = mode_decompose(result.correlations.g2_S, result.correlations.times,
                                  frame.omega_S_GHz);
    for (Envelope* env : {&result.env_A, &result.env_S}) {
        if (env->empty) continue;
        std::vector<double> mag(env->samples.size());
        for (size_t i = 0; i < mag.size(); ++i) mag[i] = std::abs(env->samples[i]);
        try {
            env->gamma_eff_MHz = fit_exponential_decay(env->times, mag);
        } catch (const FlagError&) {
            env->gamma_eff_MHz = 0.0;
        }
    }

    if (opts.with_capture) {
        result.capture = cascaded_capture(params, frame, drive, sys_opts, rho0, result.env_A,
                                          result.env_S, opts.dt_us, opts.strict_capture);
    }
    return result;
}

// ---------------------------------------------------------------------------
// Spectroscopy
// ---------------------------------------------------------------------------

void parallel_for(int count, int jobs, const std::function<void(int)>& body) {
    if (jobs <= 0) jobs = static_cast<int>(std::thread::hardware_concurrency());
    jobs = std::max(1, std::min(jobs, count));
    if (jobs == 1) {
        for (int i = 0; i < count; ++i) body(i);
        return;
    }
    std::atomic<int> next{0};
    std::vector<std::thread> pool;
    std::exception_ptr error;
    std::mutex error_mutex;
    for (int w = 0; w < jobs; ++w) {
        pool.emplace_back([&]() {
            for (;;) {
                const int i = next.fetch_add(1);
                if (i >= count) return;
                try {
                    body(i);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(error_mutex);
                    if (!error) error = std::current_exception();
                    return;
                }
            }
        });
    }
    for (auto& t : pool) t.join();
    if (error) std::rethrow_exception(error);
}

SpectroscopySurface spectroscopy_sweep(SpectroscopyDrive which, const std::vector<double>& freqs_GHz,
                                       const std::vector<double>& amps_MHz,
                                       const DeviceParams& params, const HybridizedFrame& frame,
                                       const SpectroscopyOptions& opts) {
    if (freqs_GHz.empty() || amps_MHz.empty())
        throw_invariant("empty-grid", "spectroscopy grids must be nonempty");
    SpectroscopySurface surface;
    surface.freqs_GHz = freqs_GHz;
    surface.amps_MHz = amps_MHz;
    surface.duration_us = opts.duration_us;
    surface.population.assign(freqs_GHz.size() * amps_MHz.size(), 0.0);

    const Ops ops = make_ops(false);
    const double kappa = device::convention_factor(opts.convention);
    const double chi = params.chi_d_MHz();

    const int total = static_cast<int>(freqs_GHz.size() * amps_MHz.size());
    parallel_for(total, opts.jobs, [&](int idx) {
        const int ia = idx / static_cast<int>(freqs_GHz.size());
        const int jf = idx % static_cast<int>(freqs_GHz.size());
        const double amp = amps_MHz[ia];
        const double f_MHz = freqs_GHz[jf] * 1e3;

        SystemSpec spec;
        spec.dims = kEmissionDims;
        double coef_A = 0.0, coef_S = 0.0, coef_D = 0.0;
        Vector init = Vector::Zero(12);
        Matrix probe;
        if (which == SpectroscopyDrive::Parametric) {
            const double denom = frame.phi_p.A - frame.phi_pp.A;
            const double ratio =
                std::abs(denom) > 1e-12 ? (frame.phi_p.S - frame.phi_pp.S) / denom : -1.0;
            const double eta = angular_from_mhz(kappa * amp);
            spec.hamiltonian.push_back({eta * (ops.sig_ge.adjoint() * ops.a_A), nullptr, true});
            spec.hamiltonian.push_back(
                {eta * ratio * (ops.sig_ge.adjoint() * ops.a_S), nullptr, true});
            coef_A = angular_from_mhz((frame.omega_A_GHz - params.omega_D_ge_GHz) * 1e3 - f_MHz);
            coef_S = angular_from_mhz((frame.omega_S_GHz - params.omega_D_ge_GHz) * 1e3 - f_MHz);
            if (opts.full_model && amp > 0) {
                const double coeff =
                    (frame.phi_p.d - frame.phi_pp.d) * (frame.phi_p.A - frame.phi_pp.A);
                if (std::abs(coeff) > 1e-12) {
                    const double slope =
                        device::coupler_frequency_derivative(params.phi_dc_rad, params.omega_C0_GHz) *
                        1e3;
                    const double eta_p = 2.0 * kappa * amp / (slope * coeff);
                    const double curv = device::coupler_frequency_second_derivative(
                                            params.phi_dc_rad, params.omega_C0_GHz) *
                                        1e3;
                    const double stark = 0.25 * curv * eta_p * eta_p;
                    coef_D += angular_from_mhz(stark * std::pow(frame.phi_p.d - frame.phi_pp.d, 2));
                    coef_A += angular_from_mhz(stark * std::pow(frame.phi_p.A - frame.phi_pp.A, 2));
                    coef_S += angular_from_mhz(stark * std::pow(frame.phi_p.S - frame.phi_pp.S, 2));
                }
            }
            init(1 * 4) = 1.0; // |e, 0, 0>
            probe = ops.proj_e;
        } else {
            const double ratio = std::abs(frame.phi.S) > 1e-12 ? frame.phi.A / frame.phi.S : 0.0;
            const double zeta = angular_from_mhz(kappa * amp);
            const Matrix two_photon_S = std::sqrt(2.0) * ops.sig_gf.adjoint() * ops.a_S;
            const Matrix two_photon_A = std::sqrt(2.0) * ops.sig_gf.adjoint() * ops.a_A;
            spec.hamiltonian.push_back({zeta * two_photon_S, nullptr, true});
            spec.hamiltonian.push_back({zeta * ratio * two_photon_A, nullptr, true});
            coef_A = angular_from_mhz((frame.omega_A_GHz - 2.0 * params.omega_D_ge_GHz) * 1e3 +
                                      f_MHz - 2.0 * chi);
            coef_S = angular_from_mhz((frame.omega_S_GHz - 2.0 * params.omega_D_ge_GHz) * 1e3 +
                                      f_MHz - 2.0 * chi);
            if (opts.full_model && amp > 0 && std::abs(frame.phi.S) > 1e-12) {
                const double eps = kappa * amp /
                                   (2.0 * std::abs(chi) * std::pow(std::abs(frame.phi.d), 3) *
                                    std::abs(frame.phi.S));
                const double omega_ac = 4.0 * eps * eps * chi * std::pow(frame.phi.d, 4);
                coef_D += angular_from_mhz(omega_ac);
            }
            init(2 * 4) = 1.0; // |f, 0, 0>
            probe = ops.proj_f;
        }
        if (coef_A != 0.0) spec.hamiltonian.push_back({coef_A * ops.n_A, nullptr, false});
        if (coef_S != 0.0) spec.hamiltonian.push_back({coef_S * ops.n_S, nullptr, false});
        if (coef_D != 0.0) spec.hamiltonian.push_back({coef_D * ops.n_D, nullptr, false});
        add_waveguide_channels(spec, ops, params);
        if (opts.decoherence) add_decoherence_channels(spec, ops, params);

        DensityMatrix rho0 = qlinalg::pure_state(kEmissionDims, init);
        EvolveOptions eopts;
        eopts.dt_us = opts.dt_us;
        eopts.observables = {{"p", probe}};
        Trajectory traj = evolve(rho0, spec, opts.duration_us, eopts);
        surface.population[idx] = traj.at("p").back().real();
    });
    return surface;
}

std::vector<double> find_dips(const std::vector<double>& freqs, const std::vector<double>& pop) {
    std::vector<double> dips;
    if (freqs.size() != pop.size() || freqs.size() < 3) return dips;
    double lo = pop[0], hi = pop[0];
    for (double p : pop) {
        lo = std::min(lo, p);
        hi = std::max(hi, p);
    }
    const double prominence = 0.02 * std::max(hi - lo, 1e-12);
    for (size_t i = 1; i + 1 < pop.size(); ++i) {
        if (pop[i] <= pop[i - 1] && pop[i] <= pop[i + 1] && (hi - pop[i]) > prominence) {
            // parabolic refinement through the three points
            const double denom = pop[i - 1] - 2 * pop[i] + pop[i + 1];
            double offset = 0.0;
            if (std::abs(denom) > 1e-15) offset = 0.5 * (pop[i - 1] - pop[i + 1]) / denom;
            offset = std::clamp(offset, -0.5, 0.5);
            dips.push_back(freqs[i] + offset * (freqs[1] - freqs[0]));
            // skip the immediate neighbor to avoid double counting plateaus
            ++i;
        }
    }
    return dips;
}

} // namespace freqbin::dynamics
