#include "freqbin/qlinalg.hpp"

#include <algorithm>
#include <numeric>

#include <Eigen/Eigenvalues>

namespace freqbin::qlinalg {

namespace {

int product(const std::vector<int>& dims) {
    int n = 1;
    for (int d : dims) n *= d;
    return n;
}

} // namespace

Operator::Operator(std::vector<int> d, Matrix m) : dims(std::move(d)), data(std::move(m)) {
    if (data.rows() != data.cols())
        throw_invariant("invalid-dimension", "operator matrix must be square");
    if (product(dims) != data.rows())
        throw_invariant("invalid-dimension", "operator size does not match product of dims");
}

Operator& Operator::mark_hermitian(double tol) {
    if (max_hermiticity_defect(data) >= tol)
        throw_invariant("invalid-dimension", "operator is not Hermitian within tolerance");
    hermitian = true;
    return *this;
}

DensityMatrix::DensityMatrix(std::vector<int> d, Matrix m, double tol)
    : dims(std::move(d)), data(std::move(m)), trace_tol(tol) {
    if (data.rows() != data.cols() || product(dims) != data.rows())
        throw_invariant("invalid-dimension", "density matrix size does not match dims");
}

void DensityMatrix::validate() const {
    if (max_hermiticity_defect(data) > 1e-12)
        throw_invariant("invalid-state", "density matrix not Hermitian within 1e-12");
    if (std::abs(data.trace().real() - 1.0) > trace_tol || std::abs(data.trace().imag()) > trace_tol)
        throw_invariant("invalid-state", "density matrix trace deviates from 1");
    Eigen::SelfAdjointEigenSolver<Matrix> es(data, Eigen::EigenvaluesOnly);
    if (es.eigenvalues().minCoeff() < -1e-10)
        throw_invariant("invalid-state", "density matrix has eigenvalue below -1e-10");
}

Operator identity(const std::vector<int>& dims) {
    Operator op(dims, Matrix::Identity(product(dims), product(dims)));
    op.hermitian = true;
    return op;
}

Operator annihilation(int dim) {
    if (dim < 2) throw_invariant("invalid-dimension", "annihilation requires dim >= 2");
    Matrix a = Matrix::Zero(dim, dim);
    for (int n = 1; n < dim; ++n) a(n - 1, n) = std::sqrt(static_cast<double>(n));
    return Operator({dim}, std::move(a));
}

Matrix basis_op(int n, int i, int j) {
    Matrix m = Matrix::Zero(n, n);
    m(i, j) = 1.0;
    return m;
}

Vector basis_ket(int n, int i) {
    Vector v = Vector::Zero(n);
    v(i) = 1.0;
    return v;
}

DensityMatrix pure_state(const std::vector<int>& dims, const Vector& psi) {
    Vector p = psi / psi.norm();
    return DensityMatrix(dims, p * p.adjoint());
}

Matrix pauli(int k) {
    Matrix m(2, 2);
    switch (k) {
        case 0: m << 1, 0, 0, 1; break;
        case 1: m << 0, 1, 1, 0; break;
        case 2: m << 0, Complex(0, -1), Complex(0, 1), 0; break;
        case 3: m << 1, 0, 0, -1; break;
        default: throw_invariant("invalid-dimension", "pauli index must be 0..3");
    }
    return m;
}

Matrix kron(const Matrix& a, const Matrix& b) {
    Matrix out(a.rows() * b.rows(), a.cols() * b.cols());
    for (Eigen::Index i = 0; i < a.rows(); ++i)
        for (Eigen::Index j = 0; j < a.cols(); ++j)
            out.block(i * b.rows(), j * b.cols(), b.rows(), b.cols()) = a(i, j) * b;
    return out;
}

Operator kron(const Operator& a, const Operator& b) {
    std::vector<int> dims = a.dims;
    dims.insert(dims.end(), b.dims.begin(), b.dims.end());
    return Operator(std::move(dims), kron(a.data, b.data));
}

Operator embed(const Matrix& local, int which, const std::vector<int>& dims) {
    if (which < 0 || which >= static_cast<int>(dims.size()))
        throw_invariant("invalid-subsystem", "embed position out of range");
    if (local.rows() != dims[which])
        throw_invariant("invalid-dimension", "embedded operator does not match subsystem dim");
    Matrix out = Matrix::Identity(1, 1);
    for (int k = 0; k < static_cast<int>(dims.size()); ++k) {
        if (k == which)
            out = kron(out, local);
        else
            out = kron(out, Matrix::Identity(dims[k], dims[k]).eval());
    }
    return Operator(dims, std::move(out));
}

DensityMatrix partial_trace(const DensityMatrix& rho, const std::vector<int>& keep) {
    const int ns = static_cast<int>(rho.dims.size());
    if (keep.empty()) throw_invariant("invalid-subsystem", "keep set must be nonempty");
    std::vector<bool> kept(ns, false);
    for (int k : keep) {
        if (k < 0 || k >= ns) throw_invariant("invalid-subsystem", "keep index out of range");
        if (kept[k]) throw_invariant("invalid-subsystem", "duplicate keep index");
        kept[k] = true;
    }

    // Strides of each subsystem in the flat index (row-major over dims)
    std::vector<int> stride(ns, 1);
    for (int k = ns - 2; k >= 0; --k) stride[k] = stride[k + 1] * rho.dims[k + 1];

    std::vector<int> keep_dims, trace_idx;
    for (int k : keep) keep_dims.push_back(rho.dims[k]);
    for (int k = 0; k < ns; ++k)
        if (!kept[k]) trace_idx.push_back(k);

    int nk = 1;
    for (int d : keep_dims) nk *= d;
    int nt = 1;
    for (int k : trace_idx) nt *= rho.dims[k];

    auto flat_index = [&](const std::vector<int>& keep_state, int traced_state) {
        int idx = 0;
        for (size_t q = 0; q < keep.size(); ++q) idx += keep_state[q] * stride[keep[q]];
        for (int q = static_cast<int>(trace_idx.size()) - 1; q >= 0; --q) {
            const int d = rho.dims[trace_idx[q]];
            idx += (traced_state % d) * stride[trace_idx[q]];
            traced_state /= d;
        }
        return idx;
    };

    auto unflatten_keep = [&](int flat) {
        std::vector<int> state(keep.size());
        for (int q = static_cast<int>(keep.size()) - 1; q >= 0; --q) {
            state[q] = flat % keep_dims[q];
            flat /= keep_dims[q];
        }
        return state;
    };

    Matrix out = Matrix::Zero(nk, nk);
    for (int i = 0; i < nk; ++i) {
        const auto si = unflatten_keep(i);
        for (int j = 0; j < nk; ++j) {
            const auto sj = unflatten_keep(j);
            Complex sum = 0.0;
            for (int t = 0; t < nt; ++t) sum += rho.data(flat_index(si, t), flat_index(sj, t));
            out(i, j) = sum;
        }
    }
    return DensityMatrix(keep_dims, std::move(out), rho.trace_tol);
}

Matrix hermitian_sqrt(const Matrix& h) {
    Eigen::SelfAdjointEigenSolver<Matrix> es(h);
    RealVector ev = es.eigenvalues();
    for (Eigen::Index i = 0; i < ev.size(); ++i) {
        if (ev(i) < -1e-10)
            throw_numerical("negative-eigenvalue", "matrix too indefinite for square root");
        ev(i) = std::sqrt(std::max(ev(i), 0.0));
    }
    return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().adjoint();
}

double state_fidelity(const DensityMatrix& ideal, const DensityMatrix& rho) {
    if (ideal.dims != rho.dims)
        throw_invariant("dimension-mismatch", "fidelity arguments live on different spaces");
    // Fast path: pure ideal state
    const double p = (ideal.data * ideal.data).trace().real();
    if (p > 1.0 - 1e-12) {
        double f = (ideal.data * rho.data).trace().real();
        return std::clamp(f, 0.0, 1.0);
    }
    const Matrix s = hermitian_sqrt(ideal.data);
    const Matrix inner = hermitian_sqrt(s * rho.data * s);
    const double f = inner.trace().real();
    return std::clamp(f * f, 0.0, 1.0);
}

RealVector simplex_project(const RealVector& v) {
    const Eigen::Index n = v.size();
    std::vector<double> u(v.data(), v.data() + n);
    std::sort(u.begin(), u.end(), std::greater<double>());
    double cssum = 0.0;
    double theta = 0.0;
    int rho_idx = 0;
    double running = 0.0;
    for (Eigen::Index j = 0; j < n; ++j) {
        running += u[j];
        const double t = (running - 1.0) / static_cast<double>(j + 1);
        if (u[j] - t > 0) {
            rho_idx = static_cast<int>(j);
            cssum = running;
        }
    }
    theta = (cssum - 1.0) / static_cast<double>(rho_idx + 1);
    RealVector out(n);
    for (Eigen::Index i = 0; i < n; ++i) out(i) = std::max(v(i) - theta, 0.0);
    return out;
}

DensityMatrix psd_trace1_project(const std::vector<int>& dims, const Matrix& h) {
    Matrix hs = 0.5 * (h + h.adjoint());
    Eigen::SelfAdjointEigenSolver<Matrix> es(hs);
    const RealVector ev = simplex_project(es.eigenvalues());
    Matrix out = es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().adjoint();
    out = 0.5 * (out + out.adjoint());
    return DensityMatrix(dims, std::move(out));
}

double trace_distance(const Matrix& a, const Matrix& b) {
    Eigen::SelfAdjointEigenSolver<Matrix> es(0.5 * (a - b) + 0.5 * (a - b).adjoint().eval());
    return 0.5 * es.eigenvalues().cwiseAbs().sum();
}

double purity(const DensityMatrix& rho) {
    return (rho.data * rho.data).trace().real();
}

double max_hermiticity_defect(const Matrix& m) {
    return (m - m.adjoint()).cwiseAbs().maxCoeff();
}

} // namespace freqbin::qlinalg
