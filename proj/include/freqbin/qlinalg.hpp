// qlinalg.hpp — Complex dense linear algebra over small tensor-product Hilbert spaces:
// operators, density matrices, composition, reductions, and fidelity metrics.

#pragma once

#include <vector>

#include "freqbin/common.hpp"

namespace freqbin::qlinalg {

// ---------------------------------------------------------------------------
// Domain types
// ---------------------------------------------------------------------------

/// A square operator on an ordered tensor product of subsystems.
/// dims holds the subsystem dimensions in Kronecker order; data is
/// (prod dims) x (prod dims).
struct Operator {
    std::vector<int> dims;
    Matrix data;
    bool hermitian = false; // when set, max|M - M^dag| < 1e-12 was verified

    Operator() = default;
    Operator(std::vector<int> d, Matrix m);

    int size() const { return static_cast<int>(data.rows()); }
    Operator adjoint() const { return Operator(dims, data.adjoint()); }

    /// Verifies Hermiticity to tol and sets the flag.
    Operator& mark_hermitian(double tol = 1e-12);
};

/// A density matrix: Hermitian (1e-12), unit trace within trace_tol,
/// eigenvalues >= -1e-10.
struct DensityMatrix {
    std::vector<int> dims;
    Matrix data;
    double trace_tol = 1e-9;

    DensityMatrix() = default;
    DensityMatrix(std::vector<int> d, Matrix m, double tol = 1e-9);

    int size() const { return static_cast<int>(data.rows()); }
    void validate() const;
};

// ---------------------------------------------------------------------------
// Construction helpers
// ---------------------------------------------------------------------------

Operator identity(const std::vector<int>& dims);

/// Ladder operator a with a[n-1, n] = sqrt(n); dim >= 2.
Operator annihilation(int dim);

/// Single-subsystem operator embedded at position `which` of `dims`
/// via identities on the remaining factors.
Operator embed(const Matrix& local, int which, const std::vector<int>& dims);

/// |i><j| on an N-dimensional space.
Matrix basis_op(int n, int i, int j);

/// Basis ket |i> on an N-dimensional space.
Vector basis_ket(int n, int i);

DensityMatrix pure_state(const std::vector<int>& dims, const Vector& psi);

// The single-qubit Pauli basis {I, sx, sy, sz}.
Matrix pauli(int k);

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

Operator kron(const Operator& a, const Operator& b);
Matrix kron(const Matrix& a, const Matrix& b);

/// Reduced state over the kept subsystems (indices into rho.dims, ascending
/// output order follows `keep` as given). Trace is preserved.
DensityMatrix partial_trace(const DensityMatrix& rho, const std::vector<int>& keep);

/// F(rho_ideal, rho) = (Tr sqrt(sqrt(rho_ideal) rho sqrt(rho_ideal)))^2.
/// For a pure ideal state this reduces to <psi|rho|psi>.
double state_fidelity(const DensityMatrix& ideal, const DensityMatrix& rho);

/// Frobenius-nearest density matrix: eigenvalues of the Hermitian input are
/// projected onto the probability simplex, eigenvectors kept.
DensityMatrix psd_trace1_project(const std::vector<int>& dims, const Matrix& h);

/// 0.5 * ||a - b||_1 for Hermitian a, b.
double trace_distance(const Matrix& a, const Matrix& b);

double purity(const DensityMatrix& rho);

/// Hermitian matrix square root; eigenvalues below zero are clipped at -1e-10
/// (reconstruction noise) before the square root.
Matrix hermitian_sqrt(const Matrix& h);

/// Projection of a real vector onto the probability simplex {x >= 0, sum x = 1}.
RealVector simplex_project(const RealVector& v);

double max_hermiticity_defect(const Matrix& m);

} // namespace freqbin::qlinalg
