#pragma once

#include <complex>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace kodsim {

using cxd = std::complex<double>;
using Mat = Eigen::MatrixXcd;
using Vec = Eigen::VectorXcd;

struct SingularMatrixError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

bool all_finite(const Mat& a);

// max-entry deviation from Hermiticity
double hermiticity_defect(const Mat& a);

// Matrix exponential.  Hermitian inputs go through an eigendecomposition,
// anything else through Pade scaling-and-squaring.  Throws on NaN/Inf.
Mat matrix_exp(const Mat& a);

// Exponential of a matrix known to be Hermitian (no defect probing; hot path).
Mat expm_hermitian(const Mat& h);

struct PolarResult {
    Mat w;      // unitary factor
    Mat sqrt_e; // positive factor, sqrt(L^dag L)
};

// L = W sqrt(E).  Throws SingularMatrixError when smin/smax < 1e-13.
PolarResult polar_decompose(const Mat& l);

// ---------------------------------------------------------------------------
// Superoperators, stored dense on the column-stacked vectorization:
// vec(L C R) = (R^T kron L) vec(C).
// ---------------------------------------------------------------------------
struct Superop {
    Eigen::Index dim = 0; // operator dimension d; matrix is d^2 x d^2
    Mat m;

    static Superop identity(Eigen::Index d);

    Mat apply(const Mat& a) const;

    Superop compose(const Superop& rhs) const; // this after rhs

    // norm of the trace functional defect, tr(S(A)) vs tr(A); for channels
    double trace_preservation_defect() const;

    // norm of the trace functional itself, tr(S(A)) vs 0; for generators
    double trace_functional_norm() const;
};

// C -> left * C * right
Superop odot(const Mat& left, const Mat& right);

// A (.) B^dag in the odot notation: C -> A C B^dag
inline Superop odot_dag(const Mat& a, const Mat& b) { return odot(a, b.adjoint()); }

// ad_X = X (.) 1 - 1 (.) X, i.e. C -> [X, C].  X must be Hermitian.
Superop adjoint_superop(const Mat& x);

// kappa * (sum_mu X_mu (.) X_mu - 1/2 {X^2 (.) 1 + 1 (.) X^2})
Superop lindbladian(const std::vector<Mat>& obs, double kappa);

// exp(T * L)
Superop channel_exp(const Superop& lind, double T);

// ---------------------------------------------------------------------------
// Representations
// ---------------------------------------------------------------------------
struct Representation {
    enum class Kind { SingleObservable, FockTruncated, Spin };
    Kind kind;
    double j = 0.0;               // Spin
    int n_cut = 0;                // FockTruncated
    std::vector<double> spectrum; // SingleObservable
    std::map<std::string, Mat> ops;
    // FockTruncated: max |[Q,P] - i 1| entry; lives at the (n_cut-1,n_cut-1)
    // corner and equals n_cut for the standard truncation.
    double corner_defect = 0.0;

    const Mat& op(const std::string& name) const {
        auto it = ops.find(name);
        if (it == ops.end()) throw std::invalid_argument("Representation: no operator " + name);
        return it->second;
    }
    Eigen::Index dim() const { return ops.begin()->second.rows(); }
};

// Jx, Jy, Jz, J2 in the standard (2j+1)-dimensional basis, m descending.
Representation build_spin_operators(double j);

// Q, P, Ho (= diag(n+1/2), exact), A on an n_cut-level truncated Fock space.
Representation build_fock_operators(int n_cut);

// Diagonal observable X = diag(spectrum).
Representation build_single_observable(const std::vector<double>& spectrum);

} // namespace kodsim
