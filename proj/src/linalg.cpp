#include "kodsim/linalg.hpp"

#include <cmath>

#include <Eigen/Eigenvalues>
#include <Eigen/SVD>
#include <unsupported/Eigen/KroneckerProduct>
#include <unsupported/Eigen/MatrixFunctions>

namespace kodsim {

bool all_finite(const Mat& a) {
    for (Eigen::Index c = 0; c < a.cols(); ++c)
        for (Eigen::Index r = 0; r < a.rows(); ++r) {
            const cxd v = a(r, c);
            if (!std::isfinite(v.real()) || !std::isfinite(v.imag())) return false;
        }
    return true;
}

double hermiticity_defect(const Mat& a) {
    return (a - a.adjoint()).cwiseAbs().maxCoeff();
}

static Mat expm_herm2(const Mat& h) {
    // closed form for 2x2 Hermitian: e^h = e^mu (cosh(s) 1 + sinh(s)/s (h - mu))
    const double a = h(0, 0).real();
    const double d = h(1, 1).real();
    const cxd b = h(0, 1);
    const double mu = 0.5 * (a + d);
    const double s = std::sqrt(0.25 * (a - d) * (a - d) + std::norm(b));
    double ch, shs; // cosh(s), sinh(s)/s
    if (s < 1e-12) {
        ch = 1.0 + 0.5 * s * s;
        shs = 1.0 + s * s / 6.0;
    } else {
        ch = std::cosh(s);
        shs = std::sinh(s) / s;
    }
    Mat out(2, 2);
    const double em = std::exp(mu);
    out(0, 0) = em * (ch + shs * (a - mu));
    out(1, 1) = em * (ch + shs * (d - mu));
    out(0, 1) = em * shs * b;
    out(1, 0) = em * shs * std::conj(b);
    return out;
}

Mat expm_hermitian(const Mat& h) {
    if (h.rows() == 2) return expm_herm2(h);
    Eigen::SelfAdjointEigenSolver<Mat> es(h);
    const Eigen::VectorXd ev = es.eigenvalues();
    Eigen::VectorXd ex(ev.size());
    for (Eigen::Index i = 0; i < ev.size(); ++i) ex(i) = std::exp(ev(i));
    return es.eigenvectors() * ex.asDiagonal() * es.eigenvectors().adjoint();
}

Mat matrix_exp(const Mat& a) {
    if (!all_finite(a)) throw std::invalid_argument("matrix_exp: non-finite entries");
    if (hermiticity_defect(a) < 1e-13 * (1.0 + a.cwiseAbs().maxCoeff())) return expm_hermitian(a);
    // anti-Hermitian: i*a is Hermitian, exp(a) = exp(-i*(i a)) via unitary eig
    Mat ia = cxd(0.0, 1.0) * a;
    if (hermiticity_defect(ia) < 1e-13 * (1.0 + a.cwiseAbs().maxCoeff())) {
        Eigen::SelfAdjointEigenSolver<Mat> es(ia);
        const Eigen::VectorXd ev = es.eigenvalues();
        Vec ex(ev.size());
        for (Eigen::Index i = 0; i < ev.size(); ++i)
            ex(i) = std::exp(cxd(0.0, -ev(i)));
        return es.eigenvectors() * ex.asDiagonal() * es.eigenvectors().adjoint();
    }
    return a.exp();
}

PolarResult polar_decompose(const Mat& l) {
    Eigen::JacobiSVD<Mat> svd(l, Eigen::ComputeFullU | Eigen::ComputeFullV);
    const Eigen::VectorXd sv = svd.singularValues();
    if (sv(sv.size() - 1) <= 1e-13 * sv(0))
        throw SingularMatrixError("polar_decompose: singular input");
    PolarResult out;
    out.w = svd.matrixU() * svd.matrixV().adjoint();
    out.sqrt_e = svd.matrixV() * sv.cast<cxd>().asDiagonal() * svd.matrixV().adjoint();
    return out;
}

Superop Superop::identity(Eigen::Index d) {
    Superop s;
    s.dim = d;
    s.m = Mat::Identity(d * d, d * d);
    return s;
}

Mat Superop::apply(const Mat& a) const {
    Eigen::Map<const Vec> va(a.data(), dim * dim);
    Vec vb = m * va;
    return Eigen::Map<const Mat>(vb.data(), dim, dim);
}

Superop Superop::compose(const Superop& rhs) const {
    if (dim != rhs.dim) throw std::invalid_argument("Superop::compose: dimension mismatch");
    return Superop{dim, m * rhs.m};
}

double Superop::trace_preservation_defect() const {
    Mat id = Mat::Identity(dim, dim);
    Eigen::Map<const Vec> vid(id.data(), dim * dim);
    Vec row = m.adjoint() * vid; // (1)S as a vector
    return (row - vid).cwiseAbs().maxCoeff();
}

double Superop::trace_functional_norm() const {
    Mat id = Mat::Identity(dim, dim);
    Eigen::Map<const Vec> vid(id.data(), dim * dim);
    return (m.adjoint() * vid).cwiseAbs().maxCoeff();
}

Superop odot(const Mat& left, const Mat& right) {
    if (left.rows() != right.rows() || left.rows() != left.cols() || right.rows() != right.cols())
        throw std::invalid_argument("odot: operands must be square and same dim");
    Superop s;
    s.dim = left.rows();
    s.m = Eigen::kroneckerProduct(right.transpose(), left);
    return s;
}

Superop adjoint_superop(const Mat& x) {
    if (hermiticity_defect(x) > 1e-12 * (1.0 + x.cwiseAbs().maxCoeff()))
        throw std::invalid_argument("adjoint_superop: X must be Hermitian");
    const Eigen::Index d = x.rows();
    Mat id = Mat::Identity(d, d);
    Superop s;
    s.dim = d;
    s.m = odot(x, id).m - odot(id, x).m;
    return s;
}

Superop lindbladian(const std::vector<Mat>& obs, double kappa) {
    if (obs.empty()) throw std::invalid_argument("lindbladian: empty observable list");
    const Eigen::Index d = obs.front().rows();
    for (const Mat& x : obs) {
        if (x.rows() != d || x.cols() != d)
            throw std::invalid_argument("lindbladian: mixed dimensions");
        if (hermiticity_defect(x) > 1e-12 * (1.0 + x.cwiseAbs().maxCoeff()))
            throw std::invalid_argument("lindbladian: observables must be Hermitian");
    }
    Mat id = Mat::Identity(d, d);
    Mat x2 = Mat::Zero(d, d);
    Mat acc = Mat::Zero(d * d, d * d);
    for (const Mat& x : obs) {
        x2 += x * x;
        acc += odot(x, x).m;
    }
    acc -= 0.5 * (odot(x2, id).m + odot(id, x2).m);
    return Superop{d, kappa * acc};
}

Superop channel_exp(const Superop& lind, double T) {
    if (T < 0.0) throw std::invalid_argument("channel_exp: negative time");
    return Superop{lind.dim, matrix_exp(T * lind.m)};
}

Representation build_spin_operators(double j) {
    const double twoj = 2.0 * j;
    if (j < 0.0 || std::abs(twoj - std::round(twoj)) > 1e-12)
        throw std::invalid_argument("build_spin_operators: j must be a nonnegative half-integer");
    const int d = static_cast<int>(std::lround(twoj)) + 1;
    Mat jz = Mat::Zero(d, d), jp = Mat::Zero(d, d);
    for (int k = 0; k < d; ++k) {
        const double m = j - k;
        jz(k, k) = m;
        if (k > 0) jp(k - 1, k) = std::sqrt(j * (j + 1.0) - m * (m + 1.0));
    }
    Mat jm = jp.adjoint();
    Representation rep;
    rep.kind = Representation::Kind::Spin;
    rep.j = j;
    rep.ops["Jx"] = 0.5 * (jp + jm);
    rep.ops["Jy"] = cxd(0.0, -0.5) * (jp - jm);
    rep.ops["Jz"] = jz;
    rep.ops["J2"] = j * (j + 1.0) * Mat::Identity(d, d);
    return rep;
}

Representation build_fock_operators(int n_cut) {
    if (n_cut < 2) throw std::invalid_argument("build_fock_operators: n_cut must be >= 2");
    Mat a = Mat::Zero(n_cut, n_cut);
    for (int n = 0; n + 1 < n_cut; ++n) a(n, n + 1) = std::sqrt(n + 1.0);
    const double rt2 = std::sqrt(2.0);
    Mat q = (a + Mat(a.adjoint())) / rt2;
    Mat p = cxd(0.0, -1.0) * (a - Mat(a.adjoint())) / rt2;
    Mat ho = Mat::Zero(n_cut, n_cut);
    for (int n = 0; n < n_cut; ++n) ho(n, n) = n + 0.5;
    Representation rep;
    rep.kind = Representation::Kind::FockTruncated;
    rep.n_cut = n_cut;
    rep.ops["A"] = a;
    rep.ops["Q"] = q;
    rep.ops["P"] = p;
    rep.ops["Ho"] = ho;
    Mat comm = q * p - p * q - cxd(0.0, 1.0) * Mat::Identity(n_cut, n_cut);
    rep.corner_defect = comm.cwiseAbs().maxCoeff();
    return rep;
}

Representation build_single_observable(const std::vector<double>& spectrum) {
    if (spectrum.empty()) throw std::invalid_argument("build_single_observable: empty spectrum");
    const int d = static_cast<int>(spectrum.size());
    Mat x = Mat::Zero(d, d);
    for (int i = 0; i < d; ++i) x(i, i) = spectrum[i];
    Representation rep;
    rep.kind = Representation::Kind::SingleObservable;
    rep.spectrum = spectrum;
    rep.ops["X"] = x;
    return rep;
}

} // namespace kodsim
