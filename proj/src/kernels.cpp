#include "kodsim/kernels.hpp"

#include <cmath>

#include <Eigen/Eigenvalues>

namespace kodsim {

WienerIncrement sample_wiener(int n, double dt, Rng& rng) {
    if (dt <= 0.0) throw std::invalid_argument("sample_wiener: dt must be positive");
    if (n < 1) throw std::invalid_argument("sample_wiener: n must be >= 1");
    WienerIncrement w;
    w.dt = dt;
    w.values.resize(n);
    const double s = std::sqrt(dt);
    for (int i = 0; i < n; ++i) w.values[i] = s * rng.normal();
    return w;
}

static void check_obs(const std::vector<Mat>& obs, size_t n_dw) {
    if (obs.empty()) throw std::invalid_argument("observable list is empty");
    if (n_dw != 0 && obs.size() != n_dw)
        throw std::invalid_argument("observable count does not match increment count");
    const Eigen::Index d = obs.front().rows();
    for (const Mat& x : obs) {
        if (x.rows() != d || x.cols() != d)
            throw std::invalid_argument("observables have mixed dimensions");
        if (hermiticity_defect(x) > 1e-12 * (1.0 + x.cwiseAbs().maxCoeff()))
            throw std::invalid_argument("observables must be Hermitian");
    }
}

KrausIncrement kraus_increment(const std::vector<Mat>& obs, const WienerIncrement& dw,
                               double kappa) {
    check_obs(obs, dw.values.size());
    const Eigen::Index d = obs.front().rows();
    Mat delta = Mat::Zero(d, d);
    Mat x2 = Mat::Zero(d, d);
    const double rk = std::sqrt(kappa);
    for (size_t mu = 0; mu < obs.size(); ++mu) {
        delta += rk * dw.values[mu] * obs[mu];
        x2 += obs[mu] * obs[mu];
    }
    delta -= kappa * dw.dt * x2;
    return KrausIncrement{expm_hermitian(delta), delta, UnravelingKind::WienerGaussian};
}

KrausIncrement stochastic_unitary_increment(const std::vector<Mat>& obs,
                                            const WienerIncrement& dw, double kappa) {
    check_obs(obs, dw.values.size());
    const Eigen::Index d = obs.front().rows();
    Mat v = Mat::Zero(d, d);
    const double rk = std::sqrt(kappa);
    for (size_t mu = 0; mu < obs.size(); ++mu) v += rk * dw.values[mu] * obs[mu];
    Mat gen = cxd(0.0, -1.0) * v;
    return KrausIncrement{matrix_exp(gen), gen, UnravelingKind::StochasticUnitary};
}

std::vector<KrausIncrement> jump_kraus(const std::vector<Mat>& obs, double kappa, double dt) {
    check_obs(obs, 0);
    const Eigen::Index d = obs.front().rows();
    Mat x2 = Mat::Zero(d, d);
    for (const Mat& x : obs) x2 += x * x;
    std::vector<KrausIncrement> ks;
    Mat gen0 = -0.5 * kappa * dt * x2;
    ks.push_back({expm_hermitian(gen0), gen0, UnravelingKind::Jump});
    const double s = std::sqrt(kappa * dt);
    for (const Mat& x : obs)
        ks.push_back({s * x, Mat::Zero(d, d), UnravelingKind::Jump});
    return ks;
}

void gauss_hermite(int n, double var, std::vector<double>& nodes, std::vector<double>& weights) {
    // Golub-Welsch on the Jacobi matrix of the (physicists') Hermite rule,
    // rescaled to the N(0, var) probability measure.
    Eigen::MatrixXd jm = Eigen::MatrixXd::Zero(n, n);
    for (int k = 1; k < n; ++k) {
        const double b = std::sqrt(k / 2.0);
        jm(k - 1, k) = b;
        jm(k, k - 1) = b;
    }
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(jm);
    nodes.resize(n);
    weights.resize(n);
    const double s = std::sqrt(2.0 * var);
    for (int i = 0; i < n; ++i) {
        nodes[i] = s * es.eigenvalues()(i);
        const double v0 = es.eigenvectors()(0, i);
        weights[i] = v0 * v0; // already normalized to sum 1
    }
}

Superop incremental_channel(const std::vector<Mat>& obs, double kappa, double dt,
                            UnravelingKind kind, int quad_nodes) {
    check_obs(obs, 0);
    const Eigen::Index d = obs.front().rows();
    if (dt == 0.0) return Superop::identity(d);
    switch (kind) {
    case UnravelingKind::WienerGaussian:
        return channel_exp(lindbladian(obs, kappa), dt);
    case UnravelingKind::Jump: {
        auto ks = jump_kraus(obs, kappa, dt);
        Mat acc = Mat::Zero(d * d, d * d);
        for (const auto& k : ks) acc += odot_dag(k.matrix, k.matrix).m;
        return Superop{d, acc};
    }
    case UnravelingKind::StochasticUnitary: {
        std::vector<double> nodes, weights;
        gauss_hermite(quad_nodes, dt, nodes, weights);
        const int n = static_cast<int>(obs.size());
        Mat acc = Mat::Zero(d * d, d * d);
        std::vector<int> idx(n, 0);
        WienerIncrement dw;
        dw.dt = dt;
        dw.values.resize(n);
        while (true) {
            double w = 1.0;
            for (int mu = 0; mu < n; ++mu) {
                dw.values[mu] = nodes[idx[mu]];
                w *= weights[idx[mu]];
            }
            Mat u = stochastic_unitary_increment(obs, dw, kappa).matrix;
            acc += w * odot_dag(u, u).m;
            int mu = 0;
            while (mu < n && ++idx[mu] == quad_nodes) idx[mu++] = 0;
            if (mu == n) break;
        }
        return Superop{d, acc};
    }
    }
    throw std::logic_error("incremental_channel: unknown kind");
}

// ---------------------------------------------------------------------------
// Meter model
// ---------------------------------------------------------------------------

namespace {

// Harmonic-oscillator position wavefunctions for a ground state of width
// <q^2> = s^2; psi_n(q) = (2 pi s^2)^{-1/4} (2^n n!)^{-1/2} H_n(u) e^{-u^2/2},
// u = q/(s sqrt(2)).  Stable via the normalized three-term recurrence.
void oscillator_wavefunctions(const std::vector<double>& q, double s, int nmax,
                              std::vector<std::vector<double>>& psi) {
    psi.assign(nmax, std::vector<double>(q.size()));
    const double norm0 = std::pow(2.0 * M_PI * s * s, -0.25);
    for (size_t i = 0; i < q.size(); ++i) {
        const double u = q[i] / (s * std::sqrt(2.0));
        double h0 = norm0 * std::exp(-0.5 * u * u);
        psi[0][i] = h0;
        if (nmax > 1) psi[1][i] = std::sqrt(2.0) * u * h0;
        for (int n = 2; n < nmax; ++n)
            psi[n][i] = (std::sqrt(2.0 / n) * u) * psi[n - 1][i] -
                        std::sqrt((n - 1.0) / n) * psi[n - 2][i];
    }
}

} // namespace

MeterReport verify_meter_model(const Mat& x, MeterRegister reg, double kappa, double dt,
                               int meter_levels, int grid_points) {
    check_obs({x}, 0);
    if (meter_levels < 30) throw std::invalid_argument("verify_meter_model: need >= 30 meter levels");
    if (reg == MeterRegister::Position && grid_points < 2048)
        throw std::invalid_argument("verify_meter_model: need >= 2048 grid points");
    const Eigen::Index ds = x.rows();
    const int nm = meter_levels;
    const double sigma = 1.0; // meter width; observables are dimensionless

    // Work in the X eigenbasis; U = exp(-sqrt(kappa dt) X (x) (A - A^dag)) is
    // then block diagonal, one displaced-vacuum column per eigenvalue.
    Eigen::SelfAdjointEigenSolver<Mat> es(x);
    const Eigen::VectorXd lam = es.eigenvalues();
    const Mat vx = es.eigenvectors();

    Mat am = Mat::Zero(nm, nm);
    for (int n = 0; n + 1 < nm; ++n) am(n, n + 1) = std::sqrt(n + 1.0);
    Mat shift = am - Mat(am.adjoint()); // A - A^dag, anti-Hermitian

    // meter column for eigenvalue lambda: exp(-sqrt(kappa dt) lambda (A-A^dag)) |0>
    std::vector<Vec> col(ds);
    for (Eigen::Index k = 0; k < ds; ++k) {
        Mat g = -std::sqrt(kappa * dt) * lam(k) * shift;
        Vec v0 = Vec::Zero(nm);
        v0(0) = 1.0;
        col[k] = matrix_exp(g) * v0;
    }

    MeterReport rep;
    rep.meter_levels = nm;
    rep.grid_points = (reg == MeterRegister::Position || reg == MeterRegister::Momentum)
                          ? grid_points : 0;

    auto to_original_basis = [&](const Vec& diag_entries) {
        Mat k = Mat::Zero(ds, ds);
        for (Eigen::Index i = 0; i < ds; ++i) k(i, i) = diag_entries(i);
        return Mat(vx * k * vx.adjoint());
    };

    if (reg == MeterRegister::Position) {
        // outcomes q on a grid, dW = (q/sigma) sqrt(dt)
        std::vector<double> q(grid_points);
        const double qmax = 8.0 * sigma;
        for (int i = 0; i < grid_points; ++i)
            q[i] = -qmax + 2.0 * qmax * i / (grid_points - 1.0);
        std::vector<std::vector<double>> psi;
        oscillator_wavefunctions(q, sigma, nm, psi);
        double dev = 0.0;
        for (int i = 0; i < grid_points; ++i) {
            Vec kq(ds), ka(ds);
            for (Eigen::Index k = 0; k < ds; ++k) {
                cxd amp = 0.0;
                for (int n = 0; n < nm; ++n) amp += psi[n][i] * col[k](n);
                kq(k) = amp;
                const double dw = (q[i] / sigma) * std::sqrt(dt);
                // sqrt of the Gaussian meter density times L_X(dW); the
                // measure factors match since dW = (q/sigma) sqrt(dt).
                ka(k) = psi[0][i] *
                        std::exp(lam(k) * std::sqrt(kappa) * dw - lam(k) * lam(k) * kappa * dt);
            }
            dev = std::max(dev, (to_original_basis(kq) - to_original_basis(ka))
                                    .cwiseAbs().maxCoeff());
        }
        rep.max_deviation = dev;
    } else if (reg == MeterRegister::Momentum) {
        // momentum width s_p = hbar/(2 sigma) = 1/2; dW = (2 sigma p) sqrt(dt)
        const double sp = 0.5 / sigma;
        std::vector<double> p(grid_points);
        const double pmax = 8.0 * sp;
        for (int i = 0; i < grid_points; ++i)
            p[i] = -pmax + 2.0 * pmax * i / (grid_points - 1.0);
        std::vector<std::vector<double>> phi;
        oscillator_wavefunctions(p, sp, nm, phi); // real part; phases (-i)^n below
        double dev = 0.0;
        for (int i = 0; i < grid_points; ++i) {
            Vec kp(ds), ka(ds);
            for (Eigen::Index k = 0; k < ds; ++k) {
                cxd amp = 0.0;
                cxd phase = 1.0;
                for (int n = 0; n < nm; ++n) {
                    amp += phase * phi[n][i] * col[k](n);
                    phase *= cxd(0.0, -1.0);
                }
                kp(k) = amp;
                const double dw = 2.0 * sigma * p[i] * std::sqrt(dt);
                ka(k) = phi[0][i] * std::exp(cxd(0.0, -lam(k) * std::sqrt(kappa) * dw));
            }
            dev = std::max(dev, (to_original_basis(kp) - to_original_basis(ka))
                                    .cwiseAbs().maxCoeff());
        }
        rep.max_deviation = dev;
    } else {
        // Number register: K_N = <N|U|0>; compare K_0, K_1 against the jump pair.
        Vec k0(ds), k1(ds), k2(ds);
        for (Eigen::Index k = 0; k < ds; ++k) {
            k0(k) = col[k](0);
            k1(k) = col[k](1);
            k2(k) = col[k](2);
        }
        Vec a0(ds), a1(ds);
        for (Eigen::Index k = 0; k < ds; ++k) {
            a0(k) = std::exp(-0.5 * kappa * dt * lam(k) * lam(k));
            a1(k) = std::sqrt(kappa * dt) * lam(k);
        }
        const double dev0 = (to_original_basis(k0) - to_original_basis(a0)).cwiseAbs().maxCoeff();
        const double dev1 = (to_original_basis(k1) - to_original_basis(a1)).cwiseAbs().maxCoeff();
        rep.max_deviation = std::max(dev0, dev1);
        rep.two_quantum_norm = to_original_basis(k2).cwiseAbs().maxCoeff();
    }
    return rep;
}

} // namespace kodsim
