#include "kodsim/geometry.hpp"

#include <cmath>

#include <Eigen/Eigenvalues>
#include <Eigen/SVD>

#include "kodsim/stats.hpp"

namespace kodsim {

namespace {
constexpr double kPi = 3.14159265358979323846;

double wrap_angle(double x) {
    x = std::fmod(x + kPi, 2.0 * kPi);
    if (x <= 0.0) x += 2.0 * kPi;
    return x - kPi;
}
} // namespace

// ---------------------------------------------------------------------------
// Case 1
// ---------------------------------------------------------------------------
double AnalyticKodSingle::pdf(double a) const {
    return std::exp(-a * a / (2.0 * var_a)) / std::sqrt(2.0 * kPi * var_a);
}

double AnalyticKodSingle::cdf(double a) const {
    return stats::normal_cdf(a / std::sqrt(var_a));
}

AnalyticKodSingle analytic_kod_single(double kappa, double T) {
    if (T <= 0.0) throw std::invalid_argument("analytic_kod_single: T must be positive");
    return AnalyticKodSingle{kappa * T, 0.0, kappa * T};
}

CartanSingle extract_single(const TrajectoryRecord& rec, const std::vector<double>& spectrum) {
    const int d = static_cast<int>(spectrum.size());
    if (rec.kraus.rows() != d)
        throw std::invalid_argument("extract_single: spectrum does not match record");
    Eigen::MatrixXd design(d, 2);
    Eigen::VectorXd rhs(d);
    for (int i = 0; i < d; ++i) {
        design(i, 0) = -spectrum[i] * spectrum[i];
        design(i, 1) = spectrum[i];
        rhs(i) = std::log(rec.kraus(i, i).real()) + rec.log_norm;
    }
    Eigen::Vector2d sol = design.jacobiSvd(Eigen::ComputeThinU | Eigen::ComputeThinV).solve(rhs);
    return CartanSingle{sol(0), sol(1)};
}

// ---------------------------------------------------------------------------
// SPQM coordinate SDE
// ---------------------------------------------------------------------------
SpqmPath spqm_coordinate_sde(double kappa, double T, double dt, Rng& rng,
                             const std::vector<std::array<double, 2>>* noise, bool tilted,
                             bool store_path) {
    const int K = static_cast<int>(std::lround(T / dt));
    if (K < 1 || std::abs(T / dt - K) > 1e-9 * std::max(1.0, T / dt))
        throw std::invalid_argument("spqm_coordinate_sde: T must be a multiple of dt");
    const double rk = std::sqrt(kappa);
    const double sdt = std::sqrt(dt);

    SpqmPath path;
    auto push = [&](double t, double r, cxd beta, cxd alpha, double ell, double phi) {
        path.t.push_back(t);
        path.r.push_back(r);
        path.beta.push_back(beta);
        path.alpha.push_back(alpha);
        path.ell.push_back(ell);
        path.phi.push_back(phi);
    };
    push(0.0, 0.0, 0.0, 0.0, 0.0, 0.0);

    // Analytic first step at the identity singularity, r_dt = 2 kappa dt.
    // The plain SDE takes the exact one-increment Cartan coordinates
    // (beta = alpha, so beta - alpha starts at zero); the tilted sampler
    // instead regularizes the center's flat direction by dropping the first
    // increment, whose e^{-2 ell} weight factor is quadratic in the noise
    // and cannot be absorbed into a drift.
    double r = 2.0 * kappa * dt;
    cxd z1 = 0.0, z2 = 0.0; // z1 = beta sinh r, z2 = beta cosh r - alpha
    cxd beta = 0.0, alpha = 0.0;
    double ell = 0.0, phi = 0.0;
    {
        double dwq0, dwp0;
        if (noise) {
            dwq0 = (*noise)[0][0];
            dwp0 = (*noise)[0][1];
        } else {
            dwq0 = sdt * rng.normal();
            dwp0 = sdt * rng.normal();
        }
        if (!tilted) {
            const cxd dw0 = cxd(dwq0, dwp0) / std::sqrt(2.0);
            const cxd gamma = dw0 / (2.0 * rk * dt);
            beta = alpha = gamma;
            z1 = gamma * std::sinh(r);
            z2 = gamma * (std::cosh(r) - 1.0);
            ell = -std::norm(dw0) / (2.0 * dt);
        }
    }
    if (store_path) push(dt, r, beta, alpha, ell, phi);

    for (int k = 1; k < K; ++k) {
        const double t = k * dt;
        double dwq, dwp;
        if (noise) {
            dwq = (*noise)[k][0];
            dwp = (*noise)[k][1];
        } else {
            dwq = sdt * rng.normal();
            dwp = sdt * rng.normal();
        }
        if (tilted) {
            // Girsanov absorption of the e^{-2 ell} weight: the martingale
            // part of -2 dell is 2 sqrt(2 kappa) (Re beta dWq + Im beta dWp)
            // and its compensator matches the -4 |beta|^2 kappa dt drift.
            dwq += 2.0 * std::sqrt(2.0 * kappa) * beta.real() * dt;
            dwp += 2.0 * std::sqrt(2.0 * kappa) * beta.imag() * dt;
        }
        const cxd dw = cxd(dwq, dwp) / std::sqrt(2.0);

        const double r_mid = 2.0 * kappa * (t + 0.5 * dt);
        const double r_new = 2.0 * kappa * (t + dt);

        // ell and phi use start-of-step coefficients (Ito); the coth drift
        // integrates exactly, which matters near the r = 0 singularity
        const double csch = 1.0 / std::sinh(r);
        const double coth = std::cosh(r) * csch;
        const double coth_int = 0.5 * std::log(std::sinh(2.0 * kappa * (t + dt)) / std::sinh(r));
        const double dell = -(coth_int - 2.0 * std::norm(beta) * kappa * dt +
                              2.0 * rk * (std::conj(beta) * dw).real());
        const cxd rhs_phi = csch * (alpha * std::conj(beta) - std::conj(alpha) * beta) * kappa * dt +
                            0.5 * (beta * coth - alpha * csch) * rk * std::conj(dw) -
                            0.5 * (std::conj(beta) * coth - std::conj(alpha) * csch) * rk * dw;
        const double dphi = rhs_phi.imag(); // i dphi = rhs

        z1 += std::cosh(r_mid) * rk * dw;
        z2 += std::sinh(r_mid) * rk * dw;
        r = r_new;
        beta = z1 / std::sinh(r);
        alpha = beta * std::cosh(r) - z2;
        ell += dell;
        phi = wrap_angle(phi + dphi);
        if (store_path || k == K - 1) push(t + dt, r, beta, alpha, ell, phi);
    }
    return path;
}

std::vector<SpqmReducedSample> spqm_reduced_ensemble(double kappa, double T, double dt,
                                                     int n_traj, uint64_t master_seed,
                                                     bool tilted) {
    std::vector<SpqmReducedSample> out(n_traj);
    for (int i = 0; i < n_traj; ++i) {
        Rng rng = Rng::stream(master_seed, static_cast<uint64_t>(i));
        SpqmPath p = spqm_coordinate_sde(kappa, T, dt, rng, nullptr, tilted, false);
        SpqmReducedSample s;
        s.u = p.beta.back() - p.alpha.back();
        s.ell = p.ell.back();
        s.weight = tilted ? 1.0 : std::exp(-2.0 * s.ell);
        out[i] = s;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Displacements and IWH extraction
// ---------------------------------------------------------------------------
Mat displacement(const Representation& fock, cxd gamma) {
    const Mat& a = fock.op("A");
    Mat gen = gamma * a.adjoint() - std::conj(gamma) * a;
    return matrix_exp(gen);
}

Mat rebuild_iwh(const CartanIWH& c, const Representation& fock) {
    const Mat& ho = fock.op("Ho");
    const Eigen::Index d = ho.rows();
    Mat expho = Mat::Zero(d, d);
    for (Eigen::Index n = 0; n < d; ++n) expho(n, n) = std::exp(-c.r * ho(n, n).real());
    const cxd scale = std::exp(cxd(-c.ell, c.phi));
    return scale * displacement(fock, c.beta) * expho * displacement(fock, c.alpha).adjoint();
}

CartanIWH extract_iwh(const Mat& l, const Representation& fock) {
    if (fock.kind != Representation::Kind::FockTruncated)
        throw std::invalid_argument("extract_iwh: need a FockTruncated representation");
    const Eigen::Index d = l.rows();
    Mat e = l.adjoint() * l;
    const double tre = e.trace().real();
    const double top_weight = (e(d - 1, d - 1).real() + e(d - 2, d - 2).real()) / tre;
    if (top_weight > 1e-6)
        throw std::runtime_error("extract_iwh: support touches the truncation corner, "
                                 "representation too small");

    CartanIWH c;
    // past phase point from the first moment of the normalized POVM element
    const Mat& a = fock.op("A");
    c.alpha = (a * e).trace() / tre;

    // undisplace and read the geometric eigenvalue ladder e^{-2 ell - 2 r (n+1/2)}
    Mat dal = displacement(fock, c.alpha);
    Mat e0 = dal.adjoint() * e * dal;
    Eigen::SelfAdjointEigenSolver<Mat> es(e0);
    Eigen::VectorXd ev = es.eigenvalues().reverse(); // descending
    int kmax = 1;
    while (kmax + 1 < static_cast<int>(ev.size()) && ev(kmax + 1) > ev(0) * 1e-10 &&
           kmax + 1 < 6)
        ++kmax;
    Eigen::MatrixXd design(kmax + 1, 2);
    Eigen::VectorXd rhs(kmax + 1);
    for (int k = 0; k <= kmax; ++k) {
        design(k, 0) = 1.0;
        design(k, 1) = static_cast<double>(k);
        rhs(k) = std::log(std::max(ev(k), 1e-300));
    }
    Eigen::Vector2d fit = design.jacobiSvd(Eigen::ComputeThinU | Eigen::ComputeThinV).solve(rhs);
    c.r = -0.5 * fit(1);
    c.ell = -0.5 * (fit(0) + c.r);

    // unitary part via the stable polar route: W_cartan = W_polar D_alpha.
    // The polar factor comes straight from the SVD; deep truncation levels
    // make L numerically singular without affecting the factor's action on
    // the support.
    Mat w;
    {
        Eigen::JacobiSVD<Mat> svd(l, Eigen::ComputeFullU | Eigen::ComputeFullV);
        w = svd.matrixU() * svd.matrixV().adjoint();
    }
    w = w * dal;
    Vec vac = Vec::Zero(d);
    vac(0) = 1.0;
    c.beta = vac.dot(w.adjoint() * a * w * vac); // <0| W^dag A W |0> = beta
    Mat dbeta = displacement(fock, c.beta);
    c.phi = std::arg(vac.dot(dbeta.adjoint() * w * vac));

    Mat rebuilt = rebuild_iwh(c, fock);
    c.residual = (rebuilt - l).norm() / l.norm();
    if (c.residual > 1e-6)
        throw std::runtime_error("extract_iwh: rebuild residual " + std::to_string(c.residual) +
                                 " above tolerance");
    return c;
}

// ---------------------------------------------------------------------------
// Reduced SPQM PDE residual
// ---------------------------------------------------------------------------
namespace {

// analytic reduced distribution as a function of independent coordinates
// (t; r; alpha_1, alpha_2, beta_1, beta_2), the delta(r - 2 kappa t) factor
// stripped: g = (2/sinh r) exp(-|beta-alpha|^2 / Sigma_t) / Sigma_t with
// |beta-alpha|^2 = ((b1-a1)^2 + (b2-a2)^2)/2.
double reduced_g(double kappa, double t, double r, double a1, double a2, double b1, double b2) {
    const double sig = spqm_sigma(kappa * t);
    const double u2 = 0.5 * ((b1 - a1) * (b1 - a1) + (b2 - a2) * (b2 - a2));
    return (2.0 / std::sinh(r)) * std::exp(-u2 / sig) / sig;
}

double pde_residual_at(const std::function<double(double, double, double, double, double, double)>& g,
                       double kappa, double t, double r, double a1, double a2, double b1,
                       double b2, double h) {
    auto gc = [&](double tt, double rr, double x1, double x2, double y1, double y2) {
        return g(tt, rr, x1, x2, y1, y2);
    };
    const double dt_g = (gc(t + h, r, a1, a2, b1, b2) - gc(t - h, r, a1, a2, b1, b2)) / (2 * h);
    const double dr_g = (gc(t, r + h, a1, a2, b1, b2) - gc(t, r - h, a1, a2, b1, b2)) / (2 * h);
    const double coth = 1.0 / std::tanh(r);
    const double csch = 1.0 / std::sinh(r);
    const double ch = std::cosh(r);

    // nabla*nabla = 1/2 (nabla_1^2 + nabla_2^2) with
    // nabla_j = csch(r) (d/d alpha_j + cosh(r) d/d beta_j)
    auto second = [&](int j) {
        double daa, dbb, dab;
        if (j == 1) {
            daa = (gc(t, r, a1 + h, a2, b1, b2) - 2 * gc(t, r, a1, a2, b1, b2) +
                   gc(t, r, a1 - h, a2, b1, b2)) / (h * h);
            dbb = (gc(t, r, a1, a2, b1 + h, b2) - 2 * gc(t, r, a1, a2, b1, b2) +
                   gc(t, r, a1, a2, b1 - h, b2)) / (h * h);
            dab = (gc(t, r, a1 + h, a2, b1 + h, b2) - gc(t, r, a1 + h, a2, b1 - h, b2) -
                   gc(t, r, a1 - h, a2, b1 + h, b2) + gc(t, r, a1 - h, a2, b1 - h, b2)) /
                  (4 * h * h);
        } else {
            daa = (gc(t, r, a1, a2 + h, b1, b2) - 2 * gc(t, r, a1, a2, b1, b2) +
                   gc(t, r, a1, a2 - h, b1, b2)) / (h * h);
            dbb = (gc(t, r, a1, a2, b1, b2 + h) - 2 * gc(t, r, a1, a2, b1, b2) +
                   gc(t, r, a1, a2, b1, b2 - h)) / (h * h);
            dab = (gc(t, r, a1, a2 + h, b1, b2 + h) - gc(t, r, a1, a2 + h, b1, b2 - h) -
                   gc(t, r, a1, a2 - h, b1, b2 + h) + gc(t, r, a1, a2 - h, b1, b2 - h)) /
                  (4 * h * h);
        }
        return csch * csch * (daa + 2.0 * ch * dab + ch * ch * dbb);
    };
    const double lap = 0.5 * (second(1) + second(2));
    return dt_g / kappa + 2.0 * dr_g + 2.0 * coth * gc(t, r, a1, a2, b1, b2) - lap;
}

} // namespace

double reduced_spqm_pde_residual(double kappa, double T, double h) {
    auto g = [kappa](double t, double r, double a1, double a2, double b1, double b2) {
        return reduced_g(kappa, t, r, a1, a2, b1, b2);
    };
    double worst = 0.0;
    // the delta-coefficient identity holds on the support line r = 2 kappa t;
    // sample along it around the requested time
    for (double r : {1.0, 1.5, 2.0 * kappa * T, 2.0 * kappa * T + 0.5}) {
        if (r < 0.5) continue;
        const double t = r / (2.0 * kappa);
        const double sig = spqm_sigma(kappa * t);
        for (double ub : {0.0, 0.5, 1.0}) {
            const double v = ub * std::sqrt(2.0 * sig); // per-component offset
            for (auto& pt : std::vector<std::array<double, 4>>{
                     {0.0, 0.0, v, 0.0}, {0.1, -0.2, v, 0.3}, {-0.3, 0.1, 0.0, v}}) {
                worst = std::max(worst, std::abs(pde_residual_at(g, kappa, t, r, pt[0], pt[1],
                                                                 pt[2], pt[3], h)));
            }
        }
    }
    return worst;
}

double reduced_spqm_pde_residual_negative_control(double kappa, double T, double h) {
    auto g = [](double, double, double, double, double, double) { return 1.0; };
    // residual of the constant function is 2 coth r; report its minimum over
    // the same r samples, which stays of order one
    double lowest = 1e300;
    for (double r : {1.0, 1.5, 2.0 * kappa * T, 2.0 * kappa * T + 0.5}) {
        if (r < 0.5) continue;
        lowest = std::min(lowest,
                          std::abs(pde_residual_at(g, kappa, T, r, 0.0, 0.0, 0.3, 0.1, h)));
    }
    return lowest;
}

PartitionCheck partition_function_check(double kT, int n_cut) {
    if (kT <= 0.0) throw std::invalid_argument("partition_function_check: kT must be positive");
    PartitionCheck out;
    out.truncation_ok = std::exp(-4.0 * kT * n_cut) < 1e-12;
    for (int n = 0; n < n_cut; ++n) out.lhs += std::exp(-4.0 * kT * (n + 0.5));
    out.rhs = 1.0 / (2.0 * std::sinh(2.0 * kT));
    out.rel_err = std::abs(out.lhs - out.rhs) / out.rhs;
    return out;
}

// ---------------------------------------------------------------------------
// ISM radial
// ---------------------------------------------------------------------------
double ism_radial_sde(double kappa, double T, double dt, Rng& rng, double a0,
                      const std::vector<double>* noise) {
    const int K = static_cast<int>(std::lround(T / dt));
    const double rk = std::sqrt(kappa);
    const double sdt = std::sqrt(dt);
    double a = a0;
    for (int k = 0; k < K; ++k) {
        const double dw = noise ? (*noise)[k] : sdt * rng.normal();
        if (k == 0 && a == 0.0) {
            a = std::abs(rk * dw);
            continue;
        }
        // exact coth-drift flow, then the diffusion kick, reflected at zero
        a = std::acosh(std::cosh(a) * std::exp(kappa * dt));
        a = std::abs(a + rk * dw);
    }
    return a;
}

double RadialDensity::cdf(double x) const {
    double acc = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        const double lo = a[i] - 0.5 * h, hi = a[i] + 0.5 * h;
        if (x >= hi) acc += p[i] * h;
        else if (x > lo) acc += p[i] * (x - lo);
        else break;
    }
    return acc / norm;
}

double RadialDensity::mean() const {
    double m = 0.0;
    for (size_t i = 0; i < a.size(); ++i) m += a[i] * p[i] * h;
    return m / norm;
}

double RadialDensity::variance() const {
    const double m = mean();
    double v = 0.0;
    for (size_t i = 0; i < a.size(); ++i) v += (a[i] - m) * (a[i] - m) * p[i] * h;
    return v / norm;
}

RadialDensity ism_radial_fpke(double kappa, double T, double dt, double a_min, double a_max,
                              int n_cells, bool drift_on) {
    if (a_max <= a_min || n_cells < 10)
        throw std::invalid_argument("ism_radial_fpke: bad grid");
    const int K = static_cast<int>(std::lround(T / dt)) - 1; // starts at t = dt
    if (K < 1) throw std::invalid_argument("ism_radial_fpke: T too small");

    RadialDensity rd;
    rd.h = (a_max - a_min) / n_cells;
    rd.a.resize(n_cells);
    rd.p.resize(n_cells);
    for (int i = 0; i < n_cells; ++i) rd.a[i] = a_min + (i + 0.5) * rd.h;

    // first-step half-normal, variance kappa dt
    {
        const double s2 = kappa * dt;
        double tot = 0.0;
        for (int i = 0; i < n_cells; ++i) {
            rd.p[i] = 2.0 * std::exp(-rd.a[i] * rd.a[i] / (2.0 * s2)) /
                      std::sqrt(2.0 * kPi * s2);
            tot += rd.p[i] * rd.h;
        }
        for (auto& v : rd.p) v /= tot;
    }

    // flux F = kappa coth(a) P - (kappa/2) dP/da at faces; dP_i/dt = -(F_R - F_L)/h
    const int n = n_cells;
    const double h = rd.h;
    Eigen::VectorXd lower(n), diag(n), upper(n);
    Eigen::VectorXd rl(n), rdg(n), ru(n);
    {
        // A P gives dP/dt; assemble tridiagonal A
        std::vector<double> cf(n + 1, 0.0); // coth at faces (interior only)
        for (int f = 1; f < n; ++f) {
            const double af = a_min + f * h;
            cf[f] = drift_on ? 1.0 / std::tanh(af) : 0.0;
        }
        const double dcoef = 0.5 * kappa / (h * h);
        for (int i = 0; i < n; ++i) {
            double dl = 0.0, dd = 0.0, du = 0.0;
            if (i > 0) { // left face
                const double adv = kappa * cf[i] / (2.0 * h);
                dl += adv + dcoef;
                dd += adv - dcoef;
            }
            if (i + 1 < n) { // right face
                const double adv = kappa * cf[i + 1] / (2.0 * h);
                dd += -adv - dcoef;
                du += -adv + dcoef;
            }
            lower(i) = dl;
            diag(i) = dd;
            upper(i) = du;
        }
        // Crank-Nicolson operators (I -+ dt/2 A)
        for (int i = 0; i < n; ++i) {
            rl(i) = -0.5 * dt * lower(i);
            rdg(i) = 1.0 - 0.5 * dt * diag(i);
            ru(i) = -0.5 * dt * upper(i);
        }
    }

    std::vector<double> pn(rd.p.begin(), rd.p.end()), rhs(n), cp(n), dp(n);
    for (int step = 0; step < K; ++step) {
        for (int i = 0; i < n; ++i) {
            double v = pn[i] * (1.0 + 0.5 * dt * diag(i));
            if (i > 0) v += 0.5 * dt * lower(i) * pn[i - 1];
            if (i + 1 < n) v += 0.5 * dt * upper(i) * pn[i + 1];
            rhs[i] = v;
        }
        // Thomas solve of the tridiagonal CN system
        cp[0] = ru(0) / rdg(0);
        dp[0] = rhs[0] / rdg(0);
        for (int i = 1; i < n; ++i) {
            const double m = rdg(i) - rl(i) * cp[i - 1];
            cp[i] = ru(i) / m;
            dp[i] = (rhs[i] - rl(i) * dp[i - 1]) / m;
        }
        pn[n - 1] = dp[n - 1];
        for (int i = n - 2; i >= 0; --i) pn[i] = dp[i] - cp[i] * pn[i + 1];
    }

    rd.p.assign(pn.begin(), pn.end());
    rd.norm = 0.0;
    for (double v : rd.p) rd.norm += v * h;
    rd.boundary_mass = 0.0;
    for (int i = n - n / 20; i < n; ++i) rd.boundary_mass += rd.p[i] * h;
    return rd;
}

// ---------------------------------------------------------------------------
// ISM full coordinates
// ---------------------------------------------------------------------------
IsmCoordinateState ism_full_sde(const Representation& spin, double kappa, double T, double dt,
                                Rng& rng, const std::vector<std::vector<double>>* noise,
                                double a_switch) {
    const int K = static_cast<int>(std::lround(T / dt));
    const Mat& jx = spin.op("Jx");
    const Mat& jy = spin.op("Jy");
    const Mat& jz = spin.op("Jz");
    const Eigen::Index d = jx.rows();
    const double j = spin.j;
    const double cj = j * (j + 1.0) * (2.0 * j + 1.0) / 3.0; // tr(J_mu J_nu) = cj delta

    IsmCoordinateState st;
    st.u = Mat::Identity(d, d);
    st.v = Mat::Identity(d, d);
    const double rk = std::sqrt(kappa);
    const double sdt = std::sqrt(dt);
    const Mat* jj[3] = {&jx, &jy, &jz};

    Mat x2 = Mat::Zero(d, d);
    for (const Mat* x : jj) x2 += (*x) * (*x);
    Mat lboot = Mat::Identity(d, d);
    bool bootstrapping = true;

    for (int k = 0; k < K; ++k) {
        double dw[3];
        if (noise)
            for (int m = 0; m < 3; ++m) dw[m] = (*noise)[k][m];
        else
            for (int m = 0; m < 3; ++m) dw[m] = sdt * rng.normal();

        st.ell += kappa * dt; // dl = kappa dt, exact

        if (bootstrapping) {
            Mat delta = -kappa * dt * x2;
            for (int m = 0; m < 3; ++m) delta += rk * dw[m] * (*jj[m]);
            lboot = expm_hermitian(delta) * lboot;
            Eigen::JacobiSVD<Mat> svd(lboot, Eigen::ComputeFullU | Eigen::ComputeFullV);
            const auto& sv = svd.singularValues();
            const double a_est = std::log(sv(0) / sv(d - 1)) / (2.0 * j);
            if (a_est >= a_switch || k + 1 == K) {
                st.a = a_est;
                st.v = svd.matrixU();
                st.u = svd.matrixV().adjoint();
                st.switch_time = (k + 1) * dt;
                bootstrapping = false;
            }
            continue;
        }

        // in-situ rotation dY = R^{-1} dW with V^{-1} J_nu V = J_mu (R^{-1})^mu_nu
        Eigen::Matrix3d rinv;
        for (int mu = 0; mu < 3; ++mu)
            for (int nu = 0; nu < 3; ++nu)
                rinv(mu, nu) = ((*jj[mu]) * st.v.adjoint() * (*jj[nu]) * st.v).trace().real() / cj;
        st.rotation_orthogonality_defect =
            std::max(st.rotation_orthogonality_defect,
                     (rinv * rinv.transpose() - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff());
        Eigen::Vector3d dy = rinv * Eigen::Map<Eigen::Vector3d>(dw);

        const double a_start = st.a;
        const double csch = 1.0 / std::sinh(a_start);
        const double coth = std::cosh(a_start) * csch;

        // ruler: exact coth-drift substep plus kick, reflected
        st.a = std::acosh(std::cosh(st.a) * std::exp(kappa * dt));
        st.a = std::abs(st.a + rk * dy(2));

        Mat g = cxd(0.0, -1.0) * jx * (rk * dy(1)) + cxd(0.0, 1.0) * jy * (rk * dy(0));
        st.u = matrix_exp(g * csch) * st.u;
        st.v = st.v * matrix_exp(-g * coth);
    }
    return st;
}

Mat rebuild_ism_partial(const IsmCoordinateState& st, const Representation& spin) {
    const Mat& jz = spin.op("Jz");
    const Eigen::Index d = jz.rows();
    const double j2 = spin.j * (spin.j + 1.0);
    Mat core = Mat::Zero(d, d);
    for (Eigen::Index i = 0; i < d; ++i)
        core(i, i) = std::exp(jz(i, i).real() * st.a - j2 * st.ell);
    return st.v * core * st.u;
}

// ---------------------------------------------------------------------------
// ISpin(3) extraction (spin-1/2)
// ---------------------------------------------------------------------------
namespace {

struct Zyz {
    double phi, theta, xi;
};

// W = e^{-i phi Jz} e^{-i theta Jy} e^{-i xi Jz} for W in SU(2)
Zyz zyz_decompose(const Mat& w) {
    const cxd w00 = w(0, 0), w10 = w(1, 0);
    const double c = std::abs(w00), s = std::abs(w10);
    Zyz z;
    z.theta = 2.0 * std::atan2(s, c);
    if (s < 1e-10) {
        z.xi = 0.0;
        z.phi = wrap_angle(-2.0 * std::arg(w00));
    } else if (c < 1e-10) {
        z.xi = 0.0;
        z.phi = wrap_angle(2.0 * std::arg(w10));
    } else {
        const double sum = -2.0 * std::arg(w00); // phi + xi
        const double dif = 2.0 * std::arg(w10);  // phi - xi
        z.phi = wrap_angle(0.5 * (sum + dif));
        z.xi = wrap_angle(0.5 * (sum - dif));
    }
    return z;
}

Mat su2_from_angles(double phi, double theta, double xi, const Representation& spin) {
    const Mat& jz = spin.op("Jz");
    const Mat& jy = spin.op("Jy");
    const cxd mi(0.0, -1.0);
    return matrix_exp(mi * phi * jz) * matrix_exp(mi * theta * jy) * matrix_exp(mi * xi * jz);
}

Eigen::Vector3d sphere_point(double theta, double phi) {
    return {std::sin(theta) * std::cos(phi), std::sin(theta) * std::sin(phi), std::cos(theta)};
}

} // namespace

Mat rebuild_ispin(const CartanISM& c, const Representation& spin_half) {
    const Mat& jz = spin_half.op("Jz");
    const Eigen::Index d = jz.rows();
    const double j2 = spin_half.j * (spin_half.j + 1.0);
    const double theta_m = std::acos(std::clamp(c.m_hat(2), -1.0, 1.0));
    const double phi_m = std::atan2(c.m_hat(1), c.m_hat(0));
    const double theta_n = std::acos(std::clamp(c.n_hat(2), -1.0, 1.0));
    const double phi_n = std::atan2(c.n_hat(1), c.n_hat(0));
    Mat dm = su2_from_angles(phi_m, theta_m, 0.0, spin_half);
    Mat dn = su2_from_angles(phi_n, theta_n, 0.0, spin_half);
    Mat core = Mat::Zero(d, d);
    for (Eigen::Index i = 0; i < d; ++i)
        core(i, i) = std::exp(jz(i, i).real() * c.a - j2 * c.ell);
    const cxd mi(0.0, -1.0);
    return dm * matrix_exp(mi * c.psi * jz) * core * dn.inverse();
}

CartanISM extract_ispin(const Mat& l) {
    if (l.rows() != 2 || l.cols() != 2)
        throw std::invalid_argument("extract_ispin: expects a 2x2 Kraus operator");
    const cxd det = l(0, 0) * l(1, 1) - l(0, 1) * l(1, 0);
    if (std::abs(det) < 1e-300) throw SingularMatrixError("extract_ispin: singular input");

    CartanISM c;
    c.ell = -(2.0 / 3.0) * std::log(std::abs(det));

    // remaining SL(2,C) factor; det reduced to a phase, which must be ~1 for
    // group elements (generators are traceless plus the real J^2 center)
    Mat a2 = l * std::exp(0.75 * c.ell);
    Eigen::JacobiSVD<Mat> svd(a2, Eigen::ComputeFullU | Eigen::ComputeFullV);
    const double s0 = svd.singularValues()(0);
    c.a = 2.0 * std::log(s0);

    Mat vr = svd.matrixU();
    Mat ur = svd.matrixV().adjoint();
    // push the unit-determinant convention onto both unitary factors
    auto fix_det = [](Mat& w) {
        const cxd dw = w(0, 0) * w(1, 1) - w(0, 1) * w(1, 0);
        w *= std::exp(cxd(0.0, -0.5 * std::arg(dw)));
    };
    fix_det(vr);
    fix_det(ur);
    // restore the overall sign so that vr * diag * ur reproduces a2
    {
        Mat probe = vr * Eigen::Vector2cd(std::exp(0.5 * c.a), std::exp(-0.5 * c.a)).asDiagonal() *
                    Mat(ur);
        cxd ratio = (probe.adjoint() * a2).trace();
        if (ratio.real() < 0.0) vr = -vr;
    }

    // use the diagonal gauge to bring U^{-1} to the two-angle form D_n
    Zyz zu = zyz_decompose(ur.inverse());
    c.n_hat = sphere_point(zu.theta, zu.phi);
    const Representation half = build_spin_operators(0.5);
    const Mat& jz = half.op("Jz");
    const cxd mi(0.0, -1.0);
    Mat gauge = matrix_exp(mi * (-zu.xi) * jz); // e^{-i Jz chi}, chi = -xi
    Mat v2 = vr * gauge;
    Zyz zv = zyz_decompose(v2);
    c.m_hat = sphere_point(zv.theta, zv.phi);
    c.psi = zv.xi;
    c.gauge_ambiguous = c.a < 1e-8;

    Mat rebuilt = rebuild_ispin(c, half);
    const double res_plus = (rebuilt - l).norm() / l.norm();
    const double res_minus = (rebuilt + l).norm() / l.norm();
    c.cover_sign = res_plus <= res_minus ? 1 : -1;
    c.residual = std::min(res_plus, res_minus);
    if (!c.gauge_ambiguous && c.residual > 1e-8)
        throw std::runtime_error("extract_ispin: rebuild residual " +
                                 std::to_string(c.residual) + " above tolerance");
    return c;
}

// ---------------------------------------------------------------------------
// Histogram, collapse metrics, completeness
// ---------------------------------------------------------------------------
long KodHistogram::flat_index(const std::vector<double>& coords) const {
    long idx = 0;
    for (size_t d = 0; d < axes.size(); ++d) {
        const auto& ax = axes[d];
        if (coords[d] < ax.lo || coords[d] >= ax.hi) return -1;
        const long b = static_cast<long>((coords[d] - ax.lo) / (ax.hi - ax.lo) * ax.bins);
        idx = idx * ax.bins + std::min<long>(b, ax.bins - 1);
    }
    return idx;
}

void KodHistogram::add(const std::vector<double>& coords, double w) {
    const long idx = flat_index(coords);
    if (idx < 0) {
        ++out_of_range;
        return;
    }
    weights[idx] += w;
    counts[idx] += 1;
    total_weight += w;
    total_count += 1;
}

double KodHistogram::bin_volume() const {
    double v = 1.0;
    for (const auto& ax : axes) v *= (ax.hi - ax.lo) / ax.bins;
    return v;
}

std::vector<double> KodHistogram::bin_center(long flat) const {
    std::vector<double> c(axes.size());
    for (size_t d = axes.size(); d-- > 0;) {
        const auto& ax = axes[d];
        const long b = flat % ax.bins;
        flat /= ax.bins;
        c[d] = ax.lo + (b + 0.5) * (ax.hi - ax.lo) / ax.bins;
    }
    return c;
}

double KodHistogram::density_rel_haar(
    long flat, const std::function<double(const std::vector<double>&)>& haar_density) const {
    const double hw = haar_density(bin_center(flat)) * bin_volume();
    if (hw <= 0.0) return 0.0;
    return weights[flat] / (total_weight * hw);
}

KodHistogram kod_histogram(const std::vector<std::vector<double>>& samples,
                           const std::vector<double>& weights, std::vector<HistAxis> axes) {
    if (samples.empty()) throw std::invalid_argument("kod_histogram: empty ensemble");
    KodHistogram h;
    h.axes = std::move(axes);
    long nb = 1;
    for (const auto& ax : h.axes) nb *= ax.bins;
    h.weights.assign(nb, 0.0);
    h.counts.assign(nb, 0);
    for (size_t i = 0; i < samples.size(); ++i)
        h.add(samples[i], weights.empty() ? 1.0 : weights[i]);
    return h;
}

CollapseMetrics collapse_metrics(const Mat& e, const Representation& rep) {
    Eigen::SelfAdjointEigenSolver<Mat> es(e);
    if (es.eigenvalues()(0) < -1e-10 * std::abs(es.eigenvalues().cwiseAbs().maxCoeff()))
        throw std::invalid_argument("collapse_metrics: E must be positive semidefinite");
    const Eigen::Index d = e.rows();
    CollapseMetrics m;
    const double tr = e.trace().real();
    m.purity = (e * e).trace().real() / (tr * tr);

    const Eigen::Index top = d - 1;
    const double gap = es.eigenvalues()(top) - (d > 1 ? es.eigenvalues()(top - 1) : 0.0);
    m.ambiguous = gap < 1e-10 * std::max(1.0, es.eigenvalues()(top));
    Vec v = es.eigenvectors().col(top);

    if (rep.kind == Representation::Kind::FockTruncated) {
        const Mat& a = rep.op("A");
        m.label_alpha = v.dot(a * v); // <v|A|v>
        // coherent state |alpha> in the number basis
        Vec coh = Vec::Zero(d);
        double lognorm = -0.5 * std::norm(m.label_alpha);
        cxd amp = std::exp(cxd(lognorm, 0.0));
        for (Eigen::Index n = 0; n < d; ++n) {
            coh(n) = amp;
            amp *= m.label_alpha / std::sqrt(static_cast<double>(n + 1));
        }
        m.top_fidelity = std::norm(coh.dot(v));
    } else if (rep.kind == Representation::Kind::Spin) {
        const Mat& jz = rep.op("Jz");
        const Mat& jy = rep.op("Jy");
        const cxd mi(0.0, -1.0);
        Vec e0 = Vec::Zero(d);
        e0(0) = 1.0; // |j, j>
        auto fid = [&](double theta, double phi) {
            Vec coh = matrix_exp(mi * phi * jz) * (matrix_exp(mi * theta * jy) * e0);
            return std::norm(coh.dot(v));
        };
        // two-stage spherical grid search
        double best = -1.0, bt = 0.0, bp = 0.0;
        const int nt = 48, np = 96;
        for (int it = 0; it <= nt; ++it)
            for (int ip = 0; ip < np; ++ip) {
                const double th = kPi * it / nt, ph = 2.0 * kPi * ip / np;
                const double f = fid(th, ph);
                if (f > best) {
                    best = f;
                    bt = th;
                    bp = ph;
                }
            }
        double span_t = kPi / nt, span_p = 2.0 * kPi / np;
        for (int stage = 0; stage < 6; ++stage) {
            const double t0 = bt, p0 = bp;
            for (int it = -4; it <= 4; ++it)
                for (int ip = -4; ip <= 4; ++ip) {
                    const double th = std::clamp(t0 + span_t * it / 4.0, 0.0, kPi);
                    const double ph = p0 + span_p * ip / 4.0;
                    const double f = fid(th, ph);
                    if (f > best) {
                        best = f;
                        bt = th;
                        bp = ph;
                    }
                }
            span_t /= 4.0;
            span_p /= 4.0;
        }
        m.top_fidelity = best;
        m.label_n = sphere_point(bt, bp);
    } else {
        throw std::invalid_argument("collapse_metrics: unsupported representation");
    }
    return m;
}

CompletenessResult completeness_functional(const std::vector<TrajectoryRecord>& ensemble,
                                           Rng& boot_rng, int resamples) {
    if (ensemble.empty()) throw std::invalid_argument("completeness_functional: empty ensemble");
    for (const auto& r : ensemble)
        if (r.sampling != SamplingKind::Wiener)
            throw std::invalid_argument("completeness_functional: completeness holds under the "
                                        "Wiener measure; Born-rule ensemble supplied");
    const Eigen::Index d = ensemble.front().kraus.rows();
    const size_t n = ensemble.size();
    std::vector<Mat> povm(n);
    Mat mean = Mat::Zero(d, d);
    for (size_t i = 0; i < n; ++i) {
        povm[i] = std::exp(2.0 * ensemble[i].log_norm) *
                  (ensemble[i].kraus.adjoint() * ensemble[i].kraus);
        mean += povm[i];
    }
    mean /= static_cast<double>(n);

    CompletenessResult out;
    out.n = static_cast<int>(n);
    out.deviation = (mean - Mat::Identity(d, d)).norm();

    std::vector<double> devs(resamples);
    Mat acc(d, d);
    for (int b = 0; b < resamples; ++b) {
        acc.setZero();
        for (size_t i = 0; i < n; ++i) acc += povm[boot_rng.next_u64() % n];
        acc /= static_cast<double>(n);
        devs[b] = (acc - mean).norm();
    }
    double s = 0.0;
    for (double v : devs) s += v * v;
    out.boot_sigma = std::sqrt(s / resamples);
    return out;
}

} // namespace kodsim
