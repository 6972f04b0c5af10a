#include "kodsim/trajectories.hpp"

#include <cmath>
#include <iostream>

#include <Eigen/Eigenvalues>
#include <Eigen/SVD>

#include "kodsim/stats.hpp"

namespace kodsim {

namespace {

int step_count(double T, double dt) {
    const double k = T / dt;
    const int ki = static_cast<int>(std::lround(k));
    if (ki < 1 || std::abs(k - ki) > 1e-9 * std::max(1.0, k))
        throw std::invalid_argument("T must be an integer multiple of dt");
    return ki;
}

double spectral_norm(const Mat& a) {
    Eigen::JacobiSVD<Mat> svd(a);
    return svd.singularValues()(0);
}

double min_rel_singular(const Mat& a) {
    Eigen::JacobiSVD<Mat> svd(a);
    const auto& sv = svd.singularValues();
    return sv(sv.size() - 1) / sv(0);
}

std::vector<double> expectations(const Mat& rho, const std::vector<Mat>& obs) {
    std::vector<double> ex(obs.size());
    for (size_t mu = 0; mu < obs.size(); ++mu)
        ex[mu] = (obs[mu] * rho).trace().real();
    return ex;
}

} // namespace

TrajectoryRecord pile_up(const std::vector<Mat>& obs, double kappa, double T, double dt,
                         Rng& rng, const PileUpOptions& opt) {
    const int K = step_count(T, dt);
    if (kappa * dt > 0.05)
        std::cerr << "pile_up: warning: kappa*dt = " << kappa * dt
                  << " is outside the diffusive regime\n";
    const Eigen::Index d = obs.front().rows();
    const int n = static_cast<int>(obs.size());

    Mat x2 = Mat::Zero(d, d);
    for (const Mat& x : obs) x2 += x * x;

    TrajectoryRecord rec;
    rec.kappa = kappa;
    rec.T = T;
    rec.dt = dt;
    rec.sampling = opt.sampling;
    if (opt.store_increments) rec.increments.reserve(K);

    Mat L = Mat::Identity(d, d);
    double log_norm = 0.0;
    Mat rho; // Born-rule conditioning state
    if (opt.sampling == SamplingKind::BornRule) {
        if (opt.rho0.rows() != d) throw std::invalid_argument("pile_up: BornRule needs rho0");
        rho = opt.rho0;
    }

    const double rk = std::sqrt(kappa);
    const double sdt = std::sqrt(dt);
    std::vector<double> dw(n);
    Mat delta(d, d), step(d, d);
    for (int k = 0; k < K; ++k) {
        if (opt.noise) {
            dw = (*opt.noise)[k];
        } else if (opt.sampling == SamplingKind::Wiener) {
            for (int mu = 0; mu < n; ++mu) dw[mu] = sdt * rng.normal();
        } else {
            const auto ex = expectations(rho, obs);
            for (int mu = 0; mu < n; ++mu)
                dw[mu] = 2.0 * rk * ex[mu] * dt + sdt * rng.normal();
        }
        if (opt.store_increments) rec.increments.push_back(dw);

        delta = -kappa * dt * x2;
        for (int mu = 0; mu < n; ++mu) delta += rk * dw[mu] * obs[mu];

        switch (opt.integrator) {
        case IntegratorKind::ExactExponentialStep:
        case IntegratorKind::MMCSD:
            // the MMCSD equals the forward generator, so its exact
            // integration is the per-step exponential
            step = expm_hermitian(delta);
            break;
        case IntegratorKind::EulerIto:
            step = Mat::Identity(d, d) + delta + 0.5 * delta * delta;
            break;
        }
        L = step * L;

        const double s = L.norm(); // Frobenius rescale every step
        if (!(s > 0.0) || !std::isfinite(s))
            throw DegenerateTrajectoryError("pile_up: Kraus norm underflow");
        L /= s;
        log_norm += std::log(s);

        if (opt.sampling == SamplingKind::BornRule) {
            rho = step * rho * step.adjoint();
            rho /= rho.trace().real();
        }

        if (opt.cond_check_interval > 0 &&
            ((k + 1) % opt.cond_check_interval == 0 || k + 1 == K)) {
            const double mrs = min_rel_singular(L);
            rec.min_rel_sv = std::min(rec.min_rel_sv, mrs);
            if (mrs < opt.min_rel_sv_abort)
                throw DegenerateTrajectoryError("pile_up: numerically singular Kraus operator");
        }
    }

    // expose the ||.||_2 = 1 convention at the API boundary
    const double s2 = spectral_norm(L);
    L /= s2;
    log_norm += std::log(s2);
    rec.kraus = L;
    rec.log_norm = log_norm;
    return rec;
}

StateTrajectory evolve_linear_state(const Mat& rho0, const std::vector<Mat>& obs,
                                    const TrajectoryRecord& rec) {
    if (rec.increments.empty() && rec.T > 0.0)
        throw std::invalid_argument("evolve_linear_state: record has no stored increments");
    const Eigen::Index d = obs.front().rows();
    Mat x2 = Mat::Zero(d, d);
    for (const Mat& x : obs) x2 += x * x;
    const double rk = std::sqrt(rec.kappa);

    StateTrajectory st;
    st.normalized = false;
    st.states.reserve(rec.increments.size() + 1);
    st.states.push_back(rho0);
    Mat rho = rho0;
    Mat delta(d, d);
    for (const auto& dw : rec.increments) {
        delta = -rec.kappa * rec.dt * x2;
        for (size_t mu = 0; mu < obs.size(); ++mu) delta += rk * dw[mu] * obs[mu];
        Mat l = expm_hermitian(delta);
        rho = l * rho * l.adjoint();
        st.states.push_back(rho);
    }
    return st;
}

StateTrajectory evolve_sme(const Mat& rho0, const std::vector<Mat>& obs, double kappa,
                           double T, double dt, Rng& rng, bool store_states) {
    const int K = step_count(T, dt);
    const Eigen::Index d = obs.front().rows();
    const int n = static_cast<int>(obs.size());
    Mat x2 = Mat::Zero(d, d);
    for (const Mat& x : obs) x2 += x * x;

    StateTrajectory st;
    st.normalized = true;
    if (store_states) st.states.reserve(K + 1);
    st.states.push_back(rho0);
    st.innovations.reserve(K);

    Mat rho = rho0;
    const double rk = std::sqrt(kappa);
    const double sdt = std::sqrt(dt);
    Mat delta(d, d);
    std::vector<double> inno(n);
    for (int k = 0; k < K; ++k) {
        const auto ex = expectations(rho, obs);
        delta = -kappa * dt * x2;
        for (int mu = 0; mu < n; ++mu) {
            const double mean = 2.0 * rk * ex[mu] * dt;
            const double dw = mean + sdt * rng.normal();
            inno[mu] = dw - mean;
            delta += rk * dw * obs[mu];
        }
        Mat l = expm_hermitian(delta);
        rho = l * rho * l.adjoint();
        const double tr = rho.trace().real();
        if (!(tr > 0.0)) throw DegenerateTrajectoryError("evolve_sme: trace underflow");
        rho /= tr;
        Eigen::SelfAdjointEigenSolver<Mat> es(rho, Eigen::EigenvaluesOnly);
        if (es.eigenvalues()(0) < -1e-8)
            throw std::runtime_error("evolve_sme: positivity violation, decrease dt");
        st.innovations.push_back(inno);
        if (store_states) st.states.push_back(rho);
    }
    if (!store_states) st.states.push_back(rho);
    return st;
}

BornIncrementReport born_increment_mean_check(const Mat& rho, const std::vector<Mat>& obs,
                                              double kappa, double dt, int n_samples,
                                              Rng& rng) {
    if (n_samples < 10000)
        throw std::invalid_argument("born_increment_mean_check: need N >= 1e4");
    const int n = static_cast<int>(obs.size());
    const auto ex = expectations(rho, obs);
    const double rk = std::sqrt(kappa);
    const double sdt = std::sqrt(dt);

    std::vector<std::vector<double>> draws(n, std::vector<double>(n_samples));
    for (int s = 0; s < n_samples; ++s)
        for (int mu = 0; mu < n; ++mu)
            draws[mu][s] = 2.0 * rk * ex[mu] * dt + sdt * rng.normal();

    BornIncrementReport rep;
    rep.empirical_mean.resize(n);
    rep.expected_mean.resize(n);
    rep.mean_z.resize(n);
    rep.second_moment.resize(n);
    rep.second_moment_z.resize(n);
    const double se_mean = sdt / std::sqrt(static_cast<double>(n_samples));
    for (int mu = 0; mu < n; ++mu) {
        rep.empirical_mean[mu] = stats::mean(draws[mu]);
        rep.expected_mean[mu] = 2.0 * rk * ex[mu] * dt;
        rep.mean_z[mu] = (rep.empirical_mean[mu] - rep.expected_mean[mu]) / se_mean;
        double m2 = 0.0;
        for (double v : draws[mu]) m2 += v * v;
        m2 /= n_samples;
        rep.second_moment[mu] = m2;
        // var of x^2 for x ~ N(mean~0, dt) is ~2 dt^2
        rep.second_moment_z[mu] =
            (m2 - dt) / (std::sqrt(2.0) * dt / std::sqrt(static_cast<double>(n_samples)));
    }
    for (int mu = 0; mu < n; ++mu)
        for (int nu = mu + 1; nu < n; ++nu) {
            double c = 0.0;
            for (int s = 0; s < n_samples; ++s) c += draws[mu][s] * draws[nu][s];
            c /= n_samples;
            rep.max_cross_z = std::max(rep.max_cross_z,
                                       std::abs(c) / (dt / std::sqrt(static_cast<double>(n_samples))));
        }
    return rep;
}

TransitionEstimate transition_estimators_agree(const Mat& rho0,
                                               const std::function<double(const Mat&)>& f,
                                               const std::vector<Mat>& obs, double kappa,
                                               double T, double dt, int n_traj,
                                               uint64_t master_seed) {
    TransitionEstimate out;
    if (T == 0.0) {
        out.est_wiener = out.est_born = f(rho0);
        out.ess = n_traj;
        return out;
    }

    std::vector<double> fw(n_traj), w(n_traj), fb(n_traj);
    PileUpOptions wopt;
    wopt.store_increments = false;
    PileUpOptions bopt;
    bopt.sampling = SamplingKind::BornRule;
    bopt.rho0 = rho0;
    bopt.store_increments = false;

    for (int i = 0; i < n_traj; ++i) {
        Rng rng = Rng::stream(master_seed, static_cast<uint64_t>(i));
        auto rec = pile_up(obs, kappa, T, dt, rng, wopt);
        // weight tr(L^dag L rho0) with L = e^{log_norm} kraus
        const double wt =
            std::exp(2.0 * rec.log_norm) *
            (rec.kraus.adjoint() * rec.kraus * rho0).trace().real();
        Mat rho = rec.kraus * rho0 * rec.kraus.adjoint();
        rho /= rho.trace().real();
        w[i] = wt;
        fw[i] = f(rho);

        Rng rngb = Rng::stream(master_seed ^ 0xb0b0b0b0b0b0b0b0ull, static_cast<uint64_t>(i));
        auto recb = pile_up(obs, kappa, T, dt, rngb, bopt);
        Mat rhob = recb.kraus * rho0 * recb.kraus.adjoint();
        rhob /= rhob.trace().real();
        fb[i] = f(rhob);
    }

    double sw = 0.0, swf = 0.0;
    for (int i = 0; i < n_traj; ++i) {
        sw += w[i];
        swf += w[i] * fw[i];
    }
    out.est_wiener = swf / sw;
    out.ess = stats::effective_sample_size(w);
    out.ess_warning = out.ess < 100.0;
    // delta-method error of the self-normalized ratio
    double varr = 0.0;
    const double wbar = sw / n_traj;
    for (int i = 0; i < n_traj; ++i) {
        const double u = w[i] * (fw[i] - out.est_wiener) / wbar;
        varr += u * u;
    }
    out.err_wiener = std::sqrt(varr) / n_traj;

    out.est_born = stats::mean(fb);
    out.err_born = stats::std_error(fb);
    return out;
}

std::vector<double> integrator_consistency(const std::vector<Mat>& obs, double kappa,
                                           double T, double dt0, int levels,
                                           uint64_t seed) {
    const int n = static_cast<int>(obs.size());
    const int k0 = step_count(T, dt0);
    const int kf = k0 << (levels - 1);
    // finest-level Brownian increments, aggregated upward for coarser levels
    Rng rng(seed);
    const double sdtf = std::sqrt(dt0 / (1 << (levels - 1)));
    std::vector<std::vector<double>> fine(kf, std::vector<double>(n));
    for (auto& row : fine)
        for (double& v : row) v = sdtf * rng.normal();

    std::vector<double> diffs;
    for (int lev = 0; lev < levels; ++lev) {
        const int stride = 1 << (levels - 1 - lev);
        const int K = kf / stride;
        const double dt = T / K;
        std::vector<std::vector<double>> noise(K, std::vector<double>(n, 0.0));
        for (int k = 0; k < K; ++k)
            for (int s = 0; s < stride; ++s)
                for (int mu = 0; mu < n; ++mu) noise[k][mu] += fine[k * stride + s][mu];
        PileUpOptions oe, og;
        oe.noise = &noise;
        oe.store_increments = false;
        og = oe;
        og.integrator = IntegratorKind::EulerIto;
        Rng dummy(0);
        auto re = pile_up(obs, kappa, T, dt, dummy, oe);
        auto rg = pile_up(obs, kappa, T, dt, dummy, og);
        Mat le = std::exp(re.log_norm) * re.kraus;
        Mat lg = std::exp(rg.log_norm) * rg.kraus;
        diffs.push_back((le - lg).norm());
    }
    return diffs;
}

} // namespace kodsim
