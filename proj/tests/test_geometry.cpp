#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <kodsim/geometry.hpp>
#include <kodsim/kernels.hpp>
#include <kodsim/linalg.hpp>
#include <kodsim/stats.hpp>
#include <kodsim/trajectories.hpp>

using namespace kodsim;

namespace {

Mat true_kraus(const TrajectoryRecord& rec) { return std::exp(rec.log_norm) * rec.kraus; }

double chi2_gaussian_fit(const std::vector<double>& sample, double var, int bins) {
    const double sig = std::sqrt(var);
    KodHistogram h = kod_histogram(
        [&] {
            std::vector<std::vector<double>> pts;
            pts.reserve(sample.size());
            for (double v : sample) pts.push_back({v});
            return pts;
        }(),
        {}, {HistAxis{"a", -4.0 * sig, 4.0 * sig, bins}});
    double chi2 = 0.0;
    int used = 0;
    const double n = static_cast<double>(sample.size());
    for (long b = 0; b < bins; ++b) {
        const double lo = h.axes[0].lo + b * (h.axes[0].hi - h.axes[0].lo) / bins;
        const double hi = lo + (h.axes[0].hi - h.axes[0].lo) / bins;
        const double pexp = stats::normal_cdf(hi / sig) - stats::normal_cdf(lo / sig);
        const double expect = n * pexp;
        if (expect < 5.0) continue;
        const double diff = h.counts[b] - expect;
        chi2 += diff * diff / expect;
        ++used;
    }
    return chi2 - stats::chi2_quantile(0.99, used - 1); // negative means pass
}

} // namespace

TEST_CASE("analytic single-observable KOD") {
    auto kod = analytic_kod_single(1.0, 1.0);
    CHECK(kod.var_a == doctest::Approx(1.0));
    CHECK(kod.r == doctest::Approx(1.0));

    // T -> 0+ collapses onto the identity
    auto tiny = analytic_kod_single(1.0, 1e-9);
    CHECK(tiny.r < 1e-8);
    CHECK(tiny.var_a < 1e-8);

    // Monte Carlo a_T against the Gaussian, KS at the 5% critical distance
    const double kappa = 1.0, T = 1.0, dt = 1e-3;
    auto rep = build_single_observable({0.5, -0.5});
    const int N = 20000;
    std::vector<double> a(N), r(N);
    PileUpOptions opt;
    for (int i = 0; i < N; ++i) {
        Rng rng = Rng::stream(2001, i);
        auto rec = pile_up({rep.op("X")}, kappa, T, dt, rng, opt);
        auto c = extract_single(rec, rep.spectrum);
        a[i] = c.a;
        r[i] = c.r;
    }
    auto kod1 = analytic_kod_single(kappa, T);
    const double ks =
        stats::ks_distance(a, [&](double x) { return kod1.cdf(x); });
    CHECK(ks < stats::ks_critical(0.05, N));
    for (int i = 0; i < N; i += 997) CHECK(std::abs(r[i] - kappa * T) < 1e-12);

    // histogram of a at fixed r matches the analytic Gaussian (chi squared, 1%)
    CHECK(chi2_gaussian_fit(a, kappa * T, 40) < 0.0);
}

TEST_CASE("spqm coordinate sde basics") {
    const double kappa = 1.0, T = 1.0, dt = 1e-3;
    Rng rng(3001);
    auto p = spqm_coordinate_sde(kappa, T, dt, rng);
    CHECK(std::abs(p.r.back() - 2.0 * kappa * T) < 1e-12);

    // zero noise: beta = alpha = 0 and the exact coth quadrature for ell
    const int K = 1000;
    std::vector<std::array<double, 2>> zero(K, {0.0, 0.0});
    Rng dummy(0);
    auto pz = spqm_coordinate_sde(kappa, T, dt, dummy, &zero);
    CHECK(std::abs(pz.beta.back()) < 1e-15);
    CHECK(std::abs(pz.alpha.back()) < 1e-15);
    const double expected_ell =
        -0.5 * std::log(std::sinh(2.0 * kappa * T) / std::sinh(2.0 * kappa * dt));
    CHECK(pz.ell.back() == doctest::Approx(expected_ell).epsilon(1e-10));
}

TEST_CASE("spqm reduced distribution width") {
    const double dt = 1e-3;
    for (double kT : {0.5, 1.0}) {
        const int N = 20000;
        auto samples = spqm_reduced_ensemble(1.0, kT, dt, N, 4040, true);
        std::vector<double> u2(N);
        for (int i = 0; i < N; ++i) u2[i] = std::norm(samples[i].u);
        const double sigma_hat = stats::mean(u2);
        const double sigma = spqm_sigma(kT);
        CHECK(std::abs(sigma_hat - sigma) / sigma < 0.05);
    }
}

TEST_CASE("spqm weighted and tilted estimators agree") {
    // the plain e^{-2 ell} weighted estimator is heavy-tailed; compare at a
    // coarse step count where its effective sample size is workable
    const double kT = 1.0;
    const int N = 40000;
    auto tilted = spqm_reduced_ensemble(1.0, kT, kT / 25.0, N, 515, true);
    auto plain = spqm_reduced_ensemble(1.0, kT, kT / 25.0, N, 515, false);
    double su = 0.0, sw = 0.0;
    for (const auto& s : tilted) su += std::norm(s.u);
    const double sig_tilted = su / N;
    su = 0.0;
    std::vector<double> w(N);
    for (int i = 0; i < N; ++i) {
        w[i] = plain[i].weight;
        su += w[i] * std::norm(plain[i].u);
        sw += w[i];
    }
    const double sig_plain = su / sw;
    WARN_MESSAGE(stats::effective_sample_size(w) > 50.0, "weighted ESS is very low");
    CHECK(std::abs(sig_plain - sig_tilted) / sig_tilted < 0.5);
}

TEST_CASE("iwh extraction") {
    auto fock = build_fock_operators(32);

    // pure decay: all displacement coordinates vanish
    Mat l0 = Mat::Zero(32, 32);
    for (int n = 0; n < 32; ++n) l0(n, n) = std::exp(-0.7 * (n + 0.5));
    auto c0 = extract_iwh(l0, fock);
    CHECK(c0.r == doctest::Approx(0.7).epsilon(1e-9));
    CHECK(std::abs(c0.beta) < 1e-9);
    CHECK(std::abs(c0.alpha) < 1e-9);
    CHECK(std::abs(c0.ell) < 1e-9);
    CHECK(std::abs(c0.phi) < 1e-9);

    // conjugated decay: alpha = beta = gamma
    const cxd gamma(0.6, -0.3);
    Mat dg = displacement(fock, gamma);
    Mat lc = dg * l0 * dg.adjoint();
    auto cc = extract_iwh(lc, fock);
    CHECK(std::abs(cc.alpha - gamma) < 1e-7);
    CHECK(std::abs(cc.beta - gamma) < 1e-7);
    CHECK(std::abs(cc.phi) < 1e-7);

    // random round trips
    Rng rng(606);
    for (int t = 0; t < 25; ++t) {
        CartanIWH c;
        c.r = 0.5 + 2.0 * rng.uniform();
        c.ell = -0.4 + 0.8 * rng.uniform();
        c.phi = -3.0 + 6.0 * rng.uniform();
        c.beta = cxd(0.8 * rng.normal(), 0.8 * rng.normal());
        c.alpha = cxd(0.8 * rng.normal(), 0.8 * rng.normal());
        Mat l = rebuild_iwh(c, fock);
        auto e = extract_iwh(l, fock);
        CHECK(e.residual <= 1e-6);
        CHECK(std::abs(e.r - c.r) < 1e-6);
        CHECK(std::abs(e.ell - c.ell) < 1e-6);
        CHECK(std::abs(e.beta - c.beta) < 1e-5);
        CHECK(std::abs(e.alpha - c.alpha) < 1e-5);
        CHECK(std::abs(std::remainder(e.phi - c.phi, 2.0 * M_PI)) < 1e-5);
    }

    // truncation-corner support is refused
    Mat hot = Mat::Identity(32, 32);
    CHECK_THROWS(extract_iwh(hot * 0.0 + Mat::Identity(32, 32) * 1.0, fock));
}

TEST_CASE("spqm matrix pile-up cross-validates the coordinate sde") {
    auto fock = build_fock_operators(24);
    std::vector<Mat> obs = {fock.op("Q"), fock.op("P")};
    const double kappa = 1.0, T = 0.5;
    const int levels = 3;
    const double dt0 = 2e-3;

    // shared Brownian refinement
    Rng rng(7077);
    const int kf = static_cast<int>(std::lround(T / dt0)) << (levels - 1);
    std::vector<std::array<double, 2>> fine(kf);
    const double sf = std::sqrt(dt0 / (1 << (levels - 1)));
    for (auto& row : fine) row = {sf * rng.normal(), sf * rng.normal()};

    std::vector<double> dts, errs;
    for (int lev = 0; lev < levels; ++lev) {
        const int stride = 1 << (levels - 1 - lev);
        const int K = kf / stride;
        const double dt = T / K;
        std::vector<std::array<double, 2>> noise2(K, {0.0, 0.0});
        std::vector<std::vector<double>> noisev(K, std::vector<double>(2, 0.0));
        for (int k = 0; k < K; ++k)
            for (int s = 0; s < stride; ++s) {
                noise2[k][0] += fine[k * stride + s][0];
                noise2[k][1] += fine[k * stride + s][1];
                noisev[k][0] = noise2[k][0];
                noisev[k][1] = noise2[k][1];
            }
        PileUpOptions opt;
        opt.noise = &noisev;
        opt.store_increments = false;
        opt.min_rel_sv_abort = 1e-300; // truncated Fock levels compress hard
        Rng dummy(0);
        auto rec = pile_up(obs, kappa, T, dt, dummy, opt);
        auto path = spqm_coordinate_sde(kappa, T, dt, dummy, &noise2);
        CartanIWH c;
        c.r = path.r.back();
        c.ell = path.ell.back();
        c.phi = path.phi.back();
        c.beta = path.beta.back();
        c.alpha = path.alpha.back();
        Mat lc = rebuild_iwh(c, fock);
        Mat lp = true_kraus(rec);
        dts.push_back(dt);
        errs.push_back((lc - lp).norm() / lp.norm());
    }
    CHECK(stats::loglog_slope(dts, errs) > 0.5);
    CHECK(errs.back() < errs.front());
}

TEST_CASE("reduced spqm pde residual") {
    const double kappa = 1.0, T = 0.8;
    const double r1 = reduced_spqm_pde_residual(kappa, T, 0.02);
    const double r2 = reduced_spqm_pde_residual(kappa, T, 0.01);
    CHECK(r1 / r2 == doctest::Approx(4.0).epsilon(0.15));
    CHECK(reduced_spqm_pde_residual_negative_control(kappa, T, 0.01) > 1.0);
}

TEST_CASE("partition function identity") {
    auto pc = partition_function_check(0.5, 40);
    CHECK(pc.rhs == doctest::Approx(1.0 / (2.0 * std::sinh(1.0))));
    CHECK(pc.rel_err < 1e-6);
    CHECK(pc.truncation_ok);

    // geometric-series identity at effectively infinite n_cut
    auto big = partition_function_check(1.0, 60);
    CHECK(big.rel_err < 1e-12);

    // single-term dominance at large kT
    auto late = partition_function_check(10.0, 10);
    CHECK(late.lhs / late.rhs == doctest::Approx(1.0).epsilon(1e-12));

    auto bad = partition_function_check(0.1, 5);
    CHECK_FALSE(bad.truncation_ok);
}

TEST_CASE("ism radial sde") {
    const double kappa = 1.0;

    // zero noise from a0 = 1: exact coth flow matches an RK4 oracle
    const double T = 2.0, dt = 1e-3;
    const int K = 2000;
    std::vector<double> zero(K, 0.0);
    Rng dummy(0);
    const double a_sde = ism_radial_sde(kappa, T, dt, dummy, 1.0, &zero);
    double a_rk = 1.0;
    const int fine = 20000;
    const double h = T / fine;
    for (int i = 0; i < fine; ++i) {
        auto f = [&](double a) { return kappa / std::tanh(a); };
        const double k1 = f(a_rk);
        const double k2 = f(a_rk + 0.5 * h * k1);
        const double k3 = f(a_rk + 0.5 * h * k2);
        const double k4 = f(a_rk + h * k3);
        a_rk += h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4);
    }
    CHECK(std::abs(a_sde - a_rk) < 1e-8);

    // strong dt-convergence under a shared Brownian path
    Rng rng(888);
    const double Tc = 1.0;
    const int levels = 3, k0 = 250;
    const int kfine = k0 << (levels - 1);
    std::vector<double> fine_noise(kfine);
    const double sf = std::sqrt(Tc / kfine);
    for (auto& v : fine_noise) v = sf * rng.normal();
    std::vector<double> dts, errs;
    std::vector<double> finals(levels);
    for (int lev = 0; lev < levels; ++lev) {
        const int stride = 1 << (levels - 1 - lev);
        const int K2 = kfine / stride;
        std::vector<double> noise(K2, 0.0);
        for (int k = 0; k < K2; ++k)
            for (int s = 0; s < stride; ++s) noise[k] += fine_noise[k * stride + s];
        finals[lev] = ism_radial_sde(kappa, Tc, Tc / K2, dummy, 0.0, &noise);
    }
    for (int lev = 0; lev + 1 < levels; ++lev) {
        dts.push_back(Tc / (k0 << lev));
        errs.push_back(std::abs(finals[lev] - finals[levels - 1]) + 1e-300);
    }
    CHECK(errs[1] < errs[0]);

    // late-time mean and variance approach kappa T
    const double T5 = 5.0;
    const int N = 20000;
    std::vector<double> a(N);
    for (int i = 0; i < N; ++i) {
        Rng r = Rng::stream(909090, i);
        a[i] = ism_radial_sde(kappa, T5, 1e-3, r);
    }
    // both statistics approach kappa T with an order-one early-time offset
    // (the mean sits above, the variance below); the acceptance suite pins
    // the offsets as committed golden values
    CHECK(stats::mean(a) == doctest::Approx(kappa * T5).epsilon(0.25));
    CHECK(stats::variance(a) == doctest::Approx(kappa * T5).epsilon(0.25));
}

TEST_CASE("ism radial fpke") {
    const double kappa = 1.0, T = 5.0, dt = 1e-3;
    auto pd = ism_radial_fpke(kappa, T, dt, 1e-3, T + 8.0 * std::sqrt(T), 4000);
    CHECK(std::abs(pd.norm - 1.0) < 1e-6);
    CHECK(pd.boundary_mass < 1e-10);

    // cross-oracle: SDE Monte Carlo histogram against the PDE density
    const int N = 20000;
    std::vector<double> a(N);
    for (int i = 0; i < N; ++i) {
        Rng r = Rng::stream(909090, i);
        a[i] = ism_radial_sde(kappa, T, dt, r);
    }
    const double ks = stats::ks_distance(a, [&](double x) { return pd.cdf(x); });
    CHECK(ks < 2.0 * stats::ks_critical(0.05, N));
    CHECK(pd.mean() == doctest::Approx(stats::mean(a)).epsilon(0.02));
    CHECK(pd.variance() == doctest::Approx(stats::variance(a)).epsilon(0.1));

    // drift-free control: pure heat spreading of the reflected density,
    // second moment kappa T
    auto free = ism_radial_fpke(kappa, 1.0, dt, 1e-3, 10.0, 2000, false);
    double m2 = 0.0;
    for (size_t i = 0; i < free.a.size(); ++i) m2 += free.a[i] * free.a[i] * free.p[i] * free.h;
    CHECK(m2 == doctest::Approx(kappa * 1.0).epsilon(0.01));
}

TEST_CASE("ispin extraction") {
    auto half = build_spin_operators(0.5);

    // diagonal positive: m = n = z, psi = 0
    CartanISM c0;
    c0.ell = 0.4;
    c0.a = 0.9;
    Mat l0 = rebuild_ispin(c0, half);
    auto e0 = extract_ispin(l0);
    CHECK(e0.a == doctest::Approx(0.9).epsilon(1e-10));
    CHECK(e0.ell == doctest::Approx(0.4).epsilon(1e-10));
    CHECK(e0.residual < 1e-8);
    CHECK(e0.n_hat(2) == doctest::Approx(1.0));
    CHECK(e0.m_hat(2) == doctest::Approx(1.0));

    // unitary input: a = 0, ell = 0, gauge flagged
    const cxd mi(0.0, -1.0);
    Mat u = matrix_exp(mi * 0.7 * half.op("Jx")) * matrix_exp(mi * 0.3 * half.op("Jz"));
    auto eu = extract_ispin(u);
    CHECK(std::abs(eu.a) < 1e-8);
    CHECK(std::abs(eu.ell) < 1e-10);
    CHECK(eu.gauge_ambiguous);

    // random trajectory endpoints round-trip below 1e-8
    auto obs = std::vector<Mat>{half.op("Jx"), half.op("Jy"), half.op("Jz")};
    for (int t = 0; t < 25; ++t) {
        Rng rng = Rng::stream(112233, t);
        auto rec = pile_up(obs, 1.0, 1.0, 1e-3, rng);
        auto c = extract_ispin(true_kraus(rec));
        CHECK(c.residual <= 1e-8);
        CHECK(c.ell == doctest::Approx(1.0).epsilon(1e-9)); // ell_T = kappa T
        CHECK(c.a >= 0.0);
    }
}

TEST_CASE("ism full coordinate sde") {
    auto half = build_spin_operators(0.5);
    const double kappa = 1.0, T = 1.0;

    Rng rng(314);
    auto st = ism_full_sde(half, kappa, T, 1e-3, rng);
    CHECK(st.ell == doctest::Approx(kappa * T).epsilon(1e-12));
    CHECK(st.rotation_orthogonality_defect < 1e-10);
    CHECK((st.u.adjoint() * st.u - Mat::Identity(2, 2)).norm() < 1e-9);
    CHECK((st.v.adjoint() * st.v - Mat::Identity(2, 2)).norm() < 1e-9);

    // cross-validation against matrix pile-up under shared noise; the
    // discrepancy is intrinsically of strong order one half, so measure the
    // slope on the root-mean-square over several paths
    std::vector<Mat> obs = {half.op("Jx"), half.op("Jy"), half.op("Jz")};
    const int levels = 3, paths = 8;
    const double dt0 = 2e-3;
    std::vector<double> dts(levels);
    std::vector<double> sq(levels, 0.0);
    for (int p = 0; p < paths; ++p) {
        Rng nrng = Rng::stream(459, p);
        const int kf = static_cast<int>(std::lround(T / dt0)) << (levels - 1);
        std::vector<std::vector<double>> fine(kf, std::vector<double>(3));
        const double sf = std::sqrt(dt0 / (1 << (levels - 1)));
        for (auto& row : fine)
            for (double& v : row) v = sf * nrng.normal();
        for (int lev = 0; lev < levels; ++lev) {
            const int stride = 1 << (levels - 1 - lev);
            const int K = kf / stride;
            const double dt = T / K;
            std::vector<std::vector<double>> noise(K, std::vector<double>(3, 0.0));
            for (int k = 0; k < K; ++k)
                for (int s = 0; s < stride; ++s)
                    for (int m = 0; m < 3; ++m) noise[k][m] += fine[k * stride + s][m];
            PileUpOptions opt;
            opt.noise = &noise;
            opt.store_increments = false;
            Rng dummy(0);
            auto rec = pile_up(obs, kappa, T, dt, dummy, opt);
            auto stc = ism_full_sde(half, kappa, T, dt, dummy, &noise);
            Mat lc = rebuild_ism_partial(stc, half);
            Mat lp = true_kraus(rec);
            dts[lev] = dt;
            sq[lev] += std::pow((lc - lp).norm() / lp.norm(), 2);
        }
    }
    std::vector<double> rms(levels);
    for (int lev = 0; lev < levels; ++lev) rms[lev] = std::sqrt(sq[lev] / paths);
    CHECK(stats::loglog_slope(dts, rms) > 0.4);
    CHECK(rms.back() < rms.front());
}

TEST_CASE("kod histogram") {
    CHECK_THROWS_AS(kod_histogram({}, {}, {HistAxis{"a", 0, 1, 4}}), std::invalid_argument);

    std::vector<std::vector<double>> pts = {{0.05}, {0.15}, {0.95}};
    auto h = kod_histogram(pts, {}, {HistAxis{"a", 0.0, 1.0, 10}});
    CHECK(h.counts[0] == 1);
    CHECK(h.counts[1] == 1);
    CHECK(h.counts[9] == 1);
    CHECK(h.counts[5] == 0); // empty bin stays empty
    CHECK(h.total_count == 3);

    // density relative to a flat Haar weight is the ordinary density, and
    // re-binning leaves it consistent
    Rng rng(21);
    std::vector<std::vector<double>> gs;
    for (int i = 0; i < 200000; ++i) gs.push_back({rng.normal()});
    auto flat = [](const std::vector<double>&) { return 1.0; };
    auto h1 = kod_histogram(gs, {}, {HistAxis{"a", -1.0, 1.0, 20}});
    auto h2 = kod_histogram(gs, {}, {HistAxis{"a", -1.0, 1.0, 40}});
    const double d1 = h1.density_rel_haar(h1.flat_index({0.05}), flat);
    const double d2 = h2.density_rel_haar(h2.flat_index({0.05}), flat);
    CHECK(d1 == doctest::Approx(d2).epsilon(0.05));
}

TEST_CASE("collapse metrics") {
    auto fock = build_fock_operators(24);
    const cxd alpha(0.7, -0.4);
    Mat d = displacement(fock, alpha);
    Vec vac = Vec::Zero(24);
    vac(0) = 1.0;
    Vec coh = d * vac;
    Mat e = coh * coh.adjoint();
    auto m = collapse_metrics(e, fock);
    CHECK(m.purity == doctest::Approx(1.0).epsilon(1e-10));
    CHECK(m.top_fidelity == doctest::Approx(1.0).epsilon(1e-8));
    CHECK(std::abs(m.label_alpha - alpha) < 1e-8);
    CHECK_FALSE(m.ambiguous);

    // identity: purity 1/d and a flagged ambiguous top eigenvector
    auto one = build_spin_operators(1.0);
    auto mi = collapse_metrics(Mat::Identity(3, 3), one);
    CHECK(mi.purity == doctest::Approx(1.0 / 3.0));
    CHECK(mi.ambiguous);

    // spin-1 coherent state: fidelity 1 at the right direction
    const double th = 1.1, ph = -2.0;
    const cxd mic(0.0, -1.0);
    Vec e0 = Vec::Zero(3);
    e0(0) = 1.0;
    Vec sc = matrix_exp(mic * ph * one.op("Jz")) * (matrix_exp(mic * th * one.op("Jy")) * e0);
    auto ms = collapse_metrics(Mat(sc * sc.adjoint()), one);
    CHECK(ms.top_fidelity == doctest::Approx(1.0).epsilon(1e-6));
    Eigen::Vector3d want(std::sin(th) * std::cos(ph), std::sin(th) * std::sin(ph), std::cos(th));
    CHECK((ms.label_n - want).norm() < 1e-3);
}

TEST_CASE("completeness functional") {
    auto half = build_spin_operators(0.5);
    std::vector<Mat> obs = {half.op("Jx"), half.op("Jy"), half.op("Jz")};
    const int N = 2000;
    std::vector<TrajectoryRecord> ens(N);
    PileUpOptions opt;
    opt.store_increments = false;
    for (int i = 0; i < N; ++i) {
        Rng rng = Rng::stream(606060, i);
        ens[i] = pile_up(obs, 1.0, 1.0, 1e-3, rng, opt);
    }
    Rng boot(1);
    auto res = completeness_functional(ens, boot);
    CHECK(res.deviation < 5.0 * res.boot_sigma);

    // Born-rule ensembles are the wrong measure
    ens[0].sampling = SamplingKind::BornRule;
    CHECK_THROWS_AS(completeness_functional(ens, boot), std::invalid_argument);
}
