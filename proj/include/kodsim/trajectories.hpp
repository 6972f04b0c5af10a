#pragma once

#include <functional>
#include <optional>
#include <vector>

#include "kodsim/kernels.hpp"
#include "kodsim/linalg.hpp"
#include "kodsim/rng.hpp"

namespace kodsim {

enum class SamplingKind { Wiener, BornRule };
enum class IntegratorKind { ExactExponentialStep, EulerIto, MMCSD };

struct DegenerateTrajectoryError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// A finite-time instrument trajectory.  The accumulated Kraus operator is
// e^{log_norm} * kraus with ||kraus||_2 = 1, which keeps the matrix away from
// under/overflow when kappa*T >> 1.
struct TrajectoryRecord {
    double kappa = 0.0, T = 0.0, dt = 0.0;
    std::vector<std::vector<double>> increments; // per step, one dW per observable
    Mat kraus;
    double log_norm = 0.0;
    SamplingKind sampling = SamplingKind::Wiener;
    double min_rel_sv = 1.0; // condition tracking along the path
};

struct PileUpOptions {
    IntegratorKind integrator = IntegratorKind::ExactExponentialStep;
    SamplingKind sampling = SamplingKind::Wiener;
    Mat rho0;                    // BornRule only: initial state driving outcome means
    bool store_increments = true;
    int cond_check_interval = 64;
    // relative smallest singular value below which a trajectory counts as
    // degenerate; truncated Fock pile-ups legitimately compress the deep
    // levels and run with a far smaller threshold
    double min_rel_sv_abort = 1e-12;
    // replay a fixed noise path instead of sampling (values in sqrt(time) units)
    const std::vector<std::vector<double>>* noise = nullptr;
};

TrajectoryRecord pile_up(const std::vector<Mat>& obs, double kappa, double T, double dt,
                         Rng& rng, const PileUpOptions& opt = {});

struct StateTrajectory {
    std::vector<Mat> states; // includes rho_0 at index 0
    bool normalized = false;
    std::vector<std::vector<double>> innovations; // SME mode only
};

// Unnormalized linear-SDE evolution rho~_{t+dt} = L_dt rho~_t L_dt^dag by
// replaying a recorded trajectory's increments.
StateTrajectory evolve_linear_state(const Mat& rho0, const std::vector<Mat>& obs,
                                    const TrajectoryRecord& rec);

// Normalized stochastic-master-equation evolution with Born-rule outcome
// sampling.  Each step applies the exact incremental Kraus operator and
// renormalizes, which realizes the SME to O(dt) while preserving positivity
// and (for a single branch) purity.
StateTrajectory evolve_sme(const Mat& rho0, const std::vector<Mat>& obs, double kappa,
                           double T, double dt, Rng& rng, bool store_states = true);

struct BornIncrementReport {
    std::vector<double> empirical_mean, expected_mean, mean_z; // per component
    std::vector<double> second_moment, second_moment_z;        // diagonal mu=nu
    double max_cross_z = 0.0;
};

BornIncrementReport born_increment_mean_check(const Mat& rho, const std::vector<Mat>& obs,
                                              double kappa, double dt, int n_samples,
                                              Rng& rng);

struct TransitionEstimate {
    double est_wiener = 0.0, err_wiener = 0.0;
    double est_born = 0.0, err_born = 0.0;
    double ess = 0.0;
    bool ess_warning = false;
};

// Appendix-B style check that the Wiener-weighted and Born-sampled estimators
// of E[f(rho_final)] agree.  f maps a normalized density matrix to a real.
TransitionEstimate transition_estimators_agree(const Mat& rho0,
                                               const std::function<double(const Mat&)>& f,
                                               const std::vector<Mat>& obs, double kappa,
                                               double T, double dt, int n_traj,
                                               uint64_t master_seed);

// || L_exact(dt_k) - L_euler(dt_k) || under a shared Brownian path refined
// across levels; dts[k] = dt0 / 2^k.
std::vector<double> integrator_consistency(const std::vector<Mat>& obs, double kappa,
                                           double T, double dt0, int levels,
                                           uint64_t seed);

} // namespace kodsim
