#pragma once

#include <array>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "kodsim/linalg.hpp"
#include "kodsim/rng.hpp"
#include "kodsim/trajectories.hpp"

namespace kodsim {

// ---------------------------------------------------------------------------
// Case 1: single observable, G = {e^{-X^2 r + X a}}, Haar = dr da
// ---------------------------------------------------------------------------
struct CartanSingle {
    double r = 0.0;
    double a = 0.0;
};

struct AnalyticKodSingle {
    double r;      // delta support, r = kappa T
    double mean_a; // 0
    double var_a;  // kappa T
    double pdf(double a) const;
    double cdf(double a) const;
};

AnalyticKodSingle analytic_kod_single(double kappa, double T);

// Solve log L = -lambda^2 r + lambda a per eigenvalue (least squares).
CartanSingle extract_single(const TrajectoryRecord& rec, const std::vector<double>& spectrum);

// ---------------------------------------------------------------------------
// Case 2: SPQM on the instrumental Weyl-Heisenberg group
// x = (D_beta e^{i phi}) e^{-Ho r - ell} D_alpha^{-1}
// ---------------------------------------------------------------------------
struct CartanIWH {
    cxd beta{0.0, 0.0};
    double phi = 0.0;
    double r = 0.0;
    double ell = 0.0;
    cxd alpha{0.0, 0.0};
    double residual = 0.0; // relative rebuild residual
};

struct SpqmPath {
    std::vector<double> t;
    std::vector<double> r, ell, phi;
    std::vector<cxd> beta, alpha;
};

// Ito-form Cartan-coordinate SDEs for SPQM.  The identity start is a
// coordinate singularity; the first step is taken analytically with
// r_dt = 2 kappa dt and beta, alpha, ell, phi starting at zero.  When
// `tilted`, the e^{-2 ell} reduced-distribution weight is absorbed into a
// Girsanov drift so the ensemble samples the weighted law directly.
SpqmPath spqm_coordinate_sde(double kappa, double T, double dt, Rng& rng,
                             const std::vector<std::array<double, 2>>* noise = nullptr,
                             bool tilted = false, bool store_path = false);

struct SpqmReducedSample {
    cxd u;         // beta_T - alpha_T
    double ell;    // center coordinate along the sampled path
    double weight; // e^{-2 ell} for plain Wiener sampling, 1 when tilted
};

std::vector<SpqmReducedSample> spqm_reduced_ensemble(double kappa, double T, double dt,
                                                     int n_traj, uint64_t master_seed,
                                                     bool tilted = true);

inline double spqm_sigma(double kT) { return kT - std::tanh(kT); }

// Displacement operator on a truncated Fock space.
Mat displacement(const Representation& fock, cxd gamma);

Mat rebuild_iwh(const CartanIWH& c, const Representation& fock);

// Fit L ~ e^{i phi - ell} D_beta e^{-r Ho} D_alpha^dag.  Throws when the
// truncation corner carries weight or the rebuild residual is above 1e-6.
CartanIWH extract_iwh(const Mat& l, const Representation& fock);

// Max finite-difference residual of the reduced FPKE applied to the analytic
// reduced distribution, sampled over an (r, beta-alpha) box at time T; h is
// the stencil width.  Second-order: halving h quarters the result.
double reduced_spqm_pde_residual(double kappa, double T, double h);

// Same operator applied to a constant test function; stays away from zero.
double reduced_spqm_pde_residual_negative_control(double kappa, double T, double h);

struct PartitionCheck {
    double lhs = 0.0, rhs = 0.0, rel_err = 0.0;
    bool truncation_ok = false;
};

// sum_n e^{-4 kT (n+1/2)} against 1/(2 sinh 2 kT)
PartitionCheck partition_function_check(double kT, int n_cut);

// ---------------------------------------------------------------------------
// Case 3: ISM on the instrumental spin group
// x = (D_m e^{-i Jz psi}) e^{-J^2 ell + Jz a} D_n^{-1}
// ---------------------------------------------------------------------------

// da = kappa coth(a) dt + sqrt(kappa) dY^z with reflection at 0; the drift
// substep uses the exact flow cosh(a') = cosh(a) e^{kappa dt}.  The first
// step from a=0 draws the reflected Gaussian |sqrt(kappa) dW|.
double ism_radial_sde(double kappa, double T, double dt, Rng& rng, double a0 = 0.0,
                      const std::vector<double>* noise = nullptr);

struct RadialDensity {
    std::vector<double> a;   // cell centers
    std::vector<double> p;   // P(a), normalized against da
    double h = 0.0;
    double norm = 0.0;
    double boundary_mass = 0.0; // mass in the top 5% of the grid
    double cdf(double a) const;
    double mean() const;
    double variance() const;
};

// Crank-Nicolson finite-volume solve of the radial FPKE
// dP/dt = kappa (-d/da coth(a) + 1/2 d^2/da^2) P with zero-flux boundaries.
// Starts at t = dt from the half-normal first-step law.
RadialDensity ism_radial_fpke(double kappa, double T, double dt, double a_min, double a_max,
                              int n_cells, bool drift_on = true);

struct CartanISM {
    Eigen::Vector3d m_hat{0, 0, 1};
    double psi = 0.0;
    double ell = 0.0;
    double a = 0.0;
    Eigen::Vector3d n_hat{0, 0, 1};
    double residual = 0.0;
    bool gauge_ambiguous = false;
    // The angle branches (-pi, pi] fix one of the two SU(2) preimages; the
    // input is cover_sign times the rebuild.  +-L weave the same instrument
    // element.
    int cover_sign = 1;
};

struct IsmCoordinateState {
    double ell = 0.0;
    double a = 0.0;
    Mat u, v; // past and future unitaries of x = V e^{Jz a - J2 ell} U
    double rotation_orthogonality_defect = 0.0;
    double switch_time = 0.0; // end of the exact near-identity segment
};

// Integrates the ISM MMCSD coordinate equations with in-situ rotated
// increments dY = R^{-1} dW, R read off the future unitary V.  The identity
// sits at the a = 0 coordinate singularity where the gauge directions are
// undefined; until the ruler reaches a_switch the group element is advanced
// exactly (the Cartan factors come from its SVD, which is exact for ISpin(3)
// elements), after which the printed MMCSDs take over.
IsmCoordinateState ism_full_sde(const Representation& spin, double kappa, double T, double dt,
                                Rng& rng, const std::vector<std::vector<double>>* noise = nullptr,
                                double a_switch = 0.75);

Mat rebuild_ism_partial(const IsmCoordinateState& st, const Representation& spin);

Mat rebuild_ispin(const CartanISM& c, const Representation& spin_half);

// Cartan extraction for spin-1/2; round-trip residual <= 1e-8.
CartanISM extract_ispin(const Mat& l);

// ---------------------------------------------------------------------------
// Histograms, collapse metrics, completeness
// ---------------------------------------------------------------------------
struct HistAxis {
    std::string name;
    double lo = 0.0, hi = 1.0;
    int bins = 1;
};

struct KodHistogram {
    std::vector<HistAxis> axes;
    std::vector<double> weights; // accumulated sample weight per flat bin index
    std::vector<long> counts;
    double total_weight = 0.0;
    long total_count = 0;
    long out_of_range = 0;

    long flat_index(const std::vector<double>& coords) const; // -1 if outside
    void add(const std::vector<double>& coords, double w);
    double bin_volume() const;
    // density relative to the supplied Haar density at the bin center
    double density_rel_haar(long flat, const std::function<double(const std::vector<double>&)>&
                                           haar_density) const;
    std::vector<double> bin_center(long flat) const;
};

KodHistogram kod_histogram(const std::vector<std::vector<double>>& samples,
                           const std::vector<double>& weights, std::vector<HistAxis> axes);

struct CollapseMetrics {
    double purity = 0.0;
    double top_fidelity = 0.0;
    cxd label_alpha{0.0, 0.0};          // Fock
    Eigen::Vector3d label_n{0, 0, 1};   // Spin
    bool ambiguous = false;
};

CollapseMetrics collapse_metrics(const Mat& e, const Representation& rep);

struct CompletenessResult {
    double deviation = 0.0;  // || mean(e^{2 log_norm} kraus^dag kraus) - 1 ||_F
    double boot_sigma = 0.0; // bootstrap standard error, Frobenius-aggregated
    int n = 0;
};

// Wiener-sampled ensembles only; Born-rule input is a wrong-measure error.
CompletenessResult completeness_functional(const std::vector<TrajectoryRecord>& ensemble,
                                           Rng& boot_rng, int resamples = 200);

} // namespace kodsim
