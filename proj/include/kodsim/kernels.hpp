#pragma once

#include <vector>

#include "kodsim/linalg.hpp"
#include "kodsim/rng.hpp"

namespace kodsim {

struct WienerIncrement {
    std::vector<double> values; // units sqrt(time)
    double dt = 0.0;
};

enum class UnravelingKind { WienerGaussian, StochasticUnitary, Jump };

struct KrausIncrement {
    Mat matrix;
    Mat generator; // forward generator delta; matrix = exp(generator) for the
                   // WienerGaussian and StochasticUnitary kinds
    UnravelingKind kind;
};

WienerIncrement sample_wiener(int n, double dt, Rng& rng);

// delta = sum_mu X_mu sqrt(kappa) dW^mu - X^2 kappa dt;  returns e^delta.
KrausIncrement kraus_increment(const std::vector<Mat>& obs, const WienerIncrement& dw,
                               double kappa);

// e^{-i X.sqrt(kappa) dW}, unitary.
KrausIncrement stochastic_unitary_increment(const std::vector<Mat>& obs,
                                            const WienerIncrement& dw, double kappa);

// K_0 = e^{-(kappa dt/2) X^2}; K_mu = sqrt(kappa dt) X_mu.
std::vector<KrausIncrement> jump_kraus(const std::vector<Mat>& obs, double kappa, double dt);

// Unconditional incremental operation for one unraveling.
//  - WienerGaussian: the analytic Gaussian integral, e^{-(kappa dt/2) sum ad^2}
//  - StochasticUnitary: outcome integral by tensor Gauss-Hermite quadrature
//  - Jump: sum over the Kraus set
// All three agree pairwise to O((kappa dt)^2).
Superop incremental_channel(const std::vector<Mat>& obs, double kappa, double dt,
                            UnravelingKind kind, int quad_nodes = 24);

// probabilists' Gauss-Hermite rule for N(0, var): sum_i w_i f(x_i)
void gauss_hermite(int n, double var, std::vector<double>& nodes, std::vector<double>& weights);

// ---------------------------------------------------------------------------
// Gaussian meter model (explicit system (x) meter computation)
// ---------------------------------------------------------------------------
enum class MeterRegister { Position, Momentum, Number };

struct MeterReport {
    // max-entry deviation of the registered Kraus family from its analytic form
    double max_deviation = 0.0;
    // Number register only: norm of the two-quantum amplitude <2|U|0>
    double two_quantum_norm = 0.0;
    int meter_levels = 0;
    int grid_points = 0;
};

// Couples X to a Gaussian meter with H dt = 2 sqrt(kappa dt) X (x) sigma P,
// registers the meter, and compares against the analytic Kraus families:
// Position -> e^{X sqrt(kappa) dW - X^2 kappa dt} under the Wiener measure,
// Momentum -> e^{-i X sqrt(kappa) dW}, Number -> the jump pair {K0, K1}.
MeterReport verify_meter_model(const Mat& x, MeterRegister reg, double kappa, double dt,
                               int meter_levels = 48, int grid_points = 2048);

} // namespace kodsim
