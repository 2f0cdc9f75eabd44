#pragma once

#include "kro/boundprop.hpp"
#include "kro/controller.hpp"
#include "kro/dynamics.hpp"
#include "kro/koopman.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <variant>
#include <vector>

namespace kro {

/// e(t, j) = x_t[j] - x_hat_t[j]; one row per timestep 0..T.
using ErrorTrajectory = Eigen::MatrixXd;

enum class CalibrationMode
{
    PerReference,
    OfflineGlobal,
};

std::string to_string( CalibrationMode mode );
CalibrationMode calibration_mode_from_string( const std::string &name );

/// A fixed reference (per-reference mode) or a reference distribution
/// sampled afresh for every trajectory (offline-global mode).
using CalibrationSource = std::variant<ReferencePlan, ReferenceGeneratorConfig>;

/// Paired closed-loop rollouts from one draw of (reference, x0).
struct ClosedLoopSample
{
    ReferencePlan plan;
    Trajectory true_rollout;
    Trajectory decoded_rollout;
    ErrorTrajectory error;
};

/// The one sampling procedure shared by calibration and testing: pick the
/// reference (fixed, or drawn from the generator), draw x0 uniformly from
/// B_epsilon(x_ref_0), and roll out the decoded latent loop and the true
/// plant under the same gains. Deterministic in `seed`. Non-finite error
/// entries (a diverged plant) are stored as +inf.
ClosedLoopSample sample_closed_loop( const DynamicsSystem &system,
                                     const KoopmanModel &model,
                                     const CalibrationSource &source,
                                     const GainSchedule &gains,
                                     double epsilon,
                                     std::uint64_t seed );

struct CalibrationSettings
{
    int k_cal = 100;
    int m_lambda = 50;
    double epsilon = 0.1;
    std::uint64_t seed = 0;

    void validate() const;
};

struct CalibrationData
{
    std::vector<ErrorTrajectory> scoring;       // D_E, K_cal entries
    std::vector<ErrorTrajectory> normalization; // D_N, M_lambda entries
    CalibrationMode mode = CalibrationMode::PerReference;
};

/// D_E and D_N come from separate seed streams, so they never share a draw.
CalibrationData collect_calibration( const DynamicsSystem &system,
                                     const KoopmanModel &model,
                                     const CalibrationSource &source,
                                     const GainSchedule &gains,
                                     const CalibrationSettings &settings );

struct NormalizationWeights
{
    Eigen::MatrixXd lambda; // 1 / (e_max + sigma)
    Eigen::MatrixXd e_max;
    double sigma = 1e-3;
};

inline constexpr double DEFAULT_SIGMA = 1e-3;

NormalizationWeights normalization_weights( std::span<const ErrorTrajectory> normalization, double sigma = DEFAULT_SIGMA );

/// R_i = max over (t, j) of lambda(t, j) |e_i(t, j)|, or +inf for a diverged
/// trajectory. Non-finite entries are skipped when fitting e_max.
std::vector<double> nonconformity_scores( std::span<const ErrorTrajectory> scoring, const Eigen::MatrixXd &lambda );

/// Rank p = ceil((K + 1)(1 - delta)) computed with a 1e-9 guard against
/// float noise in the product (e.g. 10 * 0.9 landing just above 9).
int conformal_rank( int k_cal, double delta );

/// p-th smallest score, or +inf when p > K (the implicit sentinel).
double conformal_quantile( std::span<const double> scores, double delta );

/// e_bar = C / lambda; C = +inf gives infinite bounds.
Eigen::MatrixXd error_bounds( double c, const Eigen::MatrixXd &lambda );

struct ConformalBounds
{
    Eigen::MatrixXd e_bar;
    double c = 0.0;
    double delta = 0.1;
    int k_cal = 0;
    int m_lambda = 0;
    CalibrationMode mode = CalibrationMode::PerReference;
    NormalizationWeights weights;
    std::vector<double> scores;
    std::string config_hash;

    bool unbounded() const;
};

/// Weights from D_N, scores from D_E, quantile and bounds.
ConformalBounds conformalize( const CalibrationData &data, double delta, double sigma = DEFAULT_SIGMA );

/// Rebuild C and e_bar for a new delta from the stored scores and weights.
ConformalBounds with_delta( const ConformalBounds &bounds, double delta );

/// Minkowski sum of each KRS box with the box of radii e_bar(t, :).
ReachTube inflate( const ReachTube &krs, const ConformalBounds &bounds );
ReachTube inflate( const ReachTube &krs, const Eigen::MatrixXd &e_bar );

struct CoverageResult
{
    int successes = 0;
    int trials = 0;

    double fraction() const
    {
        return trials == 0 ? 0.0 : static_cast<double>( successes ) / trials;
    }
};

/// Fraction of fresh true-plant rollouts that stay in `tube` at every
/// timestep, for a fixed reference plan. Diverged rollouts count as misses.
CoverageResult empirical_coverage( const DynamicsSystem &system,
                                   const KoopmanModel &model,
                                   const ReferencePlan &plan,
                                   const GainSchedule &gains,
                                   const ReachTube &tube,
                                   int n_test,
                                   double epsilon,
                                   std::uint64_t seed );

/// Generator variant: every test draws its own reference, and its tube is
/// built by `tube_for` (e.g. a fresh KRS inflated by offline bounds).
CoverageResult empirical_coverage( const DynamicsSystem &system,
                                   const KoopmanModel &model,
                                   const ReferenceGeneratorConfig &generator,
                                   const GainSchedule &gains,
                                   const std::function<ReachTube( const ReferencePlan & )> &tube_for,
                                   int n_test,
                                   double epsilon,
                                   std::uint64_t seed );

/// True-plant rollouts used for plotting; same draw procedure as testing.
std::vector<Trajectory> sample_true_rollouts( const DynamicsSystem &system,
                                              const KoopmanModel &model,
                                              const ReferencePlan &plan,
                                              const GainSchedule &gains,
                                              double epsilon,
                                              int count,
                                              std::uint64_t seed );

struct BetaPosterior
{
    double alpha = 1.0;
    double beta = 1.0;
    double mode = 0.5;
    double mean = 0.5;
    double variance = 1.0 / 12.0;
};

/// Beta(s + 1, n - s + 1). The mode is s / n, and 0.5 for n = 0 where the
/// uniform posterior has no unique mode.
BetaPosterior beta_posterior( int successes, int trials );

} // namespace kro
