#pragma once

#include "kro/boundprop.hpp"
#include "kro/conformal.hpp"
#include "kro/controller.hpp"
#include "kro/dynamics.hpp"
#include "kro/koopman.hpp"
#include "kro/serialization.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace kro {

/// Everything one run needs. Every field has a per-system default, so a
/// config file only lists what it changes.
struct ExperimentConfig
{
    std::string system = "unicycle";
    int horizon = 100;
    double delta = 0.1;
    double epsilon = 0.05; // per-dimension half-width of X0
    Architecture architecture;
    TrainingConfig training;
    int train_trajectories = 200;
    int train_horizon = 100;
    double lqr_q = 1.0;
    double lqr_r = 0.1;
    double lqr_q_terminal = 1.0;
    int k_cal = 100;
    int m_lambda = 50;
    int n_test = 200;
    double sigma = DEFAULT_SIGMA;
    std::uint64_t seed = 0;
    CalibrationMode mode = CalibrationMode::PerReference;
    std::string output_dir = "out";
    int plot_rollouts = 20;

    static ExperimentConfig defaults_for( const std::string &system );

    void validate() const;

    Json to_json() const;

    /// Unknown keys are rejected. Missing keys keep the system defaults;
    /// m_lambda defaults to K_cal / 2 when K_cal is given alone.
    static ExperimentConfig from_json( const Json &j );
    static ExperimentConfig load( const std::filesystem::path &path );

    /// Hash of the canonical JSON with output_dir left out.
    std::string hash() const;
};

/// Average over t of sum_j ln(width_tj), widths floored at 1e-12.
/// Repo convention; not comparable to published absolute volumes.
struct LogVolume
{
    double value = 0.0;
    bool unbounded = false;
};

LogVolume avg_log_volume( const ReachTube &tube );

inline constexpr double LOG_VOLUME_WIDTH_FLOOR = 1e-12;
inline constexpr const char *LOG_VOLUME_CONVENTION =
    "mean over t of sum_j ln(width); repo convention, not directly comparable to published absolutes";

struct PlotData
{
    std::optional<ReachTube> krs;
    std::optional<ReachTube> ckrs;
    std::optional<Trajectory> reference;
    std::vector<Trajectory> rollouts;
    std::vector<std::string> labels; // per state dimension, optional
    double dt = 1.0;
};

/// SVG 1.1 for state dimension `dim`. Pure function of its inputs.
std::string render_plot( const PlotData &data, int dim );

/// One file per state dimension, named <prefix>_x<j>.svg. Returns paths.
std::vector<std::filesystem::path> emit_plots( const PlotData &data,
                                               const std::filesystem::path &dir,
                                               const std::string &prefix = "tube" );

/// Model, reference plan and gains of one run.
struct Setup
{
    DynamicsSystem system;
    KoopmanModel model;
    ReferencePlan plan;
    GainSchedule gains;
    Box initial_set;
    std::string model_hash;
    std::string reference_id;
};

/// Dataset generation plus training, deterministic in config.seed.
KoopmanModel train_model( const ExperimentConfig &config );

/// Reference from the generator, its lifted plan and the LQR gains.
Setup prepare( const ExperimentConfig &config, KoopmanModel model );

/// Generator used for training data, references and offline calibration.
ReferenceGeneratorConfig generator_for( const ExperimentConfig &config, int horizon, std::uint64_t stream );

/// Identifies the sampling procedure shared by calibration and testing:
/// system, model, gains, epsilon and the reference (or the generator in
/// offline-global mode).
std::string sampling_hash( const ExperimentConfig &config, const Setup &setup );

/// Collects D_N and D_E and conformalizes at config.delta.
ConformalBounds calibrate( const ExperimentConfig &config, const Setup &setup );

/// KRS over B_epsilon(x_ref_0) with provenance filled in.
ReachTube reach( const Setup &setup );

/// Coverage of `tube` on fresh test rollouts. Refuses bounds calibrated
/// under a different sampling procedure.
CoverageResult verify( const ExperimentConfig &config, const Setup &setup, const ReachTube &tube, const ConformalBounds &bounds );

struct Timings
{
    double setup = 0.0;     // training or model load, plan, gains
    double cp = 0.0;        // calibration rollouts and quantile
    double krs = 0.0;       // bound propagation
    double inflate = 0.0;   // Minkowski inflation
    double coverage = 0.0;  // test rollouts
    double artifacts = 0.0; // writing files
    double total = 0.0;

    double parts() const
    {
        return setup + cp + krs + inflate + coverage + artifacts;
    }
};

struct RunReport
{
    std::string system;
    std::string config_hash;
    std::string model_hash;
    std::string reference_id;
    Timings timings;
    LogVolume krs_volume;
    LogVolume ckrs_volume;
    CoverageResult ckrs_coverage;
    CoverageResult krs_coverage;
    BetaPosterior posterior;
    double delta = 0.0;
    double quantile = 0.0;
    std::string calibration_mode;
    bool meets_target = false;
    std::vector<std::string> artifacts;

    Json to_json() const;
    static RunReport from_json( const Json &j );
};

/// Train (or load out/model.json when present), then plan, calibrate,
/// reach, inflate, test and write every artifact into config.output_dir.
/// Errors are rethrown with the failing stage in the message.
RunReport run_pipeline( const ExperimentConfig &config );

/// Artifact file names inside the output directory.
namespace artifact {
inline constexpr const char *MODEL = "model.json";
inline constexpr const char *PLAN = "plan.json";
inline constexpr const char *GAINS = "gains.json";
inline constexpr const char *REFERENCE = "reference.json";
inline constexpr const char *REFERENCE_CSV = "reference.csv";
inline constexpr const char *BOUNDS = "bounds.json";
inline constexpr const char *KRS = "krs.json";
inline constexpr const char *CKRS = "ckrs.json";
inline constexpr const char *KRS_CSV = "krs.csv";
inline constexpr const char *CKRS_CSV = "ckrs.csv";
inline constexpr const char *REPORT = "report.json";
inline constexpr const char *PLOTS = "plots";
} // namespace artifact

/// Command-line entry point: train, calibrate, reach, verify, report, run.
int cli( int argc, char **argv );

} // namespace kro
