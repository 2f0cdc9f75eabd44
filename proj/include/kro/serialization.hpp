#pragma once

#include "kro/boundprop.hpp"
#include "kro/conformal.hpp"
#include "kro/controller.hpp"
#include "kro/dynamics.hpp"
#include "kro/koopman.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

namespace kro {

using Json = nlohmann::json;

// Non-finite doubles are written as the strings "inf", "-inf" and "nan" so
// that unbounded tubes survive a round trip.
Json number_to_json( double x );
double number_from_json( const Json &j );

Json vector_to_json( const Eigen::VectorXd &v );
Eigen::VectorXd vector_from_json( const Json &j );

/// Row-major nested arrays.
Json matrix_to_json( const Eigen::MatrixXd &m );
Eigen::MatrixXd matrix_from_json( const Json &j );

Json to_json( const Box &box );
Box box_from_json( const Json &j );

struct TrajectoryMeta
{
    std::string system;
    double dt = 0.0;
    std::optional<std::uint64_t> seed;
};

Json to_json( const Trajectory &traj, const TrajectoryMeta &meta );
Trajectory trajectory_from_json( const Json &j );

Json to_json( const ReferenceGeneratorConfig &cfg );
ReferenceGeneratorConfig generator_from_json( const Json &j );

Json to_json( const MlpNetwork &net );
MlpNetwork network_from_json( const Json &j );

Json to_json( const TrainingConfig &cfg );
TrainingConfig training_config_from_json( const Json &j, TrainingConfig base = {} );

Json to_json( const KoopmanModel &model );
KoopmanModel model_from_json( const Json &j );

Json to_json( const ReferencePlan &plan );
ReferencePlan plan_from_json( const Json &j );

Json to_json( const GainSchedule &gains );
GainSchedule gains_from_json( const Json &j );

Json to_json( const ReachTube &tube );
ReachTube tube_from_json( const Json &j );

Json to_json( const ConformalBounds &bounds );
ConformalBounds bounds_from_json( const Json &j );

/// 16 hex digits of FNV-1a over the compact dump. nlohmann objects keep
/// keys sorted, so equal content gives equal hashes.
std::string content_hash( const Json &j );

/// Throws MissingFile if absent, ValidationError if unparsable.
Json read_json( const std::filesystem::path &path );

/// Pretty-printed with a trailing newline; creates parent directories.
void write_json( const std::filesystem::path &path, const Json &j );

/// Columns t, lower_0, upper_0, lower_1, upper_1, ...
void write_tube_csv( const std::filesystem::path &path, const ReachTube &tube );

/// Columns t, x_0..x_{n-1}, u_0..u_{m-1} (controls empty on the last row).
void write_trajectory_csv( const std::filesystem::path &path, const Trajectory &traj );

void write_text( const std::filesystem::path &path, const std::string &text );

} // namespace kro
