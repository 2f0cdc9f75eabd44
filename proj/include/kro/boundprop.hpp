#pragma once

#include "kro/controller.hpp"
#include "kro/dynamics.hpp"
#include "kro/koopman.hpp"
#include "kro/mlp.hpp"

#include <Eigen/Dense>

#include <optional>
#include <string>
#include <vector>

namespace kro {

/// Affine functions lower(s) = lower_weight s + lower_bias and
/// upper(s) = upper_weight s + upper_bias that sandwich a graph's output
/// element-wise for every s in input_box.
struct AffineBoundPair
{
    Eigen::MatrixXd lower_weight;
    Eigen::VectorXd lower_bias;
    Eigen::MatrixXd upper_weight;
    Eigen::VectorXd upper_bias;
    Box input_box;

    int input_dim() const
    {
        return static_cast<int>( lower_weight.cols() );
    }
    int output_dim() const
    {
        return static_cast<int>( lower_weight.rows() );
    }

    Eigen::VectorXd lower_at( const Eigen::VectorXd &s ) const
    {
        return lower_weight * s + lower_bias;
    }
    Eigen::VectorXd upper_at( const Eigen::VectorXd &s ) const
    {
        return upper_weight * s + upper_bias;
    }

    /// Both bounds equal to the affine map M s + c.
    static AffineBoundPair exact( const Eigen::MatrixXd &m, const Eigen::VectorXd &c, const Box &box );
};

/// Lines sandwiching ReLU on a pre-activation interval.
struct ReluRelaxation
{
    double lower_slope = 0.0;
    double lower_intercept = 0.0;
    double upper_slope = 0.0;
    double upper_intercept = 0.0;
};

/// Stable neurons are exact. Unstable ones get the chord as the upper line
/// and slope 1 or 0 (whichever side of the interval is longer) below.
ReluRelaxation relu_relax( double lower, double upper );

/// Back-substitution bounds of a ReLU network over a box. Pre-activation
/// intervals of every hidden layer come from back-substituting to the input.
/// Throws UnsupportedActivation for GELU.
AffineBoundPair bound_network( const MlpNetwork &net, const Box &input_box );

/// Closed-form min of the lower function and max of the upper function
/// over a box.
Box concretize( const AffineBoundPair &bounds, const Box &box );

/// Bounds on M g(s) + c given bounds on g(s).
AffineBoundPair compose_linear( const AffineBoundPair &bounds, const Eigen::MatrixXd &m, const Eigen::VectorXd &c );

/// Bounds on outer(inner(s)) given bounds of `outer` valid over its input
/// box and bounds of `inner` whose range lies inside that box.
AffineBoundPair compose_bounds( const AffineBoundPair &outer, const AffineBoundPair &inner );

enum class TubeKind
{
    KRS,
    CKRS,
};

std::string to_string( TubeKind kind );
TubeKind tube_kind_from_string( const std::string &name );

struct TubeProvenance
{
    std::string reference_id;
    std::string model_hash;
    std::optional<double> delta;    // CKRS only
    std::optional<double> quantile; // C, CKRS only
    std::string calibration_mode;   // CKRS only
    bool unbounded = false;
};

/// One box per timestep t = 0..T.
struct ReachTube
{
    std::vector<Box> boxes;
    TubeKind kind = TubeKind::KRS;
    TubeProvenance provenance;

    int horizon() const
    {
        return static_cast<int>( boxes.size() ) - 1;
    }
    int state_dim() const
    {
        return boxes.empty() ? 0 : boxes.front().dim();
    }
    bool contains( const Trajectory &traj, double slack = 0.0 ) const;
};

struct KrsResult
{
    ReachTube tube;
    std::vector<Box> latent_boxes;                // t = 0..T
    std::vector<AffineBoundPair> latent_bounds;   // z_t affine in x0, t = 0..T
};

/// Koopman reachable set of the decoded closed loop from every x0 in the
/// initial set. The encoder is relaxed once over the initial set, the
/// closed-loop latent map is carried exactly, and the decoder is relaxed
/// per step over the concretized latent box.
KrsResult compute_krs_detailed( const KoopmanModel &model,
                                const ReferencePlan &plan,
                                const GainSchedule &gains,
                                const Box &initial_set );

ReachTube compute_krs( const KoopmanModel &model,
                       const ReferencePlan &plan,
                       const GainSchedule &gains,
                       const Box &initial_set );

} // namespace kro
