#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace kro {

using StateVector = Eigen::VectorXd;
using ControlVector = Eigen::VectorXd;

/// Axis-aligned box Int(lower, upper). Bounds may be infinite (unbounded
/// tubes) but never NaN, and lower <= upper element-wise.
struct Box
{
    Eigen::VectorXd lower;
    Eigen::VectorXd upper;

    Box() = default;
    Box( Eigen::VectorXd lower, Eigen::VectorXd upper );

    /// The infinity-norm ball B_radius(center).
    static Box around( const Eigen::VectorXd &center, double radius );
    static Box around( const Eigen::VectorXd &center, const Eigen::VectorXd &radius );

    int dim() const
    {
        return static_cast<int>( lower.size() );
    }

    Eigen::VectorXd width() const
    {
        return upper - lower;
    }

    Eigen::VectorXd center() const
    {
        return 0.5 * ( lower + upper );
    }

    bool bounded() const
    {
        return lower.allFinite() && upper.allFinite();
    }

    bool contains( const Eigen::VectorXd &x, double slack = 0.0 ) const;

    /// Box scaled about its center by `factor` per dimension.
    Box scaled( double factor ) const;
};

/// Open-loop or closed-loop trajectory: states has one more entry than
/// controls. Decoded latent rollouts carry no controls.
struct Trajectory
{
    std::vector<StateVector> states;
    std::vector<ControlVector> controls;

    int horizon() const
    {
        return states.empty() ? 0 : static_cast<int>( states.size() ) - 1;
    }
};

struct PlanarQuadParams
{
    double mass = 0.5;
    double gravity = -9.81;
    double inertia_y = 0.01;
};

struct Quad3dParams
{
    double mass = 1.0;
    double gravity = -9.81;
    double inertia_x = 0.5;
    double inertia_y = 0.1;
    double inertia_z = 0.3;
};

inline constexpr double GIMBAL_LOCK_TOLERANCE = 1e-6;

/// Forward-Euler unicycle, state (px, py, heading), control (speed, turn rate).
StateVector step_unicycle( const StateVector &x, const ControlVector &u, double dt );

/// Forward-Euler planar quadcopter, state (px, pz, pitch, vx, vz, pitch rate),
/// control (thrust, torque).
StateVector step_planar_quad( const StateVector &x,
                              const ControlVector &u,
                              double dt,
                              const PlanarQuadParams &params = {} );

/// Forward-Euler 3D quadcopter. State layout follows the derivative rows:
/// (px, py, pz, yaw, pitch, roll, vx, vy, vz, p, q, r); control is
/// (thrust, roll moment, pitch moment, yaw moment). Throws GimbalLock when
/// |cos(pitch)| < GIMBAL_LOCK_TOLERANCE.
StateVector step_quad3d( const StateVector &x,
                         const ControlVector &u,
                         double dt,
                         const Quad3dParams &params = {} );

enum class SystemKind
{
    Unicycle,
    PlanarQuad,
    Quad3d,
    Linear,
};

/// A discrete-time plant x+ = f(x, u). The analytical benchmarks are
/// parameterized by named constants; `Linear` is a synthetic plant
/// x+ = A x + B u used for exact-Koopman sanity checks.
class DynamicsSystem
{
public:
    static DynamicsSystem unicycle( double dt = 0.1 );
    static DynamicsSystem planar_quad( double dt = 0.05, const PlanarQuadParams &params = {} );
    static DynamicsSystem quad3d( double dt = 0.025, const Quad3dParams &params = {} );
    static DynamicsSystem linear( const Eigen::MatrixXd &a, const Eigen::MatrixXd &b, double dt = 1.0 );

    /// "unicycle", "planar_quad" or "quad3d".
    static DynamicsSystem by_name( std::string_view name );

    SystemKind kind() const
    {
        return _kind;
    }
    const std::string &name() const
    {
        return _name;
    }
    int state_dim() const
    {
        return _n;
    }
    int control_dim() const
    {
        return _m;
    }
    double dt() const
    {
        return _dt;
    }
    const std::map<std::string, double> &params() const
    {
        return _params;
    }
    double param( const std::string &key ) const;

    const Eigen::MatrixXd &linear_a() const
    {
        return _a;
    }
    const Eigen::MatrixXd &linear_b() const
    {
        return _b;
    }

    /// Control that holds the attitude/velocity subsystem at rest (zero
    /// for systems without gravity).
    ControlVector hover_control() const;

    /// One step; rejects mismatched dimensions before evaluating.
    StateVector step( const StateVector &x, const ControlVector &u ) const;

private:
    DynamicsSystem() = default;

    SystemKind _kind = SystemKind::Unicycle;
    std::string _name;
    int _n = 0;
    int _m = 0;
    double _dt = 0.0;
    std::map<std::string, double> _params;
    Eigen::MatrixXd _a;
    Eigen::MatrixXd _b;
};

Trajectory rollout( const DynamicsSystem &system,
                    const StateVector &x0,
                    std::span<const ControlVector> controls );

/// Stand-in planner: smoothed uniformly random open-loop controls.
struct ReferenceGeneratorConfig
{
    std::uint64_t seed = 0;
    int smoothing_window = 1;
    Box control_bounds;
    Box initial_box;
    int horizon = 1;

    void validate( const DynamicsSystem &system ) const;

    /// Default sampling ranges for the named benchmark systems.
    static ReferenceGeneratorConfig defaults_for( const DynamicsSystem &system, int horizon );
};

/// Sample x0 uniformly from the initial box, sample per-step controls
/// uniformly within bounds, smooth with a centered moving average, clamp
/// and roll out. Deterministic in cfg.seed.
Trajectory generate_reference( const DynamicsSystem &system, const ReferenceGeneratorConfig &cfg );

/// N references with per-trajectory derived seeds.
std::vector<Trajectory> generate_dataset( const DynamicsSystem &system,
                                          const ReferenceGeneratorConfig &cfg,
                                          int count );

} // namespace kro
