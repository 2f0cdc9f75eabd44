#include "kro/dynamics.hpp"

#include "kro/error.hpp"
#include "kro/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

namespace kro {

namespace {

void require_dim( const Eigen::VectorXd &v, int expected, const char *what )
{
    if ( v.size() != expected )
    {
        std::ostringstream msg;
        msg << what << ": expected dimension " << expected << ", got " << v.size();
        throw DimensionMismatch( msg.str() );
    }
}

} // namespace

Box::Box( Eigen::VectorXd lower_, Eigen::VectorXd upper_ )
    : lower( std::move( lower_ ) )
    , upper( std::move( upper_ ) )
{
    if ( lower.size() != upper.size() )
        throw DimensionMismatch( "Box: lower and upper differ in dimension" );
    for ( Eigen::Index i = 0; i < lower.size(); ++i )
    {
        if ( std::isnan( lower[i] ) || std::isnan( upper[i] ) || lower[i] > upper[i] )
            throw ValidationError( "Box: requires lower <= upper element-wise" );
    }
}

Box Box::around( const Eigen::VectorXd &center, double radius )
{
    return around( center, Eigen::VectorXd::Constant( center.size(), radius ) );
}

Box Box::around( const Eigen::VectorXd &center, const Eigen::VectorXd &radius )
{
    if ( ( radius.array() < 0.0 ).any() )
        throw ValidationError( "Box::around: negative radius" );
    return Box( center - radius, center + radius );
}

bool Box::contains( const Eigen::VectorXd &x, double slack ) const
{
    require_dim( x, dim(), "Box::contains" );
    for ( Eigen::Index i = 0; i < x.size(); ++i )
    {
        if ( !( x[i] >= lower[i] - slack && x[i] <= upper[i] + slack ) )
            return false;
    }
    return true;
}

Box Box::scaled( double factor ) const
{
    const Eigen::VectorXd c = center();
    const Eigen::VectorXd half = 0.5 * factor * width();
    return Box( c - half, c + half );
}

StateVector step_unicycle( const StateVector &x, const ControlVector &u, double dt )
{
    require_dim( x, 3, "step_unicycle state" );
    require_dim( u, 2, "step_unicycle control" );
    StateVector next( 3 );
    next[0] = x[0] + dt * u[0] * std::cos( x[2] );
    next[1] = x[1] + dt * u[0] * std::sin( x[2] );
    next[2] = x[2] + dt * u[1];
    return next;
}

StateVector step_planar_quad( const StateVector &x,
                              const ControlVector &u,
                              double dt,
                              const PlanarQuadParams &p )
{
    require_dim( x, 6, "step_planar_quad state" );
    require_dim( u, 2, "step_planar_quad control" );
    if ( !( p.mass > 0.0 ) || !( p.inertia_y > 0.0 ) )
        throw ValidationError( "step_planar_quad: mass and inertia must be positive" );

    StateVector xdot( 6 );
    xdot[0] = x[3];
    xdot[1] = x[4];
    xdot[2] = x[5];
    xdot[3] = -u[0] / p.mass * std::sin( x[2] );
    xdot[4] = p.gravity + u[0] / p.mass * std::cos( x[2] );
    xdot[5] = u[1] / p.inertia_y;
    return x + dt * xdot;
}

StateVector step_quad3d( const StateVector &x,
                         const ControlVector &u,
                         double dt,
                         const Quad3dParams &p )
{
    require_dim( x, 12, "step_quad3d state" );
    require_dim( u, 4, "step_quad3d control" );

    const double yaw = x[3];
    const double pitch = x[4];
    const double roll = x[5];
    const double rp = x[9];
    const double rq = x[10];
    const double rr = x[11];

    const double cpitch = std::cos( pitch );
    if ( std::abs( cpitch ) < GIMBAL_LOCK_TOLERANCE )
        throw GimbalLock( "step_quad3d: |cos(pitch)| below tolerance" );

    const double sroll = std::sin( roll );
    const double croll = std::cos( roll );
    const double syaw = std::sin( yaw );
    const double cyaw = std::cos( yaw );
    const double spitch = std::sin( pitch );
    const double tpitch = spitch / cpitch;
    const double thrust = u[0] / p.mass;

    StateVector xdot( 12 );
    xdot[0] = x[6];
    xdot[1] = x[7];
    xdot[2] = x[8];
    xdot[3] = rq * sroll / cpitch + rr * croll / cpitch;
    xdot[4] = rq * croll - rr * sroll;
    xdot[5] = rp + rq * sroll * tpitch + rr * croll * tpitch;
    xdot[6] = thrust * ( sroll * syaw + croll * cyaw * spitch );
    xdot[7] = thrust * ( cyaw * sroll - croll * syaw * spitch );
    xdot[8] = p.gravity + thrust * croll * cpitch;
    xdot[9] = ( p.inertia_y - p.inertia_z ) / p.inertia_x * rq * rr + u[1] / p.inertia_x;
    xdot[10] = ( p.inertia_z - p.inertia_x ) / p.inertia_y * rp * rr + u[2] / p.inertia_y;
    xdot[11] = ( p.inertia_x - p.inertia_y ) / p.inertia_z * rp * rq + u[3] / p.inertia_z;
    return x + dt * xdot;
}

DynamicsSystem DynamicsSystem::unicycle( double dt )
{
    if ( !( dt > 0.0 ) )
        throw ValidationError( "dt must be positive" );
    DynamicsSystem s;
    s._kind = SystemKind::Unicycle;
    s._name = "unicycle";
    s._n = 3;
    s._m = 2;
    s._dt = dt;
    return s;
}

DynamicsSystem DynamicsSystem::planar_quad( double dt, const PlanarQuadParams &params )
{
    if ( !( dt > 0.0 ) )
        throw ValidationError( "dt must be positive" );
    if ( !( params.mass > 0.0 ) || !( params.inertia_y > 0.0 ) )
        throw ValidationError( "planar_quad: mass and inertia must be positive" );
    DynamicsSystem s;
    s._kind = SystemKind::PlanarQuad;
    s._name = "planar_quad";
    s._n = 6;
    s._m = 2;
    s._dt = dt;
    s._params = { { "mass", params.mass }, { "gravity", params.gravity }, { "inertia_y", params.inertia_y } };
    return s;
}

DynamicsSystem DynamicsSystem::quad3d( double dt, const Quad3dParams &params )
{
    if ( !( dt > 0.0 ) )
        throw ValidationError( "dt must be positive" );
    if ( !( params.mass > 0.0 ) || !( params.inertia_x > 0.0 ) || !( params.inertia_y > 0.0 ) ||
         !( params.inertia_z > 0.0 ) )
        throw ValidationError( "quad3d: mass and inertias must be positive" );
    DynamicsSystem s;
    s._kind = SystemKind::Quad3d;
    s._name = "quad3d";
    s._n = 12;
    s._m = 4;
    s._dt = dt;
    s._params = { { "mass", params.mass },
                  { "gravity", params.gravity },
                  { "inertia_x", params.inertia_x },
                  { "inertia_y", params.inertia_y },
                  { "inertia_z", params.inertia_z } };
    return s;
}

DynamicsSystem DynamicsSystem::linear( const Eigen::MatrixXd &a, const Eigen::MatrixXd &b, double dt )
{
    if ( a.rows() != a.cols() || b.rows() != a.rows() || a.rows() < 1 || b.cols() < 1 )
        throw DimensionMismatch( "linear plant: A must be n x n and B n x m" );
    if ( !a.allFinite() || !b.allFinite() )
        throw ValidationError( "linear plant: non-finite matrices" );
    if ( !( dt > 0.0 ) )
        throw ValidationError( "dt must be positive" );
    DynamicsSystem s;
    s._kind = SystemKind::Linear;
    s._name = "linear";
    s._n = static_cast<int>( a.rows() );
    s._m = static_cast<int>( b.cols() );
    s._dt = dt;
    s._a = a;
    s._b = b;
    return s;
}

DynamicsSystem DynamicsSystem::by_name( std::string_view name )
{
    if ( name == "unicycle" )
        return unicycle();
    if ( name == "planar_quad" )
        return planar_quad();
    if ( name == "quad3d" )
        return quad3d();
    throw ValidationError( "unknown system: " + std::string( name ) );
}

double DynamicsSystem::param( const std::string &key ) const
{
    auto it = _params.find( key );
    if ( it == _params.end() )
        throw ValidationError( "system " + _name + " has no parameter " + key );
    return it->second;
}

ControlVector DynamicsSystem::hover_control() const
{
    ControlVector u = ControlVector::Zero( _m );
    if ( _kind == SystemKind::PlanarQuad || _kind == SystemKind::Quad3d )
        u[0] = param( "mass" ) * std::abs( param( "gravity" ) );
    return u;
}

StateVector DynamicsSystem::step( const StateVector &x, const ControlVector &u ) const
{
    require_dim( x, _n, "step state" );
    require_dim( u, _m, "step control" );
    switch ( _kind )
    {
    case SystemKind::Unicycle:
        return step_unicycle( x, u, _dt );
    case SystemKind::PlanarQuad:
        return step_planar_quad( x, u, _dt, { param( "mass" ), param( "gravity" ), param( "inertia_y" ) } );
    case SystemKind::Quad3d:
        return step_quad3d( x,
                            u,
                            _dt,
                            { param( "mass" ),
                              param( "gravity" ),
                              param( "inertia_x" ),
                              param( "inertia_y" ),
                              param( "inertia_z" ) } );
    case SystemKind::Linear:
        return _a * x + _b * u;
    }
    throw Error( "unreachable system kind" );
}

Trajectory rollout( const DynamicsSystem &system, const StateVector &x0, std::span<const ControlVector> controls )
{
    if ( controls.empty() )
        throw ValidationError( "rollout: need at least one control" );
    require_dim( x0, system.state_dim(), "rollout x0" );
    for ( const auto &u : controls )
        require_dim( u, system.control_dim(), "rollout control" );

    Trajectory traj;
    traj.states.reserve( controls.size() + 1 );
    traj.controls.assign( controls.begin(), controls.end() );
    traj.states.push_back( x0 );
    for ( const auto &u : controls )
        traj.states.push_back( system.step( traj.states.back(), u ) );
    return traj;
}

void ReferenceGeneratorConfig::validate( const DynamicsSystem &system ) const
{
    if ( horizon < 1 )
        throw ValidationError( "reference generator: horizon must be >= 1" );
    if ( smoothing_window < 1 )
        throw ValidationError( "reference generator: smoothing window must be >= 1" );
    if ( control_bounds.dim() != system.control_dim() )
        throw DimensionMismatch( "reference generator: control bounds dimension" );
    if ( initial_box.dim() != system.state_dim() )
        throw DimensionMismatch( "reference generator: initial box dimension" );
    if ( !control_bounds.bounded() || !initial_box.bounded() )
        throw ValidationError( "reference generator: bounds must be finite" );
}

ReferenceGeneratorConfig ReferenceGeneratorConfig::defaults_for( const DynamicsSystem &system, int horizon )
{
    ReferenceGeneratorConfig cfg;
    cfg.horizon = horizon;
    cfg.smoothing_window = 10;
    const int n = system.state_dim();
    const int m = system.control_dim();
    Eigen::VectorXd x_lo( n ), x_hi( n ), u_lo( m ), u_hi( m );

    switch ( system.kind() )
    {
    case SystemKind::Unicycle:
        x_lo << -1.0, -1.0, -0.5;
        x_hi << 1.0, 1.0, 0.5;
        u_lo << 0.2, -1.0;
        u_hi << 1.0, 1.0;
        break;
    case SystemKind::PlanarQuad:
    {
        const double hover = system.hover_control()[0];
        x_lo << -1.0, -1.0, -0.1, -0.2, -0.2, -0.1;
        x_hi = -x_lo;
        u_lo << hover - 1.0, -0.004;
        u_hi << hover + 1.0, 0.004;
        break;
    }
    case SystemKind::Quad3d:
    {
        const double hover = system.hover_control()[0];
        x_lo << -1.0, -1.0, -1.0, -0.05, -0.05, -0.05, -0.1, -0.1, -0.1, -0.05, -0.05, -0.05;
        x_hi = -x_lo;
        u_lo << hover - 1.0, -0.01, -0.002, -0.006;
        u_hi = -u_lo;
        u_hi[0] = hover + 1.0;
        break;
    }
    case SystemKind::Linear:
        x_lo.setConstant( -1.0 );
        x_hi.setConstant( 1.0 );
        u_lo.setConstant( -1.0 );
        u_hi.setConstant( 1.0 );
        break;
    }
    cfg.initial_box = Box( x_lo, x_hi );
    cfg.control_bounds = Box( u_lo, u_hi );
    return cfg;
}

Trajectory generate_reference( const DynamicsSystem &system, const ReferenceGeneratorConfig &cfg )
{
    cfg.validate( system );
    Rng rng( cfg.seed );
    const int n = system.state_dim();
    const int m = system.control_dim();
    const int horizon = cfg.horizon;

    StateVector x0( n );
    for ( int i = 0; i < n; ++i )
        x0[i] = uniform( rng, cfg.initial_box.lower[i], cfg.initial_box.upper[i] );

    std::vector<ControlVector> raw( horizon, ControlVector( m ) );
    for ( int t = 0; t < horizon; ++t )
        for ( int j = 0; j < m; ++j )
            raw[t][j] = uniform( rng, cfg.control_bounds.lower[j], cfg.control_bounds.upper[j] );

    // Centered moving average, truncated at the ends.
    const int w = cfg.smoothing_window;
    const int back = w / 2;
    std::vector<ControlVector> smooth( horizon, ControlVector::Zero( m ) );
    for ( int t = 0; t < horizon; ++t )
    {
        const int lo = std::max( 0, t - back );
        const int hi = std::min( horizon - 1, t - back + w - 1 );
        for ( int k = lo; k <= hi; ++k )
            smooth[t] += raw[k];
        smooth[t] /= static_cast<double>( hi - lo + 1 );
        smooth[t] = smooth[t].cwiseMax( cfg.control_bounds.lower ).cwiseMin( cfg.control_bounds.upper );
    }
    return rollout( system, x0, smooth );
}

std::vector<Trajectory> generate_dataset( const DynamicsSystem &system,
                                          const ReferenceGeneratorConfig &cfg,
                                          int count )
{
    if ( count < 1 )
        throw ValidationError( "generate_dataset: count must be >= 1" );
    std::vector<Trajectory> out;
    out.reserve( count );
    for ( int i = 0; i < count; ++i )
    {
        ReferenceGeneratorConfig item = cfg;
        item.seed = derive_seed( cfg.seed, 0x6461746173657431ULL, static_cast<std::uint64_t>( i ) );
        out.push_back( generate_reference( system, item ) );
    }
    return out;
}

} // namespace kro
