#include "kro/controller.hpp"

#include "kro/error.hpp"

#include <Eigen/SVD>

namespace kro {

LqrWeights LqrWeights::diagonal( int l, int m, double q_scale, double r_scale, double q_terminal_scale )
{
    return { q_scale * Eigen::MatrixXd::Identity( l, l ),
             r_scale * Eigen::MatrixXd::Identity( m, m ),
             q_terminal_scale * Eigen::MatrixXd::Identity( l, l ) };
}

void LqrWeights::validate( int l, int m ) const
{
    if ( q.rows() != l || q.cols() != l || q_terminal.rows() != l || q_terminal.cols() != l || r.rows() != m ||
         r.cols() != m )
        throw DimensionMismatch( "LqrWeights: Q, Q_T must be l x l and R m x m" );
    auto spd = [&]( const Eigen::MatrixXd &a, const char *name ) {
        if ( !a.allFinite() || ( a - a.transpose() ).cwiseAbs().maxCoeff() > 1e-10 )
            throw ValidationError( std::string( "LqrWeights: " ) + name + " is not symmetric" );
        if ( Eigen::LLT<Eigen::MatrixXd>( a ).info() != Eigen::Success )
            throw ValidationError( std::string( "LqrWeights: " ) + name + " is not positive definite" );
    };
    spd( q, "Q" );
    spd( r, "R" );
    spd( q_terminal, "Q_T" );
}

Eigen::MatrixXd pseudo_inverse( const Eigen::MatrixXd &a, double rel_tol )
{
    Eigen::JacobiSVD<Eigen::MatrixXd> svd( a, Eigen::ComputeThinU | Eigen::ComputeThinV );
    const Eigen::VectorXd &s = svd.singularValues();
    const double cutoff = s.size() > 0 ? rel_tol * s[0] : 0.0;
    Eigen::VectorXd inv = Eigen::VectorXd::Zero( s.size() );
    for ( Eigen::Index i = 0; i < s.size(); ++i )
        if ( s[i] > cutoff && s[i] > 0.0 )
            inv[i] = 1.0 / s[i];
    return svd.matrixV() * inv.asDiagonal() * svd.matrixU().transpose();
}

std::vector<ControlVector> feedforward( const KoopmanModel &model, std::span<const LiftedState> z_ref )
{
    if ( z_ref.size() < 2 )
        throw ValidationError( "feedforward: need at least two reference points" );
    const Eigen::MatrixXd kb_pinv = pseudo_inverse( model.kb );
    std::vector<ControlVector> u_ref;
    u_ref.reserve( z_ref.size() - 1 );
    for ( std::size_t t = 0; t + 1 < z_ref.size(); ++t )
    {
        if ( z_ref[t].size() != model.latent_dim() || z_ref[t + 1].size() != model.latent_dim() )
            throw DimensionMismatch( "feedforward: latent dimension mismatch" );
        u_ref.push_back( kb_pinv * ( z_ref[t + 1] - model.ka * z_ref[t] ) );
    }
    return u_ref;
}

ReferencePlan make_plan( const KoopmanModel &model, const Trajectory &x_ref )
{
    ReferencePlan plan;
    plan.x_ref = x_ref;
    plan.z_ref.reserve( x_ref.states.size() );
    for ( const auto &x : x_ref.states )
        plan.z_ref.push_back( encode( model, x ) );
    plan.u_ref = feedforward( model, plan.z_ref );
    return plan;
}

RiccatiSolution riccati_solve( const Eigen::MatrixXd &ka, const Eigen::MatrixXd &kb, const LqrWeights &weights, int horizon )
{
    const int l = static_cast<int>( ka.rows() );
    const int m = static_cast<int>( kb.cols() );
    if ( ka.cols() != l || kb.rows() != l )
        throw DimensionMismatch( "riccati: ka must be l x l and kb l x m" );
    if ( horizon < 1 )
        throw ValidationError( "riccati: horizon must be >= 1" );
    weights.validate( l, m );

    RiccatiSolution sol;
    sol.schedule.gains.resize( horizon );
    sol.cost_to_go.resize( horizon + 1 );
    sol.cost_to_go[horizon] = weights.q_terminal;
    for ( int t = horizon - 1; t >= 0; --t )
    {
        const Eigen::MatrixXd &p_next = sol.cost_to_go[t + 1];
        const Eigen::MatrixXd bt_p = kb.transpose() * p_next;
        Eigen::MatrixXd s = weights.r + bt_p * kb;
        s = 0.5 * ( s + s.transpose() );
        Eigen::LLT<Eigen::MatrixXd> llt( s );
        if ( llt.info() != Eigen::Success )
            throw SolveFailure( "riccati: R + B'PB is not positive definite at t=" + std::to_string( t ) );
        Eigen::MatrixXd gain = llt.solve( bt_p * ka );
        Eigen::MatrixXd p = weights.q + ka.transpose() * p_next * ( ka - kb * gain );
        p = 0.5 * ( p + p.transpose() );
        sol.schedule.gains[t] = std::move( gain );
        sol.cost_to_go[t] = std::move( p );
    }
    return sol;
}

GainSchedule riccati_gains( const Eigen::MatrixXd &ka, const Eigen::MatrixXd &kb, const LqrWeights &weights, int horizon )
{
    return riccati_solve( ka, kb, weights, horizon ).schedule;
}

ControlVector lifted_control( const ControlVector &u_ref,
                              const Eigen::MatrixXd &gain,
                              const LiftedState &z,
                              const LiftedState &z_ref )
{
    if ( gain.rows() != u_ref.size() || gain.cols() != z.size() || z.size() != z_ref.size() )
        throw DimensionMismatch( "lifted_control: dimension mismatch" );
    return u_ref - gain * ( z - z_ref );
}

ControlVector state_control( const KoopmanModel &model,
                             const ControlVector &u_ref,
                             const Eigen::MatrixXd &gain,
                             const StateVector &x,
                             const LiftedState &z_ref )
{
    return lifted_control( u_ref, gain, encode( model, x ), z_ref );
}

void check_plan( const KoopmanModel &model, const ReferencePlan &plan, const GainSchedule &gains )
{
    const int T = plan.horizon();
    if ( T < 1 || static_cast<int>( plan.z_ref.size() ) != T + 1 || gains.horizon() != T )
        throw DimensionMismatch( "plan and gains must share horizon T (z_ref T+1, u_ref T, gains T)" );
    for ( const auto &z : plan.z_ref )
        if ( z.size() != model.latent_dim() )
            throw DimensionMismatch( "plan: latent dimension mismatch" );
    for ( const auto &u : plan.u_ref )
        if ( u.size() != model.control_dim() )
            throw DimensionMismatch( "plan: control dimension mismatch" );
    for ( const auto &g : gains.gains )
        if ( g.rows() != model.control_dim() || g.cols() != model.latent_dim() )
            throw DimensionMismatch( "gains: expected m x l matrices" );
}

Trajectory rollout_latent_decoded( const KoopmanModel &model,
                                   const ReferencePlan &plan,
                                   const GainSchedule &gains,
                                   const StateVector &x0 )
{
    check_plan( model, plan, gains );
    if ( x0.size() != model.state_dim() )
        throw DimensionMismatch( "rollout_latent_decoded: x0 dimension mismatch" );
    const int T = plan.horizon();
    Trajectory out;
    out.states.reserve( T + 1 );
    out.controls.reserve( T );
    out.states.push_back( x0 );
    LiftedState z = encode( model, x0 );
    for ( int t = 0; t < T; ++t )
    {
        ControlVector u = lifted_control( plan.u_ref[t], gains.gains[t], z, plan.z_ref[t] );
        z = model.ka * z + model.kb * u;
        out.states.push_back( decode( model, z ) );
        out.controls.push_back( std::move( u ) );
    }
    return out;
}

Trajectory rollout_true_closed_loop( const DynamicsSystem &system,
                                     const KoopmanModel &model,
                                     const ReferencePlan &plan,
                                     const GainSchedule &gains,
                                     const StateVector &x0 )
{
    check_plan( model, plan, gains );
    if ( x0.size() != model.state_dim() || system.state_dim() != model.state_dim() ||
         system.control_dim() != model.control_dim() )
        throw DimensionMismatch( "rollout_true_closed_loop: system/model/x0 dimensions disagree" );
    const int T = plan.horizon();
    Trajectory out;
    out.states.reserve( T + 1 );
    out.controls.reserve( T );
    out.states.push_back( x0 );
    for ( int t = 0; t < T; ++t )
    {
        ControlVector u = state_control( model, plan.u_ref[t], gains.gains[t], out.states.back(), plan.z_ref[t] );
        out.states.push_back( system.step( out.states.back(), u ) );
        out.controls.push_back( std::move( u ) );
    }
    return out;
}

} // namespace kro
