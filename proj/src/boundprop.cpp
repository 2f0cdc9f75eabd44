#include "kro/boundprop.hpp"

#include "kro/error.hpp"

#include <algorithm>
#include <cmath>

namespace kro {

namespace {

Eigen::MatrixXd positive_part( const Eigen::MatrixXd &a )
{
    return a.cwiseMax( 0.0 );
}

Eigen::MatrixXd negative_part( const Eigen::MatrixXd &a )
{
    return a.cwiseMin( 0.0 );
}

// sum_j coeff_j * value_j, skipping zero coefficients so that infinite
// box sides never produce 0 * inf.
double dot_skip_zero( const Eigen::Ref<const Eigen::RowVectorXd> &coeff, const Eigen::VectorXd &value )
{
    double s = 0.0;
    for ( Eigen::Index j = 0; j < coeff.size(); ++j )
        if ( coeff[j] != 0.0 )
            s += coeff[j] * value[j];
    return s;
}

// Affine bounds (in the network input) of the output of layer `target`,
// back-substituted through the relaxed ReLUs of the earlier layers.
AffineBoundPair back_substitute( const MlpNetwork &net,
                                 const std::vector<std::vector<ReluRelaxation>> &relax,
                                 std::size_t target,
                                 const Box &box )
{
    const auto &layers = net.layers();
    Eigen::MatrixXd lo_a = layers[target].weight;
    Eigen::MatrixXd up_a = layers[target].weight;
    Eigen::VectorXd lo_c = layers[target].bias;
    Eigen::VectorXd up_c = layers[target].bias;

    for ( std::size_t j = target; j-- > 0; )
    {
        const auto &r = relax[j];
        const Eigen::Index width = static_cast<Eigen::Index>( r.size() );
        Eigen::VectorXd ls( width ), li( width ), us( width ), ui( width );
        for ( Eigen::Index k = 0; k < width; ++k )
        {
            ls[k] = r[k].lower_slope;
            li[k] = r[k].lower_intercept;
            us[k] = r[k].upper_slope;
            ui[k] = r[k].upper_intercept;
        }
        {
            const Eigen::MatrixXd pos = positive_part( lo_a );
            const Eigen::MatrixXd neg = negative_part( lo_a );
            lo_c += pos * li + neg * ui;
            lo_a = pos * ls.asDiagonal();
            lo_a += neg * us.asDiagonal();
        }
        {
            const Eigen::MatrixXd pos = positive_part( up_a );
            const Eigen::MatrixXd neg = negative_part( up_a );
            up_c += pos * ui + neg * li;
            up_a = pos * us.asDiagonal();
            up_a += neg * ls.asDiagonal();
        }
        lo_c += lo_a * layers[j].bias;
        up_c += up_a * layers[j].bias;
        lo_a = lo_a * layers[j].weight;
        up_a = up_a * layers[j].weight;
    }
    return { std::move( lo_a ), std::move( lo_c ), std::move( up_a ), std::move( up_c ), box };
}

Box intersect_or_first( const Box &a, const Box &b )
{
    Eigen::VectorXd lo = a.lower.cwiseMax( b.lower );
    Eigen::VectorXd hi = a.upper.cwiseMin( b.upper );
    if ( ( lo.array() > hi.array() ).any() )
        return a;
    return Box( std::move( lo ), std::move( hi ) );
}

} // namespace

AffineBoundPair AffineBoundPair::exact( const Eigen::MatrixXd &m, const Eigen::VectorXd &c, const Box &box )
{
    if ( m.rows() != c.size() || m.cols() != box.dim() )
        throw DimensionMismatch( "AffineBoundPair::exact: dimension mismatch" );
    return { m, c, m, c, box };
}

ReluRelaxation relu_relax( double lower, double upper )
{
    if ( !( lower <= upper ) )
        throw ValidationError( "relu_relax: requires lower <= upper" );
    if ( upper <= 0.0 )
        return { 0.0, 0.0, 0.0, 0.0 };
    if ( lower >= 0.0 )
        return { 1.0, 0.0, 1.0, 0.0 };
    const double slope = upper / ( upper - lower );
    return { upper >= -lower ? 1.0 : 0.0, 0.0, slope, -lower * slope };
}

AffineBoundPair bound_network( const MlpNetwork &net, const Box &input_box )
{
    if ( net.activation() != Activation::ReLU && net.depth() > 1 )
        throw UnsupportedActivation( "bound_network: only ReLU networks can be bounded" );
    if ( input_box.dim() != net.input_dim() )
        throw DimensionMismatch( "bound_network: input box dimension mismatch" );
    if ( !input_box.bounded() )
        throw ValidationError( "bound_network: input box must be finite" );

    const std::size_t depth = net.layers().size();
    std::vector<std::vector<ReluRelaxation>> relax( depth - 1 );
    for ( std::size_t k = 0; k + 1 < depth; ++k )
    {
        const Box pre = concretize( back_substitute( net, relax, k, input_box ), input_box );
        relax[k].resize( pre.dim() );
        for ( int i = 0; i < pre.dim(); ++i )
            relax[k][i] = relu_relax( pre.lower[i], pre.upper[i] );
    }
    return back_substitute( net, relax, depth - 1, input_box );
}

Box concretize( const AffineBoundPair &bounds, const Box &box )
{
    if ( box.dim() != bounds.input_dim() || bounds.upper_weight.cols() != bounds.input_dim() )
        throw DimensionMismatch( "concretize: box dimension mismatch" );
    const int rows = bounds.output_dim();
    Eigen::VectorXd lo( rows ), hi( rows );
    for ( int r = 0; r < rows; ++r )
    {
        const auto pl = bounds.lower_weight.row( r );
        const auto pu = bounds.upper_weight.row( r );
        lo[r] = bounds.lower_bias[r] + dot_skip_zero( pl.cwiseMax( 0.0 ), box.lower ) +
                dot_skip_zero( pl.cwiseMin( 0.0 ), box.upper );
        hi[r] = bounds.upper_bias[r] + dot_skip_zero( pu.cwiseMax( 0.0 ), box.upper ) +
                dot_skip_zero( pu.cwiseMin( 0.0 ), box.lower );
        if ( lo[r] > hi[r] )
            std::swap( lo[r], hi[r] ); // rounding only; both orders are sound
    }
    return Box( std::move( lo ), std::move( hi ) );
}

AffineBoundPair compose_linear( const AffineBoundPair &bounds, const Eigen::MatrixXd &m, const Eigen::VectorXd &c )
{
    if ( m.cols() != bounds.output_dim() || m.rows() != c.size() )
        throw DimensionMismatch( "compose_linear: dimension mismatch" );
    const Eigen::MatrixXd pos = positive_part( m );
    const Eigen::MatrixXd neg = negative_part( m );
    AffineBoundPair out;
    out.lower_weight = pos * bounds.lower_weight + neg * bounds.upper_weight;
    out.lower_bias = pos * bounds.lower_bias + neg * bounds.upper_bias + c;
    out.upper_weight = pos * bounds.upper_weight + neg * bounds.lower_weight;
    out.upper_bias = pos * bounds.upper_bias + neg * bounds.lower_bias + c;
    out.input_box = bounds.input_box;
    return out;
}

AffineBoundPair compose_bounds( const AffineBoundPair &outer, const AffineBoundPair &inner )
{
    if ( outer.input_dim() != inner.output_dim() )
        throw DimensionMismatch( "compose_bounds: dimension mismatch" );
    const Eigen::MatrixXd lo_pos = positive_part( outer.lower_weight );
    const Eigen::MatrixXd lo_neg = negative_part( outer.lower_weight );
    const Eigen::MatrixXd up_pos = positive_part( outer.upper_weight );
    const Eigen::MatrixXd up_neg = negative_part( outer.upper_weight );
    AffineBoundPair out;
    out.lower_weight = lo_pos * inner.lower_weight + lo_neg * inner.upper_weight;
    out.lower_bias = lo_pos * inner.lower_bias + lo_neg * inner.upper_bias + outer.lower_bias;
    out.upper_weight = up_pos * inner.upper_weight + up_neg * inner.lower_weight;
    out.upper_bias = up_pos * inner.upper_bias + up_neg * inner.lower_bias + outer.upper_bias;
    out.input_box = inner.input_box;
    return out;
}

std::string to_string( TubeKind kind )
{
    return kind == TubeKind::KRS ? "KRS" : "CKRS";
}

TubeKind tube_kind_from_string( const std::string &name )
{
    if ( name == "KRS" )
        return TubeKind::KRS;
    if ( name == "CKRS" )
        return TubeKind::CKRS;
    throw ValidationError( "unknown tube kind: " + name );
}

bool ReachTube::contains( const Trajectory &traj, double slack ) const
{
    if ( traj.states.size() != boxes.size() )
        throw DimensionMismatch( "ReachTube::contains: trajectory length differs from tube length" );
    for ( std::size_t t = 0; t < boxes.size(); ++t )
        if ( !boxes[t].contains( traj.states[t], slack ) )
            return false;
    return true;
}

KrsResult compute_krs_detailed( const KoopmanModel &model,
                                const ReferencePlan &plan,
                                const GainSchedule &gains,
                                const Box &initial_set )
{
    model.validate();
    check_plan( model, plan, gains );
    if ( initial_set.dim() != model.state_dim() )
        throw DimensionMismatch( "compute_krs: initial set dimension mismatch" );

    const MlpNetwork encoder = lifting_network( model );
    const MlpNetwork decoder = inverse_network( model );
    const int l = model.latent_dim();
    const int T = plan.horizon();

    const AffineBoundPair z0 = bound_network( encoder, initial_set );

    KrsResult result;
    result.tube.kind = TubeKind::KRS;
    result.tube.boxes.reserve( T + 1 );
    result.tube.boxes.push_back( initial_set );
    result.latent_bounds.push_back( z0 );
    result.latent_boxes.push_back( concretize( z0, initial_set ) );

    // z_t = transition * z_0 + offset holds exactly along the closed loop.
    Eigen::MatrixXd transition = Eigen::MatrixXd::Identity( l, l );
    Eigen::VectorXd offset = Eigen::VectorXd::Zero( l );
    for ( int t = 0; t < T; ++t )
    {
        const Eigen::MatrixXd &gain = gains.gains[t];
        const Eigen::MatrixXd closed = model.ka - model.kb * gain;
        const Eigen::VectorXd drive = model.kb * ( plan.u_ref[t] + gain * plan.z_ref[t] );
        transition = closed * transition;
        offset = closed * offset + drive;

        AffineBoundPair zt = compose_linear( z0, transition, offset );
        Box latent_box = concretize( zt, initial_set );
        const AffineBoundPair dec = bound_network( decoder, latent_box );
        const Box through_x0 = concretize( compose_bounds( dec, zt ), initial_set );
        const Box through_latent = concretize( dec, latent_box );
        result.tube.boxes.push_back( intersect_or_first( through_x0, through_latent ) );
        result.latent_boxes.push_back( std::move( latent_box ) );
        result.latent_bounds.push_back( std::move( zt ) );
    }
    return result;
}

ReachTube compute_krs( const KoopmanModel &model,
                       const ReferencePlan &plan,
                       const GainSchedule &gains,
                       const Box &initial_set )
{
    return compute_krs_detailed( model, plan, gains, initial_set ).tube;
}

} // namespace kro
