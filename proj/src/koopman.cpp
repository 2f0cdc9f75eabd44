#include "kro/koopman.hpp"

#include "kro/error.hpp"

#include <cmath>
#include <sstream>

namespace kro {

Standardization Standardization::identity( int n )
{
    return { Eigen::VectorXd::Zero( n ), Eigen::VectorXd::Ones( n ) };
}

Standardization Standardization::fit( std::span<const Trajectory> trajectories )
{
    if ( trajectories.empty() || trajectories.front().states.empty() )
        throw ValidationError( "Standardization::fit: empty dataset" );
    const Eigen::Index n = trajectories.front().states.front().size();
    Eigen::VectorXd sum = Eigen::VectorXd::Zero( n );
    Eigen::VectorXd sq = Eigen::VectorXd::Zero( n );
    double count = 0.0;
    for ( const auto &traj : trajectories )
        for ( const auto &x : traj.states )
        {
            sum += x;
            sq += x.cwiseAbs2();
            count += 1.0;
        }
    Standardization s;
    s.mean = sum / count;
    s.scale = ( sq / count - s.mean.cwiseAbs2() ).cwiseMax( 0.0 ).cwiseSqrt();
    for ( Eigen::Index i = 0; i < n; ++i )
        if ( s.scale[i] < 1e-8 )
            s.scale[i] = 1.0;
    return s;
}

Eigen::VectorXd Standardization::apply( const Eigen::VectorXd &x ) const
{
    return ( x - mean ).cwiseQuotient( scale );
}

Eigen::VectorXd Standardization::invert( const Eigen::VectorXd &x_std ) const
{
    return x_std.cwiseProduct( scale ) + mean;
}

void KoopmanModel::validate() const
{
    const int n = encoder.input_dim();
    const int l = encoder.output_dim();
    const int m = static_cast<int>( kb.cols() );
    std::ostringstream msg;
    if ( decoder.input_dim() != l || decoder.output_dim() != n )
        msg << "decoder must map " << l << " -> " << n << "; ";
    if ( ka.rows() != l || ka.cols() != l )
        msg << "ka must be " << l << "x" << l << "; ";
    if ( kb.rows() != l || m < 1 )
        msg << "kb must be " << l << "xm; ";
    if ( l < n )
        msg << "latent dim " << l << " below state dim " << n << "; ";
    if ( standardization.mean.size() != n || standardization.scale.size() != n )
        msg << "standardization must have dimension " << n << "; ";
    if ( !msg.str().empty() )
        throw DimensionMismatch( "KoopmanModel: " + msg.str() );
    if ( ( standardization.scale.array() <= 0.0 ).any() )
        throw ValidationError( "KoopmanModel: standardization scale must be positive" );
}

KoopmanModel KoopmanModel::identity( const Eigen::MatrixXd &ka, const Eigen::MatrixXd &kb )
{
    const int n = static_cast<int>( ka.rows() );
    KoopmanModel model;
    model.encoder = MlpNetwork::identity( n );
    model.decoder = MlpNetwork::identity( n );
    model.ka = ka;
    model.kb = kb;
    model.standardization = Standardization::identity( n );
    model.validate();
    return model;
}

KoopmanModel KoopmanModel::initialize( int n, int m, const Architecture &arch, Rng &rng )
{
    if ( arch.latent_dim < n )
        throw ValidationError( "latent dimension must be >= state dimension" );
    std::vector<int> enc_sizes{ n };
    enc_sizes.insert( enc_sizes.end(), arch.hidden.begin(), arch.hidden.end() );
    enc_sizes.push_back( arch.latent_dim );
    std::vector<int> dec_sizes{ arch.latent_dim };
    dec_sizes.insert( dec_sizes.end(), arch.hidden.rbegin(), arch.hidden.rend() );
    dec_sizes.push_back( n );

    KoopmanModel model;
    model.encoder = MlpNetwork::xavier( enc_sizes, arch.activation, rng );
    model.decoder = MlpNetwork::xavier( dec_sizes, arch.activation, rng );
    model.ka = Eigen::MatrixXd::Identity( arch.latent_dim, arch.latent_dim );
    model.kb.resize( arch.latent_dim, m );
    const double a = std::sqrt( 6.0 / ( arch.latent_dim + m ) );
    for ( int r = 0; r < arch.latent_dim; ++r )
        for ( int c = 0; c < m; ++c )
            model.kb( r, c ) = uniform( rng, -a, a );
    model.standardization = Standardization::identity( n );
    model.validate();
    return model;
}

LiftedState encode( const KoopmanModel &model, const StateVector &x )
{
    if ( x.size() != model.state_dim() )
        throw DimensionMismatch( "encode: state dimension mismatch" );
    return model.encoder.forward( model.standardization.apply( x ) );
}

StateVector decode( const KoopmanModel &model, const LiftedState &z )
{
    if ( z.size() != model.latent_dim() )
        throw DimensionMismatch( "decode: latent dimension mismatch" );
    return model.standardization.invert( model.decoder.forward( z ) );
}

LiftedState latent_step( const KoopmanModel &model, const LiftedState &z, const ControlVector &u )
{
    if ( z.size() != model.latent_dim() || u.size() != model.control_dim() )
        throw DimensionMismatch( "latent_step: dimension mismatch" );
    return model.ka * z + model.kb * u;
}

MlpNetwork lifting_network( const KoopmanModel &model )
{
    std::vector<DenseLayer> layers = model.encoder.layers();
    const Eigen::VectorXd inv_scale = model.standardization.scale.cwiseInverse();
    DenseLayer &first = layers.front();
    first.bias -= first.weight * model.standardization.mean.cwiseProduct( inv_scale );
    first.weight = first.weight * inv_scale.asDiagonal();
    return MlpNetwork( std::move( layers ), model.encoder.activation() );
}

MlpNetwork inverse_network( const KoopmanModel &model )
{
    std::vector<DenseLayer> layers = model.decoder.layers();
    DenseLayer &last = layers.back();
    last.weight = model.standardization.scale.asDiagonal() * last.weight;
    last.bias = last.bias.cwiseProduct( model.standardization.scale ) + model.standardization.mean;
    return MlpNetwork( std::move( layers ), model.decoder.activation() );
}

double loss_autoencoder( const KoopmanModel &model, const Trajectory &traj )
{
    double total = 0.0;
    for ( const auto &x : traj.states )
    {
        if ( x.size() != model.state_dim() )
            throw DimensionMismatch( "loss_autoencoder: state dimension mismatch" );
        const Eigen::VectorXd xs = model.standardization.apply( x );
        const Eigen::VectorXd z = model.encoder.forward( xs );
        const Eigen::VectorXd xr = model.decoder.forward( z );
        total += ( xs - xr ).squaredNorm() + ( z - model.encoder.forward( xr ) ).squaredNorm();
    }
    return total;
}

double loss_multistep( const KoopmanModel &model, const Trajectory &traj, int horizon )
{
    const int T = traj.horizon();
    if ( horizon < 1 || horizon > T )
        throw ValidationError( "loss_multistep: need 1 <= H <= T (H=" + std::to_string( horizon ) +
                               ", T=" + std::to_string( T ) + ")" );
    std::vector<Eigen::VectorXd> xs, zs;
    for ( const auto &x : traj.states )
    {
        xs.push_back( model.standardization.apply( x ) );
        zs.push_back( model.encoder.forward( xs.back() ) );
    }
    double total = 0.0;
    for ( int start = 0; start + horizon <= T; ++start )
    {
        Eigen::VectorXd z = zs[start];
        for ( int j = 1; j <= horizon; ++j )
        {
            z = latent_step( model, z, traj.controls[start + j - 1] );
            total += ( xs[start + j] - model.decoder.forward( z ) ).squaredNorm() + ( zs[start + j] - z ).squaredNorm();
        }
    }
    return total;
}

double KoopmanGradient::squared_norm() const
{
    return encoder.squared_norm() + decoder.squared_norm() + ka.squaredNorm() + kb.squaredNorm();
}

namespace {

struct Window
{
    Eigen::Index start_col;
    const Trajectory *traj;
    int start;
};

KoopmanGradient evaluate( const KoopmanModel &model,
                          std::span<const Trajectory> batch,
                          const LossWeights &w,
                          bool need_grad )
{
    if ( batch.empty() )
        throw ValidationError( "gradients: empty batch" );
    const int n = model.state_dim();
    const int l = model.latent_dim();
    const int m = model.control_dim();
    const int H = w.horizon;

    Eigen::Index total_states = 0;
    for ( const auto &traj : batch )
    {
        if ( H < 1 || H > traj.horizon() )
            throw ValidationError( "gradients: need 1 <= H <= T" );
        total_states += static_cast<Eigen::Index>( traj.states.size() );
    }

    Eigen::MatrixXd xs( n, total_states );
    std::vector<Window> windows;
    Eigen::Index col = 0;
    for ( const auto &traj : batch )
    {
        for ( int t = 0; t <= traj.horizon(); ++t )
        {
            if ( traj.states[t].size() != n )
                throw DimensionMismatch( "gradients: state dimension mismatch" );
            xs.col( col + t ) = model.standardization.apply( traj.states[t] );
        }
        for ( int s = 0; s + H <= traj.horizon(); ++s )
            windows.push_back( { col + s, &traj, s } );
        col += traj.horizon() + 1;
    }

    KoopmanGradient g;
    if ( need_grad )
    {
        g.encoder = model.encoder.zero_gradient();
        g.decoder = model.decoder.zero_gradient();
        g.ka = Eigen::MatrixXd::Zero( l, l );
        g.kb = Eigen::MatrixXd::Zero( l, m );
    }

    MlpTape enc_tape;
    const Eigen::MatrixXd z = model.encoder.forward_batch( xs, enc_tape );
    Eigen::MatrixXd dz;
    if ( need_grad )
        dz = Eigen::MatrixXd::Zero( l, total_states );

    // Autoencoder term.
    {
        MlpTape dec_tape, enc2_tape;
        const Eigen::MatrixXd xr = model.decoder.forward_batch( z, dec_tape );
        const Eigen::MatrixXd z2 = model.encoder.forward_batch( xr, enc2_tape );
        const Eigen::MatrixXd rx = xs - xr;
        const Eigen::MatrixXd rz = z - z2;
        g.autoencoder_loss = rx.squaredNorm() + rz.squaredNorm();
        if ( need_grad && w.lambda1 != 0.0 )
        {
            Eigen::MatrixXd dxr = -2.0 * w.lambda1 * rx;
            dxr += model.encoder.backward( enc2_tape, -2.0 * w.lambda1 * rz, g.encoder );
            dz += 2.0 * w.lambda1 * rz;
            dz += model.decoder.backward( dec_tape, dxr, g.decoder );
        }
    }

    // Multi-step term over every window.
    {
        const Eigen::Index W = static_cast<Eigen::Index>( windows.size() );
        std::vector<Eigen::MatrixXd> zhat( H + 1, Eigen::MatrixXd( l, W ) );
        std::vector<Eigen::MatrixXd> us( H, Eigen::MatrixXd( m, W ) );
        for ( Eigen::Index k = 0; k < W; ++k )
        {
            zhat[0].col( k ) = z.col( windows[k].start_col );
            for ( int j = 0; j < H; ++j )
            {
                const auto &u = windows[k].traj->controls[windows[k].start + j];
                if ( u.size() != m )
                    throw DimensionMismatch( "gradients: control dimension mismatch" );
                us[j].col( k ) = u;
            }
        }
        Eigen::MatrixXd pred( l, H * W ), xt( n, H * W ), zt( l, H * W );
        for ( int j = 1; j <= H; ++j )
        {
            zhat[j].noalias() = model.ka * zhat[j - 1];
            zhat[j].noalias() += model.kb * us[j - 1];
            pred.middleCols( ( j - 1 ) * W, W ) = zhat[j];
            for ( Eigen::Index k = 0; k < W; ++k )
            {
                xt.col( ( j - 1 ) * W + k ) = xs.col( windows[k].start_col + j );
                zt.col( ( j - 1 ) * W + k ) = z.col( windows[k].start_col + j );
            }
        }
        MlpTape dec_tape;
        const Eigen::MatrixXd xp = model.decoder.forward_batch( pred, dec_tape );
        const Eigen::MatrixXd rx = xt - xp;
        const Eigen::MatrixXd rz = zt - pred;
        g.multistep_loss = rx.squaredNorm() + rz.squaredNorm();

        if ( need_grad && w.lambda2 != 0.0 )
        {
            Eigen::MatrixXd dpred = -2.0 * w.lambda2 * rz;
            dpred += model.decoder.backward( dec_tape, -2.0 * w.lambda2 * rx, g.decoder );
            for ( int j = 1; j <= H; ++j )
                for ( Eigen::Index k = 0; k < W; ++k )
                    dz.col( windows[k].start_col + j ) += 2.0 * w.lambda2 * rz.col( ( j - 1 ) * W + k );

            // Adjoint of the latent recursion.
            Eigen::MatrixXd adj = Eigen::MatrixXd::Zero( l, W );
            for ( int j = H; j >= 1; --j )
            {
                adj += dpred.middleCols( ( j - 1 ) * W, W );
                g.ka.noalias() += adj * zhat[j - 1].transpose();
                g.kb.noalias() += adj * us[j - 1].transpose();
                adj = model.ka.transpose() * adj;
            }
            for ( Eigen::Index k = 0; k < W; ++k )
                dz.col( windows[k].start_col ) += adj.col( k );
        }
    }

    g.loss = w.lambda1 * g.autoencoder_loss + w.lambda2 * g.multistep_loss;
    if ( need_grad )
        model.encoder.backward( enc_tape, dz, g.encoder );
    return g;
}

} // namespace

KoopmanGradient gradients( const KoopmanModel &model, std::span<const Trajectory> batch, const LossWeights &weights )
{
    return evaluate( model, batch, weights, true );
}

double composite_loss( const KoopmanModel &model, std::span<const Trajectory> batch, const LossWeights &weights )
{
    return evaluate( model, batch, weights, false ).loss;
}

} // namespace kro
