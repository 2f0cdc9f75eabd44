#include "kro/error.hpp"
#include "kro/koopman.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <sstream>

namespace kro {

void TrainingConfig::validate() const
{
    if ( lambda1 < 0.0 || lambda2 < 0.0 || !( lambda1 + lambda2 > 0.0 ) )
        throw ValidationError( "training: loss weights must be nonnegative with positive sum" );
    if ( horizon < 1 )
        throw ValidationError( "training: H must be >= 1" );
    if ( epochs < 0 || batch_size < 1 )
        throw ValidationError( "training: epochs must be >= 0 and batch size >= 1" );
    if ( !( learning_rate > 0.0 ) || momentum < 0.0 || momentum >= 1.0 || weight_decay < 0.0 )
        throw ValidationError( "training: invalid optimizer settings" );
}

void TrainingDataset::validate() const
{
    if ( trajectories.empty() )
        throw ValidationError( "training dataset is empty" );
    const auto &first = trajectories.front();
    if ( first.states.empty() || first.controls.empty() )
        throw ValidationError( "training dataset: empty trajectory" );
    const auto n = first.states.front().size();
    const auto m = first.controls.front().size();
    for ( const auto &traj : trajectories )
    {
        if ( traj.states.size() != traj.controls.size() + 1 )
            throw ValidationError( "training dataset: states must be one longer than controls" );
        for ( const auto &x : traj.states )
            if ( x.size() != n || !x.allFinite() )
                throw DimensionMismatch( "training dataset: inhomogeneous or non-finite states" );
        for ( const auto &u : traj.controls )
            if ( u.size() != m || !u.allFinite() )
                throw DimensionMismatch( "training dataset: inhomogeneous or non-finite controls" );
    }
}

namespace {

// Parameters visited in a fixed order: encoder layers, decoder layers, ka, kb.
template <typename Fn>
void for_each_parameter( KoopmanModel &model, KoopmanGradient &grad, KoopmanGradient &velocity, Fn &&fn )
{
    auto nets = [&]( MlpNetwork &net, MlpGradient &g, MlpGradient &v ) {
        for ( std::size_t i = 0; i < net.layers().size(); ++i )
        {
            fn( net.layers()[i].weight, g.layers[i].weight, v.layers[i].weight, true );
            fn( net.layers()[i].bias, g.layers[i].bias, v.layers[i].bias, false );
        }
    };
    nets( model.encoder, grad.encoder, velocity.encoder );
    nets( model.decoder, grad.decoder, velocity.decoder );
    fn( model.ka, grad.ka, velocity.ka, true );
    fn( model.kb, grad.kb, velocity.kb, true );
}

// RMS of each control channel over the data, relative to the largest. K_B is optimized as
// K_B diag(s), so tiny channels are as easy to fit as large ones; the model stays linear in u.
Eigen::VectorXd control_scale( std::span<const Trajectory> trajs, int m )
{
    Eigen::VectorXd sq = Eigen::VectorXd::Zero( m );
    double count = 0.0;
    for ( const auto &t : trajs )
        for ( const auto &u : t.controls )
        {
            sq += u.cwiseAbs2();
            count += 1.0;
        }
    Eigen::VectorXd s = ( sq / count ).cwiseSqrt();
    const double top = s.maxCoeff();
    if ( !( top > 0.0 ) )
        return Eigen::VectorXd::Ones( m );
    for ( Eigen::Index j = 0; j < m; ++j )
        s[j] = s[j] > 1e-12 * top ? s[j] / top : 1.0;
    return s;
}

Eigen::Index state_count( std::span<const Trajectory> trajs )
{
    Eigen::Index c = 0;
    for ( const auto &t : trajs )
        c += static_cast<Eigen::Index>( t.states.size() );
    return c;
}

double dataset_loss( const KoopmanModel &model, std::span<const Trajectory> trajs, const LossWeights &w, int chunk )
{
    double total = 0.0;
    for ( std::size_t i = 0; i < trajs.size(); i += chunk )
    {
        const std::size_t len = std::min<std::size_t>( chunk, trajs.size() - i );
        total += composite_loss( model, trajs.subspan( i, len ), w );
    }
    return total / static_cast<double>( state_count( trajs ) );
}

} // namespace

KoopmanModel train( const TrainingDataset &dataset, const Architecture &arch, const TrainingConfig &config )
{
    dataset.validate();
    config.validate();
    for ( const auto &traj : dataset.trajectories )
        if ( config.horizon > traj.horizon() )
            throw ValidationError( "training: H exceeds trajectory horizon" );

    const std::span<const Trajectory> all( dataset.trajectories );
    const int n = static_cast<int>( all.front().states.front().size() );
    const int m = static_cast<int>( all.front().controls.front().size() );

    Rng rng( config.seed );
    KoopmanModel model = KoopmanModel::initialize( n, m, arch, rng );
    model.standardization = Standardization::fit( all );
    const Eigen::VectorXd u_scale = control_scale( all, m );
    // The optimizer state for K_B lives in scaled coordinates; model.kb is kept in physical ones.
    Eigen::MatrixXd kb_scaled = model.kb;
    model.kb = kb_scaled * u_scale.cwiseInverse().asDiagonal();

    const LossWeights weights{ config.lambda1, config.lambda2, config.horizon };
    TrainingRecord record;
    record.config = config;
    record.architecture = arch;
    record.initial_loss = dataset_loss( model, all, weights, config.batch_size );
    if ( !std::isfinite( record.initial_loss ) )
        throw TrainingDiverged( "training: initial loss is not finite" );

    KoopmanGradient velocity;
    velocity.encoder = model.encoder.zero_gradient();
    velocity.decoder = model.decoder.zero_gradient();
    velocity.ka = Eigen::MatrixXd::Zero( model.ka.rows(), model.ka.cols() );
    velocity.kb = Eigen::MatrixXd::Zero( model.kb.rows(), model.kb.cols() );

    std::vector<Trajectory> shuffled( dataset.trajectories );
    std::vector<std::size_t> order( shuffled.size() );
    const int batches_per_epoch = static_cast<int>( ( order.size() + config.batch_size - 1 ) / config.batch_size );
    const long total_steps = static_cast<long>( batches_per_epoch ) * config.epochs;
    long step = 0;

    for ( int epoch = 0; epoch < config.epochs; ++epoch )
    {
        std::iota( order.begin(), order.end(), 0 );
        std::shuffle( order.begin(), order.end(), rng );
        for ( std::size_t i = 0; i < order.size(); ++i )
            shuffled[i] = dataset.trajectories[order[i]];

        double epoch_loss = 0.0;
        Eigen::Index epoch_states = 0;
        for ( int b = 0; b < batches_per_epoch; ++b )
        {
            const std::size_t begin = static_cast<std::size_t>( b ) * config.batch_size;
            const std::size_t len = std::min<std::size_t>( config.batch_size, shuffled.size() - begin );
            const std::span<const Trajectory> batch( shuffled.data() + begin, len );

            KoopmanGradient grad = gradients( model, batch, weights );
            if ( !std::isfinite( grad.loss ) )
            {
                std::ostringstream msg;
                msg << "training diverged at epoch " << epoch << ", batch " << b << ": loss = " << grad.loss;
                throw TrainingDiverged( msg.str() );
            }
            const Eigen::Index count = state_count( batch );
            epoch_loss += grad.loss;
            epoch_states += count;

            const double scale = 1.0 / static_cast<double>( count );
            // chain rule for K_B = K_B' diag(1/s); optimize K_B' in place of K_B
            grad.kb = grad.kb * u_scale.cwiseInverse().asDiagonal();
            std::swap( model.kb, kb_scaled );
            for_each_parameter( model, grad, velocity, [&]( auto &p, auto &g, auto &, bool is_weight ) {
                g *= scale;
                if ( is_weight )
                    g += config.weight_decay * p;
            } );
            if ( config.grad_clip > 0.0 )
            {
                const double norm = std::sqrt( grad.squared_norm() );
                if ( !std::isfinite( norm ) )
                    throw TrainingDiverged( "training diverged: non-finite gradient at epoch " + std::to_string( epoch ) );
                if ( norm > config.grad_clip )
                {
                    const double shrink = config.grad_clip / norm;
                    for_each_parameter( model, grad, velocity, [&]( auto &, auto &g, auto &, bool ) { g *= shrink; } );
                }
            }
            const double lr = config.learning_rate * 0.5 *
                              ( 1.0 + std::cos( std::numbers::pi * static_cast<double>( step ) / total_steps ) );
            for_each_parameter( model, grad, velocity, [&]( auto &p, auto &g, auto &v, bool ) {
                v = config.momentum * v + g;
                p -= lr * v;
            } );
            std::swap( model.kb, kb_scaled );
            model.kb = kb_scaled * u_scale.cwiseInverse().asDiagonal();
            ++step;
        }
        record.epoch_losses.push_back( epoch_loss / static_cast<double>( epoch_states ) );
    }

    record.final_loss = dataset_loss( model, all, weights, config.batch_size );
    if ( !std::isfinite( record.final_loss ) || !model.encoder.all_finite() || !model.decoder.all_finite() )
        throw TrainingDiverged( "training diverged: final loss is not finite" );
    if ( record.final_loss > record.initial_loss )
    {
        std::ostringstream msg;
        msg << "training increased the loss from " << record.initial_loss << " to " << record.final_loss;
        throw TrainingDiverged( msg.str() );
    }
    model.training = std::move( record );
    return model;
}

double multistep_rmse( const KoopmanModel &model, std::span<const Trajectory> trajectories, int horizon )
{
    double sq = 0.0;
    double count = 0.0;
    for ( const auto &traj : trajectories )
    {
        if ( horizon > traj.horizon() )
            throw ValidationError( "multistep_rmse: H exceeds trajectory horizon" );
        for ( int s = 0; s + horizon <= traj.horizon(); ++s )
        {
            LiftedState z = encode( model, traj.states[s] );
            for ( int j = 1; j <= horizon; ++j )
            {
                z = latent_step( model, z, traj.controls[s + j - 1] );
                sq += ( decode( model, z ) - traj.states[s + j] ).squaredNorm();
                count += static_cast<double>( model.state_dim() );
            }
        }
    }
    return std::sqrt( sq / count );
}

} // namespace kro
