#include "fixtures.hpp"
#include "oracles.hpp"

#include "kro/error.hpp"
#include "kro/harness.hpp"
#include "kro/koopman.hpp"

#include <doctest.h>

#include <vector>

using namespace kro;

namespace {

// 2 -> 2 encoder with one ReLU hidden layer of width 2.
MlpNetwork hand_encoder()
{
    DenseLayer l1, l2;
    l1.weight.resize( 2, 2 );
    l1.weight << 1, -1, 2, 0;
    l1.bias.resize( 2 );
    l1.bias << 0, -1;
    l2.weight.resize( 2, 2 );
    l2.weight << 1, 1, 1, -1;
    l2.bias.resize( 2 );
    l2.bias << 0.5, 0;
    return MlpNetwork( { l1, l2 }, Activation::ReLU );
}

KoopmanModel hand_model()
{
    KoopmanModel m = KoopmanModel::identity( Eigen::MatrixXd::Identity( 2, 2 ), Eigen::MatrixXd::Ones( 2, 1 ) );
    m.encoder = hand_encoder();
    return m;
}

double sum_l1( const KoopmanModel &m, const std::vector<Trajectory> &batch )
{
    double s = 0.0;
    for ( const auto &t : batch )
        s += loss_autoencoder( m, t );
    return s;
}

double sum_l2( const KoopmanModel &m, const std::vector<Trajectory> &batch, int h )
{
    double s = 0.0;
    for ( const auto &t : batch )
        s += loss_multistep( m, t, h );
    return s;
}

} // namespace

TEST_SUITE( "koopman" )
{
    TEST_CASE( "identity lift encodes and decodes exactly" )
    {
        const KoopmanModel m = KoopmanModel::identity( Eigen::MatrixXd::Identity( 3, 3 ), Eigen::MatrixXd::Ones( 3, 2 ) );
        Eigen::VectorXd x( 3 );
        x << 0.25, -1.5, 3.0;
        CHECK( encode( m, x ) == x );
        CHECK( decode( m, x ) == x );
    }

    TEST_CASE( "hand ReLU encoder" )
    {
        const KoopmanModel m = hand_model();
        Eigen::VectorXd x( 2 );
        x << 1, 2;
        // hidden pre-activations (-1, 1) -> (0, 1); outputs (1.5, -1)
        Eigen::VectorXd expect( 2 );
        expect << 1.5, -1.0;
        CHECK( encode( m, x ).isApprox( expect, 1e-15 ) );
        CHECK( encode( m, x ) == oracle::relu_forward( m.encoder, x ) );
        CHECK( decode( m, expect ) == expect );
    }

    TEST_CASE( "forward passes are deterministic" )
    {
        const KoopmanModel m = fixture::tiny_model( 3, 2, 5, { 8, 8 }, 3 );
        Eigen::VectorXd x = Eigen::VectorXd::LinSpaced( 3, -0.4, 0.9 );
        const LiftedState z1 = encode( m, x ), z2 = encode( m, x );
        CHECK( z1 == z2 );
        CHECK( decode( m, z1 ) == decode( m, z2 ) );
    }

    TEST_CASE( "encode rejects the wrong dimension" )
    {
        const KoopmanModel m = fixture::tiny_model( 3, 2, 5, { 8 }, 3 );
        CHECK_THROWS_AS( encode( m, Eigen::VectorXd::Zero( 4 ) ), DimensionMismatch );
        CHECK_THROWS_AS( decode( m, Eigen::VectorXd::Zero( 3 ) ), DimensionMismatch );
        CHECK_THROWS_AS( latent_step( m, Eigen::VectorXd::Zero( 5 ), Eigen::VectorXd::Zero( 3 ) ), DimensionMismatch );
    }

    TEST_CASE( "latent step" )
    {
        Rng rng( 9 );
        KoopmanModel m = KoopmanModel::identity( Eigen::MatrixXd::Identity( 3, 3 ), Eigen::MatrixXd::Zero( 3, 3 ) );
        const Eigen::VectorXd z = oracle::random_matrix( 3, 1, rng ), u = oracle::random_matrix( 3, 1, rng );
        CHECK( latent_step( m, z, u ) == z );
        m.ka.setZero();
        m.kb.setIdentity();
        CHECK( latent_step( m, z, u ) == u );

        const KoopmanModel r = fixture::tiny_model( 2, 3, 4, { 4 }, 10 );
        const Eigen::VectorXd z4 = oracle::random_matrix( 4, 1, rng );
        CHECK( latent_step( r, z4, u ).isApprox( oracle::matvec( r.ka, z4 ) + oracle::matvec( r.kb, u ), 1e-14 ) );
    }

    TEST_CASE( "latent step is linear" )
    {
        Rng rng( 12 );
        const KoopmanModel m = fixture::tiny_model( 2, 3, 6, { 4 }, 13 );
        for ( int trial = 0; trial < 20; ++trial )
        {
            const Eigen::VectorXd z1 = oracle::random_matrix( 6, 1, rng ), z2 = oracle::random_matrix( 6, 1, rng );
            const Eigen::VectorXd u1 = oracle::random_matrix( 3, 1, rng ), u2 = oracle::random_matrix( 3, 1, rng );
            CHECK( latent_step( m, z1 + z2, u1 + u2 ).isApprox( latent_step( m, z1, u1 ) + latent_step( m, z2, u2 ), 1e-12 ) );
            const double a = uniform( rng, -2, 2 ), b = 1.0 - a;
            CHECK( latent_step( m, a * z1 + b * z2, a * u1 + b * u2 )
                       .isApprox( a * latent_step( m, z1, u1 ) + b * latent_step( m, z2, u2 ), 1e-12 ) );
        }
    }

    TEST_CASE( "autoencoder loss" )
    {
        Rng rng( 1 );
        const Trajectory traj = fixture::random_trajectory( 3, 2, 6, rng );
        const KoopmanModel id = KoopmanModel::identity( Eigen::MatrixXd::Identity( 3, 3 ), Eigen::MatrixXd::Ones( 3, 2 ) );
        CHECK( loss_autoencoder( id, traj ) == 0.0 );

        // zero decoder: sum |x|^2 + |phi(x) - phi(0)|^2
        KoopmanModel m = hand_model();
        m.decoder = MlpNetwork( { DenseLayer{ Eigen::MatrixXd::Zero( 2, 2 ), Eigen::VectorXd::Zero( 2 ) } }, Activation::ReLU );
        Trajectory two;
        Eigen::VectorXd a( 2 ), b( 2 );
        a << 1, 2;
        b << -0.5, 0.25;
        two.states = { a, b };
        two.controls = { Eigen::VectorXd::Zero( 1 ) };
        const Eigen::VectorXd phi0 = oracle::relu_forward( m.encoder, Eigen::VectorXd::Zero( 2 ) );
        double expect = 0.0;
        for ( const auto &x : two.states )
            expect += x.squaredNorm() + ( oracle::relu_forward( m.encoder, x ) - phi0 ).squaredNorm();
        CHECK( loss_autoencoder( m, two ) == doctest::Approx( expect ).epsilon( 1e-14 ) );

        const KoopmanModel t = fixture::tiny_model( 3, 2, 4, { 5 }, 2 );
        CHECK( loss_autoencoder( t, traj ) >= 0.0 );
    }

    TEST_CASE( "multi-step loss by hand" )
    {
        Eigen::MatrixXd ka( 1, 1 ), kb( 1, 1 );
        ka << 0.5;
        kb << 1.0;
        const KoopmanModel m = KoopmanModel::identity( ka, kb );
        Trajectory t;
        for ( double x : { 1.0, 2.0, 0.0, 1.0 } )
            t.states.push_back( Eigen::VectorXd::Constant( 1, x ) );
        for ( double u : { 1.0, -1.0, 2.0 } )
            t.controls.push_back( Eigen::VectorXd::Constant( 1, u ) );
        // windows at s = 0: 2(0.5^2 + 0.25^2) = 0.625; s = 1: 2(0 + 1) = 2
        CHECK( loss_multistep( m, t, 2 ) == doctest::Approx( 2.625 ).epsilon( 1e-14 ) );
        CHECK_THROWS_AS( loss_multistep( m, t, 4 ), ValidationError );
    }

    TEST_CASE( "multi-step loss vanishes on consistent models" )
    {
        const KoopmanModel frozen = KoopmanModel::identity( Eigen::MatrixXd::Identity( 2, 2 ), Eigen::MatrixXd::Zero( 2, 1 ) );
        Trajectory c;
        for ( int i = 0; i < 5; ++i )
            c.states.push_back( Eigen::VectorXd::Constant( 2, 0.3 ) );
        for ( int i = 0; i < 4; ++i )
            c.controls.push_back( Eigen::VectorXd::Constant( 1, 0.9 ) );
        CHECK( loss_multistep( frozen, c, 1 ) == 0.0 );

        const auto lin = fixture::exact_linear( 30 );
        CHECK( loss_multistep( lin.model, lin.plan.x_ref, 10 ) <= 1e-24 );
        CHECK( loss_autoencoder( lin.model, lin.plan.x_ref ) == 0.0 );
    }

    TEST_CASE( "composite loss decomposes into its parts" )
    {
        Rng rng( 4 );
        const KoopmanModel m = fixture::tiny_model( 3, 2, 4, { 6, 5 }, 21 );
        std::vector<Trajectory> batch;
        for ( int i = 0; i < 3; ++i )
            batch.push_back( fixture::random_trajectory( 3, 2, 7, rng ) );
        const double l1 = sum_l1( m, batch ), l2 = sum_l2( m, batch, 3 );
        for ( auto [a, b] : { std::pair{ 1.0, 1.0 }, std::pair{ 0.3, 2.5 }, std::pair{ 0.0, 1.0 }, std::pair{ 1.0, 0.0 } } )
        {
            const LossWeights w{ a, b, 3 };
            const double expect = a * l1 + b * l2;
            CHECK( composite_loss( m, batch, w ) == doctest::Approx( expect ).epsilon( 1e-12 ) );
            const KoopmanGradient g = gradients( m, batch, w );
            CHECK( g.autoencoder_loss == doctest::Approx( l1 ).epsilon( 1e-12 ) );
            CHECK( g.multistep_loss == doctest::Approx( l2 ).epsilon( 1e-12 ) );
            CHECK( g.loss == doctest::Approx( expect ).epsilon( 1e-12 ) );
        }
    }

    TEST_CASE( "analytic gradients match central differences" )
    {
        for ( Activation act : { Activation::ReLU, Activation::GELU } )
            for ( std::uint64_t seed = 0; seed < 4; ++seed )
            {
                CAPTURE( to_string( act ) );
                CAPTURE( seed );
                Rng rng( 100 + seed );
                KoopmanModel m = fixture::tiny_model( 2, 1, 3, { 4, 3 }, 200 + seed, act );
                std::vector<Trajectory> batch;
                for ( int i = 0; i < 2; ++i )
                    batch.push_back( fixture::random_trajectory( 2, 1, 5, rng ) );
                for ( const auto &c : oracle::gradient_errors( m, batch, { 0.7, 1.3, 3 } ) )
                {
                    CAPTURE( c.name );
                    CHECK( c.error <= 1e-4 );
                }
            }
    }

    TEST_CASE( "gradients vanish at a zero-loss point" )
    {
        const auto lin = fixture::exact_linear( 12 );
        const std::vector<Trajectory> batch{ lin.plan.x_ref };
        const KoopmanGradient g = gradients( lin.model, batch, { 1.0, 1.0, 4 } );
        CHECK( g.loss <= 1e-24 );
        CHECK( std::sqrt( g.squared_norm() ) <= 1e-10 );
    }

    TEST_CASE( "autoencoder loss does not depend on the transition" )
    {
        Rng rng( 8 );
        const KoopmanModel m = fixture::tiny_model( 3, 2, 4, { 5 }, 31 );
        const std::vector<Trajectory> batch{ fixture::random_trajectory( 3, 2, 6, rng ) };
        const KoopmanGradient g = gradients( m, batch, { 1.0, 0.0, 2 } );
        CHECK( g.kb.isZero( 0.0 ) );
        CHECK( g.ka.isZero( 0.0 ) );
    }

    TEST_CASE( "standardization" )
    {
        Rng rng( 2 );
        std::vector<Trajectory> data{ fixture::random_trajectory( 3, 1, 40, rng ) };
        for ( auto &x : data[0].states )
            x[2] = 5.0; // constant dimension keeps scale 1
        const Standardization s = Standardization::fit( data );
        CHECK( s.scale[2] == 1.0 );
        CHECK( s.mean[2] == doctest::Approx( 5.0 ) );
        const Eigen::VectorXd x = data[0].states[7];
        CHECK( s.invert( s.apply( x ) ).isApprox( x, 1e-14 ) );
        Eigen::VectorXd mean = Eigen::VectorXd::Zero( 3 );
        for ( const auto &y : data[0].states )
            mean += s.apply( y );
        CHECK( ( mean / 41.0 ).head( 2 ).norm() <= 1e-12 );
    }

    TEST_CASE( "folded networks agree with encode and decode" )
    {
        Rng rng( 6 );
        const KoopmanModel m = fixture::tiny_model( 3, 2, 5, { 7, 7 }, 17 );
        const MlpNetwork lift = lifting_network( m ), inv = inverse_network( m );
        for ( int i = 0; i < 10; ++i )
        {
            const Eigen::VectorXd x = oracle::random_matrix( 3, 1, rng );
            const Eigen::VectorXd z = oracle::random_matrix( 5, 1, rng );
            CHECK( lift.forward( x ).isApprox( encode( m, x ), 1e-12 ) );
            CHECK( inv.forward( z ).isApprox( decode( m, z ), 1e-12 ) );
        }
    }

    TEST_CASE( "model validation" )
    {
        KoopmanModel m = fixture::tiny_model( 3, 2, 4, { 5 }, 1 );
        m.kb = Eigen::MatrixXd::Zero( 3, 2 );
        CHECK_THROWS_AS( m.validate(), DimensionMismatch );
        Rng rng( 0 );
        Architecture narrow;
        narrow.latent_dim = 2;
        CHECK_THROWS_AS( KoopmanModel::initialize( 3, 1, narrow, rng ), ValidationError );
    }
}

TEST_SUITE( "training" )
{
    TEST_CASE( "linear autoencoder converges on an identity task" )
    {
        const auto sys = fixture::exact_linear( 20 ).system;
        auto gen = ReferenceGeneratorConfig::defaults_for( sys, 20 );
        gen.seed = 3;
        TrainingDataset data;
        data.trajectories = generate_dataset( sys, gen, 16 );
        Architecture arch;
        arch.latent_dim = 3;
        arch.hidden = {};
        TrainingConfig tc;
        tc.lambda2 = 0.0;
        tc.epochs = 400;
        tc.batch_size = 4;
        tc.learning_rate = 0.05;
        tc.seed = 1;
        const KoopmanModel m = train( data, arch, tc );
        double l1 = 0.0;
        for ( const auto &t : data.trajectories )
            l1 += loss_autoencoder( m, t );
        l1 /= static_cast<double>( data.trajectories.size() );
        MESSAGE( "mean per-trajectory L1 after training: " << l1 );
        CHECK( l1 < 1e-6 );
        REQUIRE( m.training );
        CHECK( m.training->epoch_losses.size() == 400 );
        CHECK( m.training->final_loss <= m.training->initial_loss );
    }

    TEST_CASE( "training is reproducible for a fixed seed" )
    {
        const auto sys = DynamicsSystem::unicycle();
        auto gen = ReferenceGeneratorConfig::defaults_for( sys, 15 );
        gen.seed = 8;
        TrainingDataset data;
        data.trajectories = generate_dataset( sys, gen, 6 );
        Architecture arch;
        arch.latent_dim = 4;
        arch.hidden = { 8 };
        TrainingConfig tc;
        tc.epochs = 3;
        tc.batch_size = 2;
        tc.horizon = 4;
        tc.seed = 5;
        const KoopmanModel a = train( data, arch, tc ), b = train( data, arch, tc );
        CHECK( a.ka == b.ka );
        CHECK( a.kb == b.kb );
        CHECK( a.encoder.layers()[0].weight == b.encoder.layers()[0].weight );
        CHECK( a.decoder.layers()[1].bias == b.decoder.layers()[1].bias );
        tc.seed = 6;
        CHECK( train( data, arch, tc ).ka != a.ka );
    }

    TEST_CASE( "shrinking a minor control channel only rescales its K_B column" )
    {
        const auto sys = DynamicsSystem::unicycle();
        auto gen = ReferenceGeneratorConfig::defaults_for( sys, 15 );
        gen.seed = 8;
        TrainingDataset data;
        data.trajectories = generate_dataset( sys, gen, 6 );
        TrainingDataset tiny = data;
        const double c = 1e-3;
        for ( auto &t : tiny.trajectories )
            for ( auto &u : t.controls )
                u[1] *= c;
        Architecture arch;
        arch.latent_dim = 4;
        arch.hidden = { 8 };
        TrainingConfig tc;
        tc.epochs = 3;
        tc.batch_size = 2;
        tc.horizon = 4;
        tc.seed = 5;
        const KoopmanModel a = train( data, arch, tc ), b = train( tiny, arch, tc );
        CHECK( b.ka.isApprox( a.ka, 1e-8 ) );
        CHECK( b.kb.col( 0 ).isApprox( a.kb.col( 0 ), 1e-8 ) );
        CHECK( ( c * b.kb.col( 1 ) ).isApprox( a.kb.col( 1 ), 1e-8 ) );
        CHECK( b.encoder.layers()[0].weight.isApprox( a.encoder.layers()[0].weight, 1e-8 ) );
    }

    TEST_CASE( "divergence is reported" )
    {
        const auto sys = DynamicsSystem::unicycle();
        auto gen = ReferenceGeneratorConfig::defaults_for( sys, 15 );
        TrainingDataset data;
        data.trajectories = generate_dataset( sys, gen, 4 );
        Architecture arch;
        arch.latent_dim = 4;
        arch.hidden = { 8 };
        TrainingConfig tc;
        tc.epochs = 20;
        tc.horizon = 4;
        tc.learning_rate = 1e6;
        tc.grad_clip = 0.0;
        CHECK_THROWS_AS( train( data, arch, tc ), TrainingDiverged );
        tc.horizon = 16;
        CHECK_THROWS_AS( train( data, arch, tc ), ValidationError );
        CHECK_THROWS_AS( train( TrainingDataset{}, arch, tc ), ValidationError );
    }
}

TEST_SUITE( "training-quality" )
{
    TEST_CASE( "default unicycle training beats the state spread on held-out data" )
    {
        const ExperimentConfig config = ExperimentConfig::defaults_for( "unicycle" );
        REQUIRE( config.train_trajectories == 200 );
        REQUIRE( config.train_horizon == 100 );
        const KoopmanModel model = train_model( config );

        // the stored standardization is the training set's mean and spread
        const Standardization &spread = model.standardization;
        const auto held_out = generate_dataset( DynamicsSystem::unicycle(), generator_for( config, 100, 0xbeef ), 50 );

        const double rmse = multistep_rmse( model, held_out, 10 );
        const double rms_std = std::sqrt( spread.scale.squaredNorm() / 3.0 );
        MESSAGE( "held-out H=10 RMSE " << rmse << ", RMS state std " << rms_std << ", min std " << spread.scale.minCoeff() );
        CHECK( rmse < rms_std );
        CHECK( rmse < spread.scale.minCoeff() );
    }
}
