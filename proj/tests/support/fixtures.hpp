#pragma once

#include "kro/controller.hpp"
#include "kro/dynamics.hpp"
#include "kro/koopman.hpp"
#include "oracles.hpp"

#include <Eigen/Dense>

#include <filesystem>
#include <string>
#include <unistd.h>

namespace fixture {

/// Fresh, empty scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir( const std::string &name )
{
    const auto dir = std::filesystem::temp_directory_path() / ( "kro_test_" + name + "_" + std::to_string( ::getpid() ) );
    std::filesystem::remove_all( dir );
    std::filesystem::create_directories( dir );
    return dir;
}

/// Small ReLU Koopman model with random biases, transition matrices and a
/// non-trivial standardization, so every code path carries weight.
inline kro::KoopmanModel tiny_model( int n, int m, int l, std::vector<int> hidden, std::uint64_t seed,
                                     kro::Activation act = kro::Activation::ReLU )
{
    kro::Rng rng( seed );
    kro::Architecture arch;
    arch.latent_dim = l;
    arch.hidden = std::move( hidden );
    arch.activation = act;
    kro::KoopmanModel model = kro::KoopmanModel::initialize( n, m, arch, rng );
    for ( auto *net : { &model.encoder, &model.decoder } )
        for ( auto &layer : net->layers() )
            layer.bias = oracle::random_matrix( static_cast<int>( layer.bias.size() ), 1, rng, 0.3 );
    model.ka = Eigen::MatrixXd::Identity( l, l ) + oracle::random_matrix( l, l, rng, 0.1 );
    model.kb = oracle::random_matrix( l, m, rng, 0.5 );
    model.standardization.mean = oracle::random_matrix( n, 1, rng, 0.5 );
    model.standardization.scale = Eigen::VectorXd::Constant( n, 0.7 ) + oracle::random_matrix( n, 1, rng, 0.1 ).cwiseAbs();
    return model;
}

inline kro::Trajectory random_trajectory( int n, int m, int horizon, kro::Rng &rng )
{
    kro::Trajectory t;
    for ( int i = 0; i <= horizon; ++i )
        t.states.push_back( oracle::random_matrix( n, 1, rng ) );
    for ( int i = 0; i < horizon; ++i )
        t.controls.push_back( oracle::random_matrix( m, 1, rng ) );
    return t;
}

/// A linear plant modelled exactly by the identity lift.
struct ExactLinear
{
    kro::DynamicsSystem system;
    kro::KoopmanModel model;
    kro::ReferencePlan plan;
    kro::GainSchedule gains;
};

inline ExactLinear exact_linear( int horizon, std::uint64_t seed = 11 )
{
    Eigen::MatrixXd a( 3, 3 ), b( 3, 2 );
    a << 1.0, 0.1, 0.0, 0.0, 0.95, 0.1, 0.05, 0.0, 0.9;
    b << 0.0, 0.1, 0.1, 0.0, 0.05, 0.05;
    auto system = kro::DynamicsSystem::linear( a, b, 0.1 );
    auto model = kro::KoopmanModel::identity( a, b );
    auto gen = kro::ReferenceGeneratorConfig::defaults_for( system, horizon );
    gen.seed = seed;
    const auto reference = kro::generate_reference( system, gen );
    auto plan = kro::make_plan( model, reference );
    auto gains = kro::riccati_gains( a, b, kro::LqrWeights::diagonal( 3, 2 ), horizon );
    return { system, model, plan, gains };
}

} // namespace fixture
