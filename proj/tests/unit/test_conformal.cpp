#include "fixtures.hpp"
#include "oracles.hpp"

#include "kro/conformal.hpp"
#include "kro/error.hpp"

#include <doctest.h>

#include <cmath>
#include <limits>
#include <numeric>
#include <vector>

using namespace kro;

namespace {

constexpr double INF = std::numeric_limits<double>::infinity();

ReachTube unit_tube( int horizon, int n )
{
    ReachTube t;
    for ( int i = 0; i <= horizon; ++i )
        t.boxes.push_back( Box::around( Eigen::VectorXd::Constant( n, 0.1 * i ), 0.5 ) );
    return t;
}

// Unicycle closed loop driven by a small untrained model, so errors are
// far from zero.
struct Loop
{
    DynamicsSystem system = DynamicsSystem::unicycle();
    KoopmanModel model;
    ReferencePlan plan;
    GainSchedule gains;
    ReferenceGeneratorConfig generator;
};

Loop unicycle_loop( int horizon )
{
    Loop l;
    l.model = fixture::tiny_model( 3, 2, 6, { 8 }, 77 );
    l.model.ka = Eigen::MatrixXd::Identity( 6, 6 );
    l.generator = ReferenceGeneratorConfig::defaults_for( l.system, horizon );
    l.generator.seed = 3;
    l.plan = make_plan( l.model, generate_reference( l.system, l.generator ) );
    l.gains = riccati_gains( l.model.ka, l.model.kb, LqrWeights::diagonal( 6, 2 ), horizon );
    return l;
}

} // namespace

TEST_SUITE( "conformal" )
{
    TEST_CASE( "mode names" )
    {
        CHECK( to_string( CalibrationMode::PerReference ) == "per-reference" );
        CHECK( calibration_mode_from_string( "offline-global" ) == CalibrationMode::OfflineGlobal );
        CHECK_THROWS_AS( calibration_mode_from_string( "online" ), ValidationError );
    }

    TEST_CASE( "exactly modelled plant has zero calibration error" )
    {
        const auto lin = fixture::exact_linear( 20 );
        const CalibrationData d = collect_calibration( lin.system, lin.model, lin.plan, lin.gains, { 10, 5, 0.2, 3 } );
        REQUIRE( d.scoring.size() == 10 );
        REQUIRE( d.normalization.size() == 5 );
        for ( const auto &e : d.scoring )
            CHECK( e.isZero( 0.0 ) );
        for ( const auto &e : d.normalization )
            CHECK( e.isZero( 0.0 ) );
    }

    TEST_CASE( "calibration datasets: shapes, determinism, disjoint draws" )
    {
        const Loop l = unicycle_loop( 30 );
        const CalibrationSettings s{ 100, 50, 0.1, 9 };
        const CalibrationData a = collect_calibration( l.system, l.model, l.plan, l.gains, s );
        REQUIRE( a.scoring.size() == 100 );
        REQUIRE( a.normalization.size() == 50 );
        CHECK( a.scoring[0].rows() == 31 );
        CHECK( a.scoring[0].cols() == 3 );
        CHECK( a.normalization[0].rows() == 31 );
        CHECK( a.mode == CalibrationMode::PerReference );
        // x0 = x_ref_0 + noise; the decoded start is x0 itself
        CHECK( a.scoring[0].row( 0 ).isZero( 0.0 ) );

        const CalibrationData b = collect_calibration( l.system, l.model, l.plan, l.gains, s );
        for ( std::size_t i = 0; i < 100; ++i )
            CHECK( a.scoring[i] == b.scoring[i] );
        for ( const auto &e : a.normalization )
            for ( const auto &f : a.scoring )
                CHECK( e != f );

        CalibrationSettings other = s;
        other.seed = 10;
        CHECK( collect_calibration( l.system, l.model, l.plan, l.gains, other ).scoring[0] != a.scoring[0] );

        CalibrationSettings bad = s;
        bad.k_cal = 0;
        CHECK_THROWS_AS( collect_calibration( l.system, l.model, l.plan, l.gains, bad ), ValidationError );
    }

    TEST_CASE( "offline-global calibration samples fresh references" )
    {
        const Loop l = unicycle_loop( 20 );
        const CalibrationSource src = l.generator;
        const ClosedLoopSample a = sample_closed_loop( l.system, l.model, src, l.gains, 0.1, 1 );
        const ClosedLoopSample b = sample_closed_loop( l.system, l.model, src, l.gains, 0.1, 2 );
        CHECK( a.plan.x_ref.states != b.plan.x_ref.states );
        CHECK( sample_closed_loop( l.system, l.model, src, l.gains, 0.1, 1 ).true_rollout.states == a.true_rollout.states );
        CHECK( Box::around( a.plan.x_ref.states.front(), 0.1 ).contains( a.true_rollout.states.front() ) );

        const CalibrationData d = collect_calibration( l.system, l.model, src, l.gains, { 8, 4, 0.1, 5 } );
        CHECK( d.mode == CalibrationMode::OfflineGlobal );

        const ClosedLoopSample fixed = sample_closed_loop( l.system, l.model, l.plan, l.gains, 0.1, 1 );
        CHECK( fixed.plan.x_ref.states == l.plan.x_ref.states );
        CHECK( fixed.error.isApprox( [&] {
            ErrorTrajectory e( 21, 3 );
            for ( int t = 0; t <= 20; ++t )
                e.row( t ) = ( fixed.true_rollout.states[t] - fixed.decoded_rollout.states[t] ).transpose();
            return e;
        }() ) );
    }

    TEST_CASE( "normalization weights" )
    {
        const std::vector<ErrorTrajectory> zeros( 3, Eigen::MatrixXd::Zero( 4, 2 ) );
        const NormalizationWeights z = normalization_weights( zeros, 1e-3 );
        CHECK( z.lambda.isApprox( Eigen::MatrixXd::Constant( 4, 2, 1000.0 ) ) );

        Rng rng( 1 );
        const std::vector<ErrorTrajectory> one{ oracle::random_matrix( 4, 2, rng ) };
        CHECK( normalization_weights( one ).e_max == one[0].cwiseAbs() );

        std::vector<ErrorTrajectory> two{ oracle::random_matrix( 5, 3, rng ), oracle::random_matrix( 5, 3, rng ) };
        const NormalizationWeights w = normalization_weights( two, 0.01 );
        CHECK( w.e_max == oracle::elementwise_abs_max( two ) );
        for ( int i = 0; i < 5; ++i )
            for ( int j = 0; j < 3; ++j )
                CHECK( w.lambda( i, j ) == 1.0 / ( w.e_max( i, j ) + 0.01 ) );
        CHECK( w.sigma == 0.01 );

        CHECK_THROWS_AS( normalization_weights( {} ), ValidationError );
        CHECK_THROWS_AS( normalization_weights( one, 0.0 ), ValidationError );
        two.push_back( Eigen::MatrixXd::Zero( 4, 3 ) );
        CHECK_THROWS_AS( normalization_weights( two ), DimensionMismatch );
    }

    TEST_CASE( "nonconformity scores" )
    {
        const Eigen::MatrixXd ones = Eigen::MatrixXd::Ones( 3, 2 );
        ErrorTrajectory e = Eigen::MatrixXd::Zero( 3, 2 );
        CHECK( nonconformity_scores( std::vector<ErrorTrajectory>{ e }, ones )[0] == 0.0 );
        e( 1, 1 ) = -3.0;
        CHECK( nonconformity_scores( std::vector<ErrorTrajectory>{ e }, ones )[0] == 3.0 );

        Rng rng( 2 );
        std::vector<ErrorTrajectory> set;
        for ( int i = 0; i < 6; ++i )
            set.push_back( oracle::random_matrix( 4, 3, rng ) );
        const Eigen::MatrixXd lambda = oracle::random_matrix( 4, 3, rng ).cwiseAbs();
        const auto scores = nonconformity_scores( set, lambda );
        for ( std::size_t k = 0; k < set.size(); ++k )
        {
            double best = 0.0;
            for ( int i = 0; i < 4; ++i )
                for ( int j = 0; j < 3; ++j )
                    best = std::max( best, lambda( i, j ) * std::abs( set[k]( i, j ) ) );
            CHECK( scores[k] == best );
        }
        CHECK_THROWS_AS( nonconformity_scores( set, Eigen::MatrixXd::Ones( 3, 3 ) ), DimensionMismatch );
    }

    TEST_CASE( "diverged entries: infinite score, no effect on e_max" )
    {
        Rng rng( 3 );
        const ErrorTrajectory finite = oracle::random_matrix( 4, 2, rng );
        ErrorTrajectory blown = oracle::random_matrix( 4, 2, rng );
        blown( 3, 0 ) = INF;
        const std::vector<ErrorTrajectory> set{ finite, blown };
        CHECK( normalization_weights( set ).e_max.allFinite() );
        CHECK( normalization_weights( set ).e_max( 3, 0 ) == std::abs( finite( 3, 0 ) ) );
        const auto scores = nonconformity_scores( set, Eigen::MatrixXd::Ones( 4, 2 ) );
        CHECK( std::isfinite( scores[0] ) );
        CHECK( scores[1] == INF );
        // a zero weight must not turn the diverged entry into a NaN score
        CHECK( nonconformity_scores( set, Eigen::MatrixXd::Zero( 4, 2 ) )[1] == INF );
    }

    TEST_CASE( "diverged plant: infinite errors, unbounded CKRS, every test a miss" )
    {
        auto lin = fixture::exact_linear( 20 );
        const auto plant = DynamicsSystem::linear( 1e100 * lin.system.linear_a(), lin.system.linear_b(), 0.1 );
        const auto s = sample_closed_loop( plant, lin.model, CalibrationSource( lin.plan ), lin.gains, 0.1, 5 );
        CHECK_FALSE( s.error.array().isNaN().any() );
        CHECK( ( s.error.array() == INF ).any() );

        const CalibrationData data =
            collect_calibration( plant, lin.model, CalibrationSource( lin.plan ), lin.gains, { 20, 10, 0.1, 9 } );
        const ConformalBounds b = conformalize( data, 0.1 );
        CHECK( b.weights.lambda.allFinite() );
        CHECK( b.unbounded() );

        ReachTube everything;
        for ( int t = 0; t <= 20; ++t )
            everything.boxes.push_back( Box( Eigen::VectorXd::Constant( 3, -INF ), Eigen::VectorXd::Constant( 3, INF ) ) );
        CHECK( empirical_coverage( plant, lin.model, lin.plan, lin.gains, everything, 10, 0.1, 1 ).successes == 0 );
    }

    TEST_CASE( "conformal quantile" )
    {
        std::vector<double> nine( 9 );
        std::iota( nine.begin(), nine.end(), 1.0 );
        CHECK( conformal_rank( 9, 0.1 ) == 9 );
        CHECK( conformal_quantile( nine, 0.1 ) == 9.0 );

        const std::vector<double> five{ 0.3, 0.1, 0.5, 0.2, 0.4 };
        CHECK( conformal_rank( 5, 0.01 ) == 6 );
        CHECK( conformal_quantile( five, 0.01 ) == INF );

        Rng rng( 3 );
        std::vector<double> hundred( 100 );
        for ( auto &s : hundred )
            s = uniform( rng, 0, 10 );
        CHECK( conformal_quantile( hundred, 0.05 ) == oracle::sorted_quantile( hundred, 96 ) );

        // ties count with multiplicity
        const std::vector<double> ties{ 2, 1, 2, 2, 3 };
        CHECK( conformal_quantile( ties, 0.5 ) == 2.0 );

        CHECK_THROWS_AS( conformal_quantile( five, 0.0 ), ValidationError );
        CHECK_THROWS_AS( conformal_quantile( five, 1.0 ), ValidationError );
        CHECK_THROWS_AS( conformal_quantile( {}, 0.1 ), ValidationError );
    }

    TEST_CASE( "quantile agrees with the sort oracle on random sets" )
    {
        Rng rng( 4 );
        for ( int trial = 0; trial < 300; ++trial )
        {
            const int k = 1 + static_cast<int>( rng() % 60 );
            const long d = 1 + static_cast<long>( rng() % 999999 );
            std::vector<double> scores( k );
            for ( auto &s : scores )
                s = static_cast<double>( rng() % 7 ) * 0.5; // plenty of ties
            const double delta = static_cast<double>( d ) / 1e6;
            const long p = oracle::conformal_rank_exact( k, d );
            CHECK( conformal_rank( k, delta ) == p );
            CHECK( conformal_quantile( scores, delta ) == oracle::sorted_quantile( scores, p ) );
        }
    }

    TEST_CASE( "quantile monotonicity" )
    {
        Rng rng( 5 );
        std::vector<double> scores( 40 );
        for ( auto &s : scores )
            s = uniform( rng, 0, 1 );
        double prev = -INF;
        for ( double level = 0.01; level < 0.999; level += 0.01 )
        {
            const double c = conformal_quantile( scores, 1.0 - level );
            CHECK( c >= prev );
            prev = c;
        }

        // scores at the (i / (K+1))-quantiles of U(0, 1): C stays within
        // [1 - delta, 1 - delta + 1 / (K+1)], an envelope that shrinks with K
        const double delta = 0.1;
        for ( int k = 5; k <= 400; ++k )
        {
            std::vector<double> grid( k );
            for ( int i = 0; i < k; ++i )
                grid[i] = ( i + 1.0 ) / ( k + 1.0 );
            const double c = conformal_quantile( grid, delta );
            if ( k < 9 )
                CHECK( c == INF );
            else
            {
                CHECK( c >= 1.0 - delta - 1e-12 );
                CHECK( c <= 1.0 - delta + 1.0 / ( k + 1.0 ) + 1e-12 );
            }
        }
    }

    TEST_CASE( "error bounds" )
    {
        Rng rng( 6 );
        const Eigen::MatrixXd lambda = oracle::random_matrix( 3, 2, rng ).cwiseAbs() + Eigen::MatrixXd::Constant( 3, 2, 0.1 );
        CHECK( error_bounds( 0.0, lambda ).isZero( 0.0 ) );
        CHECK( error_bounds( 2.0, Eigen::MatrixXd::Ones( 3, 2 ) ) == Eigen::MatrixXd::Constant( 3, 2, 2.0 ) );
        const Eigen::MatrixXd e = error_bounds( 0.7, lambda );
        for ( int i = 0; i < 3; ++i )
            for ( int j = 0; j < 2; ++j )
                CHECK( e( i, j ) == 0.7 / lambda( i, j ) );
        CHECK( ( error_bounds( INF, lambda ).array() == INF ).all() );
        CHECK_THROWS_AS( error_bounds( -1.0, lambda ), ValidationError );
    }

    TEST_CASE( "conformalize and with_delta" )
    {
        const Loop l = unicycle_loop( 20 );
        const CalibrationData d = collect_calibration( l.system, l.model, l.plan, l.gains, { 40, 20, 0.1, 1 } );
        const ConformalBounds b = conformalize( d, 0.1 );
        CHECK( b.k_cal == 40 );
        CHECK( b.m_lambda == 20 );
        CHECK( b.delta == 0.1 );
        CHECK( b.weights.sigma == DEFAULT_SIGMA );
        CHECK( b.scores.size() == 40 );
        CHECK( b.c == oracle::sorted_quantile( b.scores, 37 ) );
        CHECK( b.e_bar.isApprox( b.c * b.weights.lambda.cwiseInverse() ) );
        CHECK_FALSE( b.unbounded() );

        const ConformalBounds b2 = with_delta( b, 0.3 );
        const ConformalBounds direct = conformalize( d, 0.3 );
        CHECK( b2.c == direct.c );
        CHECK( b2.e_bar == direct.e_bar );
        CHECK( b2.c <= b.c );
        CHECK( with_delta( b, 0.01 ).unbounded() );
    }

    TEST_CASE( "scores within C imply errors within the bounds" )
    {
        const Loop l = unicycle_loop( 25 );
        const CalibrationData d = collect_calibration( l.system, l.model, l.plan, l.gains, { 60, 30, 0.1, 2 } );
        for ( double delta : { 0.05, 0.2, 0.5 } )
        {
            const ConformalBounds b = conformalize( d, delta );
            int inside = 0;
            for ( std::size_t i = 0; i < d.scoring.size(); ++i )
            {
                if ( b.scores[i] > b.c )
                    continue;
                ++inside;
                CHECK( ( d.scoring[i].cwiseAbs().array() <= b.e_bar.array() * ( 1 + 1e-12 ) ).all() );
            }
            CHECK( inside >= conformal_rank( 60, delta ) );
        }
    }

    TEST_CASE( "inflation" )
    {
        const ReachTube krs = unit_tube( 4, 2 );
        const ReachTube same = inflate( krs, Eigen::MatrixXd::Zero( 5, 2 ) );
        CHECK( same.kind == TubeKind::CKRS );
        for ( int t = 0; t <= 4; ++t )
        {
            CHECK( same.boxes[t].lower == krs.boxes[t].lower );
            CHECK( same.boxes[t].upper == krs.boxes[t].upper );
        }

        const ReachTube wide = inflate( krs, Eigen::MatrixXd::Ones( 5, 2 ) );
        for ( int t = 0; t <= 4; ++t )
            CHECK( wide.boxes[t].width().isApprox( Eigen::VectorXd::Constant( 2, 3.0 ) ) );

        Rng rng( 7 );
        const ReachTube any = inflate( krs, oracle::random_matrix( 5, 2, rng ).cwiseAbs() );
        for ( int t = 0; t <= 4; ++t )
        {
            CHECK( ( any.boxes[t].lower.array() <= krs.boxes[t].lower.array() ).all() );
            CHECK( ( any.boxes[t].upper.array() >= krs.boxes[t].upper.array() ).all() );
        }
        CHECK_FALSE( any.provenance.unbounded );

        const ReachTube open = inflate( krs, Eigen::MatrixXd::Constant( 5, 2, INF ) );
        CHECK( open.provenance.unbounded );
        CHECK_FALSE( open.boxes[2].bounded() );

        CHECK_THROWS_AS( inflate( krs, Eigen::MatrixXd::Zero( 4, 2 ) ), DimensionMismatch );
        CHECK_THROWS_AS( inflate( wide, Eigen::MatrixXd::Zero( 5, 2 ) ), ValidationError );
        CHECK_THROWS_AS( inflate( krs, -Eigen::MatrixXd::Ones( 5, 2 ) ), ValidationError );
    }

    TEST_CASE( "inflate records calibration metadata" )
    {
        ConformalBounds b;
        b.e_bar = Eigen::MatrixXd::Constant( 5, 2, 0.2 );
        b.c = 1.5;
        b.delta = 0.05;
        b.mode = CalibrationMode::OfflineGlobal;
        ReachTube krs = unit_tube( 4, 2 );
        krs.provenance.reference_id = "ref";
        const ReachTube ckrs = inflate( krs, b );
        CHECK( ckrs.provenance.delta == 0.05 );
        CHECK( ckrs.provenance.quantile == 1.5 );
        CHECK( ckrs.provenance.calibration_mode == "offline-global" );
        CHECK( ckrs.provenance.reference_id == "ref" );
    }

    TEST_CASE( "empirical coverage extremes" )
    {
        const Loop l = unicycle_loop( 15 );
        ReachTube everything;
        for ( int t = 0; t <= 15; ++t )
            everything.boxes.push_back( Box( Eigen::VectorXd::Constant( 3, -INF ), Eigen::VectorXd::Constant( 3, INF ) ) );
        const CoverageResult all = empirical_coverage( l.system, l.model, l.plan, l.gains, everything, 30, 0.1, 1 );
        CHECK( all.trials == 30 );
        CHECK( all.fraction() == 1.0 );

        ReachTube nowhere;
        for ( int t = 0; t <= 15; ++t )
            nowhere.boxes.push_back( Box::around( Eigen::VectorXd::Constant( 3, 50.0 ), 0.0 ) );
        CHECK( empirical_coverage( l.system, l.model, l.plan, l.gains, nowhere, 30, 0.1, 1 ).fraction() == 0.0 );
        CHECK_THROWS_AS( empirical_coverage( l.system, l.model, l.plan, l.gains, nowhere, 0, 0.1, 1 ), ValidationError );
    }

    TEST_CASE( "exactly modelled plant is fully covered by its own CKRS" )
    {
        const auto lin = fixture::exact_linear( 30 );
        const Box x0 = Box::around( lin.plan.x_ref.states.front(), 0.1 );
        const ReachTube krs = compute_krs( lin.model, lin.plan, lin.gains, x0 );
        const CalibrationData d = collect_calibration( lin.system, lin.model, lin.plan, lin.gains, { 30, 15, 0.1, 4 } );
        const ConformalBounds b = conformalize( d, 0.1 );
        CHECK( b.c == 0.0 );
        CHECK( b.e_bar.isZero( 0.0 ) );
        const ReachTube ckrs = inflate( krs, b );
        CHECK( empirical_coverage( lin.system, lin.model, lin.plan, lin.gains, ckrs, 100, 0.1, 5 ).fraction() == 1.0 );
    }

    TEST_CASE( "generator coverage builds a tube per reference" )
    {
        const Loop l = unicycle_loop( 10 );
        int calls = 0;
        const auto tube_for = [&]( const ReferencePlan &plan ) {
            ++calls;
            ReachTube t;
            for ( const auto &x : plan.x_ref.states )
                t.boxes.push_back( Box::around( x, 1e6 ) );
            return t;
        };
        const CoverageResult r = empirical_coverage( l.system, l.model, l.generator, l.gains, tube_for, 12, 0.1, 3 );
        CHECK( calls == 12 );
        CHECK( r.fraction() == 1.0 );
    }

    TEST_CASE( "plot rollouts follow the test draw procedure" )
    {
        const Loop l = unicycle_loop( 10 );
        const auto runs = sample_true_rollouts( l.system, l.model, l.plan, l.gains, 0.1, 5, 8 );
        REQUIRE( runs.size() == 5 );
        for ( const auto &r : runs )
        {
            CHECK( r.horizon() == 10 );
            CHECK( Box::around( l.plan.x_ref.states.front(), 0.1 ).contains( r.states.front() ) );
        }
    }

    TEST_CASE( "Beta posterior" )
    {
        const BetaPosterior u = beta_posterior( 0, 0 );
        CHECK( u.alpha == 1.0 );
        CHECK( u.beta == 1.0 );
        CHECK( u.variance == doctest::Approx( 1.0 / 12.0 ) );
        CHECK( beta_posterior( 10, 10 ).mode == 1.0 );

        const BetaPosterior p = beta_posterior( 90, 100 );
        const double a = 91, b = 11;
        CHECK( p.alpha == a );
        CHECK( p.beta == b );
        CHECK( p.mode == doctest::Approx( 0.9 ) );
        CHECK( p.mean == doctest::Approx( a / ( a + b ) ) );
        CHECK( p.variance == doctest::Approx( a * b / ( ( a + b ) * ( a + b ) * ( a + b + 1 ) ) ).epsilon( 1e-14 ) );
        CHECK_THROWS_AS( beta_posterior( 5, 4 ), ValidationError );
        CHECK_THROWS_AS( beta_posterior( -1, 4 ), ValidationError );
    }
}
