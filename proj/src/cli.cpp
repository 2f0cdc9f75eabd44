#include "kro/error.hpp"
#include "kro/harness.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <optional>

namespace kro {

namespace {

struct Overrides
{
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::optional<double> delta;
    std::optional<int> horizon;
    std::optional<std::string> out;
};

ExperimentConfig load_config( const Overrides &o )
{
    Json j = read_json( o.config_path );
    if ( !j.is_object() )
        throw ValidationError( o.config_path + ": expected a JSON object" );
    if ( o.seed )
        j["seed"] = *o.seed;
    if ( o.delta )
        j["delta"] = *o.delta;
    if ( o.horizon )
        j["horizon"] = *o.horizon;
    if ( o.out )
        j["output_dir"] = *o.out;
    return ExperimentConfig::from_json( j );
}

std::filesystem::path out_path( const ExperimentConfig &c, const char *name )
{
    return std::filesystem::path( c.output_dir ) / name;
}

KoopmanModel load_model( const ExperimentConfig &c )
{
    return model_from_json( read_json( out_path( c, artifact::MODEL ) ) );
}

void warn_if_unbounded( const ConformalBounds &b )
{
    if ( b.unbounded() )
        std::cerr << "warning: K_cal = " << b.k_cal << " is too small for delta = " << b.delta
                  << "; the quantile is +inf and the CKRS is unbounded\n";
}

int cmd_train( const ExperimentConfig &c )
{
    const KoopmanModel model = train_model( c );
    write_json( out_path( c, artifact::MODEL ), to_json( model ) );
    std::printf( "trained %s model: loss %.6g -> %.6g\n", c.system.c_str(), model.training->initial_loss,
                 model.training->final_loss );
    std::printf( "wrote %s\n", out_path( c, artifact::MODEL ).string().c_str() );
    return 0;
}

int cmd_calibrate( const ExperimentConfig &c )
{
    const Setup setup = prepare( c, load_model( c ) );
    const ConformalBounds bounds = calibrate( c, setup );
    write_json( out_path( c, artifact::PLAN ), to_json( setup.plan ) );
    write_json( out_path( c, artifact::GAINS ), to_json( setup.gains ) );
    write_json( out_path( c, artifact::BOUNDS ), to_json( bounds ) );
    warn_if_unbounded( bounds );
    std::printf( "calibrated (%s, K_cal=%d, M_lambda=%d): C = %.6g at delta = %.4g\n", to_string( bounds.mode ).c_str(),
                 bounds.k_cal, bounds.m_lambda, bounds.c, bounds.delta );
    std::printf( "wrote %s\n", out_path( c, artifact::BOUNDS ).string().c_str() );
    return 0;
}

int cmd_reach( const ExperimentConfig &c )
{
    const Setup setup = prepare( c, load_model( c ) );
    const ReachTube krs = reach( setup );
    write_json( out_path( c, artifact::KRS ), to_json( krs ) );
    write_tube_csv( out_path( c, artifact::KRS_CSV ), krs );
    std::printf( "KRS: T=%d, avg log volume %.6g\n", krs.horizon(), avg_log_volume( krs ).value );
    const auto bounds_path = out_path( c, artifact::BOUNDS );
    if ( std::filesystem::exists( bounds_path ) )
    {
        const ConformalBounds bounds = with_delta( bounds_from_json( read_json( bounds_path ) ), c.delta );
        if ( bounds.config_hash != sampling_hash( c, setup ) )
            throw ValidationError( bounds_path.string() + " was calibrated under a different sampling procedure" );
        warn_if_unbounded( bounds );
        const ReachTube ckrs = inflate( krs, bounds );
        write_json( out_path( c, artifact::CKRS ), to_json( ckrs ) );
        write_tube_csv( out_path( c, artifact::CKRS_CSV ), ckrs );
        const LogVolume v = avg_log_volume( ckrs );
        std::printf( "CKRS: delta=%.4g, avg log volume %s\n", c.delta, v.unbounded ? "inf (unbounded)" : std::to_string( v.value ).c_str() );
    }
    return 0;
}

int cmd_verify( const ExperimentConfig &c )
{
    const Setup setup = prepare( c, load_model( c ) );
    const ConformalBounds bounds = with_delta( bounds_from_json( read_json( out_path( c, artifact::BOUNDS ) ) ), c.delta );
    warn_if_unbounded( bounds );
    const ReachTube ckrs = inflate( reach( setup ), bounds );
    const CoverageResult cov = verify( c, setup, ckrs, bounds );
    const bool met = cov.fraction() >= 1.0 - c.delta;
    std::printf( "coverage %.4f (%d/%d), target 1-delta = %.4f: %s\n", cov.fraction(), cov.successes, cov.trials,
                 1.0 - c.delta, met ? "MET" : "NOT MET" );
    return 0;
}

int cmd_report( const ExperimentConfig &c )
{
    const RunReport r = run_pipeline( c );
    if ( std::isinf( r.quantile ) )
        std::cerr << "warning: the quantile is +inf; the CKRS is unbounded\n";
    std::printf( "%s: CP %.3fs, KRS %.3fs, total %.3fs\n", r.system.c_str(), r.timings.cp, r.timings.krs, r.timings.total );
    std::printf( "avg log volume (%s): KRS %.6g, CKRS %.6g\n", "repo convention", r.krs_volume.value, r.ckrs_volume.value );
    std::printf( "coverage CKRS %.4f (%d/%d), KRS %.4f; target %.4f %s\n", r.ckrs_coverage.fraction(), r.ckrs_coverage.successes,
                 r.ckrs_coverage.trials, r.krs_coverage.fraction(), 1.0 - r.delta, r.meets_target ? "MET" : "NOT MET" );
    std::printf( "wrote %s\n", ( std::filesystem::path( c.output_dir ) / artifact::REPORT ).string().c_str() );
    return 0;
}

} // namespace

int cli( int argc, char **argv )
{
    CLI::App app( "Koopman reachable sets with conformal inflation" );
    app.require_subcommand( 1 );
    Overrides o;
    std::uint64_t seed = 0;
    double delta = 0.0;
    int horizon = 0;
    std::string out;

    struct Command
    {
        const char *name;
        const char *help;
        int ( *run )( const ExperimentConfig & );
    };
    const Command commands[] = {
        { "train", "generate data and train the Koopman model", cmd_train },
        { "calibrate", "collect calibration rollouts and compute conformal bounds", cmd_calibrate },
        { "reach", "compute the KRS (and the CKRS when bounds exist)", cmd_reach },
        { "verify", "measure empirical coverage of the CKRS on fresh rollouts", cmd_verify },
        { "report", "run the whole pipeline and write every artifact", cmd_report },
    };
    std::vector<std::pair<CLI::App *, const Command *>> subs;
    for ( const auto &cmd : commands )
    {
        CLI::App *sub = app.add_subcommand( cmd.name, cmd.help );
        sub->add_option( "config", o.config_path, "experiment config (JSON)" )->required();
        sub->add_option( "--seed", seed, "global seed (falls back to KRO_SEED, then the config)" );
        sub->add_option( "--delta", delta, "miscoverage level in (0, 1)" );
        sub->add_option( "--horizon", horizon, "tracking horizon T" );
        sub->add_option( "--out", out, "output directory" );
        subs.emplace_back( sub, &cmd );
    }

    try
    {
        app.parse( argc, argv );
    }
    catch ( const CLI::Success &e )
    {
        return app.exit( e );
    }
    catch ( const CLI::ParseError &e )
    {
        app.exit( e );
        return 1;
    }

    for ( const auto &[sub, cmd] : subs )
    {
        if ( !sub->parsed() )
            continue;
        if ( sub->count( "--seed" ) )
            o.seed = seed;
        if ( sub->count( "--delta" ) )
            o.delta = delta;
        if ( sub->count( "--horizon" ) )
            o.horizon = horizon;
        if ( sub->count( "--out" ) )
            o.out = out;
        try
        {
            return cmd->run( load_config( o ) );
        }
        catch ( const ValidationError &e )
        {
            std::cerr << "error: " << e.what() << "\n";
            return 1;
        }
        catch ( const std::exception &e )
        {
            std::cerr << "error: " << e.what() << "\n";
            return 2;
        }
    }
    return 1;
}

} // namespace kro
