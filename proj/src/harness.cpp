#include "kro/harness.hpp"

#include "kro/error.hpp"
#include "kro/rng.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <limits>

namespace kro {

namespace {

enum Stream : std::uint64_t
{
    TRAIN_DATA = 1,
    TRAIN = 2,
    REFERENCE = 3,
    CALIBRATION = 4,
    TEST = 5,
    PLOT = 6,
    GLOBAL_GENERATOR = 7,
};

using Clock = std::chrono::steady_clock;

double seconds( Clock::time_point a, Clock::time_point b )
{
    return std::chrono::duration<double>( b - a ).count();
}

// Runs fn, prefixing any library error with the stage name while keeping
// the validation/runtime distinction the CLI exit codes rely on.
template <typename Fn>
auto staged( const char *stage, Fn &&fn ) -> decltype( fn() )
{
    try
    {
        return fn();
    }
    catch ( const ValidationError &e )
    {
        throw ValidationError( std::string( stage ) + ": " + e.what() );
    }
    catch ( const Error &e )
    {
        throw Error( std::string( stage ) + ": " + e.what() );
    }
}

Json coverage_to_json( const CoverageResult &c )
{
    return { { "successes", c.successes }, { "trials", c.trials }, { "fraction", c.fraction() } };
}

CoverageResult coverage_from_json( const Json &j )
{
    return { j.at( "successes" ).get<int>(), j.at( "trials" ).get<int>() };
}

Json volume_to_json( const LogVolume &v )
{
    return { { "value", number_to_json( v.value ) }, { "unbounded", v.unbounded } };
}

LogVolume volume_from_json( const Json &j )
{
    return { number_from_json( j.at( "value" ) ), j.at( "unbounded" ).get<bool>() };
}

const char *CONFIG_KEYS[] = { "system",      "horizon",       "delta",    "epsilon",    "architecture",
                              "training",    "train_trajectories", "train_horizon", "lqr", "k_cal",
                              "m_lambda",    "n_test",        "sigma",    "seed",       "mode",
                              "output_dir",  "plot_rollouts" };

} // namespace

ExperimentConfig ExperimentConfig::defaults_for( const std::string &system )
{
    ExperimentConfig c;
    c.system = system;
    if ( system == "unicycle" )
        c.architecture.latent_dim = 10;
    else if ( system == "planar_quad" || system == "quad3d" )
        c.architecture.latent_dim = 24;
    else
        throw ValidationError( "unknown system: " + system + " (expected unicycle, planar_quad or quad3d)" );
    return c;
}

void ExperimentConfig::validate() const
{
    const DynamicsSystem sys = DynamicsSystem::by_name( system );
    if ( horizon < 1 )
        throw ValidationError( "config: horizon must be >= 1" );
    if ( !( delta > 0.0 && delta < 1.0 ) )
        throw ValidationError( "config: delta must lie in (0, 1)" );
    if ( !( epsilon >= 0.0 ) || !std::isfinite( epsilon ) )
        throw ValidationError( "config: epsilon must be finite and nonnegative" );
    if ( architecture.latent_dim < sys.state_dim() )
        throw ValidationError( "config: latent_dim must be >= state dimension " + std::to_string( sys.state_dim() ) );
    for ( int h : architecture.hidden )
        if ( h < 1 )
            throw ValidationError( "config: hidden widths must be >= 1" );
    training.validate();
    if ( train_trajectories < 1 || train_horizon < training.horizon )
        throw ValidationError( "config: need >= 1 training trajectory of horizon >= training.horizon" );
    if ( !( lqr_q > 0.0 && lqr_r > 0.0 && lqr_q_terminal > 0.0 ) )
        throw ValidationError( "config: LQR weights must be positive" );
    if ( k_cal < 1 || m_lambda < 1 || n_test < 1 )
        throw ValidationError( "config: k_cal, m_lambda and n_test must be >= 1" );
    if ( !( sigma > 0.0 ) || !std::isfinite( sigma ) )
        throw ValidationError( "config: sigma must be positive" );
    if ( plot_rollouts < 0 )
        throw ValidationError( "config: plot_rollouts must be >= 0" );
    if ( output_dir.empty() )
        throw ValidationError( "config: output_dir must not be empty" );
}

Json ExperimentConfig::to_json() const
{
    Json t = kro::to_json( training );
    t.erase( "seed" );
    return { { "system", system },
             { "horizon", horizon },
             { "delta", delta },
             { "epsilon", epsilon },
             { "architecture",
               { { "latent_dim", architecture.latent_dim },
                 { "hidden", architecture.hidden },
                 { "activation", to_string( architecture.activation ) } } },
             { "training", t },
             { "train_trajectories", train_trajectories },
             { "train_horizon", train_horizon },
             { "lqr", { { "q", lqr_q }, { "r", lqr_r }, { "q_terminal", lqr_q_terminal } } },
             { "k_cal", k_cal },
             { "m_lambda", m_lambda },
             { "n_test", n_test },
             { "sigma", sigma },
             { "seed", seed },
             { "mode", to_string( mode ) },
             { "output_dir", output_dir },
             { "plot_rollouts", plot_rollouts } };
}

ExperimentConfig ExperimentConfig::from_json( const Json &j )
{
    if ( !j.is_object() )
        throw ValidationError( "config: expected a JSON object" );
    for ( const auto &[key, _] : j.items() )
        if ( std::find_if( std::begin( CONFIG_KEYS ), std::end( CONFIG_KEYS ), [&]( const char *k ) { return key == k; } ) ==
             std::end( CONFIG_KEYS ) )
            throw ValidationError( "config: unknown key '" + key + "'" );
    try
    {
        ExperimentConfig c = defaults_for( j.value( "system", std::string( "unicycle" ) ) );
        c.horizon = j.value( "horizon", c.horizon );
        c.delta = j.value( "delta", c.delta );
        c.epsilon = j.value( "epsilon", c.epsilon );
        if ( j.contains( "architecture" ) )
        {
            const Json &a = j.at( "architecture" );
            for ( const auto &[key, _] : a.items() )
                if ( key != "latent_dim" && key != "hidden" && key != "activation" )
                    throw ValidationError( "config: unknown architecture key '" + key + "'" );
            c.architecture.latent_dim = a.value( "latent_dim", c.architecture.latent_dim );
            c.architecture.hidden = a.value( "hidden", c.architecture.hidden );
            if ( a.contains( "activation" ) )
                c.architecture.activation = activation_from_string( a.at( "activation" ).get<std::string>() );
        }
        if ( j.contains( "training" ) )
        {
            if ( j.at( "training" ).contains( "seed" ) )
                throw ValidationError( "config: the training seed derives from the top-level seed" );
            c.training = training_config_from_json( j.at( "training" ), c.training );
        }
        c.train_trajectories = j.value( "train_trajectories", c.train_trajectories );
        c.train_horizon = j.value( "train_horizon", c.train_horizon );
        if ( j.contains( "lqr" ) )
        {
            const Json &l = j.at( "lqr" );
            for ( const auto &[key, _] : l.items() )
                if ( key != "q" && key != "r" && key != "q_terminal" )
                    throw ValidationError( "config: unknown lqr key '" + key + "'" );
            c.lqr_q = l.value( "q", c.lqr_q );
            c.lqr_r = l.value( "r", c.lqr_r );
            c.lqr_q_terminal = l.value( "q_terminal", c.lqr_q_terminal );
        }
        c.k_cal = j.value( "k_cal", c.k_cal );
        c.m_lambda = j.contains( "m_lambda" ) ? j.at( "m_lambda" ).get<int>()
                                              : ( j.contains( "k_cal" ) ? std::max( 1, c.k_cal / 2 ) : c.m_lambda );
        c.n_test = j.value( "n_test", c.n_test );
        c.sigma = j.value( "sigma", c.sigma );
        if ( j.contains( "seed" ) )
            c.seed = j.at( "seed" ).get<std::uint64_t>();
        else if ( const char *env = std::getenv( "KRO_SEED" ) )
        {
            char *end = nullptr;
            c.seed = std::strtoull( env, &end, 10 );
            if ( end == env || *end != '\0' )
                throw ValidationError( std::string( "KRO_SEED is not an unsigned integer: " ) + env );
        }
        if ( j.contains( "mode" ) )
            c.mode = calibration_mode_from_string( j.at( "mode" ).get<std::string>() );
        c.output_dir = j.value( "output_dir", c.output_dir );
        c.plot_rollouts = j.value( "plot_rollouts", c.plot_rollouts );
        c.validate();
        return c;
    }
    catch ( const Json::exception &e )
    {
        throw ValidationError( std::string( "config: " ) + e.what() );
    }
}

ExperimentConfig ExperimentConfig::load( const std::filesystem::path &path )
{
    return from_json( read_json( path ) );
}

std::string ExperimentConfig::hash() const
{
    Json j = to_json();
    j.erase( "output_dir" );
    return content_hash( j );
}

LogVolume avg_log_volume( const ReachTube &tube )
{
    if ( tube.boxes.empty() )
        throw ValidationError( "avg_log_volume: empty tube" );
    LogVolume v;
    double sum = 0.0;
    for ( const auto &box : tube.boxes )
    {
        if ( !box.bounded() )
            return { std::numeric_limits<double>::infinity(), true };
        for ( int j = 0; j < box.dim(); ++j )
            sum += std::log( std::max( box.upper[j] - box.lower[j], LOG_VOLUME_WIDTH_FLOOR ) );
    }
    v.value = sum / static_cast<double>( tube.boxes.size() );
    return v;
}

ReferenceGeneratorConfig generator_for( const ExperimentConfig &config, int horizon, std::uint64_t stream )
{
    auto cfg = ReferenceGeneratorConfig::defaults_for( DynamicsSystem::by_name( config.system ), horizon );
    cfg.seed = derive_seed( config.seed, stream );
    return cfg;
}

KoopmanModel train_model( const ExperimentConfig &config )
{
    config.validate();
    const DynamicsSystem system = DynamicsSystem::by_name( config.system );
    TrainingDataset data;
    data.trajectories =
        generate_dataset( system, generator_for( config, config.train_horizon, TRAIN_DATA ), config.train_trajectories );
    TrainingConfig tc = config.training;
    tc.seed = derive_seed( config.seed, TRAIN );
    return train( data, config.architecture, tc );
}

Setup prepare( const ExperimentConfig &config, KoopmanModel model )
{
    config.validate();
    Setup s{ DynamicsSystem::by_name( config.system ), std::move( model ), {}, {}, {}, {}, {} };
    if ( s.model.state_dim() != s.system.state_dim() || s.model.control_dim() != s.system.control_dim() )
        throw DimensionMismatch( "model dimensions do not match system " + config.system );
    const Trajectory reference = generate_reference( s.system, generator_for( config, config.horizon, REFERENCE ) );
    s.plan = make_plan( s.model, reference );
    const auto weights = LqrWeights::diagonal( s.model.latent_dim(), s.model.control_dim(), config.lqr_q, config.lqr_r,
                                               config.lqr_q_terminal );
    s.gains = riccati_gains( s.model.ka, s.model.kb, weights, config.horizon );
    s.initial_set = Box::around( reference.states.front(), config.epsilon );
    s.model_hash = content_hash( kro::to_json( s.model ) );
    s.reference_id = content_hash( kro::to_json( s.plan ) );
    return s;
}

std::string sampling_hash( const ExperimentConfig &config, const Setup &setup )
{
    Json j = { { "system", config.system },
               { "model", setup.model_hash },
               { "gains", content_hash( kro::to_json( setup.gains ) ) },
               { "epsilon", config.epsilon },
               { "mode", to_string( config.mode ) } };
    if ( config.mode == CalibrationMode::PerReference )
        j["reference"] = setup.reference_id;
    else
    {
        // per-sample generator seeds are drawn from the sample seed
        auto gen = generator_for( config, config.horizon, GLOBAL_GENERATOR );
        gen.seed = 0;
        j["reference"] = kro::to_json( gen );
    }
    return content_hash( j );
}

ConformalBounds calibrate( const ExperimentConfig &config, const Setup &setup )
{
    CalibrationSource source = setup.plan;
    if ( config.mode == CalibrationMode::OfflineGlobal )
        source = generator_for( config, config.horizon, GLOBAL_GENERATOR );
    const CalibrationSettings settings{ config.k_cal, config.m_lambda, config.epsilon, derive_seed( config.seed, CALIBRATION ) };
    const CalibrationData data = collect_calibration( setup.system, setup.model, source, setup.gains, settings );
    ConformalBounds bounds = conformalize( data, config.delta, config.sigma );
    bounds.config_hash = sampling_hash( config, setup );
    return bounds;
}

ReachTube reach( const Setup &setup )
{
    ReachTube tube = compute_krs( setup.model, setup.plan, setup.gains, setup.initial_set );
    tube.provenance.reference_id = setup.reference_id;
    tube.provenance.model_hash = setup.model_hash;
    return tube;
}

CoverageResult verify( const ExperimentConfig &config, const Setup &setup, const ReachTube &tube, const ConformalBounds &bounds )
{
    if ( bounds.config_hash != sampling_hash( config, setup ) )
        throw ValidationError( "bounds were calibrated under a different sampling procedure (config hash " +
                               bounds.config_hash + ")" );
    return empirical_coverage( setup.system, setup.model, setup.plan, setup.gains, tube, config.n_test, config.epsilon,
                               derive_seed( config.seed, TEST ) );
}

Json RunReport::to_json() const
{
    Json arts = artifacts;
    return { { "system", system },
             { "config_hash", config_hash },
             { "model_hash", model_hash },
             { "reference_id", reference_id },
             { "timings",
               { { "setup", timings.setup },
                 { "cp", timings.cp },
                 { "krs", timings.krs },
                 { "inflate", timings.inflate },
                 { "coverage", timings.coverage },
                 { "artifacts", timings.artifacts },
                 { "total", timings.total } } },
             { "avg_log_volume",
               { { "krs", volume_to_json( krs_volume ) },
                 { "ckrs", volume_to_json( ckrs_volume ) },
                 { "convention", LOG_VOLUME_CONVENTION } } },
             { "coverage", { { "ckrs", coverage_to_json( ckrs_coverage ) }, { "krs", coverage_to_json( krs_coverage ) } } },
             { "beta_posterior",
               { { "alpha", posterior.alpha },
                 { "beta", posterior.beta },
                 { "mode", posterior.mode },
                 { "mean", posterior.mean },
                 { "variance", posterior.variance } } },
             { "delta", delta },
             { "C", number_to_json( quantile ) },
             { "calibration_mode", calibration_mode },
             { "meets_target", meets_target },
             { "artifacts", arts } };
}

RunReport RunReport::from_json( const Json &j )
{
    try
    {
        RunReport r;
        r.system = j.at( "system" ).get<std::string>();
        r.config_hash = j.at( "config_hash" ).get<std::string>();
        r.model_hash = j.at( "model_hash" ).get<std::string>();
        r.reference_id = j.at( "reference_id" ).get<std::string>();
        const Json &t = j.at( "timings" );
        r.timings = { t.at( "setup" ).get<double>(),    t.at( "cp" ).get<double>(),
                      t.at( "krs" ).get<double>(),      t.at( "inflate" ).get<double>(),
                      t.at( "coverage" ).get<double>(), t.at( "artifacts" ).get<double>(),
                      t.at( "total" ).get<double>() };
        r.krs_volume = volume_from_json( j.at( "avg_log_volume" ).at( "krs" ) );
        r.ckrs_volume = volume_from_json( j.at( "avg_log_volume" ).at( "ckrs" ) );
        r.ckrs_coverage = coverage_from_json( j.at( "coverage" ).at( "ckrs" ) );
        r.krs_coverage = coverage_from_json( j.at( "coverage" ).at( "krs" ) );
        const Json &b = j.at( "beta_posterior" );
        r.posterior = { b.at( "alpha" ).get<double>(), b.at( "beta" ).get<double>(), b.at( "mode" ).get<double>(),
                        b.at( "mean" ).get<double>(), b.at( "variance" ).get<double>() };
        r.delta = j.at( "delta" ).get<double>();
        r.quantile = number_from_json( j.at( "C" ) );
        r.calibration_mode = j.at( "calibration_mode" ).get<std::string>();
        r.meets_target = j.at( "meets_target" ).get<bool>();
        r.artifacts = j.at( "artifacts" ).get<std::vector<std::string>>();
        return r;
    }
    catch ( const Json::exception &e )
    {
        throw ValidationError( std::string( "report: malformed JSON (" ) + e.what() + ")" );
    }
}

RunReport run_pipeline( const ExperimentConfig &config )
{
    config.validate();
    const std::filesystem::path out( config.output_dir );
    const auto start = Clock::now();

    Setup setup = staged( "setup", [&] {
        const auto model_path = out / artifact::MODEL;
        KoopmanModel model =
            std::filesystem::exists( model_path ) ? model_from_json( read_json( model_path ) ) : train_model( config );
        return prepare( config, std::move( model ) );
    } );
    const auto t_setup = Clock::now();

    const ConformalBounds bounds = staged( "calibration", [&] { return calibrate( config, setup ); } );
    const auto t_cp = Clock::now();

    const ReachTube krs = staged( "reach", [&] { return reach( setup ); } );
    const auto t_krs = Clock::now();

    const ReachTube ckrs = staged( "inflate", [&] { return inflate( krs, bounds ); } );
    const auto t_inflate = Clock::now();

    RunReport report;
    staged( "coverage", [&] {
        report.ckrs_coverage = verify( config, setup, ckrs, bounds );
        report.krs_coverage = verify( config, setup, krs, bounds );
        return 0;
    } );
    const auto t_cov = Clock::now();

    staged( "artifacts", [&] {
        const DynamicsSystem &sys = setup.system;
        auto note = [&]( const char *name ) { report.artifacts.push_back( ( out / name ).string() ); };
        write_json( out / artifact::MODEL, to_json( setup.model ) );
        note( artifact::MODEL );
        write_json( out / artifact::PLAN, to_json( setup.plan ) );
        note( artifact::PLAN );
        write_json( out / artifact::GAINS, to_json( setup.gains ) );
        note( artifact::GAINS );
        write_json( out / artifact::REFERENCE,
                    to_json( setup.plan.x_ref, { sys.name(), sys.dt(), derive_seed( config.seed, REFERENCE ) } ) );
        note( artifact::REFERENCE );
        write_trajectory_csv( out / artifact::REFERENCE_CSV, setup.plan.x_ref );
        note( artifact::REFERENCE_CSV );
        write_json( out / artifact::BOUNDS, to_json( bounds ) );
        note( artifact::BOUNDS );
        write_json( out / artifact::KRS, to_json( krs ) );
        note( artifact::KRS );
        write_json( out / artifact::CKRS, to_json( ckrs ) );
        note( artifact::CKRS );
        write_tube_csv( out / artifact::KRS_CSV, krs );
        note( artifact::KRS_CSV );
        write_tube_csv( out / artifact::CKRS_CSV, ckrs );
        note( artifact::CKRS_CSV );

        PlotData plot;
        plot.krs = krs;
        plot.ckrs = ckrs;
        plot.reference = setup.plan.x_ref;
        plot.dt = sys.dt();
        plot.rollouts = sample_true_rollouts( sys, setup.model, setup.plan, setup.gains, config.epsilon,
                                              config.plot_rollouts, derive_seed( config.seed, PLOT ) );
        for ( const auto &p : emit_plots( plot, out / artifact::PLOTS ) )
            report.artifacts.push_back( p.string() );
        return 0;
    } );
    const auto t_art = Clock::now();

    report.system = config.system;
    report.config_hash = config.hash();
    report.model_hash = setup.model_hash;
    report.reference_id = setup.reference_id;
    report.timings = { seconds( start, t_setup ), seconds( t_setup, t_cp ),   seconds( t_cp, t_krs ),
                       seconds( t_krs, t_inflate ), seconds( t_inflate, t_cov ), seconds( t_cov, t_art ),
                       seconds( start, t_art ) };
    report.krs_volume = avg_log_volume( krs );
    report.ckrs_volume = avg_log_volume( ckrs );
    report.posterior = beta_posterior( report.ckrs_coverage.successes, report.ckrs_coverage.trials );
    report.delta = config.delta;
    report.quantile = bounds.c;
    report.calibration_mode = to_string( bounds.mode );
    report.meets_target = report.ckrs_coverage.fraction() >= 1.0 - config.delta;
    report.artifacts.push_back( ( out / artifact::REPORT ).string() );
    write_json( out / artifact::REPORT, report.to_json() );
    return report;
}

} // namespace kro
