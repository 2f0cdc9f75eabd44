#include "kro/conformal.hpp"

#include "kro/error.hpp"
#include "kro/rng.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace kro {

namespace {

constexpr std::uint64_t STREAM_SCORING = 0x5c0e;
constexpr std::uint64_t STREAM_NORMALIZATION = 0x4e0a;
constexpr std::uint64_t STREAM_TEST = 0x7e57;
constexpr std::uint64_t STREAM_PLOT = 0x9107;

const double INF = std::numeric_limits<double>::infinity();

ReferencePlan draw_plan( const DynamicsSystem &system, const KoopmanModel &model, const ReferenceGeneratorConfig &generator, Rng &rng )
{
    ReferenceGeneratorConfig cfg = generator;
    cfg.seed = rng();
    return make_plan( model, generate_reference( system, cfg ) );
}

StateVector draw_initial_state( const StateVector &center, double epsilon, Rng &rng )
{
    StateVector x0( center.size() );
    for ( Eigen::Index j = 0; j < center.size(); ++j )
        x0[j] = uniform( rng, center[j] - epsilon, center[j] + epsilon );
    return x0;
}

void check_shapes( std::span<const ErrorTrajectory> errors, const char *what )
{
    if ( errors.empty() )
        throw ValidationError( std::string( what ) + ": empty error set" );
    for ( const auto &e : errors )
        if ( e.rows() != errors.front().rows() || e.cols() != errors.front().cols() )
            throw DimensionMismatch( std::string( what ) + ": error trajectories differ in shape" );
}

// A diverged rollout is a miss even for an unbounded tube.
bool covered( const ReachTube &tube, const Trajectory &rollout )
{
    return std::all_of( rollout.states.begin(), rollout.states.end(), []( const StateVector &x ) { return x.allFinite(); } ) &&
           tube.contains( rollout );
}

} // namespace

std::string to_string( CalibrationMode mode )
{
    return mode == CalibrationMode::PerReference ? "per-reference" : "offline-global";
}

CalibrationMode calibration_mode_from_string( const std::string &name )
{
    if ( name == "per-reference" )
        return CalibrationMode::PerReference;
    if ( name == "offline-global" )
        return CalibrationMode::OfflineGlobal;
    throw ValidationError( "unknown calibration mode: " + name + " (expected per-reference or offline-global)" );
}

ClosedLoopSample sample_closed_loop( const DynamicsSystem &system,
                                     const KoopmanModel &model,
                                     const CalibrationSource &source,
                                     const GainSchedule &gains,
                                     double epsilon,
                                     std::uint64_t seed )
{
    if ( !( epsilon >= 0.0 ) || !std::isfinite( epsilon ) )
        throw ValidationError( "epsilon must be finite and nonnegative" );
    Rng rng( seed );
    ClosedLoopSample s;
    if ( const auto *plan = std::get_if<ReferencePlan>( &source ) )
        s.plan = *plan;
    else
        s.plan = draw_plan( system, model, std::get<ReferenceGeneratorConfig>( source ), rng );
    if ( s.plan.x_ref.states.empty() )
        throw ValidationError( "reference plan carries no reference states" );

    const StateVector x0 = draw_initial_state( s.plan.x_ref.states.front(), epsilon, rng );
    s.decoded_rollout = rollout_latent_decoded( model, s.plan, gains, x0 );
    s.true_rollout = rollout_true_closed_loop( system, model, s.plan, gains, x0 );

    const int rows = static_cast<int>( s.true_rollout.states.size() );
    s.error.resize( rows, model.state_dim() );
    for ( int t = 0; t < rows; ++t )
        s.error.row( t ) = ( s.true_rollout.states[t] - s.decoded_rollout.states[t] ).transpose();
    // A diverged rollout has unbounded error; NaN from inf - inf is recorded as inf too.
    s.error = s.error.unaryExpr( []( double e ) { return std::isfinite( e ) ? e : INF; } );
    return s;
}

void CalibrationSettings::validate() const
{
    if ( k_cal < 1 || m_lambda < 1 )
        throw ValidationError( "calibration: K_cal and M_lambda must be >= 1" );
    if ( !( epsilon >= 0.0 ) || !std::isfinite( epsilon ) )
        throw ValidationError( "calibration: epsilon must be finite and nonnegative" );
}

CalibrationData collect_calibration( const DynamicsSystem &system,
                                     const KoopmanModel &model,
                                     const CalibrationSource &source,
                                     const GainSchedule &gains,
                                     const CalibrationSettings &settings )
{
    settings.validate();
    CalibrationData data;
    data.mode = std::holds_alternative<ReferencePlan>( source ) ? CalibrationMode::PerReference
                                                                : CalibrationMode::OfflineGlobal;
    data.normalization.reserve( settings.m_lambda );
    for ( int i = 0; i < settings.m_lambda; ++i )
        data.normalization.push_back(
            sample_closed_loop( system, model, source, gains, settings.epsilon, derive_seed( settings.seed, STREAM_NORMALIZATION, i ) )
                .error );
    data.scoring.reserve( settings.k_cal );
    for ( int i = 0; i < settings.k_cal; ++i )
        data.scoring.push_back(
            sample_closed_loop( system, model, source, gains, settings.epsilon, derive_seed( settings.seed, STREAM_SCORING, i ) )
                .error );
    return data;
}

NormalizationWeights normalization_weights( std::span<const ErrorTrajectory> normalization, double sigma )
{
    check_shapes( normalization, "normalization_weights" );
    if ( !( sigma > 0.0 ) || !std::isfinite( sigma ) )
        throw ValidationError( "normalization_weights: sigma must be positive and finite" );
    NormalizationWeights w;
    w.sigma = sigma;
    w.e_max = Eigen::MatrixXd::Zero( normalization.front().rows(), normalization.front().cols() );
    // Diverged entries carry no scale information; they are left to the scores.
    for ( const auto &e : normalization )
        w.e_max = w.e_max.cwiseMax( e.cwiseAbs().unaryExpr( []( double a ) { return std::isfinite( a ) ? a : 0.0; } ) );
    w.lambda = ( w.e_max.array() + sigma ).inverse().matrix();
    return w;
}

std::vector<double> nonconformity_scores( std::span<const ErrorTrajectory> scoring, const Eigen::MatrixXd &lambda )
{
    check_shapes( scoring, "nonconformity_scores" );
    if ( scoring.front().rows() != lambda.rows() || scoring.front().cols() != lambda.cols() )
        throw DimensionMismatch( "nonconformity_scores: lambda shape differs from the error trajectories" );
    std::vector<double> scores;
    scores.reserve( scoring.size() );
    for ( const auto &e : scoring )
        scores.push_back( e.allFinite() ? ( lambda.array() * e.array().abs() ).maxCoeff() : INF );
    return scores;
}

int conformal_rank( int k_cal, double delta )
{
    if ( !( delta > 0.0 && delta < 1.0 ) )
        throw ValidationError( "delta must lie in (0, 1)" );
    if ( k_cal < 1 )
        throw ValidationError( "K_cal must be >= 1" );
    const double target = static_cast<double>( k_cal + 1 ) * ( 1.0 - delta );
    return static_cast<int>( std::ceil( target - 1e-9 ) );
}

double conformal_quantile( std::span<const double> scores, double delta )
{
    if ( scores.empty() )
        throw ValidationError( "conformal_quantile: no scores" );
    const int k = static_cast<int>( scores.size() );
    const int p = conformal_rank( k, delta );
    if ( p > k )
        return INF;
    std::vector<double> sorted( scores.begin(), scores.end() );
    std::nth_element( sorted.begin(), sorted.begin() + ( p - 1 ), sorted.end() );
    return sorted[p - 1];
}

Eigen::MatrixXd error_bounds( double c, const Eigen::MatrixXd &lambda )
{
    if ( std::isnan( c ) || c < 0.0 )
        throw ValidationError( "error_bounds: C must be nonnegative" );
    if ( std::isinf( c ) )
        return Eigen::MatrixXd::Constant( lambda.rows(), lambda.cols(), INF );
    return ( c / lambda.array() ).matrix();
}

bool ConformalBounds::unbounded() const
{
    return std::isinf( c );
}

ConformalBounds conformalize( const CalibrationData &data, double delta, double sigma )
{
    ConformalBounds b;
    b.delta = delta;
    b.k_cal = static_cast<int>( data.scoring.size() );
    b.m_lambda = static_cast<int>( data.normalization.size() );
    b.mode = data.mode;
    b.weights = normalization_weights( data.normalization, sigma );
    b.scores = nonconformity_scores( data.scoring, b.weights.lambda );
    b.c = conformal_quantile( b.scores, delta );
    b.e_bar = error_bounds( b.c, b.weights.lambda );
    return b;
}

ConformalBounds with_delta( const ConformalBounds &bounds, double delta )
{
    ConformalBounds b = bounds;
    b.delta = delta;
    b.c = conformal_quantile( b.scores, delta );
    b.e_bar = error_bounds( b.c, b.weights.lambda );
    return b;
}

ReachTube inflate( const ReachTube &krs, const Eigen::MatrixXd &e_bar )
{
    if ( krs.kind != TubeKind::KRS )
        throw ValidationError( "inflate: input tube must be a KRS" );
    if ( e_bar.rows() != static_cast<Eigen::Index>( krs.boxes.size() ) || e_bar.cols() != krs.state_dim() )
        throw DimensionMismatch( "inflate: e_bar must be (T+1) x n matching the tube" );
    if ( e_bar.array().isNaN().any() || ( e_bar.array() < 0.0 ).any() )
        throw ValidationError( "inflate: e_bar must be nonnegative" );
    ReachTube out;
    out.kind = TubeKind::CKRS;
    out.provenance = krs.provenance;
    out.boxes.reserve( krs.boxes.size() );
    for ( std::size_t t = 0; t < krs.boxes.size(); ++t )
    {
        const Eigen::VectorXd r = e_bar.row( static_cast<Eigen::Index>( t ) ).transpose();
        out.boxes.emplace_back( krs.boxes[t].lower - r, krs.boxes[t].upper + r );
    }
    out.provenance.unbounded = !e_bar.allFinite() || krs.provenance.unbounded;
    return out;
}

ReachTube inflate( const ReachTube &krs, const ConformalBounds &bounds )
{
    ReachTube out = inflate( krs, bounds.e_bar );
    out.provenance.delta = bounds.delta;
    out.provenance.quantile = bounds.c;
    out.provenance.calibration_mode = to_string( bounds.mode );
    return out;
}

CoverageResult empirical_coverage( const DynamicsSystem &system,
                                   const KoopmanModel &model,
                                   const ReferencePlan &plan,
                                   const GainSchedule &gains,
                                   const ReachTube &tube,
                                   int n_test,
                                   double epsilon,
                                   std::uint64_t seed )
{
    if ( n_test < 1 )
        throw ValidationError( "empirical_coverage: N_test must be >= 1" );
    const CalibrationSource source = plan;
    CoverageResult r;
    for ( int i = 0; i < n_test; ++i )
    {
        const auto s = sample_closed_loop( system, model, source, gains, epsilon, derive_seed( seed, STREAM_TEST, i ) );
        r.successes += covered( tube, s.true_rollout ) ? 1 : 0;
        ++r.trials;
    }
    return r;
}

CoverageResult empirical_coverage( const DynamicsSystem &system,
                                   const KoopmanModel &model,
                                   const ReferenceGeneratorConfig &generator,
                                   const GainSchedule &gains,
                                   const std::function<ReachTube( const ReferencePlan & )> &tube_for,
                                   int n_test,
                                   double epsilon,
                                   std::uint64_t seed )
{
    if ( n_test < 1 )
        throw ValidationError( "empirical_coverage: N_test must be >= 1" );
    const CalibrationSource source = generator;
    CoverageResult r;
    for ( int i = 0; i < n_test; ++i )
    {
        const auto s = sample_closed_loop( system, model, source, gains, epsilon, derive_seed( seed, STREAM_TEST, i ) );
        r.successes += covered( tube_for( s.plan ), s.true_rollout ) ? 1 : 0;
        ++r.trials;
    }
    return r;
}

std::vector<Trajectory> sample_true_rollouts( const DynamicsSystem &system,
                                              const KoopmanModel &model,
                                              const ReferencePlan &plan,
                                              const GainSchedule &gains,
                                              double epsilon,
                                              int count,
                                              std::uint64_t seed )
{
    const CalibrationSource source = plan;
    std::vector<Trajectory> out;
    out.reserve( std::max( count, 0 ) );
    for ( int i = 0; i < count; ++i )
        out.push_back( sample_closed_loop( system, model, source, gains, epsilon, derive_seed( seed, STREAM_PLOT, i ) ).true_rollout );
    return out;
}

BetaPosterior beta_posterior( int successes, int trials )
{
    if ( trials < 0 || successes < 0 || successes > trials )
        throw ValidationError( "beta_posterior: requires 0 <= successes <= trials" );
    BetaPosterior p;
    p.alpha = successes + 1.0;
    p.beta = trials - successes + 1.0;
    const double sum = p.alpha + p.beta;
    p.mode = trials > 0 ? static_cast<double>( successes ) / trials : 0.5;
    p.mean = p.alpha / sum;
    p.variance = p.alpha * p.beta / ( sum * sum * ( sum + 1.0 ) );
    return p;
}

} // namespace kro
