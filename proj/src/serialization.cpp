#include "kro/serialization.hpp"

#include "kro/error.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>

namespace kro {

namespace {

// Converts library parse errors of malformed documents into ValidationError.
template <typename Fn>
auto parse( const char *what, Fn &&fn ) -> decltype( fn() )
{
    try
    {
        return fn();
    }
    catch ( const Json::exception &e )
    {
        throw ValidationError( std::string( what ) + ": malformed JSON (" + e.what() + ")" );
    }
}

void open_for_write( std::ofstream &out, const std::filesystem::path &path )
{
    if ( path.has_parent_path() )
    {
        std::error_code ec;
        std::filesystem::create_directories( path.parent_path(), ec );
        if ( ec )
            throw IoError( "cannot create directory " + path.parent_path().string() + ": " + ec.message() );
    }
    out.open( path, std::ios::binary | std::ios::trunc );
    if ( !out )
        throw IoError( "cannot open for writing: " + path.string() );
}

std::string csv_number( double x )
{
    if ( std::isinf( x ) )
        return x > 0 ? "inf" : "-inf";
    char buf[32];
    std::snprintf( buf, sizeof buf, "%.17g", x );
    return buf;
}

Json architecture_to_json( const Architecture &arch )
{
    return { { "latent_dim", arch.latent_dim }, { "hidden", arch.hidden }, { "activation", to_string( arch.activation ) } };
}

Architecture architecture_from_json( const Json &j, Architecture base = {} )
{
    if ( j.contains( "latent_dim" ) )
        base.latent_dim = j.at( "latent_dim" ).get<int>();
    if ( j.contains( "hidden" ) )
        base.hidden = j.at( "hidden" ).get<std::vector<int>>();
    if ( j.contains( "activation" ) )
        base.activation = activation_from_string( j.at( "activation" ).get<std::string>() );
    return base;
}

} // namespace

Json number_to_json( double x )
{
    if ( std::isnan( x ) )
        return "nan";
    if ( std::isinf( x ) )
        return x > 0 ? "inf" : "-inf";
    return x;
}

double number_from_json( const Json &j )
{
    if ( j.is_number() )
        return j.get<double>();
    if ( j.is_string() )
    {
        const auto s = j.get<std::string>();
        if ( s == "inf" )
            return std::numeric_limits<double>::infinity();
        if ( s == "-inf" )
            return -std::numeric_limits<double>::infinity();
        if ( s == "nan" )
            return std::numeric_limits<double>::quiet_NaN();
    }
    throw ValidationError( "expected a number, got " + j.dump() );
}

Json vector_to_json( const Eigen::VectorXd &v )
{
    Json a = Json::array();
    for ( Eigen::Index i = 0; i < v.size(); ++i )
        a.push_back( number_to_json( v[i] ) );
    return a;
}

Eigen::VectorXd vector_from_json( const Json &j )
{
    if ( !j.is_array() )
        throw ValidationError( "expected an array of numbers" );
    Eigen::VectorXd v( static_cast<Eigen::Index>( j.size() ) );
    for ( std::size_t i = 0; i < j.size(); ++i )
        v[static_cast<Eigen::Index>( i )] = number_from_json( j[i] );
    return v;
}

Json matrix_to_json( const Eigen::MatrixXd &m )
{
    Json rows = Json::array();
    for ( Eigen::Index r = 0; r < m.rows(); ++r )
        rows.push_back( vector_to_json( m.row( r ).transpose() ) );
    return rows;
}

Eigen::MatrixXd matrix_from_json( const Json &j )
{
    if ( !j.is_array() )
        throw ValidationError( "expected a nested array (matrix)" );
    if ( j.empty() )
        return Eigen::MatrixXd( 0, 0 );
    const auto cols = j.front().size();
    Eigen::MatrixXd m( static_cast<Eigen::Index>( j.size() ), static_cast<Eigen::Index>( cols ) );
    for ( std::size_t r = 0; r < j.size(); ++r )
    {
        if ( j[r].size() != cols )
            throw DimensionMismatch( "matrix rows have different lengths" );
        m.row( static_cast<Eigen::Index>( r ) ) = vector_from_json( j[r] ).transpose();
    }
    return m;
}

Json to_json( const Box &box )
{
    return { { "lower", vector_to_json( box.lower ) }, { "upper", vector_to_json( box.upper ) } };
}

Box box_from_json( const Json &j )
{
    return parse( "box", [&] {
        Eigen::VectorXd lo = vector_from_json( j.at( "lower" ) );
        Eigen::VectorXd hi = vector_from_json( j.at( "upper" ) );
        if ( lo.size() != hi.size() )
            throw DimensionMismatch( "box: lower and upper differ in length" );
        return Box( std::move( lo ), std::move( hi ) );
    } );
}

Json to_json( const Trajectory &traj, const TrajectoryMeta &meta )
{
    Json states = Json::array();
    for ( const auto &x : traj.states )
        states.push_back( vector_to_json( x ) );
    Json controls = Json::array();
    for ( const auto &u : traj.controls )
        controls.push_back( vector_to_json( u ) );
    Json j = { { "system", meta.system }, { "dt", meta.dt }, { "states", states }, { "controls", controls } };
    j["seed"] = meta.seed ? Json( *meta.seed ) : Json();
    return j;
}

Trajectory trajectory_from_json( const Json &j )
{
    return parse( "trajectory", [&] {
        Trajectory traj;
        for ( const auto &x : j.at( "states" ) )
            traj.states.push_back( vector_from_json( x ) );
        for ( const auto &u : j.at( "controls" ) )
            traj.controls.push_back( vector_from_json( u ) );
        if ( !traj.controls.empty() && traj.controls.size() + 1 != traj.states.size() )
            throw ValidationError( "trajectory: states must be one longer than controls" );
        return traj;
    } );
}

Json to_json( const ReferenceGeneratorConfig &cfg )
{
    return { { "seed", cfg.seed },
             { "smoothing_window", cfg.smoothing_window },
             { "control_bounds", to_json( cfg.control_bounds ) },
             { "initial_box", to_json( cfg.initial_box ) },
             { "horizon", cfg.horizon } };
}

ReferenceGeneratorConfig generator_from_json( const Json &j )
{
    return parse( "generator", [&] {
        ReferenceGeneratorConfig cfg;
        cfg.seed = j.at( "seed" ).get<std::uint64_t>();
        cfg.smoothing_window = j.at( "smoothing_window" ).get<int>();
        cfg.control_bounds = box_from_json( j.at( "control_bounds" ) );
        cfg.initial_box = box_from_json( j.at( "initial_box" ) );
        cfg.horizon = j.at( "horizon" ).get<int>();
        return cfg;
    } );
}

Json to_json( const MlpNetwork &net )
{
    Json layers = Json::array();
    for ( const auto &layer : net.layers() )
        layers.push_back( { { "weight", matrix_to_json( layer.weight ) }, { "bias", vector_to_json( layer.bias ) } } );
    return { { "activation", to_string( net.activation() ) }, { "layers", layers } };
}

MlpNetwork network_from_json( const Json &j )
{
    return parse( "network", [&] {
        std::vector<DenseLayer> layers;
        for ( const auto &l : j.at( "layers" ) )
            layers.push_back( { matrix_from_json( l.at( "weight" ) ), vector_from_json( l.at( "bias" ) ) } );
        return MlpNetwork( std::move( layers ), activation_from_string( j.at( "activation" ).get<std::string>() ) );
    } );
}

Json to_json( const TrainingConfig &cfg )
{
    return { { "lambda1", cfg.lambda1 },
             { "lambda2", cfg.lambda2 },
             { "horizon", cfg.horizon },
             { "epochs", cfg.epochs },
             { "batch_size", cfg.batch_size },
             { "learning_rate", cfg.learning_rate },
             { "momentum", cfg.momentum },
             { "weight_decay", cfg.weight_decay },
             { "grad_clip", cfg.grad_clip },
             { "seed", cfg.seed } };
}

TrainingConfig training_config_from_json( const Json &j, TrainingConfig base )
{
    return parse( "training config", [&] {
        static const char *keys[] = { "lambda1",  "lambda2",       "horizon",  "epochs",       "batch_size",
                                      "learning_rate", "momentum", "weight_decay", "grad_clip", "seed" };
        for ( const auto &[key, _] : j.items() )
            if ( std::find( std::begin( keys ), std::end( keys ), key ) == std::end( keys ) )
                throw ValidationError( "training config: unknown key '" + key + "'" );
        base.lambda1 = j.value( "lambda1", base.lambda1 );
        base.lambda2 = j.value( "lambda2", base.lambda2 );
        base.horizon = j.value( "horizon", base.horizon );
        base.epochs = j.value( "epochs", base.epochs );
        base.batch_size = j.value( "batch_size", base.batch_size );
        base.learning_rate = j.value( "learning_rate", base.learning_rate );
        base.momentum = j.value( "momentum", base.momentum );
        base.weight_decay = j.value( "weight_decay", base.weight_decay );
        base.grad_clip = j.value( "grad_clip", base.grad_clip );
        base.seed = j.value( "seed", base.seed );
        return base;
    } );
}

Json to_json( const KoopmanModel &model )
{
    Json j = { { "format", "kro-model/1" },
               { "state_dim", model.state_dim() },
               { "control_dim", model.control_dim() },
               { "latent_dim", model.latent_dim() },
               { "activation", to_string( model.encoder.activation() ) },
               { "encoder", to_json( model.encoder ) },
               { "decoder", to_json( model.decoder ) },
               { "ka", matrix_to_json( model.ka ) },
               { "kb", matrix_to_json( model.kb ) },
               { "standardization",
                 { { "mean", vector_to_json( model.standardization.mean ) },
                   { "scale", vector_to_json( model.standardization.scale ) } } } };
    if ( model.training )
    {
        const auto &r = *model.training;
        Json losses = Json::array();
        for ( double l : r.epoch_losses )
            losses.push_back( number_to_json( l ) );
        j["training"] = { { "seed", r.config.seed },
                          { "config", to_json( r.config ) },
                          { "architecture", architecture_to_json( r.architecture ) },
                          { "initial_loss", number_to_json( r.initial_loss ) },
                          { "final_loss", number_to_json( r.final_loss ) },
                          { "epoch_losses", losses } };
    }
    else
        j["training"] = nullptr;
    return j;
}

KoopmanModel model_from_json( const Json &j )
{
    return parse( "model", [&] {
        if ( j.at( "format" ) != "kro-model/1" )
            throw ValidationError( "model: unsupported format " + j.at( "format" ).dump() );
        KoopmanModel model;
        model.encoder = network_from_json( j.at( "encoder" ) );
        model.decoder = network_from_json( j.at( "decoder" ) );
        model.ka = matrix_from_json( j.at( "ka" ) );
        model.kb = matrix_from_json( j.at( "kb" ) );
        model.standardization.mean = vector_from_json( j.at( "standardization" ).at( "mean" ) );
        model.standardization.scale = vector_from_json( j.at( "standardization" ).at( "scale" ) );
        if ( j.contains( "training" ) && !j.at( "training" ).is_null() )
        {
            const Json &t = j.at( "training" );
            TrainingRecord r;
            r.config = training_config_from_json( t.at( "config" ) );
            r.architecture = architecture_from_json( t.at( "architecture" ) );
            r.initial_loss = number_from_json( t.at( "initial_loss" ) );
            r.final_loss = number_from_json( t.at( "final_loss" ) );
            for ( const auto &l : t.at( "epoch_losses" ) )
                r.epoch_losses.push_back( number_from_json( l ) );
            model.training = std::move( r );
        }
        if ( j.at( "state_dim" ).get<int>() != model.state_dim() || j.at( "latent_dim" ).get<int>() != model.latent_dim() ||
             j.at( "control_dim" ).get<int>() != model.control_dim() )
            throw DimensionMismatch( "model: declared dimensions disagree with the weights" );
        if ( activation_from_string( j.at( "activation" ).get<std::string>() ) != model.encoder.activation() )
            throw ValidationError( "model: declared activation disagrees with the encoder" );
        model.validate();
        return model;
    } );
}

Json to_json( const ReferencePlan &plan )
{
    Json z = Json::array();
    for ( const auto &v : plan.z_ref )
        z.push_back( vector_to_json( v ) );
    Json u = Json::array();
    for ( const auto &v : plan.u_ref )
        u.push_back( vector_to_json( v ) );
    Json x = Json::array();
    for ( const auto &v : plan.x_ref.states )
        x.push_back( vector_to_json( v ) );
    Json ux = Json::array();
    for ( const auto &v : plan.x_ref.controls )
        ux.push_back( vector_to_json( v ) );
    return { { "z_ref", z }, { "u_ref", u }, { "x_ref", { { "states", x }, { "controls", ux } } } };
}

ReferencePlan plan_from_json( const Json &j )
{
    return parse( "plan", [&] {
        ReferencePlan plan;
        for ( const auto &v : j.at( "z_ref" ) )
            plan.z_ref.push_back( vector_from_json( v ) );
        for ( const auto &v : j.at( "u_ref" ) )
            plan.u_ref.push_back( vector_from_json( v ) );
        plan.x_ref = trajectory_from_json( j.at( "x_ref" ) );
        if ( plan.z_ref.size() != plan.u_ref.size() + 1 )
            throw DimensionMismatch( "plan: z_ref must be one longer than u_ref" );
        return plan;
    } );
}

Json to_json( const GainSchedule &gains )
{
    Json g = Json::array();
    for ( const auto &m : gains.gains )
        g.push_back( matrix_to_json( m ) );
    return { { "gains", g } };
}

GainSchedule gains_from_json( const Json &j )
{
    return parse( "gains", [&] {
        GainSchedule gains;
        for ( const auto &m : j.at( "gains" ) )
            gains.gains.push_back( matrix_from_json( m ) );
        return gains;
    } );
}

Json to_json( const ReachTube &tube )
{
    Json boxes = Json::array();
    for ( const auto &b : tube.boxes )
        boxes.push_back( to_json( b ) );
    const auto &p = tube.provenance;
    Json prov = { { "reference_id", p.reference_id },
                  { "model_hash", p.model_hash },
                  { "unbounded", p.unbounded } };
    prov["delta"] = p.delta ? number_to_json( *p.delta ) : Json();
    prov["C"] = p.quantile ? number_to_json( *p.quantile ) : Json();
    prov["calibration_mode"] = p.calibration_mode;
    return { { "kind", to_string( tube.kind ) },
             { "T", tube.horizon() },
             { "n", tube.state_dim() },
             { "boxes", boxes },
             { "provenance", prov } };
}

ReachTube tube_from_json( const Json &j )
{
    return parse( "tube", [&] {
        ReachTube tube;
        tube.kind = tube_kind_from_string( j.at( "kind" ).get<std::string>() );
        for ( const auto &b : j.at( "boxes" ) )
            tube.boxes.push_back( box_from_json( b ) );
        if ( tube.horizon() != j.at( "T" ).get<int>() || tube.state_dim() != j.at( "n" ).get<int>() )
            throw DimensionMismatch( "tube: T or n disagree with the boxes" );
        for ( const auto &b : tube.boxes )
            if ( b.dim() != tube.state_dim() )
                throw DimensionMismatch( "tube: boxes differ in dimension" );
        const Json &p = j.at( "provenance" );
        tube.provenance.reference_id = p.at( "reference_id" ).get<std::string>();
        tube.provenance.model_hash = p.at( "model_hash" ).get<std::string>();
        tube.provenance.unbounded = p.at( "unbounded" ).get<bool>();
        if ( !p.at( "delta" ).is_null() )
            tube.provenance.delta = number_from_json( p.at( "delta" ) );
        if ( !p.at( "C" ).is_null() )
            tube.provenance.quantile = number_from_json( p.at( "C" ) );
        tube.provenance.calibration_mode = p.at( "calibration_mode" ).get<std::string>();
        return tube;
    } );
}

Json to_json( const ConformalBounds &bounds )
{
    Json scores = Json::array();
    for ( double s : bounds.scores )
        scores.push_back( number_to_json( s ) );
    return { { "delta", bounds.delta },
             { "C", number_to_json( bounds.c ) },
             { "sigma", bounds.weights.sigma },
             { "lambda", matrix_to_json( bounds.weights.lambda ) },
             { "e_max", matrix_to_json( bounds.weights.e_max ) },
             { "e_bar", matrix_to_json( bounds.e_bar ) },
             { "K_cal", bounds.k_cal },
             { "M_lambda", bounds.m_lambda },
             { "mode", to_string( bounds.mode ) },
             { "scores", scores },
             { "config_hash", bounds.config_hash } };
}

ConformalBounds bounds_from_json( const Json &j )
{
    return parse( "bounds", [&] {
        ConformalBounds b;
        b.delta = j.at( "delta" ).get<double>();
        b.c = number_from_json( j.at( "C" ) );
        b.weights.sigma = j.at( "sigma" ).get<double>();
        b.weights.lambda = matrix_from_json( j.at( "lambda" ) );
        b.weights.e_max = matrix_from_json( j.at( "e_max" ) );
        b.e_bar = matrix_from_json( j.at( "e_bar" ) );
        b.k_cal = j.at( "K_cal" ).get<int>();
        b.m_lambda = j.at( "M_lambda" ).get<int>();
        b.mode = calibration_mode_from_string( j.at( "mode" ).get<std::string>() );
        for ( const auto &s : j.at( "scores" ) )
            b.scores.push_back( number_from_json( s ) );
        b.config_hash = j.at( "config_hash" ).get<std::string>();
        if ( static_cast<int>( b.scores.size() ) != b.k_cal )
            throw ValidationError( "bounds: score count differs from K_cal" );
        if ( b.e_bar.rows() != b.weights.lambda.rows() || b.e_bar.cols() != b.weights.lambda.cols() )
            throw DimensionMismatch( "bounds: e_bar and lambda differ in shape" );
        return b;
    } );
}

std::string content_hash( const Json &j )
{
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for ( unsigned char c : j.dump() )
    {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf( buf, sizeof buf, "%016llx", static_cast<unsigned long long>( h ) );
    return buf;
}

Json read_json( const std::filesystem::path &path )
{
    if ( !std::filesystem::exists( path ) )
        throw MissingFile( path.string() );
    std::ifstream in( path, std::ios::binary );
    if ( !in )
        throw IoError( "cannot open for reading: " + path.string() );
    try
    {
        return Json::parse( in );
    }
    catch ( const Json::parse_error &e )
    {
        throw ValidationError( path.string() + ": invalid JSON (" + e.what() + ")" );
    }
}

void write_json( const std::filesystem::path &path, const Json &j )
{
    write_text( path, j.dump( 2 ) + "\n" );
}

void write_text( const std::filesystem::path &path, const std::string &text )
{
    std::ofstream out;
    open_for_write( out, path );
    out << text;
    if ( !out )
        throw IoError( "write failed: " + path.string() );
}

void write_tube_csv( const std::filesystem::path &path, const ReachTube &tube )
{
    std::ostringstream s;
    s << "t";
    for ( int j = 0; j < tube.state_dim(); ++j )
        s << ",lower_" << j << ",upper_" << j;
    s << "\n";
    for ( std::size_t t = 0; t < tube.boxes.size(); ++t )
    {
        s << t;
        for ( int j = 0; j < tube.state_dim(); ++j )
            s << "," << csv_number( tube.boxes[t].lower[j] ) << "," << csv_number( tube.boxes[t].upper[j] );
        s << "\n";
    }
    write_text( path, s.str() );
}

void write_trajectory_csv( const std::filesystem::path &path, const Trajectory &traj )
{
    const int n = traj.states.empty() ? 0 : static_cast<int>( traj.states.front().size() );
    const int m = traj.controls.empty() ? 0 : static_cast<int>( traj.controls.front().size() );
    std::ostringstream s;
    s << "t";
    for ( int j = 0; j < n; ++j )
        s << ",x_" << j;
    for ( int j = 0; j < m; ++j )
        s << ",u_" << j;
    s << "\n";
    for ( std::size_t t = 0; t < traj.states.size(); ++t )
    {
        s << t;
        for ( int j = 0; j < n; ++j )
            s << "," << csv_number( traj.states[t][j] );
        for ( int j = 0; j < m; ++j )
            s << "," << ( t < traj.controls.size() ? csv_number( traj.controls[t][j] ) : "" );
        s << "\n";
    }
    write_text( path, s.str() );
}

} // namespace kro
