#include "kro/error.hpp"
#include "kro/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>

namespace kro {

namespace {

constexpr double WIDTH = 720.0;
constexpr double HEIGHT = 360.0;
constexpr double LEFT = 70.0;
constexpr double RIGHT = 20.0;
constexpr double TOP = 30.0;
constexpr double BOTTOM = 40.0;

std::string fmt( double x )
{
    char buf[32];
    std::snprintf( buf, sizeof buf, "%.3f", x );
    return buf;
}

struct Frame
{
    double t_max = 1.0;
    double y_min = -1.0;
    double y_max = 1.0;

    double px( double t ) const
    {
        return LEFT + ( WIDTH - LEFT - RIGHT ) * ( t_max > 0.0 ? t / t_max : 0.0 );
    }
    double py( double y ) const
    {
        y = std::clamp( y, y_min, y_max );
        return TOP + ( HEIGHT - TOP - BOTTOM ) * ( y_max - y ) / ( y_max - y_min );
    }
};

void widen( double &lo, double &hi, double v )
{
    if ( std::isfinite( v ) )
    {
        lo = std::min( lo, v );
        hi = std::max( hi, v );
    }
}

Frame frame_for( const PlotData &data, int dim, int steps )
{
    double lo = std::numeric_limits<double>::infinity();
    double hi = -lo;
    for ( const auto *tube : { data.krs ? &*data.krs : nullptr, data.ckrs ? &*data.ckrs : nullptr } )
        if ( tube )
            for ( const auto &b : tube->boxes )
            {
                widen( lo, hi, b.lower[dim] );
                widen( lo, hi, b.upper[dim] );
            }
    if ( data.reference )
        for ( const auto &x : data.reference->states )
            widen( lo, hi, x[dim] );
    for ( const auto &r : data.rollouts )
        for ( const auto &x : r.states )
            widen( lo, hi, x[dim] );
    Frame f;
    f.t_max = steps * data.dt;
    if ( lo > hi )
        return f;
    const double pad = hi > lo ? 0.05 * ( hi - lo ) : std::max( 1.0, std::abs( lo ) ) * 0.05;
    f.y_min = lo - pad;
    f.y_max = hi + pad;
    return f;
}

void band( std::ostringstream &s, const ReachTube &tube, int dim, const Frame &f, double dt, const char *fill, const char *opacity )
{
    s << "<polygon fill=\"" << fill << "\" fill-opacity=\"" << opacity << "\" stroke=\"none\" points=\"";
    const int last = tube.horizon();
    for ( int t = 0; t <= last; ++t )
        s << fmt( f.px( t * dt ) ) << "," << fmt( f.py( tube.boxes[t].upper[dim] ) ) << " ";
    for ( int t = last; t >= 0; --t )
        s << fmt( f.px( t * dt ) ) << "," << fmt( f.py( tube.boxes[t].lower[dim] ) )
          << ( t > 0 ? " " : "" );
    s << "\"/>\n";
}

void line( std::ostringstream &s, const Trajectory &traj, int dim, const Frame &f, double dt, const char *style )
{
    s << "<polyline fill=\"none\" " << style << " points=\"";
    for ( std::size_t t = 0; t < traj.states.size(); ++t )
        s << fmt( f.px( static_cast<double>( t ) * dt ) ) << "," << fmt( f.py( traj.states[t][dim] ) )
          << ( t + 1 < traj.states.size() ? " " : "" );
    s << "\"/>\n";
}

int steps_of( const PlotData &data )
{
    if ( data.krs )
        return data.krs->horizon();
    if ( data.ckrs )
        return data.ckrs->horizon();
    if ( data.reference )
        return data.reference->horizon();
    return data.rollouts.empty() ? 0 : data.rollouts.front().horizon();
}

int dims_of( const PlotData &data )
{
    if ( data.krs )
        return data.krs->state_dim();
    if ( data.ckrs )
        return data.ckrs->state_dim();
    if ( data.reference && !data.reference->states.empty() )
        return static_cast<int>( data.reference->states.front().size() );
    if ( !data.rollouts.empty() && !data.rollouts.front().states.empty() )
        return static_cast<int>( data.rollouts.front().states.front().size() );
    return 0;
}

void check_consistent( const PlotData &data )
{
    const int n = dims_of( data );
    const int steps = steps_of( data );
    auto tube_ok = [&]( const std::optional<ReachTube> &t ) { return !t || ( t->state_dim() == n && t->horizon() == steps ); };
    auto traj_ok = [&]( const Trajectory &t ) {
        if ( t.horizon() != steps )
            return false;
        return std::all_of( t.states.begin(), t.states.end(), [&]( const auto &x ) { return x.size() == n; } );
    };
    if ( !tube_ok( data.krs ) || !tube_ok( data.ckrs ) || ( data.reference && !traj_ok( *data.reference ) ) ||
         !std::all_of( data.rollouts.begin(), data.rollouts.end(), traj_ok ) )
        throw DimensionMismatch( "plot: tubes and trajectories disagree in horizon or dimension" );
    if ( !( data.dt > 0.0 ) )
        throw ValidationError( "plot: dt must be positive" );
}

} // namespace

std::string render_plot( const PlotData &data, int dim )
{
    check_consistent( data );
    if ( dim < 0 || dim >= dims_of( data ) )
        throw DimensionMismatch( "plot: dimension out of range" );
    const int steps = steps_of( data );
    const Frame f = frame_for( data, dim, steps );
    const std::string label = dim < static_cast<int>( data.labels.size() ) ? data.labels[dim] : "x" + std::to_string( dim );

    std::ostringstream s;
    s << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
      << "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"" << WIDTH << "\" height=\"" << HEIGHT
      << "\" viewBox=\"0 0 " << WIDTH << " " << HEIGHT << "\">\n"
      << "<rect x=\"0\" y=\"0\" width=\"" << WIDTH << "\" height=\"" << HEIGHT << "\" fill=\"white\"/>\n";
    if ( data.ckrs )
        band( s, *data.ckrs, dim, f, data.dt, "#ff7f0e", "0.25" );
    if ( data.krs )
        band( s, *data.krs, dim, f, data.dt, "#1f77b4", "0.45" );
    for ( const auto &r : data.rollouts )
        line( s, r, dim, f, data.dt, "stroke=\"#444444\" stroke-width=\"0.6\" stroke-opacity=\"0.7\"" );
    if ( data.reference )
        line( s, *data.reference, dim, f, data.dt, "stroke=\"black\" stroke-width=\"1.5\" stroke-dasharray=\"6 4\"" );

    const double x0 = LEFT, x1 = WIDTH - RIGHT, y0 = TOP, y1 = HEIGHT - BOTTOM;
    s << "<rect x=\"" << fmt( x0 ) << "\" y=\"" << fmt( y0 ) << "\" width=\"" << fmt( x1 - x0 ) << "\" height=\""
      << fmt( y1 - y0 ) << "\" fill=\"none\" stroke=\"black\" stroke-width=\"1\"/>\n";
    s << "<g font-family=\"sans-serif\" font-size=\"11\">\n"
      << "<text x=\"" << fmt( x0 - 6 ) << "\" y=\"" << fmt( y0 + 4 ) << "\" text-anchor=\"end\">" << fmt( f.y_max ) << "</text>\n"
      << "<text x=\"" << fmt( x0 - 6 ) << "\" y=\"" << fmt( y1 ) << "\" text-anchor=\"end\">" << fmt( f.y_min ) << "</text>\n"
      << "<text x=\"" << fmt( x0 ) << "\" y=\"" << fmt( y1 + 16 ) << "\" text-anchor=\"middle\">0</text>\n"
      << "<text x=\"" << fmt( x1 ) << "\" y=\"" << fmt( y1 + 16 ) << "\" text-anchor=\"middle\">" << fmt( f.t_max ) << "</text>\n"
      << "<text x=\"" << fmt( 0.5 * ( x0 + x1 ) ) << "\" y=\"" << fmt( y1 + 32 ) << "\" text-anchor=\"middle\">time [s]</text>\n"
      << "<text x=\"" << fmt( 0.5 * ( x0 + x1 ) ) << "\" y=\"" << fmt( y0 - 10 ) << "\" text-anchor=\"middle\" font-size=\"13\">"
      << label << "</text>\n"
      << "</g>\n"
      << "</svg>\n";
    return s.str();
}

std::vector<std::filesystem::path> emit_plots( const PlotData &data, const std::filesystem::path &dir, const std::string &prefix )
{
    check_consistent( data );
    std::vector<std::filesystem::path> paths;
    for ( int j = 0; j < dims_of( data ); ++j )
    {
        const auto path = dir / ( prefix + "_x" + std::to_string( j ) + ".svg" );
        write_text( path, render_plot( data, j ) );
        paths.push_back( path );
    }
    return paths;
}

} // namespace kro
