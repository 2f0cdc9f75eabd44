#include "kro/mlp.hpp"

#include "kro/error.hpp"

#include <cmath>
#include <numbers>

namespace kro {

std::string to_string( Activation act )
{
    return act == Activation::ReLU ? "relu" : "gelu";
}

Activation activation_from_string( std::string_view name )
{
    if ( name == "relu" || name == "ReLU" )
        return Activation::ReLU;
    if ( name == "gelu" || name == "GELU" )
        return Activation::GELU;
    throw UnsupportedActivation( "unknown activation: " + std::string( name ) );
}

double activate( double x, Activation act )
{
    if ( act == Activation::ReLU )
        return x > 0.0 ? x : 0.0;
    return 0.5 * x * ( 1.0 + std::erf( x * std::numbers::sqrt2 / 2.0 ) );
}

double activate_derivative( double x, Activation act )
{
    if ( act == Activation::ReLU )
        return x > 0.0 ? 1.0 : 0.0;
    const double cdf = 0.5 * ( 1.0 + std::erf( x * std::numbers::sqrt2 / 2.0 ) );
    const double pdf = std::exp( -0.5 * x * x ) / std::sqrt( 2.0 * std::numbers::pi );
    return cdf + x * pdf;
}

void MlpGradient::add_scaled( const MlpGradient &other, double scale )
{
    for ( std::size_t i = 0; i < layers.size(); ++i )
    {
        layers[i].weight += scale * other.layers[i].weight;
        layers[i].bias += scale * other.layers[i].bias;
    }
}

double MlpGradient::squared_norm() const
{
    double s = 0.0;
    for ( const auto &l : layers )
        s += l.weight.squaredNorm() + l.bias.squaredNorm();
    return s;
}

MlpNetwork::MlpNetwork( std::vector<DenseLayer> layers, Activation activation )
    : _layers( std::move( layers ) )
    , _activation( activation )
{
    validate();
}

void MlpNetwork::validate() const
{
    if ( _layers.empty() )
        throw ValidationError( "MlpNetwork: needs at least one layer" );
    for ( std::size_t i = 0; i < _layers.size(); ++i )
    {
        const auto &l = _layers[i];
        if ( l.bias.size() != l.weight.rows() )
            throw DimensionMismatch( "MlpNetwork: bias size does not match weight rows" );
        if ( i > 0 && l.weight.cols() != _layers[i - 1].weight.rows() )
            throw DimensionMismatch( "MlpNetwork: layer dimensions do not chain" );
    }
}

MlpNetwork MlpNetwork::xavier( std::span<const int> sizes, Activation activation, Rng &rng )
{
    if ( sizes.size() < 2 )
        throw ValidationError( "MlpNetwork::xavier: need input and output sizes" );
    std::vector<DenseLayer> layers;
    for ( std::size_t i = 0; i + 1 < sizes.size(); ++i )
    {
        const int fan_in = sizes[i];
        const int fan_out = sizes[i + 1];
        if ( fan_in < 1 || fan_out < 1 )
            throw ValidationError( "MlpNetwork::xavier: layer sizes must be positive" );
        const double a = std::sqrt( 6.0 / ( fan_in + fan_out ) );
        DenseLayer layer{ Eigen::MatrixXd( fan_out, fan_in ), Eigen::VectorXd::Zero( fan_out ) };
        for ( int r = 0; r < fan_out; ++r )
            for ( int c = 0; c < fan_in; ++c )
                layer.weight( r, c ) = uniform( rng, -a, a );
        layers.push_back( std::move( layer ) );
    }
    return MlpNetwork( std::move( layers ), activation );
}

MlpNetwork MlpNetwork::identity( int dim )
{
    return MlpNetwork( { DenseLayer{ Eigen::MatrixXd::Identity( dim, dim ), Eigen::VectorXd::Zero( dim ) } },
                       Activation::ReLU );
}

int MlpNetwork::input_dim() const
{
    return _layers.empty() ? 0 : static_cast<int>( _layers.front().weight.cols() );
}

int MlpNetwork::output_dim() const
{
    return _layers.empty() ? 0 : static_cast<int>( _layers.back().weight.rows() );
}

Eigen::VectorXd MlpNetwork::forward( const Eigen::VectorXd &x ) const
{
    if ( x.size() != input_dim() )
        throw DimensionMismatch( "MlpNetwork::forward: input dimension " + std::to_string( x.size() ) +
                                 " != " + std::to_string( input_dim() ) );
    Eigen::VectorXd a = x;
    for ( std::size_t i = 0; i < _layers.size(); ++i )
    {
        Eigen::VectorXd h = _layers[i].weight * a + _layers[i].bias;
        if ( i + 1 < _layers.size() )
            a = h.unaryExpr( [this]( double v ) { return activate( v, _activation ); } );
        else
            a = std::move( h );
    }
    return a;
}

Eigen::MatrixXd MlpNetwork::forward_batch( const Eigen::MatrixXd &x ) const
{
    if ( x.rows() != input_dim() )
        throw DimensionMismatch( "MlpNetwork::forward_batch: input dimension mismatch" );
    Eigen::MatrixXd a = x;
    for ( std::size_t i = 0; i < _layers.size(); ++i )
    {
        Eigen::MatrixXd h = _layers[i].weight * a;
        h.colwise() += _layers[i].bias;
        if ( i + 1 < _layers.size() )
        {
            if ( _activation == Activation::ReLU )
                a = h.cwiseMax( 0.0 );
            else
                a = h.unaryExpr( []( double v ) { return activate( v, Activation::GELU ); } );
        }
        else
            a = std::move( h );
    }
    return a;
}

Eigen::MatrixXd MlpNetwork::forward_batch( const Eigen::MatrixXd &x, MlpTape &tape ) const
{
    if ( x.rows() != input_dim() )
        throw DimensionMismatch( "MlpNetwork::forward_batch: input dimension mismatch" );
    tape.inputs.resize( _layers.size() );
    tape.preactivations.resize( _layers.size() - 1 );
    Eigen::MatrixXd a = x;
    for ( std::size_t i = 0; i < _layers.size(); ++i )
    {
        tape.inputs[i] = a;
        Eigen::MatrixXd h = _layers[i].weight * a;
        h.colwise() += _layers[i].bias;
        if ( i + 1 < _layers.size() )
        {
            if ( _activation == Activation::ReLU )
                a = h.cwiseMax( 0.0 );
            else
                a = h.unaryExpr( []( double v ) { return activate( v, Activation::GELU ); } );
            tape.preactivations[i] = std::move( h );
        }
        else
            a = std::move( h );
    }
    return a;
}

Eigen::MatrixXd MlpNetwork::backward( const MlpTape &tape, const Eigen::MatrixXd &grad_output, MlpGradient &grad ) const
{
    Eigen::MatrixXd g = grad_output;
    for ( std::size_t k = _layers.size(); k-- > 0; )
    {
        if ( k + 1 < _layers.size() )
        {
            const Eigen::MatrixXd &h = tape.preactivations[k];
            if ( _activation == Activation::ReLU )
                g = g.cwiseProduct( ( h.array() > 0.0 ).cast<double>().matrix() );
            else
                g = g.cwiseProduct( h.unaryExpr( []( double v ) { return activate_derivative( v, Activation::GELU ); } ) );
        }
        grad.layers[k].weight.noalias() += g * tape.inputs[k].transpose();
        grad.layers[k].bias += g.rowwise().sum();
        g = _layers[k].weight.transpose() * g;
    }
    return g;
}

MlpGradient MlpNetwork::zero_gradient() const
{
    MlpGradient grad;
    for ( const auto &l : _layers )
        grad.layers.push_back(
            DenseLayer{ Eigen::MatrixXd::Zero( l.weight.rows(), l.weight.cols() ), Eigen::VectorXd::Zero( l.bias.size() ) } );
    return grad;
}

bool MlpNetwork::all_finite() const
{
    for ( const auto &l : _layers )
        if ( !l.weight.allFinite() || !l.bias.allFinite() )
            return false;
    return true;
}

} // namespace kro
