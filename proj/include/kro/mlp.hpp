#pragma once

#include "kro/rng.hpp"

#include <Eigen/Dense>

#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace kro {

enum class Activation
{
    ReLU,
    GELU,
};

std::string to_string( Activation act );
Activation activation_from_string( std::string_view name );

struct DenseLayer
{
    Eigen::MatrixXd weight; // out x in
    Eigen::VectorXd bias;
};

/// Intermediate values of a batched forward pass, kept for backprop.
struct MlpTape
{
    std::vector<Eigen::MatrixXd> inputs;         // input of each layer
    std::vector<Eigen::MatrixXd> preactivations; // W a + b of each hidden layer
};

/// Gradient accumulator shaped like a network's parameters.
struct MlpGradient
{
    std::vector<DenseLayer> layers;

    void add_scaled( const MlpGradient &other, double scale );
    double squared_norm() const;
};

/// Fully connected network: activation between layers, none after the last.
class MlpNetwork
{
public:
    MlpNetwork() = default;
    MlpNetwork( std::vector<DenseLayer> layers, Activation activation );

    /// Xavier-uniform weights and zero biases for the given layer widths
    /// (sizes.front() = input, sizes.back() = output).
    static MlpNetwork xavier( std::span<const int> sizes, Activation activation, Rng &rng );

    /// Single linear layer W = I, b = 0.
    static MlpNetwork identity( int dim );

    int input_dim() const;
    int output_dim() const;
    int depth() const
    {
        return static_cast<int>( _layers.size() );
    }
    Activation activation() const
    {
        return _activation;
    }
    const std::vector<DenseLayer> &layers() const
    {
        return _layers;
    }
    std::vector<DenseLayer> &layers()
    {
        return _layers;
    }

    Eigen::VectorXd forward( const Eigen::VectorXd &x ) const;

    /// Column-batched forward pass.
    Eigen::MatrixXd forward_batch( const Eigen::MatrixXd &x ) const;
    Eigen::MatrixXd forward_batch( const Eigen::MatrixXd &x, MlpTape &tape ) const;

    /// Accumulates d(loss)/d(params) into `grad` given d(loss)/d(output),
    /// and returns d(loss)/d(input).
    Eigen::MatrixXd backward( const MlpTape &tape, const Eigen::MatrixXd &grad_output, MlpGradient &grad ) const;

    MlpGradient zero_gradient() const;

    bool all_finite() const;

private:
    void validate() const;

    std::vector<DenseLayer> _layers;
    Activation _activation = Activation::ReLU;
};

double activate( double x, Activation act );
double activate_derivative( double x, Activation act );

} // namespace kro
