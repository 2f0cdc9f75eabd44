#pragma once

#include "kro/dynamics.hpp"
#include "kro/mlp.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

namespace kro {

using LiftedState = Eigen::VectorXd;

/// Per-dimension affine map x_std = (x - mean) / scale. The networks of a
/// KoopmanModel operate on standardized states; encode/decode apply the map.
struct Standardization
{
    Eigen::VectorXd mean;
    Eigen::VectorXd scale;

    static Standardization identity( int n );

    /// Mean and standard deviation over every state of every trajectory.
    /// Dimensions with (near) zero spread keep scale 1.
    static Standardization fit( std::span<const Trajectory> trajectories );

    Eigen::VectorXd apply( const Eigen::VectorXd &x ) const;
    Eigen::VectorXd invert( const Eigen::VectorXd &x_std ) const;
};

struct Architecture
{
    int latent_dim = 10;
    std::vector<int> hidden = { 128, 128, 128 };
    Activation activation = Activation::ReLU;
};

struct TrainingConfig
{
    double lambda1 = 1.0;
    double lambda2 = 1.0;
    int horizon = 10; // H of the multi-step loss
    int epochs = 10;
    int batch_size = 8;
    double learning_rate = 5e-3;
    double momentum = 0.9;
    double weight_decay = 1e-5;
    double grad_clip = 10.0; // global-norm clip, <= 0 disables
    std::uint64_t seed = 0;

    void validate() const;
};

struct TrainingRecord
{
    TrainingConfig config;
    Architecture architecture;
    double initial_loss = 0.0;
    double final_loss = 0.0;
    std::vector<double> epoch_losses; // mean minibatch loss per epoch
};

/// Encoder phi (n -> l), decoder psi (l -> n) and lifted transition
/// z+ = ka z + kb u.
struct KoopmanModel
{
    MlpNetwork encoder;
    MlpNetwork decoder;
    Eigen::MatrixXd ka;
    Eigen::MatrixXd kb;
    Standardization standardization;
    std::optional<TrainingRecord> training;

    int state_dim() const
    {
        return encoder.input_dim();
    }
    int latent_dim() const
    {
        return encoder.output_dim();
    }
    int control_dim() const
    {
        return static_cast<int>( kb.cols() );
    }

    /// Dimension consistency among all parts and l >= n.
    void validate() const;

    /// Identity lift (l = n): phi = psi = identity, standardization identity.
    static KoopmanModel identity( const Eigen::MatrixXd &ka, const Eigen::MatrixXd &kb );

    static KoopmanModel initialize( int n, int m, const Architecture &arch, Rng &rng );
};

LiftedState encode( const KoopmanModel &model, const StateVector &x );
StateVector decode( const KoopmanModel &model, const LiftedState &z );
LiftedState latent_step( const KoopmanModel &model, const LiftedState &z, const ControlVector &u );

/// Encoder with the standardization folded into its first layer, mapping
/// raw states to lifted states. Used by bound propagation.
MlpNetwork lifting_network( const KoopmanModel &model );

/// Decoder with the inverse standardization folded into its last layer.
MlpNetwork inverse_network( const KoopmanModel &model );

/// Autoencoder loss (reconstruction + latent consistency) of one
/// trajectory, in standardized coordinates.
double loss_autoencoder( const KoopmanModel &model, const Trajectory &traj );

/// Multi-step prediction loss summed over every window start
/// t = 0..T-H. Throws ValidationError if H > T.
double loss_multistep( const KoopmanModel &model, const Trajectory &traj, int horizon );

struct LossWeights
{
    double lambda1 = 1.0;
    double lambda2 = 1.0;
    int horizon = 10;
};

struct KoopmanGradient
{
    MlpGradient encoder;
    MlpGradient decoder;
    Eigen::MatrixXd ka;
    Eigen::MatrixXd kb;
    double autoencoder_loss = 0.0; // sum of L1 over the batch
    double multistep_loss = 0.0;   // sum of L2 over the batch
    double loss = 0.0;             // lambda1 * L1 + lambda2 * L2

    double squared_norm() const;
};

/// Loss sum_i lambda1 L1_i + lambda2 L2_i over the batch and its exact
/// gradient with respect to every encoder/decoder parameter and ka, kb.
KoopmanGradient gradients( const KoopmanModel &model, std::span<const Trajectory> batch, const LossWeights &weights );

/// Same loss without the backward pass.
double composite_loss( const KoopmanModel &model, std::span<const Trajectory> batch, const LossWeights &weights );

struct TrainingDataset
{
    std::vector<Trajectory> trajectories;

    void validate() const;
};

/// Mini-batch gradient descent with momentum, cosine-annealed learning rate
/// and weight decay. ka starts at identity, kb and the networks are
/// Xavier-uniform. Throws TrainingDiverged on a non-finite loss.
KoopmanModel train( const TrainingDataset &dataset, const Architecture &arch, const TrainingConfig &config );

/// Root-mean-square error of H-step open-loop decoded predictions from
/// every window start, in raw state units, averaged over dimensions.
double multistep_rmse( const KoopmanModel &model, std::span<const Trajectory> trajectories, int horizon );

} // namespace kro
