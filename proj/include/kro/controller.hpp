#pragma once

#include "kro/dynamics.hpp"
#include "kro/koopman.hpp"

#include <Eigen/Dense>

#include <span>
#include <vector>

namespace kro {

/// Quadratic tracking cost weights. All three must be symmetric positive
/// definite.
struct LqrWeights
{
    Eigen::MatrixXd q;
    Eigen::MatrixXd r;
    Eigen::MatrixXd q_terminal;

    /// Q = q_scale I_l, R = r_scale I_m, Q_T = q_terminal_scale I_l.
    static LqrWeights diagonal( int l, int m, double q_scale = 1.0, double r_scale = 0.1, double q_terminal_scale = 1.0 );

    void validate( int l, int m ) const;
};

/// Lifted reference and its feedforward controls.
struct ReferencePlan
{
    std::vector<LiftedState> z_ref;   // T + 1
    std::vector<ControlVector> u_ref; // T
    Trajectory x_ref;

    int horizon() const
    {
        return static_cast<int>( u_ref.size() );
    }
};

struct GainSchedule
{
    std::vector<Eigen::MatrixXd> gains; // T matrices, m x l

    int horizon() const
    {
        return static_cast<int>( gains.size() );
    }
};

/// Moore-Penrose pseudo-inverse by SVD; singular values below
/// rel_tol * sigma_max count as zero.
Eigen::MatrixXd pseudo_inverse( const Eigen::MatrixXd &a, double rel_tol = 1e-10 );

/// u_ref[t] = pinv(kb) (z_ref[t+1] - ka z_ref[t]).
std::vector<ControlVector> feedforward( const KoopmanModel &model, std::span<const LiftedState> z_ref );

/// Encodes the reference states and computes their feedforward.
ReferencePlan make_plan( const KoopmanModel &model, const Trajectory &x_ref );

struct RiccatiSolution
{
    GainSchedule schedule;
    std::vector<Eigen::MatrixXd> cost_to_go; // P_0 .. P_T
};

/// Finite-horizon LQR by backward Riccati recursion, re-symmetrizing P_t
/// at every step.
RiccatiSolution riccati_solve( const Eigen::MatrixXd &ka, const Eigen::MatrixXd &kb, const LqrWeights &weights, int horizon );

GainSchedule riccati_gains( const Eigen::MatrixXd &ka, const Eigen::MatrixXd &kb, const LqrWeights &weights, int horizon );

/// u = u_ref - G (z - z_ref)
ControlVector lifted_control( const ControlVector &u_ref,
                              const Eigen::MatrixXd &gain,
                              const LiftedState &z,
                              const LiftedState &z_ref );

/// u = u_ref - G (encode(x) - z_ref)
ControlVector state_control( const KoopmanModel &model,
                             const ControlVector &u_ref,
                             const Eigen::MatrixXd &gain,
                             const StateVector &x,
                             const LiftedState &z_ref );

/// Closed-loop tracking in the lifted space, decoded: x_hat_0 = x0 and
/// x_hat_t = decode(z_t) for t >= 1. Controls are the lifted controls.
Trajectory rollout_latent_decoded( const KoopmanModel &model,
                                   const ReferencePlan &plan,
                                   const GainSchedule &gains,
                                   const StateVector &x0 );

/// The Koopman controller executed on the true plant.
Trajectory rollout_true_closed_loop( const DynamicsSystem &system,
                                     const KoopmanModel &model,
                                     const ReferencePlan &plan,
                                     const GainSchedule &gains,
                                     const StateVector &x0 );

void check_plan( const KoopmanModel &model, const ReferencePlan &plan, const GainSchedule &gains );

} // namespace kro
