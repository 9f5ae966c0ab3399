#pragma once

#include <functional>
#include <span>
#include <vector>

#include "ebm/common.hpp"
#include "ebm/rng.hpp"

namespace ebm {

/// Parameters of the hierarchical Gaussian model.
///
/// Layer 0 is the observation. theta[l] maps the rectified activity of layer
/// l+1 onto the mean of layer l, and lambda[l] is the (scalar) precision of
/// layer l. Time constants and the Euler step apply to every phase.
struct HierarchyParams {
  std::vector<Index> widths;   // n_0 .. n_L
  std::vector<Matrix> theta;   // theta[l] is n_l x n_{l+1}
  std::vector<double> lambda;  // lambda_0 .. lambda_L
  double slope = 0.01;         // leaky rectifier negative slope
  double tau_s = 1.0;
  double tau_theta = 10.0;
  double dt = 0.05;
  double T = 10.0;

  std::size_t layers() const { return theta.size(); }
  Index top_width() const { return widths.back(); }
  // Euler steps per phase, round(T / dt).
  int steps() const;
  void validate() const;
  // Throws NumericalDivergence if any weight is non-finite.
  void check_finite() const;

  // Zero weights, unit precisions.
  static HierarchyParams zeros(std::vector<Index> widths);
};

enum class PriorMode { direct, langevin };

/// Knobs for one observation step.
struct StepOptions {
  PriorMode prior_mode = PriorMode::direct;
  // Learn theta^l and infer s^{l+1} in one Euler loop instead of in sequence.
  bool co_integrate = false;
  // Suppress the Langevin noise term (deterministic gradient flow).
  bool noise = true;
  // Learn theta^l at all. Off for frozen-weight protocols.
  bool learn = true;
};

/// Per-timestep latent activity. Every matrix holds one column per batch
/// element; s_hat may hold several prior samples per element, stored as
/// consecutive blocks of `batch` columns.
struct LayerStack {
  std::vector<Matrix> s_hat;  // predictions, L+1 entries
  std::vector<Matrix> s;      // posterior samples (s[0] is the observation)
  std::vector<Matrix> e_hat;  // prediction errors, L+1 entries
  std::vector<Matrix> e;      // posterior errors, L entries
};

struct StepMetrics {
  std::vector<double> layer_losses;  // batch-mean L^l, before the update
  double mse = 0.0;                  // mean squared (s_hat^0 - observation)
  double total_loss() const;
};

enum class Phase { predict, receive, learn, infer, memory_update };

/// Instrumentation record emitted as a step runs.
struct PhaseEvent {
  Phase phase;
  int layer = -1;
  // For learn events: hash of the presynaptic activity the update consumed.
  std::uint64_t input_hash = 0;
};
using PhaseHook = std::function<void(const PhaseEvent&)>;

double leaky_relu(double x, double slope);
// Derivative with f'(0) = 1.
double leaky_relu_grad(double x, double slope);
Matrix leaky_relu(const Matrix& x, double slope);

// theta * f(s_upper), column-wise.
Matrix layer_means(const Matrix& theta, const Matrix& s_upper, double slope);
Vector layer_mean(const Matrix& theta, const Vector& s_upper, double slope);

// Prior samples for every layer, top-down from memory `m` (n_L x B).
// `samples_per_stream` independent stacks are drawn per column of m; sample p
// of element b lands in column p * B + b and draws noise from streams[b].
LayerStack sample_prior_stack(const HierarchyParams& params, const Matrix& m,
                              std::span<RngStream> streams, PriorMode mode,
                              int samples_per_stream = 1);
LayerStack sample_prior_stack(const HierarchyParams& params, const Vector& m,
                              RngStream& rng, PriorMode mode);

// 1/2 * lambda * |e_hat|^2.
double layer_loss(const Vector& e_hat, double lambda);
// Mean of layer_loss over the columns.
double mean_layer_loss(const Matrix& e_hat, double lambda);

// Hebbian gradient flow on theta for T/dt Euler steps with the presynaptic
// activity held fixed. Columns of `target` and `s_hat_upper` are batch
// elements; the drift is averaged over them.
Matrix learn_layer(const Matrix& theta, const Matrix& target,
                   const Matrix& s_hat_upper, double lambda,
                   const HierarchyParams& params);
// One Euler increment of the flow above (the scaled negative loss gradient).
Matrix learn_increment(const Matrix& theta, const Matrix& target,
                       const Matrix& f_upper, double lambda,
                       const HierarchyParams& params);

/// Inputs of a posterior chain for layer j (1 <= j <= L).
struct PosteriorProblem {
  const Matrix* target_below;  // s^{j-1}, n_{j-1} x B
  const Matrix* theta_below;   // theta^{j-1}
  const Matrix* prior_mean;    // theta^j f(s_hat^{j+1}) or m at the top
  double lambda_below = 1.0;
  double lambda_here = 1.0;
  int layer = 0;
};

// Langevin posterior sample of layer j starting from s_init (usually the
// prediction s_hat^j). Returns the final state of the chain. Column c draws
// its noise from streams[c % streams.size()].
Matrix posterior_sample(const PosteriorProblem& problem, const Matrix& s_init,
                        const HierarchyParams& params,
                        std::span<RngStream> streams, bool noise = true);
Vector posterior_sample(const Vector& target_below, const Vector& s_init,
                        const Vector& s_hat_upper, const Matrix& theta_below,
                        const Matrix* theta_here, double lambda_below,
                        double lambda_here, const HierarchyParams& params,
                        RngStream& rng, bool noise = true);

// Drift of the posterior dynamics (without the 1/tau_s factor).
Matrix posterior_drift(const PosteriorProblem& problem, const Matrix& s,
                       double slope);

// One timestep after the prediction: learn theta^l then infer s^{l+1}, for
// l = 0 .. L-1. `stack` must hold this step's prediction.
StepMetrics step_observation(HierarchyParams& params, LayerStack& stack,
                             const Matrix& m, const Matrix& observation,
                             std::span<RngStream> streams,
                             const StepOptions& options = {},
                             const PhaseHook& hook = {});

// Same step with frozen weights (no learning phase).
StepMetrics infer_observation(const HierarchyParams& params, LayerStack& stack,
                              const Matrix& m, const Matrix& observation,
                              std::span<RngStream> streams,
                              const StepOptions& options = {},
                              const PhaseHook& hook = {});

// Recompute e_hat and e from s, s_hat, theta and m.
void recompute_errors(const HierarchyParams& params, LayerStack& stack,
                      const Matrix& m);

// Noise-free top-down readout from memory (or any top-layer state).
Vector predict_mean(const HierarchyParams& params, const Vector& m);
Matrix predict_mean(const HierarchyParams& params, const Matrix& m);

}  // namespace ebm
