#include "ebm/hierarchy.hpp"

#include <cmath>
#include <numeric>
#include <string>
#include <type_traits>

namespace ebm {

namespace {

std::string layer_tag(int layer) { return " (layer " + std::to_string(layer) + ")"; }

void check_finite(const Matrix& x, const char* what, int layer) {
  if (!x.allFinite()) {
    throw NumericalDivergence(std::string(what) + " produced non-finite values" +
                                  layer_tag(layer),
                              layer);
  }
}

Matrix rectifier_grad(const Matrix& x, double slope) {
  return x.unaryExpr([slope](double v) { return ebm::leaky_relu_grad(v, slope); });
}

// Replicate `x` (n x B) into P consecutive blocks (n x B*P).
Matrix replicate_blocks(const Matrix& x, Index blocks) {
  if (blocks == 1) return x;
  return x.replicate(1, blocks);
}

// One Euler step of the Hebbian flow, in place. f_upper stays fixed.
void learn_step(Matrix& theta, const Matrix& target, const Matrix& f_upper,
                double lambda, const HierarchyParams& params) {
  const double scale = params.dt / params.tau_theta * lambda /
                       static_cast<double>(f_upper.cols());
  Matrix err = target;
  err.noalias() -= theta * f_upper;
  theta.noalias() += scale * err * f_upper.transpose();
}

// One Euler-Maruyama step of a posterior chain, in place.
void posterior_step(const PosteriorProblem& p, Matrix& s,
                    const HierarchyParams& params,
                    std::span<RngStream> streams, bool noise, Matrix& xi) {
  Matrix drift = posterior_drift(p, s, params.slope);
  s += (params.dt / params.tau_s) * drift;
  if (noise) {
    fill_gaussian_columns(streams, xi);
    s += std::sqrt(2.0 * params.dt / params.tau_s) * xi;
  }
}

void check_problem(const PosteriorProblem& p, const Matrix& s_init) {
  require(p.target_below && p.theta_below && p.prior_mean,
          "posterior_sample: incomplete problem");
  require(p.theta_below->cols() == s_init.rows(),
          "posterior_sample: theta_below columns must equal layer width");
  require(p.theta_below->rows() == p.target_below->rows(),
          "posterior_sample: theta_below rows must equal target width");
  require(p.prior_mean->rows() == s_init.rows() &&
              p.prior_mean->cols() == s_init.cols(),
          "posterior_sample: prior mean shape mismatch");
  require(p.target_below->cols() == s_init.cols(),
          "posterior_sample: batch size mismatch");
}

}  // namespace

int HierarchyParams::steps() const {
  return static_cast<int>(std::lround(T / dt));
}

void HierarchyParams::validate() const {
  require(widths.size() >= 2, "HierarchyParams: need at least one latent layer");
  const std::size_t L = widths.size() - 1;
  require(theta.size() == L, "HierarchyParams: theta count must equal L");
  require(lambda.size() == L + 1, "HierarchyParams: lambda count must equal L+1");
  for (std::size_t l = 0; l < L; ++l) {
    require(theta[l].rows() == widths[l] && theta[l].cols() == widths[l + 1],
            "HierarchyParams: theta[" + std::to_string(l) + "] must be " +
                std::to_string(widths[l]) + "x" + std::to_string(widths[l + 1]));
  }
  for (Index w : widths) require(w >= 1, "HierarchyParams: widths must be >= 1");
  for (double lam : lambda) require(lam > 0.0, "HierarchyParams: precisions must be > 0");
  require(dt > 0.0, "HierarchyParams: dt must be > 0");
  require(T >= dt, "HierarchyParams: T must be >= dt");
  require(tau_s > 0.0 && tau_theta > 0.0, "HierarchyParams: time constants must be > 0");
}

void HierarchyParams::check_finite() const {
  for (std::size_t l = 0; l < theta.size(); ++l) {
    ebm::check_finite(theta[l], "theta", static_cast<int>(l));
  }
}

HierarchyParams HierarchyParams::zeros(std::vector<Index> widths) {
  HierarchyParams p;
  p.widths = std::move(widths);
  require(p.widths.size() >= 2, "HierarchyParams: need at least one latent layer");
  for (std::size_t l = 0; l + 1 < p.widths.size(); ++l) {
    p.theta.push_back(Matrix::Zero(p.widths[l], p.widths[l + 1]));
  }
  p.lambda.assign(p.widths.size(), 1.0);
  return p;
}

double StepMetrics::total_loss() const {
  return std::accumulate(layer_losses.begin(), layer_losses.end(), 0.0);
}

double leaky_relu(double x, double slope) { return x >= 0.0 ? x : slope * x; }

double leaky_relu_grad(double x, double slope) { return x >= 0.0 ? 1.0 : slope; }

Matrix leaky_relu(const Matrix& x, double slope) {
  return x.unaryExpr([slope](double v) { return leaky_relu(v, slope); });
}

Matrix layer_means(const Matrix& theta, const Matrix& s_upper, double slope) {
  require(theta.cols() == s_upper.rows(),
          "layer_mean: theta has " + std::to_string(theta.cols()) +
              " columns but the upper layer has width " +
              std::to_string(s_upper.rows()));
  Matrix out(theta.rows(), s_upper.cols());
  out.noalias() = theta * leaky_relu(s_upper, slope);
  return out;
}

Vector layer_mean(const Matrix& theta, const Vector& s_upper, double slope) {
  return layer_means(theta, Matrix(s_upper), slope).col(0);
}

LayerStack sample_prior_stack(const HierarchyParams& params, const Matrix& m,
                              std::span<RngStream> streams, PriorMode mode,
                              int samples_per_stream) {
  params.validate();
  const std::size_t L = params.layers();
  require(m.rows() == params.widths[L], "sample_prior_stack: memory width must equal n_L");
  require(static_cast<Index>(streams.size()) == m.cols(),
          "sample_prior_stack: one stream per memory column required");
  require(samples_per_stream >= 1, "sample_prior_stack: samples_per_stream must be >= 1");

  LayerStack stack;
  stack.s_hat.resize(L + 1);
  const Index cols = m.cols() * samples_per_stream;
  const int steps = params.steps();
  const double drift_scale = params.dt / params.tau_s;
  const double noise_scale = std::sqrt(2.0 * params.dt / params.tau_s);

  Matrix mean = replicate_blocks(m, samples_per_stream);
  Matrix xi(mean.rows(), cols);
  for (std::size_t k = 0; k <= L; ++k) {
    const std::size_t l = L - k;
    if (l < L) mean = layer_means(params.theta[l], stack.s_hat[l + 1], params.slope);
    xi.resize(mean.rows(), cols);
    Matrix s;
    if (mode == PriorMode::direct) {
      fill_gaussian_columns(streams, xi);
      s = mean + xi / std::sqrt(params.lambda[l]);
    } else {
      s = mean;
      for (int step = 0; step < steps; ++step) {
        fill_gaussian_columns(streams, xi);
        s += drift_scale * (-params.lambda[l]) * (s - mean) + noise_scale * xi;
      }
    }
    check_finite(s, "prior sampling", static_cast<int>(l));
    stack.s_hat[l] = std::move(s);
  }
  return stack;
}

LayerStack sample_prior_stack(const HierarchyParams& params, const Vector& m,
                              RngStream& rng, PriorMode mode) {
  return sample_prior_stack(params, Matrix(m), std::span<RngStream>(&rng, 1), mode);
}

double layer_loss(const Vector& e_hat, double lambda) {
  require(e_hat.allFinite(), "layer_loss: non-finite error vector");
  return 0.5 * lambda * e_hat.squaredNorm();
}

double mean_layer_loss(const Matrix& e_hat, double lambda) {
  double total = 0.0;
  for (Index b = 0; b < e_hat.cols(); ++b) total += layer_loss(e_hat.col(b), lambda);
  return e_hat.cols() > 0 ? total / static_cast<double>(e_hat.cols()) : 0.0;
}

Matrix learn_increment(const Matrix& theta, const Matrix& target,
                       const Matrix& f_upper, double lambda,
                       const HierarchyParams& params) {
  Matrix next = theta;
  learn_step(next, target, f_upper, lambda, params);
  return next - theta;
}

Matrix learn_layer(const Matrix& theta, const Matrix& target,
                   const Matrix& s_hat_upper, double lambda,
                   const HierarchyParams& params) {
  require(theta.rows() == target.rows() && theta.cols() == s_hat_upper.rows(),
          "learn_layer: shape mismatch");
  require(target.cols() == s_hat_upper.cols() && target.cols() > 0,
          "learn_layer: batch size mismatch");
  const Matrix f_upper = leaky_relu(s_hat_upper, params.slope);
  Matrix out = theta;
  for (int step = 0, n = params.steps(); step < n; ++step) {
    learn_step(out, target, f_upper, lambda, params);
  }
  check_finite(out, "learning", -1);
  return out;
}

Matrix posterior_drift(const PosteriorProblem& p, const Matrix& s, double slope) {
  Matrix err = *p.target_below;
  err.noalias() -= *p.theta_below * leaky_relu(s, slope);
  Matrix back(s.rows(), s.cols());
  back.noalias() = p.theta_below->transpose() * err;
  return p.lambda_below * rectifier_grad(s, slope).cwiseProduct(back) -
         p.lambda_here * (s - *p.prior_mean);
}

Matrix posterior_sample(const PosteriorProblem& problem, const Matrix& s_init,
                        const HierarchyParams& params,
                        std::span<RngStream> streams, bool noise) {
  check_problem(problem, s_init);
  if (noise) {
    require(!streams.empty() && s_init.cols() % static_cast<Index>(streams.size()) == 0,
            "posterior_sample: column count must be a multiple of the stream count");
  }
  Matrix s = s_init;
  Matrix xi(s.rows(), s.cols());
  for (int step = 0, n = params.steps(); step < n; ++step) {
    posterior_step(problem, s, params, streams, noise, xi);
  }
  check_finite(s, "posterior sampling", problem.layer);
  return s;
}

Vector posterior_sample(const Vector& target_below, const Vector& s_init,
                        const Vector& s_hat_upper, const Matrix& theta_below,
                        const Matrix* theta_here, double lambda_below,
                        double lambda_here, const HierarchyParams& params,
                        RngStream& rng, bool noise) {
  const Matrix target(target_below);
  const Matrix mean = theta_here
                          ? layer_means(*theta_here, Matrix(s_hat_upper), params.slope)
                          : Matrix(s_hat_upper);
  PosteriorProblem problem{&target, &theta_below, &mean, lambda_below, lambda_here, 0};
  return posterior_sample(problem, Matrix(s_init), params,
                          std::span<RngStream>(&rng, 1), noise)
      .col(0);
}

namespace {

// Shared body of step_observation and infer_observation. Learning only
// happens when Params is non-const.
template <typename Params>
StepMetrics step_impl(Params& params, LayerStack& stack, const Matrix& m,
                      const Matrix& observation, std::span<RngStream> streams,
                      const StepOptions& options, const PhaseHook& hook) {
  constexpr bool kCanLearn = !std::is_const_v<Params>;
  const bool learn = kCanLearn && options.learn;
  params.validate();
  const std::size_t L = params.layers();
  const Index batch = observation.cols();
  require(batch > 0, "step_observation: empty batch");
  require(observation.rows() == params.widths[0], "step_observation: observation width must equal n_0");
  require(m.rows() == params.widths[L] && m.cols() == batch, "step_observation: memory shape mismatch");
  require(stack.s_hat.size() == L + 1, "step_observation: stack has no prediction");
  require(static_cast<Index>(streams.size()) == batch, "step_observation: one stream per batch element required");
  const Index cols = stack.s_hat[0].cols();
  require(cols % batch == 0, "step_observation: prediction columns must be a multiple of the batch");
  const Index blocks = cols / batch;
  for (std::size_t l = 0; l <= L; ++l) {
    require(stack.s_hat[l].rows() == params.widths[l] && stack.s_hat[l].cols() == cols,
            "step_observation: prediction shape mismatch" + layer_tag(static_cast<int>(l)));
  }

  auto emit = [&](Phase phase, int layer, std::uint64_t h = 0) {
    if (hook) hook(PhaseEvent{phase, layer, h});
  };

  StepMetrics metrics;
  metrics.layer_losses.assign(L, 0.0);
  stack.s.assign(L + 1, Matrix());
  stack.s[0] = observation;
  emit(Phase::receive, 0);
  metrics.mse = (stack.s_hat[0] - replicate_blocks(observation, blocks)).squaredNorm() /
                static_cast<double>(stack.s_hat[0].size());

  const int steps = params.steps();
  for (std::size_t l = 0; l < L; ++l) {
    const std::size_t j = l + 1;
    const Matrix f_upper = leaky_relu(stack.s_hat[j], params.slope);
    const Matrix target = replicate_blocks(stack.s[l], blocks);
    {
      Matrix e_hat = target;
      e_hat.noalias() -= params.theta[l] * f_upper;
      metrics.layer_losses[l] = mean_layer_loss(e_hat, params.lambda[l]);
    }

    const Matrix s_init = stack.s_hat[j].leftCols(batch);
    const Matrix prior_mean =
        j < L ? layer_means(params.theta[j], stack.s_hat[j + 1].leftCols(batch), params.slope)
              : m;
    PosteriorProblem problem{&stack.s[l], &params.theta[l], &prior_mean,
                             params.lambda[l], params.lambda[j], static_cast<int>(j)};

    if constexpr (kCanLearn) {
      if (learn && options.co_integrate) {
        emit(Phase::learn, static_cast<int>(l), hash_matrix(stack.s_hat[j]));
        emit(Phase::infer, static_cast<int>(j));
        Matrix s = s_init;
        Matrix xi(s.rows(), s.cols());
        for (int step = 0; step < steps; ++step) {
          learn_step(params.theta[l], target, f_upper, params.lambda[l], params);
          posterior_step(problem, s, params, streams, options.noise, xi);
        }
        check_finite(params.theta[l], "learning", static_cast<int>(l));
        check_finite(s, "posterior sampling", static_cast<int>(j));
        stack.s[j] = std::move(s);
        continue;
      }
      if (learn) {
        emit(Phase::learn, static_cast<int>(l), hash_matrix(stack.s_hat[j]));
        for (int step = 0; step < steps; ++step) {
          learn_step(params.theta[l], target, f_upper, params.lambda[l], params);
        }
        check_finite(params.theta[l], "learning", static_cast<int>(l));
      }
    }
    emit(Phase::infer, static_cast<int>(j));
    stack.s[j] = posterior_sample(problem, s_init, params, streams, options.noise);
  }
  recompute_errors(params, stack, m);
  return metrics;
}

}  // namespace

StepMetrics step_observation(HierarchyParams& params, LayerStack& stack,
                             const Matrix& m, const Matrix& observation,
                             std::span<RngStream> streams,
                             const StepOptions& options, const PhaseHook& hook) {
  return step_impl(params, stack, m, observation, streams, options, hook);
}

StepMetrics infer_observation(const HierarchyParams& params, LayerStack& stack,
                              const Matrix& m, const Matrix& observation,
                              std::span<RngStream> streams,
                              const StepOptions& options, const PhaseHook& hook) {
  return step_impl(params, stack, m, observation, streams, options, hook);
}

void recompute_errors(const HierarchyParams& params, LayerStack& stack, const Matrix& m) {
  const std::size_t L = params.layers();
  require(stack.s.size() == L + 1 && stack.s_hat.size() == L + 1,
          "recompute_errors: incomplete stack");
  const Index batch = stack.s[0].cols();
  stack.e_hat.assign(L + 1, Matrix());
  stack.e.assign(L, Matrix());
  for (std::size_t l = 0; l < L; ++l) {
    stack.e_hat[l] =
        stack.s[l] - layer_means(params.theta[l], stack.s_hat[l + 1].leftCols(batch), params.slope);
    stack.e[l] = stack.s[l] - layer_means(params.theta[l], stack.s[l + 1], params.slope);
  }
  stack.e_hat[L] = stack.s[L] - m;
}

Matrix predict_mean(const HierarchyParams& params, const Matrix& m) {
  const std::size_t L = params.layers();
  require(m.rows() == params.widths[L], "predict_mean: memory width must equal n_L");
  Matrix x = m;
  for (std::size_t k = 0; k < L; ++k) {
    const std::size_t l = L - 1 - k;
    x = layer_means(params.theta[l], x, params.slope);
  }
  return x;
}

Vector predict_mean(const HierarchyParams& params, const Vector& m) {
  return predict_mean(params, Matrix(m)).col(0);
}

}  // namespace ebm
