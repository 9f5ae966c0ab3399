#include "ebm/cann.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace ebm {

namespace {

Matrix gaussian_matrix(Index rows, Index cols, std::uint64_t seed) {
  RngStream rng(seed, 0);
  Matrix out(rows, cols);
  for (Index c = 0; c < cols; ++c) {
    for (Index r = 0; r < rows; ++r) out(r, c) = rng.gaussian();
  }
  return out;
}

// sigma_max(U V^T) through the r x r core R_U R_V^T of the two QR factorizations.
double low_rank_sigma_max(const Matrix& U, const Matrix& V) {
  const Index r = U.cols();
  Eigen::HouseholderQR<Matrix> qu(U), qv(V);
  const Matrix ru = qu.matrixQR().topRows(r).triangularView<Eigen::Upper>();
  const Matrix rv = qv.matrixQR().topRows(r).triangularView<Eigen::Upper>();
  Eigen::JacobiSVD<Matrix> svd(ru * rv.transpose());
  return svd.singularValues()(0);
}

}  // namespace

Index CannConfig::effective_rank() const {
  if (rank > 0) return rank;
  return std::min<Index>(n, std::max<Index>(8, n / 16));
}

Matrix build_recurrent(Index n, Index rank, double alpha, std::uint64_t seed) {
  require(n >= 1, "build_recurrent: n must be >= 1");
  require(rank >= 1 && rank <= n, "build_recurrent: rank must be in [1, n]");
  require(alpha >= 0.0, "build_recurrent: alpha must be >= 0");
  const Matrix U = gaussian_matrix(n, rank, derive_seed(seed, 1));
  const Matrix V = gaussian_matrix(n, rank, derive_seed(seed, 2));
  if (alpha == 0.0) return Matrix::Zero(n, n);
  const double sigma = low_rank_sigma_max(U, V);
  return (alpha / sigma) * (U * V.transpose());
}

Matrix build_action_projection(Index n, Index action_dim, double gain, std::uint64_t seed) {
  require(n >= 1 && action_dim >= 0, "build_action_projection: bad shape");
  Matrix A = gaussian_matrix(n, action_dim, seed);
  for (Index c = 0; c < action_dim; ++c) A.col(c) *= gain / A.col(c).norm();
  if (gain != 0.0) {
    for (Index j = 0; j < action_dim; ++j) {
      for (Index k = j + 1; k < action_dim; ++k) {
        if ((A.col(j) - A.col(k)).norm() <= 1e-6) {
          throw ContractViolation("build_action_projection: columns " + std::to_string(j) +
                                  " and " + std::to_string(k) + " coincide");
        }
      }
    }
  }
  return A;
}

double spectral_norm_power(const Matrix& W, int iterations) {
  if (W.size() == 0) return 0.0;
  Vector v = Vector::Ones(W.cols()).normalized();
  double sigma = 0.0;
  for (int i = 0; i < iterations; ++i) {
    Vector w = W.transpose() * (W * v);
    const double norm = w.norm();
    if (norm == 0.0) return 0.0;
    v = w / norm;
    sigma = (W * v).norm();
  }
  return sigma;
}

CannNetwork::CannNetwork(const CannConfig& config) : config_(config) {
  require(config.n >= 1, "CannNetwork: n must be >= 1");
  require(config.beta >= 0.0, "CannNetwork: beta must be >= 0");
  require(config.tau_I > 0.0 && config.tau_V > 0.0, "CannNetwork: time constants must be > 0");
  const Index rank = config.effective_rank();
  require(rank <= config.n, "CannNetwork: rank must not exceed n");

  // Same draws as build_recurrent, kept factored for cheap products.
  const Matrix U = gaussian_matrix(config.n, rank, derive_seed(config.seed_W, 1));
  const Matrix V = gaussian_matrix(config.n, rank, derive_seed(config.seed_W, 2));
  W_ = build_recurrent(config.n, rank, config.alpha, config.seed_W);
  if (config.alpha == 0.0) {
    left_ = Matrix::Zero(config.n, rank);
  } else {
    left_ = (config.alpha / low_rank_sigma_max(U, V)) * U;
  }
  right_ = V;
  const double measured = spectral_norm_power(W_);
  if (std::abs(measured - config.alpha) > 1e-3) {
    throw ContractViolation("CannNetwork: spectral norm " + std::to_string(measured) +
                            " deviates from alpha " + std::to_string(config.alpha));
  }
  A_ = build_action_projection(config.n, config.action_dim, config.action_gain, config.seed_A);
}

Matrix CannNetwork::recurrent(const Matrix& m) const {
  Matrix coeff(right_.cols(), m.cols());
  coeff.noalias() = right_.transpose() * m;
  Matrix out(left_.rows(), m.cols());
  out.noalias() = left_ * coeff;
  return out;
}

Matrix CannNetwork::firing_rate(const Matrix& I) const {
  if (config_.rate == FiringRate::identity) return I;
  return I.array().tanh().matrix();
}

MemoryState MemoryState::column(Index b) const {
  return MemoryState{I.col(b), m.col(b), V.col(b)};
}

void MemoryState::set_column(Index b, const MemoryState& one) {
  I.col(b) = one.I.col(0);
  m.col(b) = one.m.col(0);
  V.col(b) = one.V.col(0);
}

MemoryState random_memory(const CannNetwork& net, std::span<RngStream> streams, double scale) {
  MemoryState state;
  state.I.resize(net.size(), static_cast<Index>(streams.size()));
  fill_gaussian_columns(streams, state.I);
  state.I *= scale;
  state.m = net.firing_rate(state.I);
  state.V = Matrix::Zero(net.size(), state.I.cols());
  return state;
}

MemoryState zero_memory(const CannNetwork& net, Index batch) {
  MemoryState state{Matrix::Zero(net.size(), batch), Matrix(), Matrix::Zero(net.size(), batch)};
  state.m = net.firing_rate(state.I);
  return state;
}

bool is_one_hot(const Vector& a) {
  int ones = 0;
  for (Index i = 0; i < a.size(); ++i) {
    if (a[i] == 1.0) {
      ++ones;
    } else if (a[i] != 0.0) {
      return false;
    }
  }
  return ones == 1;
}

Matrix encode_action(const Matrix& actions, const Matrix& A) {
  require(actions.rows() == A.cols(),
          "encode_action: action length " + std::to_string(actions.rows()) +
              " does not match projection width " + std::to_string(A.cols()));
  Matrix out = Matrix::Zero(A.rows(), actions.cols());
  if (A.cols() > 0) out.noalias() = A * actions;
  return out;
}

Vector encode_action(const Vector& action, const Matrix& A) {
  return encode_action(Matrix(action), A).col(0);
}

void cann_step(const CannNetwork& net, MemoryState& state, const Matrix& drive, double dt) {
  const auto& cfg = net.config();
  require(drive.rows() == net.size() && drive.cols() == state.I.cols(),
          "cann_step: drive shape mismatch");
  require(dt > 0.0, "cann_step: dt must be > 0");
  const Matrix rec = net.recurrent(state.m);
  const Matrix dI = (-state.I + rec - state.V + drive) / cfg.tau_I;
  const Matrix dV = (-state.V + cfg.beta * state.m) / cfg.tau_V;
  state.I += dt * dI;
  state.V += dt * dV;
  state.m = net.firing_rate(state.I);
  if (!state.I.allFinite() || !state.V.allFinite()) {
    throw NumericalDivergence("memory dynamics produced non-finite values");
  }
}

MemoryState memory_update(const CannNetwork& net, MemoryState state, const Matrix& s_top,
                          const Matrix& actions, double duration, double dt) {
  require(dt > 0.0 && duration >= dt, "memory_update: duration must be >= dt > 0");
  require(s_top.rows() == net.size() && s_top.cols() == state.I.cols(),
          "memory_update: top-layer shape mismatch");
  require(actions.cols() == s_top.cols(), "memory_update: action batch mismatch");
  const Matrix drive = s_top + encode_action(actions, net.A());
  const long steps = std::lround(duration / dt);
  for (long k = 0; k < steps; ++k) cann_step(net, state, drive, dt);
  return state;
}

}  // namespace ebm
