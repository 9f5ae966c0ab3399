#pragma once

#include <cstdint>
#include <span>

#include "ebm/common.hpp"
#include "ebm/rng.hpp"

namespace ebm {

enum class FiringRate { tanh, identity };

struct CannConfig {
  Index n = 0;          // number of memory neurons (= n_L)
  Index rank = 0;       // 0 selects max(8, n / 16), capped at n
  double alpha = 0.5;   // spectral norm of W
  double beta = 0.0;    // adaptation strength
  double tau_I = 1.0;
  double tau_V = 1.0;
  FiringRate rate = FiringRate::tanh;
  Index action_dim = 0;
  double action_gain = 1.0;
  std::uint64_t seed_W = 0;
  std::uint64_t seed_A = 0;

  Index effective_rank() const;
};

// alpha * U V^T / sigma_max(U V^T) with U, V ~ N(0, 1)^{n x rank} from `seed`.
Matrix build_recurrent(Index n, Index rank, double alpha, std::uint64_t seed);

// Seeded Gaussian projection with unit-norm columns scaled by `gain`.
Matrix build_action_projection(Index n, Index action_dim, double gain, std::uint64_t seed);

// Largest singular value by power iteration on W^T W.
double spectral_norm_power(const Matrix& W, int iterations = 200);

/// The fixed part of the memory network: recurrent weights and the action
/// projection. Both are generated from seeds at construction and never change.
class CannNetwork {
 public:
  explicit CannNetwork(const CannConfig& config);

  const CannConfig& config() const { return config_; }
  const Matrix& W() const { return W_; }
  const Matrix& A() const { return A_; }
  Index size() const { return config_.n; }

  // W * m, evaluated through the low-rank factors.
  Matrix recurrent(const Matrix& m) const;
  Matrix firing_rate(const Matrix& I) const;

 private:
  CannConfig config_;
  Matrix W_;
  Matrix A_;
  Matrix left_;   // W = left_ * right_^T
  Matrix right_;
};

/// Per-element memory state; one column per batch element.
struct MemoryState {
  Matrix I;  // synaptic input
  Matrix m;  // firing rate H(I)
  Matrix V;  // adaptation

  Index batch() const { return I.cols(); }
  MemoryState column(Index b) const;
  void set_column(Index b, const MemoryState& one);
};

// Small random synaptic input (std `scale`), zero adaptation.
MemoryState random_memory(const CannNetwork& net, std::span<RngStream> streams,
                          double scale = 0.1);
MemoryState zero_memory(const CannNetwork& net, Index batch);

bool is_one_hot(const Vector& a);

// A * a for each column of `actions`.
Matrix encode_action(const Matrix& actions, const Matrix& A);
Vector encode_action(const Vector& action, const Matrix& A);

// One explicit Euler step of the input/adaptation dynamics.
void cann_step(const CannNetwork& net, MemoryState& state, const Matrix& drive, double dt);

// Relax for duration/dt steps under drive s_top + A a. Deterministic.
MemoryState memory_update(const CannNetwork& net, MemoryState state, const Matrix& s_top,
                          const Matrix& actions, double duration, double dt);

}  // namespace ebm
