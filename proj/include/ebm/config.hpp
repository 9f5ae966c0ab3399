#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "ebm/common.hpp"

namespace ebm {

/// One `key = value` line of a config or manifest file.
struct ConfigEntry {
  std::string key;
  std::string value;
  int line = 0;
};

// Parse `key = value` text; `#` starts a comment. Duplicate keys and lines
// without `=` raise FormatError with the line number.
std::vector<ConfigEntry> parse_key_values(const std::string& text, const std::string& origin);
std::vector<ConfigEntry> read_key_values(const std::filesystem::path& path);

// 17 significant digits, enough to round-trip any double.
std::string format_double(double v);

/// Training configuration. Every key has a default; unknown keys are errors.
struct TrainConfig {
  std::string env = "eyemove";  // eyemove | gridworld | sequence
  std::string dataset;          // TensorRecord path
  std::vector<Index> widths{256, 256, 256};  // n_1 .. n_L
  std::vector<double> lambda{1.0};            // one value, or L+1 values
  double slope = 0.01;
  double tau_s = 1.0;
  double inv_tau_theta = 0.1;
  double dt = 0.05;
  double T = 10.0;
  double init_scale = 1.0;     // theta^l ~ N(0, init_scale^2 / n_{l+1})
  std::string prior_mode = "direct";
  bool co_integrate = false;
  int prior_samples = 1;

  double alpha = 0.5;
  double beta = 0.0;
  Index cann_rank = 0;         // 0: max(8, n_L / 16)
  double action_gain = 1.0;
  double memory_duration = 0.0;  // 0: same as T
  std::string firing_rate = "tanh";

  int epochs = 50;
  int batch_size = 128;
  int steps_per_epoch = 0;     // 0: derived from the dataset
  int switch_every = 16;
  std::uint64_t seed = 0;
  Index grid_rows = 4;
  Index grid_cols = 4;
  int K = 16;
  int init_frames = 10;
  int eval_cadence = 0;        // epochs between evaluations, 0 disables
  bool trace = false;          // per-step metrics rows

  void validate() const;
  std::vector<double> layer_lambdas() const;  // expanded to L+1 entries
  double memory_time() const { return memory_duration > 0.0 ? memory_duration : T; }

  static TrainConfig from_entries(const std::vector<ConfigEntry>& entries,
                                  const std::string& origin);
  static TrainConfig load(const std::filesystem::path& path);
  // Canonical `key = value` text; from_entries(parse(to_text())) round-trips.
  std::string to_text() const;
  std::uint64_t hash() const;

  // Key names with one-line descriptions, for --help.
  static std::vector<std::pair<std::string, std::string>> documented_keys();
};

}  // namespace ebm
