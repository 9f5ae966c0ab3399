#pragma once

#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "ebm/cann.hpp"
#include "ebm/config.hpp"
#include "ebm/envs.hpp"
#include "ebm/formats.hpp"
#include "ebm/hierarchy.hpp"
#include "ebm/tensor_io.hpp"

namespace ebm {

struct DataShape {
  Index height = 0;
  Index width = 0;
  Index channels = 1;
};

/// Observation source for training and evaluation.
struct Dataset {
  std::string env;  // eyemove | gridworld | sequence
  DataShape shape;  // whole image, tile or frame
  std::shared_ptr<const PatchedImages> images;
  std::shared_ptr<const std::vector<Vector>> tiles;
  Index map_rows = 0;
  Index map_cols = 0;
  std::vector<Episode> sequences;

  Index observation_dim() const;
  Index action_dim() const;
  std::size_t item_count() const;  // images, tiles or sequences

  static Dataset eyemove(std::vector<Image> images, PatchGrid grid);
  static Dataset gridworld(std::vector<Vector> tiles, Index rows, Index cols, DataShape tile_shape);
  static Dataset sequence(std::vector<Episode> episodes, DataShape frame_shape);
  // (N,H,W,C) images, (R,C,h,w) tiles or (N,T,H,W) frames.
  static Dataset from_tensor(const std::string& env, const TensorRecord& record, PatchGrid grid);
  TensorRecord to_tensor() const;
};

struct Checkpoint {
  TrainConfig config;
  HierarchyParams params;
  CannConfig cann;
  EpisodeMeta meta;
  DataShape shape;
  long step = 0;
  std::uint64_t config_hash = 0;
  std::uint64_t W_hash = 0;
  std::uint64_t A_hash = 0;
};

// Directory of TensorRecords (theta_<l>.ebmt) plus manifest.txt.
void save_checkpoint(const std::filesystem::path& dir, const Checkpoint& checkpoint);
// Regenerates W and A from the stored seeds and checks their hashes.
Checkpoint load_checkpoint(const std::filesystem::path& dir);
std::uint64_t params_hash(const HierarchyParams& params);

/// A checkpoint with its memory network instantiated.
struct Model {
  Checkpoint checkpoint;
  CannNetwork network;

  explicit Model(Checkpoint c);
  const HierarchyParams& params() const { return checkpoint.params; }
  const TrainConfig& config() const { return checkpoint.config; }
};

/// Memory of one stream between steps: the network state and the top-layer
/// sample that has not yet been fed into it.
struct StreamMemory {
  MemoryState state;
  Vector pending_top;
};

struct EvalRecord {
  int epoch = 0;
  std::string name;
  double value = 0.0;
};

struct TrainLog {
  std::vector<MetricsRow> epochs;
  std::vector<MetricsRow> trace;
  std::vector<EvalRecord> evals;
};

struct TrainResult {
  Checkpoint checkpoint;
  TrainLog log;
};

class TrainingDiverged : public NumericalDivergence {
 public:
  TrainingDiverged(const std::string& what, int layer, int epoch, long step, TrainLog log)
      : NumericalDivergence(what, layer), epoch(epoch), step(step), log(std::move(log)) {}
  int epoch;
  long step;
  TrainLog log;
};

Checkpoint initial_checkpoint(const TrainConfig& config, const Dataset& data);
int steps_per_epoch(const TrainConfig& config, const Dataset& data);
using EpochCallback = std::function<void(const MetricsRow&)>;
TrainResult train(const TrainConfig& config, const Dataset& data, const PhaseHook& hook = {},
                  const EpochCallback& on_epoch = {});

// Random start, then prediction and inference along the episode's
// action/observation pairs with frozen weights. If `predictions` is given it
// receives the noise-free prediction made before each observation.
StreamMemory warm_memory(const Model& model, const Episode& episode, std::uint64_t seed,
                         std::vector<Vector>* predictions = nullptr, const PhaseHook& hook = {});

// Eye-movement test protocol: 2K random moves restricted to the given patches.
StreamMemory init_memory_protocol(const Model& model,
                                  const std::vector<std::pair<Index, Vector>>& patches,
                                  std::uint64_t seed);

// Closed-loop rollout; no observations are received.
std::vector<Vector> imagine(const Model& model, StreamMemory memory, const std::vector<Vector>& actions,
                            bool deterministic = true, std::uint64_t seed = 0);

// Query every patch position from a copy of `memory` and assemble the image.
// With `sequential` the memory instead evolves across positions 0, 1, ...
Image generate_whole_image(const Model& model, const StreamMemory& memory, bool sequential = false);

double evaluate_mse(const std::vector<Vector>& predictions, const std::vector<Vector>& truth);

struct EyeEvalResult {
  double mse_all = 0.0;
  double mse_unseen = 0.0;  // NaN when K covers every patch
  std::vector<Image> reconstructions;
  std::vector<std::vector<Index>> seen_positions;
  std::vector<StreamMemory> memories;  // initialised memory per image
};

// Init-K protocol on each image (or the first `limit` images).
EyeEvalResult evaluate_eyemove(const Model& model, const PatchedImages& images, int K,
                               std::uint64_t seed, std::size_t limit = 0);

struct ReplayResult {
  double mse_all = 0.0;
  double mse_init = 0.0;    // predictions made while memory was initialised
  double mse_future = 0.0;  // imagined frames
  std::vector<std::vector<Vector>> predictions;
  std::vector<StreamMemory> memories;  // memory after the initial frames
};

ReplayResult evaluate_replay(const Model& model, const std::vector<Episode>& episodes, int init_frames,
                             std::uint64_t seed, std::size_t limit = 0);

// Save / load a StreamMemory as a (4, n_L) float64 record: I, m, V, pending top.
void save_memory(const std::filesystem::path& path, const StreamMemory& memory);
StreamMemory load_memory(const std::filesystem::path& path, const Model& model);

}  // namespace ebm
