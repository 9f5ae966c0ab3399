#include "ebm/harness.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace ebm {

namespace {

// Sub-seed purposes derived from the run seed.
enum SeedPurpose : std::uint64_t {
  kThetaSeed = 1,
  kNoiseSeed = 2,
  kActionSeed = 3,
  kScheduleSeed = 4,
  kMemorySeed = 5,
  kEvalSeed = 6,
  kRecurrentSeed = 7,
  kProjectionSeed = 8,
};

std::vector<RngStream> make_streams(std::uint64_t seed, Index count) {
  std::vector<RngStream> out;
  out.reserve(static_cast<std::size_t>(count));
  for (Index b = 0; b < count; ++b) out.emplace_back(seed, static_cast<std::uint64_t>(b));
  return out;
}

// Uniform permutation of 0..n-1 (Fisher-Yates).
std::vector<std::size_t> permutation(std::size_t n, RngStream& rng) {
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), std::size_t{0});
  for (std::size_t i = n; i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng.below(i));
    std::swap(p[i - 1], p[j]);
  }
  return p;
}

Vector random_one_hot(RngStream& rng, Index n) {
  return one_hot(static_cast<Index>(rng.below(static_cast<std::uint64_t>(n))), n);
}

StepOptions step_options(const TrainConfig& config, bool learn) {
  StepOptions o;
  o.prior_mode = config.prior_mode == "langevin" ? PriorMode::langevin : PriorMode::direct;
  o.co_integrate = config.co_integrate;
  o.learn = learn;
  return o;
}

std::string u64_text(std::uint64_t v) { return std::to_string(v); }

std::uint64_t parse_u64(const std::string& s, const std::string& key) {
  try {
    std::size_t used = 0;
    const auto v = std::stoull(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw FormatError("manifest: key '" + key + "' is not an unsigned integer");
  }
}

double parse_f64(const std::string& s, const std::string& key) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw FormatError("manifest: key '" + key + "' is not a number");
  }
}

void check_unit_range(const TensorRecord& record) {
  for (double v : record.values) {
    if (!(v >= 0.0 && v <= 1.0)) throw FormatError("dataset: values must lie in [0, 1]");
  }
}

/// Per-stream observation sources for one training run.
class StreamSource {
 public:
  StreamSource(const TrainConfig& config, const Dataset& data, Index batch)
      : data_(data), batch_(batch), action_rng_(make_streams(derive_seed(config.seed, kActionSeed), batch)) {
    RngStream schedule(derive_seed(config.seed, kScheduleSeed), 0);
    if (data.env == "eyemove") {
      for (Index b = 0; b < batch; ++b) {
        eye_.emplace_back(data.images, permutation(data.images->images.size(), schedule), config.switch_every);
      }
    } else if (data.env == "gridworld") {
      for (Index b = 0; b < batch; ++b) {
        const auto r = static_cast<Index>(schedule.below(static_cast<std::uint64_t>(data.map_rows)));
        const auto c = static_cast<Index>(schedule.below(static_cast<std::uint64_t>(data.map_cols)));
        grid_.emplace_back(data.tiles, data.map_rows, data.map_cols, r, c);
      }
    } else {
      require(!data.sequences.empty(), "train: sequence dataset is empty");
      length_ = data.sequences.front().size();
      for (const auto& ep : data.sequences) {
        require(ep.size() == length_ && length_ > 0, "train: sequences must share a positive length");
      }
      schedule_ = std::make_unique<RngStream>(schedule);
    }
  }

  // True when every stream begins a new episode at this step.
  bool episode_start(long step) const {
    return data_.env == "sequence" && step % static_cast<long>(length_) == 0;
  }

  // Actions a_t for all streams (called once per step, before observe).
  Matrix actions(long step) {
    const Index na = data_.action_dim();
    Matrix a = Matrix::Zero(na, batch_);
    if (data_.env == "sequence") {
      if (episode_start(step)) assign_sequences();
      return a;
    }
    for (Index b = 0; b < batch_; ++b) a.col(b) = random_one_hot(action_rng_[static_cast<std::size_t>(b)], na);
    return a;
  }

  Matrix observe(long step, const Matrix& actions) {
    Matrix obs(data_.observation_dim(), batch_);
    for (Index b = 0; b < batch_; ++b) {
      const auto i = static_cast<std::size_t>(b);
      if (data_.env == "eyemove") {
        obs.col(b) = eye_[i].step(actions.col(b));
      } else if (data_.env == "gridworld") {
        obs.col(b) = grid_[i].step(actions.col(b));
      } else {
        const auto t = static_cast<std::size_t>(step % static_cast<long>(length_));
        obs.col(b) = data_.sequences[assigned_[i]].observations[t];
      }
    }
    return obs;
  }

 private:
  // Sequences are visited in shuffled chunks of `batch` per pass.
  void assign_sequences() {
    const std::size_t n = data_.sequences.size();
    if (queue_.size() < static_cast<std::size_t>(batch_)) {
      while (queue_.size() < static_cast<std::size_t>(batch_)) {
        const auto p = permutation(n, *schedule_);
        queue_.insert(queue_.end(), p.begin(), p.end());
      }
    }
    assigned_.assign(queue_.begin(), queue_.begin() + batch_);
    queue_.erase(queue_.begin(), queue_.begin() + batch_);
  }

  const Dataset& data_;
  Index batch_;
  std::vector<RngStream> action_rng_;
  std::vector<EyeEnv> eye_;
  std::vector<GridEnv> grid_;
  std::size_t length_ = 0;
  std::unique_ptr<RngStream> schedule_;
  std::vector<std::size_t> queue_;
  std::vector<std::size_t> assigned_;
};

MetricsRow mean_row(int epoch, long step, const std::vector<StepMetrics>& steps, std::size_t layers) {
  MetricsRow row;
  row.epoch = epoch;
  row.step = step;
  row.losses.assign(layers, 0.0);
  for (const auto& s : steps) {
    row.mse += s.mse;
    for (std::size_t l = 0; l < layers; ++l) row.losses[l] += s.layer_losses[l];
  }
  const double n = steps.empty() ? 1.0 : static_cast<double>(steps.size());
  row.mse /= n;
  for (auto& l : row.losses) l /= n;
  return row;
}

void run_evaluation(const TrainConfig& config, const Dataset& data, const Checkpoint& checkpoint,
                    int epoch, TrainLog& log) {
  const Model model(checkpoint);
  const std::uint64_t seed = derive_seed(config.seed, kEvalSeed);
  if (data.env == "eyemove") {
    const auto r = evaluate_eyemove(model, *data.images, config.K, seed);
    log.evals.push_back({epoch, "mse_all_patches", r.mse_all});
    log.evals.push_back({epoch, "mse_unseen_patches", r.mse_unseen});
  } else if (data.env == "sequence") {
    const auto r = evaluate_replay(model, data.sequences, config.init_frames, seed);
    log.evals.push_back({epoch, "mse_all_frames", r.mse_all});
    log.evals.push_back({epoch, "mse_future_frames", r.mse_future});
  }
}

}  // namespace

Index Dataset::observation_dim() const {
  if (env == "eyemove") return images->patch_dim();
  if (env == "gridworld") return tiles->front().size();
  return sequences.front().observations.front().size();
}

Index Dataset::action_dim() const {
  if (env == "eyemove") return images->grid.count();
  if (env == "gridworld") return 4;
  return 1;
}

std::size_t Dataset::item_count() const {
  if (env == "eyemove") return images->images.size();
  if (env == "gridworld") return tiles->size();
  return sequences.size();
}

Dataset Dataset::eyemove(std::vector<Image> images, PatchGrid grid) {
  Dataset d;
  d.env = "eyemove";
  require(!images.empty(), "Dataset: no images");
  d.shape = DataShape{images[0].height, images[0].width, images[0].channels};
  d.images = std::make_shared<const PatchedImages>(std::move(images), grid);
  return d;
}

Dataset Dataset::gridworld(std::vector<Vector> tiles, Index rows, Index cols, DataShape tile_shape) {
  require(static_cast<Index>(tiles.size()) == rows * cols, "Dataset: tile count must be rows*cols");
  for (const auto& t : tiles) {
    require(t.size() == tile_shape.height * tile_shape.width * tile_shape.channels,
            "Dataset: tile size does not match its shape");
  }
  Dataset d;
  d.env = "gridworld";
  d.shape = tile_shape;
  d.tiles = std::make_shared<const std::vector<Vector>>(std::move(tiles));
  d.map_rows = rows;
  d.map_cols = cols;
  return d;
}

Dataset Dataset::sequence(std::vector<Episode> episodes, DataShape frame_shape) {
  require(!episodes.empty(), "Dataset: no sequences");
  const Index dim = frame_shape.height * frame_shape.width * frame_shape.channels;
  for (const auto& ep : episodes) {
    require(ep.size() > 0 && ep.actions.size() == ep.size(), "Dataset: malformed sequence");
    for (const auto& o : ep.observations) require(o.size() == dim, "Dataset: frame size mismatch");
  }
  Dataset d;
  d.env = "sequence";
  d.shape = frame_shape;
  d.sequences = std::move(episodes);
  return d;
}

Dataset Dataset::from_tensor(const std::string& env, const TensorRecord& record, PatchGrid grid) {
  record.validate();
  check_unit_range(record);
  const auto& d = record.dims;
  auto value = [&](std::size_t i) { return record.values[i]; };
  if (env == "eyemove") {
    if (d.size() != 4) throw FormatError("dataset: eyemove expects (N, H, W, C) images");
    const Index n = d[0], h = d[1], w = d[2], c = d[3];
    if (h % grid.rows != 0 || w % grid.cols != 0) {
      throw FormatError("dataset: image size is not divisible by the patch grid");
    }
    std::vector<Image> images;
    std::size_t k = 0;
    for (Index i = 0; i < n; ++i) {
      Image img(h, w, c);
      for (Index j = 0; j < img.data.size(); ++j) img.data[j] = value(k++);
      images.push_back(std::move(img));
    }
    if (images.empty()) throw FormatError("dataset: no images");
    return eyemove(std::move(images), grid);
  }
  if (env == "gridworld") {
    if (d.size() != 4) throw FormatError("dataset: gridworld expects (R, C, h, w) tiles");
    const Index rows = d[0], cols = d[1], h = d[2], w = d[3];
    std::vector<Vector> tiles;
    std::size_t k = 0;
    for (Index i = 0; i < rows * cols; ++i) {
      Vector t(h * w);
      for (Index j = 0; j < t.size(); ++j) t[j] = value(k++);
      tiles.push_back(std::move(t));
    }
    if (tiles.empty()) throw FormatError("dataset: no tiles");
    return gridworld(std::move(tiles), rows, cols, DataShape{h, w, 1});
  }
  if (env == "sequence") {
    if (d.size() != 4) throw FormatError("dataset: sequence expects (N, T, H, W) frames");
    const Index n = d[0], t_len = d[1], h = d[2], w = d[3];
    std::vector<Episode> episodes;
    std::size_t k = 0;
    for (Index i = 0; i < n; ++i) {
      std::vector<Vector> frames;
      for (Index t = 0; t < t_len; ++t) {
        Vector f(h * w);
        for (Index j = 0; j < f.size(); ++j) f[j] = value(k++);
        frames.push_back(std::move(f));
      }
      SeqEnv env_seq(std::move(frames));
      episodes.push_back(rollout(env_seq));
    }
    if (episodes.empty() || t_len == 0) throw FormatError("dataset: no frames");
    return sequence(std::move(episodes), DataShape{h, w, 1});
  }
  throw FormatError("dataset: unknown environment '" + env + "'");
}

TensorRecord Dataset::to_tensor() const {
  TensorRecord r;
  r.dtype = DType::f32;
  auto u32 = [](Index v) { return static_cast<std::uint32_t>(v); };
  if (env == "eyemove") {
    r.dims = {u32(static_cast<Index>(images->images.size())), u32(shape.height), u32(shape.width),
              u32(shape.channels)};
    for (const auto& img : images->images) r.values.insert(r.values.end(), img.data.begin(), img.data.end());
  } else if (env == "gridworld") {
    r.dims = {u32(map_rows), u32(map_cols), u32(shape.height), u32(shape.width)};
    for (const auto& t : *tiles) r.values.insert(r.values.end(), t.begin(), t.end());
  } else {
    r.dims = {u32(static_cast<Index>(sequences.size())), u32(static_cast<Index>(sequences.front().size())),
              u32(shape.height), u32(shape.width)};
    for (const auto& ep : sequences) {
      for (const auto& f : ep.observations) r.values.insert(r.values.end(), f.begin(), f.end());
    }
  }
  return r;
}

std::uint64_t params_hash(const HierarchyParams& params) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& t : params.theta) {
    const std::uint64_t th = hash_matrix(t);
    h = hash_bytes(std::as_bytes(std::span(&th, 1)), h);
  }
  return h;
}

Checkpoint initial_checkpoint(const TrainConfig& config, const Dataset& data) {
  config.validate();
  require(config.env == data.env, "train: config env '" + config.env + "' does not match dataset '" + data.env + "'");
  Checkpoint c;
  c.config = config;

  std::vector<Index> widths{data.observation_dim()};
  widths.insert(widths.end(), config.widths.begin(), config.widths.end());
  HierarchyParams& p = c.params;
  p = HierarchyParams::zeros(widths);
  p.lambda = config.layer_lambdas();
  p.slope = config.slope;
  p.tau_s = config.tau_s;
  p.tau_theta = 1.0 / config.inv_tau_theta;
  p.dt = config.dt;
  p.T = config.T;
  const std::uint64_t theta_seed = derive_seed(config.seed, kThetaSeed);
  for (std::size_t l = 0; l < p.layers(); ++l) {
    RngStream rng(theta_seed, l);
    Matrix& t = p.theta[l];
    const double scale = config.init_scale / std::sqrt(static_cast<double>(t.cols()));
    for (Index j = 0; j < t.cols(); ++j) {
      for (Index i = 0; i < t.rows(); ++i) t(i, j) = scale * rng.gaussian();
    }
  }
  p.validate();

  CannConfig& cc = c.cann;
  cc.n = widths.back();
  cc.rank = config.cann_rank;
  cc.alpha = config.alpha;
  cc.beta = config.beta;
  cc.rate = config.firing_rate == "identity" ? FiringRate::identity : FiringRate::tanh;
  cc.action_dim = data.action_dim();
  cc.action_gain = config.action_gain;
  cc.seed_W = derive_seed(config.seed, kRecurrentSeed);
  cc.seed_A = derive_seed(config.seed, kProjectionSeed);
  const CannNetwork net(cc);
  c.W_hash = hash_matrix(net.W());
  c.A_hash = hash_matrix(net.A());

  c.meta = EpisodeMeta{data.env, data.env == "gridworld" ? data.map_rows : config.grid_rows,
                       data.env == "gridworld" ? data.map_cols : config.grid_cols, data.action_dim()};
  if (data.env == "sequence") c.meta.grid_rows = c.meta.grid_cols = 0;
  c.shape = data.shape;
  c.config_hash = config.hash();
  return c;
}

int steps_per_epoch(const TrainConfig& config, const Dataset& data) {
  if (config.steps_per_epoch > 0) return config.steps_per_epoch;
  const auto B = static_cast<std::size_t>(config.batch_size);
  auto ceil_div = [](std::size_t a, std::size_t b) { return static_cast<int>((a + b - 1) / b); };
  if (data.env == "eyemove") {
    return ceil_div(data.item_count() * static_cast<std::size_t>(data.images->grid.count()), B);
  }
  if (data.env == "gridworld") return ceil_div(data.item_count() * 4, B);
  return ceil_div(data.item_count(), B) * static_cast<int>(data.sequences.front().size());
}

TrainResult train(const TrainConfig& config, const Dataset& data, const PhaseHook& hook,
                  const EpochCallback& on_epoch) {
  TrainResult result;
  result.checkpoint = initial_checkpoint(config, data);
  Checkpoint& ck = result.checkpoint;
  HierarchyParams& params = ck.params;
  TrainLog& log = result.log;
  const CannNetwork net(ck.cann);
  const std::size_t L = params.layers();
  const Index B = config.batch_size;
  const int per_epoch = steps_per_epoch(config, data);
  const StepOptions options = step_options(config, true);
  const double duration = config.memory_time();

  auto noise = make_streams(derive_seed(config.seed, kNoiseSeed), B);
  auto memory_rng = make_streams(derive_seed(config.seed, kMemorySeed), B);
  StreamSource source(config, data, B);
  auto emit = [&](Phase phase) {
    if (hook) hook(PhaseEvent{phase, -1, 0});
  };

  MemoryState memory;
  Matrix actions;
  long step = 0;
  auto begin_episode = [&]() {
    memory = random_memory(net, memory_rng);
    actions = source.actions(step);
    memory = memory_update(net, std::move(memory), Matrix::Zero(net.size(), B), actions, duration, config.dt);
  };

  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    std::vector<StepMetrics> epoch_steps;
    epoch_steps.reserve(static_cast<std::size_t>(per_epoch));
    try {
      for (int k = 0; k < per_epoch; ++k, ++step) {
        if (step == 0 || source.episode_start(step)) begin_episode();
        emit(Phase::predict);
        LayerStack stack = sample_prior_stack(params, memory.m, noise,
                                              options.prior_mode, config.prior_samples);
        const Matrix obs = source.observe(step, actions);
        StepMetrics metrics = step_observation(params, stack, memory.m, obs, noise, options, hook);
        if (config.trace) {
          log.trace.push_back(MetricsRow{epoch, step, metrics.mse, metrics.layer_losses});
        }
        epoch_steps.push_back(std::move(metrics));
        if (!source.episode_start(step + 1)) {
          actions = source.actions(step + 1);
          emit(Phase::memory_update);
          memory = memory_update(net, std::move(memory), stack.s[L], actions, duration, config.dt);
        }
      }
    } catch (const NumericalDivergence& e) {
      throw TrainingDiverged(std::string(e.what()) + " at epoch " + std::to_string(epoch) + ", step " +
                                 std::to_string(step),
                             e.layer(), epoch, step, std::move(log));
    }
    log.epochs.push_back(mean_row(epoch, step, epoch_steps, L));
    if (on_epoch) on_epoch(log.epochs.back());
    ck.step = step;
    if (config.eval_cadence > 0 && epoch % config.eval_cadence == 0) {
      run_evaluation(config, data, ck, epoch, log);
    }
  }
  ck.step = step;
  return result;
}

Model::Model(Checkpoint c) : checkpoint(std::move(c)), network(checkpoint.cann) {
  checkpoint.params.validate();
  require(network.size() == checkpoint.params.top_width(), "Model: memory width must equal n_L");
}

StreamMemory warm_memory(const Model& model, const Episode& episode, std::uint64_t seed,
                         std::vector<Vector>* predictions, const PhaseHook& hook) {
  const HierarchyParams& params = model.params();
  const CannNetwork& net = model.network;
  const TrainConfig& config = model.config();
  const std::size_t L = params.layers();
  const double duration = config.memory_time();
  const StepOptions options = step_options(config, false);
  RngStream noise(derive_seed(seed, kNoiseSeed), 0);
  RngStream memory_rng(derive_seed(seed, kMemorySeed), 0);
  std::span<RngStream> streams(&noise, 1);

  StreamMemory out{random_memory(net, std::span<RngStream>(&memory_rng, 1)), Vector::Zero(net.size())};
  if (episode.size() == 0) return out;
  require(episode.actions.size() == episode.size(), "warm_memory: actions and observations must align");
  out.state = memory_update(net, std::move(out.state), Matrix::Zero(net.size(), 1),
                            Matrix(episode.actions[0]), duration, config.dt);
  for (std::size_t t = 0; t < episode.size(); ++t) {
    if (predictions) predictions->push_back(predict_mean(params, Vector(out.state.m.col(0))));
    if (hook) hook(PhaseEvent{Phase::predict, -1, 0});
    LayerStack stack = sample_prior_stack(params, out.state.m, streams, options.prior_mode);
    infer_observation(params, stack, out.state.m, Matrix(episode.observations[t]), streams, options, hook);
    if (t + 1 < episode.size()) {
      if (hook) hook(PhaseEvent{Phase::memory_update, -1, 0});
      out.state = memory_update(net, std::move(out.state), stack.s[L], Matrix(episode.actions[t + 1]),
                                duration, config.dt);
    } else {
      out.pending_top = stack.s[L].col(0);
    }
  }
  return out;
}

StreamMemory init_memory_protocol(const Model& model, const std::vector<std::pair<Index, Vector>>& patches,
                                  std::uint64_t seed) {
  const Index positions = model.checkpoint.meta.action_dim;
  const auto K = static_cast<Index>(patches.size());
  require(model.checkpoint.meta.env == "eyemove", "init_memory_protocol: needs an eye-movement checkpoint");
  require(K >= 1, "init_memory_protocol: K must be >= 1");
  require(K <= positions, "init_memory_protocol: K = " + std::to_string(K) + " exceeds the " +
                              std::to_string(positions) + " patch positions");
  for (const auto& [pos, patch] : patches) {
    require(pos >= 0 && pos < positions, "init_memory_protocol: patch position out of range");
    require(patch.size() == model.params().widths[0], "init_memory_protocol: patch size mismatch");
  }
  RngStream rng(derive_seed(seed, kActionSeed), 0);
  Episode ep;
  for (Index t = 0; t < 2 * K; ++t) {
    const auto& [pos, patch] = patches[static_cast<std::size_t>(rng.below(static_cast<std::uint64_t>(K)))];
    ep.actions.push_back(one_hot(pos, positions));
    ep.observations.push_back(patch);
  }
  return warm_memory(model, ep, seed);
}

std::vector<Vector> imagine(const Model& model, StreamMemory memory, const std::vector<Vector>& actions,
                            bool deterministic, std::uint64_t seed) {
  const HierarchyParams& params = model.params();
  const CannNetwork& net = model.network;
  const double duration = model.config().memory_time();
  const double sd = 1.0 / std::sqrt(params.lambda.back());
  RngStream rng(derive_seed(seed, kNoiseSeed), 1);
  require(memory.pending_top.size() == net.size(), "imagine: memory width mismatch");
  std::vector<Vector> out;
  out.reserve(actions.size());
  for (const auto& a : actions) {
    require(a.size() == net.A().cols(), "imagine: action length does not match the environment");
    memory.state = memory_update(net, std::move(memory.state), Matrix(memory.pending_top), Matrix(a),
                                 duration, model.config().dt);
    Vector top = memory.state.m.col(0);
    if (!deterministic) {
      for (Index i = 0; i < top.size(); ++i) top[i] += sd * rng.gaussian();
    }
    out.push_back(predict_mean(params, top));
    memory.pending_top = std::move(top);
  }
  return out;
}

Image generate_whole_image(const Model& model, const StreamMemory& memory, bool sequential) {
  const auto& meta = model.checkpoint.meta;
  require(meta.env == "eyemove", "generate_whole_image: needs an eye-movement checkpoint");
  const PatchGrid grid{meta.grid_rows, meta.grid_cols};
  std::vector<Vector> patches;
  if (sequential) {
    std::vector<Vector> actions;
    for (Index p = 0; p < grid.count(); ++p) actions.push_back(one_hot(p, grid.count()));
    patches = imagine(model, memory, actions);
  } else {
    for (Index p = 0; p < grid.count(); ++p) patches.push_back(imagine(model, memory, {one_hot(p, grid.count())}).front());
  }
  for (auto& v : patches) v = v.cwiseMax(0.0).cwiseMin(1.0);
  const auto& s = model.checkpoint.shape;
  return unpatchify(patches, grid, s.height, s.width, s.channels);
}

double evaluate_mse(const std::vector<Vector>& predictions, const std::vector<Vector>& truth) {
  require(predictions.size() == truth.size(), "evaluate_mse: frame count mismatch");
  double sum = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    require(predictions[i].size() == truth[i].size(), "evaluate_mse: frame size mismatch");
    sum += (predictions[i] - truth[i]).squaredNorm();
    count += static_cast<std::size_t>(truth[i].size());
  }
  return count == 0 ? 0.0 : sum / static_cast<double>(count);
}

EyeEvalResult evaluate_eyemove(const Model& model, const PatchedImages& images, int K, std::uint64_t seed,
                               std::size_t limit) {
  const Index positions = images.grid.count();
  require(K >= 1 && K <= positions, "evaluate_eyemove: K must be in [1, " + std::to_string(positions) + "]");
  const std::size_t n = limit == 0 ? images.images.size() : std::min(limit, images.images.size());
  EyeEvalResult r;
  double all = 0.0, unseen = 0.0;
  std::size_t all_count = 0, unseen_count = 0;
  for (std::size_t i = 0; i < n; ++i) {
    RngStream rng(derive_seed(seed, kEvalSeed), i);
    auto order = permutation(static_cast<std::size_t>(positions), rng);
    order.resize(static_cast<std::size_t>(K));
    std::sort(order.begin(), order.end());
    std::vector<std::pair<Index, Vector>> seen;
    for (auto p : order) seen.emplace_back(static_cast<Index>(p), images.patches[i][p]);
    const StreamMemory memory = init_memory_protocol(model, seen, derive_seed(seed, i));
    Image img = generate_whole_image(model, memory);
    const auto predicted = patchify(img, images.grid);
    for (Index p = 0; p < positions; ++p) {
      const auto pi = static_cast<std::size_t>(p);
      const double err = (predicted[pi] - images.patches[i][pi]).squaredNorm();
      const auto size = static_cast<std::size_t>(predicted[pi].size());
      all += err;
      all_count += size;
      if (!std::binary_search(order.begin(), order.end(), pi)) {
        unseen += err;
        unseen_count += size;
      }
    }
    r.reconstructions.push_back(std::move(img));
    r.seen_positions.emplace_back(order.begin(), order.end());
    r.memories.push_back(memory);
  }
  r.mse_all = all / static_cast<double>(std::max<std::size_t>(all_count, 1));
  r.mse_unseen = unseen_count == 0 ? std::numeric_limits<double>::quiet_NaN()
                                   : unseen / static_cast<double>(unseen_count);
  return r;
}

ReplayResult evaluate_replay(const Model& model, const std::vector<Episode>& episodes, int init_frames,
                             std::uint64_t seed, std::size_t limit) {
  require(init_frames >= 1, "evaluate_replay: init_frames must be >= 1");
  const std::size_t n = limit == 0 ? episodes.size() : std::min(limit, episodes.size());
  ReplayResult r;
  std::vector<Vector> all_p, all_t, init_p, init_t, fut_p, fut_t;
  for (std::size_t e = 0; e < n; ++e) {
    const Episode& ep = episodes[e];
    const auto k = static_cast<std::size_t>(init_frames);
    require(ep.size() >= k, "evaluate_replay: sequence shorter than init_frames");
    Episode head;
    head.meta = ep.meta;
    head.observations.assign(ep.observations.begin(), ep.observations.begin() + init_frames);
    head.actions.assign(ep.actions.begin(), ep.actions.begin() + init_frames);
    std::vector<Vector> preds;
    const StreamMemory memory = warm_memory(model, head, derive_seed(seed, e), &preds);
    const std::vector<Vector> rest(ep.actions.begin() + init_frames, ep.actions.end());
    const auto future = imagine(model, memory, rest);
    init_p.insert(init_p.end(), preds.begin(), preds.end());
    init_t.insert(init_t.end(), head.observations.begin(), head.observations.end());
    fut_p.insert(fut_p.end(), future.begin(), future.end());
    fut_t.insert(fut_t.end(), ep.observations.begin() + init_frames, ep.observations.end());
    preds.insert(preds.end(), future.begin(), future.end());
    all_p.insert(all_p.end(), preds.begin(), preds.end());
    all_t.insert(all_t.end(), ep.observations.begin(), ep.observations.end());
    r.predictions.push_back(std::move(preds));
    r.memories.push_back(memory);
  }
  r.mse_all = evaluate_mse(all_p, all_t);
  r.mse_init = evaluate_mse(init_p, init_t);
  r.mse_future = fut_t.empty() ? std::numeric_limits<double>::quiet_NaN() : evaluate_mse(fut_p, fut_t);
  return r;
}

void save_checkpoint(const std::filesystem::path& dir, const Checkpoint& c) {
  std::filesystem::create_directories(dir);
  const auto& p = c.params;
  for (std::size_t l = 0; l < p.layers(); ++l) {
    write_tensor(dir / ("theta_" + std::to_string(l) + ".ebmt"), matrix_record(p.theta[l], DType::f64));
  }
  write_text_atomic(dir / "config.txt", c.config.to_text());
  Manifest m;
  m.emplace_back("format_version", "1");
  m.emplace_back("env", c.meta.env);
  m.emplace_back("layers", std::to_string(p.layers()));
  std::string widths;
  for (std::size_t l = 0; l < p.widths.size(); ++l) widths += (l ? "," : "") + std::to_string(p.widths[l]);
  m.emplace_back("widths", widths);
  m.emplace_back("step", std::to_string(c.step));
  m.emplace_back("config_hash", u64_text(c.config_hash));
  m.emplace_back("theta_hash", u64_text(params_hash(p)));
  m.emplace_back("grid_rows", std::to_string(c.meta.grid_rows));
  m.emplace_back("grid_cols", std::to_string(c.meta.grid_cols));
  m.emplace_back("action_dim", std::to_string(c.meta.action_dim));
  m.emplace_back("height", std::to_string(c.shape.height));
  m.emplace_back("width", std::to_string(c.shape.width));
  m.emplace_back("channels", std::to_string(c.shape.channels));
  m.emplace_back("cann_n", std::to_string(c.cann.n));
  m.emplace_back("cann_rank", std::to_string(c.cann.effective_rank()));
  m.emplace_back("alpha", format_double(c.cann.alpha));
  m.emplace_back("beta", format_double(c.cann.beta));
  m.emplace_back("tau_I", format_double(c.cann.tau_I));
  m.emplace_back("tau_V", format_double(c.cann.tau_V));
  m.emplace_back("firing_rate", c.cann.rate == FiringRate::identity ? "identity" : "tanh");
  m.emplace_back("action_gain", format_double(c.cann.action_gain));
  m.emplace_back("seed_W", u64_text(c.cann.seed_W));
  m.emplace_back("seed_A", u64_text(c.cann.seed_A));
  m.emplace_back("W_hash", u64_text(c.W_hash));
  m.emplace_back("A_hash", u64_text(c.A_hash));
  write_text_atomic(dir / "manifest.txt", format_manifest(m));
}

Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw FormatError(dir.string() + ": not a checkpoint directory");
  const Manifest m = read_manifest(dir / "manifest.txt");
  auto get = [&](const std::string& key) -> const std::string& { return manifest_value(m, key); };
  auto u64 = [&](const std::string& key) { return parse_u64(get(key), key); };
  auto f64 = [&](const std::string& key) { return parse_f64(get(key), key); };
  if (get("format_version") != "1") throw FormatError("checkpoint: unsupported format_version");

  Checkpoint c;
  c.config = TrainConfig::load(dir / "config.txt");
  c.meta.env = get("env");
  c.meta.grid_rows = static_cast<Index>(u64("grid_rows"));
  c.meta.grid_cols = static_cast<Index>(u64("grid_cols"));
  c.meta.action_dim = static_cast<Index>(u64("action_dim"));
  c.shape = DataShape{static_cast<Index>(u64("height")), static_cast<Index>(u64("width")),
                      static_cast<Index>(u64("channels"))};
  c.step = static_cast<long>(u64("step"));
  c.config_hash = u64("config_hash");
  if (c.config_hash != c.config.hash()) throw FormatError("checkpoint: config.txt does not match config_hash");

  const auto L = static_cast<std::size_t>(u64("layers"));
  std::vector<Index> widths;
  {
    const std::string& w = get("widths");
    std::size_t start = 0;
    while (start <= w.size()) {
      const std::size_t end = std::min(w.find(',', start), w.size());
      widths.push_back(static_cast<Index>(parse_u64(w.substr(start, end - start), "widths")));
      start = end + 1;
    }
  }
  if (widths.size() != L + 1) throw FormatError("checkpoint: widths do not match layers");
  HierarchyParams& p = c.params;
  p = HierarchyParams::zeros(widths);
  p.lambda = c.config.layer_lambdas();
  p.slope = c.config.slope;
  p.tau_s = c.config.tau_s;
  p.tau_theta = 1.0 / c.config.inv_tau_theta;
  p.dt = c.config.dt;
  p.T = c.config.T;
  for (std::size_t l = 0; l < L; ++l) {
    const Matrix t = record_matrix(read_tensor(dir / ("theta_" + std::to_string(l) + ".ebmt")));
    if (t.rows() != widths[l] || t.cols() != widths[l + 1]) {
      throw FormatError("checkpoint: theta_" + std::to_string(l) + " has the wrong shape");
    }
    p.theta[l] = t;
  }
  try {
    p.validate();
  } catch (const ContractViolation& e) {
    throw FormatError(std::string("checkpoint: ") + e.what());
  }
  if (params_hash(p) != u64("theta_hash")) throw FormatError("checkpoint: theta_hash mismatch");

  CannConfig& cc = c.cann;
  cc.n = static_cast<Index>(u64("cann_n"));
  cc.rank = static_cast<Index>(u64("cann_rank"));
  cc.alpha = f64("alpha");
  cc.beta = f64("beta");
  cc.tau_I = f64("tau_I");
  cc.tau_V = f64("tau_V");
  cc.rate = get("firing_rate") == "identity" ? FiringRate::identity : FiringRate::tanh;
  cc.action_dim = c.meta.action_dim;
  cc.action_gain = f64("action_gain");
  cc.seed_W = u64("seed_W");
  cc.seed_A = u64("seed_A");
  c.W_hash = u64("W_hash");
  c.A_hash = u64("A_hash");
  const CannNetwork net(cc);
  if (hash_matrix(net.W()) != c.W_hash) throw FormatError("checkpoint: regenerated W does not match W_hash");
  if (hash_matrix(net.A()) != c.A_hash) throw FormatError("checkpoint: regenerated A does not match A_hash");
  return c;
}

void save_memory(const std::filesystem::path& path, const StreamMemory& memory) {
  require(memory.state.batch() == 1, "save_memory: expects a single stream");
  const Index n = memory.state.I.rows();
  Matrix rows(4, n);
  rows.row(0) = memory.state.I.col(0).transpose();
  rows.row(1) = memory.state.m.col(0).transpose();
  rows.row(2) = memory.state.V.col(0).transpose();
  rows.row(3) = memory.pending_top.transpose();
  write_tensor(path, matrix_record(rows, DType::f64));
}

StreamMemory load_memory(const std::filesystem::path& path, const Model& model) {
  const Matrix rows = record_matrix(read_tensor(path));
  if (rows.rows() != 4 || rows.cols() != model.network.size()) {
    throw FormatError(path.string() + ": memory record must be 4 x " + std::to_string(model.network.size()));
  }
  StreamMemory out;
  out.state.I = rows.row(0).transpose();
  out.state.m = rows.row(1).transpose();
  out.state.V = rows.row(2).transpose();
  out.pending_top = rows.row(3).transpose();
  return out;
}

}  // namespace ebm
