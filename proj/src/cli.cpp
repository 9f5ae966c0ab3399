#include "ebm/cli.hpp"

#include <CLI11.hpp>
#include <spdlog/sinks/ostream_sink.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "ebm/harness.hpp"

namespace ebm {

namespace fs = std::filesystem;

namespace {

std::shared_ptr<spdlog::logger> make_logger(std::ostream& err) {
  auto sink = std::make_shared<spdlog::sinks::ostream_sink_mt>(err, true);
  auto logger = std::make_shared<spdlog::logger>("ebm", sink);
  logger->set_pattern("[%l] %v");
  const char* env = std::getenv("EBM_LOG");
  const std::string level = env ? env : "info";
  if (level == "error") {
    logger->set_level(spdlog::level::err);
  } else if (level == "debug") {
    logger->set_level(spdlog::level::debug);
  } else {
    logger->set_level(spdlog::level::info);
    if (level != "info") logger->warn("EBM_LOG='{}' is not one of error, info, debug; using info", level);
  }
  return logger;
}

std::string number(double v) {
  if (std::isnan(v)) return "nan";
  return format_double(v);
}

// Relative dataset paths are tried against the working directory first, then
// against the directory of the config file.
fs::path resolve_dataset(const std::string& dataset, const fs::path& config_path) {
  if (dataset.empty()) throw FormatError(config_path.string() + ": config does not name a dataset");
  fs::path p(dataset);
  if (p.is_relative() && !fs::exists(p)) {
    const fs::path alt = config_path.parent_path() / p;
    if (fs::exists(alt)) return alt;
  }
  if (!fs::exists(p)) throw FormatError(p.string() + ": dataset file not found");
  return p;
}

Dataset load_dataset(const std::string& env, const fs::path& path, PatchGrid grid) {
  return Dataset::from_tensor(env, read_tensor(path), grid);
}

// Shape of a single observation of the checkpoint's environment.
DataShape observation_shape(const Checkpoint& c) {
  if (c.meta.env == "eyemove") {
    return DataShape{c.shape.height / c.meta.grid_rows, c.shape.width / c.meta.grid_cols, c.shape.channels};
  }
  return c.shape;
}

Image to_image(const Vector& v, const DataShape& s) {
  Image img(s.height, s.width, s.channels);
  require(v.size() == img.data.size(), "observation size does not match its image shape");
  img.data = v;
  return img;
}

std::string image_name(const std::string& stem, std::size_t i, const DataShape& s) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%s_%04zu.%s", stem.c_str(), i, s.channels == 1 ? "pgm" : "ppm");
  return buf;
}

// Stack observation vectors into (S, h, w) or (S, h, w, C).
TensorRecord stack_record(const std::vector<Vector>& frames, const DataShape& s) {
  TensorRecord r;
  r.dtype = DType::f32;
  r.dims = {static_cast<std::uint32_t>(frames.size()), static_cast<std::uint32_t>(s.height),
            static_cast<std::uint32_t>(s.width)};
  if (s.channels != 1) r.dims.push_back(static_cast<std::uint32_t>(s.channels));
  for (const auto& f : frames) r.values.insert(r.values.end(), f.begin(), f.end());
  return r;
}

void check_dataset_matches(const Dataset& data, const Checkpoint& c) {
  if (data.observation_dim() != c.params.widths[0]) {
    throw FormatError("dataset observations have " + std::to_string(data.observation_dim()) +
                      " values but the checkpoint expects " + std::to_string(c.params.widths[0]));
  }
}

struct TrainArgs {
  std::string config;
  std::string out_dir;
  std::optional<std::uint64_t> seed;
  std::optional<int> epochs;
};

int cmd_train(const TrainArgs& args, std::ostream& out, spdlog::logger& log) {
  if (!fs::exists(args.config)) throw FormatError(args.config + ": config file not found");
  TrainConfig config = TrainConfig::load(args.config);
  if (args.seed) config.seed = *args.seed;
  if (args.epochs) config.epochs = *args.epochs;
  config.validate();
  const fs::path dataset = resolve_dataset(config.dataset, args.config);
  const Dataset data = load_dataset(config.env, dataset, PatchGrid{config.grid_rows, config.grid_cols});
  log.info("training {} on {} ({} items, {} epochs, batch {}, {} steps per epoch)", config.env,
           dataset.string(), data.item_count(), config.epochs, config.batch_size,
           steps_per_epoch(config, data));

  const fs::path out_dir(args.out_dir);
  fs::create_directories(out_dir);
  const std::size_t L = config.widths.size();
  auto on_epoch = [&](const MetricsRow& row) {
    log.info("epoch {} step {} mse {:.6g} loss_l0 {:.6g}", row.epoch, row.step, row.mse,
             row.losses.empty() ? 0.0 : row.losses[0]);
  };
  TrainResult result;
  try {
    result = train(config, data, {}, on_epoch);
  } catch (const TrainingDiverged& e) {
    write_text_atomic(out_dir / "metrics.csv", format_metrics_csv(e.log.epochs, L));
    log.error("{}", e.what());
    return kExitDivergence;
  }
  save_checkpoint(out_dir / "checkpoint.ebmt-bundle", result.checkpoint);
  write_text_atomic(out_dir / "metrics.csv", format_metrics_csv(result.log.epochs, L));
  if (config.trace) write_text_atomic(out_dir / "trace.csv", format_metrics_csv(result.log.trace, L));
  if (!result.log.evals.empty()) {
    std::string text = "epoch,name,value\n";
    for (const auto& e : result.log.evals) {
      text += std::to_string(e.epoch) + "," + e.name + "," + number(e.value) + "\n";
    }
    write_text_atomic(out_dir / "eval.csv", text);
  }
  out << "epochs = " << result.log.epochs.size() << "\n";
  out << "steps = " << result.checkpoint.step << "\n";
  if (!result.log.epochs.empty()) out << "final_mse = " << number(result.log.epochs.back().mse) << "\n";
  out << "checkpoint = " << (out_dir / "checkpoint.ebmt-bundle").string() << "\n";
  return kExitOk;
}

struct EvalArgs {
  std::string checkpoint;
  std::string dataset;
  std::string protocol;
  std::string out_dir = "eval-output";
  std::optional<int> K;
  std::optional<int> init_frames;
  std::uint64_t seed = 0;
  std::size_t limit = 0;
};

int cmd_eval(const EvalArgs& args, std::ostream& out, spdlog::logger& log) {
  const Checkpoint checkpoint = load_checkpoint(args.checkpoint);
  const std::string& env = checkpoint.meta.env;
  const std::string expected = args.protocol == "eyemove-init-K" ? "eyemove" : "sequence";
  if (env != expected) {
    throw FormatError("protocol " + args.protocol + " does not apply to a " + env + " checkpoint");
  }
  const Model model(checkpoint);
  const Dataset data =
      load_dataset(env, args.dataset, PatchGrid{checkpoint.meta.grid_rows, checkpoint.meta.grid_cols});
  check_dataset_matches(data, checkpoint);
  const fs::path out_dir(args.out_dir);
  fs::create_directories(out_dir);
  const std::uint64_t h_before = params_hash(model.params());

  if (env == "eyemove") {
    const int K = args.K.value_or(checkpoint.config.K);
    log.info("init-K protocol with K = {} on {} images", K, data.item_count());
    const auto r = evaluate_eyemove(model, *data.images, K, args.seed, args.limit);
    out << "protocol = eyemove-init-K\n";
    out << "K = " << K << "\n";
    out << "images = " << r.reconstructions.size() << "\n";
    out << "mse_all_patches = " << number(r.mse_all) << "\n";
    out << "mse_unseen_patches = " << number(r.mse_unseen) << "\n";
    for (std::size_t i = 0; i < r.reconstructions.size(); ++i) {
      write_pnm(out_dir / image_name("image", i, checkpoint.shape), r.reconstructions[i]);
    }
    if (!r.memories.empty()) save_memory(out_dir / "memory.ebmt", r.memories.front());
  } else {
    const int init = args.init_frames.value_or(checkpoint.config.init_frames);
    const auto r = evaluate_replay(model, data.sequences, init, args.seed, args.limit);
    const DataShape shape = observation_shape(checkpoint);
    // Constant predictor: the mean frame of the evaluated sequences.
    const std::size_t n = r.predictions.size();
    Vector mean = Vector::Zero(data.observation_dim());
    std::size_t frames = 0;
    for (std::size_t e = 0; e < n; ++e) {
      for (const auto& f : data.sequences[e].observations) {
        mean += f;
        ++frames;
      }
    }
    mean /= static_cast<double>(std::max<std::size_t>(frames, 1));
    std::vector<Vector> truth, constant;
    for (std::size_t e = 0; e < n; ++e) {
      for (const auto& f : data.sequences[e].observations) {
        truth.push_back(f);
        constant.push_back(mean);
      }
    }
    out << "protocol = sequence-replay\n";
    out << "init_frames = " << init << "\n";
    out << "sequences = " << n << "\n";
    out << "frames_per_sequence = " << (n ? r.predictions.front().size() : 0) << "\n";
    out << "mse_all_frames = " << number(r.mse_all) << "\n";
    out << "mse_init_frames = " << number(r.mse_init) << "\n";
    out << "mse_future_frames = " << number(r.mse_future) << "\n";
    out << "mse_mean_frame_baseline = " << number(evaluate_mse(constant, truth)) << "\n";
    std::vector<Vector> all;
    for (std::size_t e = 0; e < n; ++e) {
      char dir[32];
      std::snprintf(dir, sizeof(dir), "seq_%04zu", e);
      fs::create_directories(out_dir / dir);
      for (std::size_t t = 0; t < r.predictions[e].size(); ++t) {
        write_pnm(out_dir / dir / image_name("frame", t, shape), to_image(r.predictions[e][t], shape));
        all.push_back(r.predictions[e][t]);
      }
    }
    TensorRecord rec = stack_record(all, shape);
    if (n > 0) {
      rec.dims.insert(rec.dims.begin() + 1, static_cast<std::uint32_t>(r.predictions.front().size()));
      rec.dims[0] = static_cast<std::uint32_t>(n);
    }
    write_tensor(out_dir / "predictions.ebmt", rec);
    if (!r.memories.empty()) save_memory(out_dir / "memory.ebmt", r.memories.front());
  }
  if (params_hash(model.params()) != h_before) throw std::logic_error("evaluation modified the weights");
  return kExitOk;
}

struct ImagineArgs {
  std::string checkpoint;
  std::string memory;
  std::string actions;
  std::string out_dir = "imagine-output";
  bool deterministic = false;
  std::uint64_t seed = 0;
};

Vector parse_action(const std::string& token, const EpisodeMeta& meta, const std::string& where) {
  if (meta.env == "eyemove") {
    Index k = -1;
    try {
      std::size_t used = 0;
      k = std::stol(token, &used);
      if (used != token.size()) k = -1;
    } catch (const std::exception&) {
      k = -1;
    }
    if (k < 0 || k >= meta.action_dim) {
      throw FormatError(where + ": unknown action token '" + token + "' (expected a patch index 0.." +
                        std::to_string(meta.action_dim - 1) + ")");
    }
    return one_hot(k, meta.action_dim);
  }
  if (meta.env == "gridworld") {
    static const std::vector<std::string> moves{"up", "down", "left", "right"};
    const auto it = std::find(moves.begin(), moves.end(), token);
    if (it == moves.end()) {
      throw FormatError(where + ": unknown action token '" + token + "' (expected up, down, left or right)");
    }
    return one_hot(static_cast<Index>(it - moves.begin()), 4);
  }
  if (token != "none") throw FormatError(where + ": unknown action token '" + token + "' (expected none)");
  return Vector::Zero(meta.action_dim);
}

std::vector<Vector> read_actions(const fs::path& path, const EpisodeMeta& meta) {
  const std::string text = read_text(path);
  std::vector<Vector> actions;
  std::stringstream ss(text);
  std::string line;
  int n = 0;
  while (std::getline(ss, line)) {
    ++n;
    const auto b = line.find_first_not_of(" \t\r");
    if (b == std::string::npos) continue;
    const auto e = line.find_last_not_of(" \t\r");
    actions.push_back(parse_action(line.substr(b, e - b + 1), meta, path.string() + ":" + std::to_string(n)));
  }
  return actions;
}

int cmd_imagine(const ImagineArgs& args, std::ostream& out, spdlog::logger& log) {
  const Model model(load_checkpoint(args.checkpoint));
  const StreamMemory memory = load_memory(args.memory, model);
  const auto actions = read_actions(args.actions, model.checkpoint.meta);
  log.info("imagining {} steps ({})", actions.size(), args.deterministic ? "deterministic" : "sampled");
  const auto preds = imagine(model, memory, actions, args.deterministic, args.seed);
  const DataShape shape = observation_shape(model.checkpoint);
  const fs::path out_dir(args.out_dir);
  fs::create_directories(out_dir);
  for (std::size_t i = 0; i < preds.size(); ++i) {
    write_pnm(out_dir / image_name("step", i, shape), to_image(preds[i], shape));
  }
  write_tensor(out_dir / "predictions.ebmt", stack_record(preds, shape));
  out << "steps = " << preds.size() << "\n";
  return kExitOk;
}

struct SynthArgs {
  std::string kind;
  std::string out;
  std::size_t n = 16;
  Index size = 28;
  Index channels = 1;
  std::size_t frames = 20;
  Index rows = 4;
  Index cols = 4;
  Index tile = 8;
  std::optional<double> angle_step;
  std::uint64_t seed = 0;
};

int cmd_synth(const SynthArgs& args, std::ostream& out, spdlog::logger& log) {
  TensorRecord record;
  if (args.kind == "eyemove") {
    record = Dataset::eyemove(synth_smooth_images(args.n, args.size, args.size, args.channels, args.seed),
                              PatchGrid{args.rows, args.cols})
                 .to_tensor();
  } else if (args.kind == "gridworld") {
    record = Dataset::gridworld(synth_tiles(args.rows, args.cols, args.tile, args.tile, args.seed), args.rows,
                                args.cols, DataShape{args.tile, args.tile, 1})
                 .to_tensor();
  } else {
    const auto bars = synth_rotating_bars(args.n, args.frames, args.size, args.seed, args.angle_step);
    record = Dataset::sequence(bars.episodes, DataShape{args.size, args.size, 1}).to_tensor();
    out << "angle_step = " << number(bars.angle_step) << "\n";
  }
  write_tensor(args.out, record);
  std::string dims;
  for (std::size_t i = 0; i < record.dims.size(); ++i) dims += (i ? "," : "") + std::to_string(record.dims[i]);
  out << "dims = " << dims << "\n";
  log.info("wrote {} ({})", args.out, dims);
  return kExitOk;
}

std::string config_key_help() {
  std::string text = "Config keys (key = value, # comments):\n";
  for (const auto& [key, help] : TrainConfig::documented_keys()) text += "  " + key + ": " + help + "\n";
  return text;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  auto log = make_logger(err);
  CLI::App app{"Hierarchical energy-based world model with attractor memory"};
  app.name("ebm");
  app.require_subcommand(1);

  TrainArgs train_args;
  auto* train_cmd = app.add_subcommand("train", "Train a model from a config file");
  train_cmd->add_option("--config", train_args.config, "Config file")->required();
  train_cmd->add_option("--out-dir", train_args.out_dir, "Output directory")->required();
  train_cmd->add_option("--seed", train_args.seed, "Override the config seed");
  train_cmd->add_option("--epochs", train_args.epochs, "Override the number of epochs")->check(CLI::NonNegativeNumber);
  train_cmd->footer(config_key_help());

  EvalArgs eval_args;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint with frozen weights");
  eval_cmd->add_option("--checkpoint", eval_args.checkpoint, "Checkpoint directory")->required();
  eval_cmd->add_option("--dataset", eval_args.dataset, "Dataset TensorRecord")->required();
  eval_cmd->add_option("--protocol", eval_args.protocol, "Test protocol")
      ->required()
      ->check(CLI::IsMember({"eyemove-init-K", "sequence-replay"}));
  eval_cmd->add_option("--K", eval_args.K, "Patches used to initialise memory")->check(CLI::PositiveNumber);
  eval_cmd->add_option("--init-frames", eval_args.init_frames, "Frames used to initialise memory")
      ->check(CLI::PositiveNumber);
  eval_cmd->add_option("--out-dir", eval_args.out_dir, "Directory for emitted images")->capture_default_str();
  eval_cmd->add_option("--seed", eval_args.seed, "Evaluation seed")->capture_default_str();
  eval_cmd->add_option("--limit", eval_args.limit, "Evaluate only the first N items (0 = all)")->capture_default_str();

  ImagineArgs im_args;
  auto* im_cmd = app.add_subcommand("imagine", "Roll out predictions for an action sequence");
  im_cmd->add_option("--checkpoint", im_args.checkpoint, "Checkpoint directory")->required();
  im_cmd->add_option("--memory", im_args.memory, "Memory TensorRecord (from eval)")->required();
  im_cmd->add_option("--actions", im_args.actions, "One action token per line")->required();
  im_cmd->add_flag("--deterministic", im_args.deterministic, "Use the memory mean instead of sampling");
  im_cmd->add_option("--out-dir", im_args.out_dir, "Output directory")->capture_default_str();
  im_cmd->add_option("--seed", im_args.seed, "Sampling seed")->capture_default_str();
  im_cmd->footer("Action tokens: eyemove 0..15 (patch index), gridworld up|down|left|right, sequence none");

  SynthArgs syn;
  auto* syn_cmd = app.add_subcommand("synth", "Write a synthetic dataset");
  syn_cmd->add_option("--kind", syn.kind, "Dataset kind")
      ->required()
      ->check(CLI::IsMember({"eyemove", "gridworld", "bars"}));
  syn_cmd->add_option("--out", syn.out, "Output TensorRecord")->required();
  syn_cmd->add_option("--n", syn.n, "Images or sequences")->capture_default_str();
  syn_cmd->add_option("--size", syn.size, "Image side length")->capture_default_str();
  syn_cmd->add_option("--channels", syn.channels, "Image channels (1 or 3)")->capture_default_str();
  syn_cmd->add_option("--frames", syn.frames, "Frames per sequence")->capture_default_str();
  syn_cmd->add_option("--rows", syn.rows, "Patch grid or map rows")->capture_default_str();
  syn_cmd->add_option("--cols", syn.cols, "Patch grid or map columns")->capture_default_str();
  syn_cmd->add_option("--tile", syn.tile, "Grid-world tile side length")->capture_default_str();
  syn_cmd->add_option("--angle-step", syn.angle_step, "Bar rotation per frame in radians");
  syn_cmd->add_option("--seed", syn.seed, "Generator seed")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*train_cmd) return cmd_train(train_args, out, *log);
    if (*eval_cmd) return cmd_eval(eval_args, out, *log);
    if (*im_cmd) return cmd_imagine(im_args, out, *log);
    return cmd_synth(syn, out, *log);
  } catch (const NumericalDivergence& e) {
    log->error("{}", e.what());
    return kExitDivergence;
  } catch (const FormatError& e) {
    log->error("{}", e.what());
    return kExitUsage;
  } catch (const ContractViolation& e) {
    log->error("{}", e.what());
    return kExitUsage;
  } catch (const fs::filesystem_error& e) {
    log->error("{}", e.what());
    return kExitUsage;
  }
}

}  // namespace ebm
