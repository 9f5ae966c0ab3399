#include "ebm/config.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

namespace ebm {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

[[noreturn]] void bad_value(const ConfigEntry& e, const std::string& origin, const std::string& what) {
  throw FormatError(origin + ":" + std::to_string(e.line) + ": " + e.key + ": " + what + " (got '" +
                    e.value + "')");
}

double parse_double(const ConfigEntry& e, const std::string& origin, const std::string& text) {
  double v = 0.0;
  const auto* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc() || ptr != end) bad_value(e, origin, "expected a number");
  return v;
}

template <typename Int>
Int parse_int(const ConfigEntry& e, const std::string& origin, const std::string& text) {
  Int v = 0;
  const auto* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc() || ptr != end) bad_value(e, origin, "expected an integer");
  return v;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(trim(item));
  return out;
}

template <typename T, typename F>
std::string join(const std::vector<T>& xs, F fmt) {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (i) out += ",";
    out += fmt(xs[i]);
  }
  return out;
}

struct Field {
  std::string key;
  std::string help;
  std::function<void(TrainConfig&, const ConfigEntry&, const std::string&)> parse;
  std::function<std::string(const TrainConfig&)> print;
};

template <typename M>
Field double_field(std::string key, std::string help, M member) {
  return {std::move(key), std::move(help),
          [member](TrainConfig& c, const ConfigEntry& e, const std::string& o) {
            c.*member = parse_double(e, o, e.value);
          },
          [member](const TrainConfig& c) { return format_double(c.*member); }};
}

template <typename M>
Field int_field(std::string key, std::string help, M member) {
  return {std::move(key), std::move(help),
          [member](TrainConfig& c, const ConfigEntry& e, const std::string& o) {
            using T = std::remove_reference_t<decltype(c.*member)>;
            c.*member = parse_int<T>(e, o, e.value);
          },
          [member](const TrainConfig& c) { return std::to_string(c.*member); }};
}

template <typename M>
Field bool_field(std::string key, std::string help, M member) {
  return {std::move(key), std::move(help),
          [member](TrainConfig& c, const ConfigEntry& e, const std::string& o) {
            if (e.value == "true" || e.value == "1") {
              c.*member = true;
            } else if (e.value == "false" || e.value == "0") {
              c.*member = false;
            } else {
              bad_value(e, o, "expected true or false");
            }
          },
          [member](const TrainConfig& c) { return std::string(c.*member ? "true" : "false"); }};
}

template <typename M>
Field string_field(std::string key, std::string help, M member) {
  return {std::move(key), std::move(help),
          [member](TrainConfig& c, const ConfigEntry& e, const std::string&) { c.*member = e.value; },
          [member](const TrainConfig& c) { return c.*member; }};
}

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      string_field("env", "environment: eyemove, gridworld or sequence", &TrainConfig::env),
      string_field("dataset", "path of the TensorRecord dataset", &TrainConfig::dataset),
      {"widths", "latent layer widths n_1..n_L, comma separated",
       [](TrainConfig& c, const ConfigEntry& e, const std::string& o) {
         c.widths.clear();
         for (const auto& item : split_list(e.value)) c.widths.push_back(parse_int<Index>(e, o, item));
       },
       [](const TrainConfig& c) { return join(c.widths, [](Index w) { return std::to_string(w); }); }},
      {"lambda", "layer precisions: one value for all layers or L+1 values",
       [](TrainConfig& c, const ConfigEntry& e, const std::string& o) {
         c.lambda.clear();
         for (const auto& item : split_list(e.value)) c.lambda.push_back(parse_double(e, o, item));
       },
       [](const TrainConfig& c) { return join(c.lambda, format_double); }},
      double_field("slope", "leaky rectifier negative slope", &TrainConfig::slope),
      double_field("tau_s", "neural time constant", &TrainConfig::tau_s),
      double_field("inv_tau_theta", "learning rate 1/tau_theta", &TrainConfig::inv_tau_theta),
      double_field("dt", "Euler step", &TrainConfig::dt),
      double_field("T", "simulation time per phase", &TrainConfig::T),
      double_field("init_scale", "initial weight scale (std * sqrt(fan-in))", &TrainConfig::init_scale),
      string_field("prior_mode", "prior sampling: direct or langevin", &TrainConfig::prior_mode),
      bool_field("co_integrate", "learn and infer in a single Euler loop", &TrainConfig::co_integrate),
      int_field("prior_samples", "prior samples per step for the learning average", &TrainConfig::prior_samples),
      double_field("alpha", "spectral norm of the memory recurrence", &TrainConfig::alpha),
      double_field("beta", "memory adaptation strength", &TrainConfig::beta),
      int_field("cann_rank", "rank of the memory recurrence (0: max(8, n_L/16))", &TrainConfig::cann_rank),
      double_field("action_gain", "action projection gain", &TrainConfig::action_gain),
      double_field("memory_duration", "memory relaxation time per step (0: T)", &TrainConfig::memory_duration),
      string_field("firing_rate", "memory firing-rate function: tanh or identity", &TrainConfig::firing_rate),
      int_field("epochs", "training epochs", &TrainConfig::epochs),
      int_field("batch_size", "parallel episode streams", &TrainConfig::batch_size),
      int_field("steps_per_epoch", "timesteps per epoch (0: derived from the dataset)", &TrainConfig::steps_per_epoch),
      int_field("switch_every", "eye-movement image switch period", &TrainConfig::switch_every),
      int_field("seed", "master random seed", &TrainConfig::seed),
      int_field("grid_rows", "patch grid rows", &TrainConfig::grid_rows),
      int_field("grid_cols", "patch grid columns", &TrainConfig::grid_cols),
      int_field("K", "patches used to initialise memory at test time", &TrainConfig::K),
      int_field("init_frames", "frames used to initialise memory for sequence replay", &TrainConfig::init_frames),
      int_field("eval_cadence", "epochs between evaluations (0: off)", &TrainConfig::eval_cadence),
      bool_field("trace", "log one metrics row per step", &TrainConfig::trace),
  };
  return table;
}

}  // namespace

std::vector<ConfigEntry> parse_key_values(const std::string& text, const std::string& origin) {
  std::vector<ConfigEntry> out;
  std::set<std::string> seen;
  std::stringstream ss(text);
  std::string raw;
  int line = 0;
  while (std::getline(ss, raw)) {
    ++line;
    const auto hash = raw.find('#');
    const std::string content = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    if (content.empty()) continue;
    const auto eq = content.find('=');
    if (eq == std::string::npos) {
      throw FormatError(origin + ":" + std::to_string(line) + ": expected 'key = value'");
    }
    ConfigEntry e{trim(content.substr(0, eq)), trim(content.substr(eq + 1)), line};
    if (e.key.empty()) throw FormatError(origin + ":" + std::to_string(line) + ": empty key");
    if (!seen.insert(e.key).second) {
      throw FormatError(origin + ":" + std::to_string(line) + ": duplicate key '" + e.key + "'");
    }
    out.push_back(std::move(e));
  }
  return out;
}

std::vector<ConfigEntry> read_key_values(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError(path.string() + ": cannot open");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_key_values(ss.str(), path.string());
}

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& msg) { throw FormatError("config: " + msg); };
  if (env != "eyemove" && env != "gridworld" && env != "sequence") fail("env must be eyemove, gridworld or sequence");
  if (widths.empty()) fail("widths must list at least one latent layer");
  for (Index w : widths) if (w < 1) fail("widths must be >= 1");
  if (lambda.size() != 1 && lambda.size() != widths.size() + 1) fail("lambda must have 1 or L+1 entries");
  for (double l : lambda) if (!(l > 0.0)) fail("lambda must be > 0");
  if (!(dt > 0.0) || !(T >= dt)) fail("need dt > 0 and T >= dt");
  if (!(tau_s > 0.0) || !(inv_tau_theta > 0.0)) fail("time constants must be > 0");
  if (prior_mode != "direct" && prior_mode != "langevin") fail("prior_mode must be direct or langevin");
  if (firing_rate != "tanh" && firing_rate != "identity") fail("firing_rate must be tanh or identity");
  if (prior_samples < 1) fail("prior_samples must be >= 1");
  if (alpha < 0.0 || beta < 0.0) fail("alpha and beta must be >= 0");
  if (cann_rank < 0 || cann_rank > widths.back()) fail("cann_rank must be in [0, n_L]");
  if (memory_duration != 0.0 && memory_duration < dt) fail("memory_duration must be 0 or >= dt");
  if (epochs < 0) fail("epochs must be >= 0");
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (steps_per_epoch < 0) fail("steps_per_epoch must be >= 0");
  if (switch_every < 1) fail("switch_every must be >= 1");
  if (grid_rows < 1 || grid_cols < 1) fail("grid must be at least 1x1");
  if (K < 1) fail("K must be >= 1");
  if (init_frames < 1) fail("init_frames must be >= 1");
  if (eval_cadence < 0) fail("eval_cadence must be >= 0");
}

std::vector<double> TrainConfig::layer_lambdas() const {
  if (lambda.size() == 1) return std::vector<double>(widths.size() + 1, lambda[0]);
  return lambda;
}

TrainConfig TrainConfig::from_entries(const std::vector<ConfigEntry>& entries, const std::string& origin) {
  TrainConfig cfg;
  for (const auto& e : entries) {
    bool known = false;
    for (const auto& f : fields()) {
      if (f.key == e.key) {
        f.parse(cfg, e, origin);
        known = true;
        break;
      }
    }
    if (!known) {
      throw FormatError(origin + ":" + std::to_string(e.line) + ": unknown key '" + e.key + "'");
    }
  }
  cfg.validate();
  return cfg;
}

TrainConfig TrainConfig::load(const std::filesystem::path& path) {
  return from_entries(read_key_values(path), path.string());
}

std::string TrainConfig::to_text() const {
  std::string out;
  for (const auto& f : fields()) out += f.key + " = " + f.print(*this) + "\n";
  return out;
}

std::uint64_t TrainConfig::hash() const {
  const std::string text = to_text();
  return hash_bytes(std::as_bytes(std::span(text.data(), text.size())));
}

std::vector<std::pair<std::string, std::string>> TrainConfig::documented_keys() {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& f : fields()) out.emplace_back(f.key, f.help);
  return out;
}

}  // namespace ebm
