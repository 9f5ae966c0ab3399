#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "ebm/common.hpp"

namespace ebm {

/// Dense image, row-major with channels last, values in [0, 1].
struct Image {
  Index height = 0;
  Index width = 0;
  Index channels = 1;
  Vector data;

  Image() = default;
  Image(Index h, Index w, Index c) : height(h), width(w), channels(c), data(Vector::Zero(h * w * c)) {}

  double& at(Index r, Index c, Index ch = 0) { return data[(r * width + c) * channels + ch]; }
  double at(Index r, Index c, Index ch = 0) const { return data[(r * width + c) * channels + ch]; }
};

struct PatchGrid {
  Index rows = 4;
  Index cols = 4;

  Index count() const { return rows * cols; }
  Index patch_dim(const Image& image) const;
};

// Row-major list of flattened patches (row-major within a patch, channels last).
std::vector<Vector> patchify(const Image& image, const PatchGrid& grid);
Image unpatchify(const std::vector<Vector>& patches, const PatchGrid& grid, Index height,
                 Index width, Index channels);

Vector one_hot(Index k, Index n);
// Index of the single 1 entry; throws ContractViolation otherwise.
Index one_hot_index(const Vector& a);

struct EpisodeMeta {
  std::string env;
  Index grid_rows = 0;
  Index grid_cols = 0;
  Index action_dim = 0;
};

/// actions[t] is taken before observations[t] is received.
struct Episode {
  std::vector<Vector> observations;
  std::vector<Vector> actions;
  EpisodeMeta meta;

  std::size_t size() const { return observations.size(); }
};

/// Read-only image collection with precomputed patches.
struct PatchedImages {
  std::vector<Image> images;
  PatchGrid grid;
  std::vector<std::vector<Vector>> patches;  // patches[image][position]

  PatchedImages(std::vector<Image> images, PatchGrid grid);
  Index patch_dim() const { return patches.empty() ? 0 : patches[0][0].size(); }
};

/// Eye-movement environment: actions address absolute patch positions and the
/// observed image changes every `switch_every` steps following `order`.
class EyeEnv {
 public:
  EyeEnv(std::shared_ptr<const PatchedImages> data, std::vector<std::size_t> order,
         int switch_every = 16);

  Vector step(const Vector& action);
  std::size_t current_image() const;
  std::size_t steps_taken() const { return steps_; }
  Index action_dim() const { return data_->grid.count(); }
  EpisodeMeta meta() const;

 private:
  std::shared_ptr<const PatchedImages> data_;
  std::vector<std::size_t> order_;
  int switch_every_;
  std::size_t steps_ = 0;
};

enum class Move { up = 0, down = 1, left = 2, right = 3 };

/// Toroidal grid of fixed tile observations; the agent moves one cell per step.
class GridEnv {
 public:
  // tiles[r * cols + c] is the observation at (r, c).
  GridEnv(std::shared_ptr<const std::vector<Vector>> tiles, Index rows, Index cols,
          Index start_row = 0, Index start_col = 0);

  Vector step(const Vector& action);
  const Vector& observe() const;
  Index row() const { return row_; }
  Index col() const { return col_; }
  Index action_dim() const { return 4; }
  EpisodeMeta meta() const;

 private:
  std::shared_ptr<const std::vector<Vector>> tiles_;
  Index rows_, cols_;
  Index row_, col_;
};

/// Frame sequence with no actions.
class SeqEnv {
 public:
  explicit SeqEnv(std::vector<Vector> frames, Index action_dim = 1);

  // Next frame, or nullopt once the sequence is exhausted.
  std::optional<Vector> step();
  Vector action() const { return Vector::Zero(action_dim_); }
  Index action_dim() const { return action_dim_; }
  std::size_t remaining() const { return frames_.size() - next_; }
  EpisodeMeta meta() const;

 private:
  std::vector<Vector> frames_;
  std::size_t next_ = 0;
  Index action_dim_;
};

template <typename Env>
Episode rollout(Env& env, const std::vector<Vector>& actions) {
  Episode ep;
  ep.meta = env.meta();
  for (const auto& a : actions) {
    ep.actions.push_back(a);
    ep.observations.push_back(env.step(a));
  }
  return ep;
}

Episode rollout(SeqEnv& env);

// Low-frequency random fields normalised to [0, 1] per image.
std::vector<Image> synth_smooth_images(std::size_t n, Index height, Index width, Index channels,
                                       std::uint64_t seed);

// Toroidal tile map of distinct smooth patterns, each tile_h x tile_w.
std::vector<Vector> synth_tiles(Index rows, Index cols, Index tile_h, Index tile_w,
                                std::uint64_t seed);

struct RotatingBars {
  std::vector<Episode> episodes;
  double angle_step = 0.0;  // radians per frame
};

// Anti-aliased bar rotating about the image centre. When `angle_step` is not
// given it is drawn from the seed in [pi/16, pi/8]; initial angles are drawn
// per episode.
RotatingBars synth_rotating_bars(std::size_t n_seq, std::size_t frames, Index size,
                                 std::uint64_t seed,
                                 std::optional<double> angle_step = std::nullopt);

// Rasterise a single bar at `angle` on a size x size canvas.
Vector rasterize_bar(Index size, double angle);

}  // namespace ebm
