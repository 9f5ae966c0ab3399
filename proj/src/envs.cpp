#include "ebm/envs.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "ebm/rng.hpp"

namespace ebm {

Index PatchGrid::patch_dim(const Image& image) const {
  return (image.height / rows) * (image.width / cols) * image.channels;
}

std::vector<Vector> patchify(const Image& image, const PatchGrid& grid) {
  require(grid.rows >= 1 && grid.cols >= 1, "patchify: grid must be at least 1x1");
  require(image.height % grid.rows == 0 && image.width % grid.cols == 0,
          "patchify: " + std::to_string(image.height) + "x" + std::to_string(image.width) +
              " image is not divisible into a " + std::to_string(grid.rows) + "x" +
              std::to_string(grid.cols) + " grid");
  require(image.data.size() == image.height * image.width * image.channels,
          "patchify: image data size mismatch");
  const Index ph = image.height / grid.rows;
  const Index pw = image.width / grid.cols;
  const Index c = image.channels;
  std::vector<Vector> out;
  out.reserve(static_cast<std::size_t>(grid.count()));
  for (Index gr = 0; gr < grid.rows; ++gr) {
    for (Index gc = 0; gc < grid.cols; ++gc) {
      Vector patch(ph * pw * c);
      Index k = 0;
      for (Index r = 0; r < ph; ++r) {
        for (Index col = 0; col < pw; ++col) {
          for (Index ch = 0; ch < c; ++ch) patch[k++] = image.at(gr * ph + r, gc * pw + col, ch);
        }
      }
      out.push_back(std::move(patch));
    }
  }
  return out;
}

Image unpatchify(const std::vector<Vector>& patches, const PatchGrid& grid, Index height,
                 Index width, Index channels) {
  require(height % grid.rows == 0 && width % grid.cols == 0,
          "unpatchify: image is not divisible by the grid");
  require(static_cast<Index>(patches.size()) == grid.count(), "unpatchify: wrong patch count");
  const Index ph = height / grid.rows;
  const Index pw = width / grid.cols;
  Image image(height, width, channels);
  for (Index gr = 0; gr < grid.rows; ++gr) {
    for (Index gc = 0; gc < grid.cols; ++gc) {
      const Vector& patch = patches[static_cast<std::size_t>(gr * grid.cols + gc)];
      require(patch.size() == ph * pw * channels, "unpatchify: wrong patch length");
      Index k = 0;
      for (Index r = 0; r < ph; ++r) {
        for (Index col = 0; col < pw; ++col) {
          for (Index ch = 0; ch < channels; ++ch) image.at(gr * ph + r, gc * pw + col, ch) = patch[k++];
        }
      }
    }
  }
  return image;
}

Vector one_hot(Index k, Index n) {
  require(k >= 0 && k < n, "one_hot: index out of range");
  Vector a = Vector::Zero(n);
  a[k] = 1.0;
  return a;
}

Index one_hot_index(const Vector& a) {
  Index found = -1;
  for (Index i = 0; i < a.size(); ++i) {
    if (a[i] == 1.0 && found < 0) {
      found = i;
    } else if (a[i] != 0.0) {
      throw ContractViolation("action is not a valid one-hot vector");
    }
  }
  if (found < 0) throw ContractViolation("action is not a valid one-hot vector");
  return found;
}

PatchedImages::PatchedImages(std::vector<Image> imgs, PatchGrid g)
    : images(std::move(imgs)), grid(g) {
  require(!images.empty(), "PatchedImages: no images");
  for (const auto& img : images) {
    require(img.height == images[0].height && img.width == images[0].width &&
                img.channels == images[0].channels,
            "PatchedImages: images must share a shape");
    patches.push_back(patchify(img, grid));
  }
}

EyeEnv::EyeEnv(std::shared_ptr<const PatchedImages> data, std::vector<std::size_t> order,
               int switch_every)
    : data_(std::move(data)), order_(std::move(order)), switch_every_(switch_every) {
  require(data_ != nullptr, "EyeEnv: no images");
  require(switch_every_ >= 1, "EyeEnv: switch_every must be >= 1");
  if (order_.empty()) {
    for (std::size_t i = 0; i < data_->images.size(); ++i) order_.push_back(i);
  }
  for (auto i : order_) require(i < data_->images.size(), "EyeEnv: image order out of range");
}

std::size_t EyeEnv::current_image() const {
  return order_[(steps_ / static_cast<std::size_t>(switch_every_)) % order_.size()];
}

Vector EyeEnv::step(const Vector& action) {
  require(action.size() == action_dim(), "EyeEnv: action must have one entry per patch");
  const Index pos = one_hot_index(action);
  const std::size_t image = current_image();
  ++steps_;
  return data_->patches[image][static_cast<std::size_t>(pos)];
}

EpisodeMeta EyeEnv::meta() const {
  return EpisodeMeta{"eyemove", data_->grid.rows, data_->grid.cols, action_dim()};
}

GridEnv::GridEnv(std::shared_ptr<const std::vector<Vector>> tiles, Index rows, Index cols,
                 Index start_row, Index start_col)
    : tiles_(std::move(tiles)), rows_(rows), cols_(cols), row_(start_row), col_(start_col) {
  require(tiles_ != nullptr && rows_ >= 1 && cols_ >= 1, "GridEnv: empty map");
  require(static_cast<Index>(tiles_->size()) == rows_ * cols_, "GridEnv: tile count must be rows*cols");
  require(row_ >= 0 && row_ < rows_ && col_ >= 0 && col_ < cols_, "GridEnv: start out of range");
}

Vector GridEnv::step(const Vector& action) {
  require(action.size() == 4, "GridEnv: action must be one-hot over 4 moves");
  switch (static_cast<Move>(one_hot_index(action))) {
    case Move::up: row_ = (row_ + rows_ - 1) % rows_; break;
    case Move::down: row_ = (row_ + 1) % rows_; break;
    case Move::left: col_ = (col_ + cols_ - 1) % cols_; break;
    case Move::right: col_ = (col_ + 1) % cols_; break;
  }
  return observe();
}

const Vector& GridEnv::observe() const {
  return (*tiles_)[static_cast<std::size_t>(row_ * cols_ + col_)];
}

EpisodeMeta GridEnv::meta() const { return EpisodeMeta{"gridworld", rows_, cols_, 4}; }

SeqEnv::SeqEnv(std::vector<Vector> frames, Index action_dim)
    : frames_(std::move(frames)), action_dim_(action_dim) {}

std::optional<Vector> SeqEnv::step() {
  if (next_ >= frames_.size()) return std::nullopt;
  return frames_[next_++];
}

EpisodeMeta SeqEnv::meta() const { return EpisodeMeta{"sequence", 0, 0, action_dim_}; }

Episode rollout(SeqEnv& env) {
  Episode ep;
  ep.meta = env.meta();
  while (auto frame = env.step()) {
    ep.actions.push_back(env.action());
    ep.observations.push_back(std::move(*frame));
  }
  return ep;
}

namespace {

// Sum of random low-frequency cosines, min-max normalised to [0, 1].
Vector smooth_field(Index h, Index w, Index channels, RngStream& rng) {
  constexpr int kMaxFreq = 3;
  Vector out(h * w * channels);
  for (Index ch = 0; ch < channels; ++ch) {
    Matrix field = Matrix::Zero(h, w);
    for (int fy = 0; fy <= kMaxFreq; ++fy) {
      for (int fx = 0; fx <= kMaxFreq; ++fx) {
        if (fx == 0 && fy == 0) continue;
        const double amp = rng.gaussian() / (1.0 + fx * fx + fy * fy);
        const double phase = 2.0 * std::numbers::pi * rng.uniform();
        for (Index r = 0; r < h; ++r) {
          for (Index c = 0; c < w; ++c) {
            const double arg = std::numbers::pi *
                               (fy * static_cast<double>(r) / static_cast<double>(h) +
                                fx * static_cast<double>(c) / static_cast<double>(w));
            field(r, c) += amp * std::cos(arg + phase);
          }
        }
      }
    }
    const double lo = field.minCoeff();
    const double hi = field.maxCoeff();
    const double span = hi > lo ? hi - lo : 1.0;
    for (Index r = 0; r < h; ++r) {
      for (Index c = 0; c < w; ++c) out[(r * w + c) * channels + ch] = (field(r, c) - lo) / span;
    }
  }
  return out;
}

}  // namespace

std::vector<Image> synth_smooth_images(std::size_t n, Index height, Index width, Index channels,
                                       std::uint64_t seed) {
  require(height >= 1 && width >= 1 && channels >= 1, "synth_smooth_images: bad shape");
  std::vector<Image> images;
  for (std::size_t i = 0; i < n; ++i) {
    RngStream rng(seed, i);
    Image img(height, width, channels);
    img.data = smooth_field(height, width, channels, rng);
    images.push_back(std::move(img));
  }
  return images;
}

std::vector<Vector> synth_tiles(Index rows, Index cols, Index tile_h, Index tile_w,
                                std::uint64_t seed) {
  std::vector<Vector> tiles;
  for (Index i = 0; i < rows * cols; ++i) {
    RngStream rng(seed, static_cast<std::uint64_t>(i));
    tiles.push_back(smooth_field(tile_h, tile_w, 1, rng));
  }
  return tiles;
}

Vector rasterize_bar(Index size, double angle) {
  const double centre = 0.5 * static_cast<double>(size - 1);
  const double half_len = 0.4 * static_cast<double>(size);
  const double half_width = 0.08 * static_cast<double>(size);
  const double ux = std::cos(angle);
  const double uy = std::sin(angle);
  Vector out(size * size);
  for (Index r = 0; r < size; ++r) {
    for (Index c = 0; c < size; ++c) {
      const double px = static_cast<double>(c) - centre;
      const double py = static_cast<double>(r) - centre;
      const double t = std::clamp(px * ux + py * uy, -half_len, half_len);
      const double dist = std::hypot(px - t * ux, py - t * uy);
      out[r * size + c] = std::clamp(half_width + 0.5 - dist, 0.0, 1.0);
    }
  }
  return out;
}

RotatingBars synth_rotating_bars(std::size_t n_seq, std::size_t frames, Index size,
                                 std::uint64_t seed, std::optional<double> angle_step) {
  require(frames >= 2, "synth_rotating_bars: need at least 2 frames");
  require(size >= 2, "synth_rotating_bars: size must be >= 2");
  RotatingBars out;
  RngStream global(seed, 0);
  out.angle_step = angle_step ? *angle_step
                              : std::numbers::pi / 16.0 * (1.0 + global.uniform());
  for (std::size_t i = 0; i < n_seq; ++i) {
    RngStream rng(seed, i + 1);
    const double start = 2.0 * std::numbers::pi * rng.uniform();
    Episode ep;
    ep.meta = EpisodeMeta{"sequence", 0, 0, 1};
    for (std::size_t t = 0; t < frames; ++t) {
      ep.observations.push_back(rasterize_bar(size, start + static_cast<double>(t) * out.angle_step));
      ep.actions.push_back(Vector::Zero(1));
    }
    out.episodes.push_back(std::move(ep));
  }
  return out;
}

}  // namespace ebm
