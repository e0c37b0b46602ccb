#pragma once

#include <optional>
#include <random>
#include <vector>

#include "stetho/dataset.hpp"
#include "stetho/tensor.hpp"

namespace stetho::towers {

/// Axis-aligned planar block of unit density; mass = width * height.
struct Block {
  double center_x = 0;
  double width = 1;
  double height = 1;
  int color_index = 0;

  double mass() const { return width * height; }
  double lo() const { return center_x - width / 2; }
  double hi() const { return center_x + width / 2; }
};

struct Interval {
  double lo = 0;
  double hi = 0;
  bool empty() const { return !(lo < hi); }  // point contact counts as empty
  double width() const { return hi - lo; }
  bool contains(double x) const { return lo < x && x < hi; }  // strict interior
};

/// Lateral overlap of the two touching blocks; empty when they merely touch.
Interval contact_interval(const Block& lower, const Block& upper);

/// Mass-weighted mean of center_x over blocks i..top. Interface i sits below
/// block i, so this is the tower resting on that interface; 1 <= i <= n-1.
double com_above(const std::vector<Block>& blocks, int interface_index);

struct StabilityScan {
  std::vector<uint8_t> global_violated;  // per interface, 1-indexed entry i-1
  std::vector<uint8_t> local_violated;
  int y_global = 0;
  int y_local = 0;
  int violation_class = 0;  // 0 stable, else lowest globally violated interface
};

/// Exact quasi-static scan of every interface. Throws if any contact is empty.
StabilityScan analyze(const std::vector<Block>& blocks);

/// Category from the label pair; towers that are globally and locally
/// unstable qualify as D only when the first global violation is also a local
/// one, otherwise the scenario is rejected (nullopt).
std::optional<char> categorize(const StabilityScan& scan);

int violation_interface(const StabilityScan& scan);

struct TowerScenario {
  std::vector<Block> blocks;
  StabilityScan labels;
  char category = 0;
};

/// Smallest distance from any decisive centre of mass (global and local, every
/// interface) to its contact boundary, in units of that contact's width.
double decision_margin(const std::vector<Block>& blocks);

/// Rejection-samples a tower of the requested category. Every decisive COM
/// keeps at least margin * contact_width from the boundary. Throws when the
/// attempt budget (1e5) runs out or the category is impossible for n_blocks.
TowerScenario generate_scenario(char category, int n_blocks, double margin, std::mt19937_64& rng);

/// Orthographic side view: filled rectangles over a dark background with a
/// thin ground strip, area-weighted edge blending, fixed 6-colour palette.
/// Returns S*S*3 interleaved RGB bytes. Throws if the tower exceeds the
/// world window after horizontal centering.
std::vector<uint8_t> rasterize(const TowerScenario& tower, int image_size);

/// Same view as a [3 x S x S] tensor in [0,1] (the quantized render / 255).
Tensor rasterize_tensor(const TowerScenario& tower, int image_size);

struct BuildConfig {
  int per_category = 1000;
  int image_size = 48;
  uint64_t seed = 1;
  double margin = 0.05;
  double train_fraction = 0.8;
};

/// Balanced A/B/C/D dataset with per-category 80/20 train/test splits. Each
/// scenario derives from its own (seed, index) stream, so generation order
/// does not matter.
data::Dataset build_dataset(const BuildConfig& cfg);

// World-window geometry shared by the rasterizer and the generator bounds.
inline constexpr double kWorldWidth = 6.4;
inline constexpr double kWorldHeight = 6.4;
inline constexpr double kGroundHeight = 0.15;

}  // namespace stetho::towers
