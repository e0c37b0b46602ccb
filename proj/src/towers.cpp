#include "stetho/towers.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "stetho/rng.hpp"

namespace stetho::towers {

namespace {

// Block size ranges (length units).
constexpr double kMinW = 0.9, kMaxW = 1.8;
constexpr double kMinH = 0.45, kMaxH = 0.9;

// Offset profile, all relative to the supporting block's width. Locally clean
// towers draw from the pool; violation sites overhang past the 0.5 threshold.
// The C range sits just over it so the inverse cue on the hard split needs
// near-boundary geometry, while D overhangs are blatant enough for the easy
// split to be learned quickly.
constexpr double kPoolOffset = 0.46;
constexpr double kOverhangC[2] = {0.50, 0.68};
constexpr double kOverhangD[2] = {0.60, 0.85};
constexpr double kCounterweight[2] = {0.20, 1.00};
constexpr double kCounterweightProb = 0.6;

constexpr int kAttemptBudget = 100000;

const uint8_t kPalette[6][3] = {
    {226, 61, 61}, {61, 196, 84}, {74, 112, 226}, {230, 199, 64}, {198, 73, 198}, {72, 199, 199},
};
const uint8_t kBackground[3] = {18, 18, 24};
const uint8_t kGround[3] = {70, 70, 76};

double uniform(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

std::vector<Block> sample_sizes(int n, std::mt19937_64& rng) {
  std::vector<Block> blocks(static_cast<size_t>(n));
  for (auto& b : blocks) {
    b.width = uniform(rng, kMinW, kMaxW);
    b.height = uniform(rng, kMinH, kMaxH);
    b.color_index = static_cast<int>(rng() % 6);
  }
  return blocks;
}

void place(std::vector<Block>& blocks, const std::vector<double>& deltas) {
  blocks[0].center_x = 0;
  for (size_t i = 1; i < blocks.size(); ++i)
    blocks[i].center_x = blocks[i - 1].center_x + deltas[i - 1];
}

double pool_delta(const Block& lower, std::mt19937_64& rng) {
  return uniform(rng, -1.0, 1.0) * kPoolOffset * lower.width;
}

std::vector<Block> propose_plain(int n, std::mt19937_64& rng) {
  auto blocks = sample_sizes(n, rng);
  std::vector<double> d(static_cast<size_t>(n - 1));
  for (int i = 1; i < n; ++i) d[static_cast<size_t>(i - 1)] = pool_delta(blocks[static_cast<size_t>(i - 1)], rng);
  place(blocks, d);
  return blocks;
}

std::vector<Block> propose_overhang(char category, int n, std::mt19937_64& rng) {
  auto blocks = sample_sizes(n, rng);
  // C needs a block above the violation site to counterbalance it
  int v_max = category == 'C' ? n - 2 : n - 1;
  int v = 1 + static_cast<int>(rng() % static_cast<uint64_t>(v_max));
  double sign = (rng() & 1) ? 1.0 : -1.0;
  const double* range = category == 'C' ? kOverhangC : kOverhangD;

  std::vector<double> d(static_cast<size_t>(n - 1));
  for (int i = 1; i < n; ++i) {
    const Block& lower = blocks[static_cast<size_t>(i - 1)];
    if (i == v) {
      d[static_cast<size_t>(i - 1)] = sign * uniform(rng, range[0], range[1]) * lower.width;
    } else if (i == v + 1 && uniform(rng, 0, 1) < kCounterweightProb) {
      double limit = (lower.width + blocks[static_cast<size_t>(i)].width) / 2 - 0.15;
      double mag = std::min(uniform(rng, kCounterweight[0], kCounterweight[1]) * lower.width, limit);
      d[static_cast<size_t>(i - 1)] = -sign * mag;
    } else {
      d[static_cast<size_t>(i - 1)] = pool_delta(lower, rng);
    }
  }
  place(blocks, d);
  return blocks;
}

bool fits_window(const std::vector<Block>& blocks) {
  double lo = blocks[0].lo(), hi = blocks[0].hi(), h = 0;
  for (const auto& b : blocks) {
    lo = std::min(lo, b.lo());
    hi = std::max(hi, b.hi());
    h += b.height;
  }
  return (hi - lo) <= kWorldWidth - 0.2 && h + kGroundHeight <= kWorldHeight - 0.1;
}

}  // namespace

Interval contact_interval(const Block& lower, const Block& upper) {
  return Interval{std::max(lower.lo(), upper.lo()), std::min(lower.hi(), upper.hi())};
}

double com_above(const std::vector<Block>& blocks, int interface_index) {
  const int n = static_cast<int>(blocks.size());
  if (interface_index < 1 || interface_index > n - 1)
    throw std::invalid_argument("com_above: interface " + std::to_string(interface_index) +
                                " outside 1.." + std::to_string(n - 1));
  double mass = 0, moment = 0;
  for (int j = interface_index; j < n; ++j) {
    const Block& b = blocks[static_cast<size_t>(j)];
    mass += b.mass();
    moment += b.mass() * b.center_x;
  }
  return moment / mass;
}

StabilityScan analyze(const std::vector<Block>& blocks) {
  const int n = static_cast<int>(blocks.size());
  StabilityScan scan;
  if (n < 2) return scan;
  scan.global_violated.resize(static_cast<size_t>(n - 1));
  scan.local_violated.resize(static_cast<size_t>(n - 1));
  for (int i = 1; i < n; ++i) {
    Interval c = contact_interval(blocks[static_cast<size_t>(i - 1)], blocks[static_cast<size_t>(i)]);
    if (c.empty())
      throw std::runtime_error("analyze: empty contact at interface " + std::to_string(i));
    bool gv = !c.contains(com_above(blocks, i));
    bool lv = !c.contains(blocks[static_cast<size_t>(i)].center_x);
    scan.global_violated[static_cast<size_t>(i - 1)] = gv;
    scan.local_violated[static_cast<size_t>(i - 1)] = lv;
    if (gv && scan.violation_class == 0) scan.violation_class = i;
    scan.y_global |= gv;
    scan.y_local |= lv;
  }
  return scan;
}

std::optional<char> categorize(const StabilityScan& scan) {
  if (!scan.y_global && !scan.y_local) return 'A';
  if (scan.y_global && !scan.y_local) return 'B';
  if (!scan.y_global && scan.y_local) return 'C';
  // D requires the sites to coincide: the first global violation is local too
  if (scan.local_violated[static_cast<size_t>(scan.violation_class - 1)]) return 'D';
  return std::nullopt;
}

int violation_interface(const StabilityScan& scan) { return scan.violation_class; }

double decision_margin(const std::vector<Block>& blocks) {
  const int n = static_cast<int>(blocks.size());
  double worst = std::numeric_limits<double>::infinity();
  for (int i = 1; i < n; ++i) {
    Interval c = contact_interval(blocks[static_cast<size_t>(i - 1)], blocks[static_cast<size_t>(i)]);
    if (c.empty()) return 0;
    for (double com : {com_above(blocks, i), blocks[static_cast<size_t>(i)].center_x}) {
      double d = std::min(std::abs(com - c.lo), std::abs(c.hi - com)) / c.width();
      worst = std::min(worst, d);
    }
  }
  return worst;
}

TowerScenario generate_scenario(char category, int n_blocks, double margin,
                                std::mt19937_64& rng) {
  if (category < 'A' || category > 'D')
    throw std::invalid_argument("generate_scenario: category must be A..D");
  if (n_blocks < 2 || n_blocks > 6)
    throw std::invalid_argument("generate_scenario: n_blocks must lie in [2,6], got " +
                                std::to_string(n_blocks));
  if (margin <= 0) throw std::invalid_argument("generate_scenario: margin must be positive");
  if ((category == 'B' || category == 'C') && n_blocks < 3)
    throw std::runtime_error(std::string("generate_scenario: category ") + category +
                             " is impossible with 2 blocks (local and global labels coincide)");

  for (int attempt = 0; attempt < kAttemptBudget; ++attempt) {
    std::vector<Block> blocks = (category == 'A' || category == 'B')
                                    ? propose_plain(n_blocks, rng)
                                    : propose_overhang(category, n_blocks, rng);
    if (!fits_window(blocks)) continue;
    StabilityScan scan;
    try {
      scan = analyze(blocks);
    } catch (const std::runtime_error&) {
      continue;  // empty contact
    }
    auto cat = categorize(scan);
    if (!cat || *cat != category) continue;
    if (decision_margin(blocks) < margin) continue;
    TowerScenario t;
    t.blocks = std::move(blocks);
    t.labels = std::move(scan);
    t.category = category;
    return t;
  }
  throw std::runtime_error(std::string("generate_scenario: budget exhausted for category ") +
                           category + " with n=" + std::to_string(n_blocks) +
                           ", margin=" + std::to_string(margin));
}

std::vector<uint8_t> rasterize(const TowerScenario& tower, int image_size) {
  const int s = image_size;
  if (s <= 0) throw std::invalid_argument("rasterize: image size must be positive");
  const auto& blocks = tower.blocks;
  double lo = blocks.front().lo(), hi = blocks.front().hi(), total_h = 0;
  for (const auto& b : blocks) {
    lo = std::min(lo, b.lo());
    hi = std::max(hi, b.hi());
    total_h += b.height;
  }
  if (hi - lo > kWorldWidth || total_h + kGroundHeight > kWorldHeight)
    throw std::runtime_error("rasterize: tower exceeds the world window");
  const double shift = -(lo + hi) / 2;  // horizontal auto-centering
  const double px_per_unit = s / kWorldWidth;

  std::vector<double> canvas(static_cast<size_t>(s) * s * 3);
  for (int i = 0; i < s * s; ++i)
    for (int c = 0; c < 3; ++c) canvas[static_cast<size_t>(i) * 3 + c] = kBackground[c];

  // world x right, world y up from the window bottom; image row 0 on top
  auto blend_rect = [&](double wx0, double wx1, double wy0, double wy1, const uint8_t rgb[3]) {
    double fx0 = (wx0 + kWorldWidth / 2) * px_per_unit;
    double fx1 = (wx1 + kWorldWidth / 2) * px_per_unit;
    double fy0 = (kWorldHeight - wy1) * px_per_unit;
    double fy1 = (kWorldHeight - wy0) * px_per_unit;
    int x_begin = std::max(0, static_cast<int>(std::floor(fx0)));
    int x_end = std::min(s, static_cast<int>(std::ceil(fx1)));
    int y_begin = std::max(0, static_cast<int>(std::floor(fy0)));
    int y_end = std::min(s, static_cast<int>(std::ceil(fy1)));
    for (int y = y_begin; y < y_end; ++y) {
      double cy = std::min<double>(y + 1, fy1) - std::max<double>(y, fy0);
      if (cy <= 0) continue;
      for (int x = x_begin; x < x_end; ++x) {
        double cx = std::min<double>(x + 1, fx1) - std::max<double>(x, fx0);
        if (cx <= 0) continue;
        double a = cx * cy;
        double* px = &canvas[(static_cast<size_t>(y) * s + x) * 3];
        for (int c = 0; c < 3; ++c) px[c] = px[c] * (1 - a) + rgb[c] * a;
      }
    }
  };

  blend_rect(-kWorldWidth / 2, kWorldWidth / 2, 0, kGroundHeight, kGround);
  double base = kGroundHeight;
  for (const auto& b : blocks) {
    blend_rect(b.lo() + shift, b.hi() + shift, base, base + b.height,
               kPalette[static_cast<size_t>(b.color_index % 6)]);
    base += b.height;
  }

  std::vector<uint8_t> out(canvas.size());
  for (size_t i = 0; i < canvas.size(); ++i)
    out[i] = static_cast<uint8_t>(std::lround(std::clamp(canvas[i], 0.0, 255.0)));
  return out;
}

Tensor rasterize_tensor(const TowerScenario& tower, int image_size) {
  auto px = rasterize(tower, image_size);
  const int s = image_size;
  Tensor t({3, s, s});
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < s; ++y)
      for (int x = 0; x < s; ++x) t[(c * s + y) * s + x] = px[(static_cast<size_t>(y) * s + x) * 3 + static_cast<size_t>(c)] / 255.0;
  return t;
}

data::Dataset build_dataset(const BuildConfig& cfg) {
  if (cfg.per_category <= 0) throw std::invalid_argument("build_dataset: per_category");
  const int total = 4 * cfg.per_category;
  const int test_every = std::max(2, static_cast<int>(std::lround(1.0 / (1.0 - cfg.train_fraction))));

  data::Dataset ds;
  ds.kind = "towers";
  ds.image_size = cfg.image_size;
  ds.channels = 3;
  ds.seed = cfg.seed;
  ds.margin = cfg.margin;
  ds.records.resize(static_cast<size_t>(total));
  ds.pixels.resize(static_cast<size_t>(ds.record_bytes()) * static_cast<size_t>(total));

  for (int idx = 0; idx < total; ++idx) {
    const char cat = "ABCD"[idx % 4];
    const int ordinal = idx / 4;  // position within the category
    auto rng = rng_stream(cfg.seed, "scenario", static_cast<uint64_t>(idx));
    int n_blocks = (cat == 'B' || cat == 'C') ? 3 + static_cast<int>(rng() % 4)
                                              : 2 + static_cast<int>(rng() % 5);
    TowerScenario tower = generate_scenario(cat, n_blocks, cfg.margin, rng);
    auto px = rasterize(tower, cfg.image_size);
    std::memcpy(ds.pixels.data() + ds.record_bytes() * idx, px.data(), px.size());

    data::RecordMeta& r = ds.records[static_cast<size_t>(idx)];
    r.index = idx;
    r.category = cat;
    r.y_global = tower.labels.y_global;
    r.y_local = tower.labels.y_local;
    r.violation_class = tower.labels.violation_class;
    r.split = (ordinal % test_every == test_every - 1) ? "test" : "train";
    r.subset = (cat == 'A' || cat == 'D') ? "easy" : "hard";
  }
  return ds;
}

}  // namespace stetho::towers
