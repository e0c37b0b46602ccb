#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <random>

#include "stetho/rng.hpp"
#include "stetho/towers.hpp"
#include "tower_oracle.hpp"

using namespace stetho;
using namespace stetho::towers;

namespace {

Block mk(double center, double width, double height) {
  Block b;
  b.center_x = center;
  b.width = width;
  b.height = height;
  return b;
}

// The counterbalanced three-block tower: a wide base, a light block hanging
// off to the right, a heavy block above pulling the stack back.
std::vector<Block> counterbalanced() {
  return {mk(2.0, 4.0, 1.0), mk(4.5, 3.0, 1.0), mk(3.5, 1.0, 4.0)};
}

// Random stack with every contact non-empty (labels may sit anywhere).
std::vector<Block> random_stack(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> wd(0.5, 2.0), hd(0.3, 1.2), u(-1.0, 1.0);
  int n = 2 + static_cast<int>(rng() % 5);
  std::vector<Block> blocks;
  double c = u(rng);
  for (int i = 0; i < n; ++i) {
    Block b = mk(c, wd(rng), hd(rng));
    blocks.push_back(b);
    if (i + 1 < n) {
      double limit = blocks.back().width / 2 + 0.2;  // keep some overlap plausible
      c += u(rng) * limit;
    }
  }
  // nudge until all contacts overlap
  for (size_t i = 1; i < blocks.size(); ++i) {
    Interval iv = contact_interval(blocks[i - 1], blocks[i]);
    if (iv.empty()) blocks[i].center_x = blocks[i - 1].center_x + u(rng) * blocks[i - 1].width / 4;
  }
  return blocks;
}

}  // namespace

TEST_CASE("contact_interval arithmetic") {
  Block lower = mk(1.0, 2.0, 1.0);   // [0,2]
  Block upper = mk(2.5, 2.0, 1.0);   // [1.5,3.5]
  Interval c = contact_interval(lower, upper);
  CHECK(c.lo == doctest::Approx(1.5));
  CHECK(c.hi == doctest::Approx(2.0));

  Interval full = contact_interval(lower, lower);
  CHECK(full.lo == doctest::Approx(0.0));
  CHECK(full.hi == doctest::Approx(2.0));

  Block touching = mk(3.0, 2.0, 1.0);  // [2,4] touches [0,2] at a point
  CHECK(contact_interval(lower, touching).empty());
}

TEST_CASE("com_above hand cases") {
  std::vector<Block> one = {mk(0, 2, 1), mk(0.3, 1, 1)};
  CHECK(com_above(one, 1) == doctest::Approx(0.3));

  std::vector<Block> two = {mk(0, 4, 1), mk(3.5, 1, 1), mk(4.5, 1, 1)};
  CHECK(com_above(two, 1) == doctest::Approx(4.0));

  auto t = counterbalanced();  // masses 3 at 4.5 and 4 at 3.5 above interface 1
  CHECK(com_above(t, 1) == doctest::Approx(27.5 / 7.0));
  CHECK(com_above(t, 1) == doctest::Approx(3.9286).epsilon(1e-4));
  CHECK_THROWS_AS(com_above(t, 0), std::invalid_argument);
  CHECK_THROWS_AS(com_above(t, 3), std::invalid_argument);
}

TEST_CASE("global stability hand cases") {
  std::vector<Block> centered = {mk(0, 2, 1), mk(0, 1.5, 1)};
  auto scan = analyze(centered);
  CHECK(scan.y_global == 0);
  CHECK(scan.y_local == 0);

  std::vector<Block> offset = {mk(1.0, 2.0, 1.0), mk(2.5, 2.0, 1.0)};  // contact [1.5,2], com 2.5
  scan = analyze(offset);
  CHECK(scan.y_global == 1);
  CHECK(scan.global_violated[0] == 1);

  // counterbalanced: com above interface 1 in (3,4), above interface 2 at 3.5
  scan = analyze(counterbalanced());
  CHECK(scan.y_global == 0);
  CHECK(scan.y_local == 1);
  CHECK(scan.local_violated[0] == 1);   // 4.5 outside (3,4)
  CHECK(scan.local_violated[1] == 0);   // 3.5 inside (3,4)
  CHECK(categorize(scan) == 'C');
}

TEST_CASE("two-block towers: local and global labels coincide by definition") {
  std::mt19937_64 rng(rng_stream(3, "two_block"));
  for (int it = 0; it < 300; ++it) {
    std::uniform_real_distribution<double> wd(0.5, 2.0), u(-1.0, 1.0);
    Block a = mk(0, wd(rng), wd(rng)), b = mk(0, wd(rng), wd(rng));
    b.center_x = u(rng) * (a.width + b.width) / 2 * 0.95;
    Interval c = contact_interval(a, b);
    if (c.empty()) continue;
    auto scan = analyze({a, b});
    CHECK(scan.y_global == scan.y_local);
    CHECK(scan.global_violated == scan.local_violated);
  }
}

TEST_CASE("categorize hand cases and the coincidence filter") {
  std::vector<Block> aligned = {mk(0, 2, 1), mk(0, 2, 1), mk(0, 2, 1)};
  CHECK(categorize(analyze(aligned)) == 'A');

  std::vector<Block> offset2 = {mk(1.0, 2.0, 1.0), mk(2.5, 2.0, 1.0)};
  CHECK(categorize(analyze(offset2)) == 'D');

  CHECK(categorize(analyze(counterbalanced())) == 'C');

  // globally and locally unstable at different sites -> rejected
  // base [0,4]; mid hangs right past its support; top leans further so the
  // first global break sits at a locally clean interface
  std::vector<Block> mismatch = {mk(2.0, 4.0, 0.4), mk(4.3, 3.0, 0.4), mk(5.6, 3.0, 4.0)};
  auto scan = analyze(mismatch);
  if (scan.y_global == 1 && scan.y_local == 1 &&
      !scan.local_violated[static_cast<size_t>(scan.violation_class - 1)])
    CHECK(!categorize(scan).has_value());
}

TEST_CASE("violation_interface") {
  std::vector<Block> stable = {mk(0, 2, 1), mk(0, 2, 1)};
  CHECK(violation_interface(analyze(stable)) == 0);

  std::vector<Block> unstable2 = {mk(1.0, 2.0, 1.0), mk(2.5, 2.0, 1.0)};
  CHECK(violation_interface(analyze(unstable2)) == 1);

  // four blocks violating only at interface 3
  std::vector<Block> four = {mk(0, 2, 1), mk(0, 2, 1), mk(0, 2, 1), mk(1.2, 0.8, 0.5)};
  auto scan = analyze(four);
  CHECK(scan.y_global == 1);
  CHECK(scan.global_violated[0] == 0);
  CHECK(scan.global_violated[1] == 0);
  CHECK(scan.global_violated[2] == 1);
  CHECK(violation_interface(scan) == 3);
}

TEST_CASE("generator: oracle re-check across categories") {
  for (char cat : {'A', 'B', 'C', 'D'}) {
    auto rng = rng_stream(11, "gen", static_cast<uint64_t>(cat));
    for (int it = 0; it < 50; ++it) {
      int n = (cat == 'B' || cat == 'C') ? 3 + static_cast<int>(rng() % 4)
                                         : 2 + static_cast<int>(rng() % 5);
      TowerScenario t = generate_scenario(cat, n, 0.05, rng);
      auto scan = analyze(t.blocks);
      REQUIRE(categorize(scan).has_value());
      CHECK(*categorize(scan) == cat);
      CHECK(decision_margin(t.blocks) >= 0.05);
    }
  }
}

TEST_CASE("generator: impossible and invalid requests") {
  auto rng = rng_stream(12, "gen_err");
  CHECK_THROWS_WITH_AS(generate_scenario('C', 2, 0.05, rng), doctest::Contains("impossible"),
                       std::runtime_error);
  CHECK_THROWS_WITH_AS(generate_scenario('B', 2, 0.05, rng), doctest::Contains("impossible"),
                       std::runtime_error);
  CHECK_THROWS_AS(generate_scenario('E', 3, 0.05, rng), std::invalid_argument);
  CHECK_THROWS_AS(generate_scenario('A', 7, 0.05, rng), std::invalid_argument);
  CHECK_THROWS_AS(generate_scenario('A', 3, -0.1, rng), std::invalid_argument);
  // an unreachable margin exhausts the attempt budget
  CHECK_THROWS_WITH_AS(generate_scenario('A', 2, 30.0, rng), doctest::Contains("budget"),
                       std::runtime_error);
}

TEST_CASE("invariants: translation and mirror leave labels unchanged") {
  std::mt19937_64 seeds(rng_stream(13, "invariance"));
  for (int it = 0; it < 40; ++it) {
    char cat = "ABCD"[it % 4];
    auto rng = rng_stream(14, "invariance_gen", static_cast<uint64_t>(it));
    int n = (cat == 'B' || cat == 'C') ? 3 : 2 + static_cast<int>(rng() % 5);
    TowerScenario t = generate_scenario(cat, n, 0.05, rng);
    auto base = analyze(t.blocks);

    auto shifted = t.blocks;
    double c = std::uniform_real_distribution<double>(-5, 5)(seeds);
    for (auto& b : shifted) b.center_x += c;
    auto s1 = analyze(shifted);
    CHECK(s1.y_global == base.y_global);
    CHECK(s1.y_local == base.y_local);
    CHECK(s1.violation_class == base.violation_class);

    auto mirrored = t.blocks;
    for (auto& b : mirrored) b.center_x = -b.center_x;
    auto s2 = analyze(mirrored);
    CHECK(s2.y_global == base.y_global);
    CHECK(s2.y_local == base.y_local);
    CHECK(s2.global_violated == base.global_violated);
    CHECK(s2.local_violated == base.local_violated);
  }
}

TEST_CASE("invariants: top interface agrees between local and global checks") {
  std::mt19937_64 rng(rng_stream(15, "top"));
  for (int it = 0; it < 200; ++it) {
    auto blocks = random_stack(rng);
    StabilityScan scan;
    try {
      scan = analyze(blocks);
    } catch (const std::runtime_error&) {
      continue;
    }
    CHECK(scan.global_violated.back() == scan.local_violated.back());
  }
}

TEST_CASE("oracle equivalence: recursive top-down against direct summation") {
  std::mt19937_64 rng(rng_stream(16, "equiv"));
  int checked = 0;
  for (int it = 0; it < 2000; ++it) {
    auto blocks = random_stack(rng);
    bool valid = true;
    for (size_t i = 1; i < blocks.size(); ++i)
      if (contact_interval(blocks[i - 1], blocks[i]).empty()) valid = false;
    if (!valid) continue;
    auto com = towers::testing::coms_recursive(blocks);
    for (int i = 1; i < static_cast<int>(blocks.size()); ++i)
      CHECK(std::abs(com[static_cast<size_t>(i)] - com_above(blocks, i)) < 1e-9);
    ++checked;
  }
  CHECK(checked > 500);

  // full label agreement on margin-guarded towers
  for (int it = 0; it < 60; ++it) {
    char cat = "ABCD"[it % 4];
    auto grng = rng_stream(17, "equiv_gen", static_cast<uint64_t>(it));
    int n = (cat == 'B' || cat == 'C') ? 3 + static_cast<int>(grng() % 4) : 2 + static_cast<int>(grng() % 5);
    TowerScenario t = generate_scenario(cat, n, 0.05, grng);
    auto a = analyze(t.blocks);
    auto b = towers::testing::analyze_recursive(t.blocks);
    CHECK(a.y_global == b.y_global);
    CHECK(a.y_local == b.y_local);
    CHECK(a.global_violated == b.global_violated);
    CHECK(a.local_violated == b.local_violated);
    CHECK(a.violation_class == b.violation_class);
  }
}

TEST_CASE("rasterize: full-width block paints whole rows in its band") {
  TowerScenario t;
  t.blocks = {mk(0, kWorldWidth, 1.0)};
  auto px = rasterize(t, 32);
  const double scale = 32 / kWorldWidth;
  // rows fully inside the block band (between ground and block top)
  int row_hi = static_cast<int>(std::floor((kWorldHeight - kGroundHeight - 0.9) * scale)) + 1;
  int row_lo = static_cast<int>(std::ceil((kWorldHeight - kGroundHeight - 0.1) * scale)) - 1;
  REQUIRE(row_hi < row_lo);
  for (int y = row_hi; y <= row_lo; ++y)
    for (int x = 0; x < 32; ++x) {
      CHECK(px[(static_cast<size_t>(y) * 32 + x) * 3 + 0] == 226);
      CHECK(px[(static_cast<size_t>(y) * 32 + x) * 3 + 1] == 61);
    }
}

TEST_CASE("rasterize: pixel coverage tracks block area within a row and column") {
  auto rng = rng_stream(18, "raster");
  TowerScenario t = generate_scenario('A', 3, 0.05, rng);
  const int s = 48;
  auto px = rasterize(t, s);
  const double scale = s / kWorldWidth;
  for (size_t bi = 0; bi < t.blocks.size(); ++bi) {
    const Block& b = t.blocks[bi];
    const uint8_t* color = nullptr;
    // count pixels whose nearest colour is this block's palette entry
    static const uint8_t palette[6][3] = {{226, 61, 61}, {61, 196, 84}, {74, 112, 226},
                                          {230, 199, 64}, {198, 73, 198}, {72, 199, 199}};
    color = palette[static_cast<size_t>(b.color_index % 6)];
    int count = 0;
    for (int i = 0; i < s * s; ++i) {
      const uint8_t* p = &px[static_cast<size_t>(i) * 3];
      auto d2 = [&](const uint8_t* c) {
        double d = 0;
        for (int k = 0; k < 3; ++k) d += (p[k] - c[k]) * (p[k] - c[k]);
        return d;
      };
      double dm = d2(color);
      bool nearest = true;
      static const uint8_t bg[3] = {18, 18, 24}, ground[3] = {70, 70, 76};
      if (d2(bg) <= dm || d2(ground) <= dm) nearest = false;
      for (int pi = 0; pi < 6 && nearest; ++pi)
        if (palette[pi] != color && d2(palette[pi]) < dm) nearest = false;
      count += nearest;
    }
    // other blocks may share the palette slot; only check when unique
    bool unique = true;
    for (size_t bj = 0; bj < t.blocks.size(); ++bj)
      if (bj != bi && t.blocks[bj].color_index % 6 == b.color_index % 6) unique = false;
    if (!unique) continue;
    double area_px = b.width * scale * b.height * scale;
    double slack = (b.width * scale + b.height * scale) + 4;
    CHECK(std::abs(count - area_px) <= slack);
  }
}

TEST_CASE("rasterize: deterministic and bounded") {
  auto rng = rng_stream(19, "raster_det");
  TowerScenario t = generate_scenario('D', 4, 0.05, rng);
  auto a = rasterize(t, 48);
  auto b = rasterize(t, 48);
  CHECK(a == b);
  TowerScenario wide;
  wide.blocks = {mk(0, kWorldWidth + 1, 1.0)};
  CHECK_THROWS_WITH_AS(rasterize(wide, 48), doctest::Contains("window"), std::runtime_error);
}

TEST_CASE("build_dataset: balanced categories, splits, and bit-exact round trip") {
  BuildConfig cfg;
  cfg.per_category = 20;
  cfg.image_size = 32;
  cfg.seed = 99;
  data::Dataset ds = build_dataset(cfg);
  REQUIRE(ds.count() == 80);
  auto counts = ds.category_counts();
  for (const auto& [k, v] : counts) CHECK(v == 20);

  int train_A = 0, test_A = 0;
  for (const auto& r : ds.records) {
    if (r.category == 'A') (r.split == "train" ? train_A : test_A)++;
    CHECK(((r.category == 'A' || r.category == 'D') ? "easy" : "hard") == r.subset);
  }
  CHECK(train_A == 16);
  CHECK(test_A == 4);

  auto easy = ds.select("train", "easy");
  for (int idx : easy) {
    char c = ds.records[static_cast<size_t>(idx)].category;
    CHECK((c == 'A' || c == 'D'));
  }

  namespace fs = std::filesystem;
  auto dir = fs::temp_directory_path() / "stetho_towers_rt";
  fs::remove_all(dir);
  data::save_dataset(ds, dir.string());
  data::Dataset back = data::load_dataset(dir.string());
  CHECK(back.pixels == ds.pixels);
  REQUIRE(back.count() == ds.count());
  for (int i = 0; i < ds.count(); ++i) {
    CHECK(back.records[static_cast<size_t>(i)].category == ds.records[static_cast<size_t>(i)].category);
    CHECK(back.records[static_cast<size_t>(i)].y_global == ds.records[static_cast<size_t>(i)].y_global);
    CHECK(back.records[static_cast<size_t>(i)].y_local == ds.records[static_cast<size_t>(i)].y_local);
    CHECK(back.records[static_cast<size_t>(i)].violation_class == ds.records[static_cast<size_t>(i)].violation_class);
    CHECK(back.records[static_cast<size_t>(i)].split == ds.records[static_cast<size_t>(i)].split);
    CHECK(back.records[static_cast<size_t>(i)].subset == ds.records[static_cast<size_t>(i)].subset);
  }
  // saving the reloaded dataset reproduces the files byte for byte
  auto dir2 = fs::temp_directory_path() / "stetho_towers_rt2";
  fs::remove_all(dir2);
  data::save_dataset(back, dir2.string());
  for (const char* name : {"images.bin", "labels.csv", "manifest.json"}) {
    std::ifstream f1(dir / name, std::ios::binary), f2(dir2 / name, std::ios::binary);
    std::string a((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    std::string b((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    CHECK(a == b);
  }
  fs::remove_all(dir);
  fs::remove_all(dir2);
}

TEST_CASE("build_dataset: per-index streams make generation order-independent") {
  BuildConfig cfg;
  cfg.per_category = 5;
  cfg.image_size = 24;
  cfg.seed = 7;
  data::Dataset a = build_dataset(cfg);
  data::Dataset b = build_dataset(cfg);
  CHECK(a.pixels == b.pixels);
}
