#pragma once

// Test-only cross-check for the stability scan: cumulative centres of mass
// computed top-down by mass-weighted recursion instead of direct summation.

#include <vector>

#include "stetho/towers.hpp"

namespace stetho::towers::testing {

inline std::vector<double> coms_recursive(const std::vector<Block>& blocks) {
  const int n = static_cast<int>(blocks.size());
  std::vector<double> com(static_cast<size_t>(n), 0.0);
  if (n < 2) return com;
  double mass = blocks[static_cast<size_t>(n - 1)].mass();
  double c = blocks[static_cast<size_t>(n - 1)].center_x;
  com[static_cast<size_t>(n - 1)] = c;
  for (int i = n - 2; i >= 1; --i) {
    double m = blocks[static_cast<size_t>(i)].mass();
    c = (m * blocks[static_cast<size_t>(i)].center_x + mass * c) / (m + mass);
    mass += m;
    com[static_cast<size_t>(i)] = c;
  }
  return com;
}

inline StabilityScan analyze_recursive(const std::vector<Block>& blocks) {
  const int n = static_cast<int>(blocks.size());
  StabilityScan scan;
  if (n < 2) return scan;
  auto com = coms_recursive(blocks);
  scan.global_violated.resize(static_cast<size_t>(n - 1));
  scan.local_violated.resize(static_cast<size_t>(n - 1));
  for (int i = 1; i < n; ++i) {
    Interval c = contact_interval(blocks[static_cast<size_t>(i - 1)], blocks[static_cast<size_t>(i)]);
    bool gv = !c.contains(com[static_cast<size_t>(i)]);
    bool lv = !c.contains(blocks[static_cast<size_t>(i)].center_x);
    scan.global_violated[static_cast<size_t>(i - 1)] = gv;
    scan.local_violated[static_cast<size_t>(i - 1)] = lv;
    if (gv && scan.violation_class == 0) scan.violation_class = i;
    scan.y_global |= gv;
    scan.y_local |= lv;
  }
  return scan;
}

}  // namespace stetho::towers::testing
