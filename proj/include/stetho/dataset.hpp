#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "stetho/tensor.hpp"

namespace stetho::data {

/// One labels.csv row. Tower and digit datasets share the container; unused
/// fields stay at their sentinels.
struct RecordMeta {
  int index = -1;
  char category = 0;  // towers: 'A'..'D'
  int y_global = -1;
  int y_local = -1;
  int violation_class = -1;
  int digit = -1;       // digits: true class
  int hint_digit = -1;  // one-hot hint variant
  int hint_class = -1;  // pixel hint variant
  std::string split;    // train | test
  std::string subset;   // towers: easy | hard
};

/// A dataset directory held in memory: manifest fields, one metadata row per
/// record and the packed 8-bit image payload (record-major, HWC byte order).
struct Dataset {
  std::string kind;  // towers | mnist_onehot | mnist_pixel
  int image_size = 0;
  int channels = 3;
  uint64_t seed = 0;
  double q_h = -1.0;    // digit hints only
  double margin = -1.0; // towers only
  std::vector<RecordMeta> records;
  std::vector<uint8_t> pixels;

  int count() const { return static_cast<int>(records.size()); }
  int64_t record_bytes() const {
    return static_cast<int64_t>(image_size) * image_size * channels;
  }
  const uint8_t* record_pixels(int index) const { return pixels.data() + record_bytes() * index; }

  /// [n x channels x S x S] tensor scaled into [0,1].
  Tensor image_batch(const std::vector<int>& indices) const;

  /// Record indices with the given split ("train"/"test") and subset
  /// ("all"/"easy"/"hard"; "all" for digit datasets).
  std::vector<int> select(const std::string& split, const std::string& subset) const;

  std::map<std::string, int> category_counts() const;
};

void save_dataset(const Dataset& ds, const std::string& dir);
Dataset load_dataset(const std::string& dir);

}  // namespace stetho::data
