#include "stetho/dataset.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace stetho::data {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error("dataset: " + msg); }

bool is_towers(const std::string& kind) { return kind == "towers"; }

std::string labels_header(const std::string& kind) {
  if (is_towers(kind)) return "index,category,y_G,y_L,violation_class,split,subset";
  if (kind == "mnist_onehot") return "index,digit,hint_digit,split";
  if (kind == "mnist_pixel") return "index,digit,hint_class,split";
  fail("unknown kind '" + kind + "'");
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream ss(line);
  while (std::getline(ss, field, ',')) out.push_back(field);
  return out;
}

}  // namespace

Tensor Dataset::image_batch(const std::vector<int>& indices) const {
  const int s = image_size, c = channels;
  Tensor out({static_cast<int>(indices.size()), c, s, s});
  double* dst = out.ptr();
  for (int idx : indices) {
    const uint8_t* px = record_pixels(idx);  // HWC bytes
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < s; ++y)
        for (int x = 0; x < s; ++x) *dst++ = px[(y * s + x) * c + ch] / 255.0;
  }
  return out;
}

std::vector<int> Dataset::select(const std::string& split, const std::string& subset) const {
  std::vector<int> out;
  for (const auto& r : records) {
    if (!split.empty() && r.split != split) continue;
    if (subset != "all" && !subset.empty() && r.subset != subset) continue;
    out.push_back(r.index);
  }
  return out;
}

std::map<std::string, int> Dataset::category_counts() const {
  std::map<std::string, int> out;
  for (const auto& r : records)
    if (r.category) out[std::string(1, r.category)]++;
  return out;
}

void save_dataset(const Dataset& ds, const std::string& dir) {
  if (ds.pixels.size() != static_cast<size_t>(ds.record_bytes()) * ds.records.size())
    fail("pixel payload does not match records");
  fs::create_directories(dir);

  {
    std::ofstream f(fs::path(dir) / "images.bin", std::ios::binary);
    if (!f) fail("cannot write images.bin in " + dir);
    f.write(reinterpret_cast<const char*>(ds.pixels.data()),
            static_cast<std::streamsize>(ds.pixels.size()));
    if (!f) fail("short write to images.bin");
  }

  {
    std::ofstream f(fs::path(dir) / "labels.csv");
    if (!f) fail("cannot write labels.csv in " + dir);
    f << labels_header(ds.kind) << "\n";
    for (const auto& r : ds.records) {
      if (is_towers(ds.kind)) {
        f << r.index << ',' << r.category << ',' << r.y_global << ',' << r.y_local << ','
          << r.violation_class << ',' << r.split << ',' << r.subset << "\n";
      } else if (ds.kind == "mnist_onehot") {
        f << r.index << ',' << r.digit << ',' << r.hint_digit << ',' << r.split << "\n";
      } else {
        f << r.index << ',' << r.digit << ',' << r.hint_class << ',' << r.split << "\n";
      }
    }
    if (!f) fail("short write to labels.csv");
  }

  json splits = {{"train", json::array()}, {"test", json::array()}};
  for (const auto& r : ds.records) splits[r.split].push_back(r.index);
  json m = {
      {"format", "stetho-dataset-v1"},
      {"kind", ds.kind},
      {"count", ds.count()},
      {"image_size", ds.image_size},
      {"channels", ds.channels},
      {"seed", ds.seed},
      {"record_bytes", ds.record_bytes()},
      {"splits", splits},
  };
  if (ds.q_h >= 0) m["q_h"] = ds.q_h;
  if (ds.margin >= 0) m["margin"] = ds.margin;
  if (is_towers(ds.kind)) m["category_counts"] = ds.category_counts();
  std::ofstream f(fs::path(dir) / "manifest.json");
  if (!f) fail("cannot write manifest.json in " + dir);
  f << m.dump(2) << "\n";
}

Dataset load_dataset(const std::string& dir) {
  std::ifstream mf(fs::path(dir) / "manifest.json");
  if (!mf) fail("no manifest.json in " + dir);
  json m = json::parse(mf);
  Dataset ds;
  ds.kind = m.at("kind").get<std::string>();
  ds.image_size = m.at("image_size").get<int>();
  ds.channels = m.at("channels").get<int>();
  ds.seed = m.at("seed").get<uint64_t>();
  if (m.contains("q_h")) ds.q_h = m["q_h"].get<double>();
  if (m.contains("margin")) ds.margin = m["margin"].get<double>();
  const int count = m.at("count").get<int>();

  std::ifstream lf(fs::path(dir) / "labels.csv");
  if (!lf) fail("no labels.csv in " + dir);
  std::string line;
  std::getline(lf, line);
  if (line != labels_header(ds.kind)) fail("labels.csv header mismatch: '" + line + "'");
  while (std::getline(lf, line)) {
    if (line.empty()) continue;
    auto f = split_csv(line);
    RecordMeta r;
    if (is_towers(ds.kind)) {
      if (f.size() != 7) fail("bad labels.csv row: " + line);
      r.index = std::stoi(f[0]);
      r.category = f[1].at(0);
      r.y_global = std::stoi(f[2]);
      r.y_local = std::stoi(f[3]);
      r.violation_class = std::stoi(f[4]);
      r.split = f[5];
      r.subset = f[6];
    } else {
      if (f.size() != 4) fail("bad labels.csv row: " + line);
      r.index = std::stoi(f[0]);
      r.digit = std::stoi(f[1]);
      if (ds.kind == "mnist_onehot")
        r.hint_digit = std::stoi(f[2]);
      else
        r.hint_class = std::stoi(f[2]);
      r.split = f[3];
    }
    ds.records.push_back(std::move(r));
  }
  if (ds.count() != count)
    fail("manifest count " + std::to_string(count) + " vs " + std::to_string(ds.count()) +
         " label rows");

  std::ifstream imgf(fs::path(dir) / "images.bin", std::ios::binary);
  if (!imgf) fail("no images.bin in " + dir);
  ds.pixels.resize(static_cast<size_t>(ds.record_bytes()) * static_cast<size_t>(count));
  imgf.read(reinterpret_cast<char*>(ds.pixels.data()),
            static_cast<std::streamsize>(ds.pixels.size()));
  if (imgf.gcount() != static_cast<std::streamsize>(ds.pixels.size()))
    fail("images.bin truncated");
  char extra;
  if (imgf.read(&extra, 1)) fail("images.bin longer than manifest declares");
  return ds;
}

}  // namespace stetho::data
