#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "wikg/common.hpp"
#include "wikg/tensor.hpp"

namespace wikg {

// ---------------------------------------------------------------------------
// Bag file format
//
//   offset 0   magic  "WKGB"
//   offset 4   u32 LE version (1)
//   offset 8   u32 LE n        (instances, >= 1)
//   offset 12  u32 LE d_in     (feature dim, >= 1)
//   offset 16  n * d_in f32 LE, row-major
// ---------------------------------------------------------------------------

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
  out.push_back(static_cast<char>((v >> 16) & 0xff));
  out.push_back(static_cast<char>((v >> 24) & 0xff));
}

inline std::uint32_t get_u32(const std::string& s, std::size_t off) {
  return static_cast<std::uint32_t>(static_cast<unsigned char>(s[off])) |
         (static_cast<std::uint32_t>(static_cast<unsigned char>(s[off + 1])) << 8) |
         (static_cast<std::uint32_t>(static_cast<unsigned char>(s[off + 2])) << 16) |
         (static_cast<std::uint32_t>(static_cast<unsigned char>(s[off + 3])) << 24);
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return std::move(ss).str();
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw io_error("cannot open " + path + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw io_error("short write to " + path);
}

}  // namespace detail

struct BagFile {
  std::uint32_t n = 0;
  std::uint32_t d_in = 0;
  std::vector<float> values;  // n * d_in row-major
};

inline void write_bag(const std::string& path, const BagFile& bag) {
  if (bag.n < 1) throw param_error("write_bag: n must be >= 1");
  if (bag.d_in < 1) throw param_error("write_bag: d_in must be >= 1");
  if (bag.values.size() != static_cast<std::size_t>(bag.n) * bag.d_in)
    throw shape_error("write_bag: payload size mismatch");
  assert_finite<float>(bag.values, "write_bag " + path);
  std::string out;
  out.reserve(16 + bag.values.size() * 4);
  out += "WKGB";
  detail::put_u32(out, 1);
  detail::put_u32(out, bag.n);
  detail::put_u32(out, bag.d_in);
  for (float f : bag.values) detail::put_u32(out, std::bit_cast<std::uint32_t>(f));
  detail::write_file(path, out);
}

inline BagFile read_bag(const std::string& path) {
  const std::string raw = detail::read_file(path);
  if (raw.size() < 16) throw io_error(path + ": truncated header (byte offset 0): expected 16 bytes, got " +
                                      std::to_string(raw.size()));
  if (raw.compare(0, 4, "WKGB") != 0) throw io_error(path + ": bad magic (byte offset 0)");
  if (detail::get_u32(raw, 4) != 1)
    throw io_error(path + ": unsupported version " + std::to_string(detail::get_u32(raw, 4)) +
                   " (byte offset 4)");
  BagFile bag;
  bag.n = detail::get_u32(raw, 8);
  bag.d_in = detail::get_u32(raw, 12);
  if (bag.n < 1) throw io_error(path + ": zero-instance bag (byte offset 8)");
  if (bag.d_in < 1) throw io_error(path + ": zero feature dim (byte offset 12)");
  const std::size_t expect = 16 + static_cast<std::size_t>(bag.n) * bag.d_in * 4;
  if (raw.size() != expect)
    throw io_error(path + ": payload size mismatch: expected " + std::to_string(expect) +
                   " bytes, got " + std::to_string(raw.size()));
  bag.values.resize(static_cast<std::size_t>(bag.n) * bag.d_in);
  for (std::size_t i = 0; i < bag.values.size(); ++i) {
    bag.values[i] = std::bit_cast<float>(detail::get_u32(raw, 16 + i * 4));
    if (!std::isfinite(bag.values[i]))
      throw io_error(path + ": non-finite value (byte offset " + std::to_string(16 + i * 4) + ")");
  }
  return bag;
}

// ---------------------------------------------------------------------------
// Manifest (CSV: bag_path,label,fold) and in-memory dataset
// ---------------------------------------------------------------------------

struct ManifestRecord {
  std::string bag_path;  // relative to the manifest's directory
  std::size_t label = 0;
  int fold = 0;
};

struct DatasetManifest {
  std::vector<ManifestRecord> records;
  std::size_t num_classes = 0;  // max label + 1
  std::string base_dir;
};

inline void write_manifest(const std::string& path, const std::vector<ManifestRecord>& records) {
  std::string out = "bag_path,label,fold\n";
  for (const auto& r : records) {
    out += r.bag_path + "," + std::to_string(r.label) + "," + std::to_string(r.fold) + "\n";
  }
  detail::write_file(path, out);
}

inline DatasetManifest read_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw io_error("cannot open manifest " + path);
  DatasetManifest m;
  m.base_dir = std::filesystem::path(path).parent_path().string();
  std::string line;
  if (!std::getline(in, line) || line != "bag_path,label,fold")
    throw io_error(path + ": missing manifest header 'bag_path,label,fold'");
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto c2 = line.rfind(',');
    const auto c1 = c2 == std::string::npos ? std::string::npos : line.rfind(',', c2 - 1);
    if (c1 == std::string::npos || c2 == std::string::npos || c1 == 0)
      throw io_error(path + ":" + std::to_string(lineno) + ": malformed manifest row");
    ManifestRecord r;
    r.bag_path = line.substr(0, c1);
    try {
      r.label = std::stoul(line.substr(c1 + 1, c2 - c1 - 1));
      r.fold = std::stoi(line.substr(c2 + 1));
    } catch (const std::exception&) {
      throw io_error(path + ":" + std::to_string(lineno) + ": malformed label/fold");
    }
    m.num_classes = std::max(m.num_classes, r.label + 1);
    m.records.push_back(std::move(r));
  }
  if (m.records.empty()) throw io_error(path + ": empty manifest");
  return m;
}

/// A fully loaded sample: feature tensor (widened to T), label, fold, and
/// the optional per-instance prototype sidecar.
template <typename T>
struct Bag {
  std::string id;
  Tensor<T> features;  // n x d_in
  std::size_t label = 0;
  int fold = 0;
  std::vector<std::int64_t> node_meta;  // empty when no sidecar exists
};

template <typename T>
Bag<T> load_bag(const std::string& path, std::size_t label, int fold) {
  const BagFile f = read_bag(path);
  std::vector<T> vals(f.values.size());
  for (std::size_t i = 0; i < vals.size(); ++i) vals[i] = static_cast<T>(f.values[i]);
  Bag<T> bag;
  bag.id = std::filesystem::path(path).stem().string();
  bag.features = Tensor<T>::from({f.n, f.d_in}, std::move(vals));
  bag.label = label;
  bag.fold = fold;
  const std::string meta_path = std::filesystem::path(path).replace_extension(".meta.json").string();
  if (std::filesystem::exists(meta_path)) {
    try {
      const auto doc = nlohmann::json::parse(detail::read_file(meta_path));
      bag.node_meta = doc.at("prototype").get<std::vector<std::int64_t>>();
    } catch (const nlohmann::json::exception& ex) {
      throw io_error(meta_path + ": " + ex.what());
    }
  }
  return bag;
}

template <typename T>
std::vector<Bag<T>> load_dataset(const DatasetManifest& m) {
  std::vector<Bag<T>> bags;
  bags.reserve(m.records.size());
  for (const auto& r : m.records) {
    const auto path = (std::filesystem::path(m.base_dir) / r.bag_path).string();
    bags.push_back(load_bag<T>(path, r.label, r.fold));
  }
  return bags;
}

// ---------------------------------------------------------------------------
// Stratified k-fold
// ---------------------------------------------------------------------------

/// Stratified fold assignment: per class, a seeded shuffle followed by
/// balanced dealing (remainders go to the currently smallest folds, ties to
/// the lowest fold index), so per-class fold sizes differ by at most 1 and
/// total sizes stay as even as the class mix allows.
inline std::vector<int> kfold_split(const std::vector<std::size_t>& labels, std::size_t folds,
                                    std::uint64_t seed) {
  if (folds < 2) throw param_error("kfold_split: folds must be >= 2");
  std::map<std::size_t, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(i);
  for (const auto& [label, members] : by_class) {
    if (members.size() < folds)
      throw param_error("kfold_split: class " + std::to_string(label) + " has " +
                        std::to_string(members.size()) + " samples, fewer than " +
                        std::to_string(folds) + " folds");
  }
  std::vector<int> assignment(labels.size(), -1);
  std::vector<std::size_t> fold_totals(folds, 0);
  for (auto& [label, members] : by_class) {
    Rng rng(derive_seed(seed, 0x464f4c44u + label));
    rng.shuffle(members.begin(), members.end());
    const std::size_t base = members.size() / folds;
    std::size_t rem = members.size() % folds;
    std::vector<std::size_t> quota(folds, base);
    // Remainders to the currently smallest folds.
    std::vector<std::size_t> order(folds);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return fold_totals[a] < fold_totals[b]; });
    for (std::size_t r = 0; r < rem; ++r) ++quota[order[r]];
    std::size_t cursor = 0;
    for (std::size_t f = 0; f < folds; ++f) {
      for (std::size_t q = 0; q < quota[f]; ++q) assignment[members[cursor++]] = static_cast<int>(f);
      fold_totals[f] += quota[f];
    }
  }
  return assignment;
}

// ---------------------------------------------------------------------------
// Synthetic co-occurrence generator
//
// Labels depend on instance *interactions*: a bag is positive iff it
// contains at least one instance of prototype A (0) and at least one of
// prototype B (1); negative bags carry the same total count of marker
// instances but all of one kind, so per-instance pooling statistics match
// between classes and only co-occurrence separates them.
// ---------------------------------------------------------------------------

struct GenOptions {
  std::size_t n_bags = 400;
  std::size_t min_instances = 30;
  std::size_t max_instances = 80;
  std::size_t d_in = 384;
  double sigma = 0.25;
  std::uint64_t seed = 1;
};

struct GeneratedBag {
  std::vector<float> features;       // n * d_in
  std::size_t n = 0;
  std::size_t label = 0;             // 1 = co-occurring A and B
  std::vector<std::int64_t> proto;   // per-instance prototype index (0..7)
};

struct GeneratedDataset {
  GenOptions options;
  std::vector<std::vector<float>> prototypes;  // 8 unit-norm directions
  std::vector<GeneratedBag> bags;
};

inline GeneratedDataset gen_cooccurrence_dataset(const GenOptions& opt) {
  if (opt.n_bags == 0 || opt.n_bags % 2 != 0)
    throw param_error("gen: n_bags must be positive and even");
  if (opt.min_instances < 3)
    throw param_error("gen: min_instances must be >= 3 (two markers plus a distractor)");
  if (opt.max_instances < opt.min_instances) throw param_error("gen: instance range is empty");
  if (opt.d_in < 1) throw param_error("gen: d_in must be >= 1");
  if (opt.sigma < 0.0) throw param_error("gen: sigma must be >= 0");

  GeneratedDataset ds;
  ds.options = opt;

  Rng proto_rng(derive_seed(opt.seed, 0x50524f54u));
  ds.prototypes.assign(8, std::vector<float>(opt.d_in));
  for (auto& p : ds.prototypes) {
    double norm2 = 0.0;
    std::vector<double> raw(opt.d_in);
    for (auto& v : raw) {
      v = proto_rng.normal();
      norm2 += v * v;
    }
    const double inv = 1.0 / std::sqrt(norm2);
    for (std::size_t j = 0; j < opt.d_in; ++j) p[j] = static_cast<float>(raw[j] * inv);
  }

  Rng rng(derive_seed(opt.seed, 0x42414753u));
  ds.bags.reserve(opt.n_bags);
  for (std::size_t b = 0; b < opt.n_bags; ++b) {
    GeneratedBag bag;
    bag.label = b % 2;  // alternating keeps classes exactly balanced
    bag.n = opt.min_instances + rng.below(opt.max_instances - opt.min_instances + 1);
    const std::size_t s_max = std::min<std::size_t>(10, bag.n - 1);
    const std::size_t s = 2 + rng.below(s_max - 1);  // markers, in [2, s_max]
    bag.proto.reserve(bag.n);
    if (bag.label == 1) {
      const std::size_t n_a = 1 + rng.below(s - 1);
      for (std::size_t i = 0; i < n_a; ++i) bag.proto.push_back(0);
      for (std::size_t i = n_a; i < s; ++i) bag.proto.push_back(1);
    } else {
      const std::int64_t which = static_cast<std::int64_t>(rng.below(2));
      for (std::size_t i = 0; i < s; ++i) bag.proto.push_back(which);
    }
    for (std::size_t i = s; i < bag.n; ++i)
      bag.proto.push_back(2 + static_cast<std::int64_t>(rng.below(6)));
    rng.shuffle(bag.proto.begin(), bag.proto.end());

    bag.features.resize(bag.n * opt.d_in);
    for (std::size_t i = 0; i < bag.n; ++i) {
      const auto& p = ds.prototypes[static_cast<std::size_t>(bag.proto[i])];
      for (std::size_t j = 0; j < opt.d_in; ++j) {
        bag.features[i * opt.d_in + j] =
            p[j] + static_cast<float>(opt.sigma * rng.normal());
      }
    }
    ds.bags.push_back(std::move(bag));
  }
  return ds;
}

/// Writes bag files, per-bag prototype sidecars and manifest.csv (with fold
/// assignments from kfold_split under the generator seed) into dir.
inline std::string write_dataset(const std::string& dir, const GeneratedDataset& ds,
                                 std::size_t folds) {
  std::filesystem::create_directories(dir);
  std::vector<std::size_t> labels;
  labels.reserve(ds.bags.size());
  for (const auto& b : ds.bags) labels.push_back(b.label);
  const auto fold_of = kfold_split(labels, folds, ds.options.seed);

  std::vector<ManifestRecord> records;
  records.reserve(ds.bags.size());
  char name[32];
  for (std::size_t i = 0; i < ds.bags.size(); ++i) {
    std::snprintf(name, sizeof(name), "bag_%04zu", i);
    const std::string base = (std::filesystem::path(dir) / name).string();
    BagFile f;
    f.n = static_cast<std::uint32_t>(ds.bags[i].n);
    f.d_in = static_cast<std::uint32_t>(ds.options.d_in);
    f.values = ds.bags[i].features;
    write_bag(base + ".wkgb", f);
    nlohmann::json meta;
    meta["prototype"] = ds.bags[i].proto;
    detail::write_file(base + ".meta.json", meta.dump());
    records.push_back({std::string(name) + ".wkgb", ds.bags[i].label, fold_of[i]});
  }
  const std::string manifest = (std::filesystem::path(dir) / "manifest.csv").string();
  write_manifest(manifest, records);
  return manifest;
}

}  // namespace wikg
