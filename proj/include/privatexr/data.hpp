// Copyright 2026 The PrivateXR Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "privatexr/common.hpp"

namespace privatexr {

struct Frame {
  std::int64_t user_id = 0;
  std::int64_t stimulus_id = 0;
  double timestamp_ms = 0.0;
  std::vector<double> features;
  int label = 0;

  bool operator==(const Frame&) const = default;
};

struct NormStat {
  double mean = 0.0;
  double stddev = 0.0;  // 0 marks a constant column

  bool operator==(const NormStat&) const = default;
};

struct Dataset {
  std::vector<std::string> feature_names;
  std::vector<std::string> class_names;
  std::vector<Frame> frames;
  std::optional<std::vector<NormStat>> norm_stats;

  std::size_t size() const { return frames.size(); }
  bool empty() const { return frames.empty(); }
  std::size_t feature_count() const { return feature_names.size(); }
  std::size_t class_count() const { return class_names.size(); }

  std::vector<int> labels() const {
    std::vector<int> out;
    out.reserve(frames.size());
    for (const auto& f : frames) out.push_back(f.label);
    return out;
  }

  std::vector<std::int64_t> users() const {
    std::set<std::int64_t> ids;
    for (const auto& f : frames) ids.insert(f.user_id);
    return {ids.begin(), ids.end()};
  }

  std::vector<std::int64_t> stimuli() const {
    std::set<std::int64_t> ids;
    for (const auto& f : frames) ids.insert(f.stimulus_id);
    return {ids.begin(), ids.end()};
  }

  // Same metadata, only the listed frames (in the given order).
  Dataset subset(const std::vector<std::size_t>& indices) const {
    Dataset out{feature_names, class_names, {}, norm_stats};
    out.frames.reserve(indices.size());
    for (std::size_t i : indices) out.frames.push_back(frames.at(i));
    return out;
  }

  void validate() const {
    const std::size_t d = feature_count();
    const std::size_t k = class_count();
    require(d >= 1, ErrorKind::kSchema, "dataset declares no feature columns");
    require(k >= 1, ErrorKind::kSchema, "dataset declares no classes");
    if (norm_stats) {
      require(norm_stats->size() == d, ErrorKind::kDimension,
              "norm_stats length " + std::to_string(norm_stats->size()) +
                  " does not match feature count " + std::to_string(d));
    }
    for (std::size_t i = 0; i < frames.size(); ++i) {
      const Frame& f = frames[i];
      require(f.features.size() == d, ErrorKind::kDimension,
              "frame " + std::to_string(i) + " has " +
                  std::to_string(f.features.size()) + " features, expected " +
                  std::to_string(d));
      require(f.label >= 0 && static_cast<std::size_t>(f.label) < k,
              ErrorKind::kInvalidArgument,
              "frame " + std::to_string(i) + " label " +
                  std::to_string(f.label) + " outside [0, " +
                  std::to_string(k) + ")");
      require(f.timestamp_ms >= 0.0, ErrorKind::kInvalidArgument,
              "frame " + std::to_string(i) + " has a negative timestamp");
    }
  }

  bool operator==(const Dataset&) const = default;
};

inline std::vector<std::string> default_class_names(std::size_t k) {
  if (k == 4) return {"none", "low", "medium", "high"};
  std::vector<std::string> names;
  for (std::size_t i = 0; i < k; ++i) names.push_back("class_" + std::to_string(i));
  return names;
}

// ---------------------------------------------------------------------------
// CSV

// Shortest decimal text that parses back to the identical double.
inline std::string format_double(double value) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), value);
  if (ec != std::errc()) fail(ErrorKind::kRuntime, "cannot format double");
  return std::string(buf, ptr);
}

namespace detail {

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() &&
         (s.back() == ' ' || s.back() == '\t' || s.back() == '\r'))
    s.remove_suffix(1);
  return s;
}

inline std::vector<std::string_view> split_csv_line(std::string_view line) {
  std::vector<std::string_view> cells;
  std::size_t start = 0;
  while (true) {
    std::size_t comma = line.find(',', start);
    if (comma == std::string_view::npos) {
      cells.push_back(trim(line.substr(start)));
      break;
    }
    cells.push_back(trim(line.substr(start, comma - start)));
    start = comma + 1;
  }
  return cells;
}

inline std::optional<double> parse_double(std::string_view s) {
  double value = 0.0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), value);
  if (ec != std::errc() || ptr != s.data() + s.size() || s.empty()) return std::nullopt;
  return value;
}

inline std::optional<std::int64_t> parse_int(std::string_view s) {
  std::int64_t value = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), value);
  if (ec == std::errc() && ptr == s.data() + s.size() && !s.empty()) return value;
  // Accept integral values written as reals ("3.0").
  if (auto d = parse_double(s); d && std::isfinite(*d) && std::floor(*d) == *d) {
    return static_cast<std::int64_t>(*d);
  }
  return std::nullopt;
}

}  // namespace detail

// Column mapping for CSV ingestion. An empty feature list means "every column
// not claimed by the identity columns, in header order".
struct CsvSchema {
  std::string user_column = "user_id";
  std::string stimulus_column = "stimulus_id";
  std::string timestamp_column = "timestamp_ms";
  std::string label_column = "label";
  std::vector<std::string> feature_columns;
  std::vector<std::string> class_names;
  std::optional<std::vector<NormStat>> norm_stats;

  static CsvSchema from_json(const nlohmann::json& j) {
    CsvSchema s;
    s.user_column = j.value("user_column", s.user_column);
    s.stimulus_column = j.value("stimulus_column", s.stimulus_column);
    s.timestamp_column = j.value("timestamp_column", s.timestamp_column);
    s.label_column = j.value("label_column", s.label_column);
    if (j.contains("feature_columns"))
      s.feature_columns = j.at("feature_columns").get<std::vector<std::string>>();
    if (j.contains("class_names"))
      s.class_names = j.at("class_names").get<std::vector<std::string>>();
    if (j.contains("norm_stats")) {
      std::vector<NormStat> stats;
      for (const auto& e : j.at("norm_stats"))
        stats.push_back({e.at(0).get<double>(), e.at(1).get<double>()});
      s.norm_stats = std::move(stats);
    }
    return s;
  }

  nlohmann::json to_json() const {
    nlohmann::json j{{"user_column", user_column},
                     {"stimulus_column", stimulus_column},
                     {"timestamp_column", timestamp_column},
                     {"label_column", label_column},
                     {"feature_columns", feature_columns},
                     {"class_names", class_names}};
    if (norm_stats) {
      nlohmann::json stats = nlohmann::json::array();
      for (const auto& s : *norm_stats) stats.push_back({s.mean, s.stddev});
      j["norm_stats"] = stats;
    }
    return j;
  }
};

inline std::filesystem::path manifest_path_for(const std::filesystem::path& csv) {
  return std::filesystem::path(csv.string() + ".manifest.json");
}

inline Dataset parse_csv(std::istream& in, const CsvSchema& schema) {
  std::string line;
  if (!std::getline(in, line)) fail(ErrorKind::kFormat, "empty CSV input");
  if (line.size() >= 3 && line.compare(0, 3, "\xEF\xBB\xBF") == 0) line.erase(0, 3);
  std::vector<std::string> header;
  for (auto cell : detail::split_csv_line(line)) header.emplace_back(cell);

  auto column_of = [&](const std::string& name) -> std::size_t {
    auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end())
      fail(ErrorKind::kSchema, "missing required column \"" + name + "\"");
    return static_cast<std::size_t>(it - header.begin());
  };
  const std::size_t user_col = column_of(schema.user_column);
  const std::size_t stim_col = column_of(schema.stimulus_column);
  const std::size_t time_col = column_of(schema.timestamp_column);
  const std::size_t label_col = column_of(schema.label_column);

  std::vector<std::size_t> feature_cols;
  Dataset ds;
  if (schema.feature_columns.empty()) {
    for (std::size_t c = 0; c < header.size(); ++c) {
      if (c == user_col || c == stim_col || c == time_col || c == label_col) continue;
      feature_cols.push_back(c);
      ds.feature_names.push_back(header[c]);
    }
  } else {
    for (const auto& name : schema.feature_columns) {
      feature_cols.push_back(column_of(name));
      ds.feature_names.push_back(name);
    }
  }
  require(!feature_cols.empty(), ErrorKind::kSchema, "no feature columns in header");

  int max_label = -1;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    auto cells = detail::split_csv_line(line);
    if (cells.size() != header.size()) {
      fail(ErrorKind::kFormat, "line " + std::to_string(line_no) + " has " +
                                   std::to_string(cells.size()) +
                                   " columns, header has " +
                                   std::to_string(header.size()));
    }
    auto bad_cell = [&](std::size_t col) {
      fail(ErrorKind::kParse, "line " + std::to_string(line_no) + ", column \"" +
                                  header[col] + "\": cannot parse \"" +
                                  std::string(cells[col]) + "\"");
    };
    Frame f;
    auto user = detail::parse_int(cells[user_col]);
    if (!user) bad_cell(user_col);
    auto stim = detail::parse_int(cells[stim_col]);
    if (!stim) bad_cell(stim_col);
    auto ts = detail::parse_double(cells[time_col]);
    if (!ts) bad_cell(time_col);
    auto label = detail::parse_int(cells[label_col]);
    if (!label || *label < 0) bad_cell(label_col);
    f.user_id = *user;
    f.stimulus_id = *stim;
    f.timestamp_ms = *ts;
    f.label = static_cast<int>(*label);
    f.features.reserve(feature_cols.size());
    for (std::size_t c : feature_cols) {
      auto v = detail::parse_double(cells[c]);
      if (!v) bad_cell(c);
      f.features.push_back(*v);
    }
    max_label = std::max(max_label, f.label);
    ds.frames.push_back(std::move(f));
  }

  if (!schema.class_names.empty()) {
    ds.class_names = schema.class_names;
  } else {
    ds.class_names = default_class_names(static_cast<std::size_t>(std::max(max_label + 1, 2)));
  }
  ds.norm_stats = schema.norm_stats;
  ds.validate();
  return ds;
}

inline Dataset load_csv(const std::filesystem::path& path, const CsvSchema& schema) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::kConfig, "cannot open " + path.string());
  return parse_csv(in, schema);
}

inline CsvSchema load_manifest(const std::filesystem::path& manifest) {
  std::ifstream in(manifest);
  if (!in) fail(ErrorKind::kConfig, "cannot open manifest " + manifest.string());
  try {
    return CsvSchema::from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kConfig, "bad manifest " + manifest.string() + ": " + e.what());
  }
}

// Uses the sidecar manifest "<path>.manifest.json" when present.
inline Dataset load_csv(const std::filesystem::path& path) {
  auto manifest = manifest_path_for(path);
  CsvSchema schema = std::filesystem::exists(manifest) ? load_manifest(manifest) : CsvSchema{};
  return load_csv(path, schema);
}

inline void write_csv(const Dataset& ds, std::ostream& out) {
  out << "user_id,stimulus_id,timestamp_ms,label";
  for (const auto& name : ds.feature_names) out << ',' << name;
  out << '\n';
  for (const auto& f : ds.frames) {
    out << f.user_id << ',' << f.stimulus_id << ',' << format_double(f.timestamp_ms)
        << ',' << f.label;
    for (double v : f.features) out << ',' << format_double(v);
    out << '\n';
  }
}

// Writes the CSV and its sidecar manifest (class names, normalization stats).
inline void write_csv(const Dataset& ds, const std::filesystem::path& path) {
  {
    std::ofstream out(path, std::ios::binary);
    if (!out) fail(ErrorKind::kRuntime, "cannot write " + path.string());
    write_csv(ds, out);
  }
  CsvSchema schema;
  schema.feature_columns = ds.feature_names;
  schema.class_names = ds.class_names;
  schema.norm_stats = ds.norm_stats;
  std::ofstream manifest(manifest_path_for(path), std::ios::binary);
  manifest << schema.to_json().dump(2) << '\n';
}

// ---------------------------------------------------------------------------
// Normalization

inline constexpr double kConstantColumnStddev = 1e-12;

// Population mean and standard deviation per feature column.
inline std::vector<NormStat> compute_norm_stats(const Dataset& ds) {
  const std::size_t d = ds.feature_count();
  const double n = static_cast<double>(ds.size());
  std::vector<NormStat> stats(d);
  for (std::size_t j = 0; j < d; ++j) {
    double sum = 0.0;
    for (const auto& f : ds.frames) sum += f.features[j];
    const double mean = sum / n;
    double ss = 0.0;
    for (const auto& f : ds.frames) {
      const double dev = f.features[j] - mean;
      ss += dev * dev;
    }
    double sd = std::sqrt(ss / n);
    if (sd < kConstantColumnStddev) sd = 0.0;
    stats[j] = {mean, sd};
  }
  return stats;
}

// Applies (x - mean) / stddev with the given stats; constant columns become 0.
inline Dataset apply_normalization(const Dataset& ds, const std::vector<NormStat>& stats) {
  require(stats.size() == ds.feature_count(), ErrorKind::kDimension,
          "normalization stats do not match feature count");
  Dataset out = ds;
  for (auto& f : out.frames) {
    for (std::size_t j = 0; j < stats.size(); ++j) {
      f.features[j] = stats[j].stddev == 0.0
                          ? 0.0
                          : (f.features[j] - stats[j].mean) / stats[j].stddev;
    }
  }
  out.norm_stats = stats;
  return out;
}

inline Dataset normalize(const Dataset& ds) {
  require(ds.size() >= 2, ErrorKind::kInvalidArgument,
          "normalize needs at least 2 frames");
  return apply_normalization(ds, compute_norm_stats(ds));
}

// ---------------------------------------------------------------------------
// Splitting

enum class SplitGranularity { kFrame, kUser };

struct SplitSpec {
  double train_fraction = 0.70;
  std::uint64_t seed = 0;
  SplitGranularity granularity = SplitGranularity::kFrame;
};

struct SplitIndices {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};

namespace detail {

template <typename T>
void seeded_shuffle(std::vector<T>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i - 1);
    std::swap(v[i - 1], v[pick(rng)]);
  }
}

}  // namespace detail

inline SplitIndices split_indices(const Dataset& ds, const SplitSpec& spec) {
  require(!ds.empty(), ErrorKind::kInvalidArgument, "cannot split an empty dataset");
  require(spec.train_fraction > 0.0 && spec.train_fraction < 1.0,
          ErrorKind::kInvalidArgument, "train_fraction must lie in (0, 1)");
  Rng rng = make_rng(spec.seed);
  SplitIndices out;
  if (spec.granularity == SplitGranularity::kFrame) {
    std::vector<std::size_t> order(ds.size());
    std::iota(order.begin(), order.end(), 0);
    detail::seeded_shuffle(order, rng);
    const auto cut = static_cast<std::size_t>(
        std::llround(spec.train_fraction * static_cast<double>(ds.size())));
    out.train.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(cut));
    out.test.assign(order.begin() + static_cast<std::ptrdiff_t>(cut), order.end());
  } else {
    auto users = ds.users();
    require(users.size() >= 2, ErrorKind::kInvalidArgument,
            "user-level split needs at least 2 users");
    detail::seeded_shuffle(users, rng);
    auto cut = static_cast<std::size_t>(
        std::llround(spec.train_fraction * static_cast<double>(users.size())));
    cut = std::clamp<std::size_t>(cut, 1, users.size() - 1);
    std::set<std::int64_t> train_users(users.begin(), users.begin() + static_cast<std::ptrdiff_t>(cut));
    for (std::size_t i = 0; i < ds.size(); ++i) {
      (train_users.count(ds.frames[i].user_id) ? out.train : out.test).push_back(i);
    }
  }
  std::sort(out.train.begin(), out.train.end());
  std::sort(out.test.begin(), out.test.end());
  return out;
}

inline std::pair<Dataset, Dataset> split(const Dataset& ds, const SplitSpec& spec) {
  auto idx = split_indices(ds, spec);
  return {ds.subset(idx.train), ds.subset(idx.test)};
}

// Validation index lists; fold sizes differ by at most one, larger folds first.
inline std::vector<std::vector<std::size_t>> kfold_indices(std::size_t n, std::size_t k,
                                                           std::uint64_t seed) {
  require(k >= 2, ErrorKind::kInvalidArgument, "k-fold needs k >= 2");
  require(k <= n, ErrorKind::kInvalidArgument,
          "k-fold with k=" + std::to_string(k) + " exceeds n=" + std::to_string(n));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng = make_rng(seed);
  detail::seeded_shuffle(order, rng);
  std::vector<std::vector<std::size_t>> folds(k);
  std::size_t pos = 0;
  for (std::size_t f = 0; f < k; ++f) {
    const std::size_t size = n / k + (f < n % k ? 1 : 0);
    folds[f].assign(order.begin() + static_cast<std::ptrdiff_t>(pos),
                    order.begin() + static_cast<std::ptrdiff_t>(pos + size));
    std::sort(folds[f].begin(), folds[f].end());
    pos += size;
  }
  return folds;
}

inline std::vector<std::pair<Dataset, Dataset>> kfold_split(const Dataset& ds, std::size_t k,
                                                            std::uint64_t seed) {
  auto folds = kfold_indices(ds.size(), k, seed);
  std::vector<std::pair<Dataset, Dataset>> out;
  for (std::size_t f = 0; f < k; ++f) {
    std::vector<std::size_t> train;
    for (std::size_t g = 0; g < k; ++g) {
      if (g != f) train.insert(train.end(), folds[g].begin(), folds[g].end());
    }
    std::sort(train.begin(), train.end());
    out.emplace_back(ds.subset(train), ds.subset(folds[f]));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic multi-user generator

struct SynthConfig {
  int users = 20;
  int stimuli = 4;
  int frames_per_user_stimulus = 50;
  int features = 12;
  int classes = 4;
  double user_signature_strength = 1.5;  // gamma
  double label_signal_strength = 1.5;    // beta
  std::uint64_t seed = 0;
  // Features that carry the class direction; empty means all of them.
  std::vector<int> signal_features;
  double frame_period_ms = 100.0;

  static SynthConfig from_json(const nlohmann::json& j) {
    SynthConfig c;
    c.users = j.value("users", c.users);
    c.stimuli = j.value("stimuli", c.stimuli);
    c.frames_per_user_stimulus = j.value("frames_per_user_stimulus", c.frames_per_user_stimulus);
    c.features = j.value("features", c.features);
    c.classes = j.value("classes", c.classes);
    c.user_signature_strength = j.value("user_signature_strength", c.user_signature_strength);
    c.label_signal_strength = j.value("label_signal_strength", c.label_signal_strength);
    c.seed = j.value("seed", c.seed);
    c.signal_features = j.value("signal_features", c.signal_features);
    c.frame_period_ms = j.value("frame_period_ms", c.frame_period_ms);
    return c;
  }

  nlohmann::json to_json() const {
    return {{"users", users},
            {"stimuli", stimuli},
            {"frames_per_user_stimulus", frames_per_user_stimulus},
            {"features", features},
            {"classes", classes},
            {"user_signature_strength", user_signature_strength},
            {"label_signal_strength", label_signal_strength},
            {"seed", seed},
            {"signal_features", signal_features},
            {"frame_period_ms", frame_period_ms}};
  }
};

// frame = class_direction[label] + user_offset[user] + N(0, I).
// Draw order: user offsets, class directions, then per frame (label, noise).
inline Dataset synth_generate(const SynthConfig& cfg) {
  require(cfg.users >= 1 && cfg.stimuli >= 1 && cfg.frames_per_user_stimulus >= 1 &&
              cfg.features >= 1 && cfg.classes >= 1,
          ErrorKind::kConfig, "synthetic dimensions must be positive");
  require(cfg.users >= 2, ErrorKind::kConfig, "synthetic generator needs >= 2 users");
  require(cfg.classes >= 2, ErrorKind::kConfig, "synthetic generator needs >= 2 classes");
  require(cfg.features >= 4, ErrorKind::kConfig, "synthetic generator needs >= 4 features");
  require(cfg.user_signature_strength >= 0.0 && cfg.label_signal_strength >= 0.0,
          ErrorKind::kConfig, "signal strengths must be non-negative");
  const auto d = static_cast<std::size_t>(cfg.features);
  std::vector<bool> carries_signal(d, cfg.signal_features.empty());
  for (int j : cfg.signal_features) {
    require(j >= 0 && static_cast<std::size_t>(j) < d, ErrorKind::kConfig,
            "signal feature index out of range");
    carries_signal[static_cast<std::size_t>(j)] = true;
  }

  Rng rng = make_rng(cfg.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<std::vector<double>> user_offset(static_cast<std::size_t>(cfg.users),
                                               std::vector<double>(d));
  for (auto& off : user_offset)
    for (auto& v : off) v = cfg.user_signature_strength * normal(rng);
  std::vector<std::vector<double>> class_dir(static_cast<std::size_t>(cfg.classes),
                                             std::vector<double>(d));
  for (auto& dir : class_dir)
    for (std::size_t j = 0; j < d; ++j) {
      const double z = normal(rng);
      dir[j] = carries_signal[j] ? cfg.label_signal_strength * z : 0.0;
    }

  Dataset ds;
  for (std::size_t j = 0; j < d; ++j) {
    char name[32];
    std::snprintf(name, sizeof(name), "f%02zu", j);
    ds.feature_names.emplace_back(name);
  }
  ds.class_names = default_class_names(static_cast<std::size_t>(cfg.classes));
  std::uniform_int_distribution<int> pick_label(0, cfg.classes - 1);
  ds.frames.reserve(static_cast<std::size_t>(cfg.users) * cfg.stimuli * cfg.frames_per_user_stimulus);
  for (int u = 0; u < cfg.users; ++u) {
    for (int s = 0; s < cfg.stimuli; ++s) {
      for (int t = 0; t < cfg.frames_per_user_stimulus; ++t) {
        Frame f;
        f.user_id = u;
        f.stimulus_id = s;
        f.timestamp_ms = cfg.frame_period_ms * t;
        f.label = pick_label(rng);
        f.features.resize(d);
        for (std::size_t j = 0; j < d; ++j) {
          f.features[j] = class_dir[static_cast<std::size_t>(f.label)][j] +
                          user_offset[static_cast<std::size_t>(u)][j] + normal(rng);
        }
        ds.frames.push_back(std::move(f));
      }
    }
  }
  return ds;
}

}  // namespace privatexr
