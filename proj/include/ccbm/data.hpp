#pragma once

// Dataset container: manifest.json + embeddings.f32le + labels.jsonl.
//
// manifest.json  {"version": 1, "n", "d", "C", "K", "J", "A",
//                 "embeddings": file, "labels": file,
//                 "splits": {"train": [b, e], "val": [b, e], "test": [b, e]}}   (splits optional)
// embeddings     n*d little-endian binary32, row-major
// labels.jsonl   one object per example: {"task", "concepts", "annotator_counts"}
//                plus an optional "true_entropy" (per concept) from the generator.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "ccbm/credal.hpp"
#include "ccbm/error.hpp"
#include "ccbm/losses.hpp"

namespace ccbm {

inline constexpr int kDatasetVersion = 1;

struct Range {
  std::size_t begin = 0, end = 0;  // [begin, end)
  std::size_t size() const noexcept { return end - begin; }
  bool operator==(const Range&) const = default;
};

struct Splits {
  Range train, val, test;
  bool operator==(const Splits&) const = default;
};

/// 70/15/15 contiguous split.
inline Splits default_splits(std::size_t n) {
  const std::size_t tr = n * 70 / 100;
  const std::size_t va = n * 85 / 100;
  return {{0, tr}, {tr, va}, {va, n}};
}

struct Dataset {
  int n = 0, d = 0, C = 0, K = 0, J = 0, A = 0;
  std::vector<float> embeddings;  // n x d
  std::vector<int> task;          // n
  std::vector<int> concepts;      // n x C, majority labels
  std::vector<int> counts;        // n x C x K
  std::vector<double> p_hat;      // n x C x K, derived
  std::vector<double> entropy;    // n x C, derived H[p_hat]
  std::vector<double> true_entropy;  // n x C when known, else empty
  Splits splits;

  Vector embedding(std::size_t i) const {
    Vector h(d);
    for (int j = 0; j < d; ++j) h[j] = static_cast<double>(embeddings[i * static_cast<std::size_t>(d) + j]);
    return h;
  }

  Sample sample(std::size_t i) const {
    Sample s;
    s.h = embedding(i);
    s.task = task[i];
    s.concepts.assign(concepts.begin() + static_cast<std::ptrdiff_t>(i * C),
                      concepts.begin() + static_cast<std::ptrdiff_t>((i + 1) * C));
    s.entropy.resize(C);
    for (int c = 0; c < C; ++c) s.entropy[c] = entropy[i * C + c];
    return s;
  }

  std::vector<Sample> samples(Range r) const {
    std::vector<Sample> out;
    out.reserve(r.size());
    for (std::size_t i = r.begin; i < r.end; ++i) out.push_back(sample(i));
    return out;
  }

  std::vector<Vector> embeddings_of(Range r) const {
    std::vector<Vector> out;
    out.reserve(r.size());
    for (std::size_t i = r.begin; i < r.end; ++i) out.push_back(embedding(i));
    return out;
  }

  /// Mean annotator entropy over concepts.
  double mean_entropy(std::size_t i) const {
    double s = 0.0;
    for (int c = 0; c < C; ++c) s += entropy[i * C + c];
    return s / C;
  }

  /// Ambiguity used for stratification: ground-truth entropy when known.
  double ambiguity(std::size_t i) const {
    if (true_entropy.empty()) return mean_entropy(i);
    double s = 0.0;
    for (int c = 0; c < C; ++c) s += true_entropy[i * C + c];
    return s / C;
  }

  Range all() const { return {0, static_cast<std::size_t>(n)}; }
};

/// Empirical label distribution of annotator votes and its entropy (nats).
inline std::pair<SimplexVector, double> annotator_stats(std::span<const int> counts) {
  long total = 0;
  for (int c : counts) {
    if (c < 0) fail(Errc::BadBounds, "negative annotator count");
    total += c;
  }
  if (total <= 0) fail(Errc::AllZero, "annotator counts sum to zero");
  Vector p(static_cast<Eigen::Index>(counts.size()));
  for (std::size_t k = 0; k < counts.size(); ++k) p[static_cast<Eigen::Index>(k)] = counts[k] / static_cast<double>(total);
  const double h = entropy_values(p);
  return {SimplexVector::trusted(std::move(p)), h};
}

/// Majority vote with lowest-index tie-break.
inline int majority(std::span<const int> counts) {
  return static_cast<int>(std::max_element(counts.begin(), counts.end()) - counts.begin());
}

namespace detail {

inline std::string example_tag(std::size_t i) { return "example " + std::to_string(i); }

inline int json_int(const nlohmann::json& j, const char* key, const std::string& where) {
  if (!j.contains(key) || !j.at(key).is_number_integer())
    fail(Errc::ManifestParse, where + ": missing or non-integer \"" + key + "\"");
  return j.at(key).get<int>();
}

inline std::string json_str(const nlohmann::json& j, const char* key, const std::string& where) {
  if (!j.contains(key) || !j.at(key).is_string()) fail(Errc::ManifestParse, where + ": missing string \"" + key + "\"");
  return j.at(key).get<std::string>();
}

inline Range parse_range(const nlohmann::json& j, const char* key, std::size_t n) {
  if (!j.contains(key)) fail(Errc::ManifestParse, std::string("splits: missing \"") + key + "\"");
  const auto& r = j.at(key);
  if (!r.is_array() || r.size() != 2 || !r[0].is_number_unsigned() || !r[1].is_number_unsigned())
    fail(Errc::ManifestParse, std::string("splits.") + key + " must be [begin, end]");
  Range out{r[0].get<std::size_t>(), r[1].get<std::size_t>()};
  if (out.begin > out.end || out.end > n)
    fail(Errc::DimMismatch, std::string("splits.") + key + " lies outside [0, n]");
  return out;
}

/// Fills the derived fields and checks every invariant.
inline void finalize(Dataset& ds) {
  const std::size_t n = static_cast<std::size_t>(ds.n);
  if (ds.n <= 0 || ds.d <= 0 || ds.C <= 0 || ds.K <= 0 || ds.J <= 0 || ds.A <= 0)
    fail(Errc::DimMismatch, "dataset dimensions must all be >= 1");
  if (ds.embeddings.size() != n * ds.d) fail(Errc::DimMismatch, "embedding block does not hold n*d values");
  if (ds.task.size() != n || ds.concepts.size() != n * ds.C || ds.counts.size() != n * ds.C * ds.K)
    fail(Errc::DimMismatch, "label arrays do not match n, C, K");
  if (!ds.true_entropy.empty() && ds.true_entropy.size() != n * ds.C)
    fail(Errc::DimMismatch, "true_entropy must hold one value per concept");
  ds.p_hat.assign(n * ds.C * ds.K, 0.0);
  ds.entropy.assign(n * ds.C, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (int j = 0; j < ds.d; ++j)
      if (!std::isfinite(ds.embeddings[i * ds.d + j])) fail(Errc::Corrupt, example_tag(i) + ": non-finite embedding");
    if (ds.task[i] < 0 || ds.task[i] >= ds.J)
      fail(Errc::LabelMismatch, example_tag(i) + ": task label outside [0, J)");
    for (int c = 0; c < ds.C; ++c) {
      const std::span<const int> row(ds.counts.data() + (i * ds.C + c) * ds.K, static_cast<std::size_t>(ds.K));
      long sum = 0;
      for (int v : row) {
        if (v < 0) fail(Errc::CountSumMismatch, example_tag(i) + ": negative count");
        sum += v;
      }
      if (sum != ds.A)
        fail(Errc::CountSumMismatch, example_tag(i) + " concept " + std::to_string(c) + ": counts sum to " +
                                         std::to_string(sum) + ", expected " + std::to_string(ds.A));
      if (ds.concepts[i * ds.C + c] != majority(row))
        fail(Errc::LabelMismatch, example_tag(i) + " concept " + std::to_string(c) +
                                      ": label is not the annotator majority");
      const auto [p, h] = annotator_stats(row);
      for (int k = 0; k < ds.K; ++k) ds.p_hat[(i * ds.C + c) * ds.K + k] = p[k];
      ds.entropy[i * ds.C + c] = h;
    }
  }
  const auto check = [&](const Range& r) {
    if (r.begin > r.end || r.end > n) fail(Errc::DimMismatch, "split range outside [0, n]");
  };
  check(ds.splits.train);
  check(ds.splits.val);
  check(ds.splits.test);
}

}  // namespace detail

/// Reads and fully validates a dataset. Paths in the manifest are relative to it.
inline Dataset load_dataset(const std::filesystem::path& manifest_path) {
  namespace fs = std::filesystem;
  std::ifstream mf(manifest_path);
  if (!mf) fail(Errc::Io, "cannot open manifest " + manifest_path.string());
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(mf);
  } catch (const nlohmann::json::exception& e) {
    fail(Errc::ManifestParse, manifest_path.string() + ": " + e.what());
  }
  if (!m.is_object()) fail(Errc::ManifestParse, "manifest must be a JSON object");
  const std::string where = manifest_path.filename().string();
  if (detail::json_int(m, "version", where) != kDatasetVersion)
    fail(Errc::VersionMismatch, "unsupported dataset version " + m.at("version").dump());

  Dataset ds;
  ds.n = detail::json_int(m, "n", where);
  ds.d = detail::json_int(m, "d", where);
  ds.C = detail::json_int(m, "C", where);
  ds.K = detail::json_int(m, "K", where);
  ds.J = detail::json_int(m, "J", where);
  ds.A = detail::json_int(m, "A", where);
  if (ds.n <= 0 || ds.d <= 0 || ds.C <= 0 || ds.K <= 0 || ds.J <= 0 || ds.A <= 0)
    fail(Errc::ManifestParse, "n, d, C, K, J, A must all be >= 1");
  const std::size_t n = static_cast<std::size_t>(ds.n);
  const fs::path base = manifest_path.parent_path();

  // embeddings
  const fs::path ep = base / detail::json_str(m, "embeddings", where);
  std::ifstream ef(ep, std::ios::binary);
  if (!ef) fail(Errc::Io, "cannot open " + ep.string());
  const std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(ef)), std::istreambuf_iterator<char>());
  const std::size_t want = n * static_cast<std::size_t>(ds.d) * 4;
  if (bytes.size() < want)
    fail(Errc::TruncatedEmbeddingFile, ep.filename().string() + " has " + std::to_string(bytes.size()) +
                                           " bytes, expected " + std::to_string(want));
  if (bytes.size() > want)
    fail(Errc::DimMismatch, ep.filename().string() + " has " + std::to_string(bytes.size()) + " bytes, expected " +
                                std::to_string(want));
  ds.embeddings.resize(n * ds.d);
  for (std::size_t i = 0; i < ds.embeddings.size(); ++i) {
    const std::uint32_t u = static_cast<std::uint32_t>(bytes[4 * i]) | static_cast<std::uint32_t>(bytes[4 * i + 1]) << 8 |
                            static_cast<std::uint32_t>(bytes[4 * i + 2]) << 16 |
                            static_cast<std::uint32_t>(bytes[4 * i + 3]) << 24;
    ds.embeddings[i] = std::bit_cast<float>(u);
  }

  // labels
  const fs::path lp = base / detail::json_str(m, "labels", where);
  std::ifstream lf(lp);
  if (!lf) fail(Errc::Io, "cannot open " + lp.string());
  std::string line;
  std::size_t i = 0, lineno = 0;
  bool any_truth = false;
  while (std::getline(lf, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    if (i >= n) fail(Errc::DimMismatch, lp.filename().string() + " has more than n=" + std::to_string(n) + " records");
    nlohmann::json rec;
    try {
      rec = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      fail(Errc::ManifestParse, lp.filename().string() + " line " + std::to_string(lineno) + ": " + e.what());
    }
    const std::string tag = detail::example_tag(i);
    ds.task.push_back(detail::json_int(rec, "task", tag));
    const auto& cs = rec.contains("concepts") ? rec.at("concepts") : nlohmann::json();
    const auto& ac = rec.contains("annotator_counts") ? rec.at("annotator_counts") : nlohmann::json();
    if (!cs.is_array() || !ac.is_array()) fail(Errc::ManifestParse, tag + ": missing concepts or annotator_counts");
    if (static_cast<int>(cs.size()) != ds.C || static_cast<int>(ac.size()) != ds.C)
      fail(Errc::DimMismatch, tag + ": expected " + std::to_string(ds.C) + " concepts");
    for (int c = 0; c < ds.C; ++c) {
      if (!cs[c].is_number_integer()) fail(Errc::ManifestParse, tag + ": concept labels must be integers");
      ds.concepts.push_back(cs[c].get<int>());
      if (!ac[c].is_array() || static_cast<int>(ac[c].size()) != ds.K)
        fail(Errc::DimMismatch, tag + ": expected " + std::to_string(ds.K) + " counts per concept");
      for (int k = 0; k < ds.K; ++k) {
        if (!ac[c][k].is_number_integer()) fail(Errc::ManifestParse, tag + ": counts must be integers");
        ds.counts.push_back(ac[c][k].get<int>());
      }
    }
    if (rec.contains("true_entropy")) {
      const auto& te = rec.at("true_entropy");
      if (!te.is_array() || static_cast<int>(te.size()) != ds.C)
        fail(Errc::DimMismatch, tag + ": true_entropy needs one value per concept");
      if (i > 0 && !any_truth) fail(Errc::ManifestParse, tag + ": true_entropy present on some records only");
      any_truth = true;
      for (const auto& v : te) ds.true_entropy.push_back(v.get<double>());
    } else if (any_truth) {
      fail(Errc::ManifestParse, tag + ": true_entropy present on some records only");
    }
    ++i;
  }
  if (i != n) fail(Errc::DimMismatch, lp.filename().string() + " has " + std::to_string(i) + " records, expected " + std::to_string(n));

  if (m.contains("splits")) {
    const auto& s = m.at("splits");
    if (!s.is_object()) fail(Errc::ManifestParse, "splits must be an object");
    ds.splits = {detail::parse_range(s, "train", n), detail::parse_range(s, "val", n), detail::parse_range(s, "test", n)};
  } else {
    ds.splits = default_splits(n);
  }
  detail::finalize(ds);
  return ds;
}

/// Writes the three container files into `dir` (created if needed); returns the manifest path.
inline std::filesystem::path write_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) fail(Errc::Io, "cannot create " + dir.string() + ": " + ec.message());

  {
    std::ofstream ef(dir / "embeddings.f32le", std::ios::binary | std::ios::trunc);
    if (!ef) fail(Errc::Io, "cannot write embeddings in " + dir.string());
    std::vector<char> buf(ds.embeddings.size() * 4);
    for (std::size_t i = 0; i < ds.embeddings.size(); ++i) {
      const auto u = std::bit_cast<std::uint32_t>(ds.embeddings[i]);
      for (int b = 0; b < 4; ++b) buf[4 * i + b] = static_cast<char>((u >> (8 * b)) & 0xFFu);
    }
    ef.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  }
  {
    std::ofstream lf(dir / "labels.jsonl", std::ios::trunc);
    if (!lf) fail(Errc::Io, "cannot write labels in " + dir.string());
    for (int i = 0; i < ds.n; ++i) {
      nlohmann::ordered_json rec;
      rec["task"] = ds.task[i];
      rec["concepts"] = std::vector<int>(ds.concepts.begin() + i * ds.C, ds.concepts.begin() + (i + 1) * ds.C);
      auto counts = nlohmann::ordered_json::array();
      for (int c = 0; c < ds.C; ++c)
        counts.push_back(std::vector<int>(ds.counts.begin() + (i * ds.C + c) * ds.K,
                                          ds.counts.begin() + (i * ds.C + c + 1) * ds.K));
      rec["annotator_counts"] = counts;
      if (!ds.true_entropy.empty())
        rec["true_entropy"] =
            std::vector<double>(ds.true_entropy.begin() + i * ds.C, ds.true_entropy.begin() + (i + 1) * ds.C);
      lf << rec.dump() << '\n';
    }
  }
  nlohmann::ordered_json m;
  m["version"] = kDatasetVersion;
  m["n"] = ds.n;
  m["d"] = ds.d;
  m["C"] = ds.C;
  m["K"] = ds.K;
  m["J"] = ds.J;
  m["A"] = ds.A;
  m["embeddings"] = "embeddings.f32le";
  m["labels"] = "labels.jsonl";
  m["splits"] = {{"train", {ds.splits.train.begin, ds.splits.train.end}},
                 {"val", {ds.splits.val.begin, ds.splits.val.end}},
                 {"test", {ds.splits.test.begin, ds.splits.test.end}}};
  const fs::path mp = dir / "manifest.json";
  std::ofstream mf(mp, std::ios::trunc);
  if (!mf) fail(Errc::Io, "cannot write " + mp.string());
  mf << m.dump(2) << '\n';
  return mp;
}

}  // namespace ccbm
