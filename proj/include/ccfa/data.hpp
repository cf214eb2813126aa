// Labelled feature sets, synthetic generation on the unit sphere, task
// streams and the feature-file formats.
#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <limits>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "ccfa/model.hpp"
#include "ccfa/numerics.hpp"

namespace ccfa {

struct Dataset {
  Matrix x;
  Labels y;
  std::size_t num_classes = 0;

  std::size_t size() const noexcept { return y.size(); }
  std::size_t dim() const noexcept { return x.cols(); }

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

struct SyntheticSpec {
  std::size_t dim = 16;
  std::size_t classes = 10;
  std::size_t train_per_class = 200;
  std::size_t test_per_class = 40;
  double kappa = 8.0;  // samples = normalize(prototype + N(0, I / kappa))
  std::uint64_t seed = 0;

  void validate() const {
    if (classes < 2) throw std::invalid_argument("synthetic data needs at least 2 classes");
    if (dim < 1) throw std::invalid_argument("synthetic data needs dim >= 1");
    if (!(kappa > 0.0)) throw std::invalid_argument("synthetic data needs kappa > 0");
  }
};

struct SyntheticData {
  Dataset train;
  Dataset test;
  Matrix prototypes;  // classes x dim, unit rows
};

/// Random unit prototypes, then per class samples drawn around each one and
/// projected back onto the sphere. Train and test draws use separate streams.
inline SyntheticData generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  Rng root(spec.seed);
  Rng proto_rng = root.derive("prototypes");
  Matrix protos(spec.classes, spec.dim);
  for (std::size_t q = 0; q < spec.classes; ++q) {
    for (;;) {
      Matrix r = proto_rng.normal_matrix(1, spec.dim);
      if (norm2(r.row(0)) < 1e-6) continue;
      r = row_normalize(r);
      bool distinct = true;
      for (std::size_t p = 0; p < q && distinct; ++p)
        distinct = max_abs_diff(r, protos.gather_rows(std::vector<std::size_t>{p})) > 1e-9;
      if (!distinct) continue;
      std::copy(r.data().begin(), r.data().end(), protos.row(q).begin());
      break;
    }
  }
  const double sd = 1.0 / std::sqrt(spec.kappa);
  auto draw = [&](Rng rng, std::size_t per_class) {
    Dataset ds{Matrix(spec.classes * per_class, spec.dim), Labels(spec.classes * per_class),
               spec.classes};
    std::size_t r = 0;
    for (std::size_t q = 0; q < spec.classes; ++q) {
      for (std::size_t s = 0; s < per_class; ++s, ++r) {
        auto row = ds.x.row(r);
        for (std::size_t j = 0; j < spec.dim; ++j) row[j] = protos(q, j) + sd * rng.normal();
        const double n = norm2(row);
        if (n >= kNormEps)
          for (double& v : row) v /= n;
        ds.y[r] = static_cast<Label>(q);
      }
    }
    return ds;
  };
  return {draw(root.derive("train"), spec.train_per_class),
          draw(root.derive("test"), spec.test_per_class), protos};
}

// ---------------------------------------------------------------------------
// Task streams

struct Task {
  Labels classes;                  // stream labels, contiguous
  std::vector<std::size_t> train;  // row indices into TaskStream::train
  std::vector<std::size_t> test;   // row indices into TaskStream::test
};

/// Train/test sets relabelled into class-arrival order and partitioned into
/// tasks with pairwise disjoint label sets.
struct TaskStream {
  Dataset train;
  Dataset test;
  std::vector<Task> tasks;
  Labels class_order;  // class_order[stream label] = original label

  std::size_t dim() const noexcept { return train.dim(); }
  std::size_t total_classes() const noexcept { return class_order.size(); }
  std::size_t num_tasks() const noexcept { return tasks.size(); }

  /// Classes seen up to and including task `k` (0-based).
  std::size_t classes_through(std::size_t k) const {
    std::size_t n = 0;
    for (std::size_t t = 0; t <= k && t < tasks.size(); ++t) n += tasks[t].classes.size();
    return n;
  }

  /// Test rows of tasks 0..k.
  std::vector<std::size_t> cumulative_test(std::size_t k) const {
    std::vector<std::size_t> out;
    for (std::size_t t = 0; t <= k && t < tasks.size(); ++t)
      out.insert(out.end(), tasks[t].test.begin(), tasks[t].test.end());
    return out;
  }

  void validate() const {
    std::set<Label> seen;
    for (const auto& t : tasks) {
      for (Label c : t.classes)
        if (!seen.insert(c).second)
          throw std::invalid_argument("task stream: class " + std::to_string(c) +
                                      " appears in more than one task");
      const std::set<Label> own(t.classes.begin(), t.classes.end());
      for (std::size_t i : t.train)
        if (!own.count(train.y.at(i)))
          throw std::invalid_argument("task stream: train sample outside its task's classes");
      for (std::size_t i : t.test)
        if (!own.count(test.y.at(i)))
          throw std::invalid_argument("task stream: test sample outside its task's classes");
    }
  }
};

/// Random permutation of [0, n).
inline Labels class_order_from_seed(std::size_t n, std::uint64_t seed) {
  Labels order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = static_cast<Label>(i);
  Rng rng = Rng(seed).derive("class-order");
  rng.shuffle(order);
  return order;
}

/// Splits into one task of `initial` classes followed by tasks of
/// `increment` classes, in the order given by `class_order` (original labels).
inline TaskStream split_stream(const Dataset& train, const Dataset& test, std::size_t initial,
                               std::size_t increment, const Labels& class_order) {
  const std::size_t total = train.num_classes;
  if (test.num_classes != total) throw std::invalid_argument("split_stream: train/test class counts differ");
  if (train.dim() != test.dim() && test.size() > 0)
    throw DimensionError("split_stream: train/test feature dims differ");
  if (class_order.size() != total) throw std::invalid_argument("split_stream: class order must list every class");
  {
    std::vector<bool> hit(total, false);
    for (Label c : class_order) {
      if (c < 0 || static_cast<std::size_t>(c) >= total || hit[static_cast<std::size_t>(c)])
        throw std::invalid_argument("split_stream: class order is not a permutation");
      hit[static_cast<std::size_t>(c)] = true;
    }
  }
  if (initial == 0 || initial > total || (initial < total && (increment == 0 || (total - initial) % increment != 0))) {
    throw std::invalid_argument("split_stream: initial " + std::to_string(initial) + " + k * " +
                                std::to_string(increment) + " does not tile " +
                                std::to_string(total) + " classes");
  }
  std::vector<Label> to_stream(total);
  for (std::size_t s = 0; s < total; ++s) to_stream[static_cast<std::size_t>(class_order[s])] = static_cast<Label>(s);

  TaskStream st;
  st.class_order = class_order;
  st.train = train;
  st.test = test;
  for (Label& y : st.train.y) y = to_stream.at(static_cast<std::size_t>(y));
  for (Label& y : st.test.y) y = to_stream.at(static_cast<std::size_t>(y));

  std::vector<std::size_t> task_of(total);
  std::size_t start = 0;
  while (start < total) {
    const std::size_t n = st.tasks.empty() ? initial : increment;
    Task t;
    for (std::size_t s = start; s < start + n; ++s) {
      t.classes.push_back(static_cast<Label>(s));
      task_of[s] = st.tasks.size();
    }
    st.tasks.push_back(std::move(t));
    start += n;
  }
  for (std::size_t i = 0; i < st.train.size(); ++i)
    st.tasks[task_of[static_cast<std::size_t>(st.train.y[i])]].train.push_back(i);
  for (std::size_t i = 0; i < st.test.size(); ++i)
    st.tasks[task_of[static_cast<std::size_t>(st.test.y[i])]].test.push_back(i);
  st.validate();
  return st;
}

// ---------------------------------------------------------------------------
// Feature files
//
// Binary, little-endian:
//   "CCFA" | version u16 | d u32 | n u64 | c u32 | n x (label u32, d x f32)
// CSV: header "label,f0,...,f{d-1}" then one sample per line.

class FeatureFileError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class BadMagicError : public FeatureFileError {
 public:
  using FeatureFileError::FeatureFileError;
};
class VersionError : public FeatureFileError {
 public:
  using FeatureFileError::FeatureFileError;
};
class TruncatedError : public FeatureFileError {
 public:
  TruncatedError(const std::string& what, std::size_t offset)
      : FeatureFileError(what + " (truncated at byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};
class LabelRangeError : public FeatureFileError {
 public:
  using FeatureFileError::FeatureFileError;
};

inline constexpr std::uint16_t kFeatureFileVersion = 1;

namespace detail {
template <class T>
void put_le(std::string& buf, T v) {
  for (std::size_t i = 0; i < sizeof(T); ++i)
    buf.push_back(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xFF));
}

template <class T>
T get_le(const std::string& buf, std::size_t& pos, const char* field) {
  if (pos + sizeof(T) > buf.size()) throw TruncatedError(std::string("reading ") + field, buf.size());
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i)
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
  pos += sizeof(T);
  return static_cast<T>(v);
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FeatureFileError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}
}  // namespace detail

inline std::string encode_feature_binary(const Dataset& ds) {
  std::string buf = "CCFA";
  detail::put_le<std::uint16_t>(buf, kFeatureFileVersion);
  detail::put_le<std::uint32_t>(buf, static_cast<std::uint32_t>(ds.dim()));
  detail::put_le<std::uint64_t>(buf, ds.size());
  detail::put_le<std::uint32_t>(buf, static_cast<std::uint32_t>(ds.num_classes));
  for (std::size_t i = 0; i < ds.size(); ++i) {
    detail::put_le<std::uint32_t>(buf, static_cast<std::uint32_t>(ds.y[i]));
    for (double v : ds.x.row(i)) {
      const float f = static_cast<float>(v);
      std::uint32_t bits;
      std::memcpy(&bits, &f, sizeof bits);
      detail::put_le<std::uint32_t>(buf, bits);
    }
  }
  return buf;
}

inline Dataset decode_feature_binary(const std::string& buf) {
  if (buf.size() < 4) throw TruncatedError("reading magic", buf.size());
  if (buf.compare(0, 4, "CCFA") != 0) throw BadMagicError("feature file: bad magic, expected \"CCFA\"");
  std::size_t pos = 4;
  const auto version = detail::get_le<std::uint16_t>(buf, pos, "version");
  if (version != kFeatureFileVersion)
    throw VersionError("feature file: unsupported version " + std::to_string(version));
  const auto d = detail::get_le<std::uint32_t>(buf, pos, "dimension");
  const auto n = detail::get_le<std::uint64_t>(buf, pos, "sample count");
  const auto c = detail::get_le<std::uint32_t>(buf, pos, "class count");
  const std::size_t record = 4 + 4 * static_cast<std::size_t>(d);
  const std::size_t need = pos + record * n;
  if (n > (std::numeric_limits<std::size_t>::max() - pos) / record || buf.size() < need)
    throw TruncatedError("feature file: expected " + std::to_string(need) + " bytes", buf.size());
  Dataset ds{Matrix(n, d), Labels(n), c};
  for (std::size_t i = 0; i < n; ++i) {
    const auto label = detail::get_le<std::uint32_t>(buf, pos, "label");
    if (label >= c)
      throw LabelRangeError("feature file: label " + std::to_string(label) + " of sample " +
                            std::to_string(i) + " outside declared " + std::to_string(c) + " classes");
    ds.y[i] = static_cast<Label>(label);
    for (std::size_t j = 0; j < d; ++j) {
      const auto bits = detail::get_le<std::uint32_t>(buf, pos, "feature");
      float f;
      std::memcpy(&f, &bits, sizeof f);
      ds.x(i, j) = static_cast<double>(f);
    }
  }
  if (pos != buf.size()) throw FeatureFileError("feature file: trailing bytes after payload");
  return ds;
}

/// CSV rendering with values rounded to f32, matching the binary encoding.
inline std::string encode_feature_csv(const Dataset& ds) {
  std::ostringstream os;
  os << "label";
  for (std::size_t j = 0; j < ds.dim(); ++j) os << ",f" << j;
  os << '\n' << std::setprecision(9);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    os << ds.y[i];
    for (double v : ds.x.row(i)) os << ',' << static_cast<float>(v);
    os << '\n';
  }
  return os.str();
}

/// Parses the CSV form. The class count is not stored, so it is taken as
/// max(label) + 1 unless `num_classes` is given.
inline Dataset decode_feature_csv(const std::string& text, std::size_t num_classes = 0) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line.rfind("label", 0) != 0)
    throw BadMagicError("feature csv: missing 'label,f0,...' header");
  const std::size_t d = static_cast<std::size_t>(std::count(line.begin(), line.end(), ','));
  std::vector<double> vals;
  Labels labels;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string cell;
    std::vector<std::string> cells;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (cells.size() != d + 1)
      throw FeatureFileError("feature csv: line " + std::to_string(lineno) + " has " +
                             std::to_string(cells.size()) + " fields, expected " + std::to_string(d + 1));
    try {
      const long label = std::stol(cells[0]);
      if (label < 0) throw LabelRangeError("feature csv: negative label on line " + std::to_string(lineno));
      labels.push_back(static_cast<Label>(label));
      for (std::size_t j = 1; j <= d; ++j) vals.push_back(static_cast<double>(std::stof(cells[j])));
    } catch (const std::logic_error&) {
      throw FeatureFileError("feature csv: unparsable value on line " + std::to_string(lineno));
    }
  }
  std::size_t c = num_classes;
  if (c == 0)
    for (Label y : labels) c = std::max(c, static_cast<std::size_t>(y) + 1);
  for (Label y : labels)
    if (static_cast<std::size_t>(y) >= c)
      throw LabelRangeError("feature csv: label " + std::to_string(y) + " outside declared " +
                            std::to_string(c) + " classes");
  const std::size_t n = labels.size();
  return Dataset{Matrix(n, d, std::move(vals)), std::move(labels), c};
}

inline void write_feature_file(const std::string& path, const Dataset& ds, bool csv = false) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FeatureFileError("cannot write " + path);
  out << (csv ? encode_feature_csv(ds) : encode_feature_binary(ds));
}

/// Loads binary or CSV by content: files starting with "CCFA" are binary.
inline Dataset load_feature_file(const std::string& path) {
  const std::string buf = detail::read_file(path);
  if (buf.rfind("label", 0) == 0) return decode_feature_csv(buf);
  return decode_feature_binary(buf);
}

}  // namespace ccfa
