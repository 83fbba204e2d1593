#include "nbnlab/data.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>
#include <stdexcept>

namespace nbnlab {
namespace {

constexpr std::array<char, 4> kBinaryMagic{'L', 'T', 'D', '1'};

std::runtime_error io_error(const std::filesystem::path& path, const std::string& what) {
  return std::runtime_error(path.string() + ": " + what);
}

void put_u32(std::ostream& os, std::uint32_t v) {
  const std::array<char, 4> b{static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                              static_cast<char>((v >> 16) & 0xff),
                              static_cast<char>((v >> 24) & 0xff)};
  os.write(b.data(), 4);
}

void put_f64(std::ostream& os, double d) {
  std::uint64_t v;
  std::memcpy(&v, &d, sizeof v);
  for (int i = 0; i < 8; ++i) os.put(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint32_t get_u32(std::istream& is, const std::filesystem::path& path) {
  std::array<unsigned char, 4> b{};
  if (!is.read(reinterpret_cast<char*>(b.data()), 4)) throw io_error(path, "truncated file");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

double get_f64(std::istream& is, const std::filesystem::path& path) {
  std::array<unsigned char, 8> b{};
  if (!is.read(reinterpret_cast<char*>(b.data()), 8)) throw io_error(path, "truncated file");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  double d;
  std::memcpy(&d, &v, sizeof d);
  return d;
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

bool parse_double(const std::string& field, double& out) {
  const char* first = field.data();
  const char* last = field.data() + field.size();
  auto [ptr, ec] = std::from_chars(first, last, out);
  return ec == std::errc() && ptr == last;
}

std::vector<std::string> split_commas(const std::string& line) {
  std::vector<std::string> fields;
  std::string field;
  std::istringstream ss(line);
  while (std::getline(ss, field, ',')) fields.push_back(trim(field));
  if (!line.empty() && line.back() == ',') fields.emplace_back();
  return fields;
}

Dataset read_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw io_error(path, "cannot open file");
  Dataset data;
  std::string line;
  std::size_t line_no = 0;
  bool first_content = true;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const auto fields = split_commas(line);
    std::vector<double> values(fields.size());
    bool numeric = true;
    for (std::size_t i = 0; i < fields.size(); ++i)
      numeric = numeric && parse_double(fields[i], values[i]);
    if (first_content) {
      first_content = false;
      if (!numeric) continue;  // header row
    }
    if (!numeric)
      throw io_error(path, "line " + std::to_string(line_no) + ": non-numeric field");
    if (fields.size() < 2)
      throw io_error(path, "line " + std::to_string(line_no) +
                               ": need at least one feature and a label");
    if (data.num_features == 0) data.num_features = fields.size() - 1;
    if (fields.size() - 1 != data.num_features)
      throw io_error(path, "line " + std::to_string(line_no) + ": expected " +
                               std::to_string(data.num_features + 1) + " fields, got " +
                               std::to_string(fields.size()));
    const double label = values.back();
    if (label < 0.0 || label != std::floor(label))
      throw io_error(path, "line " + std::to_string(line_no) +
                               ": label must be a non-negative integer");
    data.features.insert(data.features.end(), values.begin(), values.end() - 1);
    data.labels.push_back(static_cast<std::size_t>(label));
  }
  if (data.labels.empty()) throw io_error(path, "no samples");
  return data;
}

Dataset read_binary(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error(path, "cannot open file");
  std::array<char, 4> magic{};
  if (!in.read(magic.data(), 4)) throw io_error(path, "empty or truncated file");
  if (magic != kBinaryMagic) throw io_error(path, "bad magic (expected LTD1)");
  Dataset data;
  const std::uint32_t count = get_u32(in, path);
  data.num_features = get_u32(in, path);
  if (count == 0) throw io_error(path, "no samples");
  if (data.num_features == 0) throw io_error(path, "zero feature dimension");
  data.features.resize(static_cast<std::size_t>(count) * data.num_features);
  for (double& v : data.features) v = get_f64(in, path);
  data.labels.resize(count);
  for (std::size_t& l : data.labels) l = get_u32(in, path);
  return data;
}

}  // namespace

std::string to_string(CountProfile p) { return p == CountProfile::exp ? "exp" : "step"; }

CountProfile count_profile_from_string(const std::string& text) {
  if (text == "exp") return CountProfile::exp;
  if (text == "step") return CountProfile::step;
  throw std::invalid_argument("unknown count profile '" + text + "' (expected exp or step)");
}

void LongTailSpec::validate() const {
  if (num_classes == 0) throw std::invalid_argument("data.num_classes must be positive");
  if (!(imbalance_factor >= 1.0))
    throw std::invalid_argument("data.imbalance_factor must be >= 1");
  if (num_classes < 2 && imbalance_factor > 1.0)
    throw std::invalid_argument(
        "data.num_classes must be at least 2 when data.imbalance_factor > 1");
  if (n_max == 0) throw std::invalid_argument("data.n_max must be positive");
  if (std::llround(static_cast<double>(n_max) / imbalance_factor) < 1)
    throw std::invalid_argument("data.n_max / data.imbalance_factor rounds to zero samples");
  if (input_dim == 0) throw std::invalid_argument("data.input_dim must be positive");
  if (!(separation > 0.0)) throw std::invalid_argument("data.separation must be positive");
  if (test_per_class == 0) throw std::invalid_argument("data.test_per_class must be positive");
}

std::vector<std::size_t> class_counts(const LongTailSpec& spec) {
  spec.validate();
  const std::size_t k = spec.num_classes;
  std::vector<std::size_t> counts(k, spec.n_max);
  if (k == 1) return counts;
  const double n_min = static_cast<double>(spec.n_max) / spec.imbalance_factor;
  for (std::size_t i = 0; i < k; ++i) {
    if (spec.profile == CountProfile::exp) {
      const double e = -static_cast<double>(i) / static_cast<double>(k - 1);
      counts[i] = static_cast<std::size_t>(
          std::llround(static_cast<double>(spec.n_max) * std::pow(spec.imbalance_factor, e)));
    } else {
      counts[i] = i < (k + 1) / 2 ? spec.n_max : static_cast<std::size_t>(std::llround(n_min));
    }
  }
  return counts;
}

std::vector<std::size_t> Dataset::per_class_counts() const {
  std::vector<std::size_t> counts(num_classes, 0);
  for (std::size_t l : labels) ++counts.at(l);
  return counts;
}

Tensor Dataset::rows(std::span<const std::size_t> indices) const {
  std::vector<double> out(indices.size() * num_features);
  for (std::size_t r = 0; r < indices.size(); ++r)
    std::copy_n(features.begin() + static_cast<std::ptrdiff_t>(indices[r] * num_features),
                num_features, out.begin() + static_cast<std::ptrdiff_t>(r * num_features));
  return Tensor::from({indices.size(), num_features}, std::move(out));
}

Tensor Dataset::all_rows() const {
  return Tensor::from({size(), num_features}, features);
}

std::vector<std::size_t> Dataset::labels_at(std::span<const std::size_t> indices) const {
  std::vector<std::size_t> out(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) out[i] = labels[indices[i]];
  return out;
}

SplitDataset synthesize(const LongTailSpec& spec) {
  const std::vector<std::size_t> counts = class_counts(spec);
  const std::size_t k = spec.num_classes, d = spec.input_dim;
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> unit(0.0, 1.0);

  std::vector<double> means(k * d);
  for (double& m : means) m = spec.separation * unit(rng);

  auto draw = [&](Dataset& out, std::size_t cls, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < d; ++j) out.features.push_back(means[cls * d + j] + unit(rng));
      out.labels.push_back(cls);
    }
  };
  SplitDataset split;
  for (Dataset* part : {&split.train, &split.test}) {
    part->num_features = d;
    part->num_classes = k;
  }
  for (std::size_t c = 0; c < k; ++c) draw(split.train, c, counts[c]);
  for (std::size_t c = 0; c < k; ++c) draw(split.test, c, spec.test_per_class);
  return split;
}

std::string to_string(Group g) {
  switch (g) {
    case Group::tail: return "tail";
    case Group::medium: return "medium";
    case Group::head: return "head";
  }
  return "medium";
}

void GroupThresholds::validate() const {
  if (!(tail_max < head_min))
    throw std::invalid_argument("group thresholds need tail_max < head_min");
}

GroupThresholds GroupThresholds::scaled_for(std::size_t n_max) {
  const double s = static_cast<double>(n_max) / 1280.0;
  return {20.0 * s, 100.0 * s};
}

std::vector<Group> group_assignment(std::span<const std::size_t> counts,
                                    const GroupThresholds& thresholds) {
  thresholds.validate();
  std::vector<Group> groups(counts.size());
  for (std::size_t i = 0; i < counts.size(); ++i) {
    const double c = static_cast<double>(counts[i]);
    groups[i] = c < thresholds.tail_max   ? Group::tail
                : c > thresholds.head_min ? Group::head
                                          : Group::medium;
  }
  return groups;
}

FeatureScaler FeatureScaler::fit(const Dataset& train) {
  const std::size_t d = train.num_features, n = train.size();
  FeatureScaler s;
  s.mean.assign(d, 0.0);
  s.inv_std.assign(d, 1.0);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < d; ++j) s.mean[j] += train.features[r * d + j];
  for (double& m : s.mean) m /= static_cast<double>(n);
  std::vector<double> var(d, 0.0);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < d; ++j) {
      const double dv = train.features[r * d + j] - s.mean[j];
      var[j] += dv * dv;
    }
  for (std::size_t j = 0; j < d; ++j) {
    const double sd = std::sqrt(var[j] / static_cast<double>(n));
    s.inv_std[j] = sd > 0.0 ? 1.0 / sd : 1.0;
  }
  return s;
}

void FeatureScaler::apply(Dataset& data) const {
  if (data.num_features != mean.size())
    throw std::invalid_argument("FeatureScaler: feature dimension mismatch");
  const std::size_t d = data.num_features;
  for (std::size_t r = 0; r < data.size(); ++r)
    for (std::size_t j = 0; j < d; ++j) {
      double& v = data.features[r * d + j];
      v = (v - mean[j]) * inv_std[j];
    }
}

Dataset ingest_table(const std::filesystem::path& path, TableFormat format,
                     const IngestOptions& options) {
  Dataset data = format == TableFormat::csv ? read_csv(path) : read_binary(path);
  std::size_t max_label = 0;
  for (std::size_t l : data.labels) max_label = std::max(max_label, l);
  data.num_classes = options.num_classes != 0 ? options.num_classes : max_label + 1;
  for (std::size_t i = 0; i < data.labels.size(); ++i)
    if (data.labels[i] >= data.num_classes)
      throw io_error(path, "sample " + std::to_string(i) + ": label " +
                               std::to_string(data.labels[i]) + " outside [0, " +
                               std::to_string(data.num_classes) + ")");
  if (options.standardize) {
    if (options.scaler != nullptr) options.scaler->apply(data);
    else FeatureScaler::fit(data).apply(data);
  }
  return data;
}

void write_csv(const Dataset& data, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw io_error(path, "cannot open for writing");
  const std::size_t d = data.num_features;
  char buf[32];
  for (std::size_t r = 0; r < data.size(); ++r) {
    for (std::size_t j = 0; j < d; ++j) {
      auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, data.features[r * d + j]);
      out.write(buf, ptr - buf);
      out.put(',');
    }
    out << data.labels[r] << '\n';
  }
  if (!out) throw io_error(path, "write failed");
}

void write_binary(const Dataset& data, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw io_error(path, "cannot open for writing");
  out.write(kBinaryMagic.data(), 4);
  put_u32(out, static_cast<std::uint32_t>(data.size()));
  put_u32(out, static_cast<std::uint32_t>(data.num_features));
  for (double v : data.features) put_f64(out, v);
  for (std::size_t l : data.labels) put_u32(out, static_cast<std::uint32_t>(l));
  if (!out) throw io_error(path, "write failed");
}

}  // namespace nbnlab
