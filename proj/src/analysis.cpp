#include "nbnlab/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "nbnlab/ops.hpp"

namespace nbnlab {
namespace {

constexpr std::size_t kEvalChunk = 1024;
const double kNaN = std::numeric_limits<double>::quiet_NaN();

std::vector<std::size_t> iota_range(std::size_t begin, std::size_t end) {
  std::vector<std::size_t> v(end - begin);
  std::iota(v.begin(), v.end(), begin);
  return v;
}

Tensor masked(const Tensor& features, std::span<const std::size_t> channels) {
  if (channels.empty()) return features;
  const std::size_t c = features.dim(1);
  std::vector<double> values = features.to_vector();
  for (std::size_t ch : channels) {
    if (ch >= c)
      throw std::out_of_range("mask channel " + std::to_string(ch) + " outside [0, " +
                              std::to_string(c) + ")");
    for (std::size_t r = 0; r < features.dim(0); ++r) values[r * c + ch] = 0.0;
  }
  return Tensor::from(features.shape(), std::move(values));
}

double group_mean(const std::vector<double>& per_class, std::span<const Group> groups, Group g) {
  double total = 0.0;
  std::size_t n = 0;
  for (std::size_t k = 0; k < groups.size(); ++k) {
    if (groups[k] != g || std::isnan(per_class[k])) continue;
    total += per_class[k];
    ++n;
  }
  return n == 0 ? kNaN : total / static_cast<double>(n);
}

double sample_variance(std::span<const double> v) {
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return ss / static_cast<double>(v.size() - 1);
}

}  // namespace

Tensor extract_features(Model& model, const Dataset& data) {
  if (data.num_features != model.config().input_dim)
    throw ShapeError("extract_features: data has " + std::to_string(data.num_features) +
                     " features, model expects " + std::to_string(model.config().input_dim));
  NoGradScope no_grad;
  const std::size_t c = model.feature_dim();
  std::vector<double> out;
  out.reserve(data.size() * c);
  for (std::size_t start = 0; start < data.size(); start += kEvalChunk) {
    const auto idx = iota_range(start, std::min(data.size(), start + kEvalChunk));
    const Tensor f = model.features(data.rows(idx), Mode::eval);
    out.insert(out.end(), f.data().begin(), f.data().end());
  }
  return Tensor::from({data.size(), c}, std::move(out));
}

GroupReport evaluate(Model& model, const Dataset& test, std::span<const Group> groups,
                     std::span<const std::size_t> masked_channels) {
  if (test.size() == 0) throw std::invalid_argument("evaluate: empty test set");
  const std::size_t k = model.config().num_classes;
  if (groups.size() != k)
    throw std::invalid_argument("evaluate: need one group per class");
  NoGradScope no_grad;
  std::vector<std::size_t> correct(k, 0), seen(k, 0);
  std::size_t total_correct = 0;
  for (std::size_t start = 0; start < test.size(); start += kEvalChunk) {
    const auto idx = iota_range(start, std::min(test.size(), start + kEvalChunk));
    const Tensor feats = masked(model.features(test.rows(idx), Mode::eval), masked_channels);
    const Tensor logits = model.classify(feats, Mode::eval);
    for (std::size_t r = 0; r < idx.size(); ++r) {
      const auto row = logits.data().subspan(r * k, k);
      const auto pred = static_cast<std::size_t>(
          std::max_element(row.begin(), row.end()) - row.begin());
      const std::size_t label = test.labels[idx[r]];
      if (label >= k) throw std::out_of_range("evaluate: label outside model classes");
      ++seen[label];
      if (pred == label) {
        ++correct[label];
        ++total_correct;
      }
    }
  }
  GroupReport report;
  report.groups.assign(groups.begin(), groups.end());
  report.per_class.resize(k);
  for (std::size_t c = 0; c < k; ++c)
    report.per_class[c] =
        seen[c] == 0 ? kNaN : static_cast<double>(correct[c]) / static_cast<double>(seen[c]);
  report.overall = static_cast<double>(total_correct) / static_cast<double>(test.size());
  report.tail = group_mean(report.per_class, groups, Group::tail);
  report.medium = group_mean(report.per_class, groups, Group::medium);
  report.head = group_mean(report.per_class, groups, Group::head);
  return report;
}

GroupReport mask_channels_eval(Model& model, std::span<const std::size_t> channels,
                               const Dataset& test, std::span<const Group> groups) {
  return evaluate(model, test, groups, channels);
}

FeatureStatVariance feature_stat_variance(const Tensor& features) {
  if (features.ndim() != 2)
    throw ShapeError("feature_stat_variance: expected [N x C], got " +
                     shape_to_string(features.shape()));
  const std::size_t n = features.dim(0), c = features.dim(1);
  if (c < 2) throw std::invalid_argument("feature_stat_variance: need at least 2 channels");
  if (n < 2) throw std::invalid_argument("feature_stat_variance: need at least 2 samples");
  FeatureStatVariance out;
  out.channel_mean.assign(c, 0.0);
  out.channel_std.assign(c, 0.0);
  const auto x = features.data();
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < c; ++j) out.channel_mean[j] += x[r * c + j];
  for (double& m : out.channel_mean) m /= static_cast<double>(n);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < c; ++j) {
      const double d = x[r * c + j] - out.channel_mean[j];
      out.channel_std[j] += d * d;
    }
  for (double& s : out.channel_std) s = std::sqrt(s / static_cast<double>(n));
  out.var_mean = sample_variance(out.channel_mean);
  out.var_std = sample_variance(out.channel_std);
  return out;
}

BalanceCurve balance_curve(std::span<const double> values) {
  if (values.empty()) throw std::invalid_argument("balance_curve: empty input");
  BalanceCurve curve;
  curve.sorted.assign(values.begin(), values.end());
  std::sort(curve.sorted.begin(), curve.sorted.end(), std::greater<>());
  const double n = static_cast<double>(values.size());
  const double mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  curve.cv = mean == 0.0 ? 0.0 : std::sqrt(ss / n) / mean;
  const double lo = curve.sorted.back();
  curve.max_min_ratio =
      lo == 0.0 ? std::numeric_limits<double>::infinity() : curve.sorted.front() / lo;
  return curve;
}

BalanceCurve bn_weight_curve(const Model& model) {
  const NormLayer& norm = model.final_norm();
  if (norm.is_identity())
    throw std::invalid_argument("bn_weight_curve: final slot " + norm.name() +
                                " has no normalization layer");
  NoGradScope no_grad;
  std::vector<double> g = norm.effective_gamma().to_vector();
  for (double& v : g) v = std::abs(v);
  return balance_curve(g);
}

std::string to_string(ChannelTag tag) {
  switch (tag) {
    case ChannelTag::neither: return "neither";
    case ChannelTag::rare_specific: return "rare-specific";
    case ChannelTag::frequent_specific: return "frequent-specific";
    case ChannelTag::common: return "common";
  }
  return "neither";
}

std::vector<std::size_t> ChannelImportance::channels_with(ChannelTag tag) const {
  std::vector<std::size_t> out;
  for (std::size_t c = 0; c < tags.size(); ++c)
    if (tags[c] == tag) out.push_back(c);
  return out;
}

double percentile(std::vector<double> values, double q) {
  if (values.empty()) throw std::invalid_argument("percentile: empty input");
  if (!(q >= 0.0 && q <= 1.0)) throw std::invalid_argument("percentile: q outside [0, 1]");
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

ChannelImportance channel_importance(const Tensor& w, std::span<const Group> groups,
                                     double quantile) {
  if (w.ndim() != 2) throw ShapeError("channel_importance: expected [K x C] weights");
  const std::size_t k = w.dim(0), c = w.dim(1);
  if (groups.size() != k)
    throw std::invalid_argument("channel_importance: need one group per classifier row");
  for (double v : w.data())
    if (!std::isfinite(v)) throw std::domain_error("channel_importance: non-finite weight");

  auto importance = [&](Group g) {
    std::vector<double> imp(c, 0.0);
    std::size_t rows = 0;
    for (std::size_t r = 0; r < k; ++r) {
      if (groups[r] != g) continue;
      ++rows;
      for (std::size_t j = 0; j < c; ++j) imp[j] += std::max(w.at(r, j), 0.0);
    }
    if (rows > 0)
      for (double& v : imp) v /= static_cast<double>(rows);
    return imp;
  };

  ChannelImportance out;
  out.quantile = quantile;
  out.rare = importance(Group::tail);
  out.frequent = importance(Group::head);
  out.tau_rare = percentile(out.rare, quantile);
  out.tau_frequent = percentile(out.frequent, quantile);
  out.tags.resize(c);
  for (std::size_t j = 0; j < c; ++j) {
    const bool rare = out.rare[j] > out.tau_rare;
    const bool freq = out.frequent[j] > out.tau_frequent;
    out.tags[j] = rare && freq ? ChannelTag::common
                  : rare       ? ChannelTag::rare_specific
                  : freq       ? ChannelTag::frequent_specific
                               : ChannelTag::neither;
  }
  return out;
}

ChannelProfile channel_profile(Model& model, const Dataset& test, std::string label) {
  ChannelProfile p;
  p.label = std::move(label);
  const NormLayer& norm = model.final_norm();
  if (!norm.is_identity()) {
    NoGradScope no_grad;
    p.gamma = norm.effective_gamma().to_vector();
    p.beta = norm.effective_beta().to_vector();
  }
  const FeatureStatVariance stats = feature_stat_variance(extract_features(model, test));
  p.mean = stats.channel_mean;
  p.std = stats.channel_std;
  const Tensor& w = model.classifier().weight;
  p.importance.assign(w.dim(0), std::vector<double>(w.dim(1)));
  for (std::size_t r = 0; r < w.dim(0); ++r)
    for (std::size_t j = 0; j < w.dim(1); ++j) p.importance[r][j] = std::max(w.at(r, j), 0.0);
  return p;
}

Histogram histogram(const std::vector<std::vector<double>>& series, std::size_t bins) {
  if (bins == 0) throw std::invalid_argument("histogram: bins must be positive");
  double lo = std::numeric_limits<double>::infinity();
  double hi = -lo;
  for (const auto& s : series)
    for (double v : s) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  if (!std::isfinite(lo)) lo = hi = 0.0;
  if (hi == lo) {
    lo -= 0.5;
    hi += 0.5;
  }
  Histogram h;
  h.lo = lo;
  h.hi = hi;
  h.bins = bins;
  for (const auto& s : series) {
    std::vector<std::size_t> counts(bins, 0);
    for (double v : s) {
      auto b = static_cast<std::size_t>((v - lo) / (hi - lo) * static_cast<double>(bins));
      ++counts[std::min(b, bins - 1)];
    }
    h.counts.push_back(std::move(counts));
  }
  return h;
}

StatisticsHistogram statistics_histogram(const std::vector<ChannelProfile>& profiles,
                                         std::size_t bins) {
  StatisticsHistogram out;
  std::vector<std::vector<double>> means, stds;
  for (const ChannelProfile& p : profiles) {
    if (!profiles.empty() && p.mean.size() != profiles.front().mean.size())
      throw std::invalid_argument("statistics_histogram: profiles differ in channel count");
    out.labels.push_back(p.label);
    means.push_back(p.mean);
    stds.push_back(p.std);
  }
  out.mean = histogram(means, bins);
  out.std = histogram(stds, bins);
  return out;
}

double fraction_above(std::span<const double> values, double threshold) {
  if (values.empty()) return 0.0;
  std::size_t n = 0;
  for (double v : values) n += v > threshold ? 1 : 0;
  return static_cast<double>(n) / static_cast<double>(values.size());
}

}  // namespace nbnlab
