#pragma once

// Evaluation and diagnostics over trained models: group accuracies, balance of
// the final normalization weights, feature-statistic spread, classifier-weight
// channel probes.

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "nbnlab/data.hpp"
#include "nbnlab/model.hpp"

namespace nbnlab {

struct GroupReport {
  double overall = 0.0;
  // NaN when the group has no classes.
  double tail = 0.0;
  double medium = 0.0;
  double head = 0.0;
  std::vector<double> per_class;  // NaN for classes absent from the test set
  std::vector<Group> groups;
};

// Eval-mode accuracy on `test`, with the listed classifier-input channels
// zeroed. `groups` has one entry per class.
GroupReport evaluate(Model& model, const Dataset& test, std::span<const Group> groups,
                     std::span<const std::size_t> masked_channels = {});

GroupReport mask_channels_eval(Model& model, std::span<const std::size_t> channels,
                               const Dataset& test, std::span<const Group> groups);

// Classifier-input features in eval mode, [N x C].
Tensor extract_features(Model& model, const Dataset& data);

struct FeatureStatVariance {
  double var_mean = 0.0;
  double var_std = 0.0;
  std::vector<double> channel_mean;
  std::vector<double> channel_std;  // population divisor over samples
};

// Sample variance across channels of the per-channel mean and std.
FeatureStatVariance feature_stat_variance(const Tensor& features);

struct BalanceCurve {
  std::vector<double> sorted;  // descending
  double cv = 0.0;             // population std / mean
  double max_min_ratio = 0.0;  // +inf when the minimum is zero
};

BalanceCurve balance_curve(std::span<const double> values);
// |effective gamma| of the final normalization layer. Throws when that slot
// carries no normalization.
BalanceCurve bn_weight_curve(const Model& model);

enum class ChannelTag { neither, rare_specific, frequent_specific, common };
std::string to_string(ChannelTag tag);

struct ChannelImportance {
  std::vector<double> rare;      // per channel, over tail classes
  std::vector<double> frequent;  // per channel, over head classes
  double tau_rare = 0.0;
  double tau_frequent = 0.0;
  double quantile = 0.6;
  std::vector<ChannelTag> tags;

  std::vector<std::size_t> channels_with(ChannelTag tag) const;
};

// Importance of channel c for a class group is the mean over its classes of
// max(W[k, c], 0). A channel is important for a group when its importance is
// strictly above that group's `quantile` percentile across channels.
ChannelImportance channel_importance(const Tensor& classifier_weight,
                                     std::span<const Group> groups, double quantile = 0.6);

// Percentile with linear interpolation between order statistics, q in [0, 1].
double percentile(std::vector<double> values, double q);

struct ChannelProfile {
  std::string label;
  std::vector<double> gamma;  // effective, final normalization layer
  std::vector<double> beta;
  std::vector<double> mean;   // test features
  std::vector<double> std;
  std::vector<std::vector<double>> importance;  // [K][C], max(W, 0)
};

ChannelProfile channel_profile(Model& model, const Dataset& test, std::string label);

struct Histogram {
  double lo = 0.0;
  double hi = 0.0;
  std::size_t bins = 0;
  std::vector<std::vector<std::size_t>> counts;  // one row per input series

  double bin_width() const { return (hi - lo) / static_cast<double>(bins); }
};

// Shared bins across all series.
Histogram histogram(const std::vector<std::vector<double>>& series, std::size_t bins);

struct StatisticsHistogram {
  std::vector<std::string> labels;
  Histogram mean;
  Histogram std;
};

StatisticsHistogram statistics_histogram(const std::vector<ChannelProfile>& profiles,
                                         std::size_t bins = 20);

// Fraction of `values` strictly above `threshold`.
double fraction_above(std::span<const double> values, double threshold);

}  // namespace nbnlab
