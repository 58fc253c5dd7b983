#pragma once

#include <string>
#include <vector>

#include "perturbkit/remapping.hpp"

namespace perturbkit {

/// One benchmark item: a remapping plus its class label and factor levels.
struct LabeledExample {
  Remapping remapping;
  std::string class_label;
  std::map<std::string, std::string> factors;
  bool first_subword_only = false;
  bool operator==(const LabeledExample&) const = default;
};

/// An ordered benchmark set. Items keep insertion order; class labels drive
/// downstream clusterability analysis.
struct LabeledExampleSet {
  std::string dataset_id;
  std::vector<LabeledExample> items;
  bool operator==(const LabeledExampleSet&) const = default;

  std::vector<std::string> class_labels() const;
  /// Distinct labels in first-appearance order.
  std::vector<std::string> distinct_labels() const;
};

/// Copy of the set with class labels replaced by each item's level of the
/// given factor. Throws ConfigError when an item lacks the factor.
LabeledExampleSet relabel_by_factor(const LabeledExampleSet& set,
                                    const std::string& factor);

/// JSONL form: a header line carrying the dataset id, then one record per
/// line. UTF-8, newline-terminated.
std::string serialize_set(const LabeledExampleSet& set);

/// Inverse of serialize_set. Throws ParseError naming the offending line.
LabeledExampleSet deserialize_set(const std::string& stream);

void save_set(const LabeledExampleSet& set, const std::string& path);
LabeledExampleSet load_set(const std::string& path);

}  // namespace perturbkit
