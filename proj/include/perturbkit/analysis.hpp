#pragma once

#include <map>
#include <string>
#include <vector>

#include "perturbkit/transfer.hpp"

namespace perturbkit {

struct ClusterabilityOptions {
  bool exclude_diagonal = true;
  /// Balance pair weights so that large classes and frequent class pairings
  /// do not dominate the ranking.
  bool reweight = true;
};

struct ClusterabilityResult {
  double auc = 0.0;
  bool reweighted = false;
  long positive_pairs = 0;
  long negative_pairs = 0;
  /// Weight given to each same-class cell, by class.
  std::map<std::string, double> per_class_weights;
  std::vector<std::string> warnings;
};

/// Probability that a random same-class cell outranks a random cross-class
/// cell, ties counting half. Scores come from the unsymmetrized grid, so
/// (i, j) and (j, i) are distinct observations.
ClusterabilityResult clusterability_auc(const TransferMatrix& m,
                                        const ClusterabilityOptions& opts = {});

/// Multiset of completion labels, e.g. answers given for one cloze item.
struct LabelMultiset {
  std::map<std::string, long> counts;
  long total() const;
};

/// Overlap similarity: shared count mass over the larger total.
double crs_similarity(const LabelMultiset& a, const LabelMultiset& b);

enum class PermutationMode { columns, full };

struct PermutationResult {
  double observed = 0.0;
  double p_value = 1.0;
  int n_permutations = 0;
};

/// Tests whether several transfer grids share structure. The statistic is
/// the mean pairwise Pearson correlation of the flattened off-diagonal
/// cells; the null permutes columns jointly or shuffles all off-diagonal
/// cells, and the p-value uses the add-one estimator.
PermutationResult permutation_test(const std::vector<TransferMatrix>& ms,
                                   PermutationMode mode, int n_permutations,
                                   uint64_t seed);

struct FactorCell {
  std::map<std::string, std::string> levels;
  double mean = 0.0;
  long n = 0;
};

struct LevelMean {
  std::string level;
  double mean = 0.0;
  long cells = 0;
};

struct LevelContrast {
  std::string factor;
  std::string level_a;
  std::string level_b;
  double difference = 0.0;
  double p_value = 1.0;
};

struct AggregateResult {
  std::vector<FactorCell> cells;
  std::map<std::string, std::vector<LevelMean>> marginals;
  std::vector<LevelContrast> contrasts;
  bool balanced = false;
};

/// Mean effect per factor-level combination. Balanced marginals average the
/// cell means without regard to cell sizes; unbalanced ones pool records.
/// With n_permutations > 0, each pairwise level difference gets a two-sided
/// permutation p-value from shuffling that factor across records.
AggregateResult aggregate_effects(const std::vector<EffectRecord>& records,
                                  const std::vector<std::string>& group_by,
                                  bool balanced, int n_permutations = 0,
                                  uint64_t seed = 0);

/// Pairwise cosine similarity of region embeddings at one layer, in the
/// same grid shape transfer matrices use. Masked backends only.
TransferMatrix cosine_similarity_matrix(const Model& model,
                                        const LabeledExampleSet& set,
                                        int layer);

struct LayerChoice {
  std::string word;
  int best_layer = 0;
  double best_auc = 0.0;
  double last_auc = 0.0;
};

struct BestLayerResult {
  std::vector<LayerChoice> per_word;
  double mean_best_auc = 0.0;
  double mean_last_auc = 0.0;
};

/// For each word's sense set, pick the embedding layer whose cosine grid
/// separates the senses best; ties go to the lower layer.
BestLayerResult best_layer_oracle(const Model& model,
                                  const std::vector<LabeledExampleSet>& sets);

}  // namespace perturbkit
