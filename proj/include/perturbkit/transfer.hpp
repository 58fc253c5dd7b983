#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "perturbkit/dataset.hpp"
#include "perturbkit/mat.hpp"
#include "perturbkit/perturb.hpp"

namespace perturbkit {

enum class DiagonalPolicy { kept, excluded };

const char* diagonal_policy_name(DiagonalPolicy policy);
DiagonalPolicy diagonal_policy_from_name(const std::string& name);

/// Grid of corruption transfer scores. Rows index training remappings,
/// columns evaluation remappings; cell (i, j) holds the mean effect on j
/// after fine-tuning on i. Square matrices share ids across both axes,
/// rectangular ones arise when evaluating against a different set.
struct TransferMatrix {
  std::vector<std::string> row_ids;
  std::vector<std::string> col_ids;
  std::vector<std::string> row_labels;
  std::vector<std::string> col_labels;
  Mat values;
  /// Per id: the factor levels shared by everything aggregated under it.
  std::map<std::string, std::map<std::string, std::string>> factors;
  DiagonalPolicy diagonal_policy = DiagonalPolicy::kept;
  std::string config_hash;
  /// "row_id/trial" entries dropped after divergence under skip-failures.
  std::vector<std::string> skipped;

  int rows() const { return values.rows; }
  int cols() const { return values.cols; }
  bool square() const { return row_ids == col_ids; }
};

struct MatrixBuildOptions {
  enum class RowUnit { items, groups };
  /// items: one row per example. groups: one row per class label, with
  /// training items sampled per trial and evaluation items per cell.
  RowUnit row_unit = RowUnit::items;
  int trials = 1;
  int evals_per_cell = 1;
  /// Drop diverged trials and flag them instead of aborting the build.
  bool skip_failures = false;
  int jobs = 1;
  /// Veto train/eval pairings, e.g. to keep lexical material disjoint.
  std::function<bool(const LabeledExample& train, const LabeledExample& eval)>
      pair_filter;
};

/// Fine-tune on rows of train_set and evaluate on columns of eval_set.
/// Sampling is seeded per row and trial, so results do not depend on the
/// number of worker threads. Optionally streams one record per evaluation.
TransferMatrix build_transfer_matrix(const Model& base,
                                     const LabeledExampleSet& train_set,
                                     const LabeledExampleSet& eval_set,
                                     const PerturbationConfig& cfg,
                                     const MatrixBuildOptions& opts = {},
                                     std::vector<EffectRecord>* records = nullptr);

TransferMatrix build_transfer_matrix(const Model& base,
                                     const LabeledExampleSet& set,
                                     const PerturbationConfig& cfg,
                                     const MatrixBuildOptions& opts = {},
                                     std::vector<EffectRecord>* records = nullptr);

/// Average each off-diagonal cell with its transpose; the diagonal is kept.
TransferMatrix symmetrize(const TransferMatrix& m);

/// Elementwise difference against a control matrix with matching ids.
TransferMatrix baselined_transfer(const TransferMatrix& fg,
                                  const TransferMatrix& control);

/// One record per finite cell, with class labels and prefixed factor levels
/// in the metadata so the grid can feed factor aggregation.
std::vector<EffectRecord> matrix_cells_to_records(const TransferMatrix& m);

/// prefix.csv holds the value grid, prefix.json everything else.
void save_matrix(const TransferMatrix& m, const std::string& prefix);
TransferMatrix load_matrix(const std::string& prefix);

}  // namespace perturbkit
