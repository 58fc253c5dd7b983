#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "perturbkit/backend.hpp"
#include "perturbkit/benchmarks.hpp"
#include "perturbkit/dataset.hpp"
#include "perturbkit/perturb.hpp"
#include "perturbkit/plots.hpp"
#include "perturbkit/transfer.hpp"

namespace perturbkit {

/// Which model a run talks to. A checkpoint names a saved-state prefix,
/// looked up as given and then under $PERTURBKIT_CACHE; otherwise the
/// backend is constructed from `config_json` (reference LMs accept
/// ReferenceLMConfig fields plus an inline "corpus" array). With `trained`
/// set and a dataset that ships a pretraining corpus, the corpus is passed
/// through to construction; unset forces the untrained initialization.
struct BackendSpec {
  std::string name = "ref_causal";
  std::string checkpoint;
  std::string config_json = "{}";
  bool trained = true;
};

struct AnalysisFlags {
  bool symmetrize = false;
  bool exclude_diagonal = true;
  bool reweight = true;
  std::string permutation_mode = "columns";
  int n_permutations = 999;
  /// Factor names for effect aggregation.
  std::vector<std::string> group_by;
  bool balanced = true;
};

/// One experiment, as read from a run config file. CLI flags override the
/// corresponding fields; everything else has library defaults. The seed is
/// mandatory and also drives the perturbation seed.
struct RunConfig {
  BackendSpec backend;
  /// Dataset description; see load_dataset for the per-id schema.
  std::string dataset_json;
  PerturbationConfig perturbation;
  int trials = 0;          // 0 = dataset default
  int evals_per_cell = 0;  // 0 = dataset default
  std::string row_unit;    // "items", "groups", or "" = dataset default
  AnalysisFlags analysis;
  HyperGrid hyper;
  /// When set, items are relabeled by this factor before building grids.
  std::string class_factor;
  PlotSpec plot;
  std::string out = "out";
  uint64_t seed = 0;
  bool seed_set = false;
  int jobs = 1;
  bool skip_failures = false;
};

RunConfig run_config_from_json(const std::string& text);
std::string run_config_to_json(const RunConfig& cfg);

/// One transfer grid to build: a train set and an eval set (the same set
/// for square grids).
struct MatrixJob {
  std::string name;  // output stem
  LabeledExampleSet train;
  LabeledExampleSet eval;
  bool rectangular = false;
  /// Veto evaluation items sharing critical-region words with the train
  /// item (control columns are exempt; their completions repeat by design).
  bool disjoint_regions = false;
};

/// A dataset resolved into concrete grids plus its sampling defaults.
struct LoadedDataset {
  std::string id;
  std::vector<MatrixJob> jobs;
  /// {minuend job, subtrahend job, output stem} difference grids.
  std::vector<std::array<std::string, 3>> baselines;
  /// Pretraining text, when the dataset defines one.
  std::vector<TokenString> corpus;
  std::vector<std::string> notes;
  MatrixBuildOptions::RowUnit row_unit = MatrixBuildOptions::RowUnit::items;
  int default_trials = 1;
  int default_evals = 1;
  /// Backend construction hints (vocabulary, dimensions), merged under the
  /// user's backend config. Empty when the dataset suggests nothing.
  std::string suggested_backend_config;
};

/// Dataset schemas, by "id":
///   morph-er:     {"pairs": {class: path, ...}, "sentences": path,
///                  "variant": name, "variant_word": word}
///   cwsd20:       {"pools": dir, "target": word, "per_word": n}
///   fillergap:    {"csv": path}
///   synth-grammar:{"classes": n, "items_per_class": n, "corpus_repeats": n}
///   jsonl:        {"set": path, "corpus": path}
/// The seed feeds balanced sampling. Unknown ids or keys are errors.
LoadedDataset load_dataset(const std::string& dataset_json, uint64_t seed);

/// Build or load the model a run calls for. The seed becomes the backend's
/// initialization seed unless the config pins one.
ModelPtr resolve_backend(const BackendSpec& spec, const LoadedDataset& dataset,
                         uint64_t seed);

struct AnalyzeRequest {
  std::string which;                  // auc | crs | permtest | aggregate
  std::vector<std::string> matrices;  // saved matrix prefixes
  std::string set_path;               // crs: remapping JSONL
  std::string records_path;           // aggregate: effect record CSV
};

struct PlotRequest {
  std::string kind = "heatmap";  // heatmap | distribution
  std::vector<std::string> matrices;
  std::string records_path;
};

/// The subcommand bodies. Each writes its artifacts plus a manifest and a
/// resolved config copy under cfg.out, prints stable key=value lines to
/// `os`, and returns a process exit status. Failures raise the library's
/// error types; the CLI wrapper turns them into a nonzero exit.
int cmd_matrix(const RunConfig& cfg, std::ostream& os);
int cmd_analyze(const RunConfig& cfg, const AnalyzeRequest& req, std::ostream& os);
int cmd_hyper(const RunConfig& cfg, std::ostream& os);
int cmd_plot(const RunConfig& cfg, const PlotRequest& req, std::ostream& os);
int cmd_perplexity(const RunConfig& cfg, const std::string& corpus_path,
                   const std::string& item_id, std::ostream& os);
int cmd_ingest(const RunConfig& cfg, std::ostream& os);

}  // namespace perturbkit
