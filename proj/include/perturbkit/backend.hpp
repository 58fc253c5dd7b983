#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "perturbkit/remapping.hpp"
#include "perturbkit/tokenizer.hpp"

namespace perturbkit {

enum class Mode { causal, masked };

std::string mode_name(Mode mode);
Mode mode_from_name(const std::string& name);

struct ScoreOptions {
  /// Score only the first subword of each region word.
  bool first_subword_only = false;
  /// With an empty context, prepend the backend's sequence-start marker when
  /// it has one. The causal reference LM always pads its window with <s>, so
  /// this only changes masked-mode scoring.
  bool bos_on_empty_context = true;

  bool operator==(const ScoreOptions&) const = default;
};

/// One entry of a training batch. A negative weight flips the gradient,
/// which is how the contrastive objective pushes probability away from
/// the original region.
struct TrainEntry {
  TokenString context;
  TokenString region;
  double weight = 1.0;
  ScoreOptions opts;
};

struct TrainOptions {
  double learning_rate = 0.0;
  int steps = 1;
  /// Average region-token losses within an entry instead of summing them.
  bool token_mean = false;
};

/// One masked forward pass of a pseudo-log-likelihood evaluation.
struct PllPass {
  int target_position = 0;            // absolute subword index
  std::vector<int> masked_positions;  // absolute subword indices hidden this pass
  double logprob = 0.0;
};

struct PllTrace {
  std::vector<PllPass> passes;
};

/// Parameter state plus a JSON manifest describing it; enough to restore
/// the model exactly.
struct StateSnapshot {
  std::string manifest_json;
  std::vector<double> blob;
};

class Model;
using ModelPtr = std::shared_ptr<const Model>;

/// A scoreable, trainable language-model state. Handles are immutable:
/// train() returns a new handle and never touches the receiver, so distinct
/// handles may be scored concurrently.
class Model {
 public:
  virtual ~Model() = default;

  virtual std::string backend_id() const = 0;
  virtual Mode mode() const = 0;
  virtual int vocab_size() const = 0;
  /// Highest layer index accepted by embed(); layer 0 is the embedding layer.
  virtual int depth() const = 0;
  virtual const SubwordTokenizer& tokenizer() const = 0;

  /// log p(region | context), summed over region subwords. Causal mode
  /// requires every region position to follow every context position.
  virtual double score_region(const TokenString& context, const TokenString& region,
                              const ScoreOptions& opts = {}) const = 0;

  /// Masked-mode pseudo-log-likelihood: per region subword, one forward pass
  /// with that subword and all later subwords of the same word masked.
  /// Throws in causal mode.
  virtual double pll_score_region(const TokenString& context,
                                  const TokenString& region,
                                  const ScoreOptions& opts = {},
                                  PllTrace* trace = nullptr) const;

  /// Run `opts.steps` optimizer steps on the batch and return the resulting
  /// state. Optimizer moments persist across the steps of one call and are
  /// not part of the returned state. learning_rate 0 returns an identical
  /// parameter state. Non-finite loss raises DivergenceError with the step.
  virtual ModelPtr train(const std::vector<TrainEntry>& batch,
                         const TrainOptions& opts) const = 0;

  /// Deep, independent copy of the state.
  virtual ModelPtr clone_state() const = 0;

  /// Analytic gradient of the batch objective sum_e weight_e * nll_e with
  /// respect to the packed parameter vector; layout matches
  /// snapshot_state().blob. Only opts.token_mean is consulted. Exposed so
  /// gradients can be checked against finite differences from outside.
  virtual std::vector<double> objective_gradient(
      const std::vector<TrainEntry>& batch, const TrainOptions& opts) const = 0;

  /// Unit-norm hidden state of the region at `layer`; multi-subword words
  /// are averaged before normalization. Requires 0 <= layer <= depth().
  virtual std::vector<double> embed(const TokenString& context,
                                    const TokenString& region, int layer) const = 0;

  /// exp of mean negative log-likelihood per subword. Causal mode only.
  virtual double perplexity(const std::vector<TokenString>& corpus) const;

  virtual StateSnapshot snapshot_state() const = 0;
};

/// log p(region | context) under the handle's native scoring: exact causal
/// factorization or masked pseudo-log-likelihood.
double region_logprob(const Model& model, const TokenString& context,
                      const TokenString& region, const ScoreOptions& opts = {});

/// One contrastive step: gradient descent on
/// -log p(region_pos | ctx_pos) + log p(region_neg | ctx_neg).
ModelPtr train_step(const Model& model, const TokenString& ctx_pos,
                    const TokenString& region_pos, const TokenString& ctx_neg,
                    const TokenString& region_neg, double learning_rate);

void save_state(const Model& model, const std::string& path_prefix);
ModelPtr load_state(const std::string& path_prefix);

/// Rebuild a model from an in-memory snapshot (dispatches on the manifest's
/// backend_id, like load_state).
ModelPtr restore_state(const StateSnapshot& snapshot);

/// Backend plugin registry. Reference backends self-register under
/// "ref_causal" and "ref_masked"; external adapters add their own names.
struct BackendDesc {
  std::function<ModelPtr(const std::string& config_json)> make;
  std::function<ModelPtr(const std::string& manifest_json,
                         const std::vector<double>& blob)>
      load;
};

void register_backend(const std::string& name, BackendDesc desc);
ModelPtr make_backend(const std::string& name, const std::string& config_json);
std::vector<std::string> backend_names();

/// Configuration of the built-in reference LMs.
struct ReferenceLMConfig {
  std::vector<std::string> vocab;
  int embedding_dim = 16;
  int hidden_dim = 32;
  /// Causal: prediction window length. Masked: maximum sequence length.
  int context_window = 8;
  uint64_t seed = 0;
  double init_scale = 0.1;
  int pretrain_steps = 0;  // 0 keeps the untrained random initialization
  double pretrain_lr = 0.05;
  /// When positive, pretraining must reach this mean per-token loss.
  double target_loss = 0.0;
};

/// Deterministic reference-LM construction; pretrain_steps > 0 fits the
/// corpus (next-token for causal, masked-position for masked) and enforces
/// target_loss when set.
ModelPtr init_reference_lm(Mode mode, const ReferenceLMConfig& config,
                           const std::vector<TokenString>& corpus = {});

}  // namespace perturbkit
