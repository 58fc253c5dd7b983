#pragma once

#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "perturbkit/backend.hpp"
#include "perturbkit/remapping.hpp"

namespace perturbkit {

enum class LossMode { contrastive, positive_only };

const char* loss_mode_name(LossMode mode);
LossMode loss_mode_from_name(const std::string& name);

/// Controls one fine-tuning run. The contrastive loss raises the log
/// probability of the alternate region while pushing the original one down;
/// positive_only drops the second term.
struct PerturbationConfig {
  double learning_rate = 0.1;
  int steps = 1;
  LossMode loss_mode = LossMode::contrastive;
  /// Divide each remapping side's weight by its scored token count.
  bool token_mean = false;
  ScoreOptions score;
  uint64_t seed = 0;

  bool operator==(const PerturbationConfig&) const = default;
};

std::string perturbation_config_to_json(const PerturbationConfig& cfg);
PerturbationConfig perturbation_config_from_json(const std::string& text);

/// One evaluation outcome: the corruption measured on eval_id after
/// fine-tuning on train_id.
struct EffectRecord {
  std::string train_id;
  std::string eval_id;
  int trial = 0;
  double effect = 0.0;
  std::map<std::string, std::string> metadata;

  bool operator==(const EffectRecord&) const = default;
};

/// Loss of a single remapping under the model:
///   contrastive    -(w_a log p(R_a|C_a) - w_o log p(R_o|C_o))
///   positive_only  -(w_a log p(R_a|C_a))
/// where the w are 1, or reciprocal token counts under token_mean. Equal
/// side probabilities give 0; alternate odds of e give -1.
double perturbation_loss(const Model& model, const Remapping& m,
                         const PerturbationConfig& cfg = {});

/// Mean loss over a batch of remappings, matching what perturb() optimizes.
double perturbation_loss(const Model& model, const std::vector<Remapping>& ms,
                         const PerturbationConfig& cfg = {});

/// Fine-tune a copy of the base model on the batch, weighting every
/// remapping equally. The base is untouched. Divergence surfaces as a
/// DivergenceError carrying the step index and the remapping ids.
ModelPtr perturb(const Model& base, const std::vector<Remapping>& ms,
                 const PerturbationConfig& cfg);

/// Differential corruption transfer:
///   [log p~(R_a|C_a) - log p(R_a|C_a)] - [log p~(R_o|C_o) - log p(R_o|C_o)]
/// Zero when perturbed and base agree; on the training remapping it equals
/// the loss drop accumulated during fine-tuning.
double remapping_effect(const Remapping& m, const Model& base,
                        const Model& perturbed, const ScoreOptions& opts = {});

/// CSV with columns train_id, eval_id, trial, effect, then any metadata keys
/// (sorted) as extra columns.
void write_effect_records(std::ostream& os, const std::vector<EffectRecord>& records);
std::vector<EffectRecord> read_effect_records(std::istream& is);
void save_effect_records(const std::string& path, const std::vector<EffectRecord>& records);
std::vector<EffectRecord> load_effect_records(const std::string& path);

}  // namespace perturbkit
