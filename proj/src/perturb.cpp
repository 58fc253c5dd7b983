#include "perturbkit/perturb.hpp"

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "perturbkit/csv.hpp"

namespace perturbkit {

using nlohmann::json;

const char* loss_mode_name(LossMode mode) {
  return mode == LossMode::contrastive ? "contrastive" : "positive_only";
}

LossMode loss_mode_from_name(const std::string& name) {
  if (name == "contrastive") return LossMode::contrastive;
  if (name == "positive_only") return LossMode::positive_only;
  throw ConfigError("unknown loss mode '" + name + "'");
}

std::string perturbation_config_to_json(const PerturbationConfig& cfg) {
  json j;
  j["learning_rate"] = cfg.learning_rate;
  j["steps"] = cfg.steps;
  j["loss_mode"] = loss_mode_name(cfg.loss_mode);
  j["token_mean"] = cfg.token_mean;
  j["first_subword_only"] = cfg.score.first_subword_only;
  j["bos_on_empty_context"] = cfg.score.bos_on_empty_context;
  j["seed"] = cfg.seed;
  return j.dump(2) + "\n";
}

PerturbationConfig perturbation_config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ParseError(std::string("bad config JSON: ") + e.what());
  }
  if (!j.is_object()) throw ParseError("config JSON must be an object");
  static const std::set<std::string> known = {
      "learning_rate", "steps", "loss_mode", "token_mean",
      "first_subword_only", "bos_on_empty_context", "seed"};
  for (auto& [key, value] : j.items())
    if (!known.count(key)) throw ConfigError("unknown config key '" + key + "'");
  PerturbationConfig cfg;
  try {
    cfg.learning_rate = j.value("learning_rate", cfg.learning_rate);
    cfg.steps = j.value("steps", cfg.steps);
    if (j.contains("loss_mode"))
      cfg.loss_mode = loss_mode_from_name(j.at("loss_mode").get<std::string>());
    cfg.token_mean = j.value("token_mean", cfg.token_mean);
    cfg.score.first_subword_only =
        j.value("first_subword_only", cfg.score.first_subword_only);
    cfg.score.bos_on_empty_context =
        j.value("bos_on_empty_context", cfg.score.bos_on_empty_context);
    cfg.seed = j.value("seed", cfg.seed);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad config value: ") + e.what());
  }
  return cfg;
}

namespace {

/// Number of scored positions in a region, matching how backends count
/// passes when token_mean divides entry weights.
int scored_tokens(const Model& model, const TokenString& region,
                  bool first_subword_only) {
  if (region.empty()) return 0;
  auto tr = model.tokenizer().tokenize(region);
  if (first_subword_only) return static_cast<int>(tr.word_boundaries.size());
  return static_cast<int>(tr.subword_ids.size());
}

double side_weight(const Model& model, const TokenString& region,
                   const PerturbationConfig& cfg) {
  if (!cfg.token_mean) return 1.0;
  int n = scored_tokens(model, region, cfg.score.first_subword_only);
  return n > 0 ? 1.0 / n : 1.0;
}

}  // namespace

double perturbation_loss(const Model& model, const Remapping& m,
                         const PerturbationConfig& cfg) {
  double loss = -side_weight(model, m.region_alternate, cfg) *
                region_logprob(model, m.context_alternate, m.region_alternate,
                               cfg.score);
  if (cfg.loss_mode == LossMode::contrastive)
    loss += side_weight(model, m.region_original, cfg) *
            region_logprob(model, m.context_original, m.region_original,
                           cfg.score);
  if (!std::isfinite(loss))
    throw BackendError("non-finite loss for remapping " + m.id);
  return loss;
}

double perturbation_loss(const Model& model, const std::vector<Remapping>& ms,
                         const PerturbationConfig& cfg) {
  if (ms.empty()) throw ConfigError("loss of an empty remapping batch");
  double total = 0.0;
  for (auto& m : ms) total += perturbation_loss(model, m, cfg);
  return total / static_cast<double>(ms.size());
}

ModelPtr perturb(const Model& base, const std::vector<Remapping>& ms,
                 const PerturbationConfig& cfg) {
  if (ms.empty()) throw ConfigError("perturb requires at least one remapping");
  if (cfg.learning_rate <= 0.0)
    throw ConfigError("learning rate must be positive");
  if (cfg.steps < 1) throw ConfigError("steps must be at least 1");

  double w = 1.0 / static_cast<double>(ms.size());
  std::vector<TrainEntry> batch;
  for (auto& m : ms) {
    batch.push_back({m.context_alternate, m.region_alternate, w, cfg.score});
    if (cfg.loss_mode == LossMode::contrastive)
      batch.push_back({m.context_original, m.region_original, -w, cfg.score});
  }
  TrainOptions opts;
  opts.learning_rate = cfg.learning_rate;
  opts.steps = cfg.steps;
  opts.token_mean = cfg.token_mean;
  try {
    return base.train(batch, opts);
  } catch (const DivergenceError& e) {
    std::vector<std::string> ids;
    for (auto& m : ms) ids.push_back(m.id);
    throw DivergenceError(e.what(), e.step, join(ids, ","));
  }
}

double remapping_effect(const Remapping& m, const Model& base,
                        const Model& perturbed, const ScoreOptions& opts) {
  double alt = region_logprob(perturbed, m.context_alternate,
                              m.region_alternate, opts) -
               region_logprob(base, m.context_alternate, m.region_alternate,
                              opts);
  double orig = region_logprob(perturbed, m.context_original,
                               m.region_original, opts) -
                region_logprob(base, m.context_original, m.region_original,
                               opts);
  double r = alt - orig;
  if (!std::isfinite(r))
    throw BackendError("non-finite effect for remapping " + m.id);
  return r;
}

void write_effect_records(std::ostream& os,
                          const std::vector<EffectRecord>& records) {
  std::set<std::string> meta_keys;
  for (auto& r : records)
    for (auto& [k, v] : r.metadata) meta_keys.insert(k);
  std::vector<std::string> header = {"train_id", "eval_id", "trial", "effect"};
  header.insert(header.end(), meta_keys.begin(), meta_keys.end());
  os << csv_join(header) << "\n";
  for (auto& r : records) {
    std::vector<std::string> row = {r.train_id, r.eval_id,
                                    std::to_string(r.trial),
                                    format_double(r.effect)};
    for (auto& k : meta_keys) {
      auto it = r.metadata.find(k);
      row.push_back(it == r.metadata.end() ? "" : it->second);
    }
    os << csv_join(row) << "\n";
  }
}

std::vector<EffectRecord> read_effect_records(std::istream& is) {
  std::string line;
  if (!std::getline(is, line))
    throw ParseError("effect record CSV is empty");
  auto header = csv_split(line);
  const std::vector<std::string> fixed = {"train_id", "eval_id", "trial",
                                          "effect"};
  if (header.size() < fixed.size() ||
      !std::equal(fixed.begin(), fixed.end(), header.begin()))
    throw ParseError("effect record CSV must start with columns " +
                     join(fixed, ", "));
  std::vector<EffectRecord> out;
  int lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    auto fields = csv_split(line);
    if (fields.size() != header.size())
      throw ParseError("line " + std::to_string(lineno) + ": expected " +
                       std::to_string(header.size()) + " fields, found " +
                       std::to_string(fields.size()));
    EffectRecord r;
    r.train_id = fields[0];
    r.eval_id = fields[1];
    try {
      r.trial = std::stoi(fields[2]);
      r.effect = std::stod(fields[3]);
    } catch (const std::exception&) {
      throw ParseError("line " + std::to_string(lineno) +
                       ": bad numeric field");
    }
    for (size_t i = fixed.size(); i < header.size(); ++i)
      if (!fields[i].empty()) r.metadata[header[i]] = fields[i];
    out.push_back(std::move(r));
  }
  return out;
}

void save_effect_records(const std::string& path,
                         const std::vector<EffectRecord>& records) {
  std::ostringstream os;
  write_effect_records(os, records);
  write_text_file_atomic(path, os.str());
}

std::vector<EffectRecord> load_effect_records(const std::string& path) {
  std::istringstream is(read_text_file(path));
  return read_effect_records(is);
}

}  // namespace perturbkit
