#include "perturbkit/backend.hpp"

#include <cstring>
#include <map>
#include <mutex>
#include <random>
#include <set>

#include "perturbkit/common.hpp"
#include "ref_detail.hpp"

namespace perturbkit {

using nlohmann::json;

std::string mode_name(Mode mode) {
  return mode == Mode::causal ? "causal" : "masked";
}

Mode mode_from_name(const std::string& name) {
  if (name == "causal") return Mode::causal;
  if (name == "masked") return Mode::masked;
  throw ConfigError("unknown mode: " + name);
}

double Model::pll_score_region(const TokenString&, const TokenString&,
                               const ScoreOptions&, PllTrace*) const {
  throw BackendError("pseudo-log-likelihood scoring requires a masked backend");
}

double Model::perplexity(const std::vector<TokenString>&) const {
  throw BackendError("perplexity requires a causal backend");
}

double region_logprob(const Model& model, const TokenString& context,
                      const TokenString& region, const ScoreOptions& opts) {
  if (model.mode() == Mode::masked)
    return model.pll_score_region(context, region, opts);
  return model.score_region(context, region, opts);
}

ModelPtr train_step(const Model& model, const TokenString& ctx_pos,
                    const TokenString& region_pos, const TokenString& ctx_neg,
                    const TokenString& region_neg, double learning_rate) {
  std::vector<TrainEntry> batch = {{ctx_pos, region_pos, 1.0, {}},
                                   {ctx_neg, region_neg, -1.0, {}}};
  TrainOptions opts;
  opts.learning_rate = learning_rate;
  opts.steps = 1;
  return model.train(batch, opts);
}

namespace {

std::map<std::string, BackendDesc>& registry() {
  static std::map<std::string, BackendDesc> reg;
  return reg;
}

std::vector<TokenString> corpus_from_json(const json& j) {
  std::vector<TokenString> corpus;
  if (j.contains("corpus"))
    for (auto& line : j.at("corpus"))
      corpus.push_back(TokenString::from_text(line.get<std::string>()));
  return corpus;
}

void ensure_builtin() {
  static std::once_flag once;
  std::call_once(once, [] {
    register_backend(
        "ref_causal",
        {[](const std::string& config_json) {
           json j = json::parse(config_json);
           return detail::make_ref_causal(detail::config_from_json(j),
                                          corpus_from_json(j));
         },
         detail::load_ref_causal});
    register_backend(
        "ref_masked",
        {[](const std::string& config_json) {
           json j = json::parse(config_json);
           return detail::make_ref_masked(detail::config_from_json(j),
                                          corpus_from_json(j));
         },
         detail::load_ref_masked});
  });
}

}  // namespace

void register_backend(const std::string& name, BackendDesc desc) {
  registry()[name] = std::move(desc);
}

ModelPtr make_backend(const std::string& name, const std::string& config_json) {
  ensure_builtin();
  auto it = registry().find(name);
  if (it == registry().end()) throw ConfigError("unknown backend: " + name);
  return it->second.make(config_json);
}

std::vector<std::string> backend_names() {
  ensure_builtin();
  std::vector<std::string> names;
  for (auto& [name, desc] : registry()) names.push_back(name);
  return names;
}

void save_state(const Model& model, const std::string& path_prefix) {
  StateSnapshot snap = model.snapshot_state();
  write_binary_file_atomic(path_prefix + ".bin", snap.blob.data(),
                           snap.blob.size() * sizeof(double));
  write_text_file_atomic(path_prefix + ".json", snap.manifest_json);
}

ModelPtr restore_state(const StateSnapshot& snapshot) {
  ensure_builtin();
  json j;
  try {
    j = json::parse(snapshot.manifest_json);
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("state manifest: ") + e.what());
  }
  std::string backend_id = j.value("backend_id", "");
  auto it = registry().find(backend_id);
  if (it == registry().end())
    throw ConfigError("state manifest names unknown backend: " + backend_id);
  return it->second.load(snapshot.manifest_json, snapshot.blob);
}

ModelPtr load_state(const std::string& path_prefix) {
  std::string bytes = read_text_file(path_prefix + ".bin");
  if (bytes.size() % sizeof(double) != 0)
    throw IoError(path_prefix + ".bin: truncated state blob");
  StateSnapshot snap;
  snap.manifest_json = read_text_file(path_prefix + ".json");
  snap.blob.resize(bytes.size() / sizeof(double));
  std::memcpy(snap.blob.data(), bytes.data(), bytes.size());
  return restore_state(snap);
}

ModelPtr init_reference_lm(Mode mode, const ReferenceLMConfig& config,
                           const std::vector<TokenString>& corpus) {
  if (mode == Mode::causal) return detail::make_ref_causal(config, corpus);
  return detail::make_ref_masked(config, corpus);
}

namespace detail {

json config_to_json(const ReferenceLMConfig& cfg) {
  return json{{"vocab", cfg.vocab},
              {"embedding_dim", cfg.embedding_dim},
              {"hidden_dim", cfg.hidden_dim},
              {"context_window", cfg.context_window},
              {"seed", cfg.seed},
              {"init_scale", cfg.init_scale},
              {"pretrain_steps", cfg.pretrain_steps},
              {"pretrain_lr", cfg.pretrain_lr},
              {"target_loss", cfg.target_loss}};
}

ReferenceLMConfig config_from_json(const json& j) {
  ReferenceLMConfig cfg;
  cfg.vocab = j.at("vocab").get<std::vector<std::string>>();
  cfg.embedding_dim = j.value("embedding_dim", cfg.embedding_dim);
  cfg.hidden_dim = j.value("hidden_dim", cfg.hidden_dim);
  cfg.context_window = j.value("context_window", cfg.context_window);
  cfg.seed = j.value("seed", cfg.seed);
  cfg.init_scale = j.value("init_scale", cfg.init_scale);
  cfg.pretrain_steps = j.value("pretrain_steps", cfg.pretrain_steps);
  cfg.pretrain_lr = j.value("pretrain_lr", cfg.pretrain_lr);
  cfg.target_loss = j.value("target_loss", cfg.target_loss);
  if (cfg.embedding_dim < 1 || cfg.hidden_dim < 1 || cfg.context_window < 1)
    throw ConfigError("reference LM dimensions must be positive");
  return cfg;
}

std::string build_manifest(const std::string& backend_id, Mode mode,
                           const ReferenceLMConfig& cfg,
                           const std::vector<NamedParam>& params) {
  json shapes = json::array();
  for (auto& p : params)
    shapes.push_back({{"name", p.name}, {"rows", p.mat->rows}, {"cols", p.mat->cols}});
  json cfg_json = config_to_json(cfg);
  json manifest = {{"backend_id", backend_id},
                   {"mode", mode_name(mode)},
                   {"config", cfg_json},
                   {"params", shapes},
                   {"config_hash", hex64(fnv1a64(cfg_json.dump()))}};
  return manifest.dump(2) + "\n";
}

ReferenceLMConfig parse_manifest(const std::string& manifest_json,
                                 const std::string& backend_id) {
  json j = json::parse(manifest_json);
  if (j.value("backend_id", "") != backend_id)
    throw ConfigError("manifest backend_id mismatch, expected " + backend_id);
  return config_from_json(j.at("config"));
}

std::vector<double> pack(const std::vector<NamedParam>& params) {
  std::vector<double> blob;
  for (auto& p : params) blob.insert(blob.end(), p.mat->d.begin(), p.mat->d.end());
  return blob;
}

void unpack(const std::vector<NamedParam>& params, const std::vector<double>& blob) {
  size_t total = 0;
  for (auto& p : params) total += p.mat->size();
  if (blob.size() != total)
    throw IoError("state blob has " + std::to_string(blob.size()) +
                  " values, expected " + std::to_string(total));
  size_t off = 0;
  for (auto& p : params) {
    std::copy(blob.begin() + off, blob.begin() + off + p.mat->size(),
              p.mat->d.begin());
    off += p.mat->size();
  }
}

void init_params(const std::vector<NamedParam>& params, uint64_t seed, double scale) {
  for (size_t i = 0; i < params.size(); ++i) {
    std::mt19937_64 rng(derive_seed(seed, i));
    Mat& m = *params[i].mat;
    m = Mat::gaussian(m.rows, m.cols, scale, rng);
  }
}

SeqInfo assemble_sequence(const SubwordTokenizer& tok, const TokenString& ctx,
                          const TokenString& region) {
  std::set<int> region_pos;
  for (auto& t : region.tokens()) region_pos.insert(t.position);
  SeqInfo out;
  TokenString merged = ctx.merged(region);
  for (auto& t : merged.tokens()) {
    std::vector<int> ids = tok.split_word(t.surface);
    int begin = static_cast<int>(out.ids.size());
    out.ids.insert(out.ids.end(), ids.begin(), ids.end());
    out.bounds.push_back({begin, begin + static_cast<int>(ids.size())});
    out.is_region.push_back(region_pos.count(t.position) > 0);
  }
  return out;
}

void require_causal_order(const TokenString& ctx, const TokenString& region) {
  if (ctx.empty() || region.empty()) return;
  int last_ctx = ctx.tokens().back().position;
  int first_region = region.tokens().front().position;
  if (last_ctx > first_region)
    throw BackendError("causal scoring requires the region to follow the context "
                       "(context position " +
                       std::to_string(last_ctx) + " follows region position " +
                       std::to_string(first_region) + ")");
}

}  // namespace detail

}  // namespace perturbkit
