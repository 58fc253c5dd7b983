#include "perturbkit/cli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <map>
#include <ostream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "perturbkit/analysis.hpp"
#include "perturbkit/common.hpp"

namespace perturbkit {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

json parse_object(const std::string& text, const std::string& what) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ParseError("bad " + what + " JSON: " + e.what());
  }
  if (!j.is_object()) throw ParseError(what + " JSON must be an object");
  return j;
}

void reject_unknown(const json& j, const std::set<std::string>& known,
                    const std::string& what) {
  for (auto& [key, value] : j.items())
    if (!known.count(key))
      throw ConfigError("unknown " + what + " key '" + key + "'");
}

const char* row_unit_name(MatrixBuildOptions::RowUnit unit) {
  return unit == MatrixBuildOptions::RowUnit::items ? "items" : "groups";
}

MatrixBuildOptions::RowUnit row_unit_from_name(const std::string& name) {
  if (name == "items") return MatrixBuildOptions::RowUnit::items;
  if (name == "groups") return MatrixBuildOptions::RowUnit::groups;
  throw ConfigError("unknown row unit '" + name + "'");
}

std::string stem_of(const std::string& prefix) {
  return fs::path(prefix).filename().string();
}

void kv(std::ostream& os, const std::string& key, const std::string& value) {
  os << key << "=" << value << "\n";
}

void kv(std::ostream& os, const std::string& key, double value) {
  kv(os, key, format_double(value));
}

void kv(std::ostream& os, const std::string& key, long long value) {
  kv(os, key, std::to_string(value));
}

BackendSpec backend_from_json(const json& j) {
  reject_unknown(j, {"name", "checkpoint", "config", "trained"}, "backend");
  BackendSpec spec;
  try {
    spec.name = j.value("name", spec.name);
    spec.checkpoint = j.value("checkpoint", spec.checkpoint);
    if (j.contains("config")) {
      if (!j.at("config").is_object())
        throw ConfigError("backend config must be an object");
      spec.config_json = j.at("config").dump();
    }
    spec.trained = j.value("trained", spec.trained);
  } catch (const json::exception& e) {
    throw ParseError(std::string("bad backend field: ") + e.what());
  }
  return spec;
}

AnalysisFlags analysis_from_json(const json& j) {
  reject_unknown(j,
                 {"symmetrize", "exclude_diagonal", "reweight",
                  "permutation_mode", "n_permutations", "group_by", "balanced"},
                 "analysis");
  AnalysisFlags flags;
  try {
    flags.symmetrize = j.value("symmetrize", flags.symmetrize);
    flags.exclude_diagonal = j.value("exclude_diagonal", flags.exclude_diagonal);
    flags.reweight = j.value("reweight", flags.reweight);
    flags.permutation_mode = j.value("permutation_mode", flags.permutation_mode);
    flags.n_permutations = j.value("n_permutations", flags.n_permutations);
    if (j.contains("group_by"))
      flags.group_by = j.at("group_by").get<std::vector<std::string>>();
    flags.balanced = j.value("balanced", flags.balanced);
  } catch (const json::exception& e) {
    throw ParseError(std::string("bad analysis field: ") + e.what());
  }
  if (flags.n_permutations < 0)
    throw ConfigError("n_permutations must be nonnegative");
  return flags;
}

HyperGrid hyper_from_json(const json& j) {
  reject_unknown(j, {"learning_rates", "step_counts", "objective"}, "hyper");
  HyperGrid grid;
  try {
    if (j.contains("learning_rates"))
      grid.learning_rates = j.at("learning_rates").get<std::vector<double>>();
    if (j.contains("step_counts"))
      grid.step_counts = j.at("step_counts").get<std::vector<int>>();
    grid.objective = j.value("objective", grid.objective);
  } catch (const json::exception& e) {
    throw ParseError(std::string("bad hyper field: ") + e.what());
  }
  return grid;
}

PermutationMode permutation_mode_from_name(const std::string& name) {
  if (name == "columns") return PermutationMode::columns;
  if (name == "full") return PermutationMode::full;
  throw ConfigError("unknown permutation mode '" + name + "'");
}

/// Checkpoint prefixes resolve as given, then under $PERTURBKIT_CACHE.
std::string resolve_checkpoint(const std::string& prefix) {
  if (file_exists(prefix + ".json")) return prefix;
  const char* cache = std::getenv("PERTURBKIT_CACHE");
  if (cache && *cache && !prefix.empty() && prefix.front() != '/') {
    std::string alt = std::string(cache) + "/" + prefix;
    if (file_exists(alt + ".json")) return alt;
  }
  throw ConfigError("checkpoint '" + prefix +
                    "' not found (set PERTURBKIT_CACHE for a cache directory)");
}

std::string model_fingerprint(const Model& model) {
  StateSnapshot snap = model.snapshot_state();
  std::string bytes(reinterpret_cast<const char*>(snap.blob.data()),
                    snap.blob.size() * sizeof(double));
  return hex64(fnv1a64(snap.manifest_json + bytes));
}

/// Evaluation vetoes for filler-gap grids: the eval item must not reuse the
/// train item's critical-region words. Control columns are exempt; their
/// completions repeat across items by design.
bool fg_pair_admissible(const LabeledExample& train, const LabeledExample& eval) {
  auto fam = eval.factors.find("family");
  if (fam != eval.factors.end() && fam->second == "ctrl") return true;
  return regions_disjoint(train.remapping, eval.remapping);
}

/// Tokenization factors need nonempty regions on every item, which deletion
/// remappings do not guarantee.
void annotate_if_possible(LabeledExampleSet& set, const SubwordTokenizer& tok) {
  for (const auto& item : set.items)
    if (item.remapping.region_original.empty() ||
        item.remapping.region_alternate.empty())
      return;
  annotate_tokenization(set, tok);
}

void write_lines(const std::string& path, const std::vector<std::string>& lines) {
  std::string text;
  for (const auto& line : lines) text += line + "\n";
  write_text_file_atomic(path, text);
}

/// Drop the resolved config and a manifest into the output directory. The
/// pair is what a bit-identical rerun needs: point --config at the copy.
void write_run_artifacts(const RunConfig& cfg, const std::string& command,
                         const std::vector<std::string>& outputs,
                         const std::string& backend_fingerprint,
                         const json& request = json()) {
  ensure_directory(cfg.out);
  std::string config_text = run_config_to_json(cfg);
  write_text_file_atomic(cfg.out + "/config.json", config_text);
  json m;
  m["format"] = "perturbkit-run";
  m["version"] = 1;
  m["command"] = command;
  m["config"] = "config.json";
  m["config_hash"] = hex64(fnv1a64(config_text));
  m["seed"] = cfg.seed;
  if (!backend_fingerprint.empty())
    m["backend_fingerprint"] = backend_fingerprint;
  if (!request.is_null()) m["request"] = request;
  m["outputs"] = outputs;
  write_text_file_atomic(cfg.out + "/manifest.json", m.dump(2) + "\n");
}

MatrixBuildOptions resolved_build_options(const RunConfig& cfg,
                                          const LoadedDataset& ds) {
  MatrixBuildOptions opts;
  opts.row_unit =
      cfg.row_unit.empty() ? ds.row_unit : row_unit_from_name(cfg.row_unit);
  opts.trials = cfg.trials > 0 ? cfg.trials : ds.default_trials;
  opts.evals_per_cell =
      cfg.evals_per_cell > 0 ? cfg.evals_per_cell : ds.default_evals;
  opts.jobs = cfg.jobs;
  opts.skip_failures = cfg.skip_failures;
  return opts;
}

LoadedDataset load_morph(const json& j, std::vector<std::string>& notes) {
  reject_unknown(j, {"id", "pairs", "sentences", "variant", "variant_word"},
                 "morph-er dataset");
  if (!j.contains("pairs") || !j.at("pairs").is_object() || j.at("pairs").empty())
    throw ConfigError("morph-er needs a \"pairs\" object of class -> path");
  if (!j.contains("sentences"))
    throw ConfigError("morph-er needs a \"sentences\" pool file");
  std::vector<MorphItem> items;
  for (auto& [cls, path] : j.at("pairs").items()) {
    auto part = read_bats_pairs(path.get<std::string>(), cls, &notes);
    items.insert(items.end(), part.begin(), part.end());
  }
  auto pool = read_sentence_pool(j.at("sentences").get<std::string>());
  items = attach_sentences(std::move(items), pool, &notes);
  MorphVariant variant;
  variant.kind = morph_variant_kind_from_name(j.value("variant", "standard"));
  variant.word = j.value("variant_word", "");
  LoadedDataset ds;
  ds.id = "morph-er";
  LabeledExampleSet set = build_morph_remappings(items, variant);
  ds.jobs.push_back({"items", set, set, false, false});
  return ds;
}

LoadedDataset load_wsd(const json& j, uint64_t seed,
                       std::vector<std::string>& notes) {
  reject_unknown(j, {"id", "pools", "target", "per_word"}, "cwsd20 dataset");
  if (!j.contains("pools"))
    throw ConfigError("cwsd20 needs a \"pools\" directory");
  if (!j.contains("target"))
    throw ConfigError("cwsd20 needs a nonce \"target\" word");
  WsdCorpus corpus = read_wsd_pools(j.at("pools").get<std::string>());
  notes.insert(notes.end(), corpus.notes.begin(), corpus.notes.end());
  std::map<std::string, std::vector<WsdItem>> pools = corpus.pools;
  int per_word = j.value("per_word", 0);
  if (per_word > 0) {
    WsdSample sample = sample_balanced_wsd(pools, per_word, seed);
    pools = sample.per_word;
    notes.insert(notes.end(), sample.deficits.begin(), sample.deficits.end());
  }
  LoadedDataset ds;
  ds.id = "cwsd20";
  const std::string target = j.at("target").get<std::string>();
  for (auto& [word, items] : pools) {
    LabeledExampleSet set = build_wsd_remappings(items, target);
    ds.jobs.push_back({word, set, set, false, false});
  }
  if (ds.jobs.empty()) throw ConfigError("cwsd20 pools are empty");
  return ds;
}

LoadedDataset load_fillergap(const json& j) {
  reject_unknown(j, {"id", "csv"}, "fillergap dataset");
  if (!j.contains("csv")) throw ConfigError("fillergap needs a \"csv\" path");
  std::vector<FgItem> items = read_fg_csv(j.at("csv").get<std::string>());
  LoadedDataset ds;
  ds.id = "fillergap";
  LabeledExampleSet train = build_fg_remappings(items, FgRole::train);
  ds.jobs.push_back(
      {"fg", train, build_fg_remappings(items, FgRole::eval_fg), true, true});
  ds.jobs.push_back({"nonfg", train,
                     build_fg_remappings(items, FgRole::eval_nonfg), true, true});
  if (std::any_of(items.begin(), items.end(),
                  [](const FgItem& it) { return it.control(); }))
    ds.jobs.push_back({"ctrl", train,
                       build_fg_remappings(items, FgRole::eval_ctrl), true, true});
  ds.baselines.push_back({"fg", "nonfg", "baselined"});
  ds.row_unit = MatrixBuildOptions::RowUnit::groups;
  ds.default_trials = 5;
  ds.default_evals = 25;
  return ds;
}

LoadedDataset load_synth(const json& j, uint64_t seed) {
  reject_unknown(j, {"id", "classes", "items_per_class", "corpus_repeats"},
                 "synth-grammar dataset");
  SyntheticGrammarSpec spec;
  try {
    spec.classes = j.value("classes", spec.classes);
    spec.items_per_class = j.value("items_per_class", spec.items_per_class);
    spec.corpus_repeats = j.value("corpus_repeats", spec.corpus_repeats);
  } catch (const json::exception& e) {
    throw ParseError(std::string("bad synth-grammar field: ") + e.what());
  }
  SyntheticBenchmark bench = make_synthetic_benchmark(spec);
  LoadedDataset ds;
  ds.id = "synth-grammar";
  ds.jobs.push_back({"items", bench.items, bench.items, false, false});
  ds.corpus = bench.corpus;
  json hints;
  hints["vocab"] = bench.lm.vocab;
  hints["embedding_dim"] = bench.lm.embedding_dim;
  hints["hidden_dim"] = bench.lm.hidden_dim;
  hints["context_window"] = bench.lm.context_window;
  hints["init_scale"] = bench.lm.init_scale;
  hints["seed"] = seed;
  ds.suggested_backend_config = hints.dump();
  return ds;
}

LoadedDataset load_jsonl(const json& j) {
  reject_unknown(j, {"id", "set", "corpus"}, "jsonl dataset");
  if (!j.contains("set")) throw ConfigError("jsonl needs a \"set\" path");
  LabeledExampleSet set = load_set(j.at("set").get<std::string>());
  LoadedDataset ds;
  ds.id = set.dataset_id;
  ds.jobs.push_back({"items", set, set, false, false});
  if (j.contains("corpus"))
    for (const auto& line : read_sentence_pool(j.at("corpus").get<std::string>()))
      ds.corpus.push_back(TokenString::from_text(line));
  return ds;
}

}  // namespace

RunConfig run_config_from_json(const std::string& text) {
  json j = parse_object(text, "run config");
  reject_unknown(j,
                 {"backend", "dataset", "perturbation", "trials",
                  "evals_per_cell", "row_unit", "analysis", "hyper",
                  "class_factor", "plot", "out", "seed", "jobs",
                  "skip_failures"},
                 "run config");
  RunConfig cfg;
  try {
    if (j.contains("backend")) {
      if (!j.at("backend").is_object())
        throw ConfigError("\"backend\" must be an object");
      cfg.backend = backend_from_json(j.at("backend"));
    }
    if (j.contains("dataset")) {
      if (!j.at("dataset").is_object())
        throw ConfigError("\"dataset\" must be an object");
      cfg.dataset_json = j.at("dataset").dump();
    }
    if (j.contains("perturbation"))
      cfg.perturbation = perturbation_config_from_json(j.at("perturbation").dump());
    cfg.trials = j.value("trials", cfg.trials);
    cfg.evals_per_cell = j.value("evals_per_cell", cfg.evals_per_cell);
    cfg.row_unit = j.value("row_unit", cfg.row_unit);
    if (j.contains("analysis")) {
      if (!j.at("analysis").is_object())
        throw ConfigError("\"analysis\" must be an object");
      cfg.analysis = analysis_from_json(j.at("analysis"));
    }
    if (j.contains("hyper")) {
      if (!j.at("hyper").is_object())
        throw ConfigError("\"hyper\" must be an object");
      cfg.hyper = hyper_from_json(j.at("hyper"));
    }
    cfg.class_factor = j.value("class_factor", cfg.class_factor);
    if (j.contains("plot")) cfg.plot = plot_spec_from_json(j.at("plot").dump());
    cfg.out = j.value("out", cfg.out);
    if (j.contains("seed")) {
      cfg.seed = j.at("seed").get<uint64_t>();
      cfg.seed_set = true;
    }
    cfg.jobs = j.value("jobs", cfg.jobs);
    cfg.skip_failures = j.value("skip_failures", cfg.skip_failures);
  } catch (const json::exception& e) {
    throw ParseError(std::string("bad run config field: ") + e.what());
  }
  if (!cfg.row_unit.empty()) row_unit_from_name(cfg.row_unit);
  if (cfg.trials < 0 || cfg.evals_per_cell < 0)
    throw ConfigError("trials and evals_per_cell must be nonnegative");
  if (cfg.jobs < 1) throw ConfigError("jobs must be at least 1");
  if (cfg.out.empty()) throw ConfigError("output directory must not be empty");
  return cfg;
}

std::string run_config_to_json(const RunConfig& cfg) {
  json j;
  j["backend"] = {{"name", cfg.backend.name},
                  {"checkpoint", cfg.backend.checkpoint},
                  {"config", json::parse(cfg.backend.config_json)},
                  {"trained", cfg.backend.trained}};
  if (!cfg.dataset_json.empty()) j["dataset"] = json::parse(cfg.dataset_json);
  j["perturbation"] = json::parse(perturbation_config_to_json(cfg.perturbation));
  j["trials"] = cfg.trials;
  j["evals_per_cell"] = cfg.evals_per_cell;
  if (!cfg.row_unit.empty()) j["row_unit"] = cfg.row_unit;
  j["analysis"] = {{"symmetrize", cfg.analysis.symmetrize},
                   {"exclude_diagonal", cfg.analysis.exclude_diagonal},
                   {"reweight", cfg.analysis.reweight},
                   {"permutation_mode", cfg.analysis.permutation_mode},
                   {"n_permutations", cfg.analysis.n_permutations},
                   {"group_by", cfg.analysis.group_by},
                   {"balanced", cfg.analysis.balanced}};
  if (!cfg.hyper.learning_rates.empty() || !cfg.hyper.step_counts.empty())
    j["hyper"] = {{"learning_rates", cfg.hyper.learning_rates},
                  {"step_counts", cfg.hyper.step_counts},
                  {"objective", cfg.hyper.objective}};
  if (!cfg.class_factor.empty()) j["class_factor"] = cfg.class_factor;
  j["plot"] = json::parse(plot_spec_to_json(cfg.plot));
  j["out"] = cfg.out;
  j["seed"] = cfg.seed;
  j["jobs"] = cfg.jobs;
  j["skip_failures"] = cfg.skip_failures;
  return j.dump(2) + "\n";
}

LoadedDataset load_dataset(const std::string& dataset_json, uint64_t seed) {
  if (trim(dataset_json).empty())
    throw ConfigError("no dataset configured");
  json j = parse_object(dataset_json, "dataset");
  if (!j.contains("id")) throw ConfigError("dataset needs an \"id\"");
  const std::string id = j.at("id").get<std::string>();
  std::vector<std::string> notes;
  LoadedDataset ds;
  if (id == "morph-er")
    ds = load_morph(j, notes);
  else if (id == "cwsd20")
    ds = load_wsd(j, seed, notes);
  else if (id == "fillergap")
    ds = load_fillergap(j);
  else if (id == "synth-grammar")
    ds = load_synth(j, seed);
  else if (id == "jsonl")
    ds = load_jsonl(j);
  else
    throw ConfigError("unknown dataset id '" + id + "'");
  ds.notes.insert(ds.notes.end(), notes.begin(), notes.end());
  return ds;
}

ModelPtr resolve_backend(const BackendSpec& spec, const LoadedDataset& dataset,
                         uint64_t seed) {
  if (!spec.checkpoint.empty())
    return load_state(resolve_checkpoint(spec.checkpoint));
  json merged = dataset.suggested_backend_config.empty()
                    ? json::object()
                    : json::parse(dataset.suggested_backend_config);
  json user = parse_object(spec.config_json, "backend config");
  for (auto& [key, value] : user.items()) merged[key] = value;
  if (!spec.trained) {
    merged.erase("corpus");
    merged.erase("target_loss");
    merged["pretrain_steps"] = 0;
  } else if (!dataset.corpus.empty() && !merged.contains("corpus")) {
    std::vector<std::string> lines;
    lines.reserve(dataset.corpus.size());
    for (const auto& ts : dataset.corpus) lines.push_back(ts.text());
    merged["corpus"] = lines;
    if (!merged.contains("pretrain_steps")) merged["pretrain_steps"] = 300;
    if (!merged.contains("pretrain_lr")) merged["pretrain_lr"] = 0.1;
  }
  if (!merged.contains("seed")) merged["seed"] = seed;
  try {
    return make_backend(spec.name, merged.dump());
  } catch (const Error&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError("backend '" + spec.name + "' construction failed: " +
                      e.what());
  }
}

int cmd_matrix(const RunConfig& cfg, std::ostream& os) {
  LoadedDataset ds = load_dataset(cfg.dataset_json, cfg.seed);
  ModelPtr model = resolve_backend(cfg.backend, ds, cfg.seed);
  PerturbationConfig pcfg = cfg.perturbation;
  pcfg.seed = cfg.seed;
  MatrixBuildOptions opts = resolved_build_options(cfg, ds);

  ensure_directory(cfg.out);
  kv(os, "dataset.id", ds.id);
  kv(os, "backend.id", model->backend_id());
  kv(os, "row_unit", row_unit_name(opts.row_unit));
  kv(os, "trials", static_cast<long long>(opts.trials));
  kv(os, "evals_per_cell", static_cast<long long>(opts.evals_per_cell));

  std::map<std::string, TransferMatrix> built;
  std::vector<std::string> outputs;
  long long skipped_total = 0;
  auto emit = [&](const std::string& name, const TransferMatrix& m) {
    save_matrix(m, cfg.out + "/" + name);
    outputs.push_back(name + ".csv");
    outputs.push_back(name + ".json");
    kv(os, "matrix." + name + ".rows", static_cast<long long>(m.rows()));
    kv(os, "matrix." + name + ".cols", static_cast<long long>(m.cols()));
    kv(os, "matrix." + name + ".skipped",
       static_cast<long long>(m.skipped.size()));
    skipped_total += static_cast<long long>(m.skipped.size());
  };

  for (const MatrixJob& job : ds.jobs) {
    LabeledExampleSet train = job.train;
    annotate_if_possible(train, model->tokenizer());
    if (!cfg.class_factor.empty())
      train = relabel_by_factor(train, cfg.class_factor);
    MatrixBuildOptions job_opts = opts;
    if (job.disjoint_regions) job_opts.pair_filter = fg_pair_admissible;
    std::vector<EffectRecord> records;
    TransferMatrix m;
    if (job.rectangular) {
      LabeledExampleSet eval = job.eval;
      annotate_if_possible(eval, model->tokenizer());
      if (!cfg.class_factor.empty())
        eval = relabel_by_factor(eval, cfg.class_factor);
      m = build_transfer_matrix(*model, train, eval, pcfg, job_opts, &records);
    } else {
      m = build_transfer_matrix(*model, train, pcfg, job_opts, &records);
    }
    save_effect_records(cfg.out + "/" + job.name + "_records.csv", records);
    outputs.push_back(job.name + "_records.csv");
    emit(job.name, m);
    built[job.name] = std::move(m);
  }
  for (const auto& [minuend, subtrahend, name] : ds.baselines)
    emit(name, baselined_transfer(built.at(minuend), built.at(subtrahend)));

  if (!ds.notes.empty()) {
    write_lines(cfg.out + "/notes.log", ds.notes);
    outputs.push_back("notes.log");
  }
  kv(os, "notes", static_cast<long long>(ds.notes.size()));
  kv(os, "skipped_trials", skipped_total);
  write_run_artifacts(cfg, "matrix", outputs, model_fingerprint(*model));
  kv(os, "manifest", cfg.out + "/manifest.json");
  return 0;
}

int cmd_analyze(const RunConfig& cfg, const AnalyzeRequest& req,
                std::ostream& os) {
  ensure_directory(cfg.out);
  json report;
  std::string report_name;

  if (req.which == "auc") {
    if (req.matrices.empty())
      throw ConfigError("auc needs at least one matrix prefix");
    ClusterabilityOptions copts{cfg.analysis.exclude_diagonal,
                                cfg.analysis.reweight};
    double sum = 0.0;
    for (const auto& prefix : req.matrices) {
      TransferMatrix m = load_matrix(prefix);
      if (cfg.analysis.symmetrize) m = symmetrize(m);
      ClusterabilityResult res = clusterability_auc(m, copts);
      const std::string name = stem_of(prefix);
      report["matrices"][name] = {{"auc", res.auc},
                                  {"reweighted", res.reweighted},
                                  {"positive_pairs", res.positive_pairs},
                                  {"negative_pairs", res.negative_pairs},
                                  {"per_class_weights", res.per_class_weights},
                                  {"warnings", res.warnings}};
      kv(os, "auc." + name, res.auc);
      sum += res.auc;
    }
    double mean = sum / static_cast<double>(req.matrices.size());
    report["mean_auc"] = mean;
    kv(os, "auc.mean", mean);
    report_name = "auc";
  } else if (req.which == "crs") {
    if (req.set_path.empty())
      throw ConfigError("crs needs --set with remapping JSONL");
    LabeledExampleSet set = load_set(req.set_path);
    std::map<std::string, LabelMultiset> by_class;
    for (const auto& item : set.items) {
      LabelMultiset& ms = by_class[item.class_label];
      for (const auto& tok : item.remapping.region_original.tokens())
        ++ms.counts[tok.surface];
      for (const auto& tok : item.remapping.region_alternate.tokens())
        ++ms.counts[tok.surface];
    }
    std::vector<std::string> labels;
    for (const auto& [label, ms] : by_class) labels.push_back(label);
    report["labels"] = labels;
    json values = json::array();
    for (const auto& a : labels) {
      json row = json::array();
      for (const auto& b : labels)
        row.push_back(crs_similarity(by_class.at(a), by_class.at(b)));
      values.push_back(row);
    }
    report["values"] = values;
    for (size_t i = 0; i < labels.size(); ++i)
      for (size_t k = i + 1; k < labels.size(); ++k)
        kv(os, "crs." + labels[i] + "/" + labels[k],
           values[i][k].get<double>());
    report_name = "crs";
  } else if (req.which == "permtest") {
    if (req.matrices.size() < 2)
      throw ConfigError("permtest needs at least two matrix prefixes");
    std::vector<TransferMatrix> ms;
    for (const auto& prefix : req.matrices) {
      TransferMatrix m = load_matrix(prefix);
      if (cfg.analysis.symmetrize) m = symmetrize(m);
      ms.push_back(std::move(m));
    }
    PermutationResult res = permutation_test(
        ms, permutation_mode_from_name(cfg.analysis.permutation_mode),
        cfg.analysis.n_permutations, cfg.seed);
    report["observed"] = res.observed;
    report["p_value"] = res.p_value;
    report["n_permutations"] = res.n_permutations;
    report["mode"] = cfg.analysis.permutation_mode;
    kv(os, "permtest.observed", res.observed);
    kv(os, "permtest.p_value", res.p_value);
    kv(os, "permtest.n_permutations",
       static_cast<long long>(res.n_permutations));
    report_name = "permtest";
  } else if (req.which == "aggregate") {
    if (req.records_path.empty())
      throw ConfigError("aggregate needs --records with an effect record CSV");
    if (cfg.analysis.group_by.empty())
      throw ConfigError("aggregate needs analysis.group_by factors");
    std::vector<EffectRecord> records = load_effect_records(req.records_path);
    AggregateResult res =
        aggregate_effects(records, cfg.analysis.group_by, cfg.analysis.balanced,
                          cfg.analysis.n_permutations, cfg.seed);
    json cells = json::array();
    for (const auto& cell : res.cells)
      cells.push_back(
          {{"levels", cell.levels}, {"mean", cell.mean}, {"n", cell.n}});
    report["cells"] = cells;
    for (const auto& [factor, means] : res.marginals) {
      json levels = json::array();
      for (const auto& lm : means) {
        levels.push_back(
            {{"level", lm.level}, {"mean", lm.mean}, {"cells", lm.cells}});
        kv(os, "aggregate." + factor + "." + lm.level, lm.mean);
      }
      report["marginals"][factor] = levels;
    }
    json contrasts = json::array();
    for (const auto& c : res.contrasts) {
      contrasts.push_back({{"factor", c.factor},
                           {"level_a", c.level_a},
                           {"level_b", c.level_b},
                           {"difference", c.difference},
                           {"p_value", c.p_value}});
      const std::string key =
          "contrast." + c.factor + "." + c.level_a + "/" + c.level_b;
      kv(os, key, c.difference);
      kv(os, key + ".p_value", c.p_value);
    }
    report["contrasts"] = contrasts;
    report["balanced"] = res.balanced;
    report_name = "aggregate";
  } else {
    throw ConfigError("unknown analysis '" + req.which +
                      "' (auc, crs, permtest, aggregate)");
  }

  write_text_file_atomic(cfg.out + "/" + report_name + ".json",
                         report.dump(2) + "\n");
  json request = {{"which", req.which},
                  {"matrices", req.matrices},
                  {"set", req.set_path},
                  {"records", req.records_path}};
  write_run_artifacts(cfg, "analyze", {report_name + ".json"}, "", request);
  kv(os, "report", cfg.out + "/" + report_name + ".json");
  return 0;
}

int cmd_hyper(const RunConfig& cfg, std::ostream& os) {
  if (cfg.hyper.learning_rates.empty() || cfg.hyper.step_counts.empty())
    throw ConfigError("hyper grid is empty");
  LoadedDataset ds = load_dataset(cfg.dataset_json, cfg.seed);
  ModelPtr model = resolve_backend(cfg.backend, ds, cfg.seed);
  PerturbationConfig pcfg = cfg.perturbation;
  pcfg.seed = cfg.seed;
  MatrixBuildOptions opts = resolved_build_options(cfg, ds);

  LabeledExampleSet train = ds.jobs.front().train;
  annotate_if_possible(train, model->tokenizer());
  if (!cfg.class_factor.empty())
    train = relabel_by_factor(train, cfg.class_factor);
  ClusterabilityOptions copts{cfg.analysis.exclude_diagonal,
                              cfg.analysis.reweight};
  HyperResult res = hyper_search(*model, train, cfg.hyper, pcfg, opts, copts);

  json points = json::array();
  for (size_t i = 0; i < res.points.size(); ++i) {
    const HyperPoint& pt = res.points[i];
    points.push_back({{"learning_rate", pt.learning_rate},
                      {"steps", pt.steps},
                      {"auc", pt.auc},
                      {"diverged", pt.diverged}});
    const std::string key = "hyper.point." + std::to_string(i);
    kv(os, key + ".learning_rate", pt.learning_rate);
    kv(os, key + ".steps", static_cast<long long>(pt.steps));
    kv(os, key + ".auc", pt.auc);
    kv(os, key + ".diverged", pt.diverged ? "true" : "false");
  }
  json report;
  report["points"] = points;
  report["best"] = {{"learning_rate", res.learning_rate},
                    {"steps", res.steps},
                    {"auc", res.auc}};
  kv(os, "hyper.best.learning_rate", res.learning_rate);
  kv(os, "hyper.best.steps", static_cast<long long>(res.steps));
  kv(os, "hyper.best.auc", res.auc);

  ensure_directory(cfg.out);
  write_text_file_atomic(cfg.out + "/hyper.json", report.dump(2) + "\n");
  write_run_artifacts(cfg, "hyper", {"hyper.json"}, model_fingerprint(*model));
  kv(os, "report", cfg.out + "/hyper.json");
  return 0;
}

int cmd_plot(const RunConfig& cfg, const PlotRequest& req, std::ostream& os) {
  ensure_directory(cfg.out);
  std::vector<std::string> outputs;
  if (req.kind == "heatmap") {
    if (req.matrices.empty())
      throw ConfigError("heatmap needs at least one matrix prefix");
    for (const auto& prefix : req.matrices) {
      TransferMatrix m = load_matrix(prefix);
      if (cfg.analysis.symmetrize) m = symmetrize(m);
      const std::string name = stem_of(prefix);
      write_text_file_atomic(cfg.out + "/" + name + ".svg",
                             heatmap_svg(m, cfg.plot));
      outputs.push_back(name + ".svg");
      kv(os, "plot." + name, cfg.out + "/" + name + ".svg");
    }
  } else if (req.kind == "distribution") {
    std::vector<EffectRecord> records;
    if (!req.records_path.empty()) {
      records = load_effect_records(req.records_path);
    } else if (!req.matrices.empty()) {
      for (const auto& prefix : req.matrices) {
        auto part = matrix_cells_to_records(load_matrix(prefix));
        records.insert(records.end(), part.begin(), part.end());
      }
    } else {
      throw ConfigError("distribution needs --records or matrix prefixes");
    }
    write_text_file_atomic(cfg.out + "/distribution.svg",
                           distribution_svg(records, cfg.plot));
    outputs.push_back("distribution.svg");
    kv(os, "plot.distribution", cfg.out + "/distribution.svg");
  } else {
    throw ConfigError("unknown plot kind '" + req.kind +
                      "' (heatmap, distribution)");
  }
  json request = {{"kind", req.kind},
                  {"matrices", req.matrices},
                  {"records", req.records_path}};
  write_run_artifacts(cfg, "plot", outputs, "", request);
  return 0;
}

int cmd_perplexity(const RunConfig& cfg, const std::string& corpus_path,
                   const std::string& item_id, std::ostream& os) {
  LoadedDataset ds;
  if (!trim(cfg.dataset_json).empty())
    ds = load_dataset(cfg.dataset_json, cfg.seed);
  else if (corpus_path.empty())
    throw ConfigError("no dataset configured");
  ModelPtr model = resolve_backend(cfg.backend, ds, cfg.seed);
  if (model->mode() != Mode::causal)
    throw BackendError("perplexity requires a causal backend");

  std::vector<TokenString> corpus;
  if (!corpus_path.empty())
    for (const auto& line : read_sentence_pool(corpus_path))
      corpus.push_back(TokenString::from_text(line));
  else
    corpus = ds.corpus;
  if (corpus.empty())
    throw ConfigError("no corpus to score (pass --corpus or a dataset with one)");

  double base = model->perplexity(corpus);
  ModelPtr tuned = model;
  std::string id = item_id;
  if (id != "none") {
    if (ds.jobs.empty())
      throw ConfigError("no dataset items to perturb on (use --item none)");
    const LabeledExampleSet& set = ds.jobs.front().train;
    const LabeledExample* item = nullptr;
    if (id.empty()) {
      item = &set.items.front();
      id = item->remapping.id;
    } else {
      for (const auto& cand : set.items)
        if (cand.remapping.id == id) item = &cand;
      if (!item) throw ConfigError("item '" + id + "' not found in the dataset");
    }
    PerturbationConfig pcfg = cfg.perturbation;
    pcfg.seed = cfg.seed;
    pcfg.score.first_subword_only =
        pcfg.score.first_subword_only || item->first_subword_only;
    tuned = perturb(*model, {item->remapping}, pcfg);
  }
  double perturbed = tuned->perplexity(corpus);
  double delta = perturbed - base;

  kv(os, "item", id);
  kv(os, "perplexity.base", base);
  kv(os, "perplexity.perturbed", perturbed);
  kv(os, "perplexity.delta", delta);
  kv(os, "perplexity.relative", std::fabs(delta) / base);

  json report = {{"item", id},
                 {"base", base},
                 {"perturbed", perturbed},
                 {"delta", delta},
                 {"relative", std::fabs(delta) / base},
                 {"sentences", corpus.size()}};
  ensure_directory(cfg.out);
  write_text_file_atomic(cfg.out + "/perplexity.json", report.dump(2) + "\n");
  write_run_artifacts(cfg, "perplexity", {"perplexity.json"},
                      model_fingerprint(*model));
  kv(os, "report", cfg.out + "/perplexity.json");
  return 0;
}

int cmd_ingest(const RunConfig& cfg, std::ostream& os) {
  LoadedDataset ds = load_dataset(cfg.dataset_json, cfg.seed);
  ensure_directory(cfg.out);
  kv(os, "dataset.id", ds.id);
  std::vector<std::string> outputs;
  bool train_written = false;
  for (const MatrixJob& job : ds.jobs) {
    if (job.rectangular && !train_written) {
      save_set(job.train, cfg.out + "/train.jsonl");
      outputs.push_back("train.jsonl");
      kv(os, "ingest.train.items",
         static_cast<long long>(job.train.items.size()));
      train_written = true;
    }
    const LabeledExampleSet& set = job.rectangular ? job.eval : job.train;
    save_set(set, cfg.out + "/" + job.name + ".jsonl");
    outputs.push_back(job.name + ".jsonl");
    kv(os, "ingest." + job.name + ".items",
       static_cast<long long>(set.items.size()));
  }
  if (!ds.corpus.empty()) {
    std::vector<std::string> lines;
    lines.reserve(ds.corpus.size());
    for (const auto& ts : ds.corpus) lines.push_back(ts.text());
    write_lines(cfg.out + "/corpus.txt", lines);
    outputs.push_back("corpus.txt");
    kv(os, "ingest.corpus.sentences", static_cast<long long>(lines.size()));
  }
  if (!ds.notes.empty()) {
    write_lines(cfg.out + "/notes.log", ds.notes);
    outputs.push_back("notes.log");
  }
  kv(os, "notes", static_cast<long long>(ds.notes.size()));
  write_run_artifacts(cfg, "datasets ingest", outputs, "");
  kv(os, "manifest", cfg.out + "/manifest.json");
  return 0;
}

}  // namespace perturbkit
