#include "perturbkit/benchmarks.hpp"

#include <algorithm>
#include <cctype>
#include <filesystem>
#include <limits>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <unordered_map>

#include "perturbkit/common.hpp"
#include "perturbkit/csv.hpp"

namespace perturbkit {

namespace {

/// Words of `sentence` minus the word at `hole`, keeping original positions.
TokenString hole_context(const std::vector<std::string>& words, size_t hole) {
  std::vector<Token> toks;
  toks.reserve(words.size() - 1);
  for (size_t i = 0; i < words.size(); ++i) {
    if (i != hole) toks.push_back({words[i], static_cast<int>(i) + 1});
  }
  return TokenString(std::move(toks));
}

TokenString word_at(const std::string& word, int position) {
  return TokenString({{word, position}});
}

std::string first_word(const std::string& text) {
  auto words = split_whitespace(text);
  return words.empty() ? std::string() : words.front();
}

std::vector<std::string> read_lines(const std::string& path) {
  std::istringstream in(read_text_file(path));
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  return lines;
}

}  // namespace

// ---------------------------------------------------------------------------
// Morphology.
// ---------------------------------------------------------------------------

const char* morph_variant_name(MorphVariant::Kind kind) {
  switch (kind) {
    case MorphVariant::Kind::standard: return "standard";
    case MorphVariant::Kind::no_context: return "no_context";
    case MorphVariant::Kind::common_target: return "common_target";
    case MorphVariant::Kind::novel_suffix: return "novel_suffix";
  }
  throw ConfigError("unknown morph variant");
}

MorphVariant::Kind morph_variant_kind_from_name(const std::string& name) {
  for (auto kind : {MorphVariant::Kind::standard, MorphVariant::Kind::no_context,
                    MorphVariant::Kind::common_target,
                    MorphVariant::Kind::novel_suffix}) {
    if (name == morph_variant_name(kind)) return kind;
  }
  throw ConfigError("unknown morph variant '" + name + "'");
}

LabeledExampleSet build_morph_remappings(const std::vector<MorphItem>& items,
                                         const MorphVariant& variant) {
  const bool parameterized = variant.kind == MorphVariant::Kind::common_target ||
                             variant.kind == MorphVariant::Kind::novel_suffix;
  if (parameterized && variant.word.empty()) {
    throw ConfigError(std::string("morph variant ") +
                      morph_variant_name(variant.kind) + " needs a word");
  }
  if (!parameterized && !variant.word.empty()) {
    throw ConfigError(std::string("morph variant ") +
                      morph_variant_name(variant.kind) + " takes no word");
  }

  LabeledExampleSet set;
  set.dataset_id = "morph-er";
  if (variant.kind != MorphVariant::Kind::standard) {
    set.dataset_id += std::string(":") + morph_variant_name(variant.kind);
  }

  std::map<std::string, int> seen;
  for (const auto& item : items) {
    auto words = split_whitespace(item.sentence);
    auto at = std::find(words.begin(), words.end(), item.suffixed);
    if (at == words.end()) {
      throw ConfigError("sentence for '" + item.suffixed +
                        "' lacks the suffixed word: " + item.sentence);
    }
    const auto hole = static_cast<size_t>(at - words.begin());

    std::string alternate;
    switch (variant.kind) {
      case MorphVariant::Kind::standard:
      case MorphVariant::Kind::no_context:
        alternate = item.base;
        break;
      case MorphVariant::Kind::common_target:
        alternate = variant.word;
        break;
      case MorphVariant::Kind::novel_suffix:
        alternate = item.base + variant.word;
        break;
    }

    Remapping m;
    m.id = item.suffixed;
    if (int n = ++seen[item.suffixed]; n > 1) m.id += "-" + std::to_string(n);
    if (variant.kind == MorphVariant::Kind::no_context) {
      m.region_original = word_at(item.suffixed, 1);
      m.region_alternate = word_at(alternate, 1);
    } else {
      m.context_original = hole_context(words, hole);
      m.context_alternate = m.context_original;
      const int pos = static_cast<int>(hole) + 1;
      m.region_original = word_at(item.suffixed, pos);
      m.region_alternate = word_at(alternate, pos);
    }

    set.items.push_back({std::move(m),
                         item.class_label,
                         {{"class", item.class_label}, {"base", item.base}},
                         false});
  }
  return set;
}

std::vector<MorphItem> read_bats_pairs(const std::string& path,
                                       const std::string& class_label,
                                       std::vector<std::string>* notes) {
  std::vector<MorphItem> items;
  auto lines = read_lines(path);
  for (size_t ln = 0; ln < lines.size(); ++ln) {
    std::string line = lines[ln];
    if (auto hash = line.find('#'); hash != std::string::npos) {
      line = line.substr(0, hash);
    }
    line = trim(line);
    if (line.empty()) continue;

    auto cols = split_whitespace(line);
    if (cols.size() != 2) {
      throw ParseError(path + " line " + std::to_string(ln + 1) +
                       ": expected two columns");
    }
    for (auto& col : cols) col = col.substr(0, col.find('/'));
    if (!cols[1].ends_with("er")) {
      if (notes) {
        notes->push_back(path + " line " + std::to_string(ln + 1) + ": '" +
                         cols[1] + "' lacks the er suffix, skipped");
      }
      continue;
    }
    items.push_back({cols[0], cols[1], class_label, ""});
  }
  return items;
}

std::vector<std::string> read_sentence_pool(const std::string& path) {
  std::vector<std::string> sentences;
  for (const auto& line : read_lines(path)) {
    auto s = trim(line);
    if (!s.empty()) sentences.push_back(std::move(s));
  }
  return sentences;
}

std::vector<MorphItem> attach_sentences(std::vector<MorphItem> items,
                                        const std::vector<std::string>& pool,
                                        std::vector<std::string>* notes) {
  std::unordered_map<std::string, const std::string*> first_sentence;
  for (const auto& sentence : pool) {
    for (const auto& word : split_whitespace(sentence)) {
      first_sentence.emplace(word, &sentence);
    }
  }

  std::vector<MorphItem> out;
  out.reserve(items.size());
  for (auto& item : items) {
    auto hit = first_sentence.find(item.suffixed);
    if (hit == first_sentence.end()) {
      if (notes) {
        notes->push_back("no pool sentence contains '" + item.suffixed +
                         "', skipped");
      }
      continue;
    }
    item.sentence = *hit->second;
    out.push_back(std::move(item));
  }
  return out;
}

std::string tokenization_factor(const SubwordTokenizer& tok,
                                const Remapping& m) {
  if (m.region_original.empty() || m.region_alternate.empty()) {
    throw ConfigError("tokenization factor undefined for empty regions (" +
                      m.id + ")");
  }
  auto pieces_of = [&](const TokenString& s) {
    std::vector<int> ids;
    for (const auto& t : s.tokens()) {
      auto ps = tok.split_word(t.surface);
      ids.insert(ids.end(), ps.begin(), ps.end());
    }
    return ids;
  };
  auto orig = pieces_of(m.region_original);
  auto alt = pieces_of(m.region_alternate);
  const bool orig_single = orig.size() == 1;
  const bool alt_single = alt.size() == 1;
  if (orig_single && alt_single) return "single_single";
  if (orig_single != alt_single) return "single_multi";
  return orig.back() == alt.back() ? "multi_same" : "multi_diff";
}

void annotate_tokenization(LabeledExampleSet& set, const SubwordTokenizer& tok) {
  for (auto& item : set.items) {
    item.factors["tokenization"] = tokenization_factor(tok, item.remapping);
  }
}

// ---------------------------------------------------------------------------
// Word senses.
// ---------------------------------------------------------------------------

namespace {

bool is_lowercase(const std::string& s) {
  return std::none_of(s.begin(), s.end(), [](unsigned char c) {
    return std::isupper(c) != 0;
  });
}

/// 0-based index of the single occurrence of `word`, or -1.
int single_occurrence(const std::vector<std::string>& words,
                      const std::string& word) {
  int at = -1;
  for (size_t i = 0; i < words.size(); ++i) {
    if (words[i] != word) continue;
    if (at >= 0) return -1;
    at = static_cast<int>(i);
  }
  return at;
}

}  // namespace

LabeledExampleSet build_wsd_remappings(const std::vector<WsdItem>& items,
                                       const std::string& target) {
  if (split_whitespace(target).size() != 1) {
    throw ConfigError("wsd target must be a single word");
  }

  LabeledExampleSet set;
  set.dataset_id = "cwsd20";
  std::map<std::string, int> counter;
  for (const auto& item : items) {
    if (!is_lowercase(item.sentence)) {
      throw ConfigError("wsd sentence must be lowercase: " + item.sentence);
    }
    auto words = split_whitespace(item.sentence);
    const int hole = single_occurrence(words, item.word);
    if (hole < 0) {
      throw ConfigError("'" + item.word +
                        "' must occur exactly once in: " + item.sentence);
    }
    if (item.target_word_index > 0 && item.target_word_index != hole + 1) {
      throw ConfigError("target_word_index " +
                        std::to_string(item.target_word_index) +
                        " does not point at '" + item.word +
                        "' in: " + item.sentence);
    }
    if (std::find(words.begin(), words.end(), target) != words.end()) {
      throw ConfigError("target '" + target + "' occurs in: " + item.sentence);
    }

    Remapping m;
    m.id = item.word + "-" + std::to_string(++counter[item.word]);
    m.context_original = hole_context(words, static_cast<size_t>(hole));
    m.context_alternate = m.context_original;
    m.region_original = word_at(item.word, hole + 1);
    m.region_alternate = word_at(target, hole + 1);

    set.items.push_back({std::move(m),
                         item.sense_label,
                         {{"word", item.word}, {"sense", item.sense_label}},
                         false});
  }
  return set;
}

WsdCorpus read_wsd_pools(const std::string& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) {
    throw IoError("not a directory: " + dir);
  }

  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".txt") {
      files.push_back(entry.path());
    }
  }
  std::sort(files.begin(), files.end());

  WsdCorpus corpus;
  for (const auto& path : files) {
    const std::string stem = path.stem().string();
    const auto dot = stem.find('.');
    if (dot == std::string::npos || dot == 0 || dot + 1 == stem.size()) {
      throw ParseError("wsd pool file must be named <word>.<sense>.txt: " +
                       path.filename().string());
    }
    const std::string word = stem.substr(0, dot);
    const std::string sense = stem.substr(dot + 1);

    auto lines = read_lines(path.string());
    for (size_t ln = 0; ln < lines.size(); ++ln) {
      auto sentence = trim(lines[ln]);
      if (sentence.empty()) continue;
      const std::string where =
          word + "/" + sense + " line " + std::to_string(ln + 1);
      if (!is_lowercase(sentence)) {
        corpus.notes.push_back(where + ": not lowercase, rejected");
        continue;
      }
      auto words = split_whitespace(sentence);
      const int hole = single_occurrence(words, word);
      if (hole < 0) {
        corpus.notes.push_back(where + ": '" + word +
                               "' does not occur exactly once, rejected");
        continue;
      }
      corpus.pools[word].push_back({word, sense, sentence, hole + 1});
    }
  }
  return corpus;
}

WsdSample sample_balanced_wsd(
    const std::map<std::string, std::vector<WsdItem>>& pools, int per_word,
    uint64_t seed) {
  if (per_word <= 0) throw ConfigError("per_word must be positive");

  WsdSample out;
  for (const auto& [word, pool] : pools) {
    std::map<std::string, std::vector<const WsdItem*>> by_sense;
    for (const auto& item : pool) by_sense[item.sense_label].push_back(&item);
    if (by_sense.size() < 2) {
      throw ConfigError("word '" + word + "' has a single sense");
    }

    std::vector<std::string> senses;
    senses.reserve(by_sense.size());
    for (const auto& [sense, _] : by_sense) senses.push_back(sense);
    const auto k = senses.size();

    std::vector<int> want(k), take(k);
    for (size_t i = 0; i < k; ++i) {
      want[i] = per_word / static_cast<int>(k) +
                (i < static_cast<size_t>(per_word) % k ? 1 : 0);
      take[i] = std::min<int>(
          want[i], static_cast<int>(by_sense[senses[i]].size()));
    }

    int shortfall =
        per_word - std::accumulate(take.begin(), take.end(), 0);
    bool moved = true;
    while (shortfall > 0 && moved) {
      moved = false;
      for (size_t i = 0; i < k && shortfall > 0; ++i) {
        if (take[i] < static_cast<int>(by_sense[senses[i]].size())) {
          ++take[i];
          --shortfall;
          moved = true;
        }
      }
    }

    for (size_t i = 0; i < k; ++i) {
      if (take[i] < want[i]) {
        out.deficits.push_back(
            word + "/" + senses[i] + ": pool has " +
            std::to_string(by_sense[senses[i]].size()) + " of " +
            std::to_string(want[i]) + " requested");
      }
    }
    if (shortfall > 0) {
      out.deficits.push_back(word + ": only " +
                             std::to_string(per_word - shortfall) + " of " +
                             std::to_string(per_word) + " available");
    }

    auto& dest = out.per_word[word];
    for (size_t i = 0; i < k; ++i) {
      const auto& src = by_sense[senses[i]];
      std::vector<size_t> order(src.size());
      std::iota(order.begin(), order.end(), size_t{0});
      std::mt19937_64 rng(
          derive_seed(seed, fnv1a64(word), fnv1a64(senses[i])));
      std::shuffle(order.begin(), order.end(), rng);
      order.resize(static_cast<size_t>(take[i]));
      std::sort(order.begin(), order.end());
      for (auto j : order) dest.push_back(*src[j]);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Filler-gap frames.
// ---------------------------------------------------------------------------

std::string FgItem::condition() const {
  return construction + ":" + animacy + ":" + embedded;
}

const char* fg_role_name(FgRole role) {
  switch (role) {
    case FgRole::train: return "train";
    case FgRole::eval_fg: return "eval_fg";
    case FgRole::eval_nonfg: return "eval_nonfg";
    case FgRole::eval_ctrl: return "eval_ctrl";
  }
  throw ConfigError("unknown fg role");
}

FgRole fg_role_from_name(const std::string& name) {
  for (auto role : {FgRole::train, FgRole::eval_fg, FgRole::eval_nonfg,
                    FgRole::eval_ctrl}) {
    if (name == fg_role_name(role)) return role;
  }
  throw ConfigError("unknown fg role '" + name + "'");
}

bool regions_disjoint(const Remapping& a, const Remapping& b) {
  std::set<std::string> words;
  for (const auto& t : a.region_original.tokens()) words.insert(t.surface);
  for (const auto& t : a.region_alternate.tokens()) words.insert(t.surface);
  for (const auto& t : b.region_original.tokens()) {
    if (words.count(t.surface)) return false;
  }
  for (const auto& t : b.region_alternate.tokens()) {
    if (words.count(t.surface)) return false;
  }
  return true;
}

namespace {

/// Frame for one item under one role: context prefix plus the single-word
/// critical regions. The licensed completion always maps to the unlicensed
/// one; only the prefix varies by role.
Remapping fg_frame(const FgItem& item, FgRole role) {
  const std::string orig = first_word(item.label_fg);
  const std::string alt = first_word(item.label_nonfg);
  if (orig.empty() || alt.empty()) {
    throw ConfigError("fg item '" + item.id + "' has an empty label");
  }
  if (orig == alt) {
    throw ConfigError("fg item '" + item.id +
                      "' labels share the first word '" + orig + "'");
  }
  const std::string& prefix =
      role == FgRole::eval_nonfg ? item.prefix_nonfg : item.prefix_fg;

  Remapping m;
  m.id = item.id;
  m.context_original = TokenString::from_text(prefix);
  m.context_alternate = m.context_original;
  const int pos = static_cast<int>(m.context_original.size()) + 1;
  m.region_original = word_at(orig, pos);
  m.region_alternate = word_at(alt, pos);
  return m;
}

}  // namespace

LabeledExampleSet build_fg_remappings(const std::vector<FgItem>& items,
                                      FgRole role,
                                      const std::string& train_id) {
  const FgItem* train_item = nullptr;
  if (!train_id.empty() && role != FgRole::train) {
    for (const auto& item : items) {
      if (item.id == train_id) {
        train_item = &item;
        break;
      }
    }
    if (!train_item) {
      throw ConfigError("unknown training item '" + train_id + "'");
    }
  }

  LabeledExampleSet set;
  set.dataset_id = std::string("fillergap:") + fg_role_name(role);
  for (const auto& item : items) {
    const bool ctrl = item.control();
    if (role == FgRole::eval_ctrl && !ctrl) continue;
    if ((role == FgRole::eval_fg || role == FgRole::eval_nonfg) && ctrl) {
      continue;
    }
    if (train_item && item.id == train_id) continue;  // pools never intersect

    Remapping m = fg_frame(item, role);
    if (train_item && !regions_disjoint(m, fg_frame(*train_item, role))) {
      throw ConfigError("evaluation item '" + item.id +
                        "' shares a critical region with training item '" +
                        train_id + "'");
    }

    set.items.push_back({std::move(m),
                         item.condition(),
                         {{"construction", item.construction},
                          {"animacy", item.animacy},
                          {"embedded", item.embedded},
                          {"family", ctrl ? "ctrl" : "fg"}},
                         true});
  }
  return set;
}

std::vector<FgItem> read_fg_csv(const std::string& path) {
  auto lines = read_lines(path);
  while (!lines.empty() && trim(lines.back()).empty()) lines.pop_back();
  if (lines.empty()) throw ParseError(path + ": empty file");

  const auto header = csv_split(lines[0]);
  std::map<std::string, size_t> col;
  for (size_t i = 0; i < header.size(); ++i) col[trim(header[i])] = i;

  const std::vector<std::string> required = {
      "construction", "animacy", "embedded",    "prefix_fg",
      "prefix_nonfg", "label_fg", "label_nonfg"};
  for (const auto& name : required) {
    if (!col.count(name)) {
      throw ParseError(path + ": missing column '" + name + "'");
    }
  }
  const bool has_id = col.count("id") > 0;

  std::vector<FgItem> items;
  std::set<std::string> ids;
  std::map<std::string, int> per_condition;
  for (size_t ln = 1; ln < lines.size(); ++ln) {
    if (trim(lines[ln]).empty()) continue;
    const std::string where = path + " line " + std::to_string(ln + 1);
    auto fields = csv_split(lines[ln]);
    if (fields.size() != header.size()) {
      throw ParseError(where + ": expected " + std::to_string(header.size()) +
                       " fields, got " + std::to_string(fields.size()));
    }
    auto get = [&](const std::string& name) { return trim(fields[col[name]]); };

    FgItem item;
    item.construction = get("construction");
    item.animacy = get("animacy");
    item.embedded = get("embedded");
    item.prefix_fg = get("prefix_fg");
    item.prefix_nonfg = get("prefix_nonfg");
    item.label_fg = get("label_fg");
    item.label_nonfg = get("label_nonfg");
    if (item.construction.empty()) {
      throw ParseError(where + ": empty construction");
    }
    if (item.animacy != "animate" && item.animacy != "inanimate") {
      throw ParseError(where + ": animacy must be animate or inanimate, got '" +
                       item.animacy + "'");
    }
    if (item.embedded != "embedded" && item.embedded != "unembedded") {
      throw ParseError(where +
                       ": embedded must be embedded or unembedded, got '" +
                       item.embedded + "'");
    }
    if (item.label_fg.empty() || item.label_nonfg.empty()) {
      throw ParseError(where + ": empty label");
    }

    item.id = has_id ? get("id") : "";
    if (item.id.empty()) {
      const int n = ++per_condition[item.condition()];
      item.id = item.condition();
      if (n > 1) item.id += "-" + std::to_string(n);
    }
    if (!ids.insert(item.id).second) {
      throw ParseError(where + ": duplicate id '" + item.id + "'");
    }
    items.push_back(std::move(item));
  }
  return items;
}

// ---------------------------------------------------------------------------
// Hyperparameter search.
// ---------------------------------------------------------------------------

HyperResult hyper_search(const Model& base, const LabeledExampleSet& train_set,
                         const HyperGrid& grid, const PerturbationConfig& cfg,
                         const MatrixBuildOptions& build,
                         const ClusterabilityOptions& auc) {
  if (grid.learning_rates.empty() || grid.step_counts.empty()) {
    throw ConfigError("hyper grid is empty");
  }
  if (grid.objective != "auc") {
    throw ConfigError("unsupported hyper objective '" + grid.objective + "'");
  }
  for (double rate : grid.learning_rates) {
    if (!(rate > 0)) throw ConfigError("learning rates must be positive");
  }
  for (int steps : grid.step_counts) {
    if (steps < 1) throw ConfigError("step counts must be positive");
  }
  if (train_set.distinct_labels().size() < 2) {
    throw ConfigError("hyper search needs at least two classes");
  }

  MatrixBuildOptions opts = build;
  opts.skip_failures = false;

  HyperResult res;
  res.auc = -1.0;
  for (double rate : grid.learning_rates) {
    for (int steps : grid.step_counts) {
      HyperPoint pt{rate, steps, std::numeric_limits<double>::quiet_NaN(),
                    false};
      PerturbationConfig point_cfg = cfg;
      point_cfg.learning_rate = rate;
      point_cfg.steps = steps;
      try {
        TransferMatrix m =
            build_transfer_matrix(base, train_set, point_cfg, opts);
        pt.auc = clusterability_auc(m, auc).auc;
      } catch (const BackendError&) {
        pt.diverged = true;
      }
      if (!pt.diverged) {
        const bool better =
            pt.auc > res.auc ||
            (pt.auc == res.auc &&
             (rate < res.learning_rate ||
              (rate == res.learning_rate && steps < res.steps)));
        if (better) {
          res.learning_rate = rate;
          res.steps = steps;
          res.auc = pt.auc;
        }
      }
      res.points.push_back(pt);
    }
  }
  if (res.auc < 0) throw BackendError("all grid points diverged");
  return res;
}

// ---------------------------------------------------------------------------
// Synthetic grammar.
// ---------------------------------------------------------------------------

SyntheticBenchmark make_synthetic_benchmark(const SyntheticGrammarSpec& spec) {
  if (spec.classes < 2) throw ConfigError("need at least two classes");
  if (spec.items_per_class < 2) {
    throw ConfigError("need at least two items per class");
  }
  if (spec.corpus_repeats < 1) {
    throw ConfigError("corpus_repeats must be positive");
  }

  SyntheticBenchmark out;
  out.items.dataset_id = "synth-grammar";

  std::vector<std::string> nouns, verbs;
  for (int c = 0; c < spec.classes; ++c) {
    for (int k = 0; k < spec.items_per_class; ++k) {
      nouns.push_back("n" + std::to_string(c) + "w" + std::to_string(k));
      verbs.push_back("v" + std::to_string(c) + "w" + std::to_string(k));
    }
  }

  auto slot = [&](int c, int k) { return c * spec.items_per_class + k; };
  for (int c = 0; c < spec.classes; ++c) {
    const std::string label = "class" + std::to_string(c);
    for (int k = 0; k < spec.items_per_class; ++k) {
      const std::string& noun = nouns[slot(c, k)];

      for (int j = 0; j < spec.items_per_class; ++j) {
        const auto sentence =
            TokenString::from_text("the " + noun + " " + verbs[slot(c, j)]);
        for (int r = 0; r < spec.corpus_repeats; ++r) {
          out.corpus.push_back(sentence);
        }
      }

      Remapping m;
      m.id = noun;
      m.context_original = TokenString::from_text("the " + noun);
      m.context_alternate = m.context_original;
      m.region_original = word_at(verbs[slot(c, k)], 3);
      m.region_alternate = word_at("zug", 3);
      out.items.items.push_back(
          {std::move(m), label, {{"class", label}}, false});
    }
  }

  out.lm.vocab = {kBosPiece, "the", "zug"};
  out.lm.vocab.insert(out.lm.vocab.end(), nouns.begin(), nouns.end());
  out.lm.vocab.insert(out.lm.vocab.end(), verbs.begin(), verbs.end());
  out.lm.embedding_dim = 12;
  out.lm.hidden_dim = 16;
  out.lm.context_window = 2;
  out.lm.init_scale = 0.3;
  return out;
}

}  // namespace perturbkit
