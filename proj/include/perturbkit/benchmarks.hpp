#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "perturbkit/analysis.hpp"
#include "perturbkit/backend.hpp"
#include "perturbkit/dataset.hpp"
#include "perturbkit/perturb.hpp"
#include "perturbkit/tokenizer.hpp"
#include "perturbkit/transfer.hpp"

namespace perturbkit {

// ---------------------------------------------------------------------------
// Morphology benchmark: -er derivatives paired with their bases.
// ---------------------------------------------------------------------------

struct MorphItem {
  std::string base;         // tall
  std::string suffixed;     // taller
  std::string class_label;  // deverbal | comparative
  std::string sentence;     // one usage of `suffixed`, whitespace words
  bool operator==(const MorphItem&) const = default;
};

/// Which alternate region the perturbation pushes toward. standard and
/// no_context strip the suffix; common_target swaps in a fixed word;
/// novel_suffix reattaches `word` to the base (tall -> talleze).
struct MorphVariant {
  enum class Kind { standard, no_context, common_target, novel_suffix };
  Kind kind = Kind::standard;
  std::string word;
};

const char* morph_variant_name(MorphVariant::Kind kind);
MorphVariant::Kind morph_variant_kind_from_name(const std::string& name);

/// One remapping per item: the sentence with the first occurrence of
/// `suffixed` carved out as the critical region, mapped to the variant's
/// alternate. Throws ConfigError when a sentence lacks the suffixed word or
/// a parameterized variant has no word.
LabeledExampleSet build_morph_remappings(const std::vector<MorphItem>& items,
                                         const MorphVariant& variant = {});

/// Two-column "base suffixed" pair list. '#' starts a comment; slash
/// alternatives keep their first form. Lines whose second column does not
/// end in "er" are skipped and noted.
std::vector<MorphItem> read_bats_pairs(const std::string& path,
                                       const std::string& class_label,
                                       std::vector<std::string>* notes = nullptr);

/// Nonblank lines of a sentence-pool file.
std::vector<std::string> read_sentence_pool(const std::string& path);

/// Pair each item with the first pool sentence containing its suffixed form
/// as a whole word. Items with no such sentence are dropped and noted.
std::vector<MorphItem> attach_sentences(std::vector<MorphItem> items,
                                        const std::vector<std::string>& pool,
                                        std::vector<std::string>* notes = nullptr);

/// Relation between the two critical regions' subword decompositions:
/// single_single, single_multi, multi_same (shared final subword), or
/// multi_diff. Throws ConfigError for empty regions.
std::string tokenization_factor(const SubwordTokenizer& tok, const Remapping& m);

/// Stamp factors["tokenization"] on every item. Backend-dependent, so this
/// runs at experiment time rather than ingestion time.
void annotate_tokenization(LabeledExampleSet& set, const SubwordTokenizer& tok);

// ---------------------------------------------------------------------------
// Word-sense benchmark: ambiguous words pushed toward a nonce target.
// ---------------------------------------------------------------------------

struct WsdItem {
  std::string word;
  std::string sense_label;
  std::string sentence;       // entirely lowercase, contains `word` exactly once
  int target_word_index = 0;  // 1-based position of `word`; 0 = locate
  bool operator==(const WsdItem&) const = default;
};

/// ⟨sentence with the word carved out; word -> target⟩ per item, class label
/// = sense. Throws ConfigError on an invalid item or when the target itself
/// occurs in a sentence (the contrast would be confounded).
LabeledExampleSet build_wsd_remappings(const std::vector<WsdItem>& items,
                                       const std::string& target);

struct WsdCorpus {
  std::map<std::string, std::vector<WsdItem>> pools;  // word -> all senses
  std::vector<std::string> notes;                     // rejected sentences
};

/// Directory of "<word>.<sense>.txt" files, one sentence per line. Sentences
/// with uppercase letters or without exactly one occurrence of the word are
/// rejected and noted rather than ingested.
WsdCorpus read_wsd_pools(const std::string& dir);

struct WsdSample {
  std::map<std::string, std::vector<WsdItem>> per_word;
  std::vector<std::string> deficits;
};

/// Draw per_word items per word, split as evenly as possible across senses
/// (counts differ by at most one when pools suffice). Short sense pools are
/// drained and the remainder drawn from the others; every shortfall lands in
/// `deficits`. Deterministic in `seed`. Throws ConfigError for a word with a
/// single sense.
WsdSample sample_balanced_wsd(
    const std::map<std::string, std::vector<WsdItem>>& pools, int per_word,
    uint64_t seed);

// ---------------------------------------------------------------------------
// Filler-gap benchmark: sentence frames whose licensed completion flips with
// the presence of a gap.
// ---------------------------------------------------------------------------

struct FgItem {
  std::string id;            // unique; assigned at ingestion when absent
  std::string construction;  // know, wonder, ..., or ctrl_agr / ctrl_trans
  std::string animacy;       // animate | inanimate
  std::string embedded;      // embedded | unembedded
  std::string prefix_fg;     // gap variant of the frame
  std::string prefix_nonfg;  // minimally different gapless variant
  std::string label_fg;      // completion licensed by the gap
  std::string label_nonfg;   // completion licensed without it
  bool operator==(const FgItem&) const = default;

  bool control() const { return construction.rfind("ctrl", 0) == 0; }
  std::string condition() const;  // construction:animacy:embedded
};

enum class FgRole { train, eval_fg, eval_nonfg, eval_ctrl };

const char* fg_role_name(FgRole role);
FgRole fg_role_from_name(const std::string& name);

/// Remappings per role. train covers every item in its gap form with the
/// region pushed from the licensed completion toward the unlicensed one;
/// eval_fg repeats that frame for scoring, eval_nonfg swaps in the gapless
/// prefix under the same labels, and eval_ctrl keeps the control items'
/// canonical form. Only the first word of each label enters the region, and
/// items score first subwords only. With train_id set on an eval role, any
/// item sharing a critical-region word with that training item is an error.
LabeledExampleSet build_fg_remappings(const std::vector<FgItem>& items,
                                      FgRole role,
                                      const std::string& train_id = "");

/// True when the remappings share no critical-region surface words.
bool regions_disjoint(const Remapping& a, const Remapping& b);

/// CSV with columns construction, animacy, embedded, prefix_fg, prefix_nonfg,
/// label_fg, label_nonfg and an optional id.
std::vector<FgItem> read_fg_csv(const std::string& path);

// ---------------------------------------------------------------------------
// Hyperparameter search.
// ---------------------------------------------------------------------------

struct HyperGrid {
  std::vector<double> learning_rates;
  std::vector<int> step_counts;
  std::string objective = "auc";
};

struct HyperPoint {
  double learning_rate = 0.0;
  int steps = 0;
  double auc = 0.0;
  bool diverged = false;
};

struct HyperResult {
  double learning_rate = 0.0;
  int steps = 0;
  double auc = 0.0;
  std::vector<HyperPoint> points;  // rate-major grid order
};

/// Sweep the grid, building a same-set transfer matrix per point and scoring
/// class separation; returns the argmax with ties broken toward the lower
/// rate, then fewer steps. Diverging points are recorded and skipped; all of
/// them diverging is an error. A failed trial always aborts its point, so
/// build.skip_failures is ignored.
HyperResult hyper_search(const Model& base, const LabeledExampleSet& train_set,
                         const HyperGrid& grid, const PerturbationConfig& cfg,
                         const MatrixBuildOptions& build = {},
                         const ClusterabilityOptions& auc = {});

// ---------------------------------------------------------------------------
// Synthetic two-class grammar. Nouns split into latent classes, each
// co-occurring with its own verb set; remappings push one noun's verb toward
// a shared nonce word. A model fit on the corpus carries the class structure
// in its hidden states, so transfer clusters by class; an unfit one does not.
// ---------------------------------------------------------------------------

struct SyntheticGrammarSpec {
  int classes = 2;
  int items_per_class = 6;
  int corpus_repeats = 4;  // copies of each noun-verb pairing in the corpus
};

struct SyntheticBenchmark {
  LabeledExampleSet items;
  std::vector<TokenString> corpus;
  /// Vocabulary and dimensions filled in; seed and pretraining are left to
  /// the caller (pretrain_steps = 0 gives the untrained control).
  ReferenceLMConfig lm;
};

SyntheticBenchmark make_synthetic_benchmark(const SyntheticGrammarSpec& spec = {});

}  // namespace perturbkit
