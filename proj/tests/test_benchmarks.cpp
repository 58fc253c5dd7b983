#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <memory>
#include <set>

#include "doctest.h"
#include "perturbkit/benchmarks.hpp"
#include "perturbkit/common.hpp"

using namespace perturbkit;

namespace {

std::string data_dir() {
  if (const char* env = std::getenv("PERTURBKIT_TEST_DATA")) return env;
  return "tests/data";
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

MorphItem tall_item() {
  return {"tall", "taller", "comparative", "the man was taller than the boy"};
}

}  // namespace

TEST_CASE("morph remappings cover the ablation variants") {
  auto standard = build_morph_remappings({tall_item()});
  REQUIRE(standard.items.size() == 1);
  const auto& ex = standard.items[0];
  CHECK(standard.dataset_id == "morph-er");
  CHECK(ex.remapping.id == "taller");
  CHECK(ex.class_label == "comparative");
  CHECK(ex.factors.at("base") == "tall");
  CHECK_FALSE(ex.first_subword_only);
  CHECK(ex.remapping.region_original.text() == "taller");
  CHECK(ex.remapping.region_alternate.text() == "tall");
  CHECK(ex.remapping.region_original.tokens()[0].position == 4);
  CHECK(ex.remapping.region_alternate.tokens()[0].position == 4);
  CHECK(ex.remapping.context_original.text() == "the man was than the boy");
  CHECK(ex.remapping.context_original == ex.remapping.context_alternate);
  CHECK(ex.remapping.context_original.merged(ex.remapping.region_original)
            .text() == "the man was taller than the boy");
  CHECK(validate(ex.remapping).ok());

  auto no_ctx = build_morph_remappings(
      {tall_item()}, {MorphVariant::Kind::no_context, ""});
  CHECK(no_ctx.dataset_id == "morph-er:no_context");
  CHECK(no_ctx.items[0].remapping.context_original.empty());
  CHECK(no_ctx.items[0].remapping.region_original.text() == "taller");
  CHECK(no_ctx.items[0].remapping.region_original.tokens()[0].position == 1);
  CHECK(no_ctx.items[0].remapping.region_alternate.text() == "tall");
  CHECK(validate(no_ctx.items[0].remapping).ok());

  auto common = build_morph_remappings(
      {tall_item()}, {MorphVariant::Kind::common_target, "blue"});
  CHECK(common.items[0].remapping.region_alternate.text() == "blue");
  CHECK(common.items[0].remapping.context_original.text() ==
        "the man was than the boy");

  auto novel = build_morph_remappings(
      {tall_item()}, {MorphVariant::Kind::novel_suffix, "eze"});
  CHECK(novel.items[0].remapping.region_original.text() == "taller");
  CHECK(novel.items[0].remapping.region_alternate.text() == "talleze");

  SUBCASE("first occurrence is carved out") {
    MorphItem twice{"tall", "taller", "comparative",
                    "the taller man seemed taller"};
    auto set = build_morph_remappings({twice});
    CHECK(set.items[0].remapping.region_original.tokens()[0].position == 2);
    CHECK(set.items[0].remapping.context_original.text() ==
          "the man seemed taller");
  }

  SUBCASE("duplicate suffixed forms get distinct ids") {
    auto set = build_morph_remappings({tall_item(), tall_item()});
    CHECK(set.items[0].remapping.id == "taller");
    CHECK(set.items[1].remapping.id == "taller-2");
  }

  SUBCASE("bad inputs") {
    MorphItem absent{"old", "older", "comparative", "nothing relevant here"};
    CHECK_THROWS_AS(build_morph_remappings({absent}), ConfigError);
    CHECK_THROWS_AS(build_morph_remappings(
                        {tall_item()}, {MorphVariant::Kind::common_target, ""}),
                    ConfigError);
    CHECK_THROWS_AS(build_morph_remappings(
                        {tall_item()}, {MorphVariant::Kind::standard, "blue"}),
                    ConfigError);
  }
}

TEST_CASE("morph variant names round trip") {
  for (auto kind :
       {MorphVariant::Kind::standard, MorphVariant::Kind::no_context,
        MorphVariant::Kind::common_target, MorphVariant::Kind::novel_suffix}) {
    CHECK(morph_variant_kind_from_name(morph_variant_name(kind)) == kind);
  }
  CHECK_THROWS_AS(morph_variant_kind_from_name("sideways"), ConfigError);
}

TEST_CASE("bats ingestion skips irregulars and missing sentences") {
  std::vector<std::string> notes;
  auto comparative = read_bats_pairs(data_dir() + "/bats_comparative.txt",
                                     "comparative", &notes);
  REQUIRE(comparative.size() == 4);
  CHECK(comparative[0].base == "tall");
  CHECK(comparative[0].suffixed == "taller");
  CHECK(comparative[0].class_label == "comparative");
  CHECK(comparative[3].suffixed == "smarter");  // slash alternative trimmed
  REQUIRE(notes.size() == 1);
  CHECK(notes[0].find("worse") != std::string::npos);

  auto deverbal =
      read_bats_pairs(data_dir() + "/bats_deverbal.txt", "deverbal");
  CHECK(deverbal.size() == 2);

  auto pool = read_sentence_pool(data_dir() + "/sentences.txt");
  REQUIRE(pool.size() == 4);

  auto items = comparative;
  items.insert(items.end(), deverbal.begin(), deverbal.end());
  std::vector<std::string> attach_notes;
  auto with_sentences = attach_sentences(items, pool, &attach_notes);
  CHECK(with_sentences.size() == 5);  // smarter appears in no sentence
  REQUIRE(attach_notes.size() == 1);
  CHECK(attach_notes[0].find("smarter") != std::string::npos);

  auto set = build_morph_remappings(with_sentences);
  for (const auto& ex : set.items) CHECK(validate(ex.remapping).ok());

  SUBCASE("malformed pair line") {
    auto path = temp_path("bats_bad.txt");
    write_text_file_atomic(path, "one two three\n");
    CHECK_THROWS_WITH_AS(read_bats_pairs(path, "comparative"),
                         doctest::Contains("line 1"), ParseError);
  }
}

TEST_CASE("tokenization factor classifies region pairs") {
  SubwordTokenizer tok({"tall", "er", "teach", "blue", "zz"});
  auto remap = [](const std::string& orig, const std::string& alt) {
    Remapping m;
    m.id = orig;
    m.region_original = TokenString::from_text(orig);
    m.region_alternate = TokenString::from_text(alt);
    return m;
  };
  CHECK(tokenization_factor(tok, remap("blue", "tall")) == "single_single");
  CHECK(tokenization_factor(tok, remap("taller", "tall")) == "single_multi");
  CHECK(tokenization_factor(tok, remap("taller", "teacher")) == "multi_same");
  CHECK(tokenization_factor(tok, remap("taller", "tallzz")) == "multi_diff");

  Remapping half;
  half.id = "half";
  half.region_alternate = TokenString::from_text("tall");
  CHECK_THROWS_AS(tokenization_factor(tok, half), ConfigError);

  auto set = build_morph_remappings({tall_item()});
  annotate_tokenization(set, tok);
  CHECK(set.items[0].factors.at("tokenization") == "single_multi");
}

TEST_CASE("wsd remappings carve out the ambiguous word") {
  WsdItem apple{"apple", "food", "he is eating an apple", 0};
  auto set = build_wsd_remappings({apple, apple}, "glam");
  REQUIRE(set.items.size() == 2);
  CHECK(set.dataset_id == "cwsd20");
  const auto& m = set.items[0].remapping;
  CHECK(m.id == "apple-1");
  CHECK(set.items[1].remapping.id == "apple-2");
  CHECK(m.context_original.text() == "he is eating an");
  CHECK(m.region_original.text() == "apple");
  CHECK(m.region_original.tokens()[0].position == 5);
  CHECK(m.region_alternate.text() == "glam");
  CHECK(set.items[0].class_label == "food");
  CHECK(set.items[0].factors.at("word") == "apple");
  CHECK(validate(m).ok());

  WsdItem indexed{"bank", "river", "the bank was muddy", 2};
  CHECK_NOTHROW(build_wsd_remappings({indexed}, "glam"));

  SUBCASE("invalid items and targets") {
    WsdItem upper{"apple", "food", "He is eating an apple", 0};
    CHECK_THROWS_AS(build_wsd_remappings({upper}, "glam"), ConfigError);

    WsdItem twice{"bank", "river", "the bank by the bank", 0};
    CHECK_THROWS_AS(build_wsd_remappings({twice}, "glam"), ConfigError);

    WsdItem absent{"bank", "river", "the water was muddy", 0};
    CHECK_THROWS_AS(build_wsd_remappings({absent}, "glam"), ConfigError);

    WsdItem off{"bank", "river", "the bank was muddy", 3};
    CHECK_THROWS_AS(build_wsd_remappings({off}, "glam"), ConfigError);

    WsdItem confound{"bank", "river", "a glam bank was muddy", 0};
    CHECK_THROWS_AS(build_wsd_remappings({confound}, "glam"), ConfigError);

    CHECK_THROWS_AS(build_wsd_remappings({apple}, "two words"), ConfigError);
  }
}

TEST_CASE("wsd pool ingestion rejects invalid sentences") {
  auto corpus = read_wsd_pools(data_dir() + "/wsd");
  REQUIRE(corpus.pools.size() == 2);
  CHECK(corpus.pools.at("bank").size() == 4);
  CHECK(corpus.pools.at("crane").size() == 4);
  REQUIRE(corpus.notes.size() == 2);
  CHECK(corpus.notes[0].find("not lowercase") != std::string::npos);
  CHECK(corpus.notes[1].find("exactly once") != std::string::npos);

  // sense labels come from the file names
  std::set<std::string> senses;
  for (const auto& item : corpus.pools.at("bank")) {
    senses.insert(item.sense_label);
    CHECK(item.word == "bank");
    CHECK(item.target_word_index > 0);
  }
  CHECK(senses == std::set<std::string>{"money", "river"});

  CHECK_THROWS_AS(read_wsd_pools(data_dir() + "/nowhere"), IoError);

  SUBCASE("pool files need word and sense in the name") {
    auto dir = temp_path("wsd_badname");
    std::filesystem::create_directories(dir);
    write_text_file_atomic(dir + "/nodot.txt", "the word here\n");
    CHECK_THROWS_AS(read_wsd_pools(dir), ParseError);
    std::filesystem::remove_all(dir);
  }
}

TEST_CASE("balanced sampling splits senses evenly") {
  auto make_pool = [](const std::string& word, const std::string& sense,
                      int n) {
    std::vector<WsdItem> v;
    for (int i = 0; i < n; ++i) {
      v.push_back({word, sense,
                   sense + " sentence " + std::to_string(i) + " mentions " +
                       word,
                   0});
    }
    return v;
  };
  auto merge = [](std::vector<WsdItem> a, const std::vector<WsdItem>& b) {
    a.insert(a.end(), b.begin(), b.end());
    return a;
  };

  std::map<std::string, std::vector<WsdItem>> pools;
  pools["bank"] =
      merge(make_pool("bank", "money", 60), make_pool("bank", "river", 60));

  auto count_sense = [](const std::vector<WsdItem>& items,
                        const std::string& sense) {
    return std::count_if(items.begin(), items.end(), [&](const WsdItem& it) {
      return it.sense_label == sense;
    });
  };

  auto even = sample_balanced_wsd(pools, 100, 7);
  REQUIRE(even.per_word.at("bank").size() == 100);
  CHECK(count_sense(even.per_word.at("bank"), "money") == 50);
  CHECK(count_sense(even.per_word.at("bank"), "river") == 50);
  CHECK(even.deficits.empty());

  auto odd = sample_balanced_wsd(pools, 101, 7);
  CHECK(count_sense(odd.per_word.at("bank"), "money") == 51);
  CHECK(count_sense(odd.per_word.at("bank"), "river") == 50);

  SUBCASE("selection is deterministic and seed-sensitive") {
    auto again = sample_balanced_wsd(pools, 100, 7);
    CHECK(again.per_word == even.per_word);
    auto other = sample_balanced_wsd(pools, 100, 8);
    CHECK(other.per_word != even.per_word);

    std::set<std::string> sentences;
    for (const auto& item : even.per_word.at("bank")) {
      sentences.insert(item.sentence);
    }
    CHECK(sentences.size() == 100);  // no item drawn twice
  }

  SUBCASE("short sense pools are drained and logged") {
    pools["deck"] =
        merge(make_pool("deck", "cards", 95), make_pool("deck", "structure", 7));
    auto sample = sample_balanced_wsd(pools, 100, 7);
    CHECK(sample.per_word.at("deck").size() == 100);
    CHECK(count_sense(sample.per_word.at("deck"), "structure") == 7);
    CHECK(count_sense(sample.per_word.at("deck"), "cards") == 93);
    REQUIRE(sample.deficits.size() == 1);
    CHECK(sample.deficits[0].find("deck/structure") != std::string::npos);
    CHECK(sample.deficits[0].find("7") != std::string::npos);
  }

  SUBCASE("an exhausted word reports the overall shortfall") {
    std::map<std::string, std::vector<WsdItem>> small;
    small["mole"] =
        merge(make_pool("mole", "animal", 3), make_pool("mole", "spy", 3));
    auto sample = sample_balanced_wsd(small, 10, 7);
    CHECK(sample.per_word.at("mole").size() == 6);
    REQUIRE(sample.deficits.size() == 3);
    CHECK(sample.deficits[2].find("only 6 of 10") != std::string::npos);
  }

  SUBCASE("degenerate requests") {
    CHECK_THROWS_AS(sample_balanced_wsd(pools, 0, 7), ConfigError);
    std::map<std::string, std::vector<WsdItem>> mono;
    mono["flat"] = make_pool("flat", "level", 10);
    CHECK_THROWS_AS(sample_balanced_wsd(mono, 4, 7), ConfigError);
  }
}

TEST_CASE("fg remappings map licensed to unlicensed completions") {
  auto items = read_fg_csv(data_dir() + "/fg_small.csv");
  REQUIRE(items.size() == 6);
  CHECK(items[0].id == "know:animate:embedded");
  CHECK(items[3].prefix_fg == "Actually, the boy the man liked");  // unquoted
  CHECK(items[4].control());
  CHECK_FALSE(items[0].control());

  auto train = build_fg_remappings(items, FgRole::train);
  CHECK(train.dataset_id == "fillergap:train");
  REQUIRE(train.items.size() == 6);  // controls train too
  for (size_t i = 0; i < items.size(); ++i) {
    const auto& ex = train.items[i];
    CHECK(ex.first_subword_only);
    CHECK(validate(ex.remapping).ok());
    // always pushed from the licensed completion toward the unlicensed one
    CHECK(ex.remapping.region_original.text() ==
          split_whitespace(items[i].label_fg)[0]);
    CHECK(ex.remapping.region_alternate.text() ==
          split_whitespace(items[i].label_nonfg)[0]);
  }
  const auto& know = train.items[0];
  CHECK(know.remapping.context_original.text() == "I know who the man liked");
  CHECK(know.remapping.region_original.tokens()[0].position == 7);
  CHECK(know.class_label == "know:animate:embedded");
  CHECK(know.factors.at("construction") == "know");
  CHECK(know.factors.at("family") == "fg");
  CHECK(train.items[4].factors.at("family") == "ctrl");

  auto eval_fg = build_fg_remappings(items, FgRole::eval_fg);
  REQUIRE(eval_fg.items.size() == 4);
  CHECK(eval_fg.items[1].remapping.context_original.text() ==
        "Who the man liked");
  CHECK(eval_fg.items[1].remapping.region_original.text() == "was");
  CHECK(eval_fg.items[1].remapping.region_alternate.text() == "it");
  // multiword completions truncate to their first word
  CHECK(eval_fg.items[2].remapping.region_alternate.text() == "the");

  auto eval_nonfg = build_fg_remappings(items, FgRole::eval_nonfg);
  REQUIRE(eval_nonfg.items.size() == 4);
  CHECK(eval_nonfg.items[0].remapping.context_original.text() ==
        "I know that the man liked");
  CHECK(eval_nonfg.items[0].remapping.region_original.text() == ".");
  CHECK(eval_nonfg.items[0].remapping.region_alternate.text() == "him");

  // the two evaluation grids stay column-aligned for baselining
  for (size_t i = 0; i < eval_fg.items.size(); ++i) {
    CHECK(eval_fg.items[i].remapping.id == eval_nonfg.items[i].remapping.id);
  }

  auto eval_ctrl = build_fg_remappings(items, FgRole::eval_ctrl);
  REQUIRE(eval_ctrl.items.size() == 2);
  CHECK(eval_ctrl.items[0].remapping.context_original.text() ==
        "The boy that the man liked");
  CHECK(eval_ctrl.items[0].remapping.region_original.text() == "is");
  CHECK(eval_ctrl.items[0].remapping.region_alternate.text() == "are");
  CHECK(eval_ctrl.items[0].factors.at("family") == "ctrl");
}

TEST_CASE("fg disjointness guards the evaluation pool") {
  auto items = read_fg_csv(data_dir() + "/fg_small.csv");

  // know trains on (. -> him); cleft shares the "." region
  CHECK_THROWS_WITH_AS(
      build_fg_remappings(items, FgRole::eval_fg, "know:animate:embedded"),
      doctest::Contains("cleft"), ConfigError);

  // pseudocleft trains on (was -> it), lexically disjoint from the rest
  auto pool = build_fg_remappings(items, FgRole::eval_fg,
                                  "pseudocleft:animate:embedded");
  CHECK(pool.items.size() == 3);  // the training item itself is excluded
  for (const auto& ex : pool.items) {
    CHECK(ex.remapping.id != "pseudocleft:animate:embedded");
  }

  CHECK_THROWS_AS(build_fg_remappings(items, FgRole::eval_fg, "missing-id"),
                  ConfigError);
  // a train-role build ignores the filter
  CHECK_NOTHROW(build_fg_remappings(items, FgRole::train, "missing-id"));

  SUBCASE("region word sets decide disjointness") {
    auto frame = [](const std::string& orig, const std::string& alt) {
      Remapping m;
      m.region_original = TokenString::from_text(orig);
      m.region_alternate = TokenString::from_text(alt);
      return m;
    };
    CHECK(regions_disjoint(frame(".", "him"), frame("was", "it")));
    CHECK_FALSE(regions_disjoint(frame(".", "him"), frame(".", "the")));
    CHECK_FALSE(regions_disjoint(frame(".", "him"), frame("was", "him")));
  }
}

TEST_CASE("fg role names round trip") {
  for (auto role : {FgRole::train, FgRole::eval_fg, FgRole::eval_nonfg,
                    FgRole::eval_ctrl}) {
    CHECK(fg_role_from_name(fg_role_name(role)) == role);
  }
  CHECK_THROWS_AS(fg_role_from_name("probe"), ConfigError);
}

TEST_CASE("fg csv ingestion validates structure") {
  SUBCASE("missing column") {
    auto path = temp_path("fg_missing.csv");
    write_text_file_atomic(
        path, "construction,animacy,embedded,prefix_fg,prefix_nonfg,label_fg\n");
    CHECK_THROWS_WITH_AS(read_fg_csv(path), doctest::Contains("label_nonfg"),
                         ParseError);
  }

  SUBCASE("bad factor level") {
    auto path = temp_path("fg_badlevel.csv");
    write_text_file_atomic(
        path,
        "construction,animacy,embedded,prefix_fg,prefix_nonfg,label_fg,label_nonfg\n"
        "know,alive,embedded,a b,a c,.,him\n");
    CHECK_THROWS_WITH_AS(read_fg_csv(path), doctest::Contains("animacy"),
                         ParseError);
  }

  SUBCASE("duplicate explicit ids") {
    auto path = temp_path("fg_dupid.csv");
    write_text_file_atomic(
        path,
        "id,construction,animacy,embedded,prefix_fg,prefix_nonfg,label_fg,label_nonfg\n"
        "k1,know,animate,embedded,a b,a c,.,him\n"
        "k1,wonder,animate,embedded,d e,d f,was,it\n");
    CHECK_THROWS_WITH_AS(read_fg_csv(path), doctest::Contains("duplicate"),
                         ParseError);
  }

  SUBCASE("repeated conditions get numbered ids") {
    auto path = temp_path("fg_repeat.csv");
    write_text_file_atomic(
        path,
        "construction,animacy,embedded,prefix_fg,prefix_nonfg,label_fg,label_nonfg\n"
        "know,animate,embedded,a b,a c,.,him\n"
        "know,animate,embedded,d e,d f,was,it\n");
    auto items = read_fg_csv(path);
    REQUIRE(items.size() == 2);
    CHECK(items[0].id == "know:animate:embedded");
    CHECK(items[1].id == "know:animate:embedded-2");
  }

  SUBCASE("empty file") {
    auto path = temp_path("fg_empty.csv");
    write_text_file_atomic(path, "");
    CHECK_THROWS_AS(read_fg_csv(path), ParseError);
  }

  SUBCASE("labels sharing a first word are rejected at build time") {
    FgItem item{"x", "cleft", "animate", "embedded",
                "It was the boy that the man liked",
                "It was clear that the man liked", "the boy", "the man"};
    CHECK_THROWS_WITH_AS(build_fg_remappings({item}, FgRole::train),
                         doctest::Contains("first word"), ConfigError);
  }
}

TEST_CASE("relabel by factor swaps class labels") {
  auto items = read_fg_csv(data_dir() + "/fg_small.csv");
  auto train = build_fg_remappings(items, FgRole::train);
  auto by_family = relabel_by_factor(train, "family");
  CHECK(by_family.distinct_labels() == std::vector<std::string>{"fg", "ctrl"});
  CHECK(by_family.items[0].class_label == "fg");
  CHECK(by_family.items[4].class_label == "ctrl");
  CHECK_THROWS_AS(relabel_by_factor(train, "tokenization"), ConfigError);
}

// ---------------------------------------------------------------------------
// Hyperparameter sweep against a planted optimum. The fake model yields a
// perfectly clustered transfer grid inside a known learning-rate window,
// pure hash noise outside it, and divergence past lr 10.
// ---------------------------------------------------------------------------

namespace {

class SweepModel final : public Model {
 public:
  SweepModel() : tok_({"x"}) {}

  std::string backend_id() const override { return "sweep_fake"; }
  Mode mode() const override { return Mode::causal; }
  int vocab_size() const override { return 1; }
  int depth() const override { return 0; }
  const SubwordTokenizer& tokenizer() const override { return tok_; }

  double score_region(const TokenString& context, const TokenString& region,
                      const ScoreOptions&) const override {
    if (trained_row_ < 0 || region.text() != "zug") return 0.0;
    const int col = item_of(context);
    const bool same =
        (trained_row_ < 4) == (col < 4);  // classes split at item 4
    const double noise =
        static_cast<double>(splitmix64(
            static_cast<uint64_t>(trained_row_) * 1000003u +
            static_cast<uint64_t>(col))) /
        18446744073709551615.0;
    return structure_ * (same ? 1.0 : 0.0) + (1.0 - structure_) * noise;
  }

  ModelPtr train(const std::vector<TrainEntry>& batch,
                 const TrainOptions& opts) const override {
    if (opts.learning_rate > 10.0) {
      throw DivergenceError("loss exploded", 1, "");
    }
    auto next = std::make_shared<SweepModel>(*this);
    next->trained_row_ = item_of(batch.at(0).context);
    const bool sweet =
        opts.learning_rate >= 0.04 && opts.learning_rate <= 0.08;
    next->structure_ = sweet ? 1.0 : 0.0;
    return next;
  }

  ModelPtr clone_state() const override {
    return std::make_shared<SweepModel>(*this);
  }
  std::vector<double> objective_gradient(const std::vector<TrainEntry>&,
                                         const TrainOptions&) const override {
    throw BackendError("not modeled");
  }
  std::vector<double> embed(const TokenString&, const TokenString&,
                            int) const override {
    throw BackendError("not modeled");
  }
  StateSnapshot snapshot_state() const override { return {"{}", {}}; }

 private:
  static int item_of(const TokenString& context) {
    // contexts are "ctx<i>"
    return std::stoi(context.text().substr(3));
  }

  SubwordTokenizer tok_;
  int trained_row_ = -1;
  double structure_ = 0.0;
};

LabeledExampleSet sweep_set() {
  LabeledExampleSet set;
  set.dataset_id = "sweep";
  for (int i = 0; i < 8; ++i) {
    Remapping m;
    m.id = "item" + std::to_string(i);
    m.context_original = TokenString::from_text("ctx" + std::to_string(i));
    m.context_alternate = m.context_original;
    m.region_original = TokenString({{"r" + std::to_string(i), 2}});
    m.region_alternate = TokenString({{"zug", 2}});
    std::string label = i < 4 ? "A" : "B";
    set.items.push_back({std::move(m), label, {{"class", label}}, false});
  }
  return set;
}

}  // namespace

TEST_CASE("hyper search picks the separating grid point") {
  SweepModel base;
  auto set = sweep_set();
  PerturbationConfig cfg;
  cfg.seed = 5;

  HyperGrid grid;
  grid.learning_rates = {0.01, 0.05, 20.0};
  grid.step_counts = {2};

  auto res = hyper_search(base, set, grid, cfg);
  CHECK(res.learning_rate == 0.05);
  CHECK(res.steps == 2);
  CHECK(res.auc == doctest::Approx(1.0));
  REQUIRE(res.points.size() == 3);
  CHECK(res.points[0].auc < 0.9);  // noise point
  CHECK_FALSE(res.points[0].diverged);
  CHECK(res.points[1].auc == doctest::Approx(1.0));
  CHECK(res.points[2].diverged);

  SUBCASE("ties break toward the lower rate, then fewer steps") {
    HyperGrid tied;
    tied.learning_rates = {0.07, 0.05};  // both inside the sweet window
    tied.step_counts = {3, 2};
    auto best = hyper_search(base, set, tied, cfg);
    CHECK(best.learning_rate == 0.05);
    CHECK(best.steps == 2);
    CHECK(best.auc == doctest::Approx(1.0));
  }

  SUBCASE("single point grid returns that point") {
    HyperGrid single;
    single.learning_rates = {0.05};
    single.step_counts = {4};
    auto best = hyper_search(base, set, single, cfg);
    CHECK(best.learning_rate == 0.05);
    CHECK(best.steps == 4);
    REQUIRE(best.points.size() == 1);
  }

  SUBCASE("all points diverging is an error") {
    HyperGrid hot;
    hot.learning_rates = {100.0, 200.0};
    hot.step_counts = {1};
    CHECK_THROWS_WITH_AS(hyper_search(base, set, hot, cfg),
                         doctest::Contains("diverged"), BackendError);
  }

  SUBCASE("grid validation") {
    CHECK_THROWS_AS(hyper_search(base, set, {}, cfg), ConfigError);
    HyperGrid bad;
    bad.learning_rates = {0.05};
    bad.step_counts = {1};
    bad.objective = "rmse";
    CHECK_THROWS_AS(hyper_search(base, set, bad, cfg), ConfigError);
    bad.objective = "auc";
    bad.learning_rates = {-1.0};
    CHECK_THROWS_AS(hyper_search(base, set, bad, cfg), ConfigError);
    bad.learning_rates = {0.05};
    bad.step_counts = {0};
    CHECK_THROWS_AS(hyper_search(base, set, bad, cfg), ConfigError);

    auto flat = set;
    for (auto& ex : flat.items) ex.class_label = "A";
    HyperGrid ok;
    ok.learning_rates = {0.05};
    ok.step_counts = {1};
    CHECK_THROWS_AS(hyper_search(base, flat, ok, cfg), ConfigError);
  }
}

TEST_CASE("synthetic benchmark separates trained from untrained") {
  auto bench = make_synthetic_benchmark({});
  REQUIRE(bench.items.items.size() == 12);
  CHECK(bench.items.distinct_labels() ==
        std::vector<std::string>{"class0", "class1"});
  CHECK(bench.corpus.size() == 2u * 6u * 6u * 4u);
  CHECK(bench.lm.vocab.size() == 3u + 24u);

  std::set<std::string> ids;
  for (const auto& ex : bench.items.items) {
    CHECK(validate(ex.remapping).ok());
    ids.insert(ex.remapping.id);
    CHECK(ex.remapping.region_alternate.text() == "zug");
  }
  CHECK(ids.size() == bench.items.items.size());

  CHECK_THROWS_AS(make_synthetic_benchmark({1, 6, 4}), ConfigError);
  CHECK_THROWS_AS(make_synthetic_benchmark({2, 1, 4}), ConfigError);
  CHECK_THROWS_AS(make_synthetic_benchmark({2, 6, 0}), ConfigError);

  SUBCASE("transfer clusters by latent class only after fitting") {
    ReferenceLMConfig fit = bench.lm;
    fit.seed = 11;
    fit.pretrain_steps = 300;
    fit.pretrain_lr = 0.1;
    auto trained = init_reference_lm(Mode::causal, fit, bench.corpus);

    PerturbationConfig cfg;
    cfg.learning_rate = 0.1;
    cfg.steps = 3;
    cfg.seed = 3;

    auto grid = build_transfer_matrix(*trained, bench.items, cfg);
    auto fitted = clusterability_auc(grid);
    CAPTURE(fitted.auc);
    CHECK(fitted.auc >= 0.8);

    ReferenceLMConfig raw = bench.lm;
    raw.seed = 11;
    auto untrained = init_reference_lm(Mode::causal, raw);
    auto grid0 = build_transfer_matrix(*untrained, bench.items, cfg);
    auto unfitted = clusterability_auc(grid0);
    CAPTURE(unfitted.auc);
    CHECK(unfitted.auc >= 0.35);
    CHECK(unfitted.auc <= 0.65);
    CHECK(unfitted.auc < fitted.auc);
  }
}
