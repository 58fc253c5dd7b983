#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "perturbkit/backend.hpp"
#include "perturbkit/common.hpp"

using namespace perturbkit;

namespace {

TokenString ts(const std::string& text) { return TokenString::from_text(text); }

ReferenceLMConfig tiny_causal_cfg() {
  ReferenceLMConfig cfg;
  cfg.vocab = {"<s>", "a", "b", "c", "duck", "glam"};
  cfg.embedding_dim = 4;
  cfg.hidden_dim = 5;
  cfg.context_window = 2;
  cfg.seed = 13;
  cfg.init_scale = 0.3;
  return cfg;
}

ReferenceLMConfig tiny_masked_cfg() {
  ReferenceLMConfig cfg;
  cfg.vocab = {"<s>", "[MASK]", "the", "tall", "er", "man", "walk"};
  cfg.embedding_dim = 4;
  cfg.hidden_dim = 5;
  cfg.context_window = 8;
  cfg.seed = 29;
  cfg.init_scale = 0.3;
  return cfg;
}

double rel_err(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-6});
}

// The batch objective reconstructed from public scoring, for finite
// differences: sum_e weight_e * (-logprob_e).
double batch_objective(const Model& m, const std::vector<TrainEntry>& batch,
                       bool token_mean) {
  double total = 0.0;
  for (auto& e : batch) {
    double lp = region_logprob(m, e.context, e.region, e.opts);
    double w = e.weight;
    if (token_mean) {
      int n = 0;
      auto tr = m.tokenizer().tokenize(e.region);
      for (size_t i = 0; i < tr.word_boundaries.size(); ++i)
        n += e.opts.first_subword_only
                 ? 1
                 : tr.word_boundaries[i].end - tr.word_boundaries[i].begin;
      if (n > 0) w /= n;
    }
    total += w * (-lp);
  }
  return total;
}

void check_fd_gradient(const Model& model, const std::vector<TrainEntry>& batch,
                       bool token_mean, int probes, uint64_t seed) {
  TrainOptions opts;
  opts.token_mean = token_mean;
  std::vector<double> grad = model.objective_gradient(batch, opts);
  StateSnapshot snap = model.snapshot_state();
  REQUIRE(grad.size() == snap.blob.size());

  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<size_t> pick(0, snap.blob.size() - 1);
  const double h = 1e-5;
  for (int i = 0; i < probes; ++i) {
    size_t idx = pick(rng);
    StateSnapshot s = snap;
    s.blob[idx] = snap.blob[idx] + h;
    double up = batch_objective(*restore_state(s), batch, token_mean);
    s.blob[idx] = snap.blob[idx] - h;
    double dn = batch_objective(*restore_state(s), batch, token_mean);
    double numeric = (up - dn) / (2.0 * h);
    INFO("param ", idx, " analytic=", grad[idx], " numeric=", numeric);
    CHECK(rel_err(grad[idx], numeric) < 1e-4);
  }
}

}  // namespace

TEST_CASE("greedy tokenizer splits by longest prefix") {
  SubwordTokenizer tok({"<s>", "[MASK]", "the", "tall", "er", "man", "walk", "s",
                        "a", "ab", "b"});
  CHECK(tok.split_word("the") == std::vector<int>{2});
  CHECK(tok.split_word("taller") == std::vector<int>{3, 4});
  CHECK(tok.split_word("walks") == std::vector<int>{6, 7});
  CHECK(tok.split_word("ab") == std::vector<int>{9});  // longest wins over a+b
  CHECK_THROWS_AS(tok.split_word("xyz"), BackendError);
  CHECK_THROWS_AS(tok.split_word("walkz"), BackendError);

  auto tr = tok.tokenize(ts("the taller man"));
  CHECK(tr.subword_ids == std::vector<int>{2, 3, 4, 5});
  CHECK(tr.word_boundaries ==
        std::vector<WordPieces>{{0, 1}, {1, 3}, {3, 4}});
  CHECK(tr.single_tokenized == std::vector<bool>{true, false, true});

  CHECK_THROWS_AS(SubwordTokenizer({"a", "a"}), BackendError);
}

TEST_CASE("zero-initialized causal model scores uniformly") {
  ReferenceLMConfig cfg = tiny_causal_cfg();
  cfg.init_scale = 0.0;
  auto m = init_reference_lm(Mode::causal, cfg);
  int V = m->vocab_size();
  CHECK(m->score_region(ts("a"), TokenString({{"b", 2}})) == -std::log(double(V)));
  CHECK(m->perplexity({ts("a b c"), ts("b a")}) ==
        doctest::Approx(double(V)).epsilon(1e-12));
}

TEST_CASE("empty region scores zero; causal ordering is enforced") {
  auto m = init_reference_lm(Mode::causal, tiny_causal_cfg());
  CHECK(m->score_region(ts("a b"), TokenString()) == 0.0);
  // region position 1 precedes context position 2
  TokenString region({{"b", 1}});
  TokenString ctx({{"a", 2}});
  CHECK_THROWS_AS(m->score_region(ctx, region), BackendError);
}

TEST_CASE("causal score decomposes over region tokens") {
  auto m = init_reference_lm(Mode::causal, tiny_causal_cfg());
  TokenString full = ts("a b c duck");
  TokenString ctx1({{"a", 1}});
  TokenString rest({{"b", 2}, {"c", 3}, {"duck", 4}});
  double whole = m->score_region(ctx1, rest);
  double parts = m->score_region(ts("a"), TokenString({{"b", 2}}));
  parts += m->score_region(ts("a b"), TokenString({{"c", 3}}));
  parts += m->score_region(ts("a b c"), TokenString({{"duck", 4}}));
  CHECK(whole == doctest::Approx(parts).epsilon(1e-14));
  (void)full;
}

TEST_CASE("same seed gives bitwise-identical states") {
  auto a = init_reference_lm(Mode::causal, tiny_causal_cfg());
  auto b = init_reference_lm(Mode::causal, tiny_causal_cfg());
  CHECK(a->snapshot_state().blob == b->snapshot_state().blob);
  ReferenceLMConfig other = tiny_causal_cfg();
  other.seed = 14;
  auto c = init_reference_lm(Mode::causal, other);
  CHECK(a->snapshot_state().blob != c->snapshot_state().blob);
}

TEST_CASE("zero learning rate returns an identical state") {
  auto m = init_reference_lm(Mode::causal, tiny_causal_cfg());
  std::vector<TrainEntry> batch = {{ts("a"), TokenString({{"glam", 2}}), 1.0, {}},
                                   {ts("a"), TokenString({{"duck", 2}}), -1.0, {}}};
  TrainOptions opts;
  opts.learning_rate = 0.0;
  opts.steps = 5;
  auto after = m->train(batch, opts);
  CHECK(after->snapshot_state().blob == m->snapshot_state().blob);
}

TEST_CASE("causal objective gradient matches finite differences") {
  auto m = init_reference_lm(Mode::causal, tiny_causal_cfg());
  std::vector<TrainEntry> batch = {{ts("a"), TokenString({{"glam", 2}}), 1.0, {}},
                                   {ts("a"), TokenString({{"duck", 2}}), -1.0, {}}};
  check_fd_gradient(*m, batch, false, 60, 101);
}

TEST_CASE("masked objective gradient matches finite differences") {
  auto m = init_reference_lm(Mode::masked, tiny_masked_cfg());
  // multi-subword regions exercise the within-word masking passes
  std::vector<TrainEntry> batch = {
      {ts("the # man").merged(TokenString()), TokenString(), 0.0, {}}};
  batch.clear();
  TokenString ctx({{"the", 1}, {"man", 3}});
  batch.push_back({ctx, TokenString({{"taller", 2}}), 1.0, {}});
  batch.push_back({ctx, TokenString({{"walk", 2}}), -1.0, {}});
  check_fd_gradient(*m, batch, false, 60, 202);
  check_fd_gradient(*m, batch, true, 30, 303);
}

TEST_CASE("training shifts probability toward the alternate region") {
  auto m = init_reference_lm(Mode::causal, tiny_causal_cfg());
  TokenString ctx = ts("a");
  TokenString duck({{"duck", 2}});
  TokenString glam({{"glam", 2}});
  double duck_before = m->score_region(ctx, duck);
  double glam_before = m->score_region(ctx, glam);
  std::vector<TrainEntry> batch = {{ctx, glam, 1.0, {}}, {ctx, duck, -1.0, {}}};
  TrainOptions opts;
  opts.learning_rate = 0.05;
  opts.steps = 10;
  auto trained = m->train(batch, opts);
  CHECK(trained->score_region(ctx, glam) > glam_before);
  CHECK(trained->score_region(ctx, duck) < duck_before);
  // original untouched
  CHECK(m->score_region(ctx, duck) == duck_before);
}

TEST_CASE("clones are independent of the original") {
  auto m = init_reference_lm(Mode::causal, tiny_causal_cfg());
  TokenString ctx = ts("a");
  TokenString duck({{"duck", 2}});
  double before = m->score_region(ctx, duck);
  auto clone = m->clone_state();
  TrainOptions opts;
  opts.learning_rate = 0.1;
  opts.steps = 5;
  auto trained = clone->train({{ctx, duck, -1.0, {}}}, opts);
  CHECK(m->score_region(ctx, duck) == before);
  CHECK(clone->score_region(ctx, duck) == before);
  CHECK(trained->score_region(ctx, duck) != before);
}

TEST_CASE("state save, load, and in-memory restore round-trip") {
  namespace fs = std::filesystem;
  auto m = init_reference_lm(Mode::masked, tiny_masked_cfg());
  TokenString ctx({{"the", 1}, {"man", 3}});
  TokenString region({{"taller", 2}});
  double score = m->pll_score_region(ctx, region);

  fs::path dir = fs::temp_directory_path() / "pk_state_test";
  fs::create_directories(dir);
  std::string prefix = (dir / "model").string();
  save_state(*m, prefix);
  auto loaded = load_state(prefix);
  CHECK(loaded->backend_id() == "ref_masked");
  CHECK(loaded->pll_score_region(ctx, region) == score);
  CHECK(loaded->snapshot_state().blob == m->snapshot_state().blob);

  auto restored = restore_state(m->snapshot_state());
  CHECK(restored->pll_score_region(ctx, region) == score);
  fs::remove_all(dir);
}

TEST_CASE("pll enumerates within-word left-to-right passes") {
  auto m = init_reference_lm(Mode::masked, tiny_masked_cfg());
  TokenString ctx({{"the", 1}, {"man", 3}});
  TokenString region({{"taller", 2}});
  // sequence subwords: the(0) tall(1) er(2) man(3)
  PllTrace trace;
  double total = m->pll_score_region(ctx, region, {}, &trace);
  REQUIRE(trace.passes.size() == 2);
  CHECK(trace.passes[0].target_position == 1);
  CHECK(trace.passes[0].masked_positions == std::vector<int>{1, 2});
  CHECK(trace.passes[1].target_position == 2);
  CHECK(trace.passes[1].masked_positions == std::vector<int>{2});
  CHECK(total ==
        doctest::Approx(trace.passes[0].logprob + trace.passes[1].logprob)
            .epsilon(1e-15));

  // first_subword_only keeps only the whole-word-masked pass
  PllTrace first;
  ScoreOptions opts;
  opts.first_subword_only = true;
  double fo = m->pll_score_region(ctx, region, opts, &first);
  REQUIRE(first.passes.size() == 1);
  CHECK(first.passes[0].target_position == 1);
  CHECK(first.passes[0].masked_positions == std::vector<int>{1, 2});
  CHECK(fo == first.passes[0].logprob);
}

TEST_CASE("pll of separate words equals the sum of per-word calls") {
  auto m = init_reference_lm(Mode::masked, tiny_masked_cfg());
  TokenString ctx({{"tall", 2}});
  TokenString region({{"the", 1}, {"man", 3}});
  PllTrace trace;
  double both = m->pll_score_region(ctx, region, {}, &trace);
  REQUIRE(trace.passes.size() == 2);
  CHECK(trace.passes[0].masked_positions == std::vector<int>{0});
  CHECK(trace.passes[1].masked_positions == std::vector<int>{2});

  double the_only = m->pll_score_region(TokenString({{"tall", 2}, {"man", 3}}),
                                        TokenString({{"the", 1}}));
  double man_only = m->pll_score_region(TokenString({{"the", 1}, {"tall", 2}}),
                                        TokenString({{"man", 3}}));
  CHECK(both == doctest::Approx(the_only + man_only).epsilon(1e-15));
}

TEST_CASE("masked mode accepts a region before its context") {
  auto m = init_reference_lm(Mode::masked, tiny_masked_cfg());
  TokenString region({{"the", 1}});
  TokenString ctx({{"tall", 2}, {"man", 3}});
  CHECK(std::isfinite(m->pll_score_region(ctx, region)));
}

TEST_CASE("zero-initialized masked model scores uniformly") {
  ReferenceLMConfig cfg = tiny_masked_cfg();
  cfg.init_scale = 0.0;
  auto m = init_reference_lm(Mode::masked, cfg);
  double lp = m->pll_score_region(ts("the"), TokenString({{"man", 2}}));
  CHECK(lp == doctest::Approx(-std::log(double(m->vocab_size()))).epsilon(1e-12));
}

TEST_CASE("embeddings are unit length and deterministic") {
  auto causal = init_reference_lm(Mode::causal, tiny_causal_cfg());
  auto e0 = causal->embed(ts("a"), TokenString({{"duck", 2}}), 0);
  auto e1 = causal->embed(ts("a"), TokenString({{"duck", 2}}), 1);
  auto e1_again = causal->embed(ts("a"), TokenString({{"duck", 2}}), 1);
  auto norm = [](const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
  };
  CHECK(norm(e0) == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(norm(e1) == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(e1 == e1_again);
  CHECK_THROWS_AS(causal->embed(ts("a"), TokenString({{"duck", 2}}), 2),
                  BackendError);

  auto masked = init_reference_lm(Mode::masked, tiny_masked_cfg());
  auto m0 = masked->embed(ts("the"), TokenString({{"taller", 2}}), 0);
  auto m1 = masked->embed(ts("the"), TokenString({{"taller", 2}}), 1);
  CHECK(norm(m0) == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(norm(m1) == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(m0 != m1);
}

TEST_CASE("runaway learning rate raises a divergence error with its step") {
  auto m = init_reference_lm(Mode::causal, tiny_causal_cfg());
  std::vector<TrainEntry> batch = {{ts("a"), TokenString({{"glam", 2}}), 1.0, {}},
                                   {ts("a"), TokenString({{"duck", 2}}), -1.0, {}}};
  TrainOptions opts;
  opts.learning_rate = 1e308;
  opts.steps = 4;
  try {
    m->train(batch, opts);
    FAIL("expected DivergenceError");
  } catch (const DivergenceError& e) {
    CHECK(e.step >= 2);
    CHECK(e.step <= 4);
  }
}

TEST_CASE("pretrained causal model recovers bigram statistics") {
  ReferenceLMConfig cfg;
  cfg.vocab = {"<s>", "a", "b", "c", "d"};
  cfg.embedding_dim = 8;
  cfg.hidden_dim = 16;
  cfg.context_window = 1;
  cfg.seed = 5;
  cfg.init_scale = 0.1;
  cfg.pretrain_steps = 800;
  cfg.pretrain_lr = 0.1;
  // P(b|a)=0.75, P(c|a)=0.25, P(b|d)=0.25, P(c|d)=0.75
  std::vector<TokenString> corpus = {ts("a b"), ts("a b"), ts("a b"), ts("a c"),
                                     ts("d b"), ts("d c"), ts("d c"), ts("d c")};
  auto m = init_reference_lm(Mode::causal, cfg, corpus);
  auto prob = [&](const std::string& ctx, const std::string& tok, int pos) {
    return std::exp(m->score_region(ts(ctx), TokenString({{tok, pos}})));
  };
  CHECK(prob("a", "b", 2) == doctest::Approx(0.75).epsilon(0.05));
  CHECK(prob("a", "c", 2) == doctest::Approx(0.25).epsilon(0.15));
  CHECK(prob("d", "c", 2) == doctest::Approx(0.75).epsilon(0.05));

  // deterministic pretraining: a certain bigram approaches certainty
  ReferenceLMConfig sure = cfg;
  sure.pretrain_steps = 600;
  std::vector<TokenString> certain = {ts("a b"), ts("a b"), ts("a b"), ts("a b")};
  auto m2 = init_reference_lm(Mode::causal, sure, certain);
  CHECK(m2->score_region(ts("a"), TokenString({{"b", 2}})) > std::log(0.9));
}

TEST_CASE("pretraining enforces the target loss when set") {
  ReferenceLMConfig cfg;
  cfg.vocab = {"<s>", "a", "b"};
  cfg.embedding_dim = 4;
  cfg.hidden_dim = 8;
  cfg.context_window = 1;
  cfg.seed = 1;
  cfg.pretrain_lr = 0.1;
  std::vector<TokenString> corpus = {ts("a b"), ts("a b")};

  cfg.pretrain_steps = 400;
  cfg.target_loss = 0.5;
  CHECK_NOTHROW(init_reference_lm(Mode::causal, cfg, corpus));

  cfg.pretrain_steps = 2;
  CHECK_THROWS_AS(init_reference_lm(Mode::causal, cfg, corpus), BackendError);

  cfg.pretrain_steps = 5;
  CHECK_THROWS_AS(init_reference_lm(Mode::causal, cfg, {}), ConfigError);
}

TEST_CASE("backend registry exposes the reference backends") {
  auto names = backend_names();
  CHECK(std::find(names.begin(), names.end(), "ref_causal") != names.end());
  CHECK(std::find(names.begin(), names.end(), "ref_masked") != names.end());
  CHECK_THROWS_AS(make_backend("no_such_backend", "{}"), ConfigError);

  std::string cfg = R"({"vocab": ["<s>", "x", "y"], "embedding_dim": 4,
    "hidden_dim": 4, "context_window": 1, "seed": 2, "corpus": ["x y", "x y"],
    "pretrain_steps": 50, "pretrain_lr": 0.1})";
  auto m = make_backend("ref_causal", cfg);
  CHECK(m->mode() == Mode::causal);
  CHECK(m->vocab_size() == 3);
  CHECK(std::isfinite(m->score_region(ts("x"), TokenString({{"y", 2}}))));
}

TEST_CASE("mask and bos vocabulary requirements are enforced") {
  ReferenceLMConfig no_mask = tiny_masked_cfg();
  no_mask.vocab = {"<s>", "the", "man"};
  CHECK_THROWS_AS(init_reference_lm(Mode::masked, no_mask), ConfigError);
  ReferenceLMConfig no_bos = tiny_causal_cfg();
  no_bos.vocab = {"a", "b"};
  CHECK_THROWS_AS(init_reference_lm(Mode::causal, no_bos), ConfigError);
}

TEST_CASE("region logprob dispatches on backend mode") {
  auto causal = init_reference_lm(Mode::causal, tiny_causal_cfg());
  CHECK(region_logprob(*causal, ts("a"), TokenString({{"b", 2}})) ==
        causal->score_region(ts("a"), TokenString({{"b", 2}})));
  auto masked = init_reference_lm(Mode::masked, tiny_masked_cfg());
  CHECK(region_logprob(*masked, ts("the"), TokenString({{"man", 2}})) ==
        masked->pll_score_region(ts("the"), TokenString({{"man", 2}})));
  CHECK_THROWS_AS(causal->pll_score_region(ts("a"), TokenString({{"b", 2}})),
                  BackendError);
  CHECK_THROWS_AS(masked->perplexity({ts("the man")}), BackendError);
}
