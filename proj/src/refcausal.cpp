#include <cmath>

#include "perturbkit/autograd.hpp"
#include "perturbkit/common.hpp"
#include "perturbkit/optim.hpp"
#include "ref_detail.hpp"

// Causal reference LM: a 2-layer feed-forward network over a fixed window of
// preceding subwords, left-padded with <s>. Small enough to finite-difference
// yet context-sensitive enough to show transfer structure.

namespace perturbkit::detail {

namespace {

struct TargetSet {
  std::vector<std::vector<int>> windows;  // one row of window ids per target
  std::vector<int> targets;               // true subword id per row
};

class RefCausalLM final : public Model {
 public:
  explicit RefCausalLM(ReferenceLMConfig cfg)
      : cfg_(std::move(cfg)), tok_(cfg_.vocab) {
    if (!tok_.has(kBosPiece))
      throw ConfigError("causal reference LM vocab must contain " +
                        std::string(kBosPiece));
    bos_ = tok_.id(kBosPiece);
    int V = tok_.size(), d = cfg_.embedding_dim, h = cfg_.hidden_dim;
    int w = cfg_.context_window;
    E = Mat(V, d);
    W1 = Mat(w * d, h);
    b1 = Mat(1, h);
    W2 = Mat(h, V);
    b2 = Mat(1, V);
    init_params(params(), cfg_.seed, cfg_.init_scale);
  }

  std::string backend_id() const override { return "ref_causal"; }
  Mode mode() const override { return Mode::causal; }
  int vocab_size() const override { return tok_.size(); }
  int depth() const override { return 1; }
  const SubwordTokenizer& tokenizer() const override { return tok_; }

  double score_region(const TokenString& context, const TokenString& region,
                      const ScoreOptions& opts) const override {
    require_causal_order(context, region);
    if (region.empty()) return 0.0;
    SeqInfo seq = assemble_sequence(tok_, context, region);
    TargetSet ts = region_targets(seq, opts.first_subword_only);
    ad::Tape t;
    Leaves lv = leaves(t, nullptr);
    Mat lp = log_softmax_rows(t.val(logits_node(t, lv, ts.windows)));
    double total = 0.0;
    for (int r = 0; r < lp.rows; ++r) total += lp.at(r, ts.targets[r]);
    return total;
  }

  ModelPtr train(const std::vector<TrainEntry>& batch,
                 const TrainOptions& opts) const override {
    auto next = std::make_shared<RefCausalLM>(*this);
    if (opts.learning_rate == 0.0) return next;

    auto prepared = prepare(batch, opts);
    Adam adam(opts.learning_rate);
    for (int step = 1; step <= opts.steps; ++step) {
      ad::Tape t;
      Grads g(*next);
      int loss = next->batch_loss(t, g, prepared);
      if (!std::isfinite(t.val(loss).at(0, 0)))
        throw DivergenceError("non-finite training loss", step, "");
      t.backward(loss);
      adam.step(next->params_mut(), g.mats);
    }
    return next;
  }

  std::vector<double> objective_gradient(const std::vector<TrainEntry>& batch,
                                         const TrainOptions& opts) const override {
    ad::Tape t;
    Grads g(*this);
    t.backward(batch_loss(t, g, prepare(batch, opts)));
    std::vector<double> out;
    for (auto& m : g.mats) out.insert(out.end(), m.d.begin(), m.d.end());
    return out;
  }

  ModelPtr clone_state() const override {
    return std::make_shared<RefCausalLM>(*this);
  }

  std::vector<double> embed(const TokenString& context, const TokenString& region,
                            int layer) const override {
    if (layer < 0 || layer > depth())
      throw BackendError("layer " + std::to_string(layer) + " out of range [0, " +
                         std::to_string(depth()) + "]");
    if (region.empty()) throw BackendError("embed requires a non-empty region");
    require_causal_order(context, region);
    SeqInfo seq = assemble_sequence(tok_, context, region);
    std::vector<int> positions;
    for (size_t w = 0; w < seq.bounds.size(); ++w)
      if (seq.is_region[w])
        for (int s = seq.bounds[w].begin; s < seq.bounds[w].end; ++s)
          positions.push_back(s);

    int d = cfg_.embedding_dim, h = cfg_.hidden_dim;
    std::vector<double> acc(layer == 0 ? d : h, 0.0);
    if (layer == 0) {
      for (int s : positions)
        for (int j = 0; j < d; ++j) acc[j] += E.at(seq.ids[s], j);
    } else {
      // hidden state after reading subword s: window ends at s inclusive
      std::vector<std::vector<int>> windows;
      for (int s : positions) windows.push_back(window_ending_at(seq.ids, s));
      ad::Tape t;
      Leaves lv = leaves(t, nullptr);
      int X = embed_windows(t, lv, windows);
      const Mat& H = t.val(t.tanh(t.add_rowvec(t.matmul(X, lv.W1), lv.b1)));
      for (int r = 0; r < H.rows; ++r)
        for (int j = 0; j < h; ++j) acc[j] += H.at(r, j);
    }
    for (double& v : acc) v /= static_cast<double>(positions.size());
    double norm = 0.0;
    for (double v : acc) norm += v * v;
    norm = std::sqrt(norm);
    if (norm > 0.0)
      for (double& v : acc) v /= norm;
    return acc;
  }

  double perplexity(const std::vector<TokenString>& corpus) const override {
    if (corpus.empty()) throw BackendError("perplexity of an empty corpus");
    double total = 0.0;
    long count = 0;
    for (auto& s : corpus) {
      if (s.empty()) continue;
      total += score_region(TokenString(), s, {});
      count += static_cast<long>(tok_.tokenize(s).subword_ids.size());
    }
    if (count == 0) throw BackendError("perplexity of an empty corpus");
    return std::exp(-total / static_cast<double>(count));
  }

  StateSnapshot snapshot_state() const override {
    auto ps = params();
    return {build_manifest("ref_causal", Mode::causal, cfg_, ps), pack(ps)};
  }

  void pretrain(const std::vector<TokenString>& corpus) {
    TargetSet all;
    for (auto& s : corpus) {
      SeqInfo seq = assemble_sequence(tok_, TokenString(), s);
      for (size_t i = 0; i < seq.ids.size(); ++i) {
        all.windows.push_back(window_before(seq.ids, static_cast<int>(i)));
        all.targets.push_back(seq.ids[i]);
      }
    }
    if (all.targets.empty()) throw ConfigError("pretraining corpus is empty");
    double tw = 1.0 / static_cast<double>(all.targets.size());
    std::vector<double> weights(all.targets.size(), tw);
    Adam adam(cfg_.pretrain_lr);
    double last_loss = 0.0;
    for (int step = 1; step <= cfg_.pretrain_steps; ++step) {
      ad::Tape t;
      Grads g(*this);
      Leaves lv = leaves(t, &g);
      int loss = t.weighted_nll(logits_node(t, lv, all.windows), all.targets, weights);
      last_loss = t.val(loss).at(0, 0);
      if (!std::isfinite(last_loss))
        throw DivergenceError("non-finite pretraining loss", step, "");
      t.backward(loss);
      adam.step(params_mut(), g.mats);
    }
    if (cfg_.target_loss > 0.0 && last_loss > cfg_.target_loss)
      throw BackendError("pretraining stopped at per-token loss " +
                         format_double(last_loss) + ", above target " +
                         format_double(cfg_.target_loss));
  }

  std::vector<NamedParam> params() const {
    auto* self = const_cast<RefCausalLM*>(this);
    return {{"E", &self->E},
            {"W1", &self->W1},
            {"b1", &self->b1},
            {"W2", &self->W2},
            {"b2", &self->b2}};
  }

 private:
  struct Grads {
    std::vector<Mat> mats;
    explicit Grads(const RefCausalLM& m) {
      for (auto& p : m.params()) mats.emplace_back(p.mat->rows, p.mat->cols);
    }
  };

  struct Prepared {
    TargetSet ts;
    double row_weight;
  };

  std::vector<Prepared> prepare(const std::vector<TrainEntry>& batch,
                                const TrainOptions& opts) const {
    std::vector<Prepared> prepared;
    for (auto& entry : batch) {
      require_causal_order(entry.context, entry.region);
      if (entry.region.empty()) continue;
      SeqInfo seq = assemble_sequence(tok_, entry.context, entry.region);
      TargetSet ts = region_targets(seq, entry.opts.first_subword_only);
      double w = entry.weight;
      if (opts.token_mean && !ts.targets.empty())
        w /= static_cast<double>(ts.targets.size());
      prepared.push_back({std::move(ts), w});
    }
    return prepared;
  }

  int batch_loss(ad::Tape& t, Grads& g, const std::vector<Prepared>& prepared) const {
    Leaves lv = leaves(t, &g);
    std::vector<std::pair<int, double>> terms;
    for (auto& p : prepared) {
      int logits = logits_node(t, lv, p.ts.windows);
      std::vector<double> weights(p.ts.targets.size(), p.row_weight);
      terms.push_back({t.weighted_nll(logits, p.ts.targets, weights), 1.0});
    }
    return t.weighted_sum(terms);
  }

  struct Leaves {
    int E, W1, b1, W2, b2;
  };

  Leaves leaves(ad::Tape& t, Grads* g) const {
    auto sink = [&](int i) { return g ? &g->mats[i] : nullptr; };
    return {t.leaf(E, sink(0)), t.leaf(W1, sink(1)), t.leaf(b1, sink(2)),
            t.leaf(W2, sink(3)), t.leaf(b2, sink(4))};
  }

  std::vector<Mat*> params_mut() {
    std::vector<Mat*> out;
    for (auto& p : params()) out.push_back(p.mat);
    return out;
  }

  /// ids of the w subwords preceding position s, BOS-padded on the left.
  std::vector<int> window_before(const std::vector<int>& ids, int s) const {
    int w = cfg_.context_window;
    std::vector<int> win(w, bos_);
    for (int j = 0; j < w; ++j) {
      int src = s - w + j;
      if (src >= 0) win[j] = ids[src];
    }
    return win;
  }

  std::vector<int> window_ending_at(const std::vector<int>& ids, int s) const {
    return window_before(ids, s + 1);
  }

  TargetSet region_targets(const SeqInfo& seq, bool first_subword_only) const {
    TargetSet ts;
    for (size_t w = 0; w < seq.bounds.size(); ++w) {
      if (!seq.is_region[w]) continue;
      for (int s = seq.bounds[w].begin; s < seq.bounds[w].end; ++s) {
        if (first_subword_only && s != seq.bounds[w].begin) continue;
        ts.windows.push_back(window_before(seq.ids, s));
        ts.targets.push_back(seq.ids[s]);
      }
    }
    return ts;
  }

  /// Concatenated window embeddings: one row per window, w*d columns.
  int embed_windows(ad::Tape& t, const Leaves& lv,
                    const std::vector<std::vector<int>>& windows) const {
    int w = cfg_.context_window;
    std::vector<int> parts;
    for (int j = 0; j < w; ++j) {
      std::vector<int> col;
      col.reserve(windows.size());
      for (auto& win : windows) col.push_back(win[j]);
      parts.push_back(t.gather_rows(lv.E, col));
    }
    return t.concat_cols(parts);
  }

  int logits_node(ad::Tape& t, const Leaves& lv,
                  const std::vector<std::vector<int>>& windows) const {
    int X = embed_windows(t, lv, windows);
    int H = t.tanh(t.add_rowvec(t.matmul(X, lv.W1), lv.b1));
    return t.add_rowvec(t.matmul(H, lv.W2), lv.b2);
  }

  ReferenceLMConfig cfg_;
  SubwordTokenizer tok_;
  int bos_ = -1;
  Mat E, W1, b1, W2, b2;
};

}  // namespace

ModelPtr make_ref_causal(const ReferenceLMConfig& cfg,
                         const std::vector<TokenString>& corpus) {
  auto model = std::make_shared<RefCausalLM>(cfg);
  if (cfg.pretrain_steps > 0) {
    if (corpus.empty())
      throw ConfigError("pretrain_steps > 0 requires a nonempty corpus");
    model->pretrain(corpus);
  }
  return model;
}

ModelPtr load_ref_causal(const std::string& manifest_json,
                         const std::vector<double>& blob) {
  auto model = std::make_shared<RefCausalLM>(
      parse_manifest(manifest_json, "ref_causal"));
  unpack(model->params(), blob);
  return model;
}

}  // namespace perturbkit::detail
