#include <cmath>

#include "perturbkit/autograd.hpp"
#include "perturbkit/common.hpp"
#include "perturbkit/optim.hpp"
#include "ref_detail.hpp"

// Masked reference LM: one bidirectional single-head attention block with a
// tanh feed-forward sublayer, residual connections, learned positions, and a
// vocabulary head. Scored via pseudo-log-likelihood.

namespace perturbkit::detail {

namespace {

struct Pass {
  std::vector<int> ids;            // sequence with this pass's masking applied
  int target_pos = 0;              // subword index whose true id is predicted
  int target_id = 0;
  std::vector<int> masked_positions;
};

class RefMaskedLM final : public Model {
 public:
  explicit RefMaskedLM(ReferenceLMConfig cfg)
      : cfg_(std::move(cfg)), tok_(cfg_.vocab) {
    if (!tok_.has(kMaskPiece))
      throw ConfigError("masked reference LM vocab must contain " +
                        std::string(kMaskPiece));
    mask_ = tok_.id(kMaskPiece);
    int V = tok_.size(), d = cfg_.embedding_dim, h = cfg_.hidden_dim;
    int L = cfg_.context_window;
    E = Mat(V, d);
    P = Mat(L, d);
    Wq = Mat(d, d);
    Wk = Mat(d, d);
    Wv = Mat(d, d);
    Wo = Mat(d, d);
    F1 = Mat(d, h);
    fb1 = Mat(1, h);
    F2 = Mat(h, d);
    fb2 = Mat(1, d);
    Wout = Mat(d, V);
    bout = Mat(1, V);
    init_params(params(), cfg_.seed, cfg_.init_scale);
  }

  std::string backend_id() const override { return "ref_masked"; }
  Mode mode() const override { return Mode::masked; }
  int vocab_size() const override { return tok_.size(); }
  int depth() const override { return 1; }
  const SubwordTokenizer& tokenizer() const override { return tok_; }

  double score_region(const TokenString& context, const TokenString& region,
                      const ScoreOptions& opts) const override {
    return pll_score_region(context, region, opts, nullptr);
  }

  double pll_score_region(const TokenString& context, const TokenString& region,
                          const ScoreOptions& opts,
                          PllTrace* trace) const override {
    if (region.empty()) return 0.0;
    SeqInfo seq = assemble(context, region, opts);
    check_length(seq);
    double total = 0.0;
    for (auto& pass : pll_passes(seq, opts.first_subword_only)) {
      ad::Tape t;
      Leaves lv = leaves(t, nullptr);
      Mat lp = log_softmax_rows(t.val(logits_node(t, lv, pass.ids)));
      double v = lp.at(pass.target_pos, pass.target_id);
      total += v;
      if (trace) trace->passes.push_back({pass.target_pos, pass.masked_positions, v});
    }
    return total;
  }

  ModelPtr train(const std::vector<TrainEntry>& batch,
                 const TrainOptions& opts) const override {
    auto next = std::make_shared<RefMaskedLM>(*this);
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
    return std::make_shared<RefMaskedLM>(*this);
  }

  std::vector<double> embed(const TokenString& context, const TokenString& region,
                            int layer) const override {
    if (layer < 0 || layer > depth())
      throw BackendError("layer " + std::to_string(layer) + " out of range [0, " +
                         std::to_string(depth()) + "]");
    if (region.empty()) throw BackendError("embed requires a non-empty region");
    SeqInfo seq = assemble_sequence(tok_, context, region);
    check_length(seq);
    std::vector<int> positions;
    for (size_t w = 0; w < seq.bounds.size(); ++w)
      if (seq.is_region[w])
        for (int s = seq.bounds[w].begin; s < seq.bounds[w].end; ++s)
          positions.push_back(s);

    int d = cfg_.embedding_dim;
    std::vector<double> acc(d, 0.0);
    if (layer == 0) {
      for (int s : positions)
        for (int j = 0; j < d; ++j) acc[j] += E.at(seq.ids[s], j);
    } else {
      ad::Tape t;
      Leaves lv = leaves(t, nullptr);
      const Mat& Z = t.val(hidden_node(t, lv, seq.ids));
      for (int s : positions)
        for (int j = 0; j < d; ++j) acc[j] += Z.at(s, j);
    }
    for (double& v : acc) v /= static_cast<double>(positions.size());
    double norm = 0.0;
    for (double v : acc) norm += v * v;
    norm = std::sqrt(norm);
    if (norm > 0.0)
      for (double& v : acc) v /= norm;
    return acc;
  }

  StateSnapshot snapshot_state() const override {
    auto ps = params();
    return {build_manifest("ref_masked", Mode::masked, cfg_, ps), pack(ps)};
  }

  void pretrain(const std::vector<TokenString>& corpus) {
    std::vector<Pass> all;
    for (auto& s : corpus) {
      SeqInfo seq = assemble_sequence(tok_, TokenString(), s);
      check_length(seq);
      for (size_t i = 0; i < seq.ids.size(); ++i) {
        Pass p;
        p.ids = seq.ids;
        p.ids[i] = mask_;
        p.target_pos = static_cast<int>(i);
        p.target_id = seq.ids[i];
        p.masked_positions = {static_cast<int>(i)};
        all.push_back(std::move(p));
      }
    }
    if (all.empty()) throw ConfigError("pretraining corpus is empty");
    double tw = 1.0 / static_cast<double>(all.size());
    Adam adam(cfg_.pretrain_lr);
    double last_loss = 0.0;
    for (int step = 1; step <= cfg_.pretrain_steps; ++step) {
      ad::Tape t;
      Grads g(*this);
      Leaves lv = leaves(t, &g);
      std::vector<std::pair<int, double>> terms;
      for (auto& pass : all) {
        int row = t.gather_rows(logits_node(t, lv, pass.ids), {pass.target_pos});
        terms.push_back({t.weighted_nll(row, {pass.target_id}, {tw}), 1.0});
      }
      int loss = t.weighted_sum(terms);
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
    auto* self = const_cast<RefMaskedLM*>(this);
    return {{"E", &self->E},     {"P", &self->P},     {"Wq", &self->Wq},
            {"Wk", &self->Wk},   {"Wv", &self->Wv},   {"Wo", &self->Wo},
            {"F1", &self->F1},   {"fb1", &self->fb1}, {"F2", &self->F2},
            {"fb2", &self->fb2}, {"Wout", &self->Wout}, {"bout", &self->bout}};
  }

 private:
  struct Grads {
    std::vector<Mat> mats;
    explicit Grads(const RefMaskedLM& m) {
      for (auto& p : m.params()) mats.emplace_back(p.mat->rows, p.mat->cols);
    }
  };

  struct Prepared {
    std::vector<Pass> passes;
    double row_weight;
  };

  std::vector<Prepared> prepare(const std::vector<TrainEntry>& batch,
                                const TrainOptions& opts) const {
    std::vector<Prepared> prepared;
    for (auto& entry : batch) {
      if (entry.region.empty()) continue;
      SeqInfo seq = assemble(entry.context, entry.region, entry.opts);
      check_length(seq);
      auto passes = pll_passes(seq, entry.opts.first_subword_only);
      double w = entry.weight;
      if (opts.token_mean && !passes.empty())
        w /= static_cast<double>(passes.size());
      prepared.push_back({std::move(passes), w});
    }
    return prepared;
  }

  int batch_loss(ad::Tape& t, Grads& g, const std::vector<Prepared>& prepared) const {
    Leaves lv = leaves(t, &g);
    std::vector<std::pair<int, double>> terms;
    for (auto& p : prepared)
      for (auto& pass : p.passes) {
        int row = t.gather_rows(logits_node(t, lv, pass.ids), {pass.target_pos});
        terms.push_back({t.weighted_nll(row, {pass.target_id}, {p.row_weight}), 1.0});
      }
    return t.weighted_sum(terms);
  }

  struct Leaves {
    int E, P, Wq, Wk, Wv, Wo, F1, fb1, F2, fb2, Wout, bout;
  };

  Leaves leaves(ad::Tape& t, Grads* g) const {
    auto ps = params();
    std::vector<int> ids(ps.size());
    for (size_t i = 0; i < ps.size(); ++i)
      ids[i] = t.leaf(*ps[i].mat, g ? &g->mats[i] : nullptr);
    return {ids[0], ids[1], ids[2], ids[3], ids[4],  ids[5],
            ids[6], ids[7], ids[8], ids[9], ids[10], ids[11]};
  }

  std::vector<Mat*> params_mut() {
    std::vector<Mat*> out;
    for (auto& p : params()) out.push_back(p.mat);
    return out;
  }

  /// Empty contexts get the sequence-start marker by default so that a
  /// bare region is still scored against some anchor position.
  SeqInfo assemble(const TokenString& ctx, const TokenString& region,
                   const ScoreOptions& opts) const {
    SeqInfo seq = assemble_sequence(tok_, ctx, region);
    if (ctx.empty() && opts.bos_on_empty_context && tok_.has(kBosPiece)) {
      seq.ids.insert(seq.ids.begin(), tok_.id(kBosPiece));
      for (auto& b : seq.bounds) {
        ++b.begin;
        ++b.end;
      }
      seq.bounds.insert(seq.bounds.begin(), WordPieces{0, 1});
      seq.is_region.insert(seq.is_region.begin(), false);
    }
    return seq;
  }

  void check_length(const SeqInfo& seq) const {
    if (static_cast<int>(seq.ids.size()) > cfg_.context_window)
      throw BackendError("sequence of " + std::to_string(seq.ids.size()) +
                         " subwords exceeds the position table (" +
                         std::to_string(cfg_.context_window) + ")");
  }

  int hidden_node(ad::Tape& t, const Leaves& lv, const std::vector<int>& ids) const {
    int n = static_cast<int>(ids.size());
    std::vector<int> pos(n);
    for (int i = 0; i < n; ++i) pos[i] = i;
    int X = t.add(t.gather_rows(lv.E, ids), t.gather_rows(lv.P, pos));
    int q = t.matmul(X, lv.Wq);
    int k = t.matmul(X, lv.Wk);
    int v = t.matmul(X, lv.Wv);
    int A = t.softmax_rows(
        t.scale(t.matmul_nt(q, k), 1.0 / std::sqrt(double(cfg_.embedding_dim))));
    int Y = t.add(X, t.matmul(t.matmul(A, v), lv.Wo));
    int F = t.add_rowvec(
        t.matmul(t.tanh(t.add_rowvec(t.matmul(Y, lv.F1), lv.fb1)), lv.F2), lv.fb2);
    return t.add(Y, F);
  }

  int logits_node(ad::Tape& t, const Leaves& lv, const std::vector<int>& ids) const {
    return t.add_rowvec(t.matmul(hidden_node(t, lv, ids), lv.Wout), lv.bout);
  }

  /// Within-word left-to-right masking: predicting subword s of a word hides
  /// s and every later subword of the same word; other words stay visible.
  std::vector<Pass> pll_passes(const SeqInfo& seq, bool first_subword_only) const {
    std::vector<Pass> out;
    for (size_t w = 0; w < seq.bounds.size(); ++w) {
      if (!seq.is_region[w]) continue;
      for (int s = seq.bounds[w].begin; s < seq.bounds[w].end; ++s) {
        if (first_subword_only && s != seq.bounds[w].begin) continue;
        Pass p;
        p.ids = seq.ids;
        for (int m = s; m < seq.bounds[w].end; ++m) {
          p.ids[m] = mask_;
          p.masked_positions.push_back(m);
        }
        p.target_pos = s;
        p.target_id = seq.ids[s];
        out.push_back(std::move(p));
      }
    }
    return out;
  }

  ReferenceLMConfig cfg_;
  SubwordTokenizer tok_;
  int mask_ = -1;
  Mat E, P, Wq, Wk, Wv, Wo, F1, fb1, F2, fb2, Wout, bout;
};

}  // namespace

ModelPtr make_ref_masked(const ReferenceLMConfig& cfg,
                         const std::vector<TokenString>& corpus) {
  auto model = std::make_shared<RefMaskedLM>(cfg);
  if (cfg.pretrain_steps > 0) {
    if (corpus.empty())
      throw ConfigError("pretrain_steps > 0 requires a nonempty corpus");
    model->pretrain(corpus);
  }
  return model;
}

ModelPtr load_ref_masked(const std::string& manifest_json,
                         const std::vector<double>& blob) {
  auto model = std::make_shared<RefMaskedLM>(
      parse_manifest(manifest_json, "ref_masked"));
  unpack(model->params(), blob);
  return model;
}

}  // namespace perturbkit::detail
