#pragma once

#include <functional>
#include <utility>
#include <vector>

#include "perturbkit/mat.hpp"

namespace perturbkit::ad {

/// Reverse-mode autodiff tape over dense matrices. Nodes are created in
/// topological order, so backward is a single reverse sweep. Leaves may carry
/// a gradient sink; backward() accumulates into it.
class Tape {
 public:
  int leaf(Mat value, Mat* grad_sink = nullptr) {
    return push(std::move(value), {}, nullptr, grad_sink);
  }

  int matmul(int a, int b) {
    Mat out = perturbkit::matmul(val(a), val(b));
    return push(std::move(out), {a, b}, [a, b](Tape& t, int self) {
      const Mat& g = t.grad_[self];
      accumulate(t.grad_[a], perturbkit::matmul_nt(g, t.val(b)));
      accumulate(t.grad_[b], perturbkit::matmul_tn(t.val(a), g));
    });
  }

  /// out = a * b^T
  int matmul_nt(int a, int b) {
    Mat out = perturbkit::matmul_nt(val(a), val(b));
    return push(std::move(out), {a, b}, [a, b](Tape& t, int self) {
      const Mat& g = t.grad_[self];
      accumulate(t.grad_[a], perturbkit::matmul(g, t.val(b)));
      accumulate(t.grad_[b], perturbkit::matmul_tn(g, t.val(a)));
    });
  }

  int add(int a, int b) {
    Mat out = val(a);
    const Mat& vb = val(b);
    for (size_t i = 0; i < out.size(); ++i) out.d[i] += vb.d[i];
    return push(std::move(out), {a, b}, [a, b](Tape& t, int self) {
      accumulate(t.grad_[a], t.grad_[self]);
      accumulate(t.grad_[b], t.grad_[self]);
    });
  }

  /// Broadcast-add a 1 x C bias to every row.
  int add_rowvec(int a, int bias) {
    Mat out = val(a);
    const Mat& vb = val(bias);
    for (int i = 0; i < out.rows; ++i)
      for (int j = 0; j < out.cols; ++j) out.at(i, j) += vb.at(0, j);
    return push(std::move(out), {a, bias}, [a, bias](Tape& t, int self) {
      const Mat& g = t.grad_[self];
      accumulate(t.grad_[a], g);
      Mat& gb = t.grad_[bias];
      for (int i = 0; i < g.rows; ++i)
        for (int j = 0; j < g.cols; ++j) gb.at(0, j) += g.at(i, j);
    });
  }

  int tanh(int a) {
    Mat out = val(a);
    for (double& v : out.d) v = std::tanh(v);
    return push(std::move(out), {a}, [a](Tape& t, int self) {
      const Mat& y = t.val(self);
      const Mat& g = t.grad_[self];
      Mat& ga = t.grad_[a];
      for (size_t i = 0; i < y.size(); ++i) ga.d[i] += (1.0 - y.d[i] * y.d[i]) * g.d[i];
    });
  }

  int scale(int a, double c) {
    Mat out = val(a);
    for (double& v : out.d) v *= c;
    return push(std::move(out), {a}, [a, c](Tape& t, int self) {
      const Mat& g = t.grad_[self];
      Mat& ga = t.grad_[a];
      for (size_t i = 0; i < g.size(); ++i) ga.d[i] += c * g.d[i];
    });
  }

  int softmax_rows(int a) {
    const Mat& x = val(a);
    Mat out(x.rows, x.cols);
    for (int i = 0; i < x.rows; ++i) {
      double mx = x.at(i, 0);
      for (int j = 1; j < x.cols; ++j) mx = std::max(mx, x.at(i, j));
      double z = 0.0;
      for (int j = 0; j < x.cols; ++j) z += std::exp(x.at(i, j) - mx);
      for (int j = 0; j < x.cols; ++j) out.at(i, j) = std::exp(x.at(i, j) - mx) / z;
    }
    return push(std::move(out), {a}, [a](Tape& t, int self) {
      const Mat& y = t.val(self);
      const Mat& g = t.grad_[self];
      Mat& ga = t.grad_[a];
      for (int i = 0; i < y.rows; ++i) {
        double dot = 0.0;
        for (int j = 0; j < y.cols; ++j) dot += g.at(i, j) * y.at(i, j);
        for (int j = 0; j < y.cols; ++j)
          ga.at(i, j) += y.at(i, j) * (g.at(i, j) - dot);
      }
    });
  }

  /// Row gather, e.g. embedding lookup: out.row(i) = table.row(idx[i]).
  int gather_rows(int table, std::vector<int> idx) {
    const Mat& tb = val(table);
    Mat out(static_cast<int>(idx.size()), tb.cols);
    for (size_t i = 0; i < idx.size(); ++i)
      for (int j = 0; j < tb.cols; ++j) out.at(static_cast<int>(i), j) = tb.at(idx[i], j);
    return push(std::move(out), {table},
                [table, idx = std::move(idx)](Tape& t, int self) {
                  const Mat& g = t.grad_[self];
                  Mat& gt = t.grad_[table];
                  for (size_t i = 0; i < idx.size(); ++i)
                    for (int j = 0; j < g.cols; ++j)
                      gt.at(idx[i], j) += g.at(static_cast<int>(i), j);
                });
  }

  /// Column-concatenate nodes with equal row counts.
  int concat_cols(std::vector<int> parts) {
    int rows = val(parts[0]).rows;
    int cols = 0;
    for (int p : parts) cols += val(p).cols;
    Mat out(rows, cols);
    int off = 0;
    for (int p : parts) {
      const Mat& v = val(p);
      for (int i = 0; i < rows; ++i)
        for (int j = 0; j < v.cols; ++j) out.at(i, off + j) = v.at(i, j);
      off += v.cols;
    }
    return push(std::move(out), parts, [parts](Tape& t, int self) {
      const Mat& g = t.grad_[self];
      int off = 0;
      for (int p : parts) {
        Mat& gp = t.grad_[p];
        for (int i = 0; i < gp.rows; ++i)
          for (int j = 0; j < gp.cols; ++j) gp.at(i, j) += g.at(i, off + j);
        off += gp.cols;
      }
    });
  }

  /// Weighted negative log-likelihood over rows of a logit matrix:
  ///   loss = sum_r w_r * (logsumexp(logits_r) - logits_r[target_r])
  int weighted_nll(int logits, std::vector<int> targets, std::vector<double> weights) {
    const Mat& x = val(logits);
    Mat probs(x.rows, x.cols);
    double loss = 0.0;
    for (int i = 0; i < x.rows; ++i) {
      double mx = x.at(i, 0);
      for (int j = 1; j < x.cols; ++j) mx = std::max(mx, x.at(i, j));
      double z = 0.0;
      for (int j = 0; j < x.cols; ++j) z += std::exp(x.at(i, j) - mx);
      double lse = mx + std::log(z);
      for (int j = 0; j < x.cols; ++j) probs.at(i, j) = std::exp(x.at(i, j) - lse);
      loss += weights[i] * (lse - x.at(i, targets[i]));
    }
    Mat out(1, 1);
    out.at(0, 0) = loss;
    return push(std::move(out), {logits},
                [logits, targets = std::move(targets), weights = std::move(weights),
                 probs = std::move(probs)](Tape& t, int self) {
                  double g = t.grad_[self].at(0, 0);
                  Mat& gl = t.grad_[logits];
                  for (int i = 0; i < gl.rows; ++i) {
                    for (int j = 0; j < gl.cols; ++j)
                      gl.at(i, j) += g * weights[i] * probs.at(i, j);
                    gl.at(i, targets[i]) -= g * weights[i];
                  }
                });
  }

  /// sum_i coeff_i * scalar_i over 1x1 nodes.
  int weighted_sum(std::vector<std::pair<int, double>> terms) {
    Mat out(1, 1);
    std::vector<int> parents;
    for (auto& [n, c] : terms) {
      out.at(0, 0) += c * val(n).at(0, 0);
      parents.push_back(n);
    }
    return push(std::move(out), parents, [terms = std::move(terms)](Tape& t, int self) {
      double g = t.grad_[self].at(0, 0);
      for (auto& [n, c] : terms) t.grad_[n].at(0, 0) += g * c;
    });
  }

  const Mat& val(int i) const { return nodes_[i]; }

  /// Backpropagate from a scalar node; leaf sinks accumulate their gradients.
  void backward(int out) {
    grad_[out].at(0, 0) = 1.0;
    for (int i = out; i >= 0; --i) {
      if (back_[i]) back_[i](*this, i);
      if (sink_[i]) accumulate(*sink_[i], grad_[i]);
    }
  }

  size_t num_nodes() const { return nodes_.size(); }

 private:
  using BackFn = std::function<void(Tape&, int)>;

  int push(Mat value, std::vector<int> /*parents*/, BackFn back, Mat* sink = nullptr) {
    nodes_.push_back(std::move(value));
    grad_.emplace_back(nodes_.back().rows, nodes_.back().cols);
    back_.push_back(std::move(back));
    sink_.push_back(sink);
    return static_cast<int>(nodes_.size()) - 1;
  }

  static void accumulate(Mat& into, const Mat& g) {
    for (size_t i = 0; i < into.size(); ++i) into.d[i] += g.d[i];
  }

  std::vector<Mat> nodes_;
  std::vector<Mat> grad_;
  std::vector<BackFn> back_;
  std::vector<Mat*> sink_;
};

}  // namespace perturbkit::ad
