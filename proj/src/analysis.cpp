#include "perturbkit/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <set>

namespace perturbkit {

namespace {

struct CellObs {
  double value;
  double pos_weight;
  double neg_weight;
};

double pearson(const std::vector<double>& x, const std::vector<double>& y) {
  const size_t n = x.size();
  double mx = 0.0, my = 0.0;
  for (size_t i = 0; i < n; ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (size_t i = 0; i < n; ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

}  // namespace

ClusterabilityResult clusterability_auc(const TransferMatrix& m,
                                        const ClusterabilityOptions& opts) {
  if (!m.square())
    throw ConfigError("clusterability requires matching row and column ids");
  const int n = m.rows();
  std::set<std::string> classes(m.row_labels.begin(), m.row_labels.end());
  if (classes.size() < 2)
    throw ConfigError("clusterability needs at least two classes, found " +
                      std::to_string(classes.size()));

  std::map<std::string, long> pos_count;
  std::map<std::pair<std::string, std::string>, long> neg_count;
  auto pair_key = [](const std::string& a, const std::string& b) {
    return a < b ? std::make_pair(a, b) : std::make_pair(b, a);
  };
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      if (opts.exclude_diagonal && i == j) continue;
      if (!std::isfinite(m.values.at(i, j)))
        throw ConfigError("matrix has a non-finite cell at (" + m.row_ids[i] +
                          ", " + m.col_ids[j] + ")");
      if (m.row_labels[i] == m.col_labels[j])
        ++pos_count[m.row_labels[i]];
      else
        ++neg_count[pair_key(m.row_labels[i], m.col_labels[j])];
    }

  ClusterabilityResult res;
  res.reweighted = opts.reweight;
  for (auto& [cls, cnt] : pos_count) res.positive_pairs += cnt;
  for (auto& [key, cnt] : neg_count) res.negative_pairs += cnt;
  if (res.positive_pairs == 0)
    throw ConfigError("no same-class cell pairs to rank");
  if (res.negative_pairs == 0)
    throw ConfigError("no cross-class cell pairs to rank");

  std::vector<CellObs> obs;
  obs.reserve(static_cast<size_t>(res.positive_pairs + res.negative_pairs));
  double total_pos = 0.0, total_neg = 0.0;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      if (opts.exclude_diagonal && i == j) continue;
      double v = m.values.at(i, j);
      if (m.row_labels[i] == m.col_labels[j]) {
        double w = opts.reweight ? 1.0 / pos_count[m.row_labels[i]] : 1.0;
        obs.push_back({v, w, 0.0});
        total_pos += w;
      } else {
        double w = opts.reweight
                       ? 1.0 / neg_count[pair_key(m.row_labels[i],
                                                  m.col_labels[j])]
                       : 1.0;
        obs.push_back({v, 0.0, w});
        total_neg += w;
      }
    }
  for (auto& [cls, cnt] : pos_count)
    res.per_class_weights[cls] = opts.reweight ? 1.0 / cnt : 1.0;

  std::sort(obs.begin(), obs.end(),
            [](const CellObs& a, const CellObs& b) { return a.value < b.value; });
  double numerator = 0.0, neg_below = 0.0;
  for (size_t i = 0; i < obs.size();) {
    size_t j = i;
    double group_pos = 0.0, group_neg = 0.0;
    while (j < obs.size() && obs[j].value == obs[i].value) {
      group_pos += obs[j].pos_weight;
      group_neg += obs[j].neg_weight;
      ++j;
    }
    numerator += group_pos * (neg_below + group_neg / 2.0);
    neg_below += group_neg;
    i = j;
  }
  res.auc = numerator / (total_pos * total_neg);
  if (obs.front().value == obs.back().value)
    res.warnings.push_back(
        "all transfer values are identical; AUC is 0.5 by construction");
  return res;
}

long LabelMultiset::total() const {
  long t = 0;
  for (auto& [label, count] : counts) t += count;
  return t;
}

double crs_similarity(const LabelMultiset& a, const LabelMultiset& b) {
  for (auto* s : {&a, &b})
    for (auto& [label, count] : s->counts)
      if (count < 0)
        throw ConfigError("negative count for label '" + label + "'");
  long ta = a.total(), tb = b.total();
  if (ta == 0 || tb == 0)
    throw ConfigError("completion multiset has no entries");
  long shared = 0;
  for (auto& [label, count] : a.counts) {
    auto it = b.counts.find(label);
    if (it != b.counts.end()) shared += std::min(count, it->second);
  }
  return static_cast<double>(shared) / static_cast<double>(std::max(ta, tb));
}

PermutationResult permutation_test(const std::vector<TransferMatrix>& ms,
                                   PermutationMode mode, int n_permutations,
                                   uint64_t seed) {
  if (ms.size() < 2)
    throw ConfigError("permutation test needs at least two matrices");
  if (n_permutations < 1)
    throw ConfigError("n_permutations must be at least 1");
  for (auto& m : ms)
    if (m.row_ids != ms[0].row_ids || m.col_ids != ms[0].col_ids)
      throw ConfigError("matrices are not aligned on the same ids");

  const int R = ms[0].rows(), C = ms[0].cols();
  const bool square = ms[0].square();
  std::vector<std::pair<int, int>> positions;
  for (int r = 0; r < R; ++r)
    for (int c = 0; c < C; ++c)
      if (!square || r != c) positions.push_back({r, c});

  std::vector<std::vector<double>> flats;
  for (size_t k = 0; k < ms.size(); ++k) {
    // Column permutations rotate former diagonal cells into view, so there
    // the whole grid must be finite, not just the scored positions.
    if (mode == PermutationMode::columns && square)
      for (double v : ms[k].values.d)
        if (!std::isfinite(v))
          throw ConfigError("matrix " + std::to_string(k) +
                            " has a non-finite cell");
    std::vector<double> flat;
    flat.reserve(positions.size());
    for (auto [r, c] : positions) {
      double v = ms[k].values.at(r, c);
      if (!std::isfinite(v))
        throw ConfigError("matrix " + std::to_string(k) +
                          " has a non-finite cell");
      flat.push_back(v);
    }
    double lo = *std::min_element(flat.begin(), flat.end());
    double hi = *std::max_element(flat.begin(), flat.end());
    if (lo == hi)
      throw ConfigError("matrix " + std::to_string(k) +
                        " is constant; the statistic is undefined");
    flats.push_back(std::move(flat));
  }

  auto statistic = [](const std::vector<std::vector<double>>& xs) {
    double s = 0.0;
    int pairs = 0;
    for (size_t a = 0; a < xs.size(); ++a)
      for (size_t b = a + 1; b < xs.size(); ++b) {
        s += pearson(xs[a], xs[b]);
        ++pairs;
      }
    return s / pairs;
  };

  PermutationResult res;
  res.observed = statistic(flats);
  res.n_permutations = n_permutations;
  std::mt19937_64 rng(derive_seed(seed, 0x7065u));
  std::vector<std::vector<double>> perm(flats.size());
  std::vector<int> cols(C);
  int at_or_above = 0;
  for (int rep = 0; rep < n_permutations; ++rep) {
    for (size_t k = 0; k < ms.size(); ++k) {
      if (mode == PermutationMode::columns) {
        for (int c = 0; c < C; ++c) cols[c] = c;
        std::shuffle(cols.begin(), cols.end(), rng);
        perm[k].clear();
        for (auto [r, c] : positions)
          perm[k].push_back(ms[k].values.at(r, cols[c]));
      } else {
        perm[k] = flats[k];
        std::shuffle(perm[k].begin(), perm[k].end(), rng);
      }
    }
    if (statistic(perm) >= res.observed) ++at_or_above;
  }
  res.p_value = static_cast<double>(at_or_above + 1) /
                static_cast<double>(n_permutations + 1);
  return res;
}

namespace {

using LevelTuple = std::vector<std::string>;

std::map<LevelTuple, std::pair<double, long>> cell_sums(
    const std::vector<EffectRecord>& records,
    const std::vector<std::string>& group_by,
    const std::vector<const std::string*>* override_col, size_t override_idx) {
  std::map<LevelTuple, std::pair<double, long>> cells;
  for (size_t r = 0; r < records.size(); ++r) {
    LevelTuple key;
    key.reserve(group_by.size());
    for (size_t f = 0; f < group_by.size(); ++f) {
      if (override_col && f == override_idx) {
        key.push_back(*(*override_col)[r]);
        continue;
      }
      auto it = records[r].metadata.find(group_by[f]);
      if (it == records[r].metadata.end())
        throw ConfigError("record (" + records[r].train_id + ", " +
                          records[r].eval_id + ") lacks factor '" +
                          group_by[f] + "'");
      key.push_back(it->second);
    }
    auto& slot = cells[key];
    slot.first += records[r].effect;
    slot.second += 1;
  }
  return cells;
}

/// Marginal level means for one factor, respecting the balancing rule.
std::map<std::string, double> marginal_means(
    const std::map<LevelTuple, std::pair<double, long>>& cells, size_t factor,
    bool balanced) {
  std::map<std::string, std::pair<double, long>> acc;
  for (auto& [key, sum_n] : cells) {
    auto& slot = acc[key[factor]];
    if (balanced) {
      slot.first += sum_n.first / sum_n.second;
      slot.second += 1;
    } else {
      slot.first += sum_n.first;
      slot.second += sum_n.second;
    }
  }
  std::map<std::string, double> out;
  for (auto& [level, sum_n] : acc)
    out[level] = sum_n.first / static_cast<double>(sum_n.second);
  return out;
}

}  // namespace

AggregateResult aggregate_effects(const std::vector<EffectRecord>& records,
                                  const std::vector<std::string>& group_by,
                                  bool balanced, int n_permutations,
                                  uint64_t seed) {
  if (records.empty()) throw ConfigError("no effect records to aggregate");
  if (group_by.empty())
    throw ConfigError("group_by must name at least one factor");

  auto cells = cell_sums(records, group_by, nullptr, 0);
  AggregateResult res;
  res.balanced = balanced;
  for (auto& [key, sum_n] : cells) {
    FactorCell cell;
    for (size_t f = 0; f < group_by.size(); ++f)
      cell.levels[group_by[f]] = key[f];
    cell.mean = sum_n.first / static_cast<double>(sum_n.second);
    cell.n = sum_n.second;
    res.cells.push_back(std::move(cell));
  }

  for (size_t f = 0; f < group_by.size(); ++f) {
    auto marg = marginal_means(cells, f, balanced);
    std::vector<LevelMean> levels;
    for (auto& [level, mean] : marg) {
      long count = 0;
      for (auto& [key, sum_n] : cells)
        if (key[f] == level) ++count;
      levels.push_back({level, mean, count});
    }
    res.marginals[group_by[f]] = std::move(levels);
  }

  for (size_t f = 0; f < group_by.size(); ++f) {
    auto& levels = res.marginals[group_by[f]];
    for (size_t a = 0; a < levels.size(); ++a)
      for (size_t b = a + 1; b < levels.size(); ++b) {
        LevelContrast contrast;
        contrast.factor = group_by[f];
        contrast.level_a = levels[a].level;
        contrast.level_b = levels[b].level;
        contrast.difference = levels[a].mean - levels[b].mean;
        if (n_permutations > 0) {
          std::mt19937_64 rng(derive_seed(seed, 0x6167u, f, a, b));
          std::vector<const std::string*> column;
          column.reserve(records.size());
          for (auto& r : records)
            column.push_back(&r.metadata.at(group_by[f]));
          int at_or_above = 0;
          for (int rep = 0; rep < n_permutations; ++rep) {
            std::shuffle(column.begin(), column.end(), rng);
            auto perm_cells = cell_sums(records, group_by, &column, f);
            auto marg = marginal_means(perm_cells, f, balanced);
            auto ita = marg.find(contrast.level_a);
            auto itb = marg.find(contrast.level_b);
            double d = (ita == marg.end() || itb == marg.end())
                           ? 0.0
                           : ita->second - itb->second;
            if (std::abs(d) >= std::abs(contrast.difference)) ++at_or_above;
          }
          contrast.p_value = static_cast<double>(at_or_above + 1) /
                             static_cast<double>(n_permutations + 1);
        }
        res.contrasts.push_back(std::move(contrast));
      }
  }
  return res;
}

TransferMatrix cosine_similarity_matrix(const Model& model,
                                        const LabeledExampleSet& set,
                                        int layer) {
  if (model.mode() != Mode::masked)
    throw BackendError("cosine similarity needs a masked-mode backend");
  if (set.items.empty())
    throw ConfigError("dataset '" + set.dataset_id + "' is empty");

  std::vector<std::vector<double>> embeddings;
  TransferMatrix m;
  for (auto& item : set.items) {
    embeddings.push_back(model.embed(item.remapping.context_original,
                                     item.remapping.region_original, layer));
    m.row_ids.push_back(item.remapping.id);
    m.row_labels.push_back(item.class_label);
    m.factors[item.remapping.id] = item.factors;
  }
  m.col_ids = m.row_ids;
  m.col_labels = m.row_labels;
  const int n = static_cast<int>(set.items.size());
  m.values = Mat(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      double dot = 0.0;
      for (size_t k = 0; k < embeddings[i].size(); ++k)
        dot += embeddings[i][k] * embeddings[j][k];
      m.values.at(i, j) = dot;
    }
  return m;
}

BestLayerResult best_layer_oracle(const Model& model,
                                  const std::vector<LabeledExampleSet>& sets) {
  if (sets.empty()) throw ConfigError("no sense sets given");
  BestLayerResult res;
  for (auto& set : sets) {
    LayerChoice choice;
    choice.word = set.dataset_id;
    choice.best_auc = -1.0;
    for (int layer = 0; layer <= model.depth(); ++layer) {
      double auc =
          clusterability_auc(cosine_similarity_matrix(model, set, layer)).auc;
      if (auc > choice.best_auc) {
        choice.best_auc = auc;
        choice.best_layer = layer;
      }
      if (layer == model.depth()) choice.last_auc = auc;
    }
    res.per_word.push_back(choice);
    res.mean_best_auc += choice.best_auc;
    res.mean_last_auc += choice.last_auc;
  }
  res.mean_best_auc /= static_cast<double>(res.per_word.size());
  res.mean_last_auc /= static_cast<double>(res.per_word.size());
  return res;
}

}  // namespace perturbkit
