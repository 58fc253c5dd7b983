#include "perturbkit/transfer.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <mutex>
#include <random>
#include <sstream>
#include <thread>

#include <nlohmann/json.hpp>

#include "perturbkit/csv.hpp"

namespace perturbkit {

using nlohmann::json;

const char* diagonal_policy_name(DiagonalPolicy policy) {
  return policy == DiagonalPolicy::kept ? "kept" : "excluded";
}

DiagonalPolicy diagonal_policy_from_name(const std::string& name) {
  if (name == "kept") return DiagonalPolicy::kept;
  if (name == "excluded") return DiagonalPolicy::excluded;
  throw ConfigError("unknown diagonal policy '" + name + "'");
}

namespace {

using RowUnit = MatrixBuildOptions::RowUnit;

/// Indices of set items under each row or column id, in dataset order.
struct Axis {
  std::vector<std::string> ids;
  std::vector<std::string> labels;
  std::vector<std::vector<int>> members;
};

Axis make_axis(const LabeledExampleSet& set, RowUnit unit) {
  Axis axis;
  if (set.items.empty()) throw ConfigError("dataset '" + set.dataset_id + "' is empty");
  if (unit == RowUnit::items) {
    std::map<std::string, int> seen;
    for (size_t i = 0; i < set.items.size(); ++i) {
      const std::string& id = set.items[i].remapping.id;
      if (!seen.emplace(id, 1).second)
        throw ConfigError("duplicate item id '" + id + "' in dataset '" +
                          set.dataset_id + "'");
      axis.ids.push_back(id);
      axis.labels.push_back(set.items[i].class_label);
      axis.members.push_back({static_cast<int>(i)});
    }
  } else {
    std::map<std::string, int> index;
    for (size_t i = 0; i < set.items.size(); ++i) {
      const std::string& label = set.items[i].class_label;
      auto it = index.find(label);
      if (it == index.end()) {
        index.emplace(label, static_cast<int>(axis.ids.size()));
        axis.ids.push_back(label);
        axis.labels.push_back(label);
        axis.members.push_back({static_cast<int>(i)});
      } else {
        axis.members[it->second].push_back(static_cast<int>(i));
      }
    }
  }
  return axis;
}

/// Factor levels common to every item aggregated under one id.
std::map<std::string, std::string> shared_factors(
    const LabeledExampleSet& set, const std::vector<int>& members) {
  std::map<std::string, std::string> out = set.items[members[0]].factors;
  for (size_t k = 1; k < members.size() && !out.empty(); ++k) {
    const auto& f = set.items[members[k]].factors;
    for (auto it = out.begin(); it != out.end();) {
      auto jt = f.find(it->first);
      if (jt == f.end() || jt->second != it->second)
        it = out.erase(it);
      else
        ++it;
    }
  }
  return out;
}

ScoreOptions item_score_options(const PerturbationConfig& cfg,
                                const LabeledExample& item) {
  ScoreOptions opts = cfg.score;
  opts.first_subword_only = opts.first_subword_only || item.first_subword_only;
  return opts;
}

std::vector<int> sample_without_replacement(std::vector<int> pool, int k,
                                            std::mt19937_64& rng) {
  if (static_cast<int>(pool.size()) <= k) return pool;
  for (int i = 0; i < k; ++i) {
    std::uniform_int_distribution<int> pick(i, static_cast<int>(pool.size()) - 1);
    std::swap(pool[i], pool[pick(rng)]);
  }
  pool.resize(k);
  std::sort(pool.begin(), pool.end());
  return pool;
}

}  // namespace

TransferMatrix build_transfer_matrix(const Model& base,
                                     const LabeledExampleSet& train_set,
                                     const LabeledExampleSet& eval_set,
                                     const PerturbationConfig& cfg,
                                     const MatrixBuildOptions& opts,
                                     std::vector<EffectRecord>* records) {
  if (opts.trials < 1) throw ConfigError("trials must be at least 1");
  if (opts.evals_per_cell < 1)
    throw ConfigError("evals_per_cell must be at least 1");
  if (opts.jobs < 1) throw ConfigError("jobs must be at least 1");

  Axis row_axis = make_axis(train_set, opts.row_unit);
  Axis col_axis = make_axis(eval_set, opts.row_unit);
  const int n_rows = static_cast<int>(row_axis.ids.size());
  const int n_cols = static_cast<int>(col_axis.ids.size());

  struct RowResult {
    std::vector<double> sums;
    std::vector<long> counts;
    std::vector<EffectRecord> records;
    std::vector<std::string> skipped;
    std::exception_ptr error;
  };
  std::vector<RowResult> results(n_rows);

  auto run_row = [&](int r) {
    RowResult& out = results[r];
    out.sums.assign(n_cols, 0.0);
    out.counts.assign(n_cols, 0);
    // Train item order for this row is fixed up front so trial t always
    // lands on the same item no matter how rows are scheduled.
    std::vector<int> order = row_axis.members[r];
    std::mt19937_64 row_rng(derive_seed(cfg.seed, 0x7472u, r));
    std::shuffle(order.begin(), order.end(), row_rng);

    for (int t = 0; t < opts.trials; ++t) {
      const LabeledExample& train = train_set.items[order[t % order.size()]];
      PerturbationConfig train_cfg = cfg;
      train_cfg.score = item_score_options(cfg, train);

      ModelPtr tuned;
      try {
        tuned = perturb(base, {train.remapping}, train_cfg);
      } catch (const BackendError&) {
        if (!opts.skip_failures) throw;
        out.skipped.push_back(row_axis.ids[r] + "/" + std::to_string(t));
        continue;
      }

      for (int c = 0; c < n_cols; ++c) {
        std::vector<int> pool;
        for (int idx : col_axis.members[c]) {
          const LabeledExample& cand = eval_set.items[idx];
          // Class cells never evaluate the item that was trained on; the
          // diagonal of an item grid is exactly that item, so it stays.
          if (opts.row_unit == RowUnit::groups &&
              cand.remapping.id == train.remapping.id)
            continue;
          if (opts.pair_filter && !opts.pair_filter(train, cand)) continue;
          pool.push_back(idx);
        }
        if (pool.empty())
          throw ConfigError("no admissible evaluation items for cell (" +
                            row_axis.ids[r] + ", " + col_axis.ids[c] + ")");
        std::mt19937_64 cell_rng(derive_seed(cfg.seed, 0x6576u, r, t, c));
        for (int idx : sample_without_replacement(pool, opts.evals_per_cell,
                                                  cell_rng)) {
          const LabeledExample& eval = eval_set.items[idx];
          double effect = remapping_effect(eval.remapping, base, *tuned,
                                           item_score_options(cfg, eval));
          out.sums[c] += effect;
          ++out.counts[c];
          if (records)
            out.records.push_back({train.remapping.id, eval.remapping.id, t,
                                   effect,
                                   {{"train_class", train.class_label},
                                    {"eval_class", eval.class_label}}});
        }
      }
    }
  };

  if (opts.jobs == 1 || n_rows == 1) {
    for (int r = 0; r < n_rows; ++r) {
      try {
        run_row(r);
      } catch (...) {
        results[r].error = std::current_exception();
        break;
      }
    }
  } else {
    std::atomic<int> next{0};
    auto worker = [&] {
      for (int r = next.fetch_add(1); r < n_rows; r = next.fetch_add(1)) {
        try {
          run_row(r);
        } catch (...) {
          results[r].error = std::current_exception();
        }
      }
    };
    std::vector<std::thread> threads;
    int n_threads = std::min(opts.jobs, n_rows);
    threads.reserve(n_threads);
    for (int i = 0; i < n_threads; ++i) threads.emplace_back(worker);
    for (auto& th : threads) th.join();
  }
  for (auto& row : results)
    if (row.error) std::rethrow_exception(row.error);

  TransferMatrix m;
  m.row_ids = row_axis.ids;
  m.col_ids = col_axis.ids;
  m.row_labels = row_axis.labels;
  m.col_labels = col_axis.labels;
  m.values = Mat(n_rows, n_cols);
  m.config_hash = hex64(fnv1a64(perturbation_config_to_json(cfg)));
  for (int r = 0; r < n_rows; ++r) {
    for (int c = 0; c < n_cols; ++c)
      m.values.at(r, c) =
          results[r].counts[c] > 0
              ? results[r].sums[c] / static_cast<double>(results[r].counts[c])
              : std::nan("");
    for (auto& s : results[r].skipped) m.skipped.push_back(s);
    if (records)
      records->insert(records->end(), results[r].records.begin(),
                      results[r].records.end());
  }
  for (int r = 0; r < n_rows; ++r)
    m.factors[m.row_ids[r]] = shared_factors(train_set, row_axis.members[r]);
  for (int c = 0; c < n_cols; ++c)
    if (!m.factors.count(m.col_ids[c]))
      m.factors[m.col_ids[c]] = shared_factors(eval_set, col_axis.members[c]);
  return m;
}

TransferMatrix build_transfer_matrix(const Model& base,
                                     const LabeledExampleSet& set,
                                     const PerturbationConfig& cfg,
                                     const MatrixBuildOptions& opts,
                                     std::vector<EffectRecord>* records) {
  return build_transfer_matrix(base, set, set, cfg, opts, records);
}

TransferMatrix symmetrize(const TransferMatrix& m) {
  if (!m.square())
    throw ConfigError("symmetrize requires matching row and column ids");
  TransferMatrix out = m;
  for (int i = 0; i < m.rows(); ++i)
    for (int j = i + 1; j < m.cols(); ++j) {
      double v = (m.values.at(i, j) + m.values.at(j, i)) / 2.0;
      out.values.at(i, j) = v;
      out.values.at(j, i) = v;
    }
  return out;
}

TransferMatrix baselined_transfer(const TransferMatrix& fg,
                                  const TransferMatrix& control) {
  if (fg.row_ids != control.row_ids || fg.col_ids != control.col_ids)
    throw ConfigError("baseline matrix ids do not match");
  TransferMatrix out = fg;
  for (size_t i = 0; i < out.values.d.size(); ++i)
    out.values.d[i] -= control.values.d[i];
  for (auto& s : control.skipped) out.skipped.push_back(s);
  return out;
}

std::vector<EffectRecord> matrix_cells_to_records(const TransferMatrix& m) {
  std::vector<EffectRecord> out;
  for (int r = 0; r < m.rows(); ++r)
    for (int c = 0; c < m.cols(); ++c) {
      double v = m.values.at(r, c);
      if (!std::isfinite(v)) continue;
      EffectRecord rec{m.row_ids[r], m.col_ids[c], 0, v, {}};
      rec.metadata["train_class"] = m.row_labels[r];
      rec.metadata["eval_class"] = m.col_labels[c];
      auto rf = m.factors.find(m.row_ids[r]);
      if (rf != m.factors.end())
        for (auto& [k, v2] : rf->second) rec.metadata["train_" + k] = v2;
      auto cf = m.factors.find(m.col_ids[c]);
      if (cf != m.factors.end())
        for (auto& [k, v2] : cf->second) rec.metadata["eval_" + k] = v2;
      out.push_back(std::move(rec));
    }
  return out;
}

void save_matrix(const TransferMatrix& m, const std::string& prefix) {
  std::ostringstream csv;
  std::vector<std::string> header = {"row_id"};
  header.insert(header.end(), m.col_ids.begin(), m.col_ids.end());
  csv << csv_join(header) << "\n";
  for (int r = 0; r < m.rows(); ++r) {
    std::vector<std::string> row = {m.row_ids[r]};
    for (int c = 0; c < m.cols(); ++c)
      row.push_back(format_double(m.values.at(r, c)));
    csv << csv_join(row) << "\n";
  }
  write_text_file_atomic(prefix + ".csv", csv.str());

  json j;
  j["format"] = "transfer-matrix";
  j["version"] = 1;
  j["row_ids"] = m.row_ids;
  j["col_ids"] = m.col_ids;
  j["row_labels"] = m.row_labels;
  j["col_labels"] = m.col_labels;
  j["factors"] = m.factors;
  j["diagonal_policy"] = diagonal_policy_name(m.diagonal_policy);
  j["config_hash"] = m.config_hash;
  j["skipped"] = m.skipped;
  write_text_file_atomic(prefix + ".json", j.dump(2) + "\n");
}

TransferMatrix load_matrix(const std::string& prefix) {
  TransferMatrix m;
  json j;
  try {
    j = json::parse(read_text_file(prefix + ".json"));
    if (j.value("format", "") != "transfer-matrix")
      throw ParseError("not a transfer matrix sidecar");
    m.row_ids = j.at("row_ids").get<std::vector<std::string>>();
    m.col_ids = j.at("col_ids").get<std::vector<std::string>>();
    m.row_labels = j.at("row_labels").get<std::vector<std::string>>();
    m.col_labels = j.at("col_labels").get<std::vector<std::string>>();
    m.factors = j.at("factors")
                    .get<std::map<std::string, std::map<std::string, std::string>>>();
    m.diagonal_policy =
        diagonal_policy_from_name(j.at("diagonal_policy").get<std::string>());
    m.config_hash = j.value("config_hash", "");
    m.skipped = j.value("skipped", std::vector<std::string>{});
  } catch (const json::exception& e) {
    throw ParseError(prefix + ".json: " + e.what());
  }
  if (m.row_labels.size() != m.row_ids.size() ||
      m.col_labels.size() != m.col_ids.size())
    throw ParseError(prefix + ".json: label and id lengths do not match");

  std::istringstream csv(read_text_file(prefix + ".csv"));
  std::string line;
  if (!std::getline(csv, line)) throw ParseError(prefix + ".csv is empty");
  auto header = csv_split(line);
  if (header.size() != m.col_ids.size() + 1 || header[0] != "row_id" ||
      !std::equal(m.col_ids.begin(), m.col_ids.end(), header.begin() + 1))
    throw ParseError(prefix + ".csv header does not match the sidecar ids");
  m.values = Mat(static_cast<int>(m.row_ids.size()),
                 static_cast<int>(m.col_ids.size()));
  int r = 0;
  while (std::getline(csv, line)) {
    if (line.empty()) continue;
    if (r >= m.values.rows) throw ParseError(prefix + ".csv has extra rows");
    auto fields = csv_split(line);
    if (fields.size() != header.size() || fields[0] != m.row_ids[r])
      throw ParseError(prefix + ".csv row " + std::to_string(r + 1) +
                       " does not match the sidecar ids");
    for (int c = 0; c < m.values.cols; ++c) {
      try {
        m.values.at(r, c) = std::stod(fields[c + 1]);
      } catch (const std::exception&) {
        throw ParseError(prefix + ".csv row " + std::to_string(r + 1) +
                         ": bad value '" + fields[c + 1] + "'");
      }
    }
    ++r;
  }
  if (r != m.values.rows) throw ParseError(prefix + ".csv is missing rows");
  return m;
}

}  // namespace perturbkit
