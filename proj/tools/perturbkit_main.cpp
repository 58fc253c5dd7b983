// perturbkit command line. Flag values override the run config file, which
// overrides library defaults.

#include <iostream>
#include <string>

#include "CLI11.hpp"

#include "perturbkit/cli.hpp"
#include "perturbkit/common.hpp"

namespace {

struct CommonFlags {
  std::string config;
  uint64_t seed = 0;
  int jobs = 1;
  bool skip_failures = false;
  std::string backend;
  std::string out;
  CLI::Option* seed_opt = nullptr;
  CLI::Option* jobs_opt = nullptr;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--config", f.config, "Run config JSON file");
  f.seed_opt = cmd->add_option("--seed", f.seed, "Run seed (overrides the config)");
  f.jobs_opt =
      cmd->add_option("--jobs", f.jobs, "Worker threads for row-parallel builds");
  cmd->add_flag("--skip-failures", f.skip_failures,
                "Flag diverged trials instead of aborting");
  cmd->add_option("--backend", f.backend, "Backend name (overrides the config)");
  cmd->add_option("--out", f.out, "Output directory (overrides the config)");
}

perturbkit::RunConfig resolve(const CommonFlags& f) {
  perturbkit::RunConfig cfg;
  if (!f.config.empty())
    cfg = perturbkit::run_config_from_json(perturbkit::read_text_file(f.config));
  if (f.seed_opt->count() > 0) {
    cfg.seed = f.seed;
    cfg.seed_set = true;
  }
  if (f.jobs_opt->count() > 0) cfg.jobs = f.jobs;
  if (f.skip_failures) cfg.skip_failures = true;
  if (!f.backend.empty()) cfg.backend.name = f.backend;
  if (!f.out.empty()) cfg.out = f.out;
  if (!cfg.seed_set)
    throw perturbkit::ConfigError("seed is required (config \"seed\" or --seed)");
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"perturbation probing toolkit"};
  app.require_subcommand(1);

  CommonFlags matrix_flags;
  CLI::App* matrix =
      app.add_subcommand("matrix", "Build transfer matrices for a dataset");
  add_common(matrix, matrix_flags);

  CommonFlags analyze_flags;
  perturbkit::AnalyzeRequest analyze_req;
  CLI::App* analyze =
      app.add_subcommand("analyze", "Score saved matrices or effect records");
  add_common(analyze, analyze_flags);
  analyze->add_option("--which", analyze_req.which,
                      "auc, crs, permtest, or aggregate")
      ->required();
  analyze->add_option("matrices", analyze_req.matrices,
                      "Matrix file prefixes (path without extension)");
  analyze->add_option("--set", analyze_req.set_path,
                      "Remapping JSONL for crs");
  analyze->add_option("--records", analyze_req.records_path,
                      "Effect record CSV for aggregate");

  CommonFlags hyper_flags;
  CLI::App* hyper = app.add_subcommand(
      "hyper", "Grid-search perturbation hyperparameters on the train split");
  add_common(hyper, hyper_flags);

  CommonFlags plot_flags;
  perturbkit::PlotRequest plot_req;
  CLI::App* plot =
      app.add_subcommand("plot", "Render heatmaps or distribution plots");
  add_common(plot, plot_flags);
  plot->add_option("--kind", plot_req.kind, "heatmap or distribution");
  plot->add_option("matrices", plot_req.matrices, "Matrix file prefixes");
  plot->add_option("--records", plot_req.records_path, "Effect record CSV");

  CommonFlags ppl_flags;
  std::string corpus_path, item_id;
  CLI::App* ppl = app.add_subcommand(
      "perplexity", "Corpus perplexity before and after one perturbation");
  add_common(ppl, ppl_flags);
  ppl->add_option("--corpus", corpus_path,
                  "Sentence file to score (defaults to the dataset corpus)");
  ppl->add_option("--item", item_id,
                  "Remapping id to perturb on; 'none' skips the perturbation");

  CLI::App* datasets = app.add_subcommand("datasets", "Dataset utilities");
  datasets->require_subcommand(1);
  CommonFlags ingest_flags;
  CLI::App* ingest =
      datasets->add_subcommand("ingest", "Convert a dataset to remapping JSONL");
  add_common(ingest, ingest_flags);

  CLI11_PARSE(app, argc, argv);

  try {
    if (matrix->parsed())
      return perturbkit::cmd_matrix(resolve(matrix_flags), std::cout);
    if (analyze->parsed())
      return perturbkit::cmd_analyze(resolve(analyze_flags), analyze_req,
                                     std::cout);
    if (hyper->parsed())
      return perturbkit::cmd_hyper(resolve(hyper_flags), std::cout);
    if (plot->parsed())
      return perturbkit::cmd_plot(resolve(plot_flags), plot_req, std::cout);
    if (ppl->parsed())
      return perturbkit::cmd_perplexity(resolve(ppl_flags), corpus_path,
                                        item_id, std::cout);
    if (datasets->parsed() && ingest->parsed())
      return perturbkit::cmd_ingest(resolve(ingest_flags), std::cout);
  } catch (const std::exception& e) {
    std::cerr << "error=" << e.what() << std::endl;
    return 1;
  }
  return 0;
}
