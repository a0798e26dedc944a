// molem command-line driver.
//
//   molem run            --out DIR [--reasoner-cache FILE] [--baseline]
//   molem pretrain       --out DIR [--reasoner-cache FILE]
//   molem stage          --run DIR
//   molem eval           --run DIR            (alias: --stage-registry DIR)
//   molem metrics        --grid FILE | --run DIR  [--csv]
//   molem export-latents --run DIR --out DIR [--prompts N] [--pca]
//   molem baseline       --run DIR
//
// Configuration: --config FILE, --preset desk|paper, --set key=value (repeat).
// Exit codes: 0 ok, 2 usage, 3 training failure, 4 invariant violation.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <spdlog/spdlog.h>

#include "molem/molem.hpp"

namespace fs = std::filesystem;
using namespace molem;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitTraining = 3;
constexpr int kExitInvariant = 4;

struct ConfigArgs {
  std::string file;
  std::string preset;
  std::vector<std::string> sets;

  RunConfig build() const {
    RunConfig c = file.empty() ? RunConfig::from_preset(preset.empty() ? "desk" : preset) : load_config(file);
    if (!file.empty() && !preset.empty() && preset != c.preset) {
      throw UsageError("--preset " + preset + " conflicts with the config file's preset " + c.preset);
    }
    for (const std::string& kv : sets) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw UsageError("--set expects key=value, got '" + kv + "'");
      apply_setting(c, kv.substr(0, eq), kv.substr(eq + 1));
    }
    return c;
  }
};

void print_eval(const Run& run, const EvalResult& ev) {
  for (std::size_t t = 0; t < run.data.tests.size(); ++t) {
    std::printf("%-10s acc %6.2f  routed:", run.data.tests[t].name.c_str(), round2(ev.accuracy[t]));
    const std::size_t seen = ev.routed[t].size() - 1;
    for (std::size_t s = 0; s < seen; ++s) {
      std::printf(" stage%zu %s%%", s + 1, fmt2(percent(ev.routed[t][s], run.data.tests[t].samples.size())).c_str());
    }
    std::printf(" OOD %s%%\n", fmt2(percent(ev.routed[t][seen], run.data.tests[t].samples.size())).c_str());
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"molem: stage-isolated latent-memory experts over a frozen micro reasoner"};
  app.require_subcommand(1);
  ConfigArgs cfg_args;
  std::string log_level = "info";
  app.add_option("--config", cfg_args.file, "flat key = value config file")->check(CLI::ExistingFile);
  app.add_option("--preset", cfg_args.preset, "desk | paper")->check(CLI::IsMember({"desk", "paper"}));
  app.add_option("--set", cfg_args.sets, "override one config key (key=value)");
  app.add_option("--log-level", log_level, "trace|debug|info|warn|error|off");

  std::string out_dir, run_dir, cache, grid;
  bool with_baseline = false, as_csv = false, with_pca = false;
  std::size_t n_prompts = 30;

  auto* run_cmd = app.add_subcommand("run", "full pipeline: pretrain, every stage, reports");
  run_cmd->add_option("--out", out_dir, "run directory")->required();
  run_cmd->add_option("--reasoner-cache", cache, "frozen reasoner checkpoint to reuse or create");
  run_cmd->add_flag("--baseline", with_baseline, "also run the naive sequential fine-tune baseline");

  auto* pre_cmd = app.add_subcommand("pretrain", "generate data, pretrain and freeze the reasoner");
  pre_cmd->add_option("--out", out_dir, "run directory")->required();
  pre_cmd->add_option("--reasoner-cache", cache, "frozen reasoner checkpoint to reuse or create");

  auto* stage_cmd = app.add_subcommand("stage", "train, gate and consolidate the next stage");
  stage_cmd->add_option("--run", run_dir, "run directory")->required()->check(CLI::ExistingDirectory);

  auto* eval_cmd = app.add_subcommand("eval", "evaluate the current registry on every test set");
  auto* eval_run = eval_cmd->add_option("--run,--stage-registry", run_dir, "run directory")->check(CLI::ExistingDirectory);
  eval_run->required();

  auto* metrics_cmd = app.add_subcommand("metrics", "continual-learning metrics table");
  auto* grid_opt = metrics_cmd->add_option("--grid", grid, "accuracy grid CSV")->check(CLI::ExistingFile);
  auto* metrics_run = metrics_cmd->add_option("--run", run_dir, "run directory")->check(CLI::ExistingDirectory);
  grid_opt->excludes(metrics_run);
  metrics_cmd->add_flag("--csv", as_csv, "CSV instead of markdown");

  auto* export_cmd = app.add_subcommand("export-latents", "per-(stage, expert) latent segments for shared prompts");
  export_cmd->add_option("--run", run_dir, "run directory")->required()->check(CLI::ExistingDirectory);
  export_cmd->add_option("--out", out_dir, "output directory")->required();
  export_cmd->add_option("--prompts", n_prompts, "test prompts taken from each domain");
  export_cmd->add_flag("--pca", with_pca, "also write 2-component PCA coordinates");

  auto* base_cmd = app.add_subcommand("baseline", "naive sequential full fine-tuning baseline");
  base_cmd->add_option("--run", run_dir, "run directory")->required()->check(CLI::ExistingDirectory);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitUsage;
  }
  spdlog::set_level(spdlog::level::from_str(log_level));

  try {
    if (run_cmd->parsed()) {
      PipelineOptions opt;
      if (!cache.empty()) opt.reasoner_cache = cache;
      opt.run_baseline = with_baseline;
      const PipelineResult r = run_pipeline(cfg_args.build(), out_dir, opt);
      std::cout << metrics_markdown(r.accuracy);
      if (r.baseline) std::cout << "\n" << metrics_markdown(*r.baseline, "SFT");
    } else if (pre_cmd->parsed()) {
      PipelineOptions opt;
      if (!cache.empty()) opt.reasoner_cache = cache;
      Run run(cfg_args.build(), out_dir);
      print_eval(run, init_and_pretrain(run, opt));
    } else if (stage_cmd->parsed()) {
      auto run = open_run(run_dir);
      auto [so, ev] = next_stage(*run);
      std::printf("stage %zu threshold %.6g (%.1fs)\n", run->stages_done(), so.threshold, so.seconds);
      print_eval(*run, ev);
    } else if (eval_cmd->parsed()) {
      auto run = open_run(run_dir);
      const EvalResult ev = evaluate_all(run->model, run->registry, run->cfg.stage, run->data.tests, run->generation());
      const std::string tag = "eval_after_stage" + std::to_string(run->stages_done());
      run->dir.put("reports/" + tag + "_expert_usage.csv", expert_usage_csv(ev, run->data.tests));
      run->dir.put("reports/" + tag + "_routing_trace.csv", routing_trace_csv(ev, run->data.tests));
      run->dir.save();
      print_eval(*run, ev);
    } else if (metrics_cmd->parsed()) {
      AccuracyMatrix a;
      if (!grid.empty()) {
        a = parse_grid_csv(read_file(grid));
      } else if (!run_dir.empty()) {
        a = accuracy_from_manifest(RunDir(run_dir).manifest());
      } else {
        throw UsageError("metrics needs --grid FILE or --run DIR");
      }
      std::cout << (as_csv ? metrics_csv(a) : metrics_markdown(a));
    } else if (export_cmd->parsed()) {
      auto run = open_run(run_dir);
      if (run->registry.empty()) throw UsageError("the run has no stages to export");
      std::vector<std::string> prompts;
      for (const TestSet& t : run->data.tests) {
        for (std::size_t i = 0; i < std::min(n_prompts, t.samples.size()); ++i) prompts.push_back(t.samples[i].prompt);
      }
      const auto rows = export_latents(run->model, run->registry, run->cfg.stage, prompts);
      fs::create_directories(out_dir);
      std::string plist;
      for (const std::string& p : prompts) plist += p + '\n';
      write_file((fs::path(out_dir) / "prompts.txt").string(), plist);
      write_file((fs::path(out_dir) / "latents.csv").string(), latents_csv(rows));
      if (with_pca) write_file((fs::path(out_dir) / "latents_pca.csv").string(), pca_csv(rows, pca2(rows)));
      std::printf("%zu rows (%zu prompts x %zu stage-experts)\n", rows.size(), prompts.size(), rows.size() / prompts.size());
    } else if (base_cmd->parsed()) {
      auto run = open_run(run_dir);
      std::cout << metrics_markdown(run_baseline(*run), "SFT");
    }
  } catch (const UsageError& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return kExitUsage;
  } catch (const TrainingFailure& e) {
    std::fprintf(stderr, "training failure: %s\n", e.what());
    return kExitTraining;
  } catch (const InvariantViolation& e) {
    std::fprintf(stderr, "invariant violation: %s\n", e.what());
    return kExitInvariant;
  } catch (const ContractViolation& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitUsage;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
