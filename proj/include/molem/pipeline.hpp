#pragma once

// End-to-end continual-learning run: data generation, pretraining (or a
// cached reasoner), then per stage recruit -> train -> AE gate -> consolidate
// -> evaluate, with every artifact checksummed into a JSON run manifest.

#include <openssl/evp.h>

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "checkpoint.hpp"
#include "config.hpp"
#include "evaluator.hpp"
#include "metrics.hpp"
#include "reasoner.hpp"
#include "stage.hpp"
#include "taskgen.hpp"
#include "trainer.hpp"

namespace molem {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

inline std::string sha256_hex(const std::string& bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  require(EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) == 1, "SHA-256 failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(hex[md[i] >> 4]);
    out.push_back(hex[md[i] & 15]);
  }
  return out;
}

inline std::string sha256_file(const fs::path& p) { return sha256_hex(read_file(p.string())); }

/// A run directory and its manifest. Every write goes through `put`, which
/// records the file's checksum.
class RunDir {
 public:
  explicit RunDir(fs::path root) : root_(std::move(root)) {
    fs::create_directories(root_);
    if (fs::exists(manifest_path())) manifest_ = json::parse(read_file(manifest_path().string()));
  }

  const fs::path& root() const { return root_; }
  fs::path manifest_path() const { return root_ / "manifest.json"; }
  json& manifest() { return manifest_; }
  const json& manifest() const { return manifest_; }

  /// Writes `bytes` under the run root and records its checksum.
  std::string put(const std::string& rel, const std::string& bytes) {
    const fs::path p = root_ / rel;
    fs::create_directories(p.parent_path());
    write_file(p.string(), bytes);
    manifest_["files"][rel] = sha256_hex(bytes);
    return rel;
  }

  std::string get(const std::string& rel) const {
    const fs::path p = root_ / rel;
    require(fs::exists(p), "run file '" + p.string() + "' is missing");
    return read_file(p.string());
  }

  void save() const { write_file(manifest_path().string(), manifest_.dump(2) + "\n"); }

  /// Every recorded file exists and matches its checksum.
  std::vector<std::string> verify() const {
    std::vector<std::string> bad;
    if (!manifest_.contains("files")) return bad;
    for (const auto& [rel, sum] : manifest_["files"].items()) {
      const fs::path p = root_ / rel;
      if (!fs::exists(p) || sha256_file(p) != sum.get<std::string>()) bad.push_back(rel);
    }
    return bad;
  }

 private:
  fs::path root_;
  json manifest_ = json::object();
};

// ---------------------------------------------------------------------------
// Data

struct RunData {
  std::vector<DomainSplits> splits;  // in task order
  std::vector<TestSet> tests;        // in task order
};

/// Splits for each domain come from their own substream, so reordering the
/// tasks does not change any dataset.
inline RunData make_run_data(const RunConfig& cfg) {
  RunData d;
  for (Domain dom : cfg.task_order) {
    Rng rng = Rng::substream(cfg.seed, "datagen-" + domain_name(dom));
    d.splits.push_back(generate_splits(dom, cfg.splits, rng));
    d.tests.push_back({domain_name(dom), dom, d.splits.back().test});
  }
  return d;
}

inline std::unordered_set<std::string> held_out_prompts(const RunData& d) {
  std::unordered_set<std::string> out;
  for (const DomainSplits& s : d.splits) {
    for (const auto* part : {&s.val, &s.test}) {
      for (const Sample& x : *part) out.insert(x.prompt);
    }
  }
  return out;
}

inline std::string samples_tsv(const std::vector<Sample>& samples) {
  std::string out;
  for (const Sample& s : samples) out += s.prompt + '\t' + s.target + '\n';
  return out;
}

// ---------------------------------------------------------------------------
// Reasoner

inline Reasoner fresh_reasoner(const RunConfig& cfg) {
  Rng rng = Rng::substream(cfg.seed, "reasoner-init");
  return Reasoner(cfg.reasoner, Vocabulary::character_level(), rng);
}

struct PretrainOutcome {
  PretrainLog log;
  double seconds = 0.0;
};

inline PretrainOutcome pretrain_reasoner(Reasoner& model, const RunConfig& cfg, const RunData& data) {
  const auto t0 = std::chrono::steady_clock::now();
  Rng corpus_rng = Rng::substream(cfg.seed, "corpus");
  const auto excluded = held_out_prompts(data);
  const std::vector<CorpusLine> lines = generate_corpus(cfg.corpus, excluded, corpus_rng);
  CorpusConfig hc = cfg.corpus;
  hc.per_domain = cfg.heldout_lines;
  hc.filler = cfg.heldout_lines / 5;
  Rng held_rng = Rng::substream(cfg.seed, "corpus-heldout");
  std::vector<PretrainSequence> train;
  train.reserve(lines.size());
  for (const CorpusLine& l : lines) train.push_back({model.vocab().encode(l.text), l.prompt_len});
  std::vector<std::vector<int>> heldout;
  for (const CorpusLine& l : generate_corpus(hc, excluded, held_rng)) heldout.push_back(model.vocab().encode(l.text));
  PretrainConfig pc = cfg.pretrain;
  pc.latent_len = cfg.stage.latent_len;
  pc.max_extra_injections = cfg.stage.max_extra_injections;
  Rng rng = Rng::substream(cfg.seed, "pretrain");
  PretrainOutcome out;
  out.log = pretrain(model, train, heldout, pc, rng, [](const PretrainLog& log) {
    spdlog::info("pretrain step {} held-out loss {:.4f}", log.heldout_step.back(), log.heldout_loss.back());
  });
  out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

inline void load_reasoner(Reasoner& model, const std::string& bytes) {
  load_into(parse_checkpoint(bytes), model.parameters());
  model.freeze();
}

// ---------------------------------------------------------------------------
// Stages

inline std::vector<std::vector<double>> prompt_features(Reasoner& model, const std::vector<Sample>& samples) {
  std::vector<std::vector<double>> out;
  out.reserve(samples.size());
  for (const Sample& s : samples) out.push_back(prompt_end_feature(model, model.vocab().encode(s.prompt)));
  return out;
}

struct StageOutcome {
  StageTrainLog train_log;
  AeTrainLog ae_log;
  double threshold = 0.0;
  double seconds = 0.0;
};

/// recruit -> train_stage -> train_ae + calibrate_threshold -> consolidate.
inline StageOutcome run_stage(Reasoner& model, StageRegistry& registry, const RunConfig& cfg, const DomainSplits& split) {
  const auto t0 = std::chrono::steady_clock::now();
  StageGroup& group = registry.recruit(model, cfg.stage, cfg.seed, domain_name(split.domain));
  const std::string k = std::to_string(group.id());
  StageOutcome out;
  Rng train_rng = Rng::substream(cfg.seed, "train-" + k);
  out.train_log = train_stage(model, registry, cfg.stage, cfg.train, encode_samples(model.vocab(), split.train), train_rng);
  Rng ae_rng = Rng::substream(cfg.seed, "ae-" + k);
  out.ae_log = train_ae(group.ae(), prompt_features(model, split.train), cfg.stage.ae, ae_rng);
  out.threshold = calibrate_threshold(group.ae(), prompt_features(model, split.val), cfg.stage.ae.percentile);
  group.consolidate(out.threshold);
  out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

inline std::string stage_checkpoint_bytes(StageGroup& g) {
  std::vector<const Parameter*> ps;
  for (Parameter* p : g.parameters()) ps.push_back(p);
  return serialize_checkpoint(ps);
}

/// Rebuilds the registry recorded in a manifest: recruit with the run seed,
/// overwrite every tensor from the stage checkpoint, restore the threshold.
inline void load_registry(Reasoner& model, StageRegistry& registry, const RunConfig& cfg, const RunDir& run) {
  const json& m = run.manifest();
  if (!m.contains("stages")) return;
  for (const json& s : m["stages"]) {
    StageGroup& g = registry.recruit(model, cfg.stage, cfg.seed, s["label"].get<std::string>());
    load_into(parse_checkpoint(run.get(s["checkpoint"].get<std::string>())), g.parameters());
    g.restore(s["threshold"].get<double>(), true);
  }
}

// ---------------------------------------------------------------------------
// Reports

inline std::string grid_csv(const AccuracyMatrix& a) {
  std::string out = "stage";
  for (const auto& t : a.tasks) out += ',' + t;
  out += '\n';
  for (std::size_t k = 0; k < a.rows.size(); ++k) {
    out += std::to_string(k);
    for (double v : a.rows[k]) {
      char buf[40];
      std::snprintf(buf, sizeof buf, ",%.17g", v);
      out += buf;
    }
    out += '\n';
  }
  return out;
}

inline AccuracyMatrix accuracy_from_manifest(const json& m) {
  AccuracyMatrix a;
  for (const auto& t : m.at("tasks")) a.tasks.push_back(t.get<std::string>());
  for (const auto& row : m.at("accuracy")) a.rows.push_back(row.get<std::vector<double>>());
  return a;
}

struct PipelineOptions {
  std::optional<fs::path> reasoner_cache;  // load if present, else pretrain and store here
  bool run_baseline = false;
};

/// A run being built or reopened: config, data, the frozen reasoner and the
/// registry of consolidated stages.
struct Run {
  RunConfig cfg;
  RunDir dir;
  RunData data;
  Reasoner model;
  StageRegistry registry;

  Run(RunConfig c, fs::path root) : cfg(std::move(c)), dir(std::move(root)), data(make_run_data(cfg)), model(fresh_reasoner(cfg)) {}

  json& manifest() { return dir.manifest(); }
  std::size_t stages_done() const { return registry.size(); }
  GenerationConfig generation() const { return cfg.generation(); }
};

inline std::vector<std::vector<std::size_t>> routed_from_json(const json& j) {
  return j.get<std::vector<std::vector<std::size_t>>>();
}

inline void write_reports(Run& run, const EvalResult* latest) {
  json& m = run.manifest();
  const AccuracyMatrix a = accuracy_from_manifest(m);
  m["reports"]["metrics_md"] = run.dir.put("reports/metrics.md", metrics_markdown(a));
  m["reports"]["metrics_csv"] = run.dir.put("reports/metrics.csv", metrics_csv(a));
  m["reports"]["accuracy_grid"] = run.dir.put("reports/accuracy_grid.csv", grid_csv(a));
  if (m["stages"].empty()) return;
  std::vector<EvalResult> staged;
  std::vector<std::string> labels;
  for (const json& s : m["stages"]) {
    EvalResult r;
    r.routed = routed_from_json(s["routing"]);
    staged.push_back(std::move(r));
    labels.push_back(s["label"].get<std::string>());
  }
  m["reports"]["routing_stats"] = run.dir.put("reports/routing_stats.csv", routing_stats_csv(staged, labels, run.data.tests));
  if (latest != nullptr) {
    m["reports"]["expert_usage"] = run.dir.put("reports/expert_usage.csv", expert_usage_csv(*latest, run.data.tests));
    m["reports"]["routing_trace"] = run.dir.put("reports/routing_trace.csv", routing_trace_csv(*latest, run.data.tests));
  }
}

/// Writes config and datasets, then pretrains (or loads the cache) and
/// records the Vanilla accuracy row.
inline EvalResult init_and_pretrain(Run& run, const PipelineOptions& opt) {
  json& m = run.manifest();
  m = json::object();
  m["status"] = "running";
  m["preset"] = run.cfg.preset;
  m["config"] = run.dir.put("config.txt", serialize_config(run.cfg));
  m["vocabulary"] = run.model.vocab().serialize();
  m["tasks"] = json::array();
  for (const TestSet& t : run.data.tests) m["tasks"].push_back(t.name);
  for (const DomainSplits& sp : run.data.splits) {
    const std::string name = domain_name(sp.domain);
    for (auto [part, samples] : {std::pair{"train", &sp.train}, {"val", &sp.val}, {"test", &sp.test}}) {
      const std::string rel = "data/" + name + "_" + part + ".tsv";
      run.dir.put(rel, samples_tsv(*samples));
      m["datasets"][name][part] = {{"file", rel}, {"count", samples->size()},
                                   {"seed_stream", "datagen-" + name}};
    }
  }
  if (opt.reasoner_cache && fs::exists(*opt.reasoner_cache)) {
    spdlog::info("loading cached reasoner {}", opt.reasoner_cache->string());
    const std::string bytes = read_file(opt.reasoner_cache->string());
    load_reasoner(run.model, bytes);
    m["pretrain"] = {{"cached", true}, {"source_sha256", sha256_hex(bytes)}};
  } else {
    spdlog::info("pretraining the reasoner");
    const PretrainOutcome po = pretrain_reasoner(run.model, run.cfg, run.data);
    m["pretrain"] = {{"cached", false}, {"heldout_loss", po.log.heldout_loss.back()}, {"seconds", po.seconds}};
    if (opt.reasoner_cache) {
      if (opt.reasoner_cache->has_parent_path()) fs::create_directories(opt.reasoner_cache->parent_path());
      save_checkpoint(opt.reasoner_cache->string(), run.model.parameters());
    }
  }
  std::vector<const Parameter*> rp;
  for (Parameter* p : run.model.parameters()) rp.push_back(p);
  m["pretrain"]["checkpoint"] = run.dir.put("reasoner.ckpt", serialize_checkpoint(rp));
  spdlog::info("evaluating the vanilla reasoner");
  EvalResult vanilla = evaluate_all(run.model, run.registry, run.cfg.stage, run.data.tests, run.generation());
  m["accuracy"] = json::array({vanilla.accuracy});
  m["stages"] = json::array();
  write_reports(run, nullptr);
  m["status"] = "pretrained";
  run.dir.save();
  return vanilla;
}

/// Reopens a run directory written by init_and_pretrain / stage steps.
inline std::unique_ptr<Run> open_run(const fs::path& root) {
  require(fs::exists(root / "manifest.json"), "no run manifest in '" + root.string() + "'");
  RunDir probe(root);
  const RunConfig cfg = parse_config(probe.get("config.txt"));
  auto run = std::make_unique<Run>(cfg, root);
  load_reasoner(run->model, run->dir.get("reasoner.ckpt"));
  load_registry(run->model, run->registry, run->cfg, run->dir);
  return run;
}

/// Trains, gates, consolidates and evaluates the next stage in task order.
inline std::pair<StageOutcome, EvalResult> next_stage(Run& run) {
  const std::size_t k = run.stages_done();
  require(k < run.data.splits.size(), "every task in the order already has a stage");
  const DomainSplits& split = run.data.splits[k];
  const std::string id = std::to_string(k + 1);
  spdlog::info("stage {} ({})", id, domain_name(split.domain));
  StageOutcome so = run_stage(run.model, run.registry, run.cfg, split);
  EvalResult ev = evaluate_all(run.model, run.registry, run.cfg.stage, run.data.tests, run.generation());
  json& m = run.manifest();
  json st = {{"id", k + 1}, {"label", domain_name(split.domain)}, {"threshold", so.threshold}, {"seconds", so.seconds}};
  st["checkpoint"] = run.dir.put("stages/stage" + id + ".ckpt", stage_checkpoint_bytes(run.registry.back()));
  st["train_log"] = run.dir.put("logs/stage" + id + "_train.csv", so.train_log.csv());
  st["routing"] = ev.routed;
  m["stages"].push_back(st);
  m["accuracy"].push_back(ev.accuracy);
  write_reports(run, &ev);
  m["status"] = k + 1 == run.data.splits.size() ? "complete" : "stage " + id;
  run.dir.save();
  return {std::move(so), std::move(ev)};
}

inline AccuracyMatrix run_baseline(Run& run) {
  std::vector<std::vector<EncodedSample>> train_sets;
  for (const DomainSplits& s : run.data.splits) train_sets.push_back(encode_samples(run.model.vocab(), s.train));
  Rng rng = Rng::substream(run.cfg.seed, "baseline");
  AccuracyMatrix b = naive_sft_baseline(run.model, train_sets, run.data.tests, run.cfg.baseline, rng, run.generation());
  json& m = run.manifest();
  m["baseline_accuracy"] = b.rows;
  m["reports"]["baseline_md"] = run.dir.put("reports/baseline.md", metrics_markdown(b, "SFT"));
  m["reports"]["baseline_csv"] = run.dir.put("reports/baseline.csv", metrics_csv(b));
  run.dir.save();
  return b;
}

struct PipelineResult {
  AccuracyMatrix accuracy;
  std::optional<AccuracyMatrix> baseline;
  std::vector<EvalResult> evals;  // index 0 = Vanilla
  std::vector<StageOutcome> stages;
  double seconds = 0.0;
};

/// pretrain -> stage 1..T -> reports (-> baseline). Any failure leaves the
/// partial manifest with status "failed" and the error text.
inline PipelineResult run_pipeline(const RunConfig& cfg, const fs::path& root, const PipelineOptions& opt = {}) {
  const auto t0 = std::chrono::steady_clock::now();
  Run run(cfg, root);
  PipelineResult result;
  try {
    result.evals.push_back(init_and_pretrain(run, opt));
    while (run.stages_done() < run.data.splits.size()) {
      auto [so, ev] = next_stage(run);
      result.stages.push_back(std::move(so));
      result.evals.push_back(std::move(ev));
    }
    if (opt.run_baseline) result.baseline = run_baseline(run);
    result.accuracy = accuracy_from_manifest(run.manifest());
    result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    run.manifest()["seconds"] = result.seconds;
    run.dir.save();
  } catch (const std::exception& e) {
    run.manifest()["status"] = "failed";
    run.manifest()["error"] = e.what();
    run.dir.save();
    throw;
  }
  return result;
}

}  // namespace molem
