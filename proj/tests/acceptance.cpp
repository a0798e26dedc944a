// Acceptance run: every criterion prints one PASS/FAIL line; the exit code is
// the number of failures.
//
//   acceptance --work DIR [--config FILE] [--only 1,6,9]
//
// Criteria 2-5, 7, 8 and 10 share two full desk pipeline runs (A and B) in
// DIR/run_a and DIR/run_b; the baseline runs on A afterwards. The verdict
// lines are also written to DIR/acceptance.txt.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <spdlog/spdlog.h>

#include "fd_check.hpp"
#include "molem/molem.hpp"
#include "reference_grids.hpp"
#include "tiny_model.hpp"

namespace fs = std::filesystem;
using namespace molem;
using Clock = std::chrono::steady_clock;

namespace {

double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::map<int, Verdict> verdicts;
std::FILE* summary = nullptr;  // <work>/acceptance.txt, a copy of the verdict lines

void report(const std::string& line) {
  std::printf("%s\n", line.c_str());
  std::fflush(stdout);
  if (summary != nullptr) {
    std::fprintf(summary, "%s\n", line.c_str());
    std::fflush(summary);
  }
}

void record(int id, bool pass, const std::string& detail) {
  verdicts[id] = {pass, detail};
  char head[32];
  std::snprintf(head, sizeof head, "criterion %2d: %s  ", id, pass ? "PASS" : "FAIL");
  report(head + detail);
}

std::string strf(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// ---------------------------------------------------------------------------

void metric_tables() {
  const auto t0 = Clock::now();
  double worst = 0.0;
  std::size_t cells = 0;
  for (const auto& o : testing::reference_orders()) {
    for (const auto& m : o.methods) {
      worst = std::max(worst, testing::reference_deviation(o, m));
      cells += 4 * o.tasks.size();  // average, forget, bwt, fwt per stage
    }
  }
  const double secs = since(t0);
  record(1, worst <= 0.01 + 1e-9 && secs < 1.0,
         strf("%zu metric cells (present or absent) from 3 orders, max deviation %.4f, %.4fs", cells, worst, secs));
}

void load_balance_identities() {
  LoadBalanceStats s;
  s.f = {0.25, 0.25, 0.25, 0.25};
  s.p = s.f;
  const double uniform = load_balance_loss(s);
  s.f = {1, 0, 0, 0};
  s.p = s.f;
  const double collapse = load_balance_loss(s);

  Reasoner m = testing::tiny_reasoner();
  const StageConfig cfg = testing::tiny_stage_config();
  StageRegistry reg;
  StageGroup& g = reg.recruit(m, cfg, 1, "arith");
  Rng rng(2);
  std::vector<EncodedSample> batch;
  while (batch.size() < 6) {
    const std::string p = random_prompt(Domain::Arith, rng);
    if (p.size() == 6) batch.push_back(encode_samples(m.vocab(), {solve(Domain::Arith, p)}).front());
  }
  const std::size_t J =
      build_invocation_plan(m.vocab(), batch[0].prompt.size(), batch[0].target, cfg.max_extra_injections).positions.size();
  const BatchResult r = accumulate_batch_gradients(m, g, cfg, batch, 0.01);
  const bool ok = uniform == 1.0 && collapse == static_cast<double>(cfg.n_experts) && r.instances == batch.size() * J;
  record(9, ok,
         strf("uniform %.17g, collapse %.17g (K=%zu), instances %zu = S %zu x J %zu", uniform, collapse, cfg.n_experts,
             r.instances, batch.size(), J));
}

// FD on the desk reasoner with a fresh group recruited after the run's
// frozen stages.
void gradient_checks(Run& run) {
  const auto t0 = Clock::now();
  Reasoner& model = run.model;
  StageGroup& g = run.registry.recruit(model, run.cfg.stage, run.cfg.seed + 1, "fd");
  Rng noise(5);
  for (Parameter* p : g.trainable_parameters()) {
    for (double& x : p->value.data) x += 0.02 * noise.normal();
  }
  std::vector<EncodedSample> batch = encode_samples(model.vocab(), {run.data.splits[0].train[0], run.data.splits[0].train[1]});
  const double lambda = run.cfg.train.lambda;

  std::vector<Parameter*> frozen = model.parameters();
  for (std::size_t i = 0; i + 1 < run.registry.size(); ++i) {
    for (Parameter* p : run.registry.at(i).parameters()) frozen.push_back(p);
  }
  std::vector<Parameter*> params = g.trainable_parameters();
  bool frozen_clean = true;
  auto value = [&] {
    for (Parameter* p : params) p->zero_grad();
    const BatchResult r = accumulate_batch_gradients(model, g, run.cfg.stage, batch, lambda);
    for (Parameter* p : frozen) frozen_clean = frozen_clean && p->grad_norm_sq() == 0.0;
    return r.l_sft + lambda * r.l_lb;
  };
  value();
  std::map<const Parameter*, Tensor> grads;
  for (Parameter* p : params) grads[p] = p->grad;

  // One low-rank factor entry of each kind in every expert and the router,
  // the projection and the keys.
  std::vector<std::pair<Parameter*, std::string>> targets;
  for (LoraAdapter* a : [&] {
         std::vector<LoraAdapter*> v{&g.router()};
         for (LoraAdapter& e : g.experts()) v.push_back(&e);
         return v;
       }()) {
    targets.emplace_back(&a->factor(0, Site::Query).down, a->name() + " A");
    targets.emplace_back(&a->factor(model.config().n_layers - 1, Site::MlpOut).up, a->name() + " B");
  }
  targets.emplace_back(&g.projection(), "projection");
  targets.emplace_back(&g.keys(), "keys");
  Rng pick(9);
  double worst = 0.0;
  std::string worst_name;
  std::size_t coords = 0;
  for (auto& [p, name] : targets) {
    for (int c = 0; c < 2; ++c) {
      const std::size_t j = pick.index(p->value.size());
      const double x0 = p->value.data[j], h = 1e-5;
      p->value.data[j] = x0 + h;
      const double up = value();
      p->value.data[j] = x0 - h;
      const double dn = value();
      p->value.data[j] = x0;
      const double e = testing::fd_rel_err(grads[p].data[j], (up - dn) / (2 * h));
      if (e > worst) {
        worst = e;
        worst_name = name;
      }
      ++coords;
    }
  }
  record(6, worst < 1e-4 && frozen_clean,
         strf("%zu coordinates, max rel err %.3g (%s); grad norm on theta and %zu frozen stages %s; %.1fs", coords, worst,
             worst_name.c_str(), run.registry.size() - 1, frozen_clean ? "exactly 0" : "NONZERO", since(t0)));
}

// ---------------------------------------------------------------------------

struct PipelineRun {
  PipelineResult result;
  nlohmann::json files;
};

PipelineRun full_run(const RunConfig& cfg, const fs::path& dir) {
  fs::remove_all(dir);
  PipelineRun r;
  r.result = run_pipeline(cfg, dir);
  r.files = RunDir(dir).manifest().at("files");
  return r;
}

void zero_forgetting(const PipelineResult& r) {
  const auto t0 = Clock::now();
  const EvalResult& after1 = r.evals.at(1);
  std::size_t compared = 0, differing = 0, routed_away = 0;
  for (std::size_t k = 2; k < r.evals.size(); ++k) {
    const EvalResult& later = r.evals[k];
    for (std::size_t e = 0; e < later.outputs[0].size(); ++e) {
      if (later.stage_of[0][e] != std::optional<std::size_t>{0}) {
        routed_away += after1.stage_of[0][e] == std::optional<std::size_t>{0};
        continue;
      }
      if (after1.stage_of[0][e] != std::optional<std::size_t>{0}) continue;
      ++compared;
      differing += later.outputs[0][e] != after1.outputs[0][e];
    }
  }
  bool zero = true;
  std::string metrics;
  for (std::size_t k = 2; k <= r.accuracy.stages(); ++k) {
    const double f = *forgetting(r.accuracy, k), b = *bwt(r.accuracy, k);
    zero = zero && f == 0.0 && b == 0.0;
    metrics += strf(" k=%zu forget %s bwt %s;", k, fmt2(f).c_str(), fmt2(b).c_str());
  }
  record(2, differing == 0 && compared > 0 && zero,
         strf("%zu stage-1-routed outputs compared, %zu differ, %zu later routed elsewhere;%s check %.2fs", compared,
             differing, routed_away, metrics.c_str(), since(t0)));
}

void ood_fallback(Run& run, const PipelineResult& r) {
  std::size_t checked = 0, differing = 0;
  const GenerationConfig gen = run.generation();
  for (std::size_t k = 1; k < r.evals.size(); ++k) {
    const EvalResult& ev = r.evals[k];
    for (std::size_t t = 0; t < ev.outputs.size(); ++t) {
      for (std::size_t e = 0; e < ev.outputs[t].size(); ++e) {
        if (ev.stage_of[t][e]) continue;
        ++checked;
        const Sample& s = run.data.tests[t].samples[e];
        const GenerationResult plain = generate(run.model, run.model.vocab().encode(s.prompt), nullptr, gen);
        differing += run.model.vocab().decode(plain.tokens) != ev.outputs[t][e];
        differing += r.evals[0].outputs[t][e] != ev.outputs[t][e];
      }
    }
  }
  record(3, differing == 0,
         strf("%zu OOD-routed test prompts across stages 1-%zu re-decoded without memory, %zu mismatches", checked,
             r.evals.size() - 1, differing));
}

void threshold_calibration(Run& run, const PipelineResult& r) {
  bool ok = true;
  std::string detail;
  for (std::size_t s = 0; s < run.registry.size(); ++s) {
    StageGroup& g = run.registry.at(s);
    const auto feats = prompt_features(run.model, run.data.splits[s].val);
    std::size_t accepted = 0;
    for (const auto& h : feats) accepted += recon_error(g.ae(), h) <= g.threshold();
    const double rate = percent(accepted, feats.size());
    ok = ok && rate >= 95.0;
    detail += strf("val accept %s %s%%; ", g.label().c_str(), fmt2(rate).c_str());
  }
  const EvalResult& after1 = r.evals.at(1);
  for (std::size_t t = 1; t < after1.routed.size(); ++t) {
    const double ood = percent(after1.routed[t].back(), run.data.tests[t].samples.size());
    ok = ok && ood >= 80.0;
    detail += strf("stage-1 OOD %s %s%%; ", run.data.tests[t].name.c_str(), fmt2(ood).c_str());
  }
  record(4, ok, detail);
}

void routing_fidelity(Run& run, const PipelineResult& r) {
  const EvalResult& last = r.evals.back();
  bool ok = true;
  std::string detail;
  for (std::size_t t = 0; t < last.routed.size(); ++t) {
    const std::size_t n = run.data.tests[t].samples.size();
    double total = 0.0;
    std::size_t count = 0;
    for (std::size_t a = 0; a < last.routed[t].size(); ++a) {
      total += round2(percent(last.routed[t][a], n));
      count += last.routed[t][a];
    }
    const double own = percent(last.routed[t][t], n);
    ok = ok && own >= 85.0 && count == n && fmt2(total) == "100.00";
    detail += strf("%s->own %s%% (sum %s); ", run.data.tests[t].name.c_str(), fmt2(own).c_str(), fmt2(total).c_str());
  }
  record(5, ok, detail);
}

void learning_effect(const PipelineResult& r) {
  bool ok = r.seconds < 1800.0;
  std::string detail;
  for (std::size_t t = 0; t < r.accuracy.tasks.size(); ++t) {
    const double gain = r.accuracy.at(t + 1, t) - r.accuracy.at(0, t);
    ok = ok && gain >= 10.0;
    detail += strf("%s %s -> %s (%+.2f); ", r.accuracy.tasks[t].c_str(), fmt2(r.accuracy.at(0, t)).c_str(),
                  fmt2(r.accuracy.at(t + 1, t)).c_str(), gain);
  }
  detail += strf("pipeline %.0fs", r.seconds);
  record(7, ok, detail);
}

void forgetting_contrast(const PipelineResult& r, const AccuracyMatrix& base) {
  const std::size_t k = r.accuracy.stages();
  const double fb = *forgetting(base, k), fm = *forgetting(r.accuracy, k);
  const double am = average(r.accuracy, k), ab = average(base, k);
  record(8, fb > 5.0 && fm == 0.0 && am >= ab,
         strf("stage %zu forget: baseline %s, MoLEM %s; average: MoLEM %s vs baseline %s", k, fmt2(fb).c_str(),
             fmt2(fm).c_str(), fmt2(am).c_str(), fmt2(ab).c_str()));
}

void determinism(const PipelineRun& a, const PipelineRun& b) {
  std::size_t same = 0;
  std::vector<std::string> diff;
  for (const auto& [rel, sum] : b.files.items()) {
    if (a.files.contains(rel) && a.files[rel] == sum) {
      ++same;
    } else {
      diff.push_back(rel);
    }
  }
  const bool ok = diff.empty() && a.files.size() == b.files.size() && same > 0;
  std::string detail = strf("%zu files (checkpoints, datasets, reports, logs) SHA-256 identical across runs", same);
  for (const auto& d : diff) detail += " differs:" + d;
  record(10, ok, detail);
}

std::set<int> parse_only(const std::string& s) {
  std::set<int> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.insert(std::stoi(item));
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  fs::path work = "acceptance_runs";
  std::string config;
  std::set<int> only;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--work" && i + 1 < argc) work = argv[++i];
    else if (a == "--config" && i + 1 < argc) config = argv[++i];
    else if (a == "--only" && i + 1 < argc) only = parse_only(argv[++i]);
    else {
      std::fprintf(stderr, "usage: acceptance --work DIR [--config FILE] [--only 1,2,...]\n");
      return 2;
    }
  }
  auto wanted = [&](std::initializer_list<int> ids) {
    if (only.empty()) return true;
    for (int id : ids) {
      if (only.count(id)) return true;
    }
    return false;
  };
  spdlog::set_level(spdlog::level::info);
  fs::create_directories(work);
  summary = std::fopen((work / "acceptance.txt").string().c_str(), "w");
  const auto t0 = Clock::now();

  try {
    if (wanted({1})) metric_tables();
    if (wanted({9})) load_balance_identities();

    if (wanted({2, 3, 4, 5, 6, 7, 8, 10})) {
      const RunConfig cfg = config.empty() ? RunConfig::desk() : load_config(config);
      spdlog::info("pipeline run A");
      const PipelineRun a = full_run(cfg, work / "run_a");
      auto run = open_run(work / "run_a");
      if (wanted({2})) zero_forgetting(a.result);
      if (wanted({3})) ood_fallback(*run, a.result);
      if (wanted({4})) threshold_calibration(*run, a.result);
      if (wanted({5})) routing_fidelity(*run, a.result);
      if (wanted({7})) learning_effect(a.result);
      if (wanted({8})) {
        spdlog::info("naive sequential fine-tuning baseline");
        forgetting_contrast(a.result, run_baseline(*run));
      }
      if (wanted({10})) {
        spdlog::info("pipeline run B");
        determinism(a, full_run(cfg, work / "run_b"));
      }
      if (wanted({6})) gradient_checks(*run);
    }
  } catch (const std::exception& e) {
    report(std::string("acceptance aborted: ") + e.what());
    return 100;
  }

  int failed = 0;
  for (const auto& [id, v] : verdicts) failed += v.pass ? 0 : 1;
  report(strf("%zu criteria run, %d failed, %.0fs", verdicts.size(), failed, since(t0)));
  if (summary != nullptr) std::fclose(summary);
  return failed;
}
