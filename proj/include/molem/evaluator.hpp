#pragma once

// Evaluation over the test sets (accuracy row, routing statistics, expert
// usage, routing traces), latent exports, and the naive sequential
// full-fine-tune baseline.

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <limits>

#include <cstddef>
#include <cstdio>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "metrics.hpp"
#include "optim.hpp"
#include "reasoner.hpp"
#include "stage.hpp"
#include "taskgen.hpp"
#include "trainer.hpp"

namespace molem {

struct TestSet {
  std::string name;
  Domain domain = Domain::Arith;
  std::vector<Sample> samples;
};

struct TraceRow {
  std::size_t test_set = 0;
  std::size_t example = 0;
  std::size_t stage = 0;  // 1-based
  std::size_t invocation = 0;
  std::size_t position = 0;
  std::vector<double> scores;
  std::vector<std::size_t> selected;
  std::vector<double> weights;  // alpha over all experts, zeros off the selection
};

struct EvalResult {
  std::vector<double> accuracy;                       // per test set, percent
  std::vector<std::vector<std::size_t>> routed;       // [set][stage 0..S-1, S = OOD]
  std::vector<std::vector<std::vector<std::size_t>>> usage;  // [set][stage][expert] selections
  std::vector<std::vector<std::string>> outputs;     // decoded generations
  std::vector<std::vector<std::optional<std::size_t>>> stage_of;  // per example, 0-based stage or OOD
  std::vector<TraceRow> traces;
};

inline double percent(std::size_t num, std::size_t den) {
  return den == 0 ? 0.0 : 100.0 * static_cast<double>(num) / static_cast<double>(den);
}

/// Dispatches, decodes and judges every example of every test set.
inline EvalResult evaluate_all(Reasoner& model, StageRegistry& registry, const StageConfig& cfg,
                               const std::vector<TestSet>& sets, const GenerationConfig& gen = {}) {
  require(!registry.has_unfrozen(), "evaluation requires every stage to be frozen");
  const Vocabulary& vocab = model.vocab();
  const std::size_t S = registry.size();
  EvalResult out;
  for (std::size_t t = 0; t < sets.size(); ++t) {
    std::size_t correct = 0;
    out.routed.emplace_back(S + 1, 0);
    out.usage.emplace_back(S, std::vector<std::size_t>(cfg.n_experts, 0));
    out.outputs.emplace_back();
    out.stage_of.emplace_back();
    for (std::size_t e = 0; e < sets[t].samples.size(); ++e) {
      const Sample& s = sets[t].samples[e];
      const std::vector<int> prompt = vocab.encode(s.prompt);
      RoutedGeneration g = generate_routed(model, registry, prompt, cfg, gen);
      const std::string text = vocab.decode(g.result.tokens);
      correct += judge(text, s.answer) ? 1 : 0;
      out.outputs.back().push_back(text);
      out.stage_of.back().push_back(g.decision.stage);
      if (g.decision.ood()) {
        ++out.routed.back()[S];
        continue;
      }
      const std::size_t st = *g.decision.stage;
      ++out.routed.back()[st];
      for (const InvocationRecord& r : g.invocations) {
        for (std::size_t k : r.weights.selected) ++out.usage.back()[st][k];
        out.traces.push_back({t, e, st + 1, r.index, r.position, r.weights.scores, r.weights.selected, r.weights.alpha});
      }
    }
    out.accuracy.push_back(percent(correct, sets[t].samples.size()));
  }
  return out;
}

/// Routing statistics in the per-stage block layout: one row per seen AE and
/// one OOD row for each CL stage, one column per test set.
inline std::string routing_stats_csv(const std::vector<EvalResult>& per_stage, const std::vector<std::string>& stage_labels,
                                     const std::vector<TestSet>& sets) {
  std::ostringstream out;
  out << "cl_stage,metric";
  for (const TestSet& s : sets) out << ',' << s.name;
  out << '\n';
  for (std::size_t k = 0; k < per_stage.size(); ++k) {
    const EvalResult& r = per_stage[k];
    const std::string stage = "Stage " + std::to_string(k + 1) + " " + stage_labels.at(k);
    const std::size_t seen = r.routed.at(0).size() - 1;
    for (std::size_t a = 0; a <= seen; ++a) {
      out << stage << ',' << (a < seen ? "AE " + stage_labels.at(a) + " (%)" : std::string("OOD (%)"));
      for (std::size_t t = 0; t < sets.size(); ++t) {
        out << ',' << fmt2(percent(r.routed[t][a], sets[t].samples.size()));
      }
      out << '\n';
    }
  }
  return out.str();
}

inline std::string expert_usage_csv(const EvalResult& r, const std::vector<TestSet>& sets) {
  std::ostringstream out;
  out << "test_set,stage,expert,count\n";
  for (std::size_t t = 0; t < r.usage.size(); ++t) {
    for (std::size_t s = 0; s < r.usage[t].size(); ++s) {
      for (std::size_t k = 0; k < r.usage[t][s].size(); ++k) {
        out << sets[t].name << ',' << s + 1 << ',' << k << ',' << r.usage[t][s][k] << '\n';
      }
    }
  }
  return out.str();
}

inline std::string routing_trace_csv(const EvalResult& r, const std::vector<TestSet>& sets) {
  auto join = [](const auto& v) {
    std::ostringstream ss;
    ss.precision(17);
    for (std::size_t i = 0; i < v.size(); ++i) ss << (i ? ";" : "") << v[i];
    return ss.str();
  };
  std::ostringstream out;
  out << "test_set,example,stage,invocation,position,scores,selected,weights\n";
  for (const TraceRow& t : r.traces) {
    out << sets[t.test_set].name << ',' << t.example << ',' << t.stage << ',' << t.invocation << ',' << t.position
        << ',' << join(t.scores) << ',' << join(t.selected) << ',' << join(t.weights) << '\n';
  }
  return out.str();
}

// ---------------------------------------------------------------------------
// Latent exports

struct LatentRow {
  std::size_t stage = 0;  // 1-based
  std::size_t expert = 0;
  std::size_t prompt = 0;
  std::vector<double> values;  // m * d_model, row-major
};

/// Segment of every (stage, expert) for each prompt, generated right after
/// the prompt with no prior injections.
inline std::vector<LatentRow> export_latents(Reasoner& model, StageRegistry& registry, const StageConfig& cfg,
                                             const std::vector<std::string>& prompts) {
  std::vector<LatentRow> rows;
  for (std::size_t s = 0; s < registry.size(); ++s) {
    for (std::size_t k = 0; k < registry.at(s).experts().size(); ++k) {
      for (std::size_t p = 0; p < prompts.size(); ++p) {
        const std::vector<int> ids = model.vocab().encode(prompts[p]);
        Tensor m = generate_memory(model, registry.at(s).expert(k), ids, {}, cfg.latent_len);
        rows.push_back({s + 1, k, p, std::move(m.data)});
      }
    }
  }
  return rows;
}

/// Two leading principal-component coordinates of each row (centered,
/// via SVD). Component signs are fixed so the largest-magnitude loading is
/// positive, which keeps re-exports identical.
inline std::vector<std::array<double, 2>> pca2(const std::vector<LatentRow>& rows) {
  require(rows.size() >= 2, "PCA needs at least two rows");
  const std::size_t n = rows.size(), d = rows.front().values.size();
  Eigen::MatrixXd x(n, d);
  for (std::size_t i = 0; i < n; ++i) {
    require(rows[i].values.size() == d, "latent rows differ in width");
    for (std::size_t j = 0; j < d; ++j) x(i, j) = rows[i].values[j];
  }
  x.rowwise() -= x.colwise().mean();
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(x, Eigen::ComputeThinV);
  Eigen::MatrixXd v = svd.matrixV().leftCols(std::min<Eigen::Index>(2, svd.matrixV().cols()));
  for (Eigen::Index c = 0; c < v.cols(); ++c) {
    Eigen::Index at = 0;
    v.col(c).cwiseAbs().maxCoeff(&at);
    if (v(at, c) < 0) v.col(c) *= -1.0;
  }
  const Eigen::MatrixXd proj = x * v;
  std::vector<std::array<double, 2>> out(n, {0.0, 0.0});
  for (std::size_t i = 0; i < n; ++i) {
    for (Eigen::Index c = 0; c < proj.cols(); ++c) out[i][static_cast<std::size_t>(c)] = proj(static_cast<Eigen::Index>(i), c);
  }
  return out;
}

inline std::string latents_csv(const std::vector<LatentRow>& rows) {
  std::ostringstream out;
  out.precision(17);
  out << "stage,expert,prompt,values\n";
  for (const LatentRow& r : rows) {
    out << r.stage << ',' << r.expert << ',' << r.prompt << ',';
    for (std::size_t i = 0; i < r.values.size(); ++i) out << (i ? ";" : "") << r.values[i];
    out << '\n';
  }
  return out.str();
}

inline std::string pca_csv(const std::vector<LatentRow>& rows, const std::vector<std::array<double, 2>>& pc) {
  std::ostringstream out;
  out.precision(17);
  out << "stage,expert,prompt,pc1,pc2\n";
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out << rows[i].stage << ',' << rows[i].expert << ',' << rows[i].prompt << ',' << pc[i][0] << ',' << pc[i][1] << '\n';
  }
  return out.str();
}

/// Mean silhouette coefficient of labelled points under Euclidean distance.
inline double silhouette(const std::vector<std::array<double, 2>>& pts, const std::vector<std::size_t>& labels) {
  require(pts.size() == labels.size() && !pts.empty(), "silhouette needs one label per point");
  auto dist = [&](std::size_t a, std::size_t b) { return std::hypot(pts[a][0] - pts[b][0], pts[a][1] - pts[b][1]); };
  std::size_t n_labels = 0;
  for (std::size_t l : labels) n_labels = std::max(n_labels, l + 1);
  double total = 0.0;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    std::vector<double> sum(n_labels, 0.0);
    std::vector<std::size_t> cnt(n_labels, 0);
    for (std::size_t j = 0; j < pts.size(); ++j) {
      if (j == i) continue;
      sum[labels[j]] += dist(i, j);
      ++cnt[labels[j]];
    }
    if (cnt[labels[i]] == 0) continue;  // singleton clusters score 0
    const double a = sum[labels[i]] / static_cast<double>(cnt[labels[i]]);
    double b = std::numeric_limits<double>::infinity();
    for (std::size_t l = 0; l < n_labels; ++l) {
      if (l != labels[i] && cnt[l] > 0) b = std::min(b, sum[l] / static_cast<double>(cnt[l]));
    }
    if (std::isfinite(b) && std::max(a, b) > 0) total += (b - a) / std::max(a, b);
  }
  return total / static_cast<double>(pts.size());
}

// ---------------------------------------------------------------------------
// Naive sequential fine-tuning baseline

struct SftConfig {
  std::size_t epochs = 3;
  std::size_t batch_size = 16;
  double learning_rate = 3e-4;
  double warmup_ratio = 0.1;
  double weight_decay = 0.01;
  std::size_t max_samples = 0;
};

/// Full-parameter SFT of an unfrozen reasoner on prompt -> target pairs;
/// loss is the batch mean of per-sample summed target NLL, as in stage
/// training.
inline std::vector<double> full_finetune(Reasoner& model, const std::vector<EncodedSample>& data, const SftConfig& cfg,
                                         Rng& rng) {
  require(!model.frozen(), "full fine-tuning needs an unfrozen copy of the reasoner");
  const std::size_t n = cfg.max_samples == 0 ? data.size() : std::min(cfg.max_samples, data.size());
  require(n > 0, "empty fine-tuning set");
  const std::size_t steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  OptimizerConfig oc;
  oc.kind = OptimizerKind::AdamW;
  oc.learning_rate = cfg.learning_rate;
  oc.warmup_ratio = cfg.warmup_ratio;
  oc.weight_decay = cfg.weight_decay;
  oc.total_steps = steps_per_epoch * cfg.epochs;
  Optimizer opt(oc);
  opt.add_all(model.parameters());
  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::vector<double> curve;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order);
    for (std::size_t b = 0; b < steps_per_epoch; ++b) {
      opt.zero_grad();
      double batch_loss = 0.0;
      const std::size_t lo = b * cfg.batch_size, hi = std::min(n, lo + cfg.batch_size);
      for (std::size_t i = lo; i < hi; ++i) {
        const EncodedSample& s = data[order[i]];
        std::vector<int> tokens = s.prompt;
        tokens.insert(tokens.end(), s.target.begin(), s.target.end() - 1);
        std::vector<int> targets(tokens.size(), -1);
        for (std::size_t j = s.prompt.size() - 1; j < tokens.size(); ++j) targets[j] = s.target[j + 1 - s.prompt.size()];
        Tape tape;
        Stream st(model, tape);
        Var h = st.extend(st.embed(tokens));
        Var loss = scale(cross_entropy_sum(st.logits(h), targets), 1.0 / static_cast<double>(hi - lo));
        batch_loss += loss.scalar();
        tape.backward(loss);
      }
      curve.push_back(batch_loss);
      if (!std::isfinite(batch_loss)) throw TrainingFailure("non-finite fine-tuning loss", curve);
      opt.step();
    }
  }
  for (Parameter* p : model.parameters()) p->clear_grad();
  return curve;
}

/// Plain-decoding accuracy of a reasoner (no memory) on each test set.
inline std::vector<double> plain_accuracy(Reasoner& model, const std::vector<TestSet>& sets,
                                          const GenerationConfig& gen = {}) {
  std::vector<double> acc;
  for (const TestSet& t : sets) {
    std::size_t ok = 0;
    for (const Sample& s : t.samples) {
      const GenerationResult r = generate(model, model.vocab().encode(s.prompt), nullptr, gen);
      ok += judge(model.vocab().decode(r.tokens), s.answer) ? 1 : 0;
    }
    acc.push_back(percent(ok, t.samples.size()));
  }
  return acc;
}

/// Sequentially fine-tunes a private copy of the reasoner on each task's
/// training data; the given reasoner is never touched.
inline AccuracyMatrix naive_sft_baseline(const Reasoner& base, const std::vector<std::vector<EncodedSample>>& train_sets,
                                         const std::vector<TestSet>& sets, const SftConfig& cfg, Rng& rng,
                                         const GenerationConfig& gen = {}) {
  require(train_sets.size() == sets.size(), "one training set per test set");
  Reasoner model = base.clone();
  AccuracyMatrix a;
  for (const TestSet& t : sets) a.tasks.push_back(t.name);
  a.rows.push_back(plain_accuracy(model, sets, gen));
  for (const auto& data : train_sets) {
    full_finetune(model, data, cfg, rng);
    a.rows.push_back(plain_accuracy(model, sets, gen));
  }
  return a;
}

}  // namespace molem
