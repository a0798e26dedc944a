#pragma once

// Stage training: delimiter-triggered invocation plans, teacher-forced SFT
// with injected memory, the load-balance term over routing instances, and the
// gradient-partition checks that guard the frozen parameters.

#include <cmath>
#include <cstddef>
#include <fstream>
#include <memory>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "autograd.hpp"
#include "optim.hpp"
#include "reasoner.hpp"
#include "rng.hpp"
#include "stage.hpp"
#include "taskgen.hpp"

namespace molem {

struct EncodedSample {
  std::vector<int> prompt;
  std::vector<int> target;  // ends with the terminator
};

inline std::vector<EncodedSample> encode_samples(const Vocabulary& vocab, const std::vector<Sample>& samples) {
  std::vector<EncodedSample> out;
  out.reserve(samples.size());
  for (const Sample& s : samples) out.push_back({vocab.encode(s.prompt), vocab.encode(s.target)});
  return out;
}

enum class BalanceProbs { AllExperts, SelectedOnly };

struct TrainConfig {
  std::size_t epochs = 3;
  std::size_t batch_size = 16;
  double learning_rate = 3e-4;
  double warmup_ratio = 0.1;
  double weight_decay = 0.01;
  double lambda = 0.01;
  std::size_t max_samples = 0;  // 0 = the whole training split
  BalanceProbs balance_probs = BalanceProbs::AllExperts;
};

struct LoadBalanceStats {
  std::vector<double> f;  // fraction of instances whose top-1 expert is k
  std::vector<double> p;  // mean routing probability of expert k
  std::size_t instances = 0;
};

inline double load_balance_loss(const LoadBalanceStats& s) {
  require(!s.f.empty() && s.f.size() == s.p.size(), "load balance needs a nonempty expert set");
  double acc = 0.0;
  for (std::size_t k = 0; k < s.f.size(); ++k) acc += s.f[k] * s.p[k];
  return static_cast<double>(s.f.size()) * acc;
}

/// Teacher-forced pass of one sample with memory from `group`, on its own tape.
struct SampleForward {
  std::unique_ptr<Tape> tape;
  Var nll;  // summed over target tokens
  std::vector<InvocationRecord> records;
  std::size_t target_tokens = 0;
};

inline SampleForward forward_sample(Reasoner& model, StageGroup& group, const StageConfig& cfg,
                                    const EncodedSample& sample, bool grad) {
  require(!sample.prompt.empty() && !sample.target.empty(), "sample needs a prompt and a target");
  SampleForward out;
  out.tape = std::make_unique<Tape>(grad);
  Tape& t = *out.tape;
  std::vector<int> tokens = sample.prompt;
  tokens.insert(tokens.end(), sample.target.begin(), sample.target.end());
  const std::size_t n = tokens.size(), p0 = sample.prompt.size();
  const InvocationPlan plan = build_invocation_plan(model.vocab(), p0, sample.target, cfg.max_extra_injections);

  Stream main(model, t);
  StageMemory memory(model, group, cfg);
  memory.begin(t);
  std::vector<Var> hidden;
  std::vector<int> targets;
  std::vector<Var> pending;
  std::size_t cursor = 0;
  auto feed_tokens = [&](std::size_t end, std::size_t next_latent) {
    if (end <= cursor) return;
    Var e = main.embed(std::span<const int>(tokens).subspan(cursor, end - cursor));
    hidden.push_back(main.extend(e));
    pending.push_back(e);
    for (std::size_t i = cursor; i < end; ++i) {
      const std::size_t nxt = i + 1;
      targets.push_back(nxt >= p0 && nxt < n && nxt != next_latent ? tokens[nxt] : -1);
    }
    cursor = end;
  };
  for (std::size_t pos : plan.positions) {
    feed_tokens(pos, pos);
    Var mem = memory.invoke(pending.size() == 1 ? pending.front() : concat_rows(pending));
    pending.assign(1, mem);
    hidden.push_back(main.extend(mem));
    for (std::size_t r = 0; r + 1 < mem.rows(); ++r) targets.push_back(-1);
    targets.push_back(tokens[pos]);
  }
  feed_tokens(n - 1, n);
  out.nll = cross_entropy_sum(main.logits(concat_rows(hidden)), targets);
  out.records = memory.records();
  out.target_tokens = sample.target.size();
  return out;
}

/// Statistics of invocation index j over the batch.
inline LoadBalanceStats invocation_stats(const std::vector<SampleForward>& batch, std::size_t j, std::size_t n_experts,
                                         BalanceProbs which = BalanceProbs::AllExperts) {
  LoadBalanceStats s;
  s.f.assign(n_experts, 0.0);
  s.p.assign(n_experts, 0.0);
  for (const SampleForward& f : batch) {
    if (j >= f.records.size()) continue;
    const InvocationRecord& r = f.records[j];
    s.f[r.weights.selected.front()] += 1.0;
    if (which == BalanceProbs::AllExperts) {
      const Tensor& pv = r.probs.value();
      for (std::size_t k = 0; k < n_experts; ++k) s.p[k] += pv.data[k];
    } else {
      for (std::size_t k = 0; k < n_experts; ++k) s.p[k] += r.weights.alpha[k];
    }
    ++s.instances;
  }
  if (s.instances > 0) {
    for (std::size_t k = 0; k < n_experts; ++k) {
      s.f[k] /= static_cast<double>(s.instances);
      s.p[k] /= static_cast<double>(s.instances);
    }
  }
  return s;
}

/// Every parameter in `guarded` must be gradient-free.
inline void assert_no_gradient(std::span<Parameter* const> guarded, const std::string& what) {
  for (const Parameter* p : guarded) {
    if (p->grad_norm_sq() != 0.0) {
      throw InvariantViolation("gradient reached " + what + " parameter '" + p->name + "'");
    }
  }
}

struct StageStepLog {
  std::size_t step = 0;
  double l_sft = 0.0;
  double l_lb = 0.0;
  double loss = 0.0;
  double lr = 0.0;
  std::vector<double> f;  // top-1 fractions over every routing instance in the batch
  std::size_t instances = 0;
};

struct StageTrainLog {
  std::vector<StageStepLog> steps;

  std::string csv() const {
    std::ostringstream out;
    out.precision(17);
    out << "step,l_sft,l_lb,loss,lr";
    const std::size_t k = steps.empty() ? 0 : steps.front().f.size();
    for (std::size_t i = 0; i < k; ++i) out << ",f_" << i;
    out << '\n';
    for (const StageStepLog& s : steps) {
      out << s.step << ',' << s.l_sft << ',' << s.l_lb << ',' << s.loss << ',' << s.lr;
      for (double v : s.f) out << ',' << v;
      out << '\n';
    }
    return out.str();
  }
};

struct BatchResult {
  double l_sft = 0.0;
  double l_lb = 0.0;
  std::vector<double> f;
  std::size_t instances = 0;
  std::size_t invocations = 0;  // distinct invocation indices in the batch
};

/// Forward every sample, couple them through the load-balance statistics,
/// then backpropagate L = L_SFT + lambda * L_LB into the parameters.
/// L_SFT is the batch mean of per-sample summed target NLL; L_LB is the mean
/// over invocation indices of the per-invocation balance loss.
inline BatchResult accumulate_batch_gradients(Reasoner& model, StageGroup& group, const StageConfig& cfg,
                                              std::span<const EncodedSample> batch, double lambda,
                                              BalanceProbs which = BalanceProbs::AllExperts) {
  require(!batch.empty(), "empty batch");
  std::vector<SampleForward> fw;
  fw.reserve(batch.size());
  std::size_t J = 0;
  for (const EncodedSample& s : batch) {
    fw.push_back(forward_sample(model, group, cfg, s, true));
    J = std::max(J, fw.back().records.size());
  }
  const std::size_t K = cfg.n_experts;
  const double S = static_cast<double>(batch.size());
  BatchResult res;
  res.invocations = J;
  res.f.assign(K, 0.0);
  std::vector<Var> extra(fw.size());
  for (std::size_t j = 0; j < J; ++j) {
    const LoadBalanceStats st = invocation_stats(fw, j, K, which);
    res.l_lb += load_balance_loss(st) / static_cast<double>(J);
    res.instances += st.instances;
    for (std::size_t k = 0; k < K; ++k) res.f[k] += st.f[k] * static_cast<double>(st.instances);
    std::vector<double> coef(K);
    for (std::size_t k = 0; k < K; ++k) {
      coef[k] = lambda * static_cast<double>(K) * st.f[k] / (static_cast<double>(st.instances) * static_cast<double>(J));
    }
    for (std::size_t s = 0; s < fw.size(); ++s) {
      if (j >= fw[s].records.size()) continue;
      const InvocationRecord& r = fw[s].records[j];
      Var term{};
      if (which == BalanceProbs::AllExperts) {
        term = dot_const(r.probs, coef);
      } else {
        std::vector<double> c;
        for (std::size_t k : r.weights.selected) c.push_back(coef[k]);
        term = dot_const(r.alpha, c);
      }
      extra[s] = extra[s].valid() ? add(extra[s], term) : term;
    }
  }
  for (double& v : res.f) v /= static_cast<double>(std::max<std::size_t>(res.instances, 1));
  for (std::size_t s = 0; s < fw.size(); ++s) {
    Var loss = scale(fw[s].nll, 1.0 / S);
    res.l_sft += loss.scalar();
    if (extra[s].valid()) loss = add(loss, extra[s]);
    fw[s].tape->backward(loss);
  }
  return res;
}

/// Trains the registry's single unfrozen group on `data`. Throws
/// InvariantViolation if any gradient reaches the reasoner or a frozen stage,
/// and TrainingFailure on a non-finite loss.
inline StageTrainLog train_stage(Reasoner& model, StageRegistry& registry, const StageConfig& cfg,
                                 const TrainConfig& tc, const std::vector<EncodedSample>& data, Rng& rng) {
  require(model.frozen(), "the reasoner must be frozen before stage training");
  require(!registry.empty() && !registry.back().frozen(), "no trainable stage to train");
  StageGroup& group = registry.back();
  std::vector<Parameter*> guarded = model.parameters();
  for (std::size_t i = 0; i + 1 < registry.size(); ++i) {
    require(registry.at(i).frozen(), "every earlier stage must be frozen");
    for (Parameter* p : registry.at(i).parameters()) guarded.push_back(p);
  }
  for (Parameter* p : group.ae().parameters()) guarded.push_back(p);

  const std::size_t n = tc.max_samples == 0 ? data.size() : std::min(tc.max_samples, data.size());
  require(n > 0, "empty training set");
  const std::size_t steps_per_epoch = (n + tc.batch_size - 1) / tc.batch_size;
  OptimizerConfig oc;
  oc.kind = OptimizerKind::AdamW;
  oc.learning_rate = tc.learning_rate;
  oc.warmup_ratio = tc.warmup_ratio;
  oc.weight_decay = tc.weight_decay;
  oc.total_steps = steps_per_epoch * tc.epochs;
  Optimizer opt(oc);
  opt.add_all(group.trainable_parameters());

  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  StageTrainLog log;
  std::vector<double> curve;
  std::vector<EncodedSample> batch;
  for (std::size_t epoch = 0; epoch < tc.epochs; ++epoch) {
    rng.shuffle(order);
    for (std::size_t b = 0; b < steps_per_epoch; ++b) {
      batch.clear();
      for (std::size_t i = b * tc.batch_size; i < std::min(n, (b + 1) * tc.batch_size); ++i) {
        batch.push_back(data[order[i]]);
      }
      opt.zero_grad();
      const BatchResult r = accumulate_batch_gradients(model, group, cfg, batch, tc.lambda, tc.balance_probs);
      assert_no_gradient(guarded, "frozen");
      StageStepLog s;
      s.step = opt.step_count();
      s.lr = opt.current_lr();
      s.l_sft = r.l_sft;
      s.l_lb = r.l_lb;
      s.loss = r.l_sft + tc.lambda * r.l_lb;
      s.f = r.f;
      s.instances = r.instances;
      curve.push_back(s.loss);
      if (!std::isfinite(s.loss)) {
        throw TrainingFailure("non-finite loss at step " + std::to_string(s.step) + " of stage " +
                                  std::to_string(group.id()) + "\n" + log.csv(),
                              curve);
      }
      for (Parameter* p : group.trainable_parameters()) {
        if (!all_finite(p->grad.data)) {
          throw TrainingFailure("non-finite gradient in '" + p->name + "' at step " + std::to_string(s.step), curve);
        }
      }
      opt.step();
      log.steps.push_back(std::move(s));
    }
  }
  for (Parameter* p : group.trainable_parameters()) p->clear_grad();
  return log;
}

/// Mean per-sample summed target NLL under stage memory (no gradients).
inline double stage_sft_loss(Reasoner& model, StageGroup& group, const StageConfig& cfg,
                             std::span<const EncodedSample> samples) {
  double total = 0.0;
  for (const EncodedSample& s : samples) total += forward_sample(model, group, cfg, s, false).nll.scalar();
  return total / static_cast<double>(samples.size());
}

/// Same loss under the bare reasoner with no memory at all.
inline double plain_sft_loss(Reasoner& model, std::span<const EncodedSample> samples) {
  double total = 0.0;
  for (const EncodedSample& s : samples) {
    std::vector<int> tokens = s.prompt;
    tokens.insert(tokens.end(), s.target.begin(), s.target.end() - 1);
    Tape t(false);
    Stream st(model, t);
    Var h = st.extend(st.embed(tokens));
    std::vector<int> targets(tokens.size(), -1);
    for (std::size_t i = s.prompt.size() - 1; i < tokens.size(); ++i) targets[i] = s.target[i + 1 - s.prompt.size()];
    total += cross_entropy_sum(st.logits(h), targets).scalar();
  }
  return total / static_cast<double>(samples.size());
}

}  // namespace molem
