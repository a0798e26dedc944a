#pragma once

// Stage groups and their lifecycle: recruiting, consolidation, the registry
// of frozen groups, per-prompt dispatch through the autoencoder gate, and the
// stage-routed memory source used by both training and decoding.

#include <cmath>
#include <cstddef>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <spdlog/spdlog.h>

#include "autoencoder.hpp"
#include "experts.hpp"
#include "lora.hpp"
#include "reasoner.hpp"
#include "rng.hpp"
#include "router.hpp"

namespace molem {

struct StageConfig {
  std::size_t n_experts = 4;
  std::size_t n_select = 2;
  std::size_t rank = 4;
  double lora_alpha = 8.0;
  std::size_t latent_len = 4;
  std::size_t d_key = 32;
  std::size_t max_extra_injections = 5;
  AutoencoderConfig ae;
  GateRule gate_rule = GateRule::AcceptedArgmin;
};

class StageGroup {
 public:
  StageGroup(std::size_t id, std::string label, const Reasoner& model, const StageConfig& cfg, std::uint64_t run_seed)
      : id_(id), label_(std::move(label)) {
    Rng rng = Rng::substream(run_seed, "stage-" + std::to_string(id));
    const std::string p = "stage" + std::to_string(id);
    const LoraShape shape = model.lora_shape(cfg.rank, cfg.lora_alpha);
    const std::size_t d = model.config().d_model;
    router_ = LoraAdapter(p + "/router", shape, rng);
    Tensor proj = Tensor::matrix(d, cfg.d_key);
    for (double& x : proj.data) x = rng.truncated_normal(0.02);
    projection_ = Parameter(p + "/router/proj", std::move(proj));
    Tensor keys = Tensor::matrix(cfg.n_experts, cfg.d_key);
    for (std::size_t k = 0; k < cfg.n_experts; ++k) {
      double n2 = 0.0;
      for (std::size_t j = 0; j < cfg.d_key; ++j) {
        const double z = rng.normal();
        keys.data[k * cfg.d_key + j] = z;
        n2 += z * z;
      }
      const double inv = 1.0 / std::sqrt(n2);
      for (std::size_t j = 0; j < cfg.d_key; ++j) keys.data[k * cfg.d_key + j] *= inv;
    }
    keys_ = Parameter(p + "/keys", std::move(keys));
    for (std::size_t k = 0; k < cfg.n_experts; ++k) {
      experts_.emplace_back(p + "/expert" + std::to_string(k), shape, rng);
    }
    AutoencoderConfig ae = cfg.ae;
    ae.input = d;
    ae_ = Autoencoder(p, ae, rng);
  }

  StageGroup(const StageGroup&) = delete;
  StageGroup& operator=(const StageGroup&) = delete;

  std::size_t id() const { return id_; }
  const std::string& label() const { return label_; }
  LoraAdapter& router() { return router_; }
  Parameter& projection() { return projection_; }
  Parameter& keys() { return keys_; }
  std::vector<LoraAdapter>& experts() { return experts_; }
  LoraAdapter& expert(std::size_t k) { return experts_.at(k); }
  Autoencoder& ae() { return ae_; }
  double threshold() const { return threshold_; }
  bool frozen() const { return frozen_; }

  /// Parameters optimized by stage training (the autoencoder is fit separately).
  std::vector<Parameter*> trainable_parameters() {
    std::vector<Parameter*> out = router_.parameters();
    out.push_back(&projection_);
    out.push_back(&keys_);
    for (LoraAdapter& e : experts_) {
      for (Parameter* p : e.parameters()) out.push_back(p);
    }
    return out;
  }

  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> out = trainable_parameters();
    for (Parameter* p : ae_.parameters()) out.push_back(p);
    return out;
  }

  /// Stores the calibrated threshold and freezes every parameter. A second
  /// call leaves the group untouched.
  void consolidate(double threshold) {
    if (frozen_) {
      spdlog::warn("stage {} is already frozen; consolidate ignored", id_);
      return;
    }
    require(threshold >= 0.0 && std::isfinite(threshold), "threshold must be finite and nonnegative");
    threshold_ = threshold;
    router_.freeze();
    for (LoraAdapter& e : experts_) e.freeze();
    ae_.freeze();
    projection_.frozen = true;
    keys_.frozen = true;
    frozen_ = true;
  }

  /// Restores a persisted threshold and frozen flag (used when loading).
  void restore(double threshold, bool frozen) {
    threshold_ = threshold;
    if (frozen) {
      frozen_ = false;
      consolidate(threshold);
    }
  }

 private:
  std::size_t id_;
  std::string label_;
  LoraAdapter router_;
  Parameter projection_;
  Parameter keys_;
  std::vector<LoraAdapter> experts_;
  Autoencoder ae_;
  double threshold_ = 0.0;
  bool frozen_ = false;
};

struct RoutingDecision {
  std::optional<std::size_t> stage;  // index into the registry; nullopt means OOD
  std::vector<double> errors;
  std::vector<double> thresholds;
  bool ood() const { return !stage.has_value(); }
};

class StageRegistry {
 public:
  std::size_t size() const { return groups_.size(); }
  bool empty() const { return groups_.empty(); }
  StageGroup& at(std::size_t i) { return *groups_.at(i); }
  StageGroup& back() { return *groups_.back(); }

  bool has_unfrozen() const {
    for (const auto& g : groups_) {
      if (!g->frozen()) return true;
    }
    return false;
  }

  /// Appends a fresh group with id = size + 1, seeded from the run seed and
  /// the stage id.
  StageGroup& recruit(const Reasoner& model, const StageConfig& cfg, std::uint64_t run_seed, std::string label) {
    if (has_unfrozen()) throw ContractViolation("cannot recruit while another stage is still trainable");
    groups_.push_back(std::make_unique<StageGroup>(groups_.size() + 1, std::move(label), model, cfg, run_seed));
    return *groups_.back();
  }

  /// Per-prompt stage choice from prompt-end reconstruction errors.
  RoutingDecision dispatch(Reasoner& model, std::span<const int> prompt, GateRule rule = GateRule::AcceptedArgmin) {
    RoutingDecision d;
    if (groups_.empty()) return d;
    const std::vector<double> h = prompt_end_feature(model, prompt);
    return dispatch_feature(h, rule);
  }

  RoutingDecision dispatch_feature(std::span<const double> h, GateRule rule = GateRule::AcceptedArgmin) {
    RoutingDecision d;
    for (auto& g : groups_) {
      d.errors.push_back(recon_error(g->ae(), h));
      d.thresholds.push_back(g->threshold());
    }
    d.stage = gate(d.errors, d.thresholds, rule);
    return d;
  }

 private:
  std::vector<std::unique_ptr<StageGroup>> groups_;
};

/// One MoE invocation at one insertion position.
struct InvocationRecord {
  std::size_t index = 0;     // 0 = after the prompt
  std::size_t position = 0;  // sequence rows preceding the segment
  RoutingWeights weights;
  Var probs;  // full softmax over all expert scores (load-balance statistics)
  Var alpha;  // softmax over the selected scores, in selection order
};

/// Stage-routed memory: per invocation, the router stream reads the new
/// rows, scores the keys, and the selected experts (whose streams catch up
/// lazily) roll out candidate segments that are mixed by the routing weights.
class StageMemory : public MemorySource {
 public:
  StageMemory(Reasoner& model, StageGroup& group, const StageConfig& cfg)
      : model_(&model), group_(&group), cfg_(cfg) {}

  void begin(Tape& tape) override {
    tape_ = &tape;
    router_.emplace(*model_, tape, &group_->router());
    experts_.clear();
    for (LoraAdapter& e : group_->experts()) experts_.emplace_back(*model_, tape, &e);
    consumed_.assign(experts_.size(), 0);
    history_.clear();
    rows_ = 0;
    records_.clear();
  }

  Var invoke(Var new_rows) override {
    Tape& t = *tape_;
    history_.push_back(new_rows);
    rows_ += new_rows.rows();
    router_->extend(new_rows);
    Var q = matmul(router_->last_hidden(), t.param(group_->projection()));
    bool clamped = false;
    cosine_similarities(q.value().data, group_->keys().value, kCosineEps, &clamped);
    if (clamped) note_cosine_clamp();
    Var scores = cosine_scores(q, t.param(group_->keys()), kCosineEps);

    InvocationRecord rec;
    rec.index = records_.size();
    rec.position = rows_;
    rec.weights = select_and_weight(scores.value().data, cfg_.n_select);
    rec.probs = softmax_row(scores);
    rec.alpha = softmax_row(gather_cols(scores, rec.weights.selected));
    Var alpha = rec.alpha;

    Var mixed{};
    for (std::size_t i = 0; i < rec.weights.selected.size(); ++i) {
      const std::size_t k = rec.weights.selected[i];
      catch_up(k);
      Var term = scale_by(rollout(experts_[k], cfg_.latent_len), alpha, i);
      mixed = mixed.valid() ? add(mixed, term) : term;
    }
    records_.push_back(std::move(rec));
    return mixed;
  }

  const std::vector<InvocationRecord>& records() const { return records_; }

 private:
  void catch_up(std::size_t k) {
    if (consumed_[k] == history_.size()) return;
    std::vector<Var> pending(history_.begin() + static_cast<std::ptrdiff_t>(consumed_[k]), history_.end());
    experts_[k].extend(pending.size() == 1 ? pending.front() : concat_rows(pending));
    consumed_[k] = history_.size();
  }

  Reasoner* model_;
  StageGroup* group_;
  StageConfig cfg_;
  Tape* tape_ = nullptr;
  std::optional<Stream> router_;
  std::vector<Stream> experts_;
  std::vector<std::size_t> consumed_;
  std::vector<Var> history_;
  std::size_t rows_ = 0;
  std::vector<InvocationRecord> records_;
};

struct RoutedGeneration {
  RoutingDecision decision;
  GenerationResult result;
  std::vector<InvocationRecord> invocations;  // probs handles are dead after return
};

/// Dispatch once, then decode: OOD prompts use pure pretrained decoding,
/// otherwise the chosen stage supplies memory at every invocation point.
inline RoutedGeneration generate_routed(Reasoner& model, StageRegistry& registry, std::span<const int> prompt,
                                        const StageConfig& cfg, GenerationConfig gen) {
  gen.max_extra_injections = cfg.max_extra_injections;
  RoutedGeneration out;
  out.decision = registry.dispatch(model, prompt, cfg.gate_rule);
  if (out.decision.ood()) {
    out.result = generate(model, prompt, nullptr, gen);
    return out;
  }
  StageMemory memory(model, registry.at(*out.decision.stage), cfg);
  out.result = generate(model, prompt, &memory, gen);
  out.invocations = memory.records();
  return out;
}

}  // namespace molem
