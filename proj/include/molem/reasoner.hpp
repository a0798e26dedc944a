#pragma once

// The frozen micro decoder-only transformer: parameters, KV-cached
// incremental forward with an optional active adapter, soft-token
// injection, greedy generation and pretraining.

#include <cmath>
#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "autograd.hpp"
#include "lora.hpp"
#include "optim.hpp"
#include "rng.hpp"
#include "vocab.hpp"

namespace molem {

struct ReasonerConfig {
  std::size_t d_model = 64;
  std::size_t n_layers = 4;
  std::size_t n_heads = 4;
  std::size_t max_len = 256;
  std::size_t d_ff() const { return 4 * d_model; }
};

struct LayerParams {
  Parameter ln1_gain, ln1_bias;
  Parameter wq, wk, wv, wo;
  Parameter ln2_gain, ln2_bias;
  Parameter w_in, w_out;
};

class Reasoner {
 public:
  Reasoner(ReasonerConfig cfg, Vocabulary vocab, Rng& rng) : config_(cfg), vocab_(std::move(vocab)) {
    require(cfg.d_model % cfg.n_heads == 0, "d_model must be divisible by n_heads");
    const std::size_t d = cfg.d_model, V = vocab_.size();
    auto dense = [&rng](const std::string& name, std::size_t r, std::size_t c) {
      Tensor t = Tensor::matrix(r, c);
      for (double& x : t.data) x = rng.truncated_normal(0.02);
      return Parameter(name, std::move(t));
    };
    auto constant = [](const std::string& name, std::size_t n, double v) {
      return Parameter(name, Tensor::matrix(1, n, v));
    };
    tok_emb_ = dense("reasoner/tok_emb", V, d);
    pos_emb_ = dense("reasoner/pos_emb", cfg.max_len, d);
    layers_.resize(cfg.n_layers);
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
      const std::string p = "reasoner/layer" + std::to_string(l) + "/";
      LayerParams& L = layers_[l];
      L.ln1_gain = constant(p + "ln1_gain", d, 1.0);
      L.ln1_bias = constant(p + "ln1_bias", d, 0.0);
      L.wq = dense(p + "q", d, d);
      L.wk = dense(p + "k", d, d);
      L.wv = dense(p + "v", d, d);
      L.wo = dense(p + "o", d, d);
      L.ln2_gain = constant(p + "ln2_gain", d, 1.0);
      L.ln2_bias = constant(p + "ln2_bias", d, 0.0);
      L.w_in = dense(p + "fc1", d, cfg.d_ff());
      L.w_out = dense(p + "fc2", cfg.d_ff(), d);
    }
    lnf_gain_ = constant("reasoner/lnf_gain", d, 1.0);
    lnf_bias_ = constant("reasoner/lnf_bias", d, 0.0);
    head_ = dense("reasoner/head", d, V);
  }

  Reasoner(const Reasoner&) = delete;
  Reasoner& operator=(const Reasoner&) = delete;
  Reasoner(Reasoner&&) = default;
  Reasoner& operator=(Reasoner&&) = default;

  /// Deep copy (used by the full fine-tuning baseline, which must never
  /// touch the frozen original).
  Reasoner clone() const {
    Rng scratch(0);
    Reasoner out(config_, vocab_, scratch);
    auto dst = out.parameters();
    auto src = const_cast<Reasoner*>(this)->parameters();
    for (std::size_t i = 0; i < src.size(); ++i) {
      dst[i]->value = src[i]->value;
      dst[i]->frozen = false;
    }
    return out;
  }

  const ReasonerConfig& config() const { return config_; }
  const Vocabulary& vocab() const { return vocab_; }

  LoraShape lora_shape(std::size_t rank, double alpha) const {
    return {config_.n_layers, config_.d_model, config_.d_ff(), rank, alpha};
  }

  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> out{&tok_emb_, &pos_emb_};
    for (LayerParams& L : layers_) {
      for (Parameter* p : {&L.ln1_gain, &L.ln1_bias, &L.wq, &L.wk, &L.wv, &L.wo, &L.ln2_gain, &L.ln2_bias, &L.w_in,
                           &L.w_out}) {
        out.push_back(p);
      }
    }
    out.push_back(&lnf_gain_);
    out.push_back(&lnf_bias_);
    out.push_back(&head_);
    return out;
  }

  bool frozen() const { return frozen_; }
  /// Marks every parameter frozen; there is no way back.
  void freeze() {
    frozen_ = true;
    for (Parameter* p : parameters()) p->frozen = true;
  }

  Parameter& tok_emb() { return tok_emb_; }
  Parameter& pos_emb() { return pos_emb_; }
  LayerParams& layer(std::size_t l) { return layers_[l]; }
  Parameter& lnf_gain() { return lnf_gain_; }
  Parameter& lnf_bias() { return lnf_bias_; }
  Parameter& head() { return head_; }

 private:
  ReasonerConfig config_;
  Vocabulary vocab_;
  Parameter tok_emb_, pos_emb_;
  std::vector<LayerParams> layers_;
  Parameter lnf_gain_, lnf_bias_, head_;
  bool frozen_ = false;
};

/// Incremental causal forward pass over one sequence on one tape, with at
/// most one adapter active. Input rows are embeddings (token or latent);
/// positional embeddings are added by absolute position, so latent soft
/// tokens consume positions like ordinary tokens. Copying a stream forks
/// the sequence: the copy shares the cached prefix.
class Stream {
 public:
  Stream(Reasoner& model, Tape& tape, LoraAdapter* adapter = nullptr)
      : model_(&model), tape_(&tape), adapter_(adapter), keys_(model.config().n_layers),
        values_(model.config().n_layers) {}

  std::size_t length() const { return length_; }
  Tape& tape() const { return *tape_; }
  Reasoner& model() const { return *model_; }
  Var last_hidden() const { return last_hidden_; }
  Var last_residual() const { return last_residual_; }  // before the final normalization

  Var embed(std::span<const int> tokens) const {
    std::vector<std::size_t> ids(tokens.begin(), tokens.end());
    return gather_rows(tape_->param(model_->tok_emb()), std::move(ids));
  }

  /// Appends `inputs` (n x d_model) and returns their last-layer hidden
  /// states (after the final normalization).
  Var extend(Var inputs) {
    const ReasonerConfig& cfg = model_->config();
    const std::size_t n = inputs.rows();
    require(inputs.cols() == cfg.d_model, "input rows must have width d_model");
    if (length_ + n > cfg.max_len) {
      throw GenerationTruncated("sequence of length " + std::to_string(length_ + n) + " exceeds max_len " +
                                std::to_string(cfg.max_len));
    }
    Tape& t = *tape_;
    std::vector<std::size_t> pos(n);
    for (std::size_t i = 0; i < n; ++i) pos[i] = length_ + i;
    Var x = add(inputs, gather_rows(t.param(model_->pos_emb()), std::move(pos)));
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
      LayerParams& L = model_->layer(l);
      Var h = layer_norm(x, t.param(L.ln1_gain), t.param(L.ln1_bias));
      Var q = project(h, l, Site::Query, L.wq);
      Var k = project(h, l, Site::Key, L.wk);
      Var v = project(h, l, Site::Value, L.wv);
      keys_[l].push_back(k);
      values_[l].push_back(v);
      Var K = concat_rows(keys_[l]);
      Var V = concat_rows(values_[l]);
      keys_[l] = {K};
      values_[l] = {V};
      Var a = causal_attention(q, K, V, cfg.n_heads, length_);
      x = add(x, project(a, l, Site::Output, L.wo));
      Var h2 = layer_norm(x, t.param(L.ln2_gain), t.param(L.ln2_bias));
      Var f = gelu(project(h2, l, Site::MlpIn, L.w_in));
      x = add(x, project(f, l, Site::MlpOut, L.w_out));
    }
    Var out = layer_norm(x, t.param(model_->lnf_gain()), t.param(model_->lnf_bias()));
    length_ += n;
    last_hidden_ = last_row(out);
    last_residual_ = last_row(x);
    return out;
  }

  Var logits(Var hidden) const { return matmul(hidden, tape_->param(model_->head())); }

 private:
  Var project(Var x, std::size_t layer, Site site, Parameter& w) {
    Tape& t = *tape_;
    Var y = matmul(x, t.param(w));
    if (adapter_ == nullptr) return y;
    LoraFactor& f = adapter_->factor(layer, site);
    Var delta = matmul(matmul(x, t.param(f.down)), t.param(f.up));
    return add(y, scale(delta, adapter_->scaling()));
  }

  Reasoner* model_;
  Tape* tape_;
  LoraAdapter* adapter_;
  std::vector<std::vector<Var>> keys_;
  std::vector<std::vector<Var>> values_;
  std::size_t length_ = 0;
  Var last_hidden_{};
  Var last_residual_{};
};

/// Continuous rollout from the current end of `s`: the last hidden state is
/// latent row 0, and each row is fed back as a soft token to produce the
/// next. `s` is taken by value so the caller's stream is left untouched.
inline Var rollout(Stream s, std::size_t m) {
  require(m >= 1, "latent segment length must be positive");
  require(s.length() > 0, "rollout needs a nonempty context");
  std::vector<Var> rows{s.last_hidden()};
  for (std::size_t i = 1; i < m; ++i) {
    s.extend(rows.back());
    rows.push_back(s.last_hidden());
  }
  return concat_rows(rows);
}

struct InvocationPlan {
  std::vector<std::size_t> positions;  // token index each segment is inserted before
};

/// Right after the prompt, then after every delimiter in the target, at most
/// `max_extra` of those. A delimiter that ends the sequence adds nothing.
inline InvocationPlan build_invocation_plan(const Vocabulary& vocab, std::size_t prompt_len,
                                            std::span<const int> target, std::size_t max_extra) {
  InvocationPlan plan;
  plan.positions.push_back(prompt_len);
  const std::size_t total = prompt_len + target.size();
  for (std::size_t i = 0; i < target.size() && plan.positions.size() < 1 + max_extra; ++i) {
    const std::size_t pos = prompt_len + i + 1;
    if (vocab.is_delimiter(target[i]) && pos < total) plan.positions.push_back(pos);
  }
  return plan;
}

/// A latent segment injected before token index `position` of a sequence.
struct Injection {
  std::size_t position = 0;
  Tensor segment;  // m x d_model
};

struct ForwardResult {
  Tensor logits;  // one row per sequence position, latent positions included
  Tensor hidden;  // last-layer hidden trace, same length
};

/// One-shot forward of `tokens` with latent segments spliced in.
inline ForwardResult forward(Reasoner& model, std::span<const int> tokens, const std::vector<Injection>& injected,
                             LoraAdapter* adapter = nullptr) {
  for (std::size_t i = 0; i < injected.size(); ++i) {
    require(injected[i].position <= tokens.size(), "injection position beyond sequence length");
    require(i == 0 || injected[i].position > injected[i - 1].position, "injection positions must strictly increase");
    require(injected[i].segment.cols() == model.config().d_model, "latent segment width must be d_model");
  }
  Tape tape(false);
  Stream s(model, tape, adapter);
  std::vector<Var> parts;
  std::size_t cursor = 0;
  auto flush_tokens = [&](std::size_t upto) {
    if (upto > cursor) parts.push_back(s.embed(tokens.subspan(cursor, upto - cursor)));
    cursor = upto;
  };
  for (const Injection& inj : injected) {
    flush_tokens(inj.position);
    parts.push_back(tape.constant(inj.segment));
  }
  flush_tokens(tokens.size());
  require(!parts.empty(), "forward of an empty sequence");
  Var hidden = s.extend(concat_rows(parts));
  Var logits = s.logits(hidden);
  return {logits.value(), hidden.value()};
}

/// Last-layer hidden state at the final prompt token under the bare reasoner.
inline std::vector<double> prompt_end_feature(Reasoner& model, std::span<const int> prompt) {
  require(!prompt.empty(), "prompt_end_feature of an empty prompt");
  Tape tape(false);
  Stream s(model, tape);
  s.extend(s.embed(prompt));
  return s.last_hidden().value().data;
}

/// Supplies latent memory during decoding. `invoke` receives every main
/// sequence input row added since the previous call and returns the
/// segment to splice in next.
class MemorySource {
 public:
  virtual ~MemorySource() = default;
  virtual void begin(Tape& tape) = 0;
  virtual Var invoke(Var new_rows) = 0;
};

struct GenerationConfig {
  std::size_t max_new_tokens = 64;
  std::size_t max_extra_injections = 5;
};

struct GenerationResult {
  std::vector<int> tokens;  // generated tokens, terminator excluded
  bool truncated = false;   // stopped by a length limit before the terminator
  std::size_t invocations = 0;
};

inline std::size_t argmax(std::span<const double> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i] > v[best]) best = i;
  }
  return best;
}

/// Greedy decoding. Without a memory source the output depends only on the
/// reasoner's parameters. With one, a segment is injected right after the
/// prompt and after each generated delimiter, up to the configured cap.
inline GenerationResult generate(Reasoner& model, std::span<const int> prompt, MemorySource* memory,
                                 const GenerationConfig& cfg) {
  require(!prompt.empty(), "generate requires a nonempty prompt");
  const Vocabulary& vocab = model.vocab();
  Tape tape(false);
  Stream base(model, tape);
  GenerationResult result;
  std::vector<Var> pending;
  if (memory != nullptr) memory->begin(tape);

  auto inject = [&]() {
    Var mem = memory->invoke(concat_rows(pending));
    pending.clear();
    base.extend(mem);
    pending.push_back(mem);
    ++result.invocations;
  };

  try {
    Var first = base.embed(prompt);
    base.extend(first);
    pending.push_back(first);
    if (memory != nullptr) inject();
    std::size_t extra = 0;
    for (std::size_t step = 0; step < cfg.max_new_tokens; ++step) {
      Var logits = base.logits(base.last_hidden());
      const int tok = static_cast<int>(argmax(logits.value().data));
      if (tok == vocab.terminator_id()) return result;
      result.tokens.push_back(tok);
      const int one[1] = {tok};
      Var e = base.embed(one);
      base.extend(e);
      pending.push_back(e);
      if (memory != nullptr && vocab.is_delimiter(tok) && extra < cfg.max_extra_injections) {
        inject();
        ++extra;
      }
    }
  } catch (const GenerationTruncated&) {
    result.truncated = true;
    return result;
  }
  result.truncated = true;
  return result;
}

struct PretrainConfig {
  std::size_t epochs = 3;
  std::size_t batch_size = 16;
  double learning_rate = 1e-3;
  double warmup_ratio = 0.05;
  double weight_decay = 0.01;
  double heldout_loss_threshold = 1.0;  // mean nats per token
  std::size_t eval_every = 100;          // steps between held-out evaluations
  // Latent rehearsal: this fraction of prompt-bearing sequences gets the
  // model's own detached rollouts spliced in at the invocation points, so
  // the frozen reasoner has seen soft-token segments before any stage exists.
  double rehearsal_fraction = 0.5;
  std::size_t latent_len = 4;
  std::size_t max_extra_injections = 5;
};

/// A pretraining line; prompt_len = 0 marks text without a prompt.
struct PretrainSequence {
  std::vector<int> tokens;
  std::size_t prompt_len = 0;
};

struct PretrainLog {
  std::vector<double> step_loss;      // mean per-token loss of each batch
  std::vector<double> heldout_loss;   // mean per-token held-out loss at each evaluation
  std::vector<std::size_t> heldout_step;
};

/// Mean next-token cross-entropy (nats per predicted token).
inline double mean_token_loss(Reasoner& model, const std::vector<std::vector<int>>& seqs) {
  double total = 0.0;
  std::size_t count = 0;
  for (const auto& s : seqs) {
    if (s.size() < 2) continue;
    Tape tape(false);
    Stream st(model, tape);
    Var h = st.extend(st.embed(std::span<const int>(s).first(s.size() - 1)));
    std::vector<int> targets(s.begin() + 1, s.end());
    total += cross_entropy_sum(st.logits(h), targets).scalar();
    count += targets.size();
  }
  return count ? total / static_cast<double>(count) : 0.0;
}

/// Summed next-token loss of `s` with a detached rollout of the model itself
/// inserted before each index in `points`. A shadow stream without gradients
/// mirrors the inputs and produces the segments. Targets follow stage
/// training: the token before a segment predicts nothing, the segment's last
/// row predicts the token after it.
inline Var rehearsal_loss(Reasoner& model, Tape& tape, std::span<const int> s, std::span<const std::size_t> points,
                          std::size_t m) {
  const std::size_t n = s.size();
  Stream main(model, tape);
  Tape shadow_tape(false);
  Stream shadow(model, shadow_tape);
  std::vector<Var> hidden;
  std::vector<int> targets;
  std::size_t cursor = 0;
  auto feed = [&](std::size_t end, std::size_t next_point) {
    if (end <= cursor) return;
    const auto chunk = s.subspan(cursor, end - cursor);
    hidden.push_back(main.extend(main.embed(chunk)));
    shadow.extend(shadow.embed(chunk));
    for (std::size_t i = cursor; i < end; ++i) targets.push_back(i + 1 == next_point ? -1 : s[i + 1]);
    cursor = end;
  };
  for (std::size_t p : points) {
    require(p > 0 && p < n && p >= cursor, "rehearsal points must be ordered and inside the sequence");
    feed(p, p);
    const Tensor mem = rollout(shadow, m).value();
    shadow.extend(shadow_tape.constant(mem));
    hidden.push_back(main.extend(tape.constant(mem)));
    for (std::size_t r = 0; r + 1 < m; ++r) targets.push_back(-1);
    targets.push_back(s[p]);
  }
  feed(n - 1, n);
  return cross_entropy_sum(main.logits(concat_rows(hidden)), targets);
}

/// Next-token pretraining of the reasoner. On success the reasoner is frozen
/// for good.
inline PretrainLog pretrain(Reasoner& model, const std::vector<PretrainSequence>& train,
                            const std::vector<std::vector<int>>& heldout, const PretrainConfig& cfg, Rng& rng,
                            const std::function<void(const PretrainLog&)>& on_eval = {}) {
  require(!model.frozen(), "cannot pretrain a frozen reasoner");
  require(!train.empty(), "empty pretraining corpus");
  const std::size_t steps_per_epoch = (train.size() + cfg.batch_size - 1) / cfg.batch_size;
  OptimizerConfig oc;
  oc.kind = OptimizerKind::AdamW;
  oc.learning_rate = cfg.learning_rate;
  oc.warmup_ratio = cfg.warmup_ratio;
  oc.weight_decay = cfg.weight_decay;
  oc.total_steps = steps_per_epoch * cfg.epochs;
  oc.linear_decay = true;
  Optimizer opt(oc);
  opt.add_all(model.parameters());

  PretrainLog log;
  std::vector<std::size_t> order(train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order);
    for (std::size_t b = 0; b < steps_per_epoch; ++b) {
      opt.zero_grad();
      std::size_t tokens = 0;
      const std::size_t lo = b * cfg.batch_size, hi = std::min(order.size(), lo + cfg.batch_size);
      for (std::size_t i = lo; i < hi; ++i) tokens += train[order[i]].tokens.size() - 1;
      double batch_loss = 0.0;
      for (std::size_t i = lo; i < hi; ++i) {
        const PretrainSequence& seq = train[order[i]];
        const std::vector<int>& s = seq.tokens;
        Tape tape;
        Var sum{};
        if (seq.prompt_len > 0 && rng.bernoulli(cfg.rehearsal_fraction)) {
          const std::span<const int> target = std::span<const int>(s).subspan(seq.prompt_len);
          const InvocationPlan plan =
              build_invocation_plan(model.vocab(), seq.prompt_len, target, cfg.max_extra_injections);
          sum = rehearsal_loss(model, tape, s, plan.positions, cfg.latent_len);
        } else {
          Stream st(model, tape);
          Var h = st.extend(st.embed(std::span<const int>(s).first(s.size() - 1)));
          sum = cross_entropy_sum(st.logits(h), std::vector<int>(s.begin() + 1, s.end()));
        }
        Var loss = scale(sum, 1.0 / static_cast<double>(tokens));
        batch_loss += loss.scalar();
        tape.backward(loss);
      }
      if (!std::isfinite(batch_loss)) throw TrainingFailure("non-finite pretraining loss", log.step_loss);
      opt.step();
      log.step_loss.push_back(batch_loss);
      ++step;
      if (!heldout.empty() && cfg.eval_every > 0 && step % cfg.eval_every == 0) {
        log.heldout_loss.push_back(mean_token_loss(model, heldout));
        log.heldout_step.push_back(step);
        if (on_eval) on_eval(log);
      }
    }
  }
  for (Parameter* p : model.parameters()) p->clear_grad();
  const double final_loss = heldout.empty() ? log.step_loss.back() : mean_token_loss(model, heldout);
  log.heldout_loss.push_back(final_loss);
  log.heldout_step.push_back(step);
  if (!(final_loss < cfg.heldout_loss_threshold)) {
    throw TrainingFailure("pretraining held-out loss " + std::to_string(final_loss) + " did not fall below " +
                              std::to_string(cfg.heldout_loss_threshold),
                          log.heldout_loss);
  }
  model.freeze();
  return log;
}

}  // namespace molem
