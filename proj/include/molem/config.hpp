#pragma once

// Run configuration as a flat "key = value" text file. Every field has a
// fixed type; unknown keys and malformed values are rejected. Two presets:
// "desk" (the defaults) and "paper" (the published adapter and learning-rate
// values).

#include <charconv>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "autoencoder.hpp"
#include "evaluator.hpp"
#include "reasoner.hpp"
#include "stage.hpp"
#include "taskgen.hpp"
#include "trainer.hpp"

namespace molem {

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RunConfig {
  std::string preset = "desk";
  std::uint64_t seed = 20240601;

  ReasonerConfig reasoner;
  PretrainConfig pretrain{.epochs = 4, .batch_size = 16, .learning_rate = 3e-3, .warmup_ratio = 0.05,
                          .weight_decay = 0.01, .heldout_loss_threshold = 1.0, .eval_every = 0};
  CorpusConfig corpus{.per_domain = 5000, .canonical_fraction = 0.35, .filler = 1000};
  std::size_t heldout_lines = 300;

  StageConfig stage;
  // Desk budget: each stage sees 800 samples. The baseline gets the same
  // samples and learning rate as the stages.
  TrainConfig train{.learning_rate = 3e-3, .max_samples = 800};
  SftConfig baseline{.learning_rate = 3e-3, .max_samples = 800};

  std::vector<Domain> task_order{Domain::Arith, Domain::SortSym, Domain::StackEval};
  SplitSizes splits;
  std::size_t max_new_tokens = 64;

  static RunConfig desk() { return RunConfig{}; }

  static RunConfig paper() {
    RunConfig c;
    c.preset = "paper";
    c.stage.rank = 16;
    c.stage.lora_alpha = 32.0;
    c.stage.latent_len = 8;
    c.train.learning_rate = 1e-5;
    c.baseline.learning_rate = 1e-5;
    return c;
  }

  static RunConfig from_preset(const std::string& name) {
    if (name == "desk") return desk();
    if (name == "paper") return paper();
    throw UsageError("unknown preset '" + name + "' (expected desk or paper)");
  }

  GenerationConfig generation() const {
    GenerationConfig g;
    g.max_new_tokens = max_new_tokens;
    g.max_extra_injections = stage.max_extra_injections;
    return g;
  }
};

namespace detail {

struct Field {
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

template <class T>
T parse_value(const std::string& key, const std::string& text) {
  if constexpr (std::is_unsigned_v<T>) {
    if (text.find('-') != std::string::npos) throw UsageError("'" + key + "' must be nonnegative");
  }
  std::istringstream in(text);
  T v{};
  in >> v;
  if (!in || !(in >> std::ws).eof()) throw UsageError("bad value for '" + key + "': '" + text + "'");
  return v;
}

template <class T>
std::string show(const T& v) {
  if constexpr (std::is_floating_point_v<T>) {
    char buf[32];
    return std::string(buf, std::to_chars(buf, buf + sizeof buf, v).ptr);  // shortest round-trip form
  } else {
    std::ostringstream out;
    out << v;
    return out.str();
  }
}

#define MOLEM_FIELD(KEY, EXPR)                                                                    \
  {                                                                                               \
    KEY, Field {                                                                                  \
      [](const RunConfig& c) { return show(c.EXPR); },                                            \
          [](RunConfig& c, const std::string& v) { c.EXPR = parse_value<decltype(c.EXPR)>(KEY, v); } \
    }                                                                                             \
  }

inline std::string order_string(const std::vector<Domain>& order) {
  std::string s;
  for (std::size_t i = 0; i < order.size(); ++i) s += (i ? "," : "") + domain_name(order[i]);
  return s;
}

inline std::vector<Domain> parse_order(const std::string& text) {
  std::vector<Domain> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      out.push_back(parse_domain(item));
    } catch (const std::exception&) {
      throw UsageError("unknown domain '" + item + "' in task_order");
    }
  }
  if (out.empty()) throw UsageError("task_order is empty");
  return out;
}

inline const std::vector<std::pair<std::string, Field>>& fields() {
  static const std::vector<std::pair<std::string, Field>> table = {
      {"preset", {[](const RunConfig& c) { return c.preset; },
                  [](RunConfig& c, const std::string& v) {
                    if (v != "desk" && v != "paper") throw UsageError("preset must be desk or paper");
                    c.preset = v;
                  }}},
      MOLEM_FIELD("seed", seed),
      MOLEM_FIELD("reasoner.d_model", reasoner.d_model),
      MOLEM_FIELD("reasoner.n_layers", reasoner.n_layers),
      MOLEM_FIELD("reasoner.n_heads", reasoner.n_heads),
      MOLEM_FIELD("reasoner.max_len", reasoner.max_len),
      MOLEM_FIELD("pretrain.epochs", pretrain.epochs),
      MOLEM_FIELD("pretrain.batch_size", pretrain.batch_size),
      MOLEM_FIELD("pretrain.lr", pretrain.learning_rate),
      MOLEM_FIELD("pretrain.warmup", pretrain.warmup_ratio),
      MOLEM_FIELD("pretrain.weight_decay", pretrain.weight_decay),
      MOLEM_FIELD("pretrain.heldout_loss_threshold", pretrain.heldout_loss_threshold),
      MOLEM_FIELD("pretrain.heldout_lines", heldout_lines),
      MOLEM_FIELD("pretrain.rehearsal_fraction", pretrain.rehearsal_fraction),
      MOLEM_FIELD("corpus.per_domain", corpus.per_domain),
      MOLEM_FIELD("corpus.canonical_fraction", corpus.canonical_fraction),
      MOLEM_FIELD("corpus.filler", corpus.filler),
      MOLEM_FIELD("stage.n_experts", stage.n_experts),
      MOLEM_FIELD("stage.n_select", stage.n_select),
      MOLEM_FIELD("stage.rank", stage.rank),
      MOLEM_FIELD("stage.lora_alpha", stage.lora_alpha),
      MOLEM_FIELD("stage.latent_len", stage.latent_len),
      MOLEM_FIELD("stage.d_key", stage.d_key),
      MOLEM_FIELD("stage.max_extra_injections", stage.max_extra_injections),
      {"stage.gate_rule", {[](const RunConfig& c) {
                             return std::string(c.stage.gate_rule == GateRule::AcceptedArgmin ? "accepted-argmin"
                                                                                               : "global-argmin");
                           },
                           [](RunConfig& c, const std::string& v) {
                             if (v == "accepted-argmin") c.stage.gate_rule = GateRule::AcceptedArgmin;
                             else if (v == "global-argmin") c.stage.gate_rule = GateRule::GlobalArgmin;
                             else throw UsageError("stage.gate_rule must be accepted-argmin or global-argmin");
                           }}},
      MOLEM_FIELD("train.epochs", train.epochs),
      MOLEM_FIELD("train.batch_size", train.batch_size),
      MOLEM_FIELD("train.lr", train.learning_rate),
      MOLEM_FIELD("train.warmup", train.warmup_ratio),
      MOLEM_FIELD("train.weight_decay", train.weight_decay),
      MOLEM_FIELD("train.lambda", train.lambda),
      MOLEM_FIELD("train.max_samples", train.max_samples),
      {"train.balance_probs", {[](const RunConfig& c) {
                                 return std::string(c.train.balance_probs == BalanceProbs::AllExperts ? "all"
                                                                                                      : "selected");
                               },
                               [](RunConfig& c, const std::string& v) {
                                 if (v == "all") c.train.balance_probs = BalanceProbs::AllExperts;
                                 else if (v == "selected") c.train.balance_probs = BalanceProbs::SelectedOnly;
                                 else throw UsageError("train.balance_probs must be all or selected");
                               }}},
      MOLEM_FIELD("ae.h1", stage.ae.hidden1),
      MOLEM_FIELD("ae.h2", stage.ae.hidden2),
      MOLEM_FIELD("ae.epochs", stage.ae.epochs),
      MOLEM_FIELD("ae.batch_size", stage.ae.batch_size),
      MOLEM_FIELD("ae.lr", stage.ae.learning_rate),
      MOLEM_FIELD("ae.percentile", stage.ae.percentile),
      MOLEM_FIELD("baseline.epochs", baseline.epochs),
      MOLEM_FIELD("baseline.batch_size", baseline.batch_size),
      MOLEM_FIELD("baseline.lr", baseline.learning_rate),
      MOLEM_FIELD("baseline.warmup", baseline.warmup_ratio),
      MOLEM_FIELD("baseline.weight_decay", baseline.weight_decay),
      MOLEM_FIELD("baseline.max_samples", baseline.max_samples),
      {"task_order", {[](const RunConfig& c) { return order_string(c.task_order); },
                      [](RunConfig& c, const std::string& v) { c.task_order = parse_order(v); }}},
      MOLEM_FIELD("splits.train", splits.train),
      MOLEM_FIELD("splits.val", splits.val),
      MOLEM_FIELD("splits.test", splits.test),
      MOLEM_FIELD("generation.max_new_tokens", max_new_tokens),
  };
  return table;
}

#undef MOLEM_FIELD

}  // namespace detail

/// Canonical text form: every key, in a fixed order.
inline std::string serialize_config(const RunConfig& c) {
  std::string out;
  for (const auto& [key, f] : detail::fields()) out += key + " = " + f.get(c) + '\n';
  return out;
}

inline void apply_setting(RunConfig& c, const std::string& key, const std::string& value) {
  for (const auto& [k, f] : detail::fields()) {
    if (k == key) {
      f.set(c, value);
      return;
    }
  }
  throw UsageError("unknown config key '" + key + "'");
}

/// Starts from the preset named in the text (or "desk") and applies every
/// other line on top.
inline RunConfig parse_config(const std::string& text) {
  std::vector<std::pair<std::string, std::string>> kv;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  auto trim = [](std::string s) {
    const auto a = s.find_first_not_of(" \t\r"), b = s.find_last_not_of(" \t\r");
    return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw UsageError("config line " + std::to_string(lineno) + " has no '='");
    kv.emplace_back(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  std::string preset = "desk";
  for (const auto& [k, v] : kv) {
    if (k == "preset") preset = v;
  }
  RunConfig c = RunConfig::from_preset(preset);
  for (const auto& [k, v] : kv) apply_setting(c, k, v);
  return c;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot read config '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

}  // namespace molem
