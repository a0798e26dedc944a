#include "catch_amalgamated.hpp"

#include <cmath>

#include "fd_check.hpp"
#include "molem/trainer.hpp"
#include "tiny_model.hpp"

using namespace molem;
using namespace molem::testing;

namespace {

std::vector<EncodedSample> samples_of(const Vocabulary& v, Domain d, std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  SplitSizes sz{n, 0, 0};
  return encode_samples(v, generate_splits(d, sz, rng).train);
}

std::vector<Tensor> snapshot(const std::vector<Parameter*>& ps) {
  std::vector<Tensor> out;
  for (const Parameter* p : ps) out.push_back(p->value);
  return out;
}

bool unchanged(const std::vector<Parameter*>& ps, const std::vector<Tensor>& before) {
  for (std::size_t i = 0; i < ps.size(); ++i) {
    if (!bitwise_equal(ps[i]->value, before[i])) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("load-balance identities") {
  LoadBalanceStats s;
  s.f = {0.25, 0.25, 0.25, 0.25};
  s.p = s.f;
  CHECK(load_balance_loss(s) == 1.0);
  s.f = {1.0, 0.0, 0.0, 0.0};
  s.p = s.f;
  CHECK(load_balance_loss(s) == 4.0);
  s.f = {0.5, 0.5, 0.0, 0.0};
  s.p = {0.4, 0.4, 0.1, 0.1};
  CHECK(load_balance_loss(s) == Catch::Approx(1.6).epsilon(1e-15));
}

TEST_CASE("batch statistics count one instance per sample per invocation") {
  Reasoner m = tiny_reasoner();
  StageRegistry reg;
  const StageConfig cfg = tiny_stage_config();
  StageGroup& g = reg.recruit(m, cfg, 1, "arith");
  // Two-operator arith targets carry exactly two commas-or-periods before the
  // answer, so every sample has the same number of invocations.
  std::vector<EncodedSample> batch;
  for (const EncodedSample& s : samples_of(m.vocab(), Domain::Arith, 40, 3)) {
    if (s.prompt.size() == 6) batch.push_back(s);
    if (batch.size() == 5) break;
  }
  REQUIRE(batch.size() == 5);
  const BatchResult r = accumulate_batch_gradients(m, g, cfg, batch, 0.01);
  const std::size_t J = build_invocation_plan(m.vocab(), 6, batch[0].target, cfg.max_extra_injections).positions.size();
  CHECK(r.invocations == J);
  CHECK(r.instances == batch.size() * J);
  double fsum = 0.0;
  for (double f : r.f) fsum += f;
  CHECK(fsum == Catch::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("stage gradients match central differences; reasoner gets none") {
  Reasoner m = tiny_reasoner();
  const StageConfig cfg = tiny_stage_config();
  std::vector<EncodedSample> batch = samples_of(m.vocab(), Domain::SortSym, 2, 4);
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    StageRegistry reg;
    StageGroup& g = reg.recruit(m, cfg, seed, "sortsym");
    for (LoraAdapter& e : g.experts()) perturb(e, seed * 100 + e.name().size(), 0.05);
    perturb(g.router(), seed * 7, 0.05);
    // Check a random subset of coordinates of every trainable tensor.
    Rng pick(seed);
    std::vector<Parameter*> params = g.trainable_parameters();
    auto value = [&] {
      for (Parameter* p : params) p->zero_grad();
      const BatchResult r = accumulate_batch_gradients(m, g, cfg, batch, 0.05);
      return r.l_sft + 0.05 * r.l_lb;
    };
    value();
    for (Parameter* p : m.parameters()) CHECK(p->grad_norm_sq() == 0.0);
    std::vector<Tensor> grads;
    for (Parameter* p : params) grads.push_back(p->grad);
    double worst = 0.0;
    for (std::size_t i = 0; i < params.size(); ++i) {
      Parameter& p = *params[i];
      for (int c = 0; c < 2; ++c) {
        const std::size_t j = pick.index(p.value.size());
        const double x0 = p.value.data[j], h = 1e-5;
        p.value.data[j] = x0 + h;
        const double up = value();
        p.value.data[j] = x0 - h;
        const double dn = value();
        p.value.data[j] = x0;
        worst = std::max(worst, fd_rel_err(grads[i].data[j], (up - dn) / (2 * h)));
      }
    }
    INFO("seed " << seed);
    CHECK(worst < 1e-4);
  }
}

TEST_CASE("zero-delta stage loss versus the bare reasoner's loss") {
  Reasoner m = tiny_reasoner();
  const StageConfig cfg = tiny_stage_config();
  StageRegistry reg;
  StageGroup& g = reg.recruit(m, cfg, 5, "arith");
  const auto data = samples_of(m.vocab(), Domain::Arith, 16, 6);
  const double with_mem = stage_sft_loss(m, g, cfg, data);
  const double plain = plain_sft_loss(m, data);
  // The identity-rollout injections change the context, so the two differ;
  // both must be finite and of the same order.
  CHECK(std::isfinite(with_mem));
  CHECK(std::isfinite(plain));
  CHECK(with_mem > 0.0);
  CHECK(plain > 0.0);
  WARN("zero-delta stage loss " << with_mem << " vs bare " << plain);
}

TEST_CASE("stage training overfits a fixed batch and leaves frozen state untouched") {
  Reasoner m = tiny_reasoner();
  StageConfig cfg = tiny_stage_config();
  StageRegistry reg;
  StageGroup& first = reg.recruit(m, cfg, 9, "sortsym");
  first.consolidate(1.0);
  StageGroup& g = reg.recruit(m, cfg, 9, "arith");
  const auto data = samples_of(m.vocab(), Domain::Arith, 32, 7);
  const auto theta = snapshot(m.parameters());
  const auto frozen = snapshot(first.parameters());
  const auto ae = snapshot(g.ae().parameters());

  TrainConfig tc;
  tc.epochs = 100;
  tc.batch_size = 32;
  tc.learning_rate = 1e-2;
  tc.warmup_ratio = 0.0;
  Rng rng(1);
  const StageTrainLog log = train_stage(m, reg, cfg, tc, data, rng);
  REQUIRE(log.steps.size() == 100);
  CHECK(log.steps.back().l_sft < 0.9 * log.steps.front().l_sft);
  CHECK(unchanged(m.parameters(), theta));
  CHECK(unchanged(first.parameters(), frozen));
  CHECK(unchanged(g.ae().parameters(), ae));
  for (Parameter* p : m.parameters()) CHECK_FALSE(p->has_grad());
  for (Parameter* p : first.parameters()) CHECK(p->grad_norm_sq() == 0.0);
}

TEST_CASE("training needs a frozen reasoner and a trainable stage") {
  Reasoner open = tiny_reasoner(1, false);
  StageConfig cfg = tiny_stage_config();
  StageRegistry reg;
  reg.recruit(open, cfg, 1, "x");
  Rng rng(1);
  const auto data = samples_of(open.vocab(), Domain::Arith, 4, 1);
  CHECK_THROWS_AS(train_stage(open, reg, cfg, TrainConfig{}, data, rng), ContractViolation);

  Reasoner m = tiny_reasoner();
  StageRegistry done;
  done.recruit(m, cfg, 1, "x").consolidate(1.0);
  CHECK_THROWS_AS(train_stage(m, done, cfg, TrainConfig{}, data, rng), ContractViolation);
}

TEST_CASE("the balance term changes what is learned") {
  Reasoner m = tiny_reasoner();
  const StageConfig cfg = tiny_stage_config();
  const auto data = samples_of(m.vocab(), Domain::StackEval, 16, 8);
  auto final_keys = [&](double lambda) {
    StageRegistry reg;
    reg.recruit(m, cfg, 3, "stackeval");
    TrainConfig tc;
    tc.epochs = 3;
    tc.batch_size = 8;
    tc.learning_rate = 1e-2;
    tc.lambda = lambda;
    Rng rng(2);
    train_stage(m, reg, cfg, tc, data, rng);
    return reg.back().keys().value;
  };
  CHECK_FALSE(bitwise_equal(final_keys(0.0), final_keys(1.0)));
}
