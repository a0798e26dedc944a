#include "catch_amalgamated.hpp"

#include <algorithm>

#include "molem/autoencoder.hpp"

using namespace molem;

namespace {

// Points near a random 3-dimensional subspace of R^12, offset by `shift`.
std::vector<std::vector<double>> cluster(std::size_t n, std::uint64_t basis_seed, double shift, Rng& rng) {
  Rng b(basis_seed);
  std::vector<std::vector<double>> basis(3, std::vector<double>(12));
  for (auto& v : basis) {
    for (double& x : v) x = b.normal();
  }
  std::vector<std::vector<double>> out;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> h(12, shift);
    for (const auto& v : basis) {
      const double z = rng.normal();
      for (std::size_t j = 0; j < 12; ++j) h[j] += z * v[j];
    }
    for (double& x : h) x += 0.05 * rng.normal();
    out.push_back(std::move(h));
  }
  return out;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v[v.size() / 2];
}

}  // namespace

TEST_CASE("squared reconstruction error") {
  const std::vector<double> h{1.0, 2.0, 2.0};
  CHECK(squared_error(h, h) == 0.0);
  CHECK(squared_error(std::vector<double>{0.0, 0.0, 0.0}, h) == 9.0);
  CHECK(squared_error(std::vector<double>{1.0, 2.0, 0.0}, h) == 4.0);
}

TEST_CASE("autoencoder training and separation") {
  AutoencoderConfig cfg;
  cfg.input = 12;
  cfg.hidden1 = 8;
  cfg.hidden2 = 4;
  cfg.epochs = 40;
  cfg.learning_rate = 3e-3;
  Rng rng(1);
  Autoencoder ae("s1", cfg, rng);
  CHECK(ae.input_dim() == 12);
  CHECK(ae.output_dim() == 12);
  CHECK(ae.reconstruct(std::vector<double>(12, 1.0)).size() == 12);

  Rng data(2);
  const auto train = cluster(400, 11, 0.5, data);
  const auto val = cluster(100, 11, 0.5, data);
  const auto other = cluster(100, 23, -0.5, data);
  Rng order(3);
  const AeTrainLog log = train_ae(ae, train, cfg, order);
  REQUIRE(log.epoch_loss.size() == 40);
  CHECK(log.epoch_loss.back() < log.epoch_loss.front());
  for (std::size_t e = 10; e < 40; e += 10) CHECK(log.epoch_loss[e] < log.epoch_loss[e - 10]);

  std::vector<double> in_err, out_err;
  for (const auto& h : val) in_err.push_back(recon_error(ae, h));
  for (const auto& h : other) out_err.push_back(recon_error(ae, h));
  CHECK(median(in_err) < median(out_err));

  const double delta = calibrate_threshold(ae, val, 0.95);
  CHECK(delta == nearest_rank(in_err, 0.95));
  std::size_t accepted = 0;
  for (double e : in_err) accepted += e <= delta;
  CHECK(accepted == 95);
}

TEST_CASE("nearest-rank percentile") {
  SECTION("100 distinct errors") {
    std::vector<double> e;
    for (int i = 100; i >= 1; --i) e.push_back(0.01 * i);
    const double d = nearest_rank(e, 0.95);
    CHECK(d == 0.01 * 95);
    CHECK(std::count_if(e.begin(), e.end(), [&](double x) { return x <= d; }) == 95);
  }
  SECTION("all equal") {
    const std::vector<double> e(30, 0.7);
    const double d = nearest_rank(e, 0.95);
    CHECK(d == 0.7);
    CHECK(std::count_if(e.begin(), e.end(), [&](double x) { return x <= d; }) == 30);
  }
  SECTION("1..20") {
    std::vector<double> e;
    for (int i = 1; i <= 20; ++i) e.push_back(i);
    CHECK(nearest_rank(e, 0.95) == 19.0);
  }
}

TEST_CASE("gate") {
  const std::vector<double> thr{0.2, 0.2};
  CHECK(gate(std::vector<double>{0.1, 0.5}, thr) == std::optional<std::size_t>{0});
  CHECK_FALSE(gate(std::vector<double>{0.5, 0.5}, thr).has_value());
  CHECK(gate(std::vector<double>{0.3, 0.1}, thr) == std::optional<std::size_t>{1});
  CHECK_FALSE(gate(std::vector<double>{}, std::vector<double>{}).has_value());

  SECTION("accepted-argmin and global-argmin differ when the global winner is rejected") {
    const std::vector<double> errs{0.05, 0.1};
    const std::vector<double> tight{0.01, 0.2};
    CHECK(gate(errs, tight, GateRule::AcceptedArgmin) == std::optional<std::size_t>{1});
    CHECK_FALSE(gate(errs, tight, GateRule::GlobalArgmin).has_value());
  }
  SECTION("ties go to the lower stage") {
    CHECK(gate(std::vector<double>{0.1, 0.1}, thr) == std::optional<std::size_t>{0});
  }
}
