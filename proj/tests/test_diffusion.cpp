#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <ATen/CPUGeneratorImpl.h>

#include <cmath>
#include <map>

#include "cod2/diffusion.hpp"
#include "helpers.hpp"

using namespace cod2;

namespace {

torch::Generator make_rng(uint64_t seed) { return at::make_generator<at::CPUGeneratorImpl>(seed); }

GeneratorOptions small_options() {
  GeneratorOptions o;
  o.feature_channels = 8;
  o.parts = 4;
  return o;
}

}  // namespace

TEST_CASE("linear variance schedule") {
  const auto s = VarianceSchedule::linear(1e-4, 0.02, 50);
  REQUIRE(s.steps() == 50);
  CHECK(s.betas.front() == doctest::Approx(1e-4));
  CHECK(s.betas.back() == doctest::Approx(0.02));
  CHECK(s.betas[1] - s.betas[0] == doctest::Approx((0.02 - 1e-4) / 49));
  double prod = 1.0;
  for (int64_t t = 1; t <= 50; ++t) {
    prod *= 1.0 - s.betas[static_cast<size_t>(t - 1)];
    CHECK(s.alpha_bar(t) == doctest::Approx(prod).epsilon(1e-12));
  }
  CHECK_THROWS_AS(s.alpha_bar(0), std::out_of_range);
  CHECK_THROWS_AS(s.alpha_bar(51), std::out_of_range);
  CHECK_THROWS(VarianceSchedule::from_betas({0.1, 1.0}));
  CHECK_THROWS(VarianceSchedule::from_betas({0.2, 0.1}));
  CHECK_THROWS(VarianceSchedule::from_betas({}));
}

TEST_CASE("closed-form noising matches iterated single steps in mean and variance") {
  // 4000 chains of x_t = sqrt(1 - beta_t) x_{t-1} + sqrt(beta_t) eps versus the closed form.
  const auto schedule = VarianceSchedule::linear(1e-4, 0.02, 50);
  const int64_t n = 4000;
  const auto x0 = torch::full({n}, 0.8, torch::kFloat64);
  auto rng = make_rng(11);
  for (int64_t t : {1, 10, 50}) {
    auto iterated = x0.clone();
    for (int64_t s = 1; s <= t; ++s) {
      const double beta = schedule.betas[static_cast<size_t>(s - 1)];
      iterated = std::sqrt(1 - beta) * iterated + std::sqrt(beta) * torch::randn({n}, rng, torch::kFloat64);
    }
    const auto closed = forward_noising(x0, t, schedule, rng);
    const double abar = schedule.alpha_bar(t);
    const double mean = std::sqrt(abar) * 0.8, var = 1 - abar;
    const double se_mean = std::sqrt(var / n), se_var = var * std::sqrt(2.0 / (n - 1));
    for (const auto& sample : {iterated, closed}) {
      CHECK(std::abs(sample.mean().item<double>() - mean) < 4 * se_mean);
      CHECK(std::abs(sample.var().item<double>() - var) < 4 * se_var);
    }
  }
}

TEST_CASE("noise sequence keeps the clean window bit-exact") {
  torch::manual_seed(1);
  const auto x0 = torch::rand({3, 1, 10, 64, 44});
  auto rng = make_rng(2);
  const auto noise = build_noise_sequence(x0, 4, rng);
  REQUIRE(noise.frames.sizes() == x0.sizes());
  for (int64_t b = 0; b < 3; ++b) {
    const int64_t k = noise.source_start[static_cast<size_t>(b)];
    CHECK(noise.slot_start[static_cast<size_t>(b)] == k);
    CHECK(k >= 0);
    CHECK(k <= 6);
    CHECK(testing::bit_equal(noise.frames[b].narrow(1, k, 4), x0[b].narrow(1, k, 4)));
    // noise slots are Gaussian, not silhouette values
    if (k > 0) CHECK(noise.frames[b].narrow(1, 0, k).min().item<float>() < 0.0f);
  }
  CHECK(testing::bit_equal(noise.reference(), torch::stack({x0[0].narrow(1, noise.source_start[0], 4),
                                                            x0[1].narrow(1, noise.source_start[1], 4),
                                                            x0[2].narrow(1, noise.source_start[2], 4)})));
}

TEST_CASE("front placement moves the window to the first slots") {
  const auto x0 = torch::rand({2, 1, 8, 64, 44});
  auto rng = make_rng(3);
  const auto noise = build_noise_sequence(x0, 3, rng, WindowPosition::front);
  for (int64_t b = 0; b < 2; ++b) {
    CHECK(noise.slot_start[static_cast<size_t>(b)] == 0);
    CHECK(testing::bit_equal(noise.frames[b].narrow(1, 0, 3), x0[b].narrow(1, noise.source_start[static_cast<size_t>(b)], 3)));
  }
}

TEST_CASE("window start is uniform over [0, T - m]") {
  // chi-square, 6 dof, p = 0.001 cutoff 22.46
  const auto x0 = torch::zeros({500, 1, 9, 2, 2});
  auto rng = make_rng(4);
  std::map<int64_t, int> counts;
  const int rounds = 8;
  for (int r = 0; r < rounds; ++r) {
    const auto noise = build_noise_sequence(x0, 3, rng);
    for (auto k : noise.source_start) counts[k]++;
  }
  REQUIRE(counts.size() == 7);
  const double expected = 500.0 * rounds / 7.0;
  double chi2 = 0.0;
  for (auto& [k, c] : counts) chi2 += (c - expected) * (c - expected) / expected;
  CHECK(chi2 < 22.46);
}

TEST_CASE("window length must leave a noise slot") {
  const auto x0 = torch::zeros({1, 1, 5, 2, 2});
  auto rng = make_rng(5);
  CHECK_THROWS_AS(build_noise_sequence(x0, 0, rng), std::invalid_argument);
  CHECK_THROWS_AS(build_noise_sequence(x0, 5, rng), std::invalid_argument);
  CHECK_NOTHROW(build_noise_sequence(x0, 4, rng));
  const auto pure = pure_noise_sequence(x0, rng);
  CHECK_FALSE(pure.has_reference());
  CHECK_THROWS(pure.reference());
}

TEST_CASE("noise sequences are reproducible from the generator seed") {
  const auto x0 = torch::rand({2, 1, 6, 64, 44});
  auto a = make_rng(9), b = make_rng(9);
  const auto na = build_noise_sequence(x0, 2, a), nb = build_noise_sequence(x0, 2, b);
  CHECK(testing::bit_equal(na.frames, nb.frames));
  CHECK(na.source_start == nb.source_start);
}

TEST_CASE("clean slot overwrite touches only the window") {
  const auto act = torch::randn({2, 3, 6, 2, 2});
  const auto clean = torch::randn({2, 3, 2, 2, 2});
  const auto out = clean_slot_overwrite(act, clean, {1, 4});
  CHECK(testing::bit_equal(out[0].narrow(1, 1, 2), clean[0]));
  CHECK(testing::bit_equal(out[1].narrow(1, 4, 2), clean[1]));
  CHECK(testing::bit_equal(out[0].narrow(1, 3, 3), act[0].narrow(1, 3, 3)));
  CHECK(testing::bit_equal(out[1].narrow(1, 0, 4), act[1].narrow(1, 0, 4)));
  CHECK_THROWS(clean_slot_overwrite(act, clean, {5, 0}));
  CHECK_THROWS(clean_slot_overwrite(act, clean, {0}));
}

TEST_CASE("generator shapes follow the layer ladder") {
  torch::manual_seed(6);
  GenerativeModule gen(small_options());
  const auto x0 = torch::rand({2, 1, 6, 64, 44});
  auto rng = make_rng(6);
  const auto noise = build_noise_sequence(x0, 2, rng);
  GeneratorTrace trace;
  const auto out = gen->forward(noise, torch::randn({2, 8, 4}), &trace);
  const auto ladder = generator_ladder(6);
  REQUIRE(trace.rows.size() == ladder.size());
  for (size_t i = 0; i < ladder.size(); ++i) {
    CHECK(trace.rows[i].name == ladder[i].name);
    CHECK(trace.rows[i].shape == ladder[i].shape);
  }
  CHECK(trace.block_outputs.size() == 6);
  CHECK(out.sizes() == x0.sizes());
  CHECK(gen->hcm_count() == 5);
}

TEST_CASE("generated sequences lie in [0,1]") {
  torch::manual_seed(7);
  GenerativeModule gen(small_options());
  auto rng = make_rng(7);
  const auto noise = build_noise_sequence(torch::rand({2, 1, 5, 64, 44}), 1, rng);
  const auto out = gen->forward(noise, torch::randn({2, 8, 4}));
  for (int64_t b = 0; b < 2; ++b) {
    CHECK(out[b].min().item<float>() == 0.0f);
    CHECK(out[b].max().item<float>() == 1.0f);
  }
}

TEST_CASE("generator rejects malformed inputs") {
  GenerativeModule gen(small_options());
  auto rng = make_rng(8);
  const auto noise = build_noise_sequence(torch::rand({1, 1, 4, 64, 44}), 1, rng);
  CHECK_THROWS(gen->forward(noise, torch::randn({1, 7, 4})));
  const auto wrong = build_noise_sequence(torch::rand({1, 1, 4, 32, 22}), 1, rng);
  CHECK_THROWS(gen->forward(wrong, torch::randn({1, 8, 4})));
}

TEST_CASE("noise slots never leak into reference-slot activations") {
  torch::manual_seed(9);
  GenerativeModule gen(small_options());
  const auto x0 = torch::rand({2, 1, 7, 64, 44});
  auto rng = make_rng(9);
  const auto noise = build_noise_sequence(x0, 3, rng);
  NoiseSequence perturbed = noise;
  perturbed.frames = noise.frames.clone();
  for (int64_t b = 0; b < 2; ++b) {
    const int64_t s = noise.slot_start[static_cast<size_t>(b)];
    auto sample = perturbed.frames[b];
    for (int64_t t = 0; t < 7; ++t)
      if (t < s || t >= s + 3) sample.select(1, t).normal_(0.0, 3.0);
  }
  const auto f = torch::randn({2, 8, 4});
  GeneratorTrace a, b;
  gen->forward(noise, f, &a);
  gen->forward(perturbed, f, &b);
  REQUIRE(a.block_outputs.size() == 6);
  for (size_t i = 0; i < 6; ++i) {
    for (int64_t s = 0; s < 2; ++s) {
      const int64_t slot = noise.slot_start[static_cast<size_t>(s)];
      CHECK_MESSAGE(testing::bit_equal(a.block_outputs[i][s].narrow(1, slot, 3), b.block_outputs[i][s].narrow(1, slot, 3)),
                    "block " << i + 1);
    }
    CHECK_FALSE(testing::bit_equal(a.block_outputs[i], b.block_outputs[i]));
  }
}

TEST_CASE("first-block-only clean pathway lets noise reach the window later") {
  torch::manual_seed(10);
  GeneratorOptions o = small_options();
  o.clean_pathway = CleanPathway::first_block_only;
  GenerativeModule gen(o);
  const auto x0 = torch::rand({1, 1, 7, 64, 44});
  auto rng = make_rng(10);
  const auto noise = build_noise_sequence(x0, 3, rng, WindowPosition::front);
  NoiseSequence perturbed = noise;
  perturbed.frames = noise.frames.clone();
  perturbed.frames[0].narrow(1, 3, 4).normal_(0.0, 3.0);
  const auto f = torch::randn({1, 8, 4});
  GeneratorTrace a, b;
  gen->forward(noise, f, &a);
  gen->forward(perturbed, f, &b);
  CHECK(testing::bit_equal(a.block_outputs[0][0].narrow(1, 0, 3), b.block_outputs[0][0].narrow(1, 0, 3)));
  CHECK_FALSE(testing::bit_equal(a.block_outputs[5][0].narrow(1, 0, 3), b.block_outputs[5][0].narrow(1, 0, 3)));
}

TEST_CASE("pure-noise generation without a reference window") {
  torch::manual_seed(11);
  GenerativeModule gen(small_options());
  auto rng = make_rng(11);
  const auto noise = pure_noise_sequence(torch::rand({2, 1, 4, 64, 44}), rng);
  CHECK(gen->forward(noise, torch::randn({2, 8, 4})).sizes() == torch::IntArrayRef({2, 1, 4, 64, 44}));
}

TEST_CASE("window position and pathway names round-trip") {
  for (auto p : {WindowPosition::original, WindowPosition::front}) CHECK(window_position_from_string(to_string(p)) == p);
  for (auto p : {CleanPathway::first_block_only, CleanPathway::all_blocks})
    CHECK(clean_pathway_from_string(to_string(p)) == p);
  CHECK_THROWS(window_position_from_string("middle"));
}
