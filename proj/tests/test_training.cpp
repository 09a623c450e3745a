#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include "cod2/training.hpp"
#include "helpers.hpp"

using namespace cod2;
using testing::TempDir;

namespace {

TrainConfig tiny_config() {
  TrainConfig c;
  c.batch.P = 2;
  c.batch.K = 2;
  c.clip_length = 12;
  c.m = 3;
  c.steps = 4;
  c.checkpoint_every = 2;
  c.seed = 11;
  return c;
}

TrainConfig tiny_baseline() {
  TrainConfig c = tiny_config();
  c.ablation.high_level = false;
  c.ablation.low_level = false;
  return c;
}

struct Fixture {
  TempDir dir{"train"};
  GaitDataset dataset = testing::small_dataset(dir / "data", 6, 4, 16);
};

std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::ifstream in(path);
  std::vector<std::string> lines;
  for (std::string line; std::getline(in, line);) lines.push_back(line);
  return lines;
}

std::string drop_last_field(const std::string& row) { return row.substr(0, row.rfind(',')); }

bool same_parameters(const ModelBundle& a, const ModelBundle& b) {
  const auto pa = a.parameters(), pb = b.parameters();
  if (pa.size() != pb.size()) return false;
  for (size_t i = 0; i < pa.size(); ++i)
    if (!testing::bit_equal(pa[i], pb[i])) return false;
  return true;
}

}  // namespace

TEST_CASE("learning rate decays by decay_rate after half and three quarters of the steps") {
  TrainConfig c;
  c.steps = 5000;
  c.lr = 1e-4;
  c.decay_rate = 0.1;
  CHECK(lr_milestones(5000) == std::pair<int64_t, int64_t>{2500, 3750});
  CHECK(lr_at(c, 1) == doctest::Approx(1e-4));
  CHECK(lr_at(c, 2500) == doctest::Approx(1e-4));
  CHECK(lr_at(c, 2501) == doctest::Approx(1e-5));
  CHECK(lr_at(c, 3750) == doctest::Approx(1e-5));
  CHECK(lr_at(c, 3751) == doctest::Approx(1e-6));
  CHECK(lr_at(c, 5000) == doctest::Approx(1e-6));
  c.steps = 7;
  c.decay_rate = 0.5;
  CHECK(lr_at(c, 3) == doctest::Approx(1e-4));
  CHECK(lr_at(c, 4) == doctest::Approx(5e-5));
  CHECK(lr_at(c, 6) == doctest::Approx(2.5e-5));
}

TEST_CASE("joint step loss is the weighted sum of the real and generated losses") {
  Fixture fx;
  TrainConfig c = tiny_config();
  c.loss_d_weight = 0.7;
  c.loss_g_weight = 1.3;
  c.loss.triplet = 1.5;
  c.loss.ce = 0.5;
  Trainer trainer(fx.dataset, c);
  StepIntermediates keep;
  const StepReport r = trainer.step(&keep);
  CHECK(r.step == 1);
  CHECK(r.L_D == doctest::Approx(1.5 * r.L_tri_D + 0.5 * r.L_ce_D));
  CHECK(r.L_G == doctest::Approx(1.5 * r.L_tri_G + 0.5 * r.L_ce_G));
  CHECK(r.L == doctest::Approx(0.7 * r.L_D + 1.3 * r.L_G));
  CHECK(keep.loss.item<double>() == doctest::Approx(r.L));

  // recompute both terms from the kept head outputs
  const auto real = discriminative_loss(keep.heads_real, keep.labels, c.loss);
  const auto gen = discriminative_loss(keep.heads_generated, keep.labels, c.loss);
  CHECK(real.total.item<double>() == doctest::Approx(r.L_D).epsilon(1e-6));
  CHECK(gen.total.item<double>() == doctest::Approx(r.L_G).epsilon(1e-6));

  CHECK(keep.x0.sizes() == torch::IntArrayRef({4, 1, 12, 64, 44}));
  CHECK(keep.x_hat.sizes() == keep.x0.sizes());
  CHECK(keep.x_hat.min().item<double>() >= 0.0);
  CHECK(keep.x_hat.max().item<double>() <= 1.0);
  CHECK(keep.f_hat.sizes() == keep.f_I.sizes());
  CHECK(keep.noise.window_len == 3);
  // the batch is P identities with K consecutive clips each
  const auto labels = keep.labels;
  CHECK(labels[0].item<int64_t>() == labels[1].item<int64_t>());
  CHECK(labels[2].item<int64_t>() == labels[3].item<int64_t>());
  CHECK(labels[0].item<int64_t>() != labels[2].item<int64_t>());
}

TEST_CASE("the noise sequence carries the real clip's reference window") {
  Fixture fx;
  Trainer trainer(fx.dataset, tiny_config());
  StepIntermediates keep;
  trainer.step(&keep);
  for (int64_t b = 0; b < 4; ++b) {
    const int64_t k = keep.noise.source_start[b], slot = keep.noise.slot_start[b];
    CHECK(testing::bit_equal(keep.noise.frames[b].narrow(1, slot, 3), keep.x0[b].narrow(1, k, 3)));
  }
}

TEST_CASE("baseline has no generator and zero L_G") {
  Fixture fx;
  Trainer trainer(fx.dataset, tiny_baseline());
  CHECK_FALSE(trainer.models().has_generator());
  StepIntermediates keep;
  const StepReport r = trainer.step(&keep);
  CHECK(r.L_G == 0.0);
  CHECK(r.L_tri_G == 0.0);
  CHECK(r.L == doctest::Approx(r.L_D));
  CHECK_FALSE(keep.x_hat.defined());
}

TEST_CASE("same seed gives identical steps and parameters") {
  Fixture fx;
  Trainer a(fx.dataset, tiny_config()), b(fx.dataset, tiny_config());
  for (int i = 0; i < 2; ++i) {
    const StepReport ra = a.step(), rb = b.step();
    CHECK(ra.L == rb.L);
    CHECK(ra.L_G == rb.L_G);
  }
  CHECK(same_parameters(a.models(), b.models()));
  TrainConfig other = tiny_config();
  other.seed = 12;
  Trainer c(fx.dataset, other);
  CHECK_FALSE(same_parameters(a.models(), c.models()));
}

TEST_CASE("batch_for is a pure function of seed and step") {
  Fixture fx;
  Trainer t(fx.dataset, tiny_config());
  const Batch first = t.batch_for(3);
  t.step();
  CHECK(testing::bit_equal(first.frames, t.batch_for(3).frames));
  CHECK_FALSE(testing::bit_equal(first.frames, t.batch_for(4).frames));
}

TEST_CASE("the extractor receives gradient through the generated pass alone") {
  Fixture fx;
  TrainConfig c = tiny_config();
  c.loss_d_weight = 0.0;
  Trainer trainer(fx.dataset, c);
  trainer.step();
  double grad_norm = 0.0;
  for (const auto& p : trainer.models().backbone->parameters())
    if (p.grad().defined()) grad_norm += p.grad().norm().item<double>();
  CHECK(grad_norm > 0.0);
  double gen_grad = 0.0;
  for (const auto& p : trainer.models().generator->parameters())
    if (p.grad().defined()) gen_grad += p.grad().norm().item<double>();
  CHECK(gen_grad > 0.0);
}

TEST_CASE("generated pass leaves batch-norm running statistics to real data") {
  Fixture fx;
  TrainConfig with_g = tiny_config();
  Trainer a(fx.dataset, with_g);
  StepIntermediates keep;
  a.step(&keep);
  // Replay the real half alone from the same initial weights: running stats must agree.
  TrainConfig base = tiny_config();
  ModelBundle fresh = ModelBundle::build(base, static_cast<int64_t>(fx.dataset.train_identities().size()), true);
  fresh.train(true);
  {
    torch::NoGradGuard g;
    fresh.heads->forward(fresh.backbone->forward(keep.x0));
  }
  const auto replay = fresh.backbone->named_buffers();
  int compared = 0;
  for (const auto& item : a.models().backbone->named_buffers())
    if (item.key().find("running_mean") != std::string::npos) {
      CHECK_MESSAGE(testing::max_abs_diff(item.value(), replay[item.key()]) < 1e-5, item.key());
      ++compared;
    }
  CHECK(compared > 0);
}

TEST_CASE("a one-step run writes one log row and one checkpoint") {
  Fixture fx;
  TrainConfig c = tiny_config();
  c.steps = 1;
  const auto run = fx.dir / "one";
  const TrainResult result = train(fx.dataset, c, TrainOptions{run});
  CHECK(result.reports.size() == 1);
  const auto lines = read_lines(run / "metrics.csv");
  REQUIRE(lines.size() == 2);
  CHECK(lines[0] == kMetricsHeader);
  CHECK(lines[1].rfind("1,", 0) == 0);
  int checkpoints = 0;
  for (const auto& e : std::filesystem::directory_iterator(run / "checkpoints")) {
    ++checkpoints;
    CHECK(e.path().filename() == "step_000001.ckpt");
  }
  CHECK(checkpoints == 1);
  CHECK(std::filesystem::exists(run / "run_manifest.json"));
  CHECK(read_checkpoint_meta(result.final_checkpoint).step == 1);
}

TEST_CASE("metrics rows have one field per header column") {
  StepReport r;
  r.step = 12;
  r.L = 1.25;
  r.lr = 1e-4;
  r.ms = 3.14159;
  const std::string row = metrics_row(r);
  CHECK(row.rfind("12,1.25,", 0) == 0);
  CHECK(row.substr(row.rfind(',') + 1) == "3.142");
  const auto commas = [](const std::string& s) { return std::count(s.begin(), s.end(), ','); };
  CHECK(commas(row) == commas(kMetricsHeader));
}

TEST_CASE("resuming reproduces the uninterrupted run") {
  Fixture fx;
  const TrainConfig c = tiny_config();
  const auto full = fx.dir / "full", split = fx.dir / "split";
  train(fx.dataset, c, TrainOptions{full});

  TrainOptions first{split};
  first.step_limit = 2;
  const TrainResult part = train(fx.dataset, c, first);
  CHECK(part.reports.size() == 2);
  TrainOptions second{split};
  second.resume = split / "checkpoints" / "step_000002.ckpt";
  const TrainResult rest = train(fx.dataset, c, second);
  REQUIRE(rest.reports.size() == 2);
  CHECK(rest.reports.front().step == 3);

  const auto a = read_lines(full / "metrics.csv"), b = read_lines(split / "metrics.csv");
  REQUIRE(a.size() == 5);
  REQUIRE(b.size() == a.size());
  for (size_t i = 1; i < a.size(); ++i) CHECK(drop_last_field(a[i]) == drop_last_field(b[i]));

  const ModelBundle ma = load_checkpoint(full / "checkpoints" / "step_000004.ckpt", true);
  const ModelBundle mb = load_checkpoint(split / "checkpoints" / "step_000004.ckpt", true);
  CHECK(same_parameters(ma, mb));
}

TEST_CASE("resume rejects finished or incompatible checkpoints") {
  Fixture fx;
  TrainConfig base = tiny_baseline();
  base.steps = 1;
  const TrainResult done = train(fx.dataset, base, TrainOptions{fx.dir / "b"});
  {
    Trainer t(fx.dataset, base);
    CHECK_THROWS_WITH(t.resume(done.final_checkpoint), doctest::Contains("nothing left"));
  }
  TrainConfig joint = tiny_config();
  Trainer t(fx.dataset, joint);
  CHECK_THROWS_WITH(t.resume(done.final_checkpoint), doctest::Contains("missing generator."));
}

TEST_CASE("a non-finite loss stops the step with a diagnostic") {
  Fixture fx;
  Trainer t(fx.dataset, tiny_baseline());
  {
    torch::NoGradGuard g;
    t.models().heads->parameters().front().fill_(std::numeric_limits<float>::quiet_NaN());
  }
  CHECK_THROWS_WITH(t.step(), doctest::Contains("non-finite loss at step 1"));
  CHECK(t.steps_done() == 0);
}

TEST_CASE("ablation tables list their rows") {
  const TrainConfig base = tiny_config();
  const auto conditions = ablation_variants(base, AblationAxis::conditions);
  REQUIRE(conditions.size() == 4);
  CHECK_FALSE(conditions[0].config.uses_generator());
  CHECK(conditions[3].config.ablation.high_level);
  CHECK(conditions[3].config.ablation.low_level);
  CHECK(conditions[1].label == "high=on low=off");
  const auto ms = ablation_variants(base, AblationAxis::m);
  REQUIRE(ms.size() == 5);
  CHECK(ms[0].config.m == 1);
  CHECK(ms[4].config.m == 9);
  CHECK(ablation_variants(base, AblationAxis::lambda_mode).size() == 3);
  const auto fusion = ablation_variants(base, AblationAxis::fusion);
  REQUIRE(fusion.size() == 3);
  CHECK(fusion[0].config.ablation.fusion == Fusion::none);
  for (const auto& v : fusion) CHECK(v.config.uses_generator());
  for (auto axis : {AblationAxis::conditions, AblationAxis::m, AblationAxis::lambda_mode, AblationAxis::fusion})
    CHECK(ablation_axis_from_string(to_string(axis)) == axis);
  CHECK_THROWS_WITH(ablation_axis_from_string("gamma"), doctest::Contains("unknown ablation axis"));
}

TEST_CASE("evaluation is identical with the generator stripped from the checkpoint") {
  Fixture fx;
  TrainConfig c = tiny_config();
  c.steps = 1;
  const TrainResult r = train(fx.dataset, c, TrainOptions{fx.dir / "g"});
  const auto stripped = fx.dir / "stripped.ckpt";
  strip_generator(r.final_checkpoint, stripped);
  const EvalReport a = evaluate_checkpoint(r.final_checkpoint, fx.dataset, {1, 2});
  const EvalReport b = evaluate_checkpoint(stripped, fx.dataset, {1, 2});
  CHECK(a.rank(1).overall == b.rank(1).overall);
  CHECK(a.rank(2).overall == b.rank(2).overall);
  CHECK(a.map.overall == b.map.overall);
  CHECK(a.to_json() == b.to_json());
}
