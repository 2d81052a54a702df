#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "crosskd/errors.hpp"
#include "crosskd/trainer.hpp"
#include "helpers.hpp"

namespace crosskd {
namespace {

using testing::randn;

// Small cross-arch run: 4 classes, 8 images each, batch 4 -> 8 steps per epoch.
RunConfig small_config(Mode mode = Mode::CrossArch) {
  RunConfig cfg;
  cfg.seed = 3;
  cfg.mode = mode;
  cfg.data.per_class = 8;
  cfg.data.val_per_class = 4;
  cfg.train.batch_size = 4;
  cfg.train.epochs = 2;
  cfg.train.disc_hidden = 32;
  cfg.finalize();
  return cfg;
}

struct Fixture {
  RunConfig cfg;
  Dataset train, val;
  Teacher teacher;

  explicit Fixture(RunConfig c)
      : cfg(std::move(c)),
        train(synth_dataset(cfg.seed, cfg.data.classes, cfg.data.per_class, 32, 32, "train")),
        val(synth_dataset(cfg.seed, cfg.data.classes, cfg.data.val_per_class, 32, 32, "val")),
        teacher(make_teacher(cfg)) {}

  static Teacher make_teacher(const RunConfig& cfg) {
    RngStream init(cfg.seed, "init/teacher");
    return Teacher(cfg.teacher, init);
  }
};

TEST(SgdStep, PlainStepSubtractsGradient) {
  std::vector<double> p{1.0, -2.0}, g{0.5, 0.25}, v{0.0, 0.0};
  sgd_step(p, g, v, 1.0, 0.0, 0.0);
  EXPECT_EQ(p, (std::vector<double>{0.5, -2.25}));
}

TEST(SgdStep, MomentumRecursion) {
  const double g = 0.3;
  std::vector<double> p{0.0}, grad{g}, v{0.0};
  sgd_step(p, grad, v, 1.0, 0.9, 0.0);
  sgd_step(p, grad, v, 1.0, 0.9, 0.0);
  EXPECT_NEAR(p[0], -(g + 1.9 * g), 1e-15);
}

TEST(SgdStep, WeightDecayOnly) {
  std::vector<double> p{1.0}, g{0.0}, v{0.0};
  sgd_step(p, g, v, 0.1, 0.0, 1e-4);
  EXPECT_NEAR(p[0], 0.99999, 1e-15);
}

TEST(SgdStep, SizeMismatchIsDimensionError) {
  std::vector<double> p{1.0, 2.0}, g{0.0}, v{0.0, 0.0};
  EXPECT_THROW(sgd_step(p, g, v, 0.1, 0.0, 0.0), DimensionError);
}

TEST(Sgd, MissingGradientCountsAsZero) {
  auto a = Tensor::from({2}, {1, 2}, true);
  auto b = Tensor::from({1}, {5}, true);
  Sgd opt({{"a", a}, {"b", b}}, 0.0, 0.0);
  opt.zero_grad();
  sum(mul(a, a)).backward();
  opt.step(0.5);
  EXPECT_EQ(a.values(), (std::vector<double>{0.0, 0.0}));
  EXPECT_EQ(b.values(), (std::vector<double>{5.0}));
}

TEST(LrSchedule, Milestones) {
  const std::vector<std::size_t> ms{100, 150};
  EXPECT_DOUBLE_EQ(lr_schedule(0, 0.1, ms), 0.1);
  EXPECT_NEAR(lr_schedule(120, 0.1, ms), 0.01, 1e-17);
  EXPECT_NEAR(lr_schedule(200, 0.1, ms), 0.001, 1e-18);
  EXPECT_NEAR(lr_schedule(99, 0.1, ms), 0.1, 0.0);
  EXPECT_NEAR(lr_schedule(100, 0.1, ms), 0.01, 1e-17);
}

TEST(KdLoss, EqualLogitsHaveZeroKl) {
  auto s = randn({3, 4}, 1);
  std::vector<int> y{0, 1, 2};
  auto kd = logits_baseline_loss(s, s, y, 4.0, 0.9);
  EXPECT_NEAR(kd.kl.item(), 0.0, 1e-15);
  EXPECT_NEAR(kd.total.item(), 0.1 * kd.ce.item(), 1e-15);
}

TEST(KdLoss, TwoClassHandValue) {
  auto s = Tensor::from({1, 2}, {0, 1});
  auto t = Tensor::from({1, 2}, {1, 0});
  std::vector<int> y{0};
  auto kd = logits_baseline_loss(s, t, y, 1.0, 1.0);
  const double e = std::exp(1.0);
  EXPECT_NEAR(kd.kl.item(), (e - 1) / (e + 1), 1e-15);
  EXPECT_NEAR(kd.total.item(), (e - 1) / (e + 1), 1e-15);

  auto kd2 = logits_baseline_loss(s, t, y, 2.0, 0.5);
  const double p0 = 1 / (1 + std::exp(-0.5)), q0 = 1 / (1 + std::exp(0.5));
  const double kl = p0 * std::log(p0 / q0) + (1 - p0) * std::log((1 - p0) / (1 - q0));
  EXPECT_NEAR(kd2.total.item(), 0.5 * 4 * kl + 0.5 * std::log(1 + e), 1e-14);
}

TEST(KdLoss, TeacherLogitsGetNoGradient) {
  auto s = randn({2, 3}, 1, "s", true);
  auto t = randn({2, 3}, 2, "t", true);
  std::vector<int> y{0, 2};
  logits_baseline_loss(s, t, y, 3.0, 0.7).total.backward();
  EXPECT_TRUE(s.has_grad());
  EXPECT_FALSE(t.has_grad());
}

TEST(Trainer, LossReportIsAdditive) {
  for (double lambda : {0.01, 0.1, 1.0}) {
    auto cfg = small_config();
    cfg.train.lambda = lambda;
    Fixture f(cfg);
    Trainer trainer(f.cfg, f.train, nullptr, &f.teacher);
    auto result = trainer.run();
    ASSERT_EQ(result.steps.size(), 16u);
    for (const auto& r : result.steps) {
      EXPECT_NEAR(r.total, r.summed_total(), 1e-10) << "step " << r.step;
      EXPECT_EQ(r.lambda, lambda);
    }
  }
}

TEST(Trainer, DiscriminatorScheduleCountsUpdates) {
  for (std::size_t steps : {1, 4, 5, 6, 11, 100}) {
    auto cfg = small_config();
    cfg.data.per_class = 1;
    cfg.train.batch_size = 4;
    cfg.train.epochs = steps;
    Fixture f(cfg);
    Trainer trainer(f.cfg, f.train, nullptr, &f.teacher);
    auto result = trainer.run();
    ASSERT_EQ(result.steps.size(), steps);
    const std::size_t last = steps - 1;
    EXPECT_EQ(result.disc_updates, last / 5 + 1) << steps << " steps";
    for (const auto& r : result.steps) EXPECT_EQ(r.mad.has_value(), r.step % 5 == 0);
    if (steps == 100) EXPECT_EQ(result.disc_updates, 20u);
  }
}

TEST(Trainer, TeacherUntouchedAfterHundredSteps) {
  auto cfg = small_config();
  cfg.data.per_class = 1;
  cfg.train.epochs = 100;
  Fixture f(cfg);
  auto x = f.val.images(std::vector<std::size_t>{0, 1, 2});
  const auto before = f.teacher.forward(x).logits.values();
  Trainer trainer(f.cfg, f.train, nullptr, &f.teacher);
  auto result = trainer.run();
  EXPECT_EQ(result.steps.size(), 100u);
  EXPECT_EQ(result.teacher_checksum_before, result.teacher_checksum_after);
  EXPECT_EQ(f.teacher.forward(x).logits.values(), before);
}

TEST(Trainer, OptimizerExcludesTeacherAndDiscriminator) {
  auto cfg = small_config();
  Fixture f(cfg);
  Trainer trainer(f.cfg, f.train, nullptr, &f.teacher);
  const auto expected = parameter_count(trainer.student().parameters()) +
                        parameter_count(trainer.proj1()->parameters()) +
                        parameter_count(trainer.proj2()->parameters());
  EXPECT_EQ(parameter_count(trainer.optimizer().params()), expected);
  for (const auto& [name, t] : trainer.optimizer().params()) {
    EXPECT_NE(name.rfind("teacher.", 0), 0u) << name;
    EXPECT_NE(name.rfind("disc", 0), 0u) << name;
  }
}

TEST(Trainer, LambdaZeroDecouplesDiscriminator) {
  auto run = [](double disc_lr) {
    auto cfg = small_config();
    cfg.train.lambda = 0.0;
    cfg.train.disc_lr = disc_lr;
    Fixture f(cfg);
    Trainer trainer(f.cfg, f.train, nullptr, &f.teacher);
    auto result = trainer.run();
    EXPECT_GT(result.disc_updates, 0u);
    for (const auto& r : result.steps) EXPECT_NEAR(r.total, r.proj1 + r.proj2 + r.ce, 1e-12);
    return std::make_pair(checksum(trainer.student().parameters()), checksum(trainer.discriminator()->parameters()));
  };
  auto a = run(0.01), b = run(0.5);
  EXPECT_EQ(a.first, b.first);
  EXPECT_NE(a.second, b.second);
}

TEST(Trainer, GradientIsolation) {
  auto cfg = small_config();
  Fixture f(cfg);
  Trainer trainer(f.cfg, f.train, nullptr, &f.teacher);
  const std::vector<std::size_t> batch{0, 1, 2, 3};
  trainer.step(batch, 0);  // step 0 updates D
  const auto disc_before = checksum(trainer.discriminator()->parameters());
  const auto student_before = checksum(trainer.student().parameters());
  trainer.step(batch, 0);  // step 1: student only
  EXPECT_EQ(checksum(trainer.discriminator()->parameters()), disc_before);
  EXPECT_NE(checksum(trainer.student().parameters()), student_before);

  // A discriminator update on its own leaves student and projectors alone.
  auto params = trainer.optimizer().params();
  const auto student_side = checksum(params);
  auto& disc = *trainer.discriminator();
  Sgd(params, 0.0, 0.0).zero_grad();
  Sgd disc_opt(disc.parameters(), 0.9, 0.0);
  disc_opt.zero_grad();
  auto x = f.train.images(batch);
  auto tb = f.teacher.forward(x);
  auto sb = trainer.student().forward(x, true);
  RngStream drop(0, "gl-dropout");
  auto hs = trainer.proj2()->project(sb.features, true, drop);
  loss_mad(disc, tb.features, hs).backward();
  for (const auto& [name, t] : params) EXPECT_FALSE(t.has_grad()) << name;
  disc_opt.step(0.1);
  EXPECT_EQ(checksum(params), student_side);
  EXPECT_NE(checksum(disc.parameters()), disc_before);
}

TEST(Trainer, RunsAreDeterministic) {
  auto run = [] {
    Fixture f(small_config());
    Trainer trainer(f.cfg, f.train, &f.val, &f.teacher);
    std::ostringstream csv;
    trainer.run(&csv);
    return csv.str();
  };
  const auto a = run();
  EXPECT_EQ(a, run());
  EXPECT_EQ(a.substr(0, a.find('\n') + 1), metrics_csv_header());
}

TEST(Trainer, CsvLeavesMadBlankOffSchedule) {
  Fixture f(small_config());
  Trainer trainer(f.cfg, f.train, &f.val, &f.teacher);
  std::ostringstream csv;
  trainer.run(&csv);
  std::istringstream in(csv.str());
  std::string line;
  std::getline(in, line);
  std::size_t row = 0;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (line.back() == ',') cells.emplace_back();
    ASSERT_EQ(cells.size(), 11u) << line;
    EXPECT_EQ(cells[6].empty(), row % 5 != 0) << line;
    EXPECT_EQ(cells[10].empty(), row % 8 != 7) << line;
    ++row;
  }
  EXPECT_EQ(row, 16u);
}

TEST(Trainer, StudentOnlyMatchesReferenceLoop) {
  auto cfg = small_config(Mode::StudentOnly);
  cfg.train.epochs = 2;
  Fixture f(cfg);
  Trainer trainer(f.cfg, f.train, nullptr, nullptr);
  auto result = trainer.run();

  RngStream init(cfg.seed, "init/student");
  Student ref(cfg.student, init);
  auto params = ref.parameters();
  std::vector<std::vector<double>> vel;
  for (const auto& [n, p] : params) vel.emplace_back(p.size(), 0.0);
  const RngStream shuffle(cfg.seed, "shuffle");
  std::vector<double> losses;
  for (std::size_t epoch = 0; epoch < cfg.train.epochs && losses.size() < 10; ++epoch) {
    RngStream order = shuffle.fork(epoch);
    for (const auto& batch : batches(f.train.size(), cfg.train.batch_size, &order)) {
      if (losses.size() == 10) break;
      for (auto& [n, p] : params) p.zero_grad();
      auto loss = cross_entropy_with_logits(ref.forward(f.train.images(batch), true).logits, f.train.labels_of(batch));
      losses.push_back(loss.item());
      loss.backward();
      for (std::size_t i = 0; i < params.size(); ++i) {
        auto w = params[i].second.mutable_data();
        auto g = params[i].second.grad();
        for (std::size_t j = 0; j < w.size(); ++j) {
          vel[i][j] = cfg.train.momentum * vel[i][j] + g[j] + cfg.train.weight_decay * w[j];
          w[j] -= cfg.train.lr * vel[i][j];
        }
      }
    }
  }
  ASSERT_EQ(losses.size(), 10u);
  for (std::size_t s = 0; s < 10; ++s) {
    EXPECT_NEAR(result.steps[s].total, losses[s], 1e-9) << "step " << s;
    EXPECT_EQ(result.steps[s].proj1, 0.0);
  }
}

TEST(Trainer, LogitsBaselineReportsKdAndCeWeight) {
  Fixture f(small_config(Mode::LogitsBaseline));
  Trainer trainer(f.cfg, f.train, nullptr, &f.teacher);
  auto result = trainer.run();
  for (const auto& r : result.steps) {
    EXPECT_NEAR(r.ce_weight, 1 - f.cfg.train.kd_alpha, 1e-15);
    EXPECT_NEAR(r.total, r.summed_total(), 1e-10);
    EXPECT_FALSE(r.mad.has_value());
  }
  EXPECT_EQ(trainer.discriminator(), nullptr);
}

TEST(Trainer, NonFiniteLossAbortsWithStepTrace) {
  auto cfg = small_config(Mode::StudentOnly);
  cfg.train.lr = 1e200;
  Fixture f(cfg);
  Trainer trainer(f.cfg, f.train, nullptr, nullptr);
  try {
    trainer.run();
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("training aborted at step"), std::string::npos) << e.what();
  }
}

TEST(Trainer, GeometryMismatchIsConfigError) {
  Fixture f(small_config());
  auto small = synth_dataset(1, 4, 2, 16, 16);
  EXPECT_THROW(Trainer(f.cfg, small, nullptr, &f.teacher), ConfigError);
  auto five = synth_dataset(1, 5, 2, 32, 32);
  EXPECT_THROW(Trainer(f.cfg, five, nullptr, &f.teacher), ConfigError);
  EXPECT_THROW(Trainer(f.cfg, f.train, nullptr, nullptr), ConfigError);
}

TEST(Export, KeepsOnlyStudentAndReproducesLogits) {
  Fixture f(small_config());
  Trainer trainer(f.cfg, f.train, nullptr, &f.teacher);
  trainer.run();
  auto training = trainer.training_checkpoint();
  auto exported = export_student(training);
  EXPECT_LT(serialize(exported).size(), serialize(training).size());
  for (const auto& t : exported.tensors) {
    EXPECT_EQ(t.name.rfind("student.", 0), 0u) << t.name;
    EXPECT_EQ(t.name.find("proj"), std::string::npos);
    EXPECT_EQ(t.name.find("disc"), std::string::npos);
  }
  EXPECT_TRUE(training.has_prefix("proj1."));
  EXPECT_TRUE(training.has_prefix("disc"));

  auto dir = testing::temp_dir("export");
  save_checkpoint(dir / "student.ckpt", exported);
  auto loaded = load_student(load_checkpoint(dir / "student.ckpt"));
  auto x = f.val.images(std::vector<std::size_t>{0, 1, 2, 3});
  EXPECT_EQ(loaded.forward(x, false).logits.values(), trainer.student().forward(x, false).logits.values());
  EXPECT_EQ(evaluate(loaded, f.val).top1, evaluate(trainer.student(), f.val).top1);

  Checkpoint empty;
  empty.meta["kind"] = "training";
  EXPECT_THROW(export_student(empty), DataError);
}

TEST(TeacherCheckpoint, RoundTripIsFrozenAndExact) {
  Fixture f(small_config());
  auto ck = teacher_checkpoint(f.teacher);
  auto loaded = load_teacher(deserialize(serialize(ck)));
  EXPECT_TRUE(loaded.frozen());
  EXPECT_EQ(checksum(loaded.parameters()), checksum(f.teacher.parameters()));
  Checkpoint other;
  other.meta["kind"] = "student";
  EXPECT_THROW(load_teacher(other), DataError);
}

TEST(Pretrain, TeacherLearnsAboveChance) {
  auto cfg = small_config(Mode::TeacherPretrain);
  cfg.data.teacher_per_class = 100;
  cfg.train.batch_size = 32;
  cfg.train.epochs = 40;
  cfg.train.milestones = {30};
  cfg.mvg.enabled = false;
  auto splits = load_splits(cfg, true);
  EXPECT_EQ(splits.train.size(), 400u);
  TrainResult result;
  auto teacher = pretrain_teacher(cfg, splits.train, &splits.train, &result);
  EXPECT_TRUE(teacher.frozen());
  EXPECT_EQ(result.steps.size(), 520u);
  EXPECT_LT(result.steps.back().total, result.steps.front().total);
  EXPECT_GT(result.evals.back().val_top1, 0.4);
}

}  // namespace
}  // namespace crosskd
