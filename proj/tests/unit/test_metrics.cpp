#include <gtest/gtest.h>

#include <cmath>

#include "crosskd/errors.hpp"
#include "crosskd/metrics.hpp"
#include "helpers.hpp"

namespace crosskd {
namespace {

using testing::randn;

TEST(FitAlignment, IdentityWhenTargetsEqualInputs) {
  auto s = randn({40, 5}, 1);
  auto fit = fit_alignment(s, s);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 5; ++j) EXPECT_NEAR(fit.weights[i * 5 + j], i == j ? 1.0 : 0.0, 1e-6);
  EXPECT_LT(fit.residual, 1e-10);
}

TEST(FitAlignment, RecoversPlantedMap) {
  auto s = randn({60, 6}, 2);
  auto w0 = randn({6, 4}, 3);
  auto fit = fit_alignment(s, matmul(s, w0));
  EXPECT_EQ(fit.in_dim, 6u);
  EXPECT_EQ(fit.out_dim, 4u);
  for (std::size_t i = 0; i < 24; ++i) EXPECT_NEAR(fit.weights[i], w0.data()[i], 1e-6);
  auto row = fit.apply(std::vector<double>(s.data().begin(), s.data().begin() + 6));
  for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(row[j], matmul(s, w0).at({0, j}), 1e-6);
}

TEST(FitAlignment, ErrorPaths) {
  EXPECT_THROW(fit_alignment(randn({3, 5}, 1), randn({3, 2}, 2)), ConfigError);
  EXPECT_THROW(fit_alignment(randn({4, 2}, 1), randn({5, 2}, 2)), DimensionError);
  // a zero column leaves the system singular once the ridge is removed
  std::vector<double> v(20 * 3, 0.0);
  RngStream rng(1, "x");
  for (std::size_t r = 0; r < 20; ++r) v[r * 3] = rng.normal(), v[r * 3 + 1] = rng.normal();
  EXPECT_THROW(fit_alignment(Tensor::from({20, 3}, v), randn({20, 2}, 2), 0.0), NumericError);
  EXPECT_NO_THROW(fit_alignment(Tensor::from({20, 3}, v), randn({20, 2}, 2), 1e-6));
}

TEST(FitAlignment, ResidualShrinksWithRidge) {
  auto s = randn({30, 4}, 4);
  auto t = randn({30, 3}, 5);
  double prev = fit_alignment(s, t, 10.0).residual;
  for (double ridge : {1.0, 1e-2, 1e-4, 1e-6}) {
    const double r = fit_alignment(s, t, ridge).residual;
    EXPECT_LE(r, prev + 1e-12);
    prev = r;
  }
}

TEST(Cosine, Properties) {
  std::vector<double> v{1, -2, 3}, w{2, -4, 6}, n{-1, 2, -3};
  EXPECT_NEAR(cosine(v, w), 1.0, 1e-15);
  EXPECT_NEAR(cosine(v, n), -1.0, 1e-15);
  EXPECT_NEAR(cosine(std::vector<double>{1, 0}, std::vector<double>{0, 1}), 0.0, 1e-15);
  EXPECT_THROW(cosine(v, std::vector<double>{0, 0, 0}), NumericError);
}

TEST(Transferability, SelfPairIsOne) {
  auto t = randn({50, 8}, 1);
  auto rep = transferability_from_features(t, t);
  EXPECT_NEAR(rep.mean_cosine, 1.0, 1e-9);
  EXPECT_EQ(rep.fit_samples, 40u);
  EXPECT_EQ(rep.samples, 10u);
}

TEST(Transferability, InvariantUnderInvertibleStudentMap) {
  auto s = randn({80, 5}, 2);
  auto t = add(matmul(s, randn({5, 7}, 3)), scale(randn({80, 7}, 4), 0.3));
  auto a = randn({5, 5}, 5);
  a = add(a, Tensor::from({5, 5}, {3, 0, 0, 0, 0, 0, 3, 0, 0, 0, 0, 0, 3, 0, 0, 0, 0, 0, 3, 0, 0, 0, 0, 0, 3}));
  auto base = transferability_from_features(s, t);
  auto mapped = transferability_from_features(matmul(s, a), t);
  EXPECT_NEAR(base.mean_cosine, mapped.mean_cosine, 1e-6);
  EXPECT_NEAR(base.alignment_residual, mapped.alignment_residual, 1e-6);
}

TEST(Transferability, ZeroNormRowsAreExcluded) {
  auto s = randn({20, 2}, 1);
  std::vector<double> tv = randn({20, 2}, 2).values();
  tv[18 * 2] = tv[18 * 2 + 1] = 0.0;
  auto rep = transferability_from_features(s, Tensor::from({20, 2}, tv));
  EXPECT_EQ(rep.excluded, 1u);
  EXPECT_EQ(rep.samples, 3u);
  auto j = rep.to_json();
  EXPECT_EQ(j["samples"], 3);
}

TEST(Transferability, ModelPairUsesPooledEmbeddings) {
  RngStream ti(0, "init/teacher"), si(0, "init/student");
  Teacher teacher(ModelSpec::teacher_default(), ti);
  Student student(ModelSpec::student_default(), si);
  auto data = synth_dataset(1, 4, 15, 32, 32, "val");
  auto x = data.images(std::vector<std::size_t>{0, 1});
  EXPECT_EQ(student_embedding(student, x).shape(), (Shape{2, 32}));
  EXPECT_EQ(teacher_embedding(teacher, x).shape(), (Shape{2, 32}));
  auto rep = transferability(student, teacher, data, "s", "t");
  EXPECT_EQ(rep.samples + rep.excluded, 12u);
  EXPECT_GE(rep.mean_cosine, -1.0);
  EXPECT_LE(rep.mean_cosine, 1.0);
  EXPECT_EQ(rep.student_id, "s");
}

TEST(Accuracy, TopKAndTies) {
  auto logits = Tensor::from({3, 6}, {0, 5, 1, 1, 1, 1,  //
                                      9, 9, 0, 0, 0, 0,  //
                                      6, 5, 4, 3, 2, 1});
  std::vector<int> y{1, 1, 5};
  auto acc = accuracy_from_logits(logits, y);
  EXPECT_NEAR(acc.top1, 1.0 / 3, 1e-15);  // the tie in row 1 goes to class 0
  EXPECT_NEAR(acc.top5, 2.0 / 3, 1e-15);
  EXPECT_FALSE(acc.top5_degenerate);
  EXPECT_EQ(acc.count, 3u);
}

TEST(Accuracy, FewClassesMakeTopFiveDegenerate) {
  auto acc = accuracy_from_logits(Tensor::from({2, 2}, {1, 0, 1, 0}), std::vector<int>{0, 1});
  EXPECT_DOUBLE_EQ(acc.top1, 0.5);
  EXPECT_DOUBLE_EQ(acc.top5, 1.0);
  EXPECT_TRUE(acc.top5_degenerate);
  EXPECT_TRUE(acc.to_json()["top5_degenerate"].get<bool>());
}

TEST(Evaluate, EmptyDatasetIsError) {
  RngStream si(0, "init/student");
  Student student(ModelSpec::student_default(), si);
  Dataset empty;
  empty.height = empty.width = 32;
  empty.classes = 4;
  EXPECT_THROW(evaluate(student, empty), DataError);
}

TEST(NoisyView, FixedAndOutsideTrainingRanges) {
  auto data = synth_dataset(1, 4, 2, 32, 32, "val");
  std::vector<std::size_t> idx{0, 3, 5};
  auto x = data.images(idx);
  NoisyEvalConfig cfg;
  auto a = noisy_view(x, idx, cfg, 7);
  EXPECT_EQ(a.values(), noisy_view(x, idx, cfg, 7).values());
  EXPECT_NE(a.values(), x.values());
  // the view of a sample depends on its index, not its batch position
  std::vector<std::size_t> one{3};
  auto single = noisy_view(data.images(one), one, cfg, 7);
  const std::size_t per = 3 * 32 * 32;
  for (std::size_t i = 0; i < per; ++i) ASSERT_EQ(single.data()[i], a.data()[per + i]);
  MvgConfig train;
  EXPECT_GT(cfg.rotation_min, train.rotation_degrees);
  EXPECT_GT(cfg.jitter_strength, train.jitter_strength);
}

}  // namespace
}  // namespace crosskd
