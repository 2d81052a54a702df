#include <gtest/gtest.h>

#include <cmath>

#include "crosskd/errors.hpp"
#include "crosskd/models.hpp"
#include "crosskd/projectors.hpp"
#include "helpers.hpp"

namespace crosskd {
namespace {

using testing::randn;
using testing::uniform01;

Tensor find(const NamedTensors& params, const std::string& name) {
  for (const auto& [n, t] : params)
    if (n == name) return t;
  ADD_FAILURE() << "missing parameter " << name;
  return {};
}

TEST(ModelSpec, ValidatesInvariants) {
  auto t = ModelSpec::teacher_default();
  t.heads = 3;
  EXPECT_THROW(t.validate(), ConfigError);
  t = ModelSpec::teacher_default();
  t.hint_layer = t.depth;
  EXPECT_THROW(t.validate(), ConfigError);
  t = ModelSpec::teacher_default();
  t.patch = 5;
  EXPECT_THROW(t.validate(), ConfigError);
  auto s = ModelSpec::student_default();
  s.image_size = 30;
  EXPECT_THROW(s.validate(), ConfigError);
}

TEST(PatchGrid, TokenCount) {
  EXPECT_EQ(make_patch_grid(32, 32, 8, 8).tokens, 16u);
  EXPECT_EQ(make_patch_grid(224, 224, 16, 16).tokens, 196u);
  EXPECT_THROW(make_patch_grid(32, 32, 7, 7), ConfigError);
}

TEST(Teacher, CanonicalShapes) {
  RngStream init(0, "init/teacher");
  Teacher teacher(ModelSpec::teacher_default(), init);
  auto out = teacher.forward(uniform01({2, 3, 32, 32}, 1));
  EXPECT_EQ(out.features.shape(), (Shape{2, 16, 32}));
  EXPECT_EQ(out.query.shape(), (Shape{2, 16, 8}));
  EXPECT_EQ(out.key.shape(), (Shape{2, 16, 8}));
  EXPECT_EQ(out.value.shape(), (Shape{2, 16, 8}));
  EXPECT_EQ(out.attn.shape(), (Shape{2, 16, 8}));
  EXPECT_EQ(out.logits.shape(), (Shape{2, 4}));
}

TEST(Teacher, LargeGeometryHas196Tokens) {
  auto spec = ModelSpec::teacher_default();
  spec.image_size = 224;
  spec.patch = 16;
  spec.depth = 1;
  spec.hint_layer = 0;
  RngStream init(0, "init/teacher");
  Teacher teacher(spec, init);
  auto out = teacher.forward(uniform01({1, 3, 224, 224}, 1));
  EXPECT_EQ(out.features.shape(), (Shape{1, 196, 32}));
}

TEST(Teacher, PatchMismatchIsConfigError) {
  RngStream init(0, "init/teacher");
  Teacher teacher(ModelSpec::teacher_default(), init);
  EXPECT_THROW(teacher.forward(uniform01({1, 3, 24, 24}, 1)), ConfigError);
}

TEST(Teacher, ZeroHeadGivesUniformSoftmax) {
  RngStream init(0, "init/teacher");
  Teacher teacher(ModelSpec::teacher_default(), init);
  auto params = teacher.parameters();
  for (auto& v : find(params, "teacher.head.weight").mutable_data()) v = 0.0;
  for (auto& v : find(params, "teacher.head.bias").mutable_data()) v = 0.0;
  auto p = softmax(teacher.forward(uniform01({3, 3, 32, 32}, 2)).logits, 1);
  for (double v : p.values()) EXPECT_NEAR(v, 0.25, 1e-15);
}

TEST(Teacher, AttentionRecomputableAndRowsSumToOne) {
  RngStream init(0, "init/teacher");
  Teacher teacher(ModelSpec::teacher_default(), init);
  auto out = teacher.forward(uniform01({2, 3, 32, 32}, 3));
  const double d = 8.0;
  auto weights = softmax(scale(bmm(out.query, transpose_last2(out.key)), 1.0 / std::sqrt(d)), 2);
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t i = 0; i < 16; ++i) {
      double total = 0.0;
      for (std::size_t j = 0; j < 16; ++j) total += weights.at({b, i, j});
      EXPECT_NEAR(total, 1.0, 1e-12);
    }
  auto again = bmm(weights, out.value);
  for (std::size_t i = 0; i < again.size(); ++i) EXPECT_NEAR(again.data()[i], out.attn.data()[i], 1e-10);
}

TEST(Teacher, FreezeRemovesGradients) {
  RngStream init(0, "init/teacher");
  Teacher teacher(ModelSpec::teacher_default(), init);
  teacher.freeze();
  EXPECT_TRUE(teacher.frozen());
  for (const auto& [name, t] : teacher.parameters()) EXPECT_FALSE(t.requires_grad()) << name;
  auto out = teacher.forward(uniform01({1, 3, 32, 32}, 4));
  EXPECT_FALSE(out.logits.requires_grad());
}

TEST(Teacher, ForwardIsBitwiseDeterministic) {
  RngStream a(5, "init/teacher"), b(5, "init/teacher");
  Teacher t1(ModelSpec::teacher_default(), a), t2(ModelSpec::teacher_default(), b);
  auto x = uniform01({2, 3, 32, 32}, 5);
  EXPECT_EQ(t1.forward(x).features.values(), t2.forward(x).features.values());
  EXPECT_EQ(checksum(t1.parameters()), checksum(t2.parameters()));
}

TEST(Student, CanonicalShapes) {
  RngStream init(0, "init/student");
  Student student(ModelSpec::student_default(), init);
  auto out = student.forward(uniform01({2, 3, 32, 32}, 1), true);
  EXPECT_EQ(out.features.shape(), (Shape{2, 32, 8, 8}));
  EXPECT_EQ(out.pooled.shape(), (Shape{2, 32}));
  EXPECT_EQ(out.logits.shape(), (Shape{2, 4}));
}

TEST(Student, LargeGeometryFeatureShape) {
  auto spec = ModelSpec::student_default();
  spec.image_size = 224;
  spec.stages = 4;
  spec.width = 16;
  RngStream init(0, "init/student");
  Student student(spec, init);
  auto out = student.forward(uniform01({1, 3, 224, 224}, 1), false);
  EXPECT_EQ(out.features.dim(1), 256u);
  EXPECT_EQ(out.features.dim(2) * out.features.dim(3), 196u);
}

TEST(Student, IndivisibleInputIsConfigError) {
  RngStream init(0, "init/student");
  Student student(ModelSpec::student_default(), init);
  EXPECT_THROW(student.forward(uniform01({1, 3, 30, 30}, 1), false), ConfigError);
}

TEST(Student, BatchingAndPermutationEquivariance) {
  RngStream init(0, "init/student");
  Student student(ModelSpec::student_default(), init);
  auto x = uniform01({2, 3, 32, 32}, 6);
  auto y = student.forward(x, false).logits;
  auto doubled = student.forward(concat({x, x}, 0), false).logits;
  EXPECT_EQ(doubled.shape(), (Shape{4, 4}));
  auto swapped = student.forward(concat({narrow(x, 0, 1, 1), narrow(x, 0, 0, 1)}, 0), false).logits;
  for (std::size_t c = 0; c < 4; ++c) {
    EXPECT_NEAR(swapped.at({0, c}), y.at({1, c}), 1e-12);
    EXPECT_NEAR(swapped.at({1, c}), y.at({0, c}), 1e-12);
    EXPECT_NEAR(doubled.at({2, c}), y.at({0, c}), 1e-12);
  }
}

TEST(Student, TrainModeUpdatesRunningStatistics) {
  RngStream init(0, "init/student");
  Student student(ModelSpec::student_default(), init);
  auto before = *student.buffers().front().values;
  student.forward(uniform01({2, 3, 32, 32}, 7), true);
  EXPECT_NE(*student.buffers().front().values, before);
  auto frozen = *student.buffers().front().values;
  student.forward(uniform01({2, 3, 32, 32}, 8), false);
  EXPECT_EQ(*student.buffers().front().values, frozen);
}

}  // namespace
}  // namespace crosskd
