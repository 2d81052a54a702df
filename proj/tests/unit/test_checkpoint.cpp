#include <gtest/gtest.h>

#include <fstream>

#include "crosskd/checkpoint.hpp"
#include "crosskd/errors.hpp"
#include "crosskd/models.hpp"
#include "helpers.hpp"

namespace crosskd {
namespace {

Checkpoint student_checkpoint(std::uint64_t seed) {
  RngStream init(seed, "init/student");
  Student s(ModelSpec::student_default(), init);
  s.forward(testing::uniform01({2, 3, 32, 32}, seed), true);
  Checkpoint ck;
  ck.meta["kind"] = "student";
  ck.meta["student"] = s.spec();
  ck.add(s.parameters());
  ck.add(s.buffers());
  return ck;
}

TEST(Checkpoint, ByteStableForIdenticalContents) {
  const auto a = serialize(student_checkpoint(1));
  EXPECT_EQ(a, serialize(student_checkpoint(1)));
  EXPECT_NE(a, serialize(student_checkpoint(2)));
  EXPECT_EQ(a.substr(0, 7), "XKDCKPT");
  EXPECT_EQ(serialize(deserialize(a)), a);
}

TEST(Checkpoint, MetadataKeyOrderDoesNotMatter) {
  Checkpoint a, b;
  a.meta["x"] = 1;
  a.meta["y"] = 2;
  b.meta["y"] = 2;
  b.meta["x"] = 1;
  EXPECT_EQ(serialize(a), serialize(b));
}

TEST(Checkpoint, RestoreCopiesValuesExactly) {
  auto ck = student_checkpoint(3);
  RngStream init(99, "init/student");
  Student other(ModelSpec::student_default(), init);
  ck.restore(other.parameters());
  ck.restore(other.buffers());
  Checkpoint again;
  again.meta = ck.meta;
  again.add(other.parameters());
  again.add(other.buffers());
  EXPECT_EQ(serialize(again), serialize(ck));
}

TEST(Checkpoint, MissingOrMisshapedEntriesAreDataErrors) {
  auto ck = student_checkpoint(1);
  RngStream init(0, "init/student");
  Student s(ModelSpec::student_default(), init);
  auto broken = ck;
  broken.tensors.pop_back();
  EXPECT_THROW(broken.restore(s.buffers()), DataError);
  broken.tensors.erase(broken.tensors.begin());
  EXPECT_THROW(broken.restore(s.parameters()), DataError);
  broken = ck;
  broken.tensors.front().shape = {1};
  broken.tensors.front().values = {0.0};
  EXPECT_THROW(broken.restore(s.parameters()), DataError);
}

TEST(Checkpoint, CorruptBytesAreRejected) {
  const auto bytes = serialize(student_checkpoint(1));
  EXPECT_THROW(deserialize("not a checkpoint"), DataError);
  EXPECT_THROW(deserialize(bytes.substr(0, bytes.size() / 2)), DataError);
  auto bad_version = bytes;
  bad_version[8] = 99;
  EXPECT_THROW(deserialize(bad_version), DataError);
}

TEST(Checkpoint, AtomicSaveAndLoad) {
  auto dir = testing::temp_dir("ckpt");
  auto ck = student_checkpoint(4);
  save_checkpoint(dir / "a.ckpt", ck);
  EXPECT_EQ(serialize(load_checkpoint(dir / "a.ckpt")), serialize(ck));
  std::size_t files = 0;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    (void)e;
    ++files;
  }
  EXPECT_EQ(files, 1u);
  EXPECT_THROW(load_checkpoint(dir / "missing.ckpt"), IoError);
  EXPECT_THROW(save_checkpoint(dir / "no" / "such" / "dir" / "x.ckpt", ck), IoError);
}

}  // namespace
}  // namespace crosskd
