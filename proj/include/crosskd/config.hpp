#pragma once

// RunConfig and its declarative text form: a TOML subset with [sections],
// `key = value` lines, numbers, booleans, quoted strings and flat arrays.
// Every field has a dotted key (e.g. "train.lambda") usable as a
// `--set key=value` override.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "crosskd/models.hpp"
#include "crosskd/robust.hpp"

namespace crosskd {

enum class Mode { CrossArch, LogitsBaseline, StudentOnly, TeacherPretrain };

std::string to_string(Mode m);
Mode mode_from_string(const std::string& s);

struct DataConfig {
  std::string source = "synthetic";  // or "directory"
  std::string path;                  // directory source: <path>/train and <path>/val
  std::size_t classes = 4;
  std::size_t per_class = 60;
  std::size_t val_per_class = 40;
  std::size_t teacher_per_class = 250;
  std::size_t image_size = 32;
};

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 64;
  double lr = 0.05;
  std::vector<std::size_t> milestones{15, 23};
  double lr_gamma = 0.1;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  double lambda = 0.1;
  double ce_weight = 1.0;
  std::size_t disc_period = 5;
  double disc_lr = 0.01;
  std::size_t disc_hidden = 256;
  double gl_dropout = 0.1;
  double replace_threshold = 0.5;
  bool gram_relation = true;
  bool non_saturating = false;
  bool ce_on_transformed = true;
  double kd_temperature = 4.0;
  double kd_alpha = 0.9;
  std::size_t eval_every = 1;
  double teacher_lr = 1e-3;  // AdamW, teacher pretraining only
  double teacher_weight_decay = 0.05;
};

struct NoisyEvalConfig {
  double rotation_min = 20.0;
  double rotation_max = 35.0;
  double jitter_strength = 0.4;
};

struct RunConfig {
  std::uint64_t seed = 0;
  Mode mode = Mode::CrossArch;
  std::string out = "runs/default";
  std::string teacher_checkpoint;
  bool log_augment = false;
  DataConfig data;
  ModelSpec teacher = ModelSpec::teacher_default();
  ModelSpec student = ModelSpec::student_default();
  TrainConfig train;
  MvgConfig mvg;
  NoisyEvalConfig noisy;

  /// Propagates shared geometry into the model specs and checks invariants.
  void finalize();

  /// Applies one dotted-key assignment; the value uses config-file syntax,
  /// but bare words are accepted as strings.
  void set(const std::string& key, const std::string& value);

  std::string to_toml() const;
  static RunConfig from_toml(const std::string& text);
  static RunConfig load(const std::filesystem::path& path);

  /// All recognised dotted keys, in serialization order.
  static std::vector<std::string> keys();
};

}  // namespace crosskd
