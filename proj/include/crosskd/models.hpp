#pragma once

// Toy ViT teacher and toy CNN student. Both expose the intermediate tensors
// the distillation losses consume, not just logits.

#include "json.hpp"
#include <string>
#include <vector>

#include "crosskd/nn.hpp"
#include "crosskd/tensor.hpp"

namespace crosskd {

enum class ModelKind { Teacher, Student };

std::string to_string(ModelKind kind);
ModelKind model_kind_from_string(const std::string& s);

struct ModelSpec {
  ModelKind kind = ModelKind::Student;
  std::size_t image_size = 32;  // square inputs
  std::size_t in_channels = 3;
  std::size_t classes = 4;

  // Teacher: transformer blocks. Student: convs per stage.
  std::size_t depth = 2;
  // Teacher: embedding dim D_T. Student: stem channel count (doubles per stage).
  std::size_t width = 32;
  std::size_t heads = 4;
  std::size_t patch = 8;
  std::size_t mlp_ratio = 2;
  std::size_t stages = 2;
  std::size_t hint_layer = 1;

  /// Throws ConfigError on violated invariants.
  void validate() const;

  // Derived geometry.
  std::size_t tokens() const;          // teacher N
  std::size_t head_dim() const;        // teacher d
  std::size_t feature_channels() const;  // student c
  std::size_t feature_grid() const;      // student h' (= w')

  static ModelSpec teacher_default();
  static ModelSpec student_default();
};

void to_json(nlohmann::json& j, const ModelSpec& s);
void from_json(const nlohmann::json& j, ModelSpec& s);

/// Patch geometry of an H×W image cut into h×w patches.
struct PatchGrid {
  std::size_t image_h, image_w, patch_h, patch_w, tokens;
  std::size_t rows() const { return image_h / patch_h; }
  std::size_t cols() const { return image_w / patch_w; }
};

PatchGrid make_patch_grid(std::size_t image_h, std::size_t image_w, std::size_t patch_h,
                          std::size_t patch_w);

struct TeacherBundle {
  Tensor features;  // h_T      [B, N, D_T]
  Tensor query;     // Q_T      [B, N, d], head-averaged, hint block
  Tensor key;       // K_T
  Tensor value;     // V_T
  Tensor attn;      // Attn_T = softmax(Q Kᵀ/√d) V
  Tensor logits;    // [B, classes]
};

struct StudentBundle {
  Tensor features;  // h_S  [B, c, h', w']
  Tensor pooled;    // global average of h_S, [B, c]
  Tensor logits;    // [B, classes]
};

class Teacher {
 public:
  Teacher(ModelSpec spec, RngStream& init);

  TeacherBundle forward(const Tensor& images) const;

  NamedTensors parameters() const;
  /// Excludes every teacher parameter from differentiation and optimization.
  void freeze();
  bool frozen() const { return frozen_; }

  const ModelSpec& spec() const { return spec_; }
  PatchGrid grid() const;

 private:
  struct Block {
    LayerNorm ln1, ln2;
    Linear qkv, proj, fc1, fc2;
  };

  ModelSpec spec_;
  Linear patch_embed_;
  Tensor cls_token_;  // [1, 1, D]
  Tensor pos_embed_;  // [N + 1, D]
  std::vector<Block> blocks_;
  LayerNorm ln_final_;
  Linear head_;
  bool frozen_ = false;
};

class Student {
 public:
  Student(ModelSpec spec, RngStream& init);

  /// Train mode uses batch statistics and updates the running estimates.
  StudentBundle forward(const Tensor& images, bool train);

  NamedTensors parameters() const;
  NamedBuffers buffers();
  const ModelSpec& spec() const { return spec_; }

 private:
  struct Unit {
    Conv2d conv;
    BatchNorm2d bn;
  };

  ModelSpec spec_;
  Unit stem_;
  std::vector<Unit> units_;
  Linear head_;
};

}  // namespace crosskd
