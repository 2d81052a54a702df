#pragma once

// Cross-view robust training: a stochastic multi-view generator over input
// images, and an adversarial discriminator on teacher vs projected-student
// token features.

#include <string>
#include <vector>

#include "crosskd/nn.hpp"
#include "crosskd/rng.hpp"
#include "crosskd/tensor.hpp"

namespace crosskd {

enum class Transform { ColorJitter, RandomCrop, Rotation, PatchMask };

std::string to_string(Transform t);
Transform transform_from_string(const std::string& s);

struct MvgConfig {
  bool enabled = true;
  double threshold = 0.5;  // a sample is transformed iff p >= threshold, p ~ U[0,1)
  std::vector<Transform> transforms{Transform::ColorJitter, Transform::RandomCrop, Transform::Rotation,
                                    Transform::PatchMask};
  double jitter_strength = 0.2;  // brightness/contrast/saturation factors in [1-s, 1+s]
  double crop_min_scale = 0.8;   // kept area fraction in [min, 1]
  double rotation_degrees = 10.0;
  std::size_t mask_count = 1;
  std::size_t mask_size = 8;

  void validate() const;
};

struct AugmentRecord {
  bool applied = false;
  Transform transform = Transform::ColorJitter;
  std::vector<double> params;
};

// Single-image primitives on a [C, H, W] buffer in [0, 1]. All preserve the
// shape and clamp the result to [0, 1].
void color_jitter(std::span<double> image, std::size_t channels, std::size_t h, std::size_t w,
                  double brightness, double contrast, double saturation);
void crop_resize(std::span<double> image, std::size_t channels, std::size_t h, std::size_t w,
                 std::size_t top, std::size_t left, std::size_t crop_h, std::size_t crop_w);
/// Rotation about the image centre with bilinear sampling; exposed corners are zero.
void rotate(std::span<double> image, std::size_t channels, std::size_t h, std::size_t w, double degrees);
void patch_mask(std::span<double> image, std::size_t channels, std::size_t h, std::size_t w,
                std::size_t top, std::size_t left, std::size_t size);

/// Transforms one [C, H, W] image in place with the given draw p, recording what happened.
AugmentRecord mvg_sample(std::span<double> image, std::size_t channels, std::size_t h, std::size_t w,
                         const MvgConfig& cfg, double p, RngStream& rng);

/// Applies mvg_sample to every image of a [B, C, H, W] batch. Returns a new
/// leaf tensor; the identity branch copies bits unchanged.
Tensor mvg(const Tensor& images, const MvgConfig& cfg, RngStream& rng,
           std::vector<AugmentRecord>* log = nullptr);

class Discriminator {
 public:
  static constexpr std::size_t kDefaultHidden = 256;
  static constexpr double kLeakySlope = 0.2;

  Discriminator(std::size_t tokens, std::size_t token_dim, std::size_t hidden, RngStream& init);

  /// [B, N, D] -> [B] probabilities that the features came from the teacher.
  /// With detach_params the discriminator acts as a fixed function: gradients
  /// reach the features but not its own weights.
  Tensor forward(const Tensor& features, bool detach_params = false) const;

  NamedTensors parameters() const;
  std::vector<Linear>& layers() { return layers_; }

 private:
  std::size_t input_dim_;
  std::vector<Linear> layers_;
};

inline constexpr double kLogFloor = 1e-12;

/// (1/m)·Σ[-log p_t - log(1 - p_s)] on discriminator outputs.
Tensor loss_mad_from_probs(const Tensor& prob_teacher, const Tensor& prob_student);
/// (1/m)·Σ log(1 - p_s), or (1/m)·Σ -log p_s when non_saturating.
Tensor loss_mvg_from_probs(const Tensor& prob_student, bool non_saturating = false);

/// Discriminator loss. Feature inputs are detached; only D receives gradients.
Tensor loss_mad(const Discriminator& disc, const Tensor& features_t, const Tensor& projected_s);
/// Generator-side loss. D's parameters are held fixed; gradients flow into
/// the student features.
Tensor loss_mvg(const Discriminator& disc, const Tensor& projected_s, bool non_saturating = false);

}  // namespace crosskd
