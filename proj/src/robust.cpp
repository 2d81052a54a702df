#include "crosskd/robust.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "crosskd/errors.hpp"

namespace crosskd {

std::string to_string(Transform t) {
  switch (t) {
    case Transform::ColorJitter: return "color-jitter";
    case Transform::RandomCrop: return "random-crop";
    case Transform::Rotation: return "rotation";
    case Transform::PatchMask: return "patch-mask";
  }
  return "?";
}

Transform transform_from_string(const std::string& s) {
  if (s == "color-jitter") return Transform::ColorJitter;
  if (s == "random-crop") return Transform::RandomCrop;
  if (s == "rotation") return Transform::Rotation;
  if (s == "patch-mask") return Transform::PatchMask;
  throw ConfigError("unknown transform '" + s + "'");
}

void MvgConfig::validate() const {
  if (threshold < 0.0) throw ConfigError("mvg threshold must be non-negative");
  if (enabled && transforms.empty() && threshold < 1.0) {
    throw ConfigError("mvg: no transforms enabled but the threshold lets samples be transformed");
  }
  if (jitter_strength < 0.0 || jitter_strength >= 1.0) throw ConfigError("mvg: jitter strength must lie in [0, 1)");
  if (crop_min_scale <= 0.0 || crop_min_scale > 1.0) throw ConfigError("mvg: crop scale must lie in (0, 1]");
  if (rotation_degrees < 0.0) throw ConfigError("mvg: rotation range must be non-negative");
}

namespace {

void clamp01(std::span<double> image) {
  for (auto& v : image) v = std::clamp(v, 0.0, 1.0);
}

double bilinear(const std::vector<double>& plane, std::size_t h, std::size_t w, double y, double x) {
  // Samples outside the image read as zero.
  const double fy = std::floor(y), fx = std::floor(x);
  const auto y0 = static_cast<long>(fy), x0 = static_cast<long>(fx);
  const double ty = y - fy, tx = x - fx;
  auto at = [&](long yy, long xx) {
    if (yy < 0 || xx < 0 || yy >= static_cast<long>(h) || xx >= static_cast<long>(w)) return 0.0;
    return plane[static_cast<std::size_t>(yy) * w + static_cast<std::size_t>(xx)];
  };
  return (1 - ty) * ((1 - tx) * at(y0, x0) + tx * at(y0, x0 + 1)) +
         ty * ((1 - tx) * at(y0 + 1, x0) + tx * at(y0 + 1, x0 + 1));
}

}  // namespace

void color_jitter(std::span<double> image, std::size_t channels, std::size_t h, std::size_t w,
                  double brightness, double contrast, double saturation) {
  const std::size_t hw = h * w;
  for (auto& v : image) v *= brightness;
  clamp01(image);
  std::vector<double> gray(hw, 0.0);
  for (std::size_t i = 0; i < hw; ++i) {
    for (std::size_t c = 0; c < channels; ++c) gray[i] += image[c * hw + i];
    gray[i] /= static_cast<double>(channels);
  }
  double mean_gray = 0.0;
  for (double g : gray) mean_gray += g;
  mean_gray /= static_cast<double>(hw);
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t i = 0; i < hw; ++i) {
      double& v = image[c * hw + i];
      v = (v - mean_gray) * contrast + mean_gray;
      const double g = (gray[i] - mean_gray) * contrast + mean_gray;
      v = g + (v - g) * saturation;
    }
  }
  clamp01(image);
}

void crop_resize(std::span<double> image, std::size_t channels, std::size_t h, std::size_t w,
                 std::size_t top, std::size_t left, std::size_t crop_h, std::size_t crop_w) {
  if (crop_h == 0 || crop_w == 0 || top + crop_h > h || left + crop_w > w) {
    throw ConfigError("crop window outside the image");
  }
  const std::size_t hw = h * w;
  std::vector<double> plane(hw);
  for (std::size_t c = 0; c < channels; ++c) {
    std::copy_n(image.data() + c * hw, hw, plane.data());
    for (std::size_t y = 0; y < h; ++y) {
      // Pixel-centre mapping; clamped so the sample stays inside the crop.
      const double sy = std::clamp((y + 0.5) * static_cast<double>(crop_h) / static_cast<double>(h) - 0.5, 0.0,
                                   static_cast<double>(crop_h - 1)) + static_cast<double>(top);
      for (std::size_t x = 0; x < w; ++x) {
        const double sx = std::clamp((x + 0.5) * static_cast<double>(crop_w) / static_cast<double>(w) - 0.5, 0.0,
                                     static_cast<double>(crop_w - 1)) + static_cast<double>(left);
        image[c * hw + y * w + x] = bilinear(plane, h, w, sy, sx);
      }
    }
  }
  clamp01(image);
}

void rotate(std::span<double> image, std::size_t channels, std::size_t h, std::size_t w, double degrees) {
  const double rad = degrees * std::numbers::pi / 180.0;
  const double cs = std::cos(rad), sn = std::sin(rad);
  const double cy = (static_cast<double>(h) - 1) / 2, cx = (static_cast<double>(w) - 1) / 2;
  const std::size_t hw = h * w;
  std::vector<double> plane(hw);
  for (std::size_t c = 0; c < channels; ++c) {
    std::copy_n(image.data() + c * hw, hw, plane.data());
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        // Inverse map: output pixel -> source location.
        const double dy = static_cast<double>(y) - cy, dx = static_cast<double>(x) - cx;
        const double sx = cs * dx + sn * dy + cx;
        const double sy = -sn * dx + cs * dy + cy;
        image[c * hw + y * w + x] = bilinear(plane, h, w, sy, sx);
      }
    }
  }
  clamp01(image);
}

void patch_mask(std::span<double> image, std::size_t channels, std::size_t h, std::size_t w,
                std::size_t top, std::size_t left, std::size_t size) {
  const std::size_t hw = h * w;
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t y = top; y < std::min(h, top + size); ++y) {
      for (std::size_t x = left; x < std::min(w, left + size); ++x) image[c * hw + y * w + x] = 0.0;
    }
  }
}

AugmentRecord mvg_sample(std::span<double> image, std::size_t channels, std::size_t h, std::size_t w,
                         const MvgConfig& cfg, double p, RngStream& rng) {
  AugmentRecord rec;
  if (!cfg.enabled || p < cfg.threshold || cfg.transforms.empty()) return rec;
  rec.applied = true;
  rec.transform = cfg.transforms[rng.below(cfg.transforms.size())];
  switch (rec.transform) {
    case Transform::ColorJitter: {
      const double s = cfg.jitter_strength;
      const double b = rng.uniform(1 - s, 1 + s), c = rng.uniform(1 - s, 1 + s), sat = rng.uniform(1 - s, 1 + s);
      color_jitter(image, channels, h, w, b, c, sat);
      rec.params = {b, c, sat};
      break;
    }
    case Transform::RandomCrop: {
      const double area = rng.uniform(cfg.crop_min_scale, 1.0);
      const double side = std::sqrt(area);
      const auto ch = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(side * static_cast<double>(h))), 1, h);
      const auto cw = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(side * static_cast<double>(w))), 1, w);
      const auto top = rng.below(h - ch + 1), left = rng.below(w - cw + 1);
      crop_resize(image, channels, h, w, top, left, ch, cw);
      rec.params = {static_cast<double>(top), static_cast<double>(left), static_cast<double>(ch),
                    static_cast<double>(cw)};
      break;
    }
    case Transform::Rotation: {
      const double deg = rng.uniform(-cfg.rotation_degrees, cfg.rotation_degrees);
      rotate(image, channels, h, w, deg);
      rec.params = {deg};
      break;
    }
    case Transform::PatchMask: {
      const std::size_t size = std::min({cfg.mask_size, h, w});
      for (std::size_t m = 0; m < cfg.mask_count && size > 0; ++m) {
        const auto top = rng.below(h - size + 1), left = rng.below(w - size + 1);
        patch_mask(image, channels, h, w, top, left, size);
        rec.params.push_back(static_cast<double>(top));
        rec.params.push_back(static_cast<double>(left));
      }
      break;
    }
  }
  return rec;
}

Tensor mvg(const Tensor& images, const MvgConfig& cfg, RngStream& rng, std::vector<AugmentRecord>* log) {
  cfg.validate();
  if (images.ndim() != 4) throw DimensionError("mvg expects [B,C,H,W], got " + shape_str(images.shape()));
  const std::size_t B = images.dim(0), C = images.dim(1), H = images.dim(2), W = images.dim(3);
  std::vector<double> out = images.values();
  const std::size_t per = C * H * W;
  for (std::size_t b = 0; b < B; ++b) {
    const double p = rng.uniform();
    auto rec = mvg_sample(std::span<double>(out.data() + b * per, per), C, H, W, cfg, p, rng);
    if (log) log->push_back(std::move(rec));
  }
  return Tensor::from(images.shape(), std::move(out));
}

// --- discriminator ----------------------------------------------------------------

Discriminator::Discriminator(std::size_t tokens, std::size_t token_dim, std::size_t hidden, RngStream& init)
    : input_dim_(tokens * token_dim) {
  layers_.emplace_back(input_dim_, hidden, init);
  layers_.emplace_back(hidden, hidden, init);
  layers_.emplace_back(hidden, 1, init);
}

Tensor Discriminator::forward(const Tensor& features, bool detach_params) const {
  if (features.ndim() < 2 || features.size() != features.dim(0) * input_dim_) {
    throw DimensionError("discriminator expects " + std::to_string(input_dim_) + " features per sample, got " +
                         shape_str(features.shape()));
  }
  const std::size_t B = features.dim(0);
  auto z = reshape(features, {B, input_dim_});
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const auto& l = layers_[i];
    z = detach_params ? linear(z, l.weight.detach(), l.bias.detach()) : l(z);
    if (i + 1 < layers_.size()) z = leaky_relu(z, kLeakySlope);
  }
  return reshape(sigmoid(z), {B});
}

NamedTensors Discriminator::parameters() const {
  NamedTensors out;
  for (std::size_t i = 0; i < layers_.size(); ++i) layers_[i].collect("disc.fc" + std::to_string(i), out);
  return out;
}

Tensor loss_mad_from_probs(const Tensor& prob_teacher, const Tensor& prob_student) {
  if (prob_teacher.size() != prob_student.size()) {
    throw DimensionError("loss_mad: batch sizes " + std::to_string(prob_teacher.size()) + " and " +
                         std::to_string(prob_student.size()) + " differ");
  }
  const auto real = log_clamped(prob_teacher, kLogFloor);
  const auto fake = log_clamped(add_scalar(neg(prob_student), 1.0), kLogFloor);
  return neg(mean(add(real, fake)));
}

Tensor loss_mvg_from_probs(const Tensor& prob_student, bool non_saturating) {
  if (non_saturating) return neg(mean(log_clamped(prob_student, kLogFloor)));
  return mean(log_clamped(add_scalar(neg(prob_student), 1.0), kLogFloor));
}

Tensor loss_mad(const Discriminator& disc, const Tensor& features_t, const Tensor& projected_s) {
  if (features_t.shape() != projected_s.shape()) {
    throw DimensionError("loss_mad: feature batches " + shape_str(features_t.shape()) + " and " +
                         shape_str(projected_s.shape()) + " differ");
  }
  return loss_mad_from_probs(disc.forward(features_t.detach()), disc.forward(projected_s.detach()));
}

Tensor loss_mvg(const Discriminator& disc, const Tensor& projected_s, bool non_saturating) {
  return loss_mvg_from_probs(disc.forward(projected_s, true), non_saturating);
}

}  // namespace crosskd
