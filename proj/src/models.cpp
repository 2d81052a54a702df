#include "crosskd/models.hpp"

#include <cmath>

#include "crosskd/errors.hpp"
#include "crosskd/projectors.hpp"

namespace crosskd {

std::string to_string(ModelKind kind) { return kind == ModelKind::Teacher ? "teacher" : "student"; }

ModelKind model_kind_from_string(const std::string& s) {
  if (s == "teacher") return ModelKind::Teacher;
  if (s == "student") return ModelKind::Student;
  throw ConfigError("unknown model kind '" + s + "'");
}

void ModelSpec::validate() const {
  if (classes < 2) throw ConfigError("model needs at least 2 classes");
  if (image_size == 0 || in_channels == 0 || width == 0 || depth == 0) {
    throw ConfigError("model dimensions must be positive");
  }
  if (kind == ModelKind::Teacher) {
    if (heads == 0 || width % heads != 0) {
      throw ConfigError("teacher width " + std::to_string(width) + " is not divisible by " +
                        std::to_string(heads) + " heads");
    }
    if (hint_layer >= depth) throw ConfigError("hint layer index must be < depth");
    make_patch_grid(image_size, image_size, patch, patch);
  } else {
    if (stages == 0) throw ConfigError("student needs at least one stage");
    const std::size_t factor = std::size_t{1} << stages;
    if (image_size % factor != 0) {
      throw ConfigError("image size " + std::to_string(image_size) + " is not divisible by 2^" +
                        std::to_string(stages));
    }
  }
}

std::size_t ModelSpec::tokens() const { return make_patch_grid(image_size, image_size, patch, patch).tokens; }
std::size_t ModelSpec::head_dim() const { return width / heads; }
std::size_t ModelSpec::feature_channels() const { return width << stages; }
std::size_t ModelSpec::feature_grid() const { return image_size >> stages; }

ModelSpec ModelSpec::teacher_default() {
  ModelSpec s;
  s.kind = ModelKind::Teacher;
  s.depth = 2;
  s.width = 32;
  s.heads = 4;
  s.patch = 8;
  s.hint_layer = 1;
  return s;
}

ModelSpec ModelSpec::student_default() {
  ModelSpec s;
  s.kind = ModelKind::Student;
  s.depth = 1;
  s.width = 8;
  s.stages = 2;
  return s;
}

void to_json(nlohmann::json& j, const ModelSpec& s) {
  j = nlohmann::json{{"kind", to_string(s.kind)},   {"image_size", s.image_size},
                     {"in_channels", s.in_channels}, {"classes", s.classes},
                     {"depth", s.depth},             {"width", s.width},
                     {"heads", s.heads},             {"patch", s.patch},
                     {"mlp_ratio", s.mlp_ratio},     {"stages", s.stages},
                     {"hint_layer", s.hint_layer}};
}

void from_json(const nlohmann::json& j, ModelSpec& s) {
  s.kind = model_kind_from_string(j.at("kind").get<std::string>());
  j.at("image_size").get_to(s.image_size);
  j.at("in_channels").get_to(s.in_channels);
  j.at("classes").get_to(s.classes);
  j.at("depth").get_to(s.depth);
  j.at("width").get_to(s.width);
  j.at("heads").get_to(s.heads);
  j.at("patch").get_to(s.patch);
  j.at("mlp_ratio").get_to(s.mlp_ratio);
  j.at("stages").get_to(s.stages);
  j.at("hint_layer").get_to(s.hint_layer);
}

PatchGrid make_patch_grid(std::size_t image_h, std::size_t image_w, std::size_t patch_h,
                          std::size_t patch_w) {
  if (patch_h == 0 || patch_w == 0 || image_h % patch_h != 0 || image_w % patch_w != 0) {
    throw ConfigError("image " + std::to_string(image_h) + "x" + std::to_string(image_w) +
                      " cannot be tiled by " + std::to_string(patch_h) + "x" + std::to_string(patch_w) +
                      " patches");
  }
  return {image_h, image_w, patch_h, patch_w, (image_h * image_w) / (patch_h * patch_w)};
}

// --- teacher -------------------------------------------------------------------

Teacher::Teacher(ModelSpec spec, RngStream& init) : spec_(std::move(spec)) {
  spec_.validate();
  if (spec_.kind != ModelKind::Teacher) throw ConfigError("Teacher built from a student spec");
  const std::size_t D = spec_.width;
  const std::size_t N = spec_.tokens();
  const std::size_t patch_dim = spec_.in_channels * spec_.patch * spec_.patch;
  const auto tn = InitScheme::TruncatedNormal;
  patch_embed_ = Linear(patch_dim, D, init, tn);
  cls_token_ = init_truncated_normal({1, 1, D}, 0.02, init);
  pos_embed_ = init_truncated_normal({N + 1, D}, 0.02, init);
  for (std::size_t l = 0; l < spec_.depth; ++l) {
    blocks_.push_back(Block{LayerNorm(D), LayerNorm(D), Linear(D, 3 * D, init, tn), Linear(D, D, init, tn),
                            Linear(D, spec_.mlp_ratio * D, init, tn), Linear(spec_.mlp_ratio * D, D, init, tn)});
  }
  ln_final_ = LayerNorm(D);
  head_ = Linear(D, spec_.classes, init, tn);
}

PatchGrid Teacher::grid() const {
  return make_patch_grid(spec_.image_size, spec_.image_size, spec_.patch, spec_.patch);
}

TeacherBundle Teacher::forward(const Tensor& images) const {
  if (images.ndim() != 4 || images.dim(1) != spec_.in_channels || images.dim(2) != spec_.image_size ||
      images.dim(3) != spec_.image_size) {
    throw ConfigError("teacher expects [B," + std::to_string(spec_.in_channels) + "," +
                      std::to_string(spec_.image_size) + "," + std::to_string(spec_.image_size) +
                      "] images, got " + shape_str(images.shape()));
  }
  const std::size_t B = images.dim(0), D = spec_.width, H = spec_.heads, dh = spec_.head_dim();
  const std::size_t N = spec_.tokens(), T = N + 1;

  auto z = concat({repeat_leading(cls_token_, B), patch_embed_(patchify(images, spec_.patch))}, 1);
  z = add(z, pos_embed_);

  TeacherBundle out;
  for (std::size_t l = 0; l < blocks_.size(); ++l) {
    const auto& blk = blocks_[l];
    const auto qkv = blk.qkv(blk.ln1(z));
    const auto q = narrow(qkv, 2, 0, D);
    const auto k = narrow(qkv, 2, D, D);
    const auto v = narrow(qkv, 2, 2 * D, D);
    auto heads = [&](const Tensor& t) {
      return reshape(permute(reshape(t, {B, T, H, dh}), {0, 2, 1, 3}), {B * H, T, dh});
    };
    const auto mixed = attention(heads(q), heads(k), heads(v), static_cast<double>(dh));
    const auto merged = reshape(permute(reshape(mixed, {B, H, T, dh}), {0, 2, 1, 3}), {B, T, D});
    z = add(z, blk.proj(merged));
    z = add(z, blk.fc2(gelu(blk.fc1(blk.ln2(z)))));

    if (l == spec_.hint_layer) {
      auto head_mean = [&](const Tensor& t) {
        return narrow(mean_axis(reshape(t, {B, T, H, dh}), 2), 1, 1, N);
      };
      out.query = head_mean(q);
      out.key = head_mean(k);
      out.value = head_mean(v);
    }
  }
  const auto normed = ln_final_(z);
  out.features = narrow(normed, 1, 1, N);
  out.logits = head_(reshape(narrow(normed, 1, 0, 1), {B, D}));
  out.attn = attention(out.query, out.key, out.value, static_cast<double>(dh));
  return out;
}

NamedTensors Teacher::parameters() const {
  NamedTensors out;
  patch_embed_.collect("teacher.patch_embed", out);
  out.emplace_back("teacher.cls_token", cls_token_);
  out.emplace_back("teacher.pos_embed", pos_embed_);
  for (std::size_t l = 0; l < blocks_.size(); ++l) {
    const std::string p = "teacher.blocks." + std::to_string(l);
    blocks_[l].ln1.collect(p + ".ln1", out);
    blocks_[l].qkv.collect(p + ".qkv", out);
    blocks_[l].proj.collect(p + ".proj", out);
    blocks_[l].ln2.collect(p + ".ln2", out);
    blocks_[l].fc1.collect(p + ".fc1", out);
    blocks_[l].fc2.collect(p + ".fc2", out);
  }
  ln_final_.collect("teacher.ln_final", out);
  head_.collect("teacher.head", out);
  return out;
}

void Teacher::freeze() {
  set_requires_grad(parameters(), false);
  frozen_ = true;
}

// --- student -------------------------------------------------------------------

Student::Student(ModelSpec spec, RngStream& init) : spec_(std::move(spec)) {
  spec_.validate();
  if (spec_.kind != ModelKind::Student) throw ConfigError("Student built from a teacher spec");
  std::size_t ch = spec_.width;
  stem_ = Unit{Conv2d(spec_.in_channels, ch, 3, 1, 1, init, false), BatchNorm2d(ch)};
  for (std::size_t s = 0; s < spec_.stages; ++s) {
    for (std::size_t d = 0; d < spec_.depth; ++d) {
      const std::size_t out_ch = d == 0 ? ch * 2 : ch;
      units_.push_back(Unit{Conv2d(ch, out_ch, 3, d == 0 ? 2 : 1, 1, init, false), BatchNorm2d(out_ch)});
      ch = out_ch;
    }
  }
  head_ = Linear(ch, spec_.classes, init);
}

StudentBundle Student::forward(const Tensor& images, bool train) {
  if (images.ndim() != 4 || images.dim(1) != spec_.in_channels) {
    throw ConfigError("student expects [B," + std::to_string(spec_.in_channels) + ",H,W] images, got " +
                      shape_str(images.shape()));
  }
  const std::size_t factor = std::size_t{1} << spec_.stages;
  if (images.dim(2) % factor != 0 || images.dim(3) % factor != 0) {
    throw ConfigError("student input " + std::to_string(images.dim(2)) + "x" + std::to_string(images.dim(3)) +
                      " is not divisible by 2^" + std::to_string(spec_.stages));
  }
  auto z = relu(stem_.bn(stem_.conv(images), train));
  for (auto& u : units_) z = relu(u.bn(u.conv(z), train));
  StudentBundle out;
  out.features = z;
  out.pooled = reshape(adaptive_avg_pool2d(z, 1, 1), {z.dim(0), z.dim(1)});
  out.logits = head_(out.pooled);
  return out;
}

NamedTensors Student::parameters() const {
  NamedTensors out;
  stem_.conv.collect("student.stem.conv", out);
  stem_.bn.collect("student.stem.bn", out);
  for (std::size_t i = 0; i < units_.size(); ++i) {
    const std::string p = "student.units." + std::to_string(i);
    units_[i].conv.collect(p + ".conv", out);
    units_[i].bn.collect(p + ".bn", out);
  }
  head_.collect("student.head", out);
  return out;
}

NamedBuffers Student::buffers() {
  NamedBuffers out;
  stem_.bn.collect_buffers("student.stem.bn", out);
  for (std::size_t i = 0; i < units_.size(); ++i) {
    units_[i].bn.collect_buffers("student.units." + std::to_string(i) + ".bn", out);
  }
  return out;
}

}  // namespace crosskd
