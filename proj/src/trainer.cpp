#include "crosskd/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "crosskd/errors.hpp"

namespace crosskd {

void sgd_step(std::span<double> param, std::span<const double> grad, std::span<double> velocity, double lr,
              double momentum, double weight_decay) {
  if (grad.size() != param.size() || velocity.size() != param.size()) {
    throw DimensionError("sgd_step: parameter, gradient and velocity sizes differ");
  }
  for (std::size_t i = 0; i < param.size(); ++i) {
    velocity[i] = momentum * velocity[i] + grad[i] + weight_decay * param[i];
    param[i] -= lr * velocity[i];
  }
}

Sgd::Sgd(NamedTensors params, double momentum, double weight_decay)
    : params_(std::move(params)), momentum_(momentum), weight_decay_(weight_decay) {
  for (const auto& [name, p] : params_) velocity_.emplace_back(p.size(), 0.0);
}

void Sgd::zero_grad() {
  for (auto& [name, p] : params_) p.zero_grad();
}

void Sgd::step(double lr) {
  std::vector<double> zeros;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i].second;
    std::span<const double> g = p.grad();
    if (!p.has_grad()) {
      zeros.assign(p.size(), 0.0);
      g = zeros;
    }
    sgd_step(p.mutable_data(), g, velocity_[i], lr, momentum_, weight_decay_);
  }
}

AdamW::AdamW(NamedTensors params, double weight_decay, double beta1, double beta2, double eps)
    : params_(std::move(params)), weight_decay_(weight_decay), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const auto& [name, p] : params_) {
    m_.emplace_back(p.size(), 0.0);
    v_.emplace_back(p.size(), 0.0);
  }
}

void AdamW::zero_grad() {
  for (auto& [name, p] : params_) p.zero_grad();
}

void AdamW::step(double lr) {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i].second;
    auto w = p.mutable_data();
    const bool has = p.has_grad();
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double g = has ? p.grad()[j] : 0.0;
      m_[i][j] = beta1_ * m_[i][j] + (1 - beta1_) * g;
      v_[i][j] = beta2_ * v_[i][j] + (1 - beta2_) * g * g;
      w[j] -= lr * (weight_decay_ * w[j] + (m_[i][j] / c1) / (std::sqrt(v_[i][j] / c2) + eps_));
    }
  }
}

double lr_schedule(std::size_t epoch, double base, std::span<const std::size_t> milestones, double gamma) {
  double lr = base;
  for (auto m : milestones) {
    if (epoch >= m) lr *= gamma;
  }
  return lr;
}

double lr_schedule(std::size_t epoch, const TrainConfig& cfg) {
  return lr_schedule(epoch, cfg.lr, cfg.milestones, cfg.lr_gamma);
}

KdLoss logits_baseline_loss(const Tensor& student_logits, const Tensor& teacher_logits, std::span<const int> labels,
                            double temperature, double alpha) {
  if (student_logits.shape() != teacher_logits.shape() || student_logits.ndim() != 2) {
    throw DimensionError("logits_baseline_loss: student " + shape_str(student_logits.shape()) + " vs teacher " +
                         shape_str(teacher_logits.shape()));
  }
  if (!(temperature > 0)) throw ConfigError("temperature must be positive");
  const auto teacher = teacher_logits.detach();
  const auto log_p_t = log_softmax(scale(teacher, 1.0 / temperature), 1);
  const auto log_p_s = log_softmax(scale(student_logits, 1.0 / temperature), 1);
  const auto p_t = exp(log_p_t);
  const double batch = static_cast<double>(student_logits.dim(0));
  KdLoss out;
  out.kl = scale(sum(mul(p_t, sub(log_p_t, log_p_s))), 1.0 / batch);
  out.ce = cross_entropy_with_logits(student_logits, labels);
  out.total = add(scale(out.kl, alpha * temperature * temperature), scale(out.ce, 1.0 - alpha));
  return out;
}

Splits load_splits(RunConfig& cfg, bool teacher_pool, LoadReport* report) {
  Splits s;
  if (cfg.data.source == "directory") {
    const std::filesystem::path root = cfg.data.path;
    s.train = load_image_dir(root / "train", report, "train");
    s.val = load_image_dir(root / "val", report, "val");
    if (s.train.height != s.train.width) throw ConfigError("directory images must be square");
    if (s.val.classes != s.train.classes || s.val.height != s.train.height || s.val.width != s.train.width) {
      throw DataError("train and val directories disagree on classes or image size");
    }
    cfg.data.classes = s.train.classes;
    cfg.data.image_size = s.train.height;
    cfg.finalize();
    return s;
  }
  const auto size = cfg.data.image_size;
  const auto per_class = teacher_pool ? cfg.data.teacher_per_class : cfg.data.per_class;
  s.train = synth_dataset(cfg.seed, cfg.data.classes, per_class, size, size, teacher_pool ? "teacher-pool" : "train");
  s.val = synth_dataset(cfg.seed, cfg.data.classes, cfg.data.val_per_class, size, size, "val");
  return s;
}

std::string metrics_csv_header() { return "step,epoch,lr,l_proj1,l_proj2,l_mvg,l_mad,ce,kd,l_total,val_top1\n"; }

std::string metrics_csv_row(const LossReport& r, std::optional<double> val_top1) {
  auto num = [](double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return std::string(buf);
  };
  std::string row = std::to_string(r.step) + "," + std::to_string(r.epoch) + "," + num(r.lr) + "," + num(r.proj1) +
                    "," + num(r.proj2) + "," + num(r.mvg) + "," + (r.mad ? num(*r.mad) : "") + "," + num(r.ce) +
                    "," + num(r.kd) + "," + num(r.total) + "," + (val_top1 ? num(*val_top1) : "");
  return row + "\n";
}

namespace {

void check_geometry(const RunConfig& cfg, const Dataset& data) {
  if (data.channels != cfg.student.in_channels || data.height != cfg.data.image_size ||
      data.width != cfg.data.image_size) {
    throw ConfigError("dataset '" + data.split + "' images are " + std::to_string(data.channels) + "x" +
                      std::to_string(data.height) + "x" + std::to_string(data.width) + ", model expects " +
                      std::to_string(cfg.student.in_channels) + "x" + std::to_string(cfg.data.image_size) + "x" +
                      std::to_string(cfg.data.image_size));
  }
  if (data.classes != cfg.data.classes) {
    throw ConfigError("dataset '" + data.split + "' has " + std::to_string(data.classes) +
                      " classes, model expects " + std::to_string(cfg.data.classes));
  }
}

void check_teacher(const RunConfig& cfg, const Teacher& teacher) {
  const auto& t = teacher.spec();
  if (t.image_size != cfg.data.image_size || t.classes != cfg.data.classes || t.in_channels != cfg.student.in_channels) {
    throw ConfigError("teacher checkpoint geometry does not match the run configuration");
  }
}

double finite_or_throw(const Tensor& t, const char* what, std::size_t step) {
  const double v = t.item();
  if (!std::isfinite(v)) throw NumericError(std::string(what) + " is not finite at step " + std::to_string(step));
  return v;
}

}  // namespace

Trainer::Trainer(RunConfig cfg, const Dataset& train, const Dataset* val, Teacher* teacher)
    : cfg_(std::move(cfg)), train_(train), val_(val), teacher_(teacher) {
  cfg_.finalize();
  train_.validate();
  check_geometry(cfg_, train_);
  if (val_) check_geometry(cfg_, *val_);
  if (cfg_.mode == Mode::TeacherPretrain) throw ConfigError("use pretrain_teacher for teacher-pretrain mode");
  const bool needs_teacher = cfg_.mode == Mode::CrossArch || cfg_.mode == Mode::LogitsBaseline;
  if (needs_teacher) {
    if (!teacher_) throw ConfigError("mode '" + to_string(cfg_.mode) + "' needs a teacher checkpoint");
    check_teacher(cfg_, *teacher_);
    teacher_->freeze();
  }

  RngStream student_init(cfg_.seed, "init/student");
  student_ = std::make_unique<Student>(cfg_.student, student_init);
  NamedTensors trainable = student_->parameters();

  if (cfg_.mode == Mode::CrossArch) {
    const auto& ts = teacher_->spec();
    const auto grid = teacher_->grid();
    const auto c = cfg_.student.feature_channels();
    const auto cells = cfg_.student.feature_grid();
    RngStream p1(cfg_.seed, "init/proj1");
    RngStream p2(cfg_.seed, "init/proj2");
    RngStream pd(cfg_.seed, "init/disc");
    proj1_ = std::make_unique<PcaProjector>(c, ts.head_dim(), grid.rows(), grid.cols(), p1);
    proj2_ = std::make_unique<GlProjector>(c, ts.width, cells, cells, grid.rows(), grid.cols(),
                                           cfg_.train.gl_dropout, p2);
    disc_ = std::make_unique<Discriminator>(grid.tokens, ts.width, cfg_.train.disc_hidden, pd);
    for (auto& p : proj1_->parameters()) trainable.push_back(p);
    for (auto& p : proj2_->parameters()) trainable.push_back(p);
    disc_opt_ = std::make_unique<Sgd>(disc_->parameters(), cfg_.train.momentum, cfg_.train.weight_decay);
  }
  opt_ = std::make_unique<Sgd>(std::move(trainable), cfg_.train.momentum, cfg_.train.weight_decay);
}

Trainer::~Trainer() = default;

LossReport Trainer::step(std::span<const std::size_t> batch, std::size_t epoch) {
  const auto x = train_.images(batch);
  const auto y = train_.labels_of(batch);
  const double lr = lr_schedule(epoch, cfg_.train);
  LossReport r;
  try {
    switch (cfg_.mode) {
      case Mode::CrossArch: r = step_cross_arch(x, y, lr); break;
      case Mode::LogitsBaseline: r = step_logits(x, y); break;
      default: r = step_student_only(x, y); break;
    }
    if (!std::isfinite(r.total)) throw NumericError("total loss is not finite");
    opt_->step(lr);
  } catch (const NumericError& e) {
    throw NumericError("training aborted at step " + std::to_string(step_) + " (epoch " + std::to_string(epoch) +
                       "): " + e.what());
  }
  r.step = step_;
  r.epoch = epoch;
  r.lr = lr;
  ++step_;
  return r;
}

LossReport Trainer::step_cross_arch(const Tensor& x, std::span<const int> y, double lr) {
  (void)lr;
  const auto& tc = cfg_.train;
  const auto step = step_;

  TeacherBundle tb;
  {
    NoGradGuard no_grad;
    tb = teacher_->forward(x);
  }
  Tensor x_view = x;
  if (cfg_.mvg.enabled) {
    RngStream rng = RngStream(cfg_.seed, "mvg").fork(step);
    std::vector<AugmentRecord> records;
    x_view = mvg(x, cfg_.mvg, rng, augment_log_ ? &records : nullptr);
    if (augment_log_) {
      nlohmann::json line{{"step", step}, {"samples", nlohmann::json::array()}};
      for (const auto& a : records) {
        line["samples"].push_back(a.applied ? nlohmann::json{{"transform", to_string(a.transform)}, {"params", a.params}}
                                            : nlohmann::json{{"transform", "identity"}});
      }
      *augment_log_ << line.dump() << "\n";
    }
  }

  opt_->zero_grad();
  const auto sb = student_->forward(x_view, true);
  const Tensor ce_logits = tc.ce_on_transformed ? sb.logits : student_->forward(x, true).logits;

  const auto triple = proj1_->project(sb.features);
  RngStream mask_rng = RngStream(cfg_.seed, "pca-mask").fork(step);
  const auto mask = ReplacementMask::sample(triple.query.size(), mask_rng, tc.replace_threshold);
  const auto pc_attn = pca_attention(triple, {tb.query, tb.key, tb.value}, mask);
  const auto relation = tc.gram_relation ? ValueRelation::Gram : ValueRelation::Elementwise;
  const auto l1 = loss_proj1(pc_attn, tb.attn, triple.value, tb.value,
                             static_cast<double>(teacher_->spec().head_dim()), relation);

  RngStream drop_rng = RngStream(cfg_.seed, "gl-dropout").fork(step);
  const auto hs_prime = proj2_->project(sb.features, true, drop_rng);
  const auto l2 = loss_proj2(tb.features, hs_prime);
  const auto l_mvg = loss_mvg(*disc_, hs_prime, tc.non_saturating);
  const auto ce = cross_entropy_with_logits(ce_logits, y);

  const auto total = add(add(add(l1, l2), scale(l_mvg, tc.lambda)), scale(ce, tc.ce_weight));

  LossReport r;
  r.proj1 = finite_or_throw(l1, "L_proj1", step);
  r.proj2 = finite_or_throw(l2, "L_proj2", step);
  r.mvg = finite_or_throw(l_mvg, "L_MVG", step);
  r.ce = finite_or_throw(ce, "CE", step);
  r.lambda = tc.lambda;
  r.ce_weight = tc.ce_weight;
  r.total = finite_or_throw(total, "L_total", step);
  total.backward();

  if (step % tc.disc_period == 0) {
    // D sees the features produced before this step's student update.
    disc_opt_->zero_grad();
    const auto mad = loss_mad(*disc_, tb.features, hs_prime.detach());
    r.mad = finite_or_throw(mad, "L_MAD", step);
    mad.backward();
    disc_opt_->step(tc.disc_lr);
    ++disc_updates_;
  }
  return r;
}

LossReport Trainer::step_logits(const Tensor& x, std::span<const int> y) {
  const auto& tc = cfg_.train;
  Tensor teacher_logits;
  {
    NoGradGuard no_grad;
    teacher_logits = teacher_->forward(x).logits;
  }
  opt_->zero_grad();
  const auto sb = student_->forward(x, true);
  const auto kd = logits_baseline_loss(sb.logits, teacher_logits, y, tc.kd_temperature, tc.kd_alpha);
  LossReport r;
  r.ce = finite_or_throw(kd.ce, "CE", step_);
  r.ce_weight = 1.0 - tc.kd_alpha;
  r.kd = tc.kd_alpha * tc.kd_temperature * tc.kd_temperature * finite_or_throw(kd.kl, "KL", step_);
  r.total = finite_or_throw(kd.total, "L_total", step_);
  kd.total.backward();
  return r;
}

LossReport Trainer::step_student_only(const Tensor& x, std::span<const int> y) {
  opt_->zero_grad();
  const auto sb = student_->forward(x, true);
  const auto ce = cross_entropy_with_logits(sb.logits, y);
  LossReport r;
  r.ce = finite_or_throw(ce, "CE", step_);
  r.ce_weight = 1.0;
  r.total = r.ce;
  ce.backward();
  return r;
}

TrainResult Trainer::run(std::ostream* csv) {
  TrainResult result;
  if (teacher_) result.teacher_checksum_before = checksum(teacher_->parameters());
  if (csv) *csv << metrics_csv_header() << std::flush;
  const RngStream shuffle(cfg_.seed, "shuffle");
  for (std::size_t epoch = 0; epoch < cfg_.train.epochs; ++epoch) {
    RngStream order = shuffle.fork(epoch);
    const auto plan = batches(train_.size(), cfg_.train.batch_size, &order);
    for (std::size_t b = 0; b < plan.size(); ++b) {
      auto r = step(plan[b], epoch);
      std::optional<double> val_top1;
      const bool last = b + 1 == plan.size();
      const bool due = (epoch + 1) % cfg_.train.eval_every == 0 || epoch + 1 == cfg_.train.epochs;
      if (last && due && val_) {
        val_top1 = evaluate(*student_, *val_).top1;
        result.evals.push_back({epoch, *val_top1});
      }
      if (csv) *csv << metrics_csv_row(r, val_top1) << std::flush;
      result.steps.push_back(std::move(r));
    }
  }
  result.disc_updates = disc_updates_;
  if (teacher_) result.teacher_checksum_after = checksum(teacher_->parameters());
  return result;
}

Checkpoint Trainer::training_checkpoint() const {
  Checkpoint ck;
  ck.meta["kind"] = "training";
  ck.meta["student"] = cfg_.student;
  ck.meta["mode"] = to_string(cfg_.mode);
  ck.meta["step"] = step_;
  ck.meta["config"] = cfg_.to_toml();
  ck.add(student_->parameters());
  ck.add(student_->buffers());
  if (proj1_) ck.add(proj1_->parameters());
  if (proj2_) ck.add(proj2_->parameters());
  if (disc_) ck.add(disc_->parameters());
  return ck;
}

Teacher pretrain_teacher(const RunConfig& cfg_in, const Dataset& train, const Dataset* val, TrainResult* result,
                         std::ostream* csv) {
  RunConfig cfg = cfg_in;
  cfg.finalize();
  train.validate();
  check_geometry(cfg, train);
  if (val) check_geometry(cfg, *val);
  RngStream init(cfg.seed, "init/teacher");
  Teacher teacher(cfg.teacher, init);
  AdamW opt(teacher.parameters(), cfg.train.teacher_weight_decay);
  TrainResult local;
  if (csv) *csv << metrics_csv_header() << std::flush;
  const RngStream shuffle(cfg.seed, "shuffle");
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.train.epochs; ++epoch) {
    const double lr = lr_schedule(epoch, cfg.train.teacher_lr, cfg.train.milestones, cfg.train.lr_gamma);
    RngStream order = shuffle.fork(epoch);
    const auto plan = batches(train.size(), cfg.train.batch_size, &order);
    for (std::size_t b = 0; b < plan.size(); ++b) {
      Tensor x = train.images(plan[b]);
      const auto y = train.labels_of(plan[b]);
      if (cfg.mvg.enabled) {
        RngStream rng = RngStream(cfg.seed, "mvg").fork(step);
        x = mvg(x, cfg.mvg, rng);
      }
      LossReport r;
      try {
        opt.zero_grad();
        const auto ce = cross_entropy_with_logits(teacher.forward(x).logits, y);
        r.ce = finite_or_throw(ce, "CE", step);
        ce.backward();
        opt.step(lr);
      } catch (const NumericError& e) {
        throw NumericError("teacher pretraining aborted at step " + std::to_string(step) + ": " + e.what());
      }
      r.step = step++;
      r.epoch = epoch;
      r.lr = lr;
      r.ce_weight = 1.0;
      r.total = r.ce;
      std::optional<double> val_top1;
      const bool due = (epoch + 1) % cfg.train.eval_every == 0 || epoch + 1 == cfg.train.epochs;
      if (b + 1 == plan.size() && due && val) {
        val_top1 = evaluate(teacher, *val).top1;
        local.evals.push_back({epoch, *val_top1});
      }
      if (csv) *csv << metrics_csv_row(r, val_top1) << std::flush;
      local.steps.push_back(r);
    }
  }
  teacher.freeze();
  if (result) *result = std::move(local);
  return teacher;
}

Checkpoint teacher_checkpoint(const Teacher& teacher) {
  Checkpoint ck;
  ck.meta["kind"] = "teacher";
  ck.meta["teacher"] = teacher.spec();
  ck.add(teacher.parameters());
  return ck;
}

Teacher load_teacher(const Checkpoint& ckpt) {
  if (ckpt.meta.value("kind", "") != "teacher" || !ckpt.meta.contains("teacher")) {
    throw DataError("checkpoint does not hold a teacher");
  }
  ModelSpec spec;
  try {
    spec = ckpt.meta.at("teacher").get<ModelSpec>();
    spec.validate();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("corrupt teacher spec: ") + e.what());
  }
  RngStream init(0, "init/teacher");
  Teacher teacher(spec, init);
  ckpt.restore(teacher.parameters());
  teacher.freeze();
  return teacher;
}

Checkpoint export_student(const Checkpoint& training) {
  if (!training.meta.contains("student") || !training.has_prefix("student.")) {
    throw DataError("checkpoint has no student parameters");
  }
  Checkpoint out;
  out.meta["kind"] = "student";
  out.meta["student"] = training.meta.at("student");
  for (const auto& t : training.tensors) {
    if (t.name.rfind("student.", 0) == 0) out.tensors.push_back(t);
  }
  // Round-trip through a model so a missing or mis-shaped entry is caught now.
  load_student(out);
  return out;
}

Student load_student(const Checkpoint& ckpt) {
  if (!ckpt.meta.contains("student")) throw DataError("checkpoint has no student spec");
  ModelSpec spec;
  try {
    spec = ckpt.meta.at("student").get<ModelSpec>();
    spec.validate();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("corrupt student spec: ") + e.what());
  }
  RngStream init(0, "init/student");
  Student student(spec, init);
  ckpt.restore(student.parameters());
  ckpt.restore(student.buffers());
  return student;
}

}  // namespace crosskd
