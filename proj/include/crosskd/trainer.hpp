#pragma once

// Alternating optimization of student + projectors against the
// discriminator, the supervised and logit-distillation baselines, teacher
// pretraining, and checkpoint import/export.
//
// Random streams (all keyed by the run seed):
//   init/teacher, init/student, init/proj1, init/proj2, init/disc
//   shuffle/<epoch>, mvg/<step>, pca-mask/<step>, gl-dropout/<step>

#include <memory>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "crosskd/checkpoint.hpp"
#include "crosskd/config.hpp"
#include "crosskd/data.hpp"
#include "crosskd/metrics.hpp"
#include "crosskd/models.hpp"
#include "crosskd/projectors.hpp"
#include "crosskd/robust.hpp"

namespace crosskd {

struct LossReport {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double lr = 0.0;
  double proj1 = 0.0;
  double proj2 = 0.0;
  double mvg = 0.0;
  std::optional<double> mad;  // present on discriminator-update steps
  double ce = 0.0;
  double kd = 0.0;  // α·T²·KL in logits-baseline mode, else 0
  double lambda = 0.0;
  double ce_weight = 0.0;
  double total = 0.0;

  /// proj1 + proj2 + λ·mvg + ce_weight·ce + kd, summed from the parts.
  double summed_total() const { return proj1 + proj2 + lambda * mvg + ce_weight * ce + kd; }
};

/// v ← momentum·v + grad + wd·param; param ← param − lr·v.
void sgd_step(std::span<double> param, std::span<const double> grad, std::span<double> velocity, double lr,
              double momentum, double weight_decay);

/// SGD with momentum and weight decay over a fixed parameter list.
class Sgd {
 public:
  Sgd(NamedTensors params, double momentum, double weight_decay);

  void zero_grad();
  /// Parameters that received no gradient are treated as having a zero one.
  void step(double lr);
  const NamedTensors& params() const { return params_; }

 private:
  NamedTensors params_;
  std::vector<std::vector<double>> velocity_;
  double momentum_;
  double weight_decay_;
};

/// AdamW (decoupled weight decay); used for teacher pretraining.
class AdamW {
 public:
  AdamW(NamedTensors params, double weight_decay, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

  void zero_grad();
  void step(double lr);

 private:
  NamedTensors params_;
  std::vector<std::vector<double>> m_, v_;
  double weight_decay_, beta1_, beta2_, eps_;
  std::size_t t_ = 0;
};

/// base · gamma^(number of milestones ≤ epoch). Milestones must be ascending.
double lr_schedule(std::size_t epoch, double base, std::span<const std::size_t> milestones, double gamma = 0.1);
double lr_schedule(std::size_t epoch, const TrainConfig& cfg);

struct KdLoss {
  Tensor total;  // α·T²·KL + (1−α)·CE
  Tensor kl;     // KL(softmax(t/T) ‖ softmax(s/T)), batch mean
  Tensor ce;
};

/// Soft-target distillation. Teacher logits enter as constants.
KdLoss logits_baseline_loss(const Tensor& student_logits, const Tensor& teacher_logits, std::span<const int> labels,
                            double temperature, double alpha);

struct Splits {
  Dataset train;
  Dataset val;
};

/// Builds or loads the train/val splits. A directory source overrides the
/// configured class count and image size with what is on disk. With
/// teacher_pool the synthetic train split is the larger teacher pool.
Splits load_splits(RunConfig& cfg, bool teacher_pool, LoadReport* report = nullptr);

struct EpochEval {
  std::size_t epoch = 0;
  double val_top1 = 0.0;
};

struct TrainResult {
  std::vector<LossReport> steps;
  std::vector<EpochEval> evals;
  std::size_t disc_updates = 0;
  std::uint64_t teacher_checksum_before = 0;
  std::uint64_t teacher_checksum_after = 0;
};

std::string metrics_csv_header();
std::string metrics_csv_row(const LossReport& r, std::optional<double> val_top1);

class Trainer {
 public:
  /// Distillation modes need a teacher; it is frozen here and must outlive the trainer.
  Trainer(RunConfig cfg, const Dataset& train, const Dataset* val, Teacher* teacher);
  ~Trainer();

  /// One iteration over a batch at the current global step.
  LossReport step(std::span<const std::size_t> batch, std::size_t epoch);

  /// All epochs. Rows are appended to csv as they are produced.
  TrainResult run(std::ostream* csv = nullptr);

  Student& student() { return *student_; }
  PcaProjector* proj1() { return proj1_.get(); }
  GlProjector* proj2() { return proj2_.get(); }
  Discriminator* discriminator() { return disc_.get(); }
  /// Student and projector parameters; the teacher and discriminator are never in it.
  const Sgd& optimizer() const { return *opt_; }
  std::size_t global_step() const { return step_; }
  std::size_t disc_updates() const { return disc_updates_; }
  const RunConfig& config() const { return cfg_; }

  /// When set, each MVG call appends one JSON line describing its draws.
  void set_augment_log(std::ostream* log) { augment_log_ = log; }

  /// Student, projectors and discriminator, with the resolved config.
  Checkpoint training_checkpoint() const;

 private:
  LossReport step_cross_arch(const Tensor& x, std::span<const int> y, double lr);
  LossReport step_logits(const Tensor& x, std::span<const int> y);
  LossReport step_student_only(const Tensor& x, std::span<const int> y);

  RunConfig cfg_;
  const Dataset& train_;
  const Dataset* val_;
  Teacher* teacher_;
  std::unique_ptr<Student> student_;
  std::unique_ptr<PcaProjector> proj1_;
  std::unique_ptr<GlProjector> proj2_;
  std::unique_ptr<Discriminator> disc_;
  std::unique_ptr<Sgd> opt_;
  std::unique_ptr<Sgd> disc_opt_;
  std::size_t step_ = 0;
  std::size_t disc_updates_ = 0;
  std::ostream* augment_log_ = nullptr;
};

/// Supervised teacher training; MVG augments inputs when enabled.
Teacher pretrain_teacher(const RunConfig& cfg, const Dataset& train, const Dataset* val,
                         TrainResult* result = nullptr, std::ostream* csv = nullptr);

Checkpoint teacher_checkpoint(const Teacher& teacher);
/// Rebuilds a frozen teacher. Throws DataError on a non-teacher checkpoint.
Teacher load_teacher(const Checkpoint& ckpt);

/// Keeps only the student parameters and batchnorm statistics.
/// Throws DataError when the student entries are missing.
Checkpoint export_student(const Checkpoint& training);
/// Rebuilds a student from an exported or training checkpoint.
Student load_student(const Checkpoint& ckpt);

}  // namespace crosskd
