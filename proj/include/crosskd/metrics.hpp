#pragma once

// Representation transferability, top-k accuracy and the noisy evaluation
// protocol.

#include <span>
#include <string>
#include <vector>

#include "crosskd/config.hpp"
#include "crosskd/data.hpp"
#include "crosskd/models.hpp"
#include "crosskd/tensor.hpp"
#include "json.hpp"

namespace crosskd {

/// Least-squares map W [p, q] with S·W ≈ T.
struct AlignmentFit {
  std::size_t in_dim = 0;
  std::size_t out_dim = 0;
  std::vector<double> weights;  // row-major [in_dim, out_dim]
  double ridge = 0.0;
  double residual = 0.0;  // mean over rows of ‖s·W - t‖² on the fitted rows

  std::vector<double> apply(std::span<const double> row) const;
};

/// Solves (SᵀS + ridge·I)·W = SᵀT. S is [n, p], T is [n, q].
/// Throws ConfigError when n < p and NumericError when the system is singular.
AlignmentFit fit_alignment(const Tensor& student, const Tensor& teacher, double ridge = 1e-6);

/// Throws NumericError when either vector has zero norm.
double cosine(std::span<const double> a, std::span<const double> b);

struct TransferabilityReport {
  std::string teacher_id;
  std::string student_id;
  double alignment_residual = 0.0;
  double mean_cosine = 0.0;
  std::size_t samples = 0;      // held-out rows that contributed
  std::size_t fit_samples = 0;  // rows used to fit the map
  std::size_t excluded = 0;     // held-out rows skipped for zero norm

  nlohmann::json to_json() const;
};

/// Fits on the first fit_fraction of rows, scores on the rest.
TransferabilityReport transferability_from_features(const Tensor& student, const Tensor& teacher,
                                                    double fit_fraction = 0.8);

/// Global-average-pooled student features, [B, c].
Tensor student_embedding(Student& student, const Tensor& images);
/// Token-averaged teacher features, [B, D_T].
Tensor teacher_embedding(const Teacher& teacher, const Tensor& images);

TransferabilityReport transferability(Student& student, const Teacher& teacher, const Dataset& data,
                                      const std::string& student_id = "student",
                                      const std::string& teacher_id = "teacher");

struct Accuracy {
  double top1 = 0.0;
  double top5 = 0.0;
  bool top5_degenerate = false;  // five or fewer classes: top-5 is trivially 1
  bool noisy = false;
  std::size_t count = 0;

  nlohmann::json to_json() const;
};

Accuracy accuracy_from_logits(const Tensor& logits, std::span<const int> labels);

/// Fixed held-out corruption: every image is rotated by ±[min, max] degrees
/// and colour-jittered at the configured strength. Draws come from the
/// "noisy-eval" stream forked per sample index, so all models see the same views.
Tensor noisy_view(const Tensor& images, std::span<const std::size_t> indices, const NoisyEvalConfig& cfg,
                  std::uint64_t seed);

Accuracy evaluate(Student& student, const Dataset& data, bool noisy = false, const NoisyEvalConfig& cfg = {},
                  std::uint64_t seed = 0, std::size_t batch_size = 128);
Accuracy evaluate(const Teacher& teacher, const Dataset& data, bool noisy = false,
                  const NoisyEvalConfig& cfg = {}, std::uint64_t seed = 0, std::size_t batch_size = 128);

}  // namespace crosskd
