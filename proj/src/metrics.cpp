#include "crosskd/metrics.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <cmath>
#include <numeric>

#include "crosskd/errors.hpp"
#include "crosskd/robust.hpp"

namespace crosskd {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Eigen::Map<const RowMat> as_matrix(const Tensor& t) {
  return {t.data().data(), static_cast<Eigen::Index>(t.dim(0)), static_cast<Eigen::Index>(t.dim(1))};
}

void require_matrix(const Tensor& t, const char* what) {
  if (!t.defined() || t.ndim() != 2) throw DimensionError(std::string(what) + " must be a [n, dim] matrix");
}

}  // namespace

std::vector<double> AlignmentFit::apply(std::span<const double> row) const {
  if (row.size() != in_dim) throw DimensionError("alignment expects " + std::to_string(in_dim) + " inputs");
  std::vector<double> out(out_dim, 0.0);
  for (std::size_t i = 0; i < in_dim; ++i) {
    for (std::size_t j = 0; j < out_dim; ++j) out[j] += row[i] * weights[i * out_dim + j];
  }
  return out;
}

AlignmentFit fit_alignment(const Tensor& student, const Tensor& teacher, double ridge) {
  require_matrix(student, "student features");
  require_matrix(teacher, "teacher features");
  const std::size_t n = student.dim(0);
  const std::size_t p = student.dim(1);
  const std::size_t q = teacher.dim(1);
  if (teacher.dim(0) != n) throw DimensionError("feature sets differ in sample count");
  if (n < p) {
    throw ConfigError("alignment needs at least " + std::to_string(p) + " samples, got " + std::to_string(n));
  }
  if (ridge < 0) throw ConfigError("ridge must be non-negative");

  const auto s = as_matrix(student);
  const auto t = as_matrix(teacher);
  Eigen::MatrixXd gram = s.transpose() * s;
  gram.diagonal().array() += ridge;
  const Eigen::LLT<Eigen::MatrixXd> llt(gram);
  if (llt.info() != Eigen::Success || llt.rcond() < 1e-14) {
    throw NumericError("alignment system is rank deficient");
  }
  const RowMat w = llt.solve(s.transpose() * t);
  if (!w.allFinite()) throw NumericError("alignment produced non-finite weights");

  AlignmentFit fit;
  fit.in_dim = p;
  fit.out_dim = q;
  fit.ridge = ridge;
  fit.weights.assign(w.data(), w.data() + w.size());
  fit.residual = (s * w - t).squaredNorm() / static_cast<double>(n);
  return fit;
}

double cosine(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DimensionError("cosine of vectors with different lengths");
  const double dot = std::inner_product(a.begin(), a.end(), b.begin(), 0.0);
  const double na = std::sqrt(std::inner_product(a.begin(), a.end(), a.begin(), 0.0));
  const double nb = std::sqrt(std::inner_product(b.begin(), b.end(), b.begin(), 0.0));
  if (na == 0.0 || nb == 0.0) throw NumericError("cosine of a zero-norm vector");
  return std::clamp(dot / (na * nb), -1.0, 1.0);
}

nlohmann::json TransferabilityReport::to_json() const {
  return {{"teacher", teacher_id},       {"student", student_id},   {"alignment_residual", alignment_residual},
          {"mean_cosine", mean_cosine},  {"samples", samples},      {"fit_samples", fit_samples},
          {"excluded_zero_norm", excluded}};
}

TransferabilityReport transferability_from_features(const Tensor& student, const Tensor& teacher,
                                                    double fit_fraction) {
  require_matrix(student, "student features");
  require_matrix(teacher, "teacher features");
  const std::size_t n = student.dim(0);
  if (teacher.dim(0) != n) throw DimensionError("feature sets differ in sample count");
  if (!(fit_fraction > 0 && fit_fraction < 1)) throw ConfigError("fit fraction must lie in (0, 1)");
  const auto n_fit = static_cast<std::size_t>(std::floor(fit_fraction * static_cast<double>(n)));
  if (n_fit == 0 || n_fit >= n) throw ConfigError("too few samples to split into fit and test rows");

  const auto fit = fit_alignment(narrow(student, 0, 0, n_fit), narrow(teacher, 0, 0, n_fit));

  TransferabilityReport r;
  r.alignment_residual = fit.residual;
  r.fit_samples = n_fit;
  const std::size_t p = student.dim(1);
  const std::size_t q = teacher.dim(1);
  double total = 0.0;
  for (std::size_t i = n_fit; i < n; ++i) {
    const auto aligned = fit.apply(student.data().subspan(i * p, p));
    const auto target = teacher.data().subspan(i * q, q);
    try {
      total += cosine(aligned, target);
      ++r.samples;
    } catch (const NumericError&) {
      ++r.excluded;
    }
  }
  if (r.samples == 0) throw NumericError("every held-out feature vector had zero norm");
  r.mean_cosine = total / static_cast<double>(r.samples);
  return r;
}

Tensor student_embedding(Student& student, const Tensor& images) {
  NoGradGuard no_grad;
  return student.forward(images, false).pooled;
}

Tensor teacher_embedding(const Teacher& teacher, const Tensor& images) {
  NoGradGuard no_grad;
  return mean_axis(teacher.forward(images).features, 1);
}

TransferabilityReport transferability(Student& student, const Teacher& teacher, const Dataset& data,
                                      const std::string& student_id, const std::string& teacher_id) {
  if (data.size() == 0) throw DataError("transferability on an empty dataset");
  std::vector<std::size_t> idx(data.size());
  std::iota(idx.begin(), idx.end(), 0);
  const auto images = data.images(idx);
  auto r = transferability_from_features(student_embedding(student, images), teacher_embedding(teacher, images));
  r.student_id = student_id;
  r.teacher_id = teacher_id;
  return r;
}

nlohmann::json Accuracy::to_json() const {
  return {{"top1", top1}, {"top5", top5}, {"top5_degenerate", top5_degenerate}, {"noisy", noisy}, {"count", count}};
}

Accuracy accuracy_from_logits(const Tensor& logits, std::span<const int> labels) {
  if (logits.ndim() != 2 || logits.dim(0) != labels.size()) {
    throw DimensionError("logits " + shape_str(logits.shape()) + " do not match " + std::to_string(labels.size()) +
                         " labels");
  }
  const std::size_t b = logits.dim(0);
  const std::size_t c = logits.dim(1);
  Accuracy acc;
  acc.count = b;
  acc.top5_degenerate = c <= 5;
  std::size_t hit1 = 0;
  std::size_t hit5 = 0;
  for (std::size_t i = 0; i < b; ++i) {
    const auto row = logits.data().subspan(i * c, c);
    const auto y = static_cast<std::size_t>(labels[i]);
    if (y >= c) throw DataError("label out of range");
    // Rank = classes scoring strictly higher, ties broken towards the lower index.
    std::size_t rank = 0;
    for (std::size_t k = 0; k < c; ++k) {
      if (row[k] > row[y] || (row[k] == row[y] && k < y)) ++rank;
    }
    hit1 += rank == 0;
    hit5 += rank < 5;
  }
  acc.top1 = static_cast<double>(hit1) / static_cast<double>(b);
  acc.top5 = acc.top5_degenerate ? 1.0 : static_cast<double>(hit5) / static_cast<double>(b);
  return acc;
}

Tensor noisy_view(const Tensor& images, std::span<const std::size_t> indices, const NoisyEvalConfig& cfg,
                  std::uint64_t seed) {
  if (images.ndim() != 4 || images.dim(0) != indices.size()) {
    throw DimensionError("noisy_view expects one index per image");
  }
  const std::size_t c = images.dim(1);
  const std::size_t h = images.dim(2);
  const std::size_t w = images.dim(3);
  const std::size_t per = c * h * w;
  auto out = images.values();
  const RngStream base(seed, "noisy-eval");
  for (std::size_t i = 0; i < indices.size(); ++i) {
    auto rng = base.fork(indices[i]);
    std::span<double> img(out.data() + i * per, per);
    const double magnitude = rng.uniform(cfg.rotation_min, cfg.rotation_max);
    const double angle = rng.uniform() < 0.5 ? -magnitude : magnitude;
    const double s = cfg.jitter_strength;
    const double brightness = rng.uniform(1 - s, 1 + s);
    const double contrast = rng.uniform(1 - s, 1 + s);
    const double saturation = rng.uniform(1 - s, 1 + s);
    rotate(img, c, h, w, angle);
    color_jitter(img, c, h, w, brightness, contrast, saturation);
  }
  return Tensor::from(images.shape(), std::move(out));
}

namespace {

template <class Forward>
Accuracy evaluate_with(Forward forward, const Dataset& data, bool noisy, const NoisyEvalConfig& cfg,
                       std::uint64_t seed, std::size_t batch_size) {
  if (data.size() == 0) throw DataError("evaluation on an empty dataset");
  NoGradGuard no_grad;
  std::vector<double> logits;
  std::size_t classes = 0;
  for (const auto& batch : batches(data.size(), batch_size, nullptr)) {
    auto images = data.images(batch);
    if (noisy) images = noisy_view(images, batch, cfg, seed);
    const auto out = forward(images);
    classes = out.dim(1);
    logits.insert(logits.end(), out.data().begin(), out.data().end());
  }
  std::vector<std::size_t> all(data.size());
  std::iota(all.begin(), all.end(), 0);
  auto acc = accuracy_from_logits(Tensor::from({data.size(), classes}, std::move(logits)), data.labels_of(all));
  acc.noisy = noisy;
  return acc;
}

}  // namespace

Accuracy evaluate(Student& student, const Dataset& data, bool noisy, const NoisyEvalConfig& cfg, std::uint64_t seed,
                  std::size_t batch_size) {
  return evaluate_with([&](const Tensor& x) { return student.forward(x, false).logits; }, data, noisy, cfg, seed,
                       batch_size);
}

Accuracy evaluate(const Teacher& teacher, const Dataset& data, bool noisy, const NoisyEvalConfig& cfg,
                  std::uint64_t seed, std::size_t batch_size) {
  return evaluate_with([&](const Tensor& x) { return teacher.forward(x).logits; }, data, noisy, cfg, seed,
                       batch_size);
}

}  // namespace crosskd
