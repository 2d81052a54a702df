#include "crosskd/projectors.hpp"

#include <cmath>

#include "crosskd/errors.hpp"

namespace crosskd {

Tensor attention(const Tensor& query, const Tensor& key, const Tensor& value, double d) {
  if (!(d > 0.0)) throw ConfigError("attention: query size d must be positive");
  if (query.ndim() == 2) {
    auto lift = [](const Tensor& t) { return reshape(t, {1, t.dim(0), t.dim(1)}); };
    auto out = attention(lift(query), lift(key), lift(value), d);
    return reshape(out, {out.dim(1), out.dim(2)});
  }
  if (query.ndim() != 3 || query.shape() != key.shape() || key.dim(1) != value.dim(1) ||
      key.dim(0) != value.dim(0)) {
    throw DimensionError("attention: non-conformable " + shape_str(query.shape()) + ", " +
                         shape_str(key.shape()) + ", " + shape_str(value.shape()));
  }
  const auto scores = scale(bmm(query, transpose_last2(key)), 1.0 / std::sqrt(d));
  return bmm(softmax(scores, 2), value);
}

ReplacementMask ReplacementMask::sample(std::size_t elements, RngStream& rng, double threshold) {
  ReplacementMask m;
  for (auto* v : {&m.query, &m.key, &m.value}) {
    v->resize(elements);
    for (auto& b : *v) b = rng.uniform() >= threshold ? 1 : 0;
  }
  return m;
}

ReplacementMask ReplacementMask::uniform(std::size_t elements, bool replace) {
  ReplacementMask m;
  m.query.assign(elements, replace ? 1 : 0);
  m.key = m.query;
  m.value = m.query;
  return m;
}

Tensor pca_attention(const AttentionTriple& student, const AttentionTriple& teacher,
                     const ReplacementMask& mask) {
  const auto mix = [](const std::vector<std::uint8_t>& m, const Tensor& t, const Tensor& s) {
    return where(m, t.detach(), s);
  };
  const auto q = mix(mask.query, teacher.query, student.query);
  const auto k = mix(mask.key, teacher.key, student.key);
  const auto v = mix(mask.value, teacher.value, student.value);
  return attention(q, k, v, static_cast<double>(q.shape().back()));
}

namespace {

Tensor value_relation(const Tensor& v, double d, ValueRelation relation) {
  const double s = 1.0 / std::sqrt(d);
  if (relation == ValueRelation::Elementwise) return scale(mul(v, v), s);
  if (v.ndim() == 2) return scale(matmul(v, transpose_last2(v)), s);
  return scale(bmm(v, transpose_last2(v)), s);
}

}  // namespace

Tensor loss_proj1(const Tensor& pc_attn_s, const Tensor& attn_t, const Tensor& value_s,
                  const Tensor& value_t, double d, ValueRelation relation) {
  if (value_s.shape() != value_t.shape()) {
    throw DimensionError("loss_proj1: value shapes " + shape_str(value_s.shape()) + " and " +
                         shape_str(value_t.shape()));
  }
  const auto attn_term = mse(attn_t.detach(), pc_attn_s);
  const auto value_term =
      mse(value_relation(value_t.detach(), d, relation), value_relation(value_s, d, relation));
  return add(attn_term, value_term);
}

Tensor loss_proj2(const Tensor& features_t, const Tensor& projected_s) {
  return mse(features_t.detach(), projected_s);
}

// --- PCA projector ------------------------------------------------------------

PcaProjector::PcaProjector(std::size_t channels, std::size_t query_dim, std::size_t token_rows,
                           std::size_t token_cols, RngStream& init)
    : query_(channels, query_dim, 3, 1, 1, init),
      key_(channels, query_dim, 3, 1, 1, init),
      value_(channels, query_dim, 3, 1, 1, init),
      query_dim_(query_dim),
      token_rows_(token_rows),
      token_cols_(token_cols) {}

AttentionTriple PcaProjector::project(const Tensor& h) const {
  if (h.ndim() != 4) throw DimensionError("pca_project expects [B,c,h,w], got " + shape_str(h.shape()));
  if (h.dim(2) < token_rows_ || h.dim(3) < token_cols_) {
    throw ConfigError("pca_project: student grid " + std::to_string(h.dim(2)) + "x" +
                      std::to_string(h.dim(3)) + " cannot be pooled to " + std::to_string(token_rows_) +
                      "x" + std::to_string(token_cols_) + " tokens");
  }
  const auto pooled = adaptive_avg_pool2d(h, token_rows_, token_cols_);
  const std::size_t B = h.dim(0), N = token_rows_ * token_cols_;
  auto tokens = [&](const Conv2d& conv) {
    return permute(reshape(conv(pooled), {B, query_dim_, N}), {0, 2, 1});
  };
  return {tokens(query_), tokens(key_), tokens(value_)};
}

NamedTensors PcaProjector::parameters() const {
  NamedTensors out;
  query_.collect("proj1.query", out);
  key_.collect("proj1.key", out);
  value_.collect("proj1.value", out);
  return out;
}

// --- GL projector ---------------------------------------------------------------

std::vector<std::size_t> gl_group_map(std::size_t rows, std::size_t cols) {
  auto axis_groups = [](std::size_t n, const char* what) {
    const std::size_t block = (n + 3) / 4;
    if (n < 4 || 3 * block >= n) {
      throw ConfigError(std::string("GL projector: ") + what + " extent " + std::to_string(n) +
                        " cannot be split into 4 neighbourhoods");
    }
    std::vector<std::size_t> g(n);
    for (std::size_t i = 0; i < n; ++i) g[i] = std::min<std::size_t>(i / block, 3);
    return g;
  };
  const auto gr = axis_groups(rows, "row");
  const auto gc = axis_groups(cols, "column");
  std::vector<std::size_t> map(rows * cols);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) map[r * cols + c] = gr[r] * 4 + gc[c];
  }
  return map;
}

GlProjector::GlProjector(std::size_t channels, std::size_t token_dim, std::size_t grid_rows,
                         std::size_t grid_cols, std::size_t token_rows, std::size_t token_cols,
                         double dropout_rate, RngStream& init)
    : grid_rows_(grid_rows),
      grid_cols_(grid_cols),
      token_rows_(token_rows),
      token_cols_(token_cols),
      dropout_rate_(dropout_rate),
      groups_(gl_group_map(grid_rows, grid_cols)) {
  if (grid_rows < token_rows || grid_cols < token_cols) {
    throw ConfigError("GL projector: student grid smaller than the teacher token grid");
  }
  weight = init_fan_in_uniform({kGlGroups, channels, token_dim}, channels, init);
  bias = init_fan_in_uniform({kGlGroups, token_dim}, channels, init);
}

Tensor GlProjector::project_cells(const Tensor& h, bool train, RngStream& dropout_rng) const {
  if (h.ndim() != 4 || h.dim(2) != grid_rows_ || h.dim(3) != grid_cols_ || h.dim(1) != weight.dim(1)) {
    throw DimensionError("gl_project: expected [B," + std::to_string(weight.dim(1)) + "," +
                         std::to_string(grid_rows_) + "," + std::to_string(grid_cols_) + "], got " +
                         shape_str(h.shape()));
  }
  const std::size_t B = h.dim(0), c = h.dim(1), cells = grid_rows_ * grid_cols_;
  auto cells_in = reshape(permute(h, {0, 2, 3, 1}), {B, cells, c});
  cells_in = dropout(cells_in, dropout_rate_, train, dropout_rng);
  return grouped_linear(cells_in, weight, bias, groups_);
}

Tensor GlProjector::project(const Tensor& h, bool train, RngStream& dropout_rng) const {
  const auto cells = project_cells(h, train, dropout_rng);
  if (grid_rows_ == token_rows_ && grid_cols_ == token_cols_) return cells;
  const std::size_t B = h.dim(0), D = weight.dim(2);
  auto grid = reshape(permute(cells, {0, 2, 1}), {B, D, grid_rows_, grid_cols_});
  grid = adaptive_avg_pool2d(grid, token_rows_, token_cols_);
  return permute(reshape(grid, {B, D, token_rows_ * token_cols_}), {0, 2, 1});
}

NamedTensors GlProjector::parameters() const {
  return {{"proj2.weight", weight}, {"proj2.bias", bias}};
}

}  // namespace crosskd
