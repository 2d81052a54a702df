#pragma once

// Cross-architecture projectors.
//
//  * PCA projector: three 3×3 convs map student features to (Q, K, V) in the
//    teacher's attention space; a random element-wise subset of each matrix is
//    swapped for the teacher's value before attention is taken.
//  * GL projector: a per-cell linear map into the teacher's token space, with
//    16 FC layers each shared by one spatial neighbourhood of cells.

#include <cstdint>
#include <vector>

#include "crosskd/nn.hpp"
#include "crosskd/rng.hpp"
#include "crosskd/tensor.hpp"

namespace crosskd {

/// softmax(Q·Kᵀ/√d)·V for [B, N, d] or [N, d] inputs.
Tensor attention(const Tensor& query, const Tensor& key, const Tensor& value, double d);

struct AttentionTriple {
  Tensor query, key, value;
};

/// Per-element replacement decisions for Q, K and V (true = take the teacher value).
struct ReplacementMask {
  std::vector<std::uint8_t> query, key, value;

  /// Independent draws p ~ U[0,1) per element and per matrix; replace iff p >= threshold.
  static ReplacementMask sample(std::size_t elements, RngStream& rng, double threshold = 0.5);
  static ReplacementMask uniform(std::size_t elements, bool replace);
};

/// Attention over g(Q), g(K), g(V), where g picks the teacher element wherever
/// the mask is set. Teacher elements enter as constants.
Tensor pca_attention(const AttentionTriple& student, const AttentionTriple& teacher,
                     const ReplacementMask& mask);

enum class ValueRelation { Gram, Elementwise };

/// mse(Attn_T, PCAttn_S) + mse(rel(V_T)/√d, rel(V_S)/√d), rel(V) = V·Vᵀ (Gram)
/// or V⊙V (Elementwise).
Tensor loss_proj1(const Tensor& pc_attn_s, const Tensor& attn_t, const Tensor& value_s,
                  const Tensor& value_t, double d, ValueRelation relation = ValueRelation::Gram);

/// Mean squared distance in the teacher's token space.
Tensor loss_proj2(const Tensor& features_t, const Tensor& projected_s);

class PcaProjector {
 public:
  PcaProjector(std::size_t channels, std::size_t query_dim, std::size_t token_rows,
               std::size_t token_cols, RngStream& init);

  /// h_S [B, c, h', w'] -> three [B, N, d] tensors. The student grid is
  /// average-pooled to the token grid first when the two differ.
  AttentionTriple project(const Tensor& student_features) const;

  NamedTensors parameters() const;
  std::size_t query_dim() const { return query_dim_; }

  Conv2d& query_conv() { return query_; }
  Conv2d& key_conv() { return key_; }
  Conv2d& value_conv() { return value_; }

 private:
  Conv2d query_, key_, value_;
  std::size_t query_dim_, token_rows_, token_cols_;
};

inline constexpr std::size_t kGlGroups = 16;

/// Assigns each cell of a rows×cols grid to one of 16 groups laid out 4×4.
/// Each group covers a ceil(rows/4)×ceil(cols/4) neighbourhood; cells left
/// over at the far edges join the last row/column of groups. Throws
/// ConfigError when the grid cannot produce all 16 groups.
std::vector<std::size_t> gl_group_map(std::size_t rows, std::size_t cols);

class GlProjector {
 public:
  GlProjector(std::size_t channels, std::size_t token_dim, std::size_t grid_rows, std::size_t grid_cols,
              std::size_t token_rows, std::size_t token_cols, double dropout_rate, RngStream& init);

  /// Per-cell projection, [B, c, h', w'] -> [B, h'w', D_T].
  Tensor project_cells(const Tensor& student_features, bool train, RngStream& dropout_rng) const;
  /// project_cells followed by pooling onto the teacher token grid -> [B, N, D_T].
  Tensor project(const Tensor& student_features, bool train, RngStream& dropout_rng) const;

  NamedTensors parameters() const;
  const std::vector<std::size_t>& group_map() const { return groups_; }

  Tensor weight;  // [16, c, D_T]
  Tensor bias;    // [16, D_T]

 private:
  std::size_t grid_rows_, grid_cols_, token_rows_, token_cols_;
  double dropout_rate_;
  std::vector<std::size_t> groups_;
};

}  // namespace crosskd
