#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "crosskd/rng.hpp"
#include "crosskd/tensor.hpp"

namespace crosskd {

/// Immutable labelled image set. Pixels are stored contiguously as
/// [n, channels, height, width] in [0, 1].
struct Dataset {
  std::string split;
  std::size_t channels = 3;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t classes = 0;
  std::vector<std::string> class_names;
  std::vector<double> pixels;
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  std::size_t image_size() const { return channels * height * width; }
  std::span<const double> image(std::size_t i) const;

  Tensor images(std::span<const std::size_t> indices) const;
  std::vector<int> labels_of(std::span<const std::size_t> indices) const;

  /// Throws DataError on a broken invariant.
  void validate() const;
};

/// Procedural shapes; the class decides the shape (and, beyond eight classes,
/// the hue band). Position, size, orientation, colours and noise are nuisance.
Dataset synth_dataset(std::uint64_t seed, std::size_t classes, std::size_t per_class, std::size_t height,
                      std::size_t width, const std::string& split = "train");

inline constexpr std::size_t kSynthShapes = 8;

struct LoadReport {
  std::size_t skipped = 0;
  std::vector<std::string> warnings;
};

/// Reads root/<class>/<image>. Classes and files are taken in lexicographic
/// order. Binary and ASCII netpbm (.ppm/.pgm/.pnm) files are understood;
/// greyscale is replicated to three channels. Unreadable or mis-sized files
/// are skipped and counted.
Dataset load_image_dir(const std::filesystem::path& root, LoadReport* report = nullptr,
                       const std::string& split = "train");

/// Writes one binary PPM (P6) image; used to materialize datasets on disk.
void write_ppm(const std::filesystem::path& path, std::span<const double> chw, std::size_t height,
               std::size_t width);

/// One epoch of index batches. With a shuffle stream the order is a seeded
/// permutation, otherwise sequential. The final partial batch is kept.
std::vector<std::vector<std::size_t>> batches(std::size_t count, std::size_t batch_size, RngStream* shuffle);

}  // namespace crosskd
