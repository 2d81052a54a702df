#include "crosskd/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "crosskd/errors.hpp"

namespace crosskd {

namespace fs = std::filesystem;

std::span<const double> Dataset::image(std::size_t i) const {
  return std::span<const double>(pixels).subspan(i * image_size(), image_size());
}

Tensor Dataset::images(std::span<const std::size_t> indices) const {
  if (indices.empty()) throw DataError("empty batch");
  std::vector<double> out;
  out.reserve(indices.size() * image_size());
  for (auto i : indices) {
    if (i >= size()) throw DataError("sample index out of range");
    const auto img = image(i);
    out.insert(out.end(), img.begin(), img.end());
  }
  return Tensor::from({indices.size(), channels, height, width}, std::move(out));
}

std::vector<int> Dataset::labels_of(std::span<const std::size_t> indices) const {
  std::vector<int> out;
  out.reserve(indices.size());
  for (auto i : indices) out.push_back(labels.at(i));
  return out;
}

void Dataset::validate() const {
  if (size() == 0) throw DataError("dataset '" + split + "' is empty");
  if (pixels.size() != size() * image_size()) throw DataError("dataset pixel buffer does not match its shape");
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= classes) throw DataError("label out of range");
  }
  for (double v : pixels) {
    if (!(v >= 0.0 && v <= 1.0)) throw DataError("pixel outside [0, 1]");
  }
}

// --- synthetic shapes -------------------------------------------------------------

namespace {

double smoothstep_edge(double signed_dist, double softness) {
  // 1 inside (negative distance), 0 outside, linear ramp across the edge.
  return std::clamp(0.5 - signed_dist / softness, 0.0, 1.0);
}

double box_dist(double x, double y, double half) { return std::max(std::abs(x), std::abs(y)) - half; }

/// Coverage in [0,1] of shape `kind` at (x, y), in units of the shape radius.
double coverage(std::size_t kind, double x, double y, double soft) {
  const double r = std::hypot(x, y);
  switch (kind) {
    case 0:  // disc
      return smoothstep_edge(r - 1.0, soft);
    case 1:  // ring
      return smoothstep_edge(std::abs(r - 0.75) - 0.25, soft);
    case 2:  // square
      return smoothstep_edge(box_dist(x, y, 0.85), soft);
    case 3: {  // upward triangle
      const double d = std::max({-y - 0.7, 0.866 * x + 0.5 * y - 0.45, -0.866 * x + 0.5 * y - 0.45});
      return smoothstep_edge(d, soft);
    }
    case 4: {  // plus
      const double arm = std::min(box_dist(x / 1.0, y / 0.3, 1.0) * 0.3, box_dist(x / 0.3, y / 1.0, 1.0) * 0.3);
      return smoothstep_edge(arm, soft);
    }
    case 5:  // square frame
      return smoothstep_edge(std::abs(box_dist(x, y, 0.75)) - 0.2, soft);
    case 6: {  // pair of dots
      const double a = std::hypot(x - 0.55, y) - 0.38;
      const double b = std::hypot(x + 0.55, y) - 0.38;
      return smoothstep_edge(std::min(a, b), soft);
    }
    default: {  // checkerboard disc
      if (r > 1.0) return smoothstep_edge(r - 1.0, soft);
      const bool on = (static_cast<int>(std::floor((x + 2.0) * 2.0)) + static_cast<int>(std::floor((y + 2.0) * 2.0))) % 2;
      return on ? smoothstep_edge(r - 1.0, soft) : 0.0;
    }
  }
}

void hsv_to_rgb(double h, double s, double v, double rgb[3]) {
  const double hh = std::fmod(h, 1.0) * 6.0;
  const int i = static_cast<int>(hh);
  const double f = hh - i, p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  const double table[6][3] = {{v, t, p}, {q, v, p}, {p, v, t}, {p, q, v}, {t, p, v}, {v, p, q}};
  for (int c = 0; c < 3; ++c) rgb[c] = table[i % 6][c];
}

}  // namespace

Dataset synth_dataset(std::uint64_t seed, std::size_t classes, std::size_t per_class, std::size_t height,
                      std::size_t width, const std::string& split) {
  if (classes < 2) throw ConfigError("synthetic dataset needs at least 2 classes");
  if (per_class == 0 || height < 8 || width < 8) throw ConfigError("synthetic dataset geometry too small");
  const std::size_t hue_bands = (classes + kSynthShapes - 1) / kSynthShapes;

  Dataset ds;
  ds.split = split;
  ds.height = height;
  ds.width = width;
  ds.classes = classes;
  for (std::size_t k = 0; k < classes; ++k) ds.class_names.push_back("class" + std::to_string(k));
  ds.pixels.resize(classes * per_class * ds.image_size());
  ds.labels.resize(classes * per_class);

  RngStream rng(seed, "data/" + split);
  const double scale = static_cast<double>(std::min(height, width));
  const std::size_t hw = height * width;
  // Interleave classes so that any prefix is balanced.
  for (std::size_t n = 0; n < per_class; ++n) {
    for (std::size_t k = 0; k < classes; ++k) {
      const std::size_t idx = n * classes + k;
      RngStream s = rng.fork(idx);
      ds.labels[idx] = static_cast<int>(k);
      double* img = ds.pixels.data() + idx * ds.image_size();

      const std::size_t kind = k % kSynthShapes;
      const std::size_t band = k / kSynthShapes;
      const double hue = hue_bands == 1 ? s.uniform()
                                        : (static_cast<double>(band) + s.uniform(0.15, 0.85)) /
                                              static_cast<double>(hue_bands);
      double fg[3], bg0[3], bg1[3];
      hsv_to_rgb(hue, s.uniform(0.5, 1.0), s.uniform(0.6, 1.0), fg);
      hsv_to_rgb(s.uniform(), s.uniform(0.0, 0.6), s.uniform(0.05, 0.35), bg0);
      hsv_to_rgb(s.uniform(), s.uniform(0.0, 0.6), s.uniform(0.05, 0.35), bg1);
      const double radius = s.uniform(0.2, 0.32) * scale;
      const double cy = s.uniform(0.35, 0.65) * static_cast<double>(height);
      const double cx = s.uniform(0.35, 0.65) * static_cast<double>(width);
      const double angle = s.uniform(-0.35, 0.35);
      const double ca = std::cos(angle), sa = std::sin(angle);
      const double grad_dir = s.uniform(0.0, 2.0 * std::numbers::pi);
      const double noise = s.uniform(0.02, 0.08);

      for (std::size_t y = 0; y < height; ++y) {
        for (std::size_t x = 0; x < width; ++x) {
          const double dy = (static_cast<double>(y) + 0.5 - cy) / radius;
          const double dx = (static_cast<double>(x) + 0.5 - cx) / radius;
          const double u = ca * dx + sa * dy, v = -sa * dx + ca * dy;
          const double a = coverage(kind, u, v, 1.0 / radius);
          const double t = 0.5 + 0.5 * std::sin(grad_dir) * (static_cast<double>(y) / height - 0.5) +
                           0.5 * std::cos(grad_dir) * (static_cast<double>(x) / width - 0.5);
          for (std::size_t c = 0; c < 3; ++c) {
            const double bg = bg0[c] * (1 - t) + bg1[c] * t;
            const double val = bg * (1 - a) + fg[c] * a + noise * s.normal();
            img[c * hw + y * width + x] = std::clamp(val, 0.0, 1.0);
          }
        }
      }
    }
  }
  return ds;
}

// --- netpbm directory loader ----------------------------------------------------------

namespace {

struct Raster {
  std::size_t height = 0, width = 0;
  std::vector<double> rgb;  // [3, H, W]
};

bool read_token(std::istream& in, std::string& tok) {
  tok.clear();
  char c;
  while (in.get(c)) {
    if (c == '#') {
      std::string skip;
      std::getline(in, skip);
    } else if (!std::isspace(static_cast<unsigned char>(c))) {
      tok.push_back(c);
      break;
    }
  }
  while (in.get(c)) {
    if (std::isspace(static_cast<unsigned char>(c))) break;
    tok.push_back(c);
  }
  return !tok.empty();
}

Raster read_netpbm(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::string magic, tw, th, tm;
  if (!read_token(in, magic) || !read_token(in, tw) || !read_token(in, th) || !read_token(in, tm)) {
    throw DataError("truncated netpbm header in " + path.string());
  }
  const bool color = magic == "P6" || magic == "P3";
  const bool binary = magic == "P6" || magic == "P5";
  if (!(color || magic == "P5" || magic == "P2")) throw DataError("unsupported format '" + magic + "' in " + path.string());
  Raster r;
  std::size_t maxval = 0;
  try {
    r.width = std::stoul(tw);
    r.height = std::stoul(th);
    maxval = std::stoul(tm);
  } catch (const std::exception&) {
    throw DataError("malformed netpbm header in " + path.string());
  }
  if (r.width == 0 || r.height == 0 || maxval == 0 || maxval > 65535) throw DataError("bad netpbm geometry in " + path.string());
  const std::size_t ch = color ? 3 : 1, hw = r.width * r.height;
  std::vector<double> raw(hw * ch);
  for (auto& v : raw) {
    std::size_t x = 0;
    if (binary) {
      unsigned char b[2];
      if (maxval < 256) {
        if (!in.read(reinterpret_cast<char*>(b), 1)) throw DataError("truncated pixel data in " + path.string());
        x = b[0];
      } else {
        if (!in.read(reinterpret_cast<char*>(b), 2)) throw DataError("truncated pixel data in " + path.string());
        x = (static_cast<std::size_t>(b[0]) << 8) | b[1];
      }
    } else {
      std::string tok;
      if (!read_token(in, tok)) throw DataError("truncated pixel data in " + path.string());
      x = std::stoul(tok);
    }
    v = std::min(1.0, static_cast<double>(x) / static_cast<double>(maxval));
  }
  r.rgb.resize(3 * hw);
  for (std::size_t i = 0; i < hw; ++i) {
    for (std::size_t c = 0; c < 3; ++c) r.rgb[c * hw + i] = raw[i * ch + (ch == 3 ? c : 0)];
  }
  return r;
}

bool is_netpbm(const fs::path& p) {
  const auto ext = p.extension().string();
  return ext == ".ppm" || ext == ".pgm" || ext == ".pnm";
}

}  // namespace

Dataset load_image_dir(const fs::path& root, LoadReport* report, const std::string& split) {
  std::error_code ec;
  if (!fs::is_directory(root, ec)) throw DataError("dataset root " + root.string() + " is not a directory");
  std::vector<fs::path> class_dirs;
  for (const auto& e : fs::directory_iterator(root)) {
    if (e.is_directory()) class_dirs.push_back(e.path());
  }
  std::sort(class_dirs.begin(), class_dirs.end());
  if (class_dirs.empty()) throw DataError("dataset root " + root.string() + " has no class directories");

  LoadReport local;
  LoadReport& rep = report ? *report : local;
  Dataset ds;
  ds.split = split;
  ds.classes = class_dirs.size();
  for (std::size_t k = 0; k < class_dirs.size(); ++k) {
    ds.class_names.push_back(class_dirs[k].filename().string());
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(class_dirs[k])) {
      if (e.is_regular_file()) files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      if (!is_netpbm(f)) {
        ++rep.skipped;
        rep.warnings.push_back("skipping " + f.string() + ": not a netpbm image");
        continue;
      }
      try {
        auto r = read_netpbm(f);
        if (ds.height == 0) {
          ds.height = r.height;
          ds.width = r.width;
        } else if (r.height != ds.height || r.width != ds.width) {
          throw DataError("size " + std::to_string(r.width) + "x" + std::to_string(r.height) + " differs from " +
                          std::to_string(ds.width) + "x" + std::to_string(ds.height));
        }
        ds.pixels.insert(ds.pixels.end(), r.rgb.begin(), r.rgb.end());
        ds.labels.push_back(static_cast<int>(k));
      } catch (const Error& e) {
        ++rep.skipped;
        rep.warnings.push_back("skipping " + f.string() + ": " + e.what());
      }
    }
  }
  if (ds.size() == 0) throw DataError("no readable images under " + root.string());
  return ds;
}

void write_ppm(const fs::path& path, std::span<const double> chw, std::size_t height, std::size_t width) {
  const std::size_t hw = height * width;
  if (chw.size() != 3 * hw) throw DimensionError("write_ppm expects a 3-channel image");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << "P6\n" << width << ' ' << height << "\n255\n";
  for (std::size_t i = 0; i < hw; ++i) {
    for (std::size_t c = 0; c < 3; ++c) {
      out.put(static_cast<char>(static_cast<unsigned char>(std::lround(std::clamp(chw[c * hw + i], 0.0, 1.0) * 255.0))));
    }
  }
  if (!out) throw IoError("failed writing " + path.string());
}

std::vector<std::vector<std::size_t>> batches(std::size_t count, std::size_t batch_size, RngStream* shuffle) {
  if (batch_size == 0) throw ConfigError("batch size must be at least 1");
  std::vector<std::size_t> order(count);
  for (std::size_t i = 0; i < count; ++i) order[i] = i;
  if (shuffle) {
    // Fisher-Yates with our own bounded draws keeps the order stable across standard libraries.
    for (std::size_t i = count; i > 1; --i) std::swap(order[i - 1], order[shuffle->below(i)]);
  }
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t start = 0; start < count; start += batch_size) {
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(count, start + batch_size)));
  }
  return out;
}

}  // namespace crosskd
