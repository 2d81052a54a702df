#include "crosskd/config.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>

#include "crosskd/errors.hpp"

namespace crosskd {

std::string to_string(Mode m) {
  switch (m) {
    case Mode::CrossArch: return "cross-arch";
    case Mode::LogitsBaseline: return "logits-baseline";
    case Mode::StudentOnly: return "student-only";
    case Mode::TeacherPretrain: return "teacher-pretrain";
  }
  return "?";
}

Mode mode_from_string(const std::string& s) {
  if (s == "cross-arch") return Mode::CrossArch;
  if (s == "logits-baseline") return Mode::LogitsBaseline;
  if (s == "student-only") return Mode::StudentOnly;
  if (s == "teacher-pretrain") return Mode::TeacherPretrain;
  throw ConfigError("unknown mode '" + s + "'");
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

// --- value codecs ----------------------------------------------------------------

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  std::string s = buf;
  if (s.find_first_of(".eEn") == std::string::npos) s += ".0";
  return s;
}

std::string quote(const std::string& s) {
  std::string out = "\"";
  for (char c : s) {
    if (c == '"' || c == '\\') out += '\\';
    out += c;
  }
  return out + "\"";
}

std::string unquote(const std::string& key, const std::string& raw) {
  const auto v = trim(raw);
  if (v.size() >= 2 && v.front() == '"' && v.back() == '"') {
    std::string out;
    for (std::size_t i = 1; i + 1 < v.size(); ++i) {
      if (v[i] == '\\' && i + 2 < v.size()) ++i;
      out += v[i];
    }
    return out;
  }
  if (v.empty()) throw ConfigError("empty value for '" + key + "'");
  return v;  // bare word
}

double parse_double(const std::string& key, const std::string& raw) {
  const auto v = trim(raw);
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError("'" + key + "' expects a number, got '" + v + "'");
  }
}

std::uint64_t parse_uint(const std::string& key, const std::string& raw) {
  const auto v = trim(raw);
  std::uint64_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) {
    throw ConfigError("'" + key + "' expects a non-negative integer, got '" + v + "'");
  }
  return out;
}

bool parse_bool(const std::string& key, const std::string& raw) {
  const auto v = trim(raw);
  if (v == "true") return true;
  if (v == "false") return false;
  throw ConfigError("'" + key + "' expects true or false, got '" + v + "'");
}

std::vector<std::string> parse_list(const std::string& key, const std::string& raw) {
  auto v = trim(raw);
  if (v.size() < 2 || v.front() != '[' || v.back() != ']') {
    // A bare comma-separated list is accepted for CLI overrides.
    v = "[" + v + "]";
  }
  std::vector<std::string> out;
  std::string cur;
  bool in_str = false;
  for (std::size_t i = 1; i + 1 < v.size(); ++i) {
    const char c = v[i];
    if (c == '"') in_str = !in_str;
    if (c == ',' && !in_str) {
      if (!trim(cur).empty()) out.push_back(unquote(key, cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (!trim(cur).empty()) out.push_back(unquote(key, cur));
  return out;
}

struct Field {
  std::string key;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <class Get>
Field uint_field(std::string key, Get ref) {
  return {key,
          [ref, key](RunConfig& c, const std::string& v) { ref(c) = static_cast<std::remove_reference_t<decltype(ref(c))>>(parse_uint(key, v)); },
          [ref](const RunConfig& c) { return std::to_string(ref(const_cast<RunConfig&>(c))); }};
}

template <class Get>
Field double_field(std::string key, Get ref) {
  return {key, [ref, key](RunConfig& c, const std::string& v) { ref(c) = parse_double(key, v); },
          [ref](const RunConfig& c) { return fmt_double(ref(const_cast<RunConfig&>(c))); }};
}

template <class Get>
Field bool_field(std::string key, Get ref) {
  return {key, [ref, key](RunConfig& c, const std::string& v) { ref(c) = parse_bool(key, v); },
          [ref](const RunConfig& c) { return std::string(ref(const_cast<RunConfig&>(c)) ? "true" : "false"); }};
}

template <class Get>
Field string_field(std::string key, Get ref) {
  return {key, [ref, key](RunConfig& c, const std::string& v) { ref(c) = unquote(key, v); },
          [ref](const RunConfig& c) { return quote(ref(const_cast<RunConfig&>(c))); }};
}

const std::vector<Field>& fields() {
  static const std::vector<Field> table = [] {
    std::vector<Field> f;
    f.push_back(uint_field("seed", [](RunConfig& c) -> std::uint64_t& { return c.seed; }));
    f.push_back({"mode", [](RunConfig& c, const std::string& v) { c.mode = mode_from_string(unquote("mode", v)); },
                 [](const RunConfig& c) { return quote(to_string(c.mode)); }});
    f.push_back(string_field("out", [](RunConfig& c) -> std::string& { return c.out; }));
    f.push_back(string_field("teacher_checkpoint", [](RunConfig& c) -> std::string& { return c.teacher_checkpoint; }));
    f.push_back(bool_field("log_augment", [](RunConfig& c) -> bool& { return c.log_augment; }));

    f.push_back(string_field("data.source", [](RunConfig& c) -> std::string& { return c.data.source; }));
    f.push_back(string_field("data.path", [](RunConfig& c) -> std::string& { return c.data.path; }));
    f.push_back(uint_field("data.classes", [](RunConfig& c) -> std::size_t& { return c.data.classes; }));
    f.push_back(uint_field("data.per_class", [](RunConfig& c) -> std::size_t& { return c.data.per_class; }));
    f.push_back(uint_field("data.val_per_class", [](RunConfig& c) -> std::size_t& { return c.data.val_per_class; }));
    f.push_back(uint_field("data.teacher_per_class", [](RunConfig& c) -> std::size_t& { return c.data.teacher_per_class; }));
    f.push_back(uint_field("data.image_size", [](RunConfig& c) -> std::size_t& { return c.data.image_size; }));

    f.push_back(uint_field("teacher.depth", [](RunConfig& c) -> std::size_t& { return c.teacher.depth; }));
    f.push_back(uint_field("teacher.width", [](RunConfig& c) -> std::size_t& { return c.teacher.width; }));
    f.push_back(uint_field("teacher.heads", [](RunConfig& c) -> std::size_t& { return c.teacher.heads; }));
    f.push_back(uint_field("teacher.patch", [](RunConfig& c) -> std::size_t& { return c.teacher.patch; }));
    f.push_back(uint_field("teacher.mlp_ratio", [](RunConfig& c) -> std::size_t& { return c.teacher.mlp_ratio; }));
    f.push_back(uint_field("teacher.hint_layer", [](RunConfig& c) -> std::size_t& { return c.teacher.hint_layer; }));
    f.push_back(uint_field("student.depth", [](RunConfig& c) -> std::size_t& { return c.student.depth; }));
    f.push_back(uint_field("student.width", [](RunConfig& c) -> std::size_t& { return c.student.width; }));
    f.push_back(uint_field("student.stages", [](RunConfig& c) -> std::size_t& { return c.student.stages; }));

    f.push_back(uint_field("train.epochs", [](RunConfig& c) -> std::size_t& { return c.train.epochs; }));
    f.push_back(uint_field("train.batch_size", [](RunConfig& c) -> std::size_t& { return c.train.batch_size; }));
    f.push_back(double_field("train.lr", [](RunConfig& c) -> double& { return c.train.lr; }));
    f.push_back({"train.milestones",
                 [](RunConfig& c, const std::string& v) {
                   c.train.milestones.clear();
                   for (const auto& s : parse_list("train.milestones", v)) {
                     c.train.milestones.push_back(parse_uint("train.milestones", s));
                   }
                 },
                 [](const RunConfig& c) {
                   std::string s = "[";
                   for (std::size_t i = 0; i < c.train.milestones.size(); ++i) {
                     if (i) s += ", ";
                     s += std::to_string(c.train.milestones[i]);
                   }
                   return s + "]";
                 }});
    f.push_back(double_field("train.lr_gamma", [](RunConfig& c) -> double& { return c.train.lr_gamma; }));
    f.push_back(double_field("train.momentum", [](RunConfig& c) -> double& { return c.train.momentum; }));
    f.push_back(double_field("train.weight_decay", [](RunConfig& c) -> double& { return c.train.weight_decay; }));
    f.push_back(double_field("train.lambda", [](RunConfig& c) -> double& { return c.train.lambda; }));
    f.push_back(double_field("train.ce_weight", [](RunConfig& c) -> double& { return c.train.ce_weight; }));
    f.push_back(uint_field("train.disc_period", [](RunConfig& c) -> std::size_t& { return c.train.disc_period; }));
    f.push_back(double_field("train.disc_lr", [](RunConfig& c) -> double& { return c.train.disc_lr; }));
    f.push_back(uint_field("train.disc_hidden", [](RunConfig& c) -> std::size_t& { return c.train.disc_hidden; }));
    f.push_back(double_field("train.gl_dropout", [](RunConfig& c) -> double& { return c.train.gl_dropout; }));
    f.push_back(double_field("train.replace_threshold", [](RunConfig& c) -> double& { return c.train.replace_threshold; }));
    f.push_back(bool_field("train.gram_relation", [](RunConfig& c) -> bool& { return c.train.gram_relation; }));
    f.push_back(bool_field("train.non_saturating", [](RunConfig& c) -> bool& { return c.train.non_saturating; }));
    f.push_back(bool_field("train.ce_on_transformed", [](RunConfig& c) -> bool& { return c.train.ce_on_transformed; }));
    f.push_back(double_field("train.kd_temperature", [](RunConfig& c) -> double& { return c.train.kd_temperature; }));
    f.push_back(double_field("train.kd_alpha", [](RunConfig& c) -> double& { return c.train.kd_alpha; }));
    f.push_back(uint_field("train.eval_every", [](RunConfig& c) -> std::size_t& { return c.train.eval_every; }));
    f.push_back(double_field("train.teacher_lr", [](RunConfig& c) -> double& { return c.train.teacher_lr; }));
    f.push_back(double_field("train.teacher_weight_decay", [](RunConfig& c) -> double& { return c.train.teacher_weight_decay; }));

    f.push_back(bool_field("mvg.enabled", [](RunConfig& c) -> bool& { return c.mvg.enabled; }));
    f.push_back(double_field("mvg.threshold", [](RunConfig& c) -> double& { return c.mvg.threshold; }));
    f.push_back({"mvg.transforms",
                 [](RunConfig& c, const std::string& v) {
                   c.mvg.transforms.clear();
                   for (const auto& s : parse_list("mvg.transforms", v)) c.mvg.transforms.push_back(transform_from_string(s));
                 },
                 [](const RunConfig& c) {
                   std::string s = "[";
                   for (std::size_t i = 0; i < c.mvg.transforms.size(); ++i) {
                     if (i) s += ", ";
                     s += quote(to_string(c.mvg.transforms[i]));
                   }
                   return s + "]";
                 }});
    f.push_back(double_field("mvg.jitter_strength", [](RunConfig& c) -> double& { return c.mvg.jitter_strength; }));
    f.push_back(double_field("mvg.crop_min_scale", [](RunConfig& c) -> double& { return c.mvg.crop_min_scale; }));
    f.push_back(double_field("mvg.rotation_degrees", [](RunConfig& c) -> double& { return c.mvg.rotation_degrees; }));
    f.push_back(uint_field("mvg.mask_count", [](RunConfig& c) -> std::size_t& { return c.mvg.mask_count; }));
    f.push_back(uint_field("mvg.mask_size", [](RunConfig& c) -> std::size_t& { return c.mvg.mask_size; }));

    f.push_back(double_field("noisy.rotation_min", [](RunConfig& c) -> double& { return c.noisy.rotation_min; }));
    f.push_back(double_field("noisy.rotation_max", [](RunConfig& c) -> double& { return c.noisy.rotation_max; }));
    f.push_back(double_field("noisy.jitter_strength", [](RunConfig& c) -> double& { return c.noisy.jitter_strength; }));
    return f;
  }();
  return table;
}

const Field& field(const std::string& key) {
  for (const auto& f : fields()) {
    if (f.key == key) return f;
  }
  throw ConfigError("unknown config key '" + key + "'");
}

}  // namespace

void RunConfig::finalize() {
  teacher.kind = ModelKind::Teacher;
  student.kind = ModelKind::Student;
  teacher.image_size = student.image_size = data.image_size;
  teacher.classes = student.classes = data.classes;
  teacher.validate();
  student.validate();
  mvg.validate();
  if (data.source != "synthetic" && data.source != "directory") {
    throw ConfigError("data.source must be 'synthetic' or 'directory'");
  }
  if (data.source == "directory" && data.path.empty()) throw ConfigError("data.path is required for directory data");
  if (train.lambda < 0) throw ConfigError("lambda must be non-negative");
  if (!(train.lr > 0)) throw ConfigError("learning rate must be positive");
  if (train.disc_period < 1) throw ConfigError("discriminator update period must be >= 1");
  if (train.batch_size < 1) throw ConfigError("batch size must be >= 1");
  if (!std::is_sorted(train.milestones.begin(), train.milestones.end())) {
    throw ConfigError("lr milestones must be sorted ascending");
  }
  if (train.kd_alpha < 0 || train.kd_alpha > 1) throw ConfigError("kd_alpha must lie in [0, 1]");
  if (!(train.teacher_lr > 0)) throw ConfigError("teacher learning rate must be positive");
  if (train.eval_every < 1) throw ConfigError("eval_every must be >= 1");
  if (!(train.kd_temperature > 0)) throw ConfigError("kd_temperature must be positive");
  if (train.gl_dropout < 0 || train.gl_dropout >= 1) throw ConfigError("gl_dropout must lie in [0, 1)");
  if (noisy.rotation_min > noisy.rotation_max) throw ConfigError("noisy rotation range is inverted");
}

void RunConfig::set(const std::string& key, const std::string& value) { field(key).set(*this, value); }

std::vector<std::string> RunConfig::keys() {
  std::vector<std::string> out;
  for (const auto& f : fields()) out.push_back(f.key);
  return out;
}

std::string RunConfig::to_toml() const {
  std::ostringstream os;
  std::string section;
  for (const auto& f : fields()) {
    const auto dot = f.key.find('.');
    const std::string sec = dot == std::string::npos ? "" : f.key.substr(0, dot);
    const std::string name = dot == std::string::npos ? f.key : f.key.substr(dot + 1);
    if (sec != section) {
      os << "\n[" << sec << "]\n";
      section = sec;
    }
    os << name << " = " << f.get(*this) << "\n";
  }
  return os.str();
}

RunConfig RunConfig::from_toml(const std::string& text) {
  RunConfig cfg;
  std::istringstream in(text);
  std::string line, section;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    // Strip comments outside of quoted strings.
    bool in_str = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
      if (line[i] == '"') in_str = !in_str;
      if (line[i] == '#' && !in_str) {
        line.resize(i);
        break;
      }
    }
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError("line " + std::to_string(lineno) + ": malformed section header");
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string full = section.empty() ? key : section + "." + key;
    try {
      cfg.set(full, line.substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ConfigError("line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return cfg;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return from_toml(ss.str());
}

}  // namespace crosskd
