#include "crosskd/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "crosskd/errors.hpp"

namespace crosskd {

static_assert(std::endian::native == std::endian::little, "checkpoint format assumes little-endian hosts");

namespace {

constexpr char kMagic[8] = {'X', 'K', 'D', 'C', 'K', 'P', 'T', '\0'};

template <class T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

class Reader {
 public:
  explicit Reader(const std::string& s) : s_(s) {}

  template <class T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, s_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string out = s_.substr(pos_, n);
    pos_ += n;
    return out;
  }
  bool done() const { return pos_ == s_.size(); }

 private:
  void need(std::size_t n) const {
    if (s_.size() - pos_ < n) throw DataError("checkpoint is truncated or corrupt");
  }
  const std::string& s_;
  std::size_t pos_ = 0;
};

}  // namespace

void Checkpoint::add(const NamedTensors& params) {
  for (const auto& [name, t] : params) tensors.push_back({name, t.shape(), t.values()});
}

void Checkpoint::add(const NamedBuffers& buffers) {
  for (const auto& b : buffers) tensors.push_back({b.name, {b.values->size()}, *b.values});
}

const StoredTensor* Checkpoint::find(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return &t;
  }
  return nullptr;
}

bool Checkpoint::has_prefix(const std::string& prefix) const {
  for (const auto& t : tensors) {
    if (t.name.rfind(prefix, 0) == 0) return true;
  }
  return false;
}

void Checkpoint::restore(const NamedTensors& params) const {
  for (auto [name, t] : params) {
    const auto* s = find(name);
    if (!s) throw DataError("checkpoint is missing parameter '" + name + "'");
    if (s->shape != t.shape()) {
      throw DataError("checkpoint parameter '" + name + "' has shape " + shape_str(s->shape) + ", expected " +
                      shape_str(t.shape()));
    }
    std::copy(s->values.begin(), s->values.end(), t.mutable_data().begin());
  }
}

void Checkpoint::restore(const NamedBuffers& buffers) const {
  for (const auto& b : buffers) {
    const auto* s = find(b.name);
    if (!s) throw DataError("checkpoint is missing buffer '" + b.name + "'");
    if (s->values.size() != b.values->size()) throw DataError("checkpoint buffer '" + b.name + "' is mis-sized");
    *b.values = s->values;
  }
}

std::string serialize(const Checkpoint& ckpt) {
  std::string out(kMagic, sizeof(kMagic));
  put<std::uint32_t>(out, kCheckpointVersion);
  const std::string meta = ckpt.meta.dump();  // nlohmann objects keep keys sorted
  put<std::uint64_t>(out, meta.size());
  out += meta;
  put<std::uint64_t>(out, ckpt.tensors.size());
  for (const auto& t : ckpt.tensors) {
    if (numel(t.shape) != t.values.size()) throw DimensionError("stored tensor '" + t.name + "' is inconsistent");
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.name.size()));
    out += t.name;
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.shape.size()));
    for (auto d : t.shape) put<std::uint64_t>(out, d);
    out.append(reinterpret_cast<const char*>(t.values.data()), t.values.size() * sizeof(double));
  }
  return out;
}

Checkpoint deserialize(const std::string& bytes) {
  Reader r(bytes);
  if (r.bytes(sizeof(kMagic)) != std::string(kMagic, sizeof(kMagic))) throw DataError("not a checkpoint file");
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) throw DataError("unsupported checkpoint version " + std::to_string(version));
  Checkpoint ckpt;
  const auto meta_len = r.get<std::uint64_t>();
  try {
    ckpt.meta = nlohmann::json::parse(r.bytes(meta_len));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("checkpoint metadata is corrupt: ") + e.what());
  }
  const auto count = r.get<std::uint64_t>();
  for (std::uint64_t i = 0; i < count; ++i) {
    StoredTensor t;
    t.name = r.bytes(r.get<std::uint32_t>());
    const auto rank = r.get<std::uint32_t>();
    for (std::uint32_t d = 0; d < rank; ++d) t.shape.push_back(r.get<std::uint64_t>());
    const std::string raw = r.bytes(numel(t.shape) * sizeof(double));
    t.values.resize(numel(t.shape));
    std::memcpy(t.values.data(), raw.data(), raw.size());
    ckpt.tensors.push_back(std::move(t));
  }
  if (!r.done()) throw DataError("trailing bytes after checkpoint payload");
  return ckpt;
}

void write_file_atomic(const std::filesystem::path& path, const std::string& contents) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) throw IoError("failed writing " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  write_file_atomic(path, serialize(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return deserialize(ss.str());
}

}  // namespace crosskd
