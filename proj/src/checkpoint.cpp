#include "conclu/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "conclu/config_io.hpp"
#include "conclu/errors.hpp"

namespace conclu {

namespace {

constexpr char kMagic[4] = {'C', 'C', 'L', 'U'};

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }

  template <typename T>
  void integer(T v) {
    for (std::size_t k = 0; k < sizeof(T); ++k) out_.push_back(static_cast<std::uint8_t>(v >> (8 * k)));
  }

  void f64(double v) { integer(std::bit_cast<std::uint64_t>(v)); }

  void string(const std::string& s) {
    integer(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }

  void tensor(const std::string& name, const diff::Tensor& t) {
    string(name);
    integer(static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) integer(static_cast<std::uint64_t>(d));
    for (double v : t.values()) f64(v);
  }

  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> in) : in_(in) {}

  const std::uint8_t* take(std::size_t n) {
    if (n > in_.size() - pos_) throw FormatError("checkpoint is truncated");
    const std::uint8_t* p = in_.data() + pos_;
    pos_ += n;
    return p;
  }

  template <typename T>
  T integer() {
    const std::uint8_t* p = take(sizeof(T));
    T v = 0;
    for (std::size_t k = 0; k < sizeof(T); ++k) v |= static_cast<T>(p[k]) << (8 * k);
    return v;
  }

  double f64() { return std::bit_cast<double>(integer<std::uint64_t>()); }

  std::string string() {
    const auto n = integer<std::uint32_t>();
    const std::uint8_t* p = take(n);
    return std::string(reinterpret_cast<const char*>(p), n);
  }

  // Reads a named tensor and checks it against the expected name and shape.
  void tensor_into(const std::string& expected, diff::Tensor& dst) {
    const std::string name = string();
    if (name != expected) {
      throw FormatError("checkpoint tensor '" + name + "' where '" + expected + "' was expected");
    }
    const auto rank = integer<std::uint32_t>();
    diff::Shape shape(rank);
    for (auto& d : shape) d = static_cast<std::size_t>(integer<std::uint64_t>());
    if (shape != dst.shape()) {
      throw FormatError("checkpoint tensor '" + name + "' has shape " + diff::shape_string(shape) +
                        ", model expects " + diff::shape_string(dst.shape()));
    }
    for (double& v : dst.values()) v = f64();
  }

  bool done() const { return pos_ == in_.size(); }

 private:
  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt) {
  Writer w;
  w.bytes(kMagic, 4);
  w.integer(kCheckpointVersion);
  w.string(to_json(ckpt.state.config).dump());
  w.integer(ckpt.epoch);
  w.integer(ckpt.global_step);
  w.integer(ckpt.state.step);
  w.string(ckpt.rng_state);
  const auto& s = ckpt.state;
  w.integer(static_cast<std::uint64_t>(3 * s.params.size() + s.buffers.size()));
  for (const auto& p : s.params) {
    w.tensor(p.name, p.value);
    w.tensor(p.name + "#m", p.first_moment);
    w.tensor(p.name + "#v", p.second_moment);
  }
  for (const auto& b : s.buffers) w.tensor(b.name, b.value);
  return w.take();
}

Checkpoint deserialize_checkpoint(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  if (std::memcmp(r.take(4), kMagic, 4) != 0) throw FormatError("not a checkpoint: bad magic bytes");
  const auto version = r.integer<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw FormatError("checkpoint format version " + std::to_string(version) +
                      " is not supported (expected " + std::to_string(kCheckpointVersion) + ")");
  }
  nlohmann::json cfg_json;
  try {
    cfg_json = nlohmann::json::parse(r.string());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint network config is not JSON: ") + e.what());
  }
  Checkpoint ckpt;
  try {
    ckpt.state = net::empty_model(network_config_from_json(cfg_json));
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint network config invalid: ") + e.what());
  }
  ckpt.epoch = r.integer<std::uint64_t>();
  ckpt.global_step = r.integer<std::uint64_t>();
  ckpt.state.step = r.integer<std::uint64_t>();
  ckpt.rng_state = r.string();
  auto& s = ckpt.state;
  const auto count = r.integer<std::uint64_t>();
  if (count != 3 * s.params.size() + s.buffers.size()) {
    throw FormatError("checkpoint holds " + std::to_string(count) + " tensors, model needs " +
                      std::to_string(3 * s.params.size() + s.buffers.size()));
  }
  for (auto& p : s.params) {
    r.tensor_into(p.name, p.value);
    r.tensor_into(p.name + "#m", p.first_moment);
    r.tensor_into(p.name + "#v", p.second_moment);
  }
  for (auto& b : s.buffers) r.tensor_into(b.name, b.value);
  if (!r.done()) throw FormatError("trailing bytes after checkpoint payload");
  return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const auto bytes = serialize_checkpoint(ckpt);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error("cannot open '" + path.string() + "' for writing");
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw Error("failed writing '" + path.string() + "'");
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open checkpoint '" + path.string() + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

}  // namespace conclu
