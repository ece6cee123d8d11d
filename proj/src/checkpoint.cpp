#include "densessm/checkpoint.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace densessm {

namespace {

constexpr char kMagic[4] = {'D', 'S', 'S', 'M'};

class Writer {
 public:
  template <class U>
  void put(U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) buf.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xFF));
  }
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    buf.insert(buf.end(), b, b + n);
  }
  template <class T>
  void payload(const Tensor<T>& t) {
    if constexpr (std::endian::native == std::endian::little) {
      bytes(t.ptr(), t.numel() * sizeof(T));
    } else {
      using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
      for (T v : t.data()) put(std::bit_cast<Bits>(v));
    }
  }
  std::vector<std::uint8_t> buf;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> b) : b_(b) {}

  void need(std::size_t n, const char* what) const {
    if (n > b_.size() - pos_) throw FormatError(std::string("truncated checkpoint while reading ") + what, pos_);
  }
  template <class U>
  U get(const char* what) {
    need(sizeof(U), what);
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<U>(b_[pos_ + i]) << (8 * i));
    pos_ += sizeof(U);
    return v;
  }
  std::string str(std::size_t n, const char* what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(b_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  template <class T>
  void payload(Tensor<T>& t) {
    const std::size_t n = t.numel() * sizeof(T);
    need(n, "tensor payload");
    if constexpr (std::endian::native == std::endian::little) {
      std::memcpy(t.mutable_ptr(), b_.data() + pos_, n);
      pos_ += n;
    } else {
      using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
      for (auto& v : t.mutable_data()) v = std::bit_cast<T>(get<Bits>("tensor payload"));
    }
  }
  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return b_.size() - pos_; }

 private:
  std::span<const std::uint8_t> b_;
  std::size_t pos_ = 0;
};

std::uint32_t crc32_of(const std::uint8_t* p, std::size_t n) {
  uLong crc = crc32(0L, Z_NULL, 0);
  while (n > 0) {
    const uInt chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    crc = crc32(crc, p, chunk);
    p += chunk;
    n -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

ModelConfig config_from_json(const nlohmann::json& j, std::size_t offset) {
  ModelConfig cfg;
  if (!j.is_object()) throw FormatError("checkpoint config is not a JSON object", offset);
  for (const auto& [key, value] : j.items()) {
    if (!value.is_string()) throw FormatError("checkpoint config value for '" + key + "' is not a string", offset);
    if (!cfg.set(key, value.get<std::string>())) {
      throw FormatError("checkpoint config has unknown key '" + key + "'", offset);
    }
  }
  return cfg;
}

struct Header {
  ModelConfig config;
  nlohmann::json meta;
};

Header read_header(Reader& r) {
  const std::string magic = r.str(4, "magic");
  if (std::memcmp(magic.data(), kMagic, 4) != 0) throw FormatError("bad checkpoint magic", 0);
  const std::size_t version_at = r.pos();
  const auto version = r.get<std::uint32_t>("version");
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version), version_at);
  }
  const auto json_len = r.get<std::uint64_t>("header length");
  const std::size_t json_at = r.pos();
  if (json_len > r.remaining()) throw FormatError("truncated checkpoint while reading header", json_at);
  const std::string text = r.str(static_cast<std::size_t>(json_len), "header");
  nlohmann::json j = nlohmann::json::parse(text, nullptr, false);
  if (j.is_discarded() || !j.is_object() || !j.contains("config")) {
    throw FormatError("malformed checkpoint header JSON", json_at);
  }
  Header h{config_from_json(j["config"], json_at), j.value("meta", nlohmann::json::object())};
  return h;
}

}  // namespace

template <class T>
std::vector<std::uint8_t> encode_checkpoint(const Checkpoint<T>& ckpt) {
  Writer w;
  w.bytes(kMagic, 4);
  w.put<std::uint32_t>(kCheckpointVersion);
  nlohmann::json header = {{"config", ckpt.config.to_map()}, {"meta", ckpt.meta}};
  const std::string text = header.dump();
  w.put<std::uint64_t>(text.size());
  w.bytes(text.data(), text.size());
  w.put<std::uint64_t>(ckpt.tensors.size());
  for (const auto& [name, t] : ckpt.tensors) {  // std::map iterates in name order
    w.put<std::uint32_t>(static_cast<std::uint32_t>(name.size()));
    w.bytes(name.data(), name.size());
    w.put<std::uint8_t>(static_cast<std::uint8_t>(dtype_of<T>));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) w.put<std::uint64_t>(d);
    w.payload(t);
  }
  w.put<std::uint32_t>(crc32_of(w.buf.data(), w.buf.size()));
  return std::move(w.buf);
}

template <class T>
Checkpoint<T> decode_checkpoint(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  Header h = read_header(r);
  Checkpoint<T> ckpt;
  ckpt.config = h.config;
  ckpt.meta = std::move(h.meta);

  const auto count = r.get<std::uint64_t>("tensor count");
  std::string previous;
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::size_t entry_at = r.pos();
    const auto name_len = r.get<std::uint32_t>("tensor name length");
    std::string name = r.str(name_len, "tensor name");
    if (i > 0 && name <= previous) throw FormatError("tensor table not in sorted name order at '" + name + "'", entry_at);
    const std::size_t dtype_at = r.pos();
    const auto dtype = r.get<std::uint8_t>("tensor dtype");
    if (dtype > static_cast<std::uint8_t>(DType::f64)) {
      throw FormatError("unknown dtype tag " + std::to_string(dtype) + " for tensor '" + name + "'", dtype_at);
    }
    if (static_cast<DType>(dtype) != dtype_of<T>) {
      throw FormatError("tensor '" + name + "' is " + std::string(dtype_name(static_cast<DType>(dtype))) +
                            ", expected " + std::string(dtype_name(dtype_of<T>)),
                        dtype_at);
    }
    const auto rank = r.get<std::uint32_t>("tensor rank");
    if (rank > 8) throw FormatError("implausible rank " + std::to_string(rank) + " for tensor '" + name + "'", dtype_at);
    Shape shape(rank);
    std::size_t numel = 1;
    for (auto& d : shape) {
      d = static_cast<std::size_t>(r.get<std::uint64_t>("tensor extent"));
      if (d != 0 && numel > r.remaining() / d) throw FormatError("truncated checkpoint in tensor '" + name + "'", r.pos());
      numel *= d;
    }
    r.need(numel * sizeof(T), "tensor payload");
    Tensor<T> t(shape);
    r.payload(t);
    previous = name;
    ckpt.tensors.emplace(std::move(name), std::move(t));
  }
  const std::size_t crc_at = r.pos();
  const auto stored = r.get<std::uint32_t>("checksum");
  if (r.remaining() != 0) throw FormatError("trailing bytes after checksum", r.pos());
  if (stored != crc32_of(bytes.data(), crc_at)) throw FormatError("checkpoint checksum mismatch", crc_at);
  return ckpt;
}

namespace {

std::vector<std::uint8_t> slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ArgumentError("cannot open checkpoint '" + path + "'");
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

}  // namespace

template <class T>
void write_checkpoint(const std::string& path, const Checkpoint<T>& ckpt) {
  const auto bytes = encode_checkpoint(ckpt);
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ArgumentError("cannot write checkpoint '" + path + "'");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw ArgumentError("short write to checkpoint '" + path + "'");
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) throw ArgumentError("cannot move checkpoint into '" + path + "'");
}

template <class T>
Checkpoint<T> read_checkpoint(const std::string& path) {
  const auto bytes = slurp(path);
  return decode_checkpoint<T>(bytes);
}

ModelConfig peek_checkpoint_config(const std::string& path) {
  const auto bytes = slurp(path);
  Reader r(bytes);
  return read_header(r).config;
}

template <class T>
Checkpoint<T> snapshot(const Model<T>& model) {
  Checkpoint<T> ckpt;
  ckpt.config = model.config();
  for (const auto& p : model.registry().params()) ckpt.tensors.emplace(p.name, p.var.value());
  return ckpt;
}

template <class T>
void restore(Model<T>& model, const Checkpoint<T>& ckpt) {
  if (!(ckpt.config == model.config())) {
    throw ConfigError("checkpoint config does not match the model config");
  }
  for (auto& p : model.registry().params()) {
    auto it = ckpt.tensors.find(p.name);
    if (it == ckpt.tensors.end()) throw ConfigError("checkpoint lacks parameter '" + p.name + "'");
    if (it->second.shape() != p.var.shape()) {
      throw ConfigError("checkpoint tensor '" + p.name + "' has shape " + shape_str(it->second.shape()) +
                        ", model expects " + shape_str(p.var.shape()));
    }
    p.var.set_value(it->second);
  }
  for (const auto& [name, t] : ckpt.tensors) {
    if (name.rfind("opt.", 0) == 0) continue;
    if (!model.registry().find(name)) throw ConfigError("checkpoint has unknown tensor '" + name + "'");
  }
}

#define DENSESSM_INSTANTIATE_CKPT(T)                                                   \
  template std::vector<std::uint8_t> encode_checkpoint<T>(const Checkpoint<T>&);       \
  template Checkpoint<T> decode_checkpoint<T>(std::span<const std::uint8_t>);          \
  template void write_checkpoint<T>(const std::string&, const Checkpoint<T>&);         \
  template Checkpoint<T> read_checkpoint<T>(const std::string&);                       \
  template Checkpoint<T> snapshot<T>(const Model<T>&);                                 \
  template void restore<T>(Model<T>&, const Checkpoint<T>&);

DENSESSM_INSTANTIATE_CKPT(float)
DENSESSM_INSTANTIATE_CKPT(double)

}  // namespace densessm
