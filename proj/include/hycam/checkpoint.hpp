#pragma once

// "HYCAM1" binary checkpoint container. Layout, all integers little-endian:
//
//   magic            6 bytes, "HYCAM1"
//   precision        u8, bytes per value (4 = f32, 8 = f64)
//   record_len       u32, followed by that many bytes of JSON metadata
//   param_count      u64
//   per parameter:
//     name_len       u32, followed by the name bytes
//     rank           u32
//     dims           u32 × rank
//     values         IEEE-754 little-endian, row-major, precision bytes each
//
// The JSON record carries the model kind ("backbone" | "adapters") plus its
// config; adapter checkpoints also carry the hash of the backbone config
// record they were trained against, so evaluation can refuse mismatched
// pairs.

#include <bit>
#include <cstdint>
#include <fstream>
#include <istream>
#include <optional>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "hycam/adapters.hpp"
#include "hycam/backbone.hpp"
#include "hycam/config.hpp"
#include "hycam/graph.hpp"
#include "hycam/util.hpp"

namespace hycam {

namespace detail {

inline void put_bytes(std::ostream& os, const void* p, std::size_t n) {
  os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

inline void put_u8(std::ostream& os, std::uint8_t v) { put_bytes(os, &v, 1); }

inline void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  put_bytes(os, b, 4);
}

inline void put_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  put_bytes(os, b, 8);
}

inline void get_bytes(std::istream& is, void* p, std::size_t n, const char* what) {
  is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(is.gcount()) != n)
    throw IoError(std::string("checkpoint: truncated while reading ") + what);
}

inline std::uint8_t get_u8(std::istream& is, const char* what) {
  std::uint8_t v;
  get_bytes(is, &v, 1, what);
  return v;
}

inline std::uint32_t get_u32(std::istream& is, const char* what) {
  unsigned char b[4];
  get_bytes(is, b, 4, what);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

inline std::uint64_t get_u64(std::istream& is, const char* what) {
  unsigned char b[8];
  get_bytes(is, b, 8, what);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

template <typename T>
void put_value(std::ostream& os, T v) {
  if constexpr (sizeof(T) == 4)
    put_u32(os, std::bit_cast<std::uint32_t>(v));
  else
    put_u64(os, std::bit_cast<std::uint64_t>(v));
}

template <typename T>
T get_value(std::istream& is) {
  if constexpr (sizeof(T) == 4)
    return std::bit_cast<T>(get_u32(is, "values"));
  else
    return std::bit_cast<T>(get_u64(is, "values"));
}

constexpr char kMagic[6] = {'H', 'Y', 'C', 'A', 'M', '1'};

template <typename T>
void write_container(std::ostream& os, const nlohmann::json& record,
                     const ParameterStore<T>& params) {
  put_bytes(os, kMagic, sizeof(kMagic));
  put_u8(os, static_cast<std::uint8_t>(sizeof(T)));
  const std::string rec = record.dump();
  put_u32(os, static_cast<std::uint32_t>(rec.size()));
  put_bytes(os, rec.data(), rec.size());
  put_u64(os, params.size());
  params.for_each([&](const Parameter<T>& p) {
    put_u32(os, static_cast<std::uint32_t>(p.name.size()));
    put_bytes(os, p.name.data(), p.name.size());
    put_u32(os, static_cast<std::uint32_t>(p.shape.size()));
    for (int dim : p.shape) put_u32(os, static_cast<std::uint32_t>(dim));
    for (T v : p.value) put_value(os, v);
  });
}

// Reads the header and hands back the metadata record; the caller then
// streams the entries into an existing, identically-shaped store.
template <typename T>
nlohmann::json read_header(std::istream& is, std::uint64_t& param_count) {
  char magic[6];
  get_bytes(is, magic, 6, "magic");
  for (int i = 0; i < 6; ++i)
    if (magic[i] != kMagic[i]) throw IoError("checkpoint: bad magic, not a HYCAM1 container");
  const std::uint8_t precision = get_u8(is, "precision flag");
  if (precision != 4 && precision != 8)
    throw IoError("checkpoint: unsupported precision flag " + std::to_string(precision));
  if (precision != sizeof(T))
    throw IoError("checkpoint: precision mismatch: file stores f" +
                  std::to_string(precision * 8) + ", requested f" +
                  std::to_string(sizeof(T) * 8));
  const std::uint32_t rec_len = get_u32(is, "record length");
  std::string rec(rec_len, '\0');
  get_bytes(is, rec.data(), rec_len, "metadata record");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(rec);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("checkpoint: corrupt metadata record: ") + e.what());
  }
  param_count = get_u64(is, "parameter count");
  return j;
}

template <typename T>
void read_entries(std::istream& is, std::uint64_t param_count, ParameterStore<T>& params) {
  std::uint64_t seen = 0;
  for (std::uint64_t e = 0; e < param_count; ++e) {
    const std::uint32_t name_len = get_u32(is, "name length");
    std::string name(name_len, '\0');
    get_bytes(is, name.data(), name_len, "name");
    Parameter<T>* p = params.find(name);
    if (p == nullptr) throw IoError("checkpoint: unexpected parameter '" + name + "'");
    const std::uint32_t rank = get_u32(is, "rank");
    if (rank != p->shape.size())
      throw IoError("checkpoint: rank mismatch for '" + name + "'");
    std::int64_t numel = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
      const std::uint32_t dim = get_u32(is, "dims");
      if (static_cast<int>(dim) != p->shape[i])
        throw IoError("checkpoint: shape mismatch for '" + name + "'");
      numel *= dim;
    }
    if (numel != p->size()) throw IoError("checkpoint: size mismatch for '" + name + "'");
    for (auto& v : p->value) v = get_value<T>(is);
    ++seen;
  }
  if (seen != params.size())
    throw IoError("checkpoint: file has " + std::to_string(seen) + " parameters, model needs " +
                  std::to_string(params.size()));
}

}  // namespace detail

inline std::uint64_t backbone_config_hash(const BackboneConfig& cfg) {
  const std::string rec = backbone_record(cfg).dump();
  return fnv1a(rec.data(), rec.size());
}

inline std::string hash_hex(std::uint64_t h) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, h >>= 4) s[static_cast<std::size_t>(i)] = digits[h & 0xf];
  return s;
}

inline std::uint64_t parse_hash_hex(const std::string& s) {
  if (s.size() != 16) throw IoError("checkpoint: bad config-hash field '" + s + "'");
  std::uint64_t h = 0;
  for (char c : s) {
    h <<= 4;
    if (c >= '0' && c <= '9')
      h |= static_cast<std::uint64_t>(c - '0');
    else if (c >= 'a' && c <= 'f')
      h |= static_cast<std::uint64_t>(c - 'a' + 10);
    else
      throw IoError("checkpoint: bad config-hash field '" + s + "'");
  }
  return h;
}

// --------------------------------------------------------------------------
// backbone checkpoints

template <typename T>
void save_backbone(const std::string& path, const BackboneModel<T>& m, int step) {
  nlohmann::json rec = {{"kind", "backbone"},
                        {"backbone", backbone_record(m.config)},
                        {"config_hash", hash_hex(backbone_config_hash(m.config))},
                        {"step", step}};
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("checkpoint: cannot write " + path);
  detail::write_container(f, rec, m.params);
  f.flush();
  if (!f) throw IoError("checkpoint: write failed for " + path);
}

template <typename T>
struct LoadedBackbone {
  BackboneModel<T> model;
  int step = 0;
};

template <typename T>
LoadedBackbone<T> load_backbone(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("checkpoint: cannot read " + path);
  std::uint64_t count = 0;
  nlohmann::json rec = detail::read_header<T>(f, count);
  if (rec.value("kind", "") != "backbone")
    throw IoError("checkpoint: expected a backbone checkpoint, found kind '" +
                  rec.value("kind", "<missing>") + "'");
  BackboneConfig cfg;
  detail::read_backbone(rec.at("backbone"), cfg);
  cfg.validate();
  LoadedBackbone<T> out{make_backbone<T>(cfg, 0), rec.value("step", 0)};
  detail::read_entries(f, count, out.model.params);
  return out;
}

// --------------------------------------------------------------------------
// adapter checkpoints

template <typename T>
void save_adapters(const std::string& path, const AdapterSet<T>& a, double lambda_balance,
                   const BackboneConfig& backbone_cfg, int best_step) {
  nlohmann::json rec = {{"kind", "adapters"},
                        {"adapter", adapter_record(a.config, lambda_balance)},
                        {"d_model", a.d},
                        {"n_layers", static_cast<int>(a.layers.size())},
                        {"backbone_hash", hash_hex(backbone_config_hash(backbone_cfg))},
                        {"best_step", best_step}};
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("checkpoint: cannot write " + path);
  detail::write_container(f, rec, a.params);
  f.flush();
  if (!f) throw IoError("checkpoint: write failed for " + path);
}

template <typename T>
struct LoadedAdapters {
  AdapterSet<T> adapters;
  double lambda_balance = 0.0;
  int best_step = 0;
  std::uint64_t backbone_hash = 0;
};

// `expected_backbone` (when given) must hash to the value recorded at save
// time; a mismatch means the adapters were trained against a different
// backbone architecture.
template <typename T>
LoadedAdapters<T> load_adapters(const std::string& path,
                                const std::optional<BackboneConfig>& expected_backbone) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("checkpoint: cannot read " + path);
  std::uint64_t count = 0;
  nlohmann::json rec = detail::read_header<T>(f, count);
  if (rec.value("kind", "") != "adapters")
    throw IoError("checkpoint: expected an adapter checkpoint, found kind '" +
                  rec.value("kind", "<missing>") + "'");
  AdapterConfig cfg;
  double lambda = 0.0;
  detail::read_adapter(rec.at("adapter"), cfg, lambda);
  const int d_model = rec.at("d_model").get<int>();
  const int n_layers = rec.at("n_layers").get<int>();
  const std::uint64_t hash = parse_hash_hex(rec.at("backbone_hash").get<std::string>());
  if (expected_backbone && backbone_config_hash(*expected_backbone) != hash)
    throw ConfigError(
        "checkpoint: backbone config hash mismatch: adapters were trained against a different "
        "backbone (recorded " +
        hash_hex(hash) + ", current " + hash_hex(backbone_config_hash(*expected_backbone)) + ")");
  LoadedAdapters<T> out;
  out.adapters = make_adapters<T>(cfg, d_model, n_layers, 0);
  out.lambda_balance = lambda;
  out.best_step = rec.value("best_step", 0);
  out.backbone_hash = hash;
  detail::read_entries(f, count, out.adapters.params);
  return out;
}

}  // namespace hycam
