#pragma once

// Small shared utilities: shortest round-trip decimal formatting (CSV
// exports must parse back bit-exactly) and FNV-1a hashing for byte-level
// parameter snapshots.

#include <charconv>
#include <cstdint>
#include <cstring>
#include <string>
#include <system_error>
#include <vector>

#include "hycam/graph.hpp"

namespace hycam {

// Shortest decimal string that round-trips to the same value.
template <typename T>
std::string format_number(T v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  if (ec != std::errc()) throw IoError("number formatting failed");
  return std::string(buf, ptr);
}

inline std::string format_number(int v) { return std::to_string(v); }
inline std::string format_number(std::int64_t v) { return std::to_string(v); }

// FNV-1a over a byte range.
inline std::uint64_t fnv1a(const void* data, std::size_t len,
                           std::uint64_t h = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

// Order- and content-sensitive hash of every parameter byte in a store.
template <typename T>
std::uint64_t hash_parameters(const ParameterStore<T>& store) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  store.for_each([&](const Parameter<T>& p) {
    h = fnv1a(p.name.data(), p.name.size(), h);
    h = fnv1a(p.value.data(), p.value.size() * sizeof(T), h);
  });
  return h;
}

}  // namespace hycam
