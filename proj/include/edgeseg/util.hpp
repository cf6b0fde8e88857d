#pragma once

#include <atomic>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <functional>
#include <mutex>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

namespace edgeseg {

/// FNV-1a, 64 bit.
inline std::uint64_t fnv1a(std::string_view s, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// 16 hex digits of the FNV-1a hash of `s`.
std::string hash_hex(std::string_view s);

std::string read_file(const std::filesystem::path& file);

/// Writes to a sibling temp file, then renames over `file`.
void write_file_atomic(const std::filesystem::path& file, std::string_view content);

/// Runs fn(i) for i in [0,n) on up to `workers` threads. The first exception is rethrown.
void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& fn);

}  // namespace edgeseg
