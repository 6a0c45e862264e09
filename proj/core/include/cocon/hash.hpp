#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <string_view>

namespace cocon {

/// Incremental SHA-256, hex digest.
class Sha256 {
 public:
  Sha256();
  ~Sha256();
  Sha256(const Sha256&) = delete;
  Sha256& operator=(const Sha256&) = delete;

  void update(std::span<const unsigned char> bytes);
  void update(std::string_view text);
  std::string hex_digest();

 private:
  void* ctx_;
};

std::string sha256_hex(std::string_view text);
std::string sha256_file(const std::filesystem::path& path);

}  // namespace cocon
