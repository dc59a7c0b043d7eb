#pragma once

#include "afp/network.hpp"
#include "afp/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <string>

namespace afp {

// Checkpoint file, little-endian:
//   "AFCK" | version u32 | descriptor length u64 | descriptor UTF-8 |
//   param count u64 | f32 params | f32 m | f32 v | t u64 | seed u64
inline constexpr std::uint32_t kCheckpointVersion = 1;
void save_checkpoint(const ModelCheckpoint& model, const std::filesystem::path& path);
ModelCheckpoint load_checkpoint(const std::filesystem::path& path);

// Tensor blob, little-endian:
//   "AFPT" | version u32 | dtype u8 (0 = f32) | rank u8 | dims u32[rank] | f32 payload
inline constexpr std::uint32_t kBlobVersion = 1;
void save_blob(const Tensor& t, const std::filesystem::path& path);
Tensor load_blob(const std::filesystem::path& path);

std::string encode_blob(const Tensor& t);
Tensor decode_blob(const std::string& bytes, const std::string& what = "blob");

// Whole-file binary IO; both throw FormatError on failure.
std::string read_file(const std::filesystem::path& path);
// Creates missing parent directories.
void write_file(const std::filesystem::path& path, const std::string& bytes);

// Lowercase hex SHA-256 of a file's contents.
std::string sha256_file(const std::filesystem::path& path);
std::string sha256_bytes(const std::string& bytes);

}  // namespace afp
