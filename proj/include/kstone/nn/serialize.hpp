#pragma once

#include "kstone/nn/layers.hpp"

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

namespace kstone::nn {

/// Flattens parameters then buffers (collection order) into one blob.
std::vector<float> flatten_state(Module& m);
void restore_state(Module& m, const std::vector<float>& blob);
std::size_t state_size(Module& m);

/// Single-file container: magic, version, JSON header, float blobs.
///
///   bytes 0..7   magic (8 chars, zero padded)
///   u32          format version
///   u64          header length, then UTF-8 JSON header
///   u32          blob count, then per blob: u64 length + float32 data
struct BlobFile {
    std::string magic;
    std::uint32_t version = 1;
    std::string header;
    std::vector<std::vector<float>> blobs;
};

void write_blob_file(const BlobFile& f, const std::filesystem::path& path);
BlobFile read_blob_file(const std::filesystem::path& path, const std::string& expected_magic);

} // namespace kstone::nn
