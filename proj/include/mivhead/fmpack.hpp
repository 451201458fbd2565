#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "mivhead/tensor.hpp"

// FMPack: frozen multi-block patch-level feature maps on disk.
//
//   DIR/manifest.json  UTF-8 JSON (format_version, backbone_family, blocks,
//                      records, provenance)
//   DIR/tensors.bin    little-endian IEEE-754 binary32. Each record is the
//                      concatenation, in manifest block order, of the block's
//                      (h,w,c) row-major patches followed by its cls row
//                      (c values) when the pack is vit.
namespace mivhead::fmpack {

inline constexpr int kFormatVersion = 1;

enum class BackboneFamily { cnn, vit };
enum class Role { support, query, pseudo_query };

std::string to_string(BackboneFamily f);
std::string to_string(Role r);
BackboneFamily parse_family(const std::string& s);
Role parse_role(const std::string& s);

struct BlockShape {
  int block_id = -1;  // negative ids count from the backbone's end
  std::size_t h = 0, w = 0, c = 0;

  friend bool operator==(const BlockShape&, const BlockShape&) = default;
};

struct BlockFeatures {
  int block_id = -1;
  std::size_t h = 0, w = 0, c = 0;
  std::vector<float> patches;              // h*w*c
  std::optional<std::vector<float>> cls;   // c, vit only

  BlockShape shape() const { return {block_id, h, w, c}; }
  // Widened copies for compute.
  Tensor patch_tensor() const;
  Tensor cls_tensor() const;

  friend bool operator==(const BlockFeatures&, const BlockFeatures&) = default;
};

struct ImageRecord {
  std::string image_id;
  int class_label = 0;
  Role role = Role::query;
  std::optional<std::string> source_id;
  std::vector<BlockFeatures> blocks;

  const BlockFeatures& block(int block_id) const;

  friend bool operator==(const ImageRecord&, const ImageRecord&) = default;
};

struct IndexEntry {
  std::string image_id;
  std::uint64_t offset = 0;
  Role role = Role::query;
  int class_label = 0;
  std::optional<std::string> source_id;
};

struct PackManifest {
  int format_version = kFormatVersion;
  BackboneFamily backbone_family = BackboneFamily::cnn;
  std::vector<BlockShape> blocks;
  std::vector<IndexEntry> records;
  std::string provenance;

  // Bytes occupied by one record in tensors.bin.
  std::uint64_t record_bytes() const;
};

// Validates the records, then writes DIR atomically (staged in a sibling
// directory and renamed). Nothing is written on error.
void write_pack(const std::filesystem::path& dir, const std::vector<ImageRecord>& records, BackboneFamily family,
                const std::string& provenance = "");

// Read-only view of a pack. The tensor file is loaded once; records are
// decoded on access, so concurrent readers are safe.
class PackReader {
 public:
  static PackReader open(const std::filesystem::path& dir);

  const PackManifest& manifest() const { return manifest_; }
  BackboneFamily family() const { return manifest_.backbone_family; }
  std::size_t size() const { return manifest_.records.size(); }
  bool contains(const std::string& image_id) const { return index_.count(image_id) != 0; }

  const IndexEntry& entry(const std::string& image_id) const;
  ImageRecord record(const std::string& image_id) const;
  ImageRecord record_at(std::size_t position) const;

 private:
  PackManifest manifest_;
  std::vector<unsigned char> blob_;
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace mivhead::fmpack
