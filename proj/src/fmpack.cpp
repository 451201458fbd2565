#include "mivhead/fmpack.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <set>

#include <json.hpp>

#include "mivhead/error.hpp"
#include "mivhead/io.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace mivhead::fmpack {

std::string to_string(BackboneFamily f) { return f == BackboneFamily::cnn ? "cnn" : "vit"; }

std::string to_string(Role r) {
  switch (r) {
    case Role::support:
      return "support";
    case Role::query:
      return "query";
    case Role::pseudo_query:
      return "pseudo_query";
  }
  return "query";
}

BackboneFamily parse_family(const std::string& s) {
  if (s == "cnn") return BackboneFamily::cnn;
  if (s == "vit") return BackboneFamily::vit;
  throw FormatError("unknown backbone_family '" + s + "'");
}

Role parse_role(const std::string& s) {
  if (s == "support") return Role::support;
  if (s == "query") return Role::query;
  if (s == "pseudo_query") return Role::pseudo_query;
  throw FormatError("unknown role '" + s + "'");
}

Tensor BlockFeatures::patch_tensor() const {
  return Tensor({h, w, c}, std::vector<double>(patches.begin(), patches.end()));
}

Tensor BlockFeatures::cls_tensor() const {
  if (!cls) throw NotFoundError("block " + std::to_string(block_id) + " has no cls row");
  return Tensor({c}, std::vector<double>(cls->begin(), cls->end()));
}

const BlockFeatures& ImageRecord::block(int block_id) const {
  for (const auto& b : blocks)
    if (b.block_id == block_id) return b;
  throw NotFoundError("record '" + image_id + "' has no block " + std::to_string(block_id));
}

std::uint64_t PackManifest::record_bytes() const {
  std::uint64_t n = 0;
  for (const auto& b : blocks) n += b.h * b.w * b.c + (backbone_family == BackboneFamily::vit ? b.c : 0);
  return n * sizeof(float);
}

namespace {

void put_f32(std::string& out, float v) {
  std::uint32_t bits = std::bit_cast<std::uint32_t>(v);
  if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
  char bytes[4];
  std::memcpy(bytes, &bits, 4);
  out.append(bytes, 4);
}

float get_f32(const unsigned char* p) {
  std::uint32_t bits;
  std::memcpy(&bits, p, 4);
  if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
  return std::bit_cast<float>(bits);
}

json manifest_to_json(const PackManifest& m) {
  json blocks = json::array();
  for (const auto& b : m.blocks) blocks.push_back({{"block_id", b.block_id}, {"h", b.h}, {"w", b.w}, {"c", b.c}});
  json recs = json::array();
  for (const auto& r : m.records) {
    json e = {{"image_id", r.image_id}, {"offset", r.offset}, {"role", to_string(r.role)}, {"class_label", r.class_label}};
    if (r.source_id) e["source_id"] = *r.source_id;
    recs.push_back(std::move(e));
  }
  return {{"format_version", m.format_version},
          {"backbone_family", to_string(m.backbone_family)},
          {"blocks", std::move(blocks)},
          {"records", std::move(recs)},
          {"provenance", m.provenance}};
}

PackManifest manifest_from_json(const json& j) {
  PackManifest m;
  try {
    m.format_version = j.at("format_version").get<int>();
    if (m.format_version != kFormatVersion) {
      throw FormatError("unsupported format_version " + std::to_string(m.format_version) + " (expected " +
                        std::to_string(kFormatVersion) + ")");
    }
    m.backbone_family = parse_family(j.at("backbone_family").get<std::string>());
    for (const auto& b : j.at("blocks")) {
      m.blocks.push_back({b.at("block_id").get<int>(), b.at("h").get<std::size_t>(), b.at("w").get<std::size_t>(),
                          b.at("c").get<std::size_t>()});
    }
    for (const auto& r : j.at("records")) {
      IndexEntry e;
      e.image_id = r.at("image_id").get<std::string>();
      e.offset = r.at("offset").get<std::uint64_t>();
      e.role = parse_role(r.at("role").get<std::string>());
      e.class_label = r.at("class_label").get<int>();
      if (r.contains("source_id")) e.source_id = r.at("source_id").get<std::string>();
      m.records.push_back(std::move(e));
    }
    m.provenance = j.value("provenance", "");
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed manifest: ") + e.what());
  }
  return m;
}

void validate_records(const std::vector<ImageRecord>& records, BackboneFamily family) {
  if (records.empty()) throw FormatError("write_pack: no records");
  const auto& first = records.front();
  if (first.blocks.empty()) throw FormatError("write_pack: records carry no blocks");
  std::set<std::string> ids;
  std::unordered_map<std::string, int> labels;
  for (const auto& r : records) {
    if (!ids.insert(r.image_id).second) throw FormatError("write_pack: duplicate image_id '" + r.image_id + "'");
    labels[r.image_id] = r.class_label;
    if (r.blocks.size() != first.blocks.size()) {
      throw FormatError("write_pack: record '" + r.image_id + "' has a different block list");
    }
    for (std::size_t k = 0; k < r.blocks.size(); ++k) {
      const auto& b = r.blocks[k];
      if (!(b.shape() == first.blocks[k].shape())) {
        throw FormatError("write_pack: heterogeneous shape for block " + std::to_string(b.block_id) + " in record '" +
                          r.image_id + "'");
      }
      if (b.h == 0 || b.w == 0 || b.c == 0) throw FormatError("write_pack: empty block in '" + r.image_id + "'");
      if (b.patches.size() != b.h * b.w * b.c) {
        throw FormatError("write_pack: patch buffer size mismatch in '" + r.image_id + "'");
      }
      const bool want_cls = family == BackboneFamily::vit;
      if (b.cls.has_value() != want_cls) {
        throw FormatError("write_pack: cls row presence must match backbone family in '" + r.image_id + "'");
      }
      if (b.cls && b.cls->size() != b.c) throw FormatError("write_pack: cls row size mismatch in '" + r.image_id + "'");
    }
    if (r.role == Role::pseudo_query && !r.source_id) {
      throw FormatError("write_pack: pseudo-query '" + r.image_id + "' lacks source_id");
    }
  }
  for (const auto& r : records) {
    if (r.role != Role::pseudo_query) continue;
    auto it = labels.find(*r.source_id);
    if (it != labels.end() && it->second != r.class_label) {
      throw FormatError("write_pack: pseudo-query '" + r.image_id + "' label differs from its source");
    }
  }
}

}  // namespace

void write_pack(const fs::path& dir, const std::vector<ImageRecord>& records, BackboneFamily family,
                const std::string& provenance) {
  validate_records(records, family);
  PackManifest m;
  m.backbone_family = family;
  m.provenance = provenance;
  for (const auto& b : records.front().blocks) m.blocks.push_back(b.shape());
  const std::uint64_t rec_bytes = m.record_bytes();

  std::string blob;
  blob.reserve(records.size() * rec_bytes);
  for (const auto& r : records) {
    m.records.push_back({r.image_id, blob.size(), r.role, r.class_label, r.source_id});
    for (const auto& b : r.blocks) {
      for (float v : b.patches) put_f32(blob, v);
      if (b.cls)
        for (float v : *b.cls) put_f32(blob, v);
    }
  }

  io::StagedDirectory staged(dir);
  io::write_file_atomic(staged.path() / "tensors.bin", blob);
  io::write_file_atomic(staged.path() / "manifest.json", manifest_to_json(m).dump(1) + "\n");
  staged.commit();
}

PackReader PackReader::open(const fs::path& dir) {
  PackReader r;
  json j;
  try {
    j = json::parse(io::read_file(dir / "manifest.json"));
  } catch (const json::exception& e) {
    throw FormatError("manifest.json is not valid JSON: " + std::string(e.what()));
  }
  r.manifest_ = manifest_from_json(j);
  const std::string raw = io::read_file(dir / "tensors.bin");
  r.blob_.assign(raw.begin(), raw.end());

  const auto& m = r.manifest_;
  const std::uint64_t rec_bytes = m.record_bytes();
  for (std::size_t i = 0; i < m.records.size(); ++i) {
    const auto& e = m.records[i];
    if (!r.index_.emplace(e.image_id, i).second) throw FormatError("duplicate image_id '" + e.image_id + "' in index");
    if (i > 0 && e.offset < m.records[i - 1].offset + rec_bytes) {
      throw FormatError("record '" + e.image_id + "' overlaps its predecessor (offset " + std::to_string(e.offset) +
                        ")");
    }
    if (e.offset + rec_bytes > r.blob_.size()) {
      throw FormatError("tensors.bin truncated: record '" + e.image_id + "' needs bytes [" + std::to_string(e.offset) +
                        ", " + std::to_string(e.offset + rec_bytes) + ") but file has " +
                        std::to_string(r.blob_.size()));
    }
    if (e.role == Role::pseudo_query && !e.source_id) {
      throw FormatError("pseudo-query '" + e.image_id + "' lacks source_id");
    }
  }
  const std::uint64_t expected = m.records.empty() ? 0 : m.records.back().offset + rec_bytes;
  if (r.blob_.size() != expected) {
    throw FormatError("tensors.bin has " + std::to_string(r.blob_.size()) + " bytes, index covers " +
                      std::to_string(expected));
  }
  return r;
}

const IndexEntry& PackReader::entry(const std::string& image_id) const {
  auto it = index_.find(image_id);
  if (it == index_.end()) throw NotFoundError("image_id '" + image_id + "' not in pack");
  return manifest_.records[it->second];
}

ImageRecord PackReader::record(const std::string& image_id) const {
  auto it = index_.find(image_id);
  if (it == index_.end()) throw NotFoundError("image_id '" + image_id + "' not in pack");
  return record_at(it->second);
}

ImageRecord PackReader::record_at(std::size_t position) const {
  const auto& e = manifest_.records.at(position);
  ImageRecord rec;
  rec.image_id = e.image_id;
  rec.class_label = e.class_label;
  rec.role = e.role;
  rec.source_id = e.source_id;
  const unsigned char* p = blob_.data() + e.offset;
  for (const auto& s : manifest_.blocks) {
    BlockFeatures b;
    b.block_id = s.block_id;
    b.h = s.h;
    b.w = s.w;
    b.c = s.c;
    b.patches.resize(s.h * s.w * s.c);
    for (auto& v : b.patches) {
      v = get_f32(p);
      p += 4;
    }
    if (manifest_.backbone_family == BackboneFamily::vit) {
      b.cls.emplace(s.c);
      for (auto& v : *b.cls) {
        v = get_f32(p);
        p += 4;
      }
    }
    rec.blocks.push_back(std::move(b));
  }
  return rec;
}

}  // namespace mivhead::fmpack
