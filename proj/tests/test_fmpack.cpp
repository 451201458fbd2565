#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>
#include <thread>

#include <unistd.h>

#include "mivhead/error.hpp"
#include "mivhead/fmpack.hpp"
#include "mivhead/io.hpp"

using namespace mivhead;
using namespace mivhead::fmpack;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("mivhead_fmpack_" + std::to_string(::getpid()) + "_" + name);
  fs::remove_all(p);
  return p;
}

BlockFeatures make_block(int id, std::size_t h, std::size_t w, std::size_t c, bool vit, std::mt19937_64& rng) {
  std::normal_distribution<float> n;
  BlockFeatures b{id, h, w, c, std::vector<float>(h * w * c), std::nullopt};
  for (auto& v : b.patches) v = n(rng);
  if (vit) {
    b.cls.emplace(c);
    for (auto& v : *b.cls) v = n(rng);
  }
  return b;
}

std::vector<ImageRecord> random_records(std::mt19937_64& rng, bool vit, std::size_t count) {
  std::uniform_int_distribution<std::size_t> dim(1, 5);
  const std::size_t h2 = dim(rng), w2 = dim(rng), h1 = dim(rng), w1 = dim(rng), c = dim(rng) * 2;
  std::vector<ImageRecord> out;
  for (std::size_t i = 0; i < count; ++i) {
    ImageRecord r;
    r.image_id = "img" + std::to_string(i);
    r.class_label = static_cast<int>(i % 3);
    r.role = i % 4 == 3 ? Role::query : Role::support;
    r.blocks.push_back(make_block(-2, h2, w2, c, vit, rng));
    r.blocks.push_back(make_block(-1, h1, w1, c, vit, rng));
    out.push_back(std::move(r));
  }
  ImageRecord p = out.front();
  p.image_id = "img0_view";
  p.role = Role::pseudo_query;
  p.source_id = "img0";
  out.push_back(std::move(p));
  return out;
}

bool bit_equal(const std::vector<float>& a, const std::vector<float>& b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0;
}

}  // namespace

TEST_CASE("round trip of three records") {
  std::mt19937_64 rng(1);
  auto recs = random_records(rng, false, 3);
  recs.pop_back();
  const auto dir = scratch("rt3");
  write_pack(dir, recs, BackboneFamily::cnn, "unit test");
  const auto pack = PackReader::open(dir);
  REQUIRE(pack.size() == 3);
  CHECK(pack.manifest().provenance == "unit test");
  for (const auto& r : recs) {
    const auto got = pack.record(r.image_id);
    CHECK(got == r);
    for (std::size_t k = 0; k < r.blocks.size(); ++k) CHECK(bit_equal(got.blocks[k].patches, r.blocks[k].patches));
  }
  fs::remove_all(dir);
}

TEST_CASE("round trip property over random shapes and families") {
  for (int seed = 0; seed < 30; ++seed) {
    std::mt19937_64 rng(100 + seed);
    const bool vit = seed % 2 == 1;
    const auto recs = random_records(rng, vit, 1 + seed % 6);
    const auto dir = scratch("prop");
    write_pack(dir, recs, vit ? BackboneFamily::vit : BackboneFamily::cnn);
    const auto pack = PackReader::open(dir);
    REQUIRE(pack.size() == recs.size());
    CHECK(pack.family() == (vit ? BackboneFamily::vit : BackboneFamily::cnn));
    for (std::size_t i = 0; i < recs.size(); ++i) {
      CHECK(pack.record_at(i) == recs[i]);
      CHECK(pack.entry(recs[i].image_id).offset == i * pack.manifest().record_bytes());
    }
    const auto pq = pack.record("img0_view");
    CHECK(pq.role == Role::pseudo_query);
    CHECK(pq.source_id == std::optional<std::string>("img0"));
    fs::remove_all(dir);
  }
}

TEST_CASE("single 2x2x4 block gives a 64 byte tensor file") {
  ImageRecord r;
  r.image_id = "only";
  r.role = Role::support;
  BlockFeatures b{-1, 2, 2, 4, std::vector<float>(16), std::nullopt};
  for (std::size_t i = 0; i < 16; ++i) b.patches[i] = static_cast<float>(i) * 0.5f;
  r.blocks.push_back(b);
  const auto dir = scratch("64");
  write_pack(dir, {r}, BackboneFamily::cnn);
  CHECK(fs::file_size(dir / "tensors.bin") == 64);
  const auto bytes = io::read_file(dir / "tensors.bin");
  // 0.5f little-endian at float index 1
  CHECK(static_cast<unsigned char>(bytes[4]) == 0x00);
  CHECK(static_cast<unsigned char>(bytes[7]) == 0x3f);
  const auto t = PackReader::open(dir).record("only").block(-1).patch_tensor();
  CHECK(t.shape() == Shape{2, 2, 4});
  CHECK(t[15] == 7.5);
  fs::remove_all(dir);
}

TEST_CASE("writer rejects invalid record sets and writes nothing") {
  std::mt19937_64 rng(7);
  const auto dir = scratch("bad");

  SUBCASE("duplicate image_id") {
    auto recs = random_records(rng, false, 2);
    recs[1].image_id = recs[0].image_id;
    CHECK_THROWS_AS(write_pack(dir, recs, BackboneFamily::cnn), FormatError);
  }
  SUBCASE("heterogeneous block shapes") {
    auto recs = random_records(rng, false, 2);
    recs[1].blocks[0] = make_block(-2, recs[1].blocks[0].h + 1, 1, recs[1].blocks[0].c, false, rng);
    CHECK_THROWS_AS(write_pack(dir, recs, BackboneFamily::cnn), FormatError);
  }
  SUBCASE("cls row on a cnn pack") {
    auto recs = random_records(rng, true, 2);
    CHECK_THROWS_AS(write_pack(dir, recs, BackboneFamily::cnn), FormatError);
  }
  SUBCASE("empty") { CHECK_THROWS_AS(write_pack(dir, {}, BackboneFamily::cnn), FormatError); }

  CHECK_FALSE(fs::exists(dir));
  fs::path partial = dir;
  partial += ".partial";
  CHECK_FALSE(fs::exists(partial));
}

TEST_CASE("reader errors") {
  std::mt19937_64 rng(9);
  const auto recs = random_records(rng, false, 4);
  const auto dir = scratch("rd");
  write_pack(dir, recs, BackboneFamily::cnn);

  SUBCASE("unknown id") {
    const auto pack = PackReader::open(dir);
    CHECK_THROWS_AS(pack.record("nope"), NotFoundError);
    CHECK_THROWS_AS(pack.entry("nope"), NotFoundError);
    CHECK_FALSE(pack.contains("nope"));
  }
  SUBCASE("truncated tensor file names the record") {
    const auto bytes = io::read_file(dir / "tensors.bin");
    io::write_file_atomic(dir / "tensors.bin", bytes.substr(0, bytes.size() - 3));
    try {
      PackReader::open(dir);
      FAIL("expected FormatError");
    } catch (const FormatError& e) {
      CHECK(std::string(e.what()).find("'img0_view'") != std::string::npos);
    }
  }
  SUBCASE("version mismatch") {
    auto text = io::read_file(dir / "manifest.json");
    const auto pos = text.find("\"format_version\": 1");
    REQUIRE(pos != std::string::npos);
    text.replace(pos, 19, "\"format_version\": 2");
    io::write_file_atomic(dir / "manifest.json", text);
    CHECK_THROWS_AS(PackReader::open(dir), FormatError);
  }
  SUBCASE("offset overlap") {
    auto text = io::read_file(dir / "manifest.json");
    const auto bytes = PackReader::open(dir).manifest().record_bytes();
    const auto key = "\"offset\": " + std::to_string(bytes) + ",";
    const auto pos = text.find(key);
    REQUIRE(pos != std::string::npos);
    text.replace(pos, key.size(), "\"offset\": " + std::to_string(bytes - 4) + ",");
    io::write_file_atomic(dir / "manifest.json", text);
    CHECK_THROWS_AS(PackReader::open(dir), FormatError);
  }
  SUBCASE("missing directory") { CHECK_THROWS_AS(PackReader::open(dir / "absent"), NotFoundError); }
  fs::remove_all(dir);
}

TEST_CASE("golden vit fixture decodes and re-encodes byte for byte") {
  const fs::path golden = fs::path(MIVHEAD_TEST_DATA) / "fmpack_vit_min";
  const auto pack = PackReader::open(golden);
  REQUIRE(pack.size() == 3);
  CHECK(pack.family() == BackboneFamily::vit);
  REQUIRE(pack.manifest().blocks.size() == 2);
  CHECK(pack.manifest().blocks[0] == BlockShape{-2, 2, 2, 3});
  CHECK(pack.manifest().blocks[1] == BlockShape{-1, 1, 1, 3});

  // Float k of the file is (k % 7 - 3) / 4 + (k / 7) * 1.5.
  auto fixture_value = [](std::size_t k) { return static_cast<float>((k % 7) * 0.25 - 0.75 + (k / 7) * 1.5); };
  std::vector<ImageRecord> recs;
  std::size_t k = 0;
  for (std::size_t i = 0; i < pack.size(); ++i) {
    const auto r = pack.record_at(i);
    for (const auto& b : r.blocks) {
      for (float v : b.patches) CHECK(v == fixture_value(k++));
      REQUIRE(b.cls.has_value());
      for (float v : *b.cls) CHECK(v == fixture_value(k++));
    }
    recs.push_back(r);
  }
  CHECK(k == 63);
  CHECK(pack.record("a0_v0").source_id == std::optional<std::string>("a0"));
  CHECK(pack.record("a0_v0").role == Role::pseudo_query);

  const auto dir = scratch("golden");
  write_pack(dir, recs, BackboneFamily::vit, "fixture");
  CHECK(io::read_file(dir / "tensors.bin") == io::read_file(golden / "tensors.bin"));
  fs::remove_all(dir);
}

TEST_CASE("concurrent readers observe identical records") {
  std::mt19937_64 rng(11);
  const auto recs = random_records(rng, true, 12);
  const auto dir = scratch("conc");
  write_pack(dir, recs, BackboneFamily::vit);
  const auto pack = PackReader::open(dir);
  std::vector<int> ok(8, 0);
  std::vector<std::thread> threads;
  for (int t = 0; t < 8; ++t) {
    threads.emplace_back([&, t] {
      int good = 0;
      for (int rep = 0; rep < 50; ++rep) {
        const auto& r = recs[(t * 7 + rep) % recs.size()];
        good += pack.record(r.image_id) == r;
      }
      ok[t] = good;
    });
  }
  for (auto& th : threads) th.join();
  for (int v : ok) CHECK(v == 50);
  fs::remove_all(dir);
}
