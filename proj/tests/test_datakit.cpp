#include <catch2/catch_amalgamated.hpp>
#include <filesystem>
#include <fstream>

#include "r3seg/datakit.hpp"

using namespace r3seg;
using namespace r3seg::datakit;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& tag) {
  auto p = fs::temp_directory_path() / ("r3seg_test_" + tag);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("scene generation is deterministic and honors the pixel floor") {
  SceneSpec spec;
  auto a = generate_scene(spec, 3);
  auto b = generate_scene(spec, 3);
  CHECK(a.image == b.image);
  REQUIRE(a.masks.size() == b.masks.size());
  for (size_t i = 0; i < a.masks.size(); ++i) {
    CHECK(a.masks[i] == b.masks[i]);
    CHECK(count_nonzero(a.masks[i]) >= 16);
  }
  CHECK(generate_scene(spec, 4).image != a.image);
}

TEST_CASE("visible ground-truth masks are pairwise disjoint") {
  SceneSpec spec;
  spec.overlap_fraction = 0.9;
  for (uint64_t s = 0; s < 20; ++s) {
    auto scene = generate_scene(spec, s);
    for (size_t i = 0; i < scene.masks.size(); ++i)
      for (size_t j = i + 1; j < scene.masks.size(); ++j)
        for (size_t p = 0; p < scene.masks[i].d.size(); ++p)
          CHECK((scene.masks[i].d[p] & scene.masks[j].d[p]) == 0);
  }
}

TEST_CASE("dataset generation round trip with checksums") {
  SceneSpec spec;
  auto dir = temp_dir("roundtrip");
  auto manifest_path = generate_synthetic(spec, 6, 3, dir);
  CHECK(fs::exists(manifest_path));

  auto ds = load_dataset(dir);
  CHECK(ds.items.size() == 9);
  CHECK(ds.split("train").size() == 6);
  CHECK(ds.split("test").size() == 3);
  // Sorted iteration order by image id.
  for (size_t i = 1; i < ds.items.size(); ++i)
    CHECK(ds.items[i - 1].image_id < ds.items[i].image_id);

  // Decoded masks match the regenerated scenes.
  for (const auto* item : ds.split("train")) {
    CHECK(item->height == spec.height);
    for (const auto& inst : item->instances) {
      auto m = decode_instance(inst, item->height, item->width);
      CHECK(m.h == spec.height);
      CHECK(count_nonzero(m) >= 16);
    }
    Image img = read_png(item->image_path.string());
    CHECK(img.h == spec.height);
    CHECK(img.w == spec.width);
  }
}

TEST_CASE("regenerating with the same spec gives byte-identical artifacts") {
  SceneSpec spec;
  auto d1 = temp_dir("gen_a");
  auto d2 = temp_dir("gen_b");
  generate_synthetic(spec, 4, 2, d1);
  generate_synthetic(spec, 4, 2, d2);
  CHECK(slurp(d1 / "annotations.jsonl") == slurp(d2 / "annotations.jsonl"));
  CHECK(slurp(d1 / "manifest.json") == slurp(d2 / "manifest.json"));
  CHECK(slurp(d1 / "images/train_00000.png") == slurp(d2 / "images/train_00000.png"));
}

TEST_CASE("overlap_fraction=0 keeps even full shapes disjoint") {
  SceneSpec spec;
  spec.overlap_fraction = 0.0;
  auto dir = temp_dir("disjoint");
  generate_synthetic(spec, 8, 0, dir);
  auto ds = load_dataset(dir);
  for (const auto& item : ds.items) {
    std::vector<MaskPlane> masks;
    for (const auto& inst : item.instances)
      masks.push_back(decode_instance(inst, item.height, item.width));
    for (size_t i = 0; i < masks.size(); ++i)
      for (size_t j = i + 1; j < masks.size(); ++j)
        for (size_t p = 0; p < masks[i].d.size(); ++p)
          CHECK((masks[i].d[p] & masks[j].d[p]) == 0);
  }
}

TEST_CASE("corrupted dataset files are rejected") {
  SceneSpec spec;
  auto dir = temp_dir("corrupt");
  generate_synthetic(spec, 2, 1, dir);

  SECTION("flipped byte in annotations") {
    auto bytes = slurp(dir / "annotations.jsonl");
    bytes[bytes.size() / 2] = '#';
    std::ofstream(dir / "annotations.jsonl", std::ios::binary) << bytes;
    CHECK_THROWS_AS(load_dataset(dir), CorruptionError);
  }
  SECTION("missing image file") {
    fs::remove(dir / "images/train_00000.png");
    CHECK_THROWS_AS(load_dataset(dir), StructureError);
  }
  SECTION("missing manifest") {
    fs::remove(dir / "manifest.json");
    CHECK_THROWS_AS(load_dataset(dir), StructureError);
  }
}

TEST_CASE("checkpoint round trip is bitwise exact") {
  TrainState st;
  st.arch_hash = 0xDEADBEEFCAFEF00DULL;
  st.lora_rank = 4;
  st.run_seed = 99;
  st.epochs_trained = 5;
  st.opt_steps = 1234;
  Tensor a(3, 4);
  for (size_t i = 0; i < a.d.size(); ++i) a.d[i] = std::sqrt(double(i)) * 0.3141592653589793;
  Tensor b(2, 2);
  b.d = {1e-300, -0.0, 3.14, -7.25e11};
  st.blobs.emplace_back("adapter.enc0.q.A", a);
  st.blobs.emplace_back("adam.m.enc0.q.A", b);

  auto dir = temp_dir("ckpt");
  save_checkpoint(st, dir / "model.ckpt");
  auto rt = load_checkpoint(dir / "model.ckpt");
  CHECK(rt.arch_hash == st.arch_hash);
  CHECK(rt.lora_rank == st.lora_rank);
  CHECK(rt.run_seed == st.run_seed);
  CHECK(rt.epochs_trained == st.epochs_trained);
  CHECK(rt.opt_steps == st.opt_steps);
  REQUIRE(rt.blobs.size() == 2);
  CHECK(rt.blobs[0].first == "adapter.enc0.q.A");
  CHECK(rt.blobs[0].second == a);  // bitwise: operator== on doubles
  CHECK(rt.blobs[1].second.d[1] == 0.0);
}

TEST_CASE("truncated and tampered checkpoints are rejected whole") {
  TrainState st;
  st.arch_hash = 1;
  st.lora_rank = 4;
  Tensor a(8, 8, 0.5);
  st.blobs.emplace_back("adapter.x.A", a);
  auto dir = temp_dir("ckpt_bad");
  const auto path = dir / "model.ckpt";
  save_checkpoint(st, path);

  auto bytes = slurp(path);
  SECTION("truncation") {
    std::ofstream(path, std::ios::binary) << bytes.substr(0, bytes.size() / 2);
    CHECK_THROWS_AS(load_checkpoint(path), CorruptionError);
  }
  SECTION("bit flip") {
    bytes[bytes.size() / 3] ^= 0x40;
    std::ofstream(path, std::ios::binary) << bytes;
    CHECK_THROWS_AS(load_checkpoint(path), CorruptionError);
  }
  SECTION("wrong magic") {
    bytes[0] = 'X';
    std::ofstream(path, std::ios::binary) << bytes;
    CHECK_THROWS_AS(load_checkpoint(path), CorruptionError);
  }
}
