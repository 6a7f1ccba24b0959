#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "r3seg/errors.hpp"
#include "r3seg/grid.hpp"
#include "r3seg/png_io.hpp"
#include "r3seg/rle.hpp"
#include "r3seg/rng.hpp"
#include "r3seg/tensor.hpp"

// Synthetic dataset generation and artifact persistence: the whole pipeline
// runs and is tested without external data or weights.
//
// Dataset layout:
//   <dir>/images/<id>.png      8-bit RGB, lossless
//   <dir>/annotations.jsonl    one record per image
//   <dir>/manifest.json        spec, counts, checksums, schema version

namespace r3seg::datakit {

namespace fs = std::filesystem;
using nlohmann::json;

constexpr int kDatasetSchema = 1;
constexpr uint32_t kCheckpointSchema = 1;

inline uint64_t fnv1a64(const void* data, size_t len, uint64_t h = 0xcbf29ce484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string fnv_hex(uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline std::string file_checksum(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot open for checksum: " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  const std::string bytes = ss.str();
  return fnv_hex(fnv1a64(bytes.data(), bytes.size()));
}

// --- synthetic scenes -------------------------------------------------------

struct SceneSpec {
  int height = 64;
  int width = 64;
  int min_instances = 2;
  int max_instances = 4;
  bool ellipses = true;
  bool rectangles = true;
  bool l_shapes = true;
  double bg_noise = 0.05;         // background speckle stddev in [0,1] units
  double overlap_fraction = 0.35;  // chance an instance is placed against an earlier one
  uint64_t seed = 1234;

  void validate() const {
    if (height < 16 || width < 16) throw ConfigError("scene: image too small");
    if (min_instances < 1 || max_instances < min_instances)
      throw ConfigError("scene: bad instance range");
    if (!(ellipses || rectangles || l_shapes))
      throw ConfigError("scene: no shape family enabled");
    if (overlap_fraction < 0.0 || overlap_fraction > 1.0)
      throw ConfigError("scene: overlap_fraction outside [0,1]");
    if (bg_noise < 0.0 || bg_noise > 0.3) throw ConfigError("scene: bg_noise outside [0,0.3]");
  }

  json to_json() const {
    return json{{"height", height},
                {"width", width},
                {"min_instances", min_instances},
                {"max_instances", max_instances},
                {"ellipses", ellipses},
                {"rectangles", rectangles},
                {"l_shapes", l_shapes},
                {"bg_noise", bg_noise},
                {"overlap_fraction", overlap_fraction},
                {"seed", seed}};
  }

  static SceneSpec from_json(const json& j) {
    SceneSpec s;
    s.height = j.at("height");
    s.width = j.at("width");
    s.min_instances = j.at("min_instances");
    s.max_instances = j.at("max_instances");
    s.ellipses = j.at("ellipses");
    s.rectangles = j.at("rectangles");
    s.l_shapes = j.at("l_shapes");
    s.bg_noise = j.at("bg_noise");
    s.overlap_fraction = j.at("overlap_fraction");
    s.seed = j.at("seed");
    return s;
  }
};

struct Scene {
  Image image;
  std::vector<MaskPlane> masks;  // visible (occlusion-resolved) masks, disjoint
  std::vector<std::string> categories;
};

namespace detail {

struct ShapeDef {
  std::string category;
  double cx, cy, a, b, theta;  // center, half extents, rotation
  int variant;                 // L-shape cut quadrant
  double color[3];
};

inline bool inside_shape(const ShapeDef& s, double x, double y) {
  const double dx = x - s.cx, dy = y - s.cy;
  const double c = std::cos(-s.theta), sn = std::sin(-s.theta);
  const double u = dx * c - dy * sn, v = dx * sn + dy * c;
  if (s.category == "ellipse") return (u * u) / (s.a * s.a) + (v * v) / (s.b * s.b) <= 1.0;
  if (s.category == "rectangle") return std::abs(u) <= s.a && std::abs(v) <= s.b;
  // l_shape: rectangle with one quadrant removed
  if (std::abs(u) > s.a || std::abs(v) > s.b) return false;
  const bool right = s.variant & 1, bottom = s.variant & 2;
  const bool in_cut = (right ? u > 0 : u < 0) && (bottom ? v > 0 : v < 0);
  return !in_cut;
}

inline MaskPlane rasterize(const ShapeDef& s, int h, int w) {
  MaskPlane m(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      if (inside_shape(s, x, y)) m.at(y, x) = 1;
  return m;
}

}  // namespace detail

// Deterministic scene synthesis: textured background plus 'min..max' colored
// shapes; adjacent/overlapping placement exercises the overlap-suppression
// path. Visible masks are occlusion-resolved (later shapes sit on top), so
// the stored ground truth is always pixel-disjoint.
inline Scene generate_scene(const SceneSpec& spec, uint64_t scene_seed) {
  spec.validate();
  for (uint64_t attempt = 0;; ++attempt) {
    Rng rng(mix_seed(spec.seed, scene_seed, attempt));
    const int h = spec.height, w = spec.width;
    std::vector<std::string> families;
    if (spec.ellipses) families.push_back("ellipse");
    if (spec.rectangles) families.push_back("rectangle");
    if (spec.l_shapes) families.push_back("l_shape");

    const int k = rng.uniform_int(spec.min_instances, spec.max_instances);
    std::vector<detail::ShapeDef> shapes;
    for (int i = 0; i < k; ++i) {
      detail::ShapeDef s;
      s.category = families[size_t(rng.uniform_int(0, int(families.size()) - 1))];
      s.a = rng.uniform(5.0, 13.0);
      s.b = rng.uniform(5.0, 13.0);
      s.theta = rng.uniform(0.0, 3.141592653589793);
      s.variant = rng.uniform_int(0, 3);
      if (!shapes.empty() && rng.bernoulli(spec.overlap_fraction)) {
        // Place against an earlier instance: adjacent or slightly overlapping.
        const auto& ref = shapes[size_t(rng.uniform_int(0, int(shapes.size()) - 1))];
        const double dist = (std::max(ref.a, ref.b) + std::max(s.a, s.b)) * rng.uniform(0.75, 1.1);
        const double ang = rng.uniform(0.0, 6.283185307179586);
        s.cx = ref.cx + dist * std::cos(ang);
        s.cy = ref.cy + dist * std::sin(ang);
      } else {
        s.cx = rng.uniform(10.0, double(w - 10));
        s.cy = rng.uniform(10.0, double(h - 10));
      }
      s.cx = std::clamp(s.cx, 6.0, double(w - 7));
      s.cy = std::clamp(s.cy, 6.0, double(h - 7));
      // Saturated fill color, away from the mid-gray background.
      const int hot = rng.uniform_int(0, 2);
      for (int c = 0; c < 3; ++c)
        s.color[c] = c == hot ? rng.uniform(0.72, 0.95) : rng.uniform(0.05, 0.38);
      shapes.push_back(s);
    }

    std::vector<MaskPlane> full;
    for (const auto& s : shapes) full.push_back(detail::rasterize(s, h, w));

    // Later shapes occlude earlier ones.
    std::vector<MaskPlane> visible = full;
    for (int i = 0; i < k; ++i)
      for (int j = i + 1; j < k; ++j)
        for (size_t p = 0; p < visible[i].d.size(); ++p)
          if (full[size_t(j)].d[p]) visible[size_t(i)].d[p] = 0;

    bool ok = true;
    for (const auto& m : visible) ok = ok && count_nonzero(m) >= 16;
    if (!ok) continue;  // deterministic retry with the attempt counter mixed in

    Scene scene;
    scene.image = Image(h, w);
    const double bg_base[3] = {rng.uniform(0.42, 0.58), rng.uniform(0.42, 0.58),
                               rng.uniform(0.42, 0.58)};
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double rgb[3];
        const double speckle = rng.normal() * spec.bg_noise;
        for (int c = 0; c < 3; ++c) rgb[c] = bg_base[c] + speckle + rng.normal() * 0.01;
        for (int i = 0; i < k; ++i)
          if (visible[size_t(i)].at(y, x))
            for (int c = 0; c < 3; ++c) rgb[c] = shapes[size_t(i)].color[c] + rng.normal() * 0.02;
        for (int c = 0; c < 3; ++c)
          scene.image.at(y, x, c) =
              uint8_t(std::lround(std::clamp(rgb[c], 0.0, 1.0) * 255.0));
      }
    scene.masks = std::move(visible);
    for (const auto& s : shapes) scene.categories.push_back(s.category);
    return scene;
  }
}

// --- dataset records --------------------------------------------------------

struct InstanceRecord {
  int64_t id = 0;
  std::string category;
  std::vector<uint32_t> rle;
};

struct DatasetItem {
  std::string image_id;
  std::string split;  // "train" or "test"
  fs::path image_path;
  int height = 0;
  int width = 0;
  std::vector<InstanceRecord> instances;
};

struct Dataset {
  fs::path root;
  SceneSpec spec;
  std::vector<DatasetItem> items;

  std::vector<const DatasetItem*> split(const std::string& name) const {
    std::vector<const DatasetItem*> out;
    for (const auto& it : items)
      if (it.split == name) out.push_back(&it);
    return out;
  }
};

inline MaskPlane decode_instance(const InstanceRecord& rec, int h, int w) {
  return rle_decode(rec.rle, h, w);
}

inline json item_to_json(const DatasetItem& it) {
  json instances = json::array();
  for (const auto& inst : it.instances)
    instances.push_back(
        json{{"id", inst.id}, {"category", inst.category}, {"rle", inst.rle}});
  return json{{"schema_version", kDatasetSchema},
              {"image_id", it.image_id},
              {"split", it.split},
              {"image", "images/" + it.image_id + ".png"},
              {"height", it.height},
              {"width", it.width},
              {"instances", instances}};
}

inline DatasetItem item_from_json(const json& j, const fs::path& root) {
  DatasetItem it;
  it.image_id = j.at("image_id");
  it.split = j.at("split");
  it.image_path = root / std::string(j.at("image"));
  it.height = j.at("height");
  it.width = j.at("width");
  for (const auto& inst : j.at("instances")) {
    InstanceRecord rec;
    rec.id = inst.at("id");
    rec.category = inst.at("category");
    rec.rle = inst.at("rle").get<std::vector<uint32_t>>();
    it.instances.push_back(std::move(rec));
  }
  return it;
}

// Writes a full train/test dataset. Pure function of (spec, n_train, n_test):
// identical inputs produce byte-identical files.
inline fs::path generate_synthetic(const SceneSpec& spec, int n_train, int n_test,
                                   const fs::path& out_dir) {
  spec.validate();
  if (n_train < 1 || n_test < 0) throw ConfigError("generate_synthetic: bad counts");
  std::error_code ec;
  fs::create_directories(out_dir / "images", ec);
  if (ec) throw IoError("cannot create dataset directory " + out_dir.string());

  std::ofstream ann(out_dir / "annotations.jsonl", std::ios::binary | std::ios::trunc);
  if (!ann) throw IoError("cannot write annotations in " + out_dir.string());

  std::map<std::string, std::string> checksums;
  auto emit = [&](const std::string& split, int index, uint64_t scene_seed) {
    const Scene scene = generate_scene(spec, scene_seed);
    char idbuf[32];
    std::snprintf(idbuf, sizeof idbuf, "%s_%05d", split.c_str(), index);
    DatasetItem item;
    item.image_id = idbuf;
    item.split = split;
    item.height = spec.height;
    item.width = spec.width;
    for (size_t i = 0; i < scene.masks.size(); ++i)
      item.instances.push_back(
          InstanceRecord{int64_t(i + 1), scene.categories[i], rle_encode(scene.masks[i])});
    const fs::path img_path = out_dir / "images" / (item.image_id + std::string(".png"));
    write_png(img_path.string(), scene.image);
    checksums["images/" + item.image_id + ".png"] = file_checksum(img_path);
    ann << item_to_json(item).dump() << "\n";
  };

  // Train/test splits draw from disjoint seed streams.
  for (int i = 0; i < n_train; ++i) emit("train", i, mix_seed(0x7261, uint64_t(i)));
  for (int i = 0; i < n_test; ++i) emit("test", i, mix_seed(0x7465, uint64_t(i)));
  ann.close();
  checksums["annotations.jsonl"] = file_checksum(out_dir / "annotations.jsonl");

  json manifest{{"schema_version", kDatasetSchema},
                {"kind", "r3seg-dataset"},
                {"spec", spec.to_json()},
                {"counts", json{{"train", n_train}, {"test", n_test}}},
                {"files", checksums}};
  std::ofstream mf(out_dir / "manifest.json", std::ios::binary | std::ios::trunc);
  if (!mf) throw IoError("cannot write manifest in " + out_dir.string());
  mf << manifest.dump(2) << "\n";
  return out_dir / "manifest.json";
}

// Loads and integrity-checks a dataset directory. Items come back sorted by
// image id; masks stay run-length encoded until asked for.
inline Dataset load_dataset(const fs::path& dir) {
  const fs::path mpath = dir / "manifest.json";
  if (!fs::exists(mpath)) throw StructureError("missing manifest: " + mpath.string());
  json manifest;
  {
    std::ifstream in(mpath);
    try {
      in >> manifest;
    } catch (const json::exception& e) {
      throw CorruptionError("manifest parse error: " + std::string(e.what()));
    }
  }
  if (manifest.value("schema_version", -1) != kDatasetSchema)
    throw CompatError("unsupported dataset schema in " + mpath.string());

  for (const auto& [rel, sum] : manifest.at("files").items()) {
    const fs::path p = dir / rel;
    if (!fs::exists(p)) throw StructureError("dataset file missing: " + p.string());
    const std::string actual = file_checksum(p);
    if (actual != sum)
      throw CorruptionError("checksum mismatch for " + rel + ": manifest " +
                            std::string(sum) + ", actual " + actual);
  }

  Dataset ds;
  ds.root = dir;
  ds.spec = SceneSpec::from_json(manifest.at("spec"));
  std::ifstream ann(dir / "annotations.jsonl");
  if (!ann) throw StructureError("missing annotations.jsonl in " + dir.string());
  std::string line;
  int line_no = 0;
  while (std::getline(ann, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      ds.items.push_back(item_from_json(json::parse(line), dir));
    } catch (const json::exception& e) {
      throw CorruptionError("annotations.jsonl line " + std::to_string(line_no) + ": " +
                            e.what());
    }
  }
  std::sort(ds.items.begin(), ds.items.end(),
            [](const DatasetItem& a, const DatasetItem& b) { return a.image_id < b.image_id; });
  return ds;
}

// --- checkpoints ------------------------------------------------------------

// Adapters and optimizer state only; the frozen base is reconstructed from
// the architecture seed, and the header hash refuses mismatched bases.
struct TrainState {
  uint64_t arch_hash = 0;
  uint32_t lora_rank = 0;
  uint64_t run_seed = 0;
  uint32_t epochs_trained = 0;
  int64_t opt_steps = 0;
  std::vector<std::pair<std::string, Tensor>> blobs;  // adapters + optimizer moments
};

namespace detail {

inline void put_u32(std::string& s, uint32_t v) { s.append(reinterpret_cast<char*>(&v), 4); }
inline void put_u64(std::string& s, uint64_t v) { s.append(reinterpret_cast<char*>(&v), 8); }
inline void put_i64(std::string& s, int64_t v) { s.append(reinterpret_cast<char*>(&v), 8); }

struct Reader {
  const std::string& s;
  size_t pos = 0;
  void need(size_t n) const {
    if (pos + n > s.size()) throw CorruptionError("checkpoint truncated");
  }
  uint32_t u32() {
    need(4);
    uint32_t v;
    std::memcpy(&v, s.data() + pos, 4);
    pos += 4;
    return v;
  }
  uint64_t u64() {
    need(8);
    uint64_t v;
    std::memcpy(&v, s.data() + pos, 8);
    pos += 8;
    return v;
  }
  int64_t i64() { return int64_t(u64()); }
  std::string bytes(size_t n) {
    need(n);
    std::string out = s.substr(pos, n);
    pos += n;
    return out;
  }
};

}  // namespace detail

constexpr char kCheckpointMagic[9] = "R3SEGCKP";

inline void save_checkpoint(const TrainState& st, const fs::path& path) {
  std::string payload;
  detail::put_u32(payload, kCheckpointSchema);
  detail::put_u64(payload, st.arch_hash);
  detail::put_u32(payload, st.lora_rank);
  detail::put_u64(payload, st.run_seed);
  detail::put_u32(payload, st.epochs_trained);
  detail::put_i64(payload, st.opt_steps);
  detail::put_u32(payload, uint32_t(st.blobs.size()));
  for (const auto& [name, t] : st.blobs) {
    detail::put_u32(payload, uint32_t(name.size()));
    payload.append(name);
    detail::put_u32(payload, uint32_t(t.rows));
    detail::put_u32(payload, uint32_t(t.cols));
    payload.append(reinterpret_cast<const char*>(t.d.data()), t.d.size() * sizeof(double));
  }
  const uint64_t digest = fnv1a64(payload.data(), payload.size());

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  out.write(kCheckpointMagic, 8);
  out.write(payload.data(), std::streamsize(payload.size()));
  out.write(reinterpret_cast<const char*>(&digest), 8);
  if (!out) throw IoError("checkpoint write failed: " + path.string());
}

inline TrainState load_checkpoint(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  const std::string all = ss.str();
  if (all.size() < 16 || all.compare(0, 8, kCheckpointMagic) != 0)
    throw CorruptionError("not a checkpoint file: " + path.string());
  const std::string payload = all.substr(8, all.size() - 16);
  uint64_t digest;
  std::memcpy(&digest, all.data() + all.size() - 8, 8);
  if (digest != fnv1a64(payload.data(), payload.size()))
    throw CorruptionError("checkpoint digest mismatch: " + path.string());

  detail::Reader r{payload};
  TrainState st;
  const uint32_t schema = r.u32();
  if (schema != kCheckpointSchema)
    throw CompatError("unsupported checkpoint schema " + std::to_string(schema));
  st.arch_hash = r.u64();
  st.lora_rank = r.u32();
  st.run_seed = r.u64();
  st.epochs_trained = r.u32();
  st.opt_steps = r.i64();
  const uint32_t n = r.u32();
  for (uint32_t i = 0; i < n; ++i) {
    const uint32_t len = r.u32();
    const std::string name = r.bytes(len);
    const uint32_t rows = r.u32();
    const uint32_t cols = r.u32();
    Tensor t{int(rows), int(cols)};
    const std::string bytes = r.bytes(size_t(rows) * cols * sizeof(double));
    std::memcpy(t.d.data(), bytes.data(), bytes.size());
    st.blobs.emplace_back(name, std::move(t));
  }
  if (r.pos != payload.size()) throw CorruptionError("checkpoint has trailing bytes");
  return st;
}

}  // namespace r3seg::datakit
