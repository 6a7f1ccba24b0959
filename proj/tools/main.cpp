// r3seg: point-supervised self-prompting segmentation toolkit.
//
// Subcommands:
//   generate-data   synthesize a train/test dataset on disk
//   train           run the refine/requery/reinforce adaptation loop
//   eval            point-prompted mIoU/F1 of a checkpoint (or the frozen base)
//   leakage         mean cross-instance pixel leakage of stored annotations
//   refine          batch entropy gate + overlap suppression over annotations
//
// Exit codes: 0 success, 2 usage/validation, 3 data/compatibility, 4 internal.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "r3seg/config.hpp"
#include "r3seg/datakit.hpp"
#include "r3seg/pipeline.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace r3seg;

namespace {

struct CommonFlags {
  std::optional<std::string> config_path;
  std::optional<uint64_t> seed;
  std::optional<int> n_points;
  std::optional<std::string> variant;
  std::optional<std::string> out;
  std::optional<std::string> data;
  std::optional<int> epochs;
  bool print_config = false;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--config", f.config_path, "run configuration file (JSON)");
  cmd->add_option("--seed", f.seed, "override run.seed");
  cmd->add_option("--n-points", f.n_points, "points per instance")->check(CLI::Range(1, 3));
  cmd->add_option("--out", f.out, "output directory");
  cmd->add_option("--data", f.data, "dataset directory (overrides data.dataset)");
  cmd->add_flag("--print-config", f.print_config,
                "print the fully resolved configuration and exit");
}

config::RunConfig resolve_config(const CommonFlags& f) {
  config::RunConfig cfg = config::RunConfig::load(f.config_path);
  if (f.seed) cfg.train.seed = *f.seed;
  if (f.n_points) cfg.train.n_points = *f.n_points;
  if (f.variant) cfg.variant = *f.variant;
  if (f.out) cfg.out_dir = *f.out;
  if (f.data) cfg.dataset_dir = *f.data;
  if (f.epochs) cfg.train.epochs = *f.epochs;
  pipeline::parse_variant(cfg.variant);
  cfg.train.validate();
  return cfg;
}

void write_text(const fs::path& p, const std::string& body) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + p.string());
  out << body;
}

// ---------------------------------------------------------------- generate-data

int cmd_generate_data(const datakit::SceneSpec& spec, int n_train, int n_test,
                      const std::string& out_dir) {
  const fs::path dir = out_dir;
  if (fs::exists(dir / "manifest.json")) {
    // Re-running with identical parameters is a no-op; anything else refuses
    // to clobber the existing dataset.
    json manifest;
    std::ifstream in(dir / "manifest.json");
    in >> manifest;
    const bool same = manifest.value("kind", "") == "r3seg-dataset" &&
                      manifest.at("spec") == spec.to_json() &&
                      manifest.at("counts") == json{{"train", n_train}, {"test", n_test}};
    if (!same)
      throw CompatError("dataset directory " + dir.string() +
                        " already holds a different dataset");
    datakit::load_dataset(dir);  // checksum verification
    std::printf("dataset already present: %s\n", (dir / "manifest.json").c_str());
    return 0;
  }
  const fs::path manifest = datakit::generate_synthetic(spec, n_train, n_test, dir);
  std::printf("%s\n", manifest.c_str());
  return 0;
}

// ------------------------------------------------------------------------ train

int cmd_train(const CommonFlags& flags) {
  config::RunConfig cfg = resolve_config(flags);
  if (flags.print_config) {
    std::printf("%s\n", cfg.resolved().dump(2).c_str());
    return 0;
  }
  cfg.require_dataset();
  const auto variant = pipeline::parse_variant(cfg.variant);

  const auto dataset = datakit::load_dataset(cfg.dataset_dir);
  const auto train_items = pipeline::load_split(dataset, "train");
  const auto test_items = pipeline::load_split(dataset, "test");

  std::vector<std::string> log;
  auto out = pipeline::train(cfg.train, train_items, test_items, variant, &log);
  for (const auto& line : log) std::printf("%s\n", line.c_str());

  fs::create_directories(cfg.out_dir);
  datakit::save_checkpoint(out.state, fs::path(cfg.out_dir) / "checkpoint.ckpt");
  std::string records;
  for (const auto& rep : out.reports)
    records += rep.to_json(cfg.variant, cfg.train.loss.beta).dump() + "\n";
  write_text(fs::path(cfg.out_dir) / "records.jsonl", records);
  write_text(fs::path(cfg.out_dir) / "config.resolved.json", cfg.resolved().dump(2) + "\n");

  std::printf("checkpoint: %s\n", (fs::path(cfg.out_dir) / "checkpoint.ckpt").c_str());
  std::printf("%.2f %.2f\n", 100.0 * out.final_eval.miou, 100.0 * out.final_eval.f1);
  return 0;
}

// ------------------------------------------------------------------------- eval

int cmd_eval(const CommonFlags& flags, const std::optional<std::string>& checkpoint,
             bool gt_as_pred) {
  config::RunConfig cfg = resolve_config(flags);
  if (flags.print_config) {
    std::printf("%s\n", cfg.resolved().dump(2).c_str());
    return 0;
  }
  cfg.require_dataset();
  const auto dataset = datakit::load_dataset(cfg.dataset_dir);
  const auto test_items = pipeline::load_split(dataset, "test");

  pipeline::EvalResult ev;
  if (gt_as_pred) {
    // Metric plumbing check: predictions replaced by ground truth.
    int n = 0;
    double iou = 0, f1 = 0;
    for (const auto& item : test_items)
      for (const auto& gt : item.gt) {
        if (count_nonzero(gt) == 0) continue;
        auto [i, f] = pipeline::mask_iou_f1(gt, gt);
        iou += i;
        f1 += f;
        ++n;
      }
    ev.miou = n ? iou / n : 0.0;
    ev.f1 = n ? f1 / n : 0.0;
    ev.instances_evaluated = n;
  } else {
    segmenter::ToySegmenter model(cfg.train.model_config());
    Adam opt;
    if (checkpoint) {
      auto state = datakit::load_checkpoint(*checkpoint);
      pipeline::apply_train_state(state, model, &opt);
    }
    ev = pipeline::evaluate(model, test_items, cfg.train.n_points,
                            mix_seed(cfg.train.seed, 0xF17A1));
  }
  std::printf("%.2f %.2f\n", 100.0 * ev.miou, 100.0 * ev.f1);
  return 0;
}

// ---------------------------------------------------------------------- leakage

std::vector<datakit::DatasetItem> read_annotations(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open annotations: " + path.string());
  std::vector<datakit::DatasetItem> items;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      items.push_back(datakit::item_from_json(json::parse(line), path.parent_path()));
    } catch (const json::exception& e) {
      throw CorruptionError(path.string() + " line " + std::to_string(line_no) + ": " +
                            e.what());
    }
  }
  return items;
}

int cmd_leakage(const std::string& annotations, int n_points, std::string dataset_name) {
  const fs::path path = annotations;
  if (dataset_name.empty()) dataset_name = path.parent_path().filename().string();
  if (dataset_name.empty()) dataset_name = "annotations";
  const auto items = read_annotations(path);

  double sum = 0.0;
  int images = 0;
  for (const auto& item : items) {
    maskops::BinaryMaskSet set(std::max<int>(1, int(item.instances.size())), item.height,
                               item.width);
    set.instance_ids.assign(size_t(set.k), 0);
    for (size_t k = 0; k < item.instances.size(); ++k) {
      auto m = datakit::decode_instance(item.instances[k], item.height, item.width);
      std::copy(m.d.begin(), m.d.end(), set.data.begin() + ptrdiff_t(k * m.d.size()));
      set.instance_ids[k] = item.instances[k].id;
    }
    sum += maskops::leakage_rate(set);
    ++images;
  }
  if (images == 0)
    std::fprintf(stderr, "warning: no prediction records found in %s\n", annotations.c_str());
  const double mean = images ? sum / images : 0.0;

  std::printf("%-16s %9s %9s %9s\n", "Dataset", "1-Point", "2-Point", "3-Point");
  char cell[16];
  std::snprintf(cell, sizeof cell, "%.1f%%", 100.0 * mean);
  std::printf("%-16s %9s %9s %9s\n", dataset_name.c_str(), n_points == 1 ? cell : "-",
              n_points == 2 ? cell : "-", n_points == 3 ? cell : "-");
  return 0;
}

// ----------------------------------------------------------------------- refine

int cmd_refine(const std::string& in_path, const std::string& out_path, double epsilon,
               bool skip_gate) {
  std::ifstream in(in_path);
  if (!in) throw IoError("cannot open annotations: " + in_path);
  std::string out_body;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json rec;
    try {
      rec = json::parse(line);
    } catch (const json::exception& e) {
      throw CorruptionError(in_path + " line " + std::to_string(line_no) + ": " + e.what());
    }
    const int h = rec.at("height"), w = rec.at("width");
    const auto& instances = rec.at("instances");
    const int k = int(instances.size());

    maskops::BinaryMaskSet gated(std::max(1, k), h, w);
    gated.instance_ids.assign(size_t(gated.k), 0);
    if (k > 0 && !skip_gate) {
      maskops::ProbMaskStack stack(k, h, w);
      stack.image_id = rec.value("image_id", "");
      for (int i = 0; i < k; ++i) {
        const auto& inst = instances[size_t(i)];
        if (!inst.contains("prob_mask"))
          throw ConfigError(in_path + " line " + std::to_string(line_no) +
                            ": instances carry no prob_mask (binary-only annotations); "
                            "pass --skip-gate to run overlap suppression directly on the "
                            "stored masks");
        const auto probs = inst.at("prob_mask").get<std::vector<double>>();
        if (int(probs.size()) != h * w)
          throw CorruptionError(in_path + " line " + std::to_string(line_no) +
                                ": prob_mask size != H*W");
        std::copy(probs.begin(), probs.end(), stack.data.begin() + ptrdiff_t(i) * h * w);
        stack.instance_ids[size_t(i)] = inst.at("id");
      }
      gated = maskops::confidence_filter(stack, maskops::entropy_map(stack), epsilon);
    } else if (k > 0) {
      for (int i = 0; i < k; ++i) {
        const auto& inst = instances[size_t(i)];
        auto m = rle_decode(inst.at("rle").get<std::vector<uint32_t>>(), h, w);
        std::copy(m.d.begin(), m.d.end(), gated.data.begin() + ptrdiff_t(i) * h * w);
        gated.instance_ids[size_t(i)] = inst.at("id");
      }
    }
    const auto refined = maskops::refine(gated, maskops::overlap_map(gated));

    json out_instances = json::array();
    for (int i = 0; i < k; ++i) {
      const auto& inst = instances[size_t(i)];
      json oi{{"id", inst.at("id")},
              {"category", inst.value("category", "")},
              {"rle", rle_encode(refined.masks.plane(i))}};
      if (refined.boxes[size_t(i)]) {
        const auto& b = *refined.boxes[size_t(i)];
        oi["box"] = {b.x_min, b.y_min, b.x_max, b.y_max};
      } else {
        oi["box"] = nullptr;
      }
      out_instances.push_back(std::move(oi));
    }
    json out_rec{{"schema_version", datakit::kDatasetSchema},
                 {"image_id", rec.value("image_id", "")},
                 {"split", rec.value("split", "")},
                 {"image", rec.value("image", "")},
                 {"height", h},
                 {"width", w},
                 {"instances", out_instances}};
    out_body += out_rec.dump() + "\n";
  }
  write_text(out_path, out_body);
  std::printf("%s\n", out_path.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"r3seg: point-supervised self-prompting segmentation toolkit"};
  app.require_subcommand(1);

  // generate-data
  auto* gen = app.add_subcommand("generate-data", "synthesize a train/test dataset");
  datakit::SceneSpec spec;
  int n_train = 200, n_test = 50;
  std::string gen_out = "data/synthetic";
  gen->add_option("--out", gen_out, "dataset directory");
  gen->add_option("--n-train", n_train, "training images")->check(CLI::PositiveNumber);
  gen->add_option("--n-test", n_test, "test images")->check(CLI::NonNegativeNumber);
  gen->add_option("--seed", spec.seed, "generator seed");
  gen->add_option("--height", spec.height, "image height")->check(CLI::Range(16, 1024));
  gen->add_option("--width", spec.width, "image width")->check(CLI::Range(16, 1024));
  gen->add_option("--min-instances", spec.min_instances)->check(CLI::PositiveNumber);
  gen->add_option("--max-instances", spec.max_instances)->check(CLI::PositiveNumber);
  gen->add_option("--overlap-fraction", spec.overlap_fraction,
                  "chance an instance is placed against an earlier one")
      ->check(CLI::Range(0.0, 1.0));
  gen->add_option("--bg-noise", spec.bg_noise, "background speckle stddev")
      ->check(CLI::Range(0.0, 0.3));

  // train
  auto* tr = app.add_subcommand("train", "run the adaptation loop");
  CommonFlags tr_flags;
  add_common(tr, tr_flags);
  tr->add_option("--variant", tr_flags.variant,
                 "full|no_ssa|no_requery|no_refine|direct");
  tr->add_option("--epochs", tr_flags.epochs, "override run.epochs");

  // eval
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint with point prompts");
  CommonFlags ev_flags;
  std::optional<std::string> checkpoint;
  bool gt_as_pred = false;
  add_common(ev, ev_flags);
  ev->add_option("--checkpoint", checkpoint, "checkpoint file (absent: frozen base)");
  ev->add_flag("--debug-gt-as-pred", gt_as_pred,
               "score ground truth against itself (metric plumbing check)");

  // leakage
  auto* lk = app.add_subcommand("leakage", "mean cross-instance pixel leakage");
  std::string lk_annotations;
  int lk_points = 1;
  std::string lk_name;
  lk->add_option("--annotations", lk_annotations, "prediction annotations (jsonl)")
      ->required();
  lk->add_option("--n-points", lk_points, "prompt-count column for the report")
      ->check(CLI::Range(1, 3));
  lk->add_option("--dataset-name", lk_name, "row label (defaults to the directory name)");

  // refine
  auto* rf = app.add_subcommand("refine", "entropy gate + overlap suppression, batch mode");
  std::string rf_in, rf_out = "annotations.refined.jsonl";
  double rf_eps = 0.5;
  bool rf_skip_gate = false;
  rf->add_option("--in", rf_in, "input annotations (jsonl)")->required();
  rf->add_option("--out", rf_out, "output annotations (jsonl)");
  rf->add_option("--epsilon", rf_eps, "confidence gate threshold")
      ->check(CLI::Range(0.0, 0.999999));
  rf->add_flag("--skip-gate", rf_skip_gate,
               "treat stored binary masks as already-gated confidence masks");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (gen->parsed()) return cmd_generate_data(spec, n_train, n_test, gen_out);
    if (tr->parsed()) return cmd_train(tr_flags);
    if (ev->parsed()) return cmd_eval(ev_flags, checkpoint, gt_as_pred);
    if (lk->parsed()) return cmd_leakage(lk_annotations, lk_points, lk_name);
    if (rf->parsed()) return cmd_refine(rf_in, rf_out, rf_eps, rf_skip_gate);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const CompatError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  } catch (const IoError& e) {  // includes CorruptionError
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  } catch (const StructureError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "internal error: %s\n", e.what());
    return 4;
  }
  return 0;
}
