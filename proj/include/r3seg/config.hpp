#pragma once

#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "r3seg/errors.hpp"
#include "r3seg/pipeline.hpp"

// Sectioned run configuration. Unknown keys are rejected, missing keys fall
// back to the published defaults, and the resolved document (every value,
// defaulted or not) can be dumped back out.

namespace r3seg::config {

using nlohmann::json;

struct RunConfig {
  pipeline::TrainConfig train;
  std::string variant = "full";
  std::string dataset_dir;
  std::string out_dir = "out";

  json resolved() const {
    return json{
        {"run",
         {{"seed", train.seed},
          {"epochs", train.epochs},
          {"n_points", train.n_points},
          {"variant", variant},
          {"learning_rate", train.learning_rate},
          {"weight_decay", train.weight_decay},
          {"batch_size", train.batch_size}}},
        {"model",
         {{"rank", train.lora_rank},
          {"dim", train.model.dim},
          {"stride", train.model.stride},
          {"image_size", train.model.image_size},
          {"init_seed", train.model.init_seed}}},
        {"loss",
         {{"alpha", train.loss.alpha},
          {"beta", train.loss.beta},
          {"focal_gamma", train.loss.focal_gamma},
          {"focal_alpha_balance", train.loss.focal_alpha_balance},
          {"dice_smooth", train.loss.dice_smooth}}},
        {"ssa",
         {{"capacity", train.queue_capacity},
          {"tau", train.tau},
          {"reset_per_epoch", train.queue_reset_per_epoch}}},
        {"refine", {{"epsilon", train.epsilon}}},
        {"augment",
         {{"brightness", {train.augment.brightness_lo, train.augment.brightness_hi}},
          {"contrast", {train.augment.contrast_lo, train.augment.contrast_hi}},
          {"saturation", {train.augment.saturation_lo, train.augment.saturation_hi}},
          {"shadow", {train.augment.shadow_lo, train.augment.shadow_hi}}}},
        {"data", {{"dataset", dataset_dir}, {"out", out_dir}}}};
  }

  // Applies a parsed document over the defaults. Every problem is collected
  // so a bad config reports all failures at once.
  static RunConfig from_json(const json& doc) {
    RunConfig cfg;
    std::vector<std::string> errors;

    static const std::set<std::string> sections = {"run",    "model",  "loss", "ssa",
                                                   "refine", "augment", "data"};
    static const std::map<std::string, std::set<std::string>> keys = {
        {"run",
         {"seed", "epochs", "n_points", "variant", "learning_rate", "weight_decay",
          "batch_size"}},
        {"model", {"rank", "dim", "stride", "image_size", "init_seed"}},
        {"loss", {"alpha", "beta", "focal_gamma", "focal_alpha_balance", "dice_smooth"}},
        {"ssa", {"capacity", "tau", "reset_per_epoch"}},
        {"refine", {"epsilon"}},
        {"augment", {"brightness", "contrast", "saturation", "shadow"}},
        {"data", {"dataset", "out"}}};

    if (!doc.is_object()) {
      throw ConfigError("config: top level must be an object of sections");
    }
    for (const auto& [sec, body] : doc.items()) {
      if (!sections.count(sec)) {
        errors.push_back("unknown section '" + sec + "'");
        continue;
      }
      if (!body.is_object()) {
        errors.push_back("section '" + sec + "' must be an object");
        continue;
      }
      for (const auto& [key, _] : body.items())
        if (!keys.at(sec).count(key)) errors.push_back("unknown key '" + sec + "." + key + "'");
    }

    auto get = [&doc, &errors](const char* sec, const char* key, auto fallback) {
      using T = decltype(fallback);
      if (!doc.contains(sec) || !doc.at(sec).is_object() || !doc.at(sec).contains(key))
        return fallback;
      try {
        return doc.at(sec).at(key).template get<T>();
      } catch (const json::exception&) {
        errors.push_back(std::string("bad value type for '") + sec + "." + key + "'");
        return fallback;
      }
    };
    auto get_range = [&doc, &errors](const char* key, double& lo, double& hi) {
      if (!doc.contains("augment") || !doc.at("augment").is_object() ||
          !doc.at("augment").contains(key))
        return;
      const auto& v = doc.at("augment").at(key);
      if (!v.is_array() || v.size() != 2 || !v[0].is_number() || !v[1].is_number()) {
        errors.push_back(std::string("augment.") + key + " must be [lo, hi]");
        return;
      }
      lo = v[0];
      hi = v[1];
    };

    cfg.train.seed = get("run", "seed", cfg.train.seed);
    cfg.train.epochs = get("run", "epochs", cfg.train.epochs);
    cfg.train.n_points = get("run", "n_points", cfg.train.n_points);
    cfg.variant = get("run", "variant", cfg.variant);
    cfg.train.learning_rate = get("run", "learning_rate", cfg.train.learning_rate);
    cfg.train.weight_decay = get("run", "weight_decay", cfg.train.weight_decay);
    cfg.train.batch_size = get("run", "batch_size", cfg.train.batch_size);

    cfg.train.lora_rank = get("model", "rank", cfg.train.lora_rank);
    cfg.train.model.dim = get("model", "dim", cfg.train.model.dim);
    cfg.train.model.stride = get("model", "stride", cfg.train.model.stride);
    cfg.train.model.image_size = get("model", "image_size", cfg.train.model.image_size);
    cfg.train.model.init_seed = get("model", "init_seed", cfg.train.model.init_seed);

    cfg.train.loss.alpha = get("loss", "alpha", cfg.train.loss.alpha);
    cfg.train.loss.beta = get("loss", "beta", cfg.train.loss.beta);
    cfg.train.loss.focal_gamma = get("loss", "focal_gamma", cfg.train.loss.focal_gamma);
    cfg.train.loss.focal_alpha_balance =
        get("loss", "focal_alpha_balance", cfg.train.loss.focal_alpha_balance);
    cfg.train.loss.dice_smooth = get("loss", "dice_smooth", cfg.train.loss.dice_smooth);

    cfg.train.queue_capacity = get("ssa", "capacity", cfg.train.queue_capacity);
    cfg.train.tau = get("ssa", "tau", cfg.train.tau);
    cfg.train.queue_reset_per_epoch =
        get("ssa", "reset_per_epoch", cfg.train.queue_reset_per_epoch);

    cfg.train.epsilon = get("refine", "epsilon", cfg.train.epsilon);

    get_range("brightness", cfg.train.augment.brightness_lo, cfg.train.augment.brightness_hi);
    get_range("contrast", cfg.train.augment.contrast_lo, cfg.train.augment.contrast_hi);
    get_range("saturation", cfg.train.augment.saturation_lo, cfg.train.augment.saturation_hi);
    get_range("shadow", cfg.train.augment.shadow_lo, cfg.train.augment.shadow_hi);

    cfg.dataset_dir = get("data", "dataset", cfg.dataset_dir);
    cfg.out_dir = get("data", "out", cfg.out_dir);

    try {
      pipeline::parse_variant(cfg.variant);
    } catch (const ConfigError& e) {
      errors.push_back(e.what());
    }
    try {
      cfg.train.validate();
    } catch (const ConfigError& e) {
      errors.push_back(e.what());
    }
    if (!errors.empty()) {
      std::string all = "config validation failed:";
      for (const auto& e : errors) all += "\n  - " + e;
      throw ConfigError(all);
    }
    return cfg;
  }

  static RunConfig load(const std::optional<std::string>& path) {
    if (!path) return RunConfig{};
    std::ifstream in(*path);
    if (!in) throw ConfigError("cannot open config file: " + *path);
    json doc;
    try {
      in >> doc;
    } catch (const json::exception& e) {
      throw ConfigError("config parse error in " + *path + ": " + e.what());
    }
    return from_json(doc);
  }

  void require_dataset() const {
    if (dataset_dir.empty())
      throw ConfigError("config validation failed:\n  - missing key 'data.dataset'");
  }
};

}  // namespace r3seg::config
