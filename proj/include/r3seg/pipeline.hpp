#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "r3seg/adam.hpp"
#include "r3seg/datakit.hpp"
#include "r3seg/errors.hpp"
#include "r3seg/grid.hpp"
#include "r3seg/losses.hpp"
#include "r3seg/maskops.hpp"
#include "r3seg/prompts.hpp"
#include "r3seg/rng.hpp"
#include "r3seg/segmenter.hpp"
#include "r3seg/ssa.hpp"

// Training loop: Refine (entropy gate + overlap suppression on weak-view
// point decodes), Requery (weak-view re-decode from derived boxes, no
// gradients), Reinforce (queue alignment on strong-view embeddings), with one
// optimizer step per image on the adapter factors only.

namespace r3seg::pipeline {

using segmenter::PromptGroup;
using segmenter::ToySegmenter;

struct TrainConfig {
  int n_points = 1;
  int epochs = 5;
  double learning_rate = 5e-4;
  double weight_decay = 1e-4;
  int batch_size = 1;
  int lora_rank = 4;
  int queue_capacity = 32;
  double tau = 0.05;
  double epsilon = 0.5;
  bool queue_reset_per_epoch = false;
  losses::LossWeights loss;
  prompts::AugmentRanges augment;
  segmenter::SegmenterConfig model;
  uint64_t seed = 0;

  void validate() const {
    if (n_points < 1 || n_points > 3) throw ConfigError("run.n_points must be in {1,2,3}");
    if (epochs < 0) throw ConfigError("run.epochs must be >= 0");
    if (learning_rate <= 0) throw ConfigError("optimizer.learning_rate must be > 0");
    if (weight_decay < 0) throw ConfigError("optimizer.weight_decay must be >= 0");
    if (batch_size != 1) throw ConfigError("run.batch_size: only 1 is supported");
    if (lora_rank < 1) throw ConfigError("model.rank must be >= 1");
    if (queue_capacity < 1) throw ConfigError("ssa.capacity must be >= 1");
    if (tau <= 0) throw ConfigError("ssa.tau must be > 0");
    if (!(epsilon >= 0 && epsilon < 1)) throw ConfigError("refine.epsilon must be in [0,1)");
    loss.validate();
    augment.validate();
    model.validate();
  }

  segmenter::SegmenterConfig model_config() const {
    segmenter::SegmenterConfig m = model;
    m.lora_rank = lora_rank;
    return m;
  }
};

enum class Variant { full, no_ssa, no_requery, no_refine, direct };

inline Variant parse_variant(const std::string& name) {
  if (name == "full") return Variant::full;
  if (name == "no_ssa") return Variant::no_ssa;
  if (name == "no_requery") return Variant::no_requery;
  if (name == "no_refine") return Variant::no_refine;
  if (name == "direct") return Variant::direct;
  throw ConfigError("unknown variant: " + name +
                    " (expected full|no_ssa|no_requery|no_refine|direct)");
}

inline const char* variant_name(Variant v) {
  switch (v) {
    case Variant::full: return "full";
    case Variant::no_ssa: return "no_ssa";
    case Variant::no_requery: return "no_requery";
    case Variant::no_refine: return "no_refine";
    case Variant::direct: return "direct";
  }
  return "?";
}

// --- data access -------------------------------------------------------------

struct LoadedItem {
  std::string image_id;
  int64_t numeric_id = 0;
  Image image;
  std::vector<int64_t> instance_ids;
  std::vector<MaskPlane> gt;
};

inline std::vector<LoadedItem> load_split(const datakit::Dataset& ds, const std::string& split) {
  std::vector<LoadedItem> out;
  int64_t n = 0;
  for (const auto* item : ds.split(split)) {
    LoadedItem li;
    li.image_id = item->image_id;
    li.numeric_id = n++;
    li.image = read_png(item->image_path.string());
    for (const auto& inst : item->instances) {
      li.instance_ids.push_back(inst.id);
      li.gt.push_back(datakit::decode_instance(inst, item->height, item->width));
    }
    out.push_back(std::move(li));
  }
  return out;
}

// --- metrics -----------------------------------------------------------------

inline std::pair<double, double> mask_iou_f1(const MaskPlane& a, const MaskPlane& b) {
  if (a.h != b.h || a.w != b.w) throw StructureError("mask_iou_f1: shape mismatch");
  size_t inter = 0, na = 0, nb = 0;
  for (size_t i = 0; i < a.d.size(); ++i) {
    const bool va = a.d[i] != 0, vb = b.d[i] != 0;
    inter += va && vb;
    na += va;
    nb += vb;
  }
  const size_t uni = na + nb - inter;
  const double iou = uni == 0 ? 1.0 : double(inter) / double(uni);
  const double f1 = na + nb == 0 ? 1.0 : 2.0 * double(inter) / double(na + nb);
  return {iou, f1};
}

struct EvalResult {
  double miou = 0.0;
  double f1 = 0.0;
  int instances_evaluated = 0;
  int instances_excluded = 0;
};

inline MaskPlane threshold_mask(const Tensor& prob, double thr = 0.5) {
  MaskPlane m(prob.rows, prob.cols);
  for (size_t i = 0; i < prob.d.size(); ++i) m.d[i] = prob.d[i] >= thr ? 1 : 0;
  return m;
}

// Point-prompted evaluation against ground truth; fresh samples per call,
// deterministic in (items, n_points, seed).
inline EvalResult evaluate(const ToySegmenter& model, const std::vector<LoadedItem>& items,
                           int n_points, uint64_t seed) {
  EvalResult r;
  double iou_sum = 0.0, f1_sum = 0.0;
  for (size_t ii = 0; ii < items.size(); ++ii) {
    const auto& item = items[ii];
    std::vector<PromptGroup> groups;
    std::vector<size_t> gt_index;
    for (size_t j = 0; j < item.gt.size(); ++j) {
      if (count_nonzero(item.gt[j]) == 0) {
        ++r.instances_excluded;
        continue;
      }
      auto sample =
          prompts::sample_points(item.gt[j], n_points, mix_seed(seed, ii, j),
                                 item.instance_ids[j]);
      PromptGroup g;
      g.instance_id = item.instance_ids[j];
      g.points = sample.positives;
      g.points.insert(g.points.end(), sample.negatives.begin(), sample.negatives.end());
      groups.push_back(std::move(g));
      gt_index.push_back(j);
    }
    if (groups.empty()) continue;
    auto emb = model.encode_image(item.image);
    auto preds = model.decode_masks(emb, groups);
    for (size_t k = 0; k < preds.size(); ++k) {
      const auto [iou, f1] = mask_iou_f1(threshold_mask(preds[k].mask_prob),
                                         item.gt[gt_index[k]]);
      iou_sum += iou;
      f1_sum += f1;
      ++r.instances_evaluated;
    }
  }
  if (r.instances_evaluated > 0) {
    r.miou = iou_sum / r.instances_evaluated;
    r.f1 = f1_sum / r.instances_evaluated;
  }
  return r;
}

// The frozen baseline: evaluation with zero adaptation steps.
inline EvalResult direct_test(const TrainConfig& cfg, const std::vector<LoadedItem>& items,
                              int n_points, uint64_t eval_seed) {
  ToySegmenter model(cfg.model_config());
  return evaluate(model, items, n_points, eval_seed);
}

// --- the R3 step ---------------------------------------------------------------

struct StepResult {
  bool skipped = false;
  double focal = 0.0, dice = 0.0, iou = 0.0, ssa = 0.0, total = 0.0;
  bool ssa_active = false;
  double leak_pre = 0.0, leak_post = 0.0;
  int instances_in = 0;
  int instances_kept = 0;
  // IoU of pseudo-masks vs the initial point-prompt masks, against GT in the
  // view frame; drives the requery-improvement diagnostics.
  double point_mask_iou = 0.0, pseudo_mask_iou = 0.0;
};

namespace detail {

inline maskops::ProbMaskStack stack_from_preds(const std::vector<Tensor>& probs,
                                               const std::vector<int64_t>& ids,
                                               const std::string& image_id) {
  maskops::ProbMaskStack st(int(probs.size()), probs[0].rows, probs[0].cols);
  st.image_id = image_id;
  st.instance_ids = ids;
  for (size_t k = 0; k < probs.size(); ++k)
    std::copy(probs[k].d.begin(), probs[k].d.end(),
              st.data.begin() + ptrdiff_t(k * probs[k].d.size()));
  return st;
}

}  // namespace detail

// Teacher products of one step: weak-view point decode, refine, requery.
// Shared by training and by the frozen requery-improvement measurement.
struct TeacherPass {
  bool skipped = false;
  prompts::ViewPair view;
  std::vector<PromptGroup> student_groups;
  std::vector<MaskPlane> targets;
  std::vector<int64_t> kept_ids;
  double leak_pre = 0.0, leak_post = 0.0;
  int instances_in = 0, instances_kept = 0;
  double point_mask_iou = 0.0, pseudo_mask_iou = 0.0;
};

inline TeacherPass run_teacher(const ToySegmenter& model, const LoadedItem& item,
                               const TrainConfig& cfg, Variant variant, uint64_t step_seed) {
  TeacherPass tp;
  tp.instances_in = int(item.gt.size());

  // (1) dual views sharing geometry
  tp.view = prompts::make_views(item.image, mix_seed(step_seed, 0xF11), cfg.augment);
  const auto& view = tp.view;

  // (2) point prompts sampled on the original mask, transferred to the view
  std::vector<PromptGroup> point_groups;
  std::vector<MaskPlane> gt_view;
  std::vector<int64_t> ids;
  for (size_t j = 0; j < item.gt.size(); ++j) {
    if (count_nonzero(item.gt[j]) == 0) continue;
    auto sample = prompts::sample_points(item.gt[j], cfg.n_points,
                                         mix_seed(step_seed, 0x9A, j), item.instance_ids[j]);
    PromptGroup g;
    g.instance_id = item.instance_ids[j];
    g.points = prompts::transfer_prompts(sample.positives, view);
    auto negs = prompts::transfer_prompts(sample.negatives, view);
    g.points.insert(g.points.end(), negs.begin(), negs.end());
    point_groups.push_back(std::move(g));
    gt_view.push_back(view.flip_applied ? prompts::hflip(item.gt[j]) : item.gt[j]);
    ids.push_back(item.instance_ids[j]);
  }
  if (point_groups.empty()) {
    tp.skipped = true;
    return tp;
  }

  // (3) weak-view decode from points (teacher, no gradients)
  const auto weak_emb = model.encode_image(view.weak);
  const auto point_preds = model.decode_masks(weak_emb, point_groups);
  std::vector<Tensor> point_probs;
  for (const auto& p : point_preds) point_probs.push_back(p.mask_prob);
  const auto stack = detail::stack_from_preds(point_probs, ids, item.image_id);

  // (4) Refine: entropy gate plus overlap suppression (skipped by no_refine,
  // which goes straight from thresholded masks to boxes)
  maskops::RefinedMaskSet refined;
  if (variant == Variant::no_refine) {
    maskops::BinaryMaskSet raw(stack.k, stack.h, stack.w);
    raw.instance_ids = stack.instance_ids;
    for (size_t i = 0; i < stack.data.size(); ++i) raw.data[i] = stack.data[i] >= 0.5 ? 1 : 0;
    tp.leak_pre = maskops::leakage_rate(raw);
    refined.masks = raw;
    for (int k = 0; k < raw.k; ++k)
      refined.boxes.push_back(maskops::enclosing_box(raw.plane(k)));
    tp.leak_post = tp.leak_pre;
  } else {
    const auto ent = maskops::entropy_map(stack);
    const auto gated = maskops::confidence_filter(stack, ent, cfg.epsilon);
    tp.leak_pre = maskops::leakage_rate(gated);
    refined = maskops::refine(gated, maskops::overlap_map(gated));
    tp.leak_post = maskops::leakage_rate(refined.masks);
  }

  // Instances whose refined mask vanished carry no box and drop out here.
  std::vector<size_t> kept;
  for (size_t k = 0; k < refined.boxes.size(); ++k)
    if (refined.boxes[k].has_value()) kept.push_back(k);
  tp.instances_kept = int(kept.size());
  if (kept.empty()) {
    tp.skipped = true;
    return tp;
  }

  // (5) Requery: weak-view decode from self-generated boxes (teacher).
  // (6) Student prompts: the same boxes on the strong view; no_requery trains
  //     on the refined point-masks with the original point prompts instead.
  if (variant == Variant::no_requery) {
    for (size_t k : kept) {
      tp.student_groups.push_back(point_groups[k]);
      tp.targets.push_back(refined.masks.plane(int(k)));
      tp.kept_ids.push_back(ids[k]);
    }
  } else {
    std::vector<PromptGroup> box_groups;
    for (size_t k : kept) {
      PromptGroup g;
      g.instance_id = ids[k];
      g.box = prompts::BoxPrompt{*refined.boxes[k], ids[k]};
      box_groups.push_back(g);
    }
    const auto requery_preds = model.decode_masks(weak_emb, box_groups);
    for (size_t i = 0; i < box_groups.size(); ++i) {
      tp.student_groups.push_back(box_groups[i]);
      tp.targets.push_back(threshold_mask(requery_preds[i].mask_prob));
      tp.kept_ids.push_back(box_groups[i].instance_id);
    }
  }

  // Requery-improvement diagnostics: initial point masks vs pseudo-masks,
  // both against GT in the view frame.
  double psum = 0.0, qsum = 0.0;
  for (size_t i = 0; i < kept.size(); ++i) {
    const size_t k = kept[i];
    psum += mask_iou_f1(threshold_mask(point_probs[k]), gt_view[k]).first;
    qsum += mask_iou_f1(tp.targets[i], gt_view[k]).first;
  }
  tp.point_mask_iou = psum / double(kept.size());
  tp.pseudo_mask_iou = qsum / double(kept.size());
  return tp;
}

// Mean IoU of initial point-prompt masks vs requeried pseudo-masks against
// ground truth over a dataset, with the model frozen.
struct RequeryGap {
  double point_iou = 0.0;
  double pseudo_iou = 0.0;
  int images = 0;
};

inline RequeryGap requery_gap(const ToySegmenter& model,
                              const std::vector<LoadedItem>& items, const TrainConfig& cfg,
                              uint64_t seed) {
  RequeryGap gap;
  for (size_t i = 0; i < items.size(); ++i) {
    auto tp = run_teacher(model, items[i], cfg, Variant::full, mix_seed(seed, 0, i));
    if (tp.skipped) continue;
    gap.point_iou += tp.point_mask_iou;
    gap.pseudo_iou += tp.pseudo_mask_iou;
    ++gap.images;
  }
  if (gap.images > 0) {
    gap.point_iou /= gap.images;
    gap.pseudo_iou /= gap.images;
  }
  return gap;
}

// One training iteration over a single image. Teacher passes (weak view) run
// without gradients; the student pass (strong view) carries them.
inline StepResult r3_step(const ToySegmenter& model, Adam& optimizer,
                          ssa::EmbeddingQueue& queue, const LoadedItem& item,
                          const TrainConfig& cfg, Variant variant, uint64_t step_seed) {
  if (variant == Variant::direct)
    throw ConfigError("r3_step: 'direct' performs no training steps");
  StepResult res;

  TeacherPass tp = run_teacher(model, item, cfg, variant, step_seed);
  res.instances_in = tp.instances_in;
  res.instances_kept = tp.instances_kept;
  res.leak_pre = tp.leak_pre;
  res.leak_post = tp.leak_post;
  res.point_mask_iou = tp.point_mask_iou;
  res.pseudo_mask_iou = tp.pseudo_mask_iou;
  if (tp.skipped) {
    res.skipped = true;
    return res;
  }
  const auto& view = tp.view;
  const auto& student_groups = tp.student_groups;
  const auto& targets = tp.targets;
  const auto& kept_ids = tp.kept_ids;

  // (7) student pass on the strong view, gradients on
  Graph g;
  model.zero_grads();
  VarId feat = model.encode_image_on(g, view.strong, /*train=*/true);
  auto ctx = model.prepare_decode(g, feat, view.strong.h / cfg.model.stride,
                                  view.strong.w / cfg.model.stride);

  std::vector<VarId> focal_terms, dice_terms, iou_terms;
  std::vector<VarId> live_embeddings;
  std::vector<size_t> live_idx;
  for (size_t i = 0; i < student_groups.size(); ++i) {
    auto decoded = model.decode_group_on(g, ctx, student_groups[i]);
    focal_terms.push_back(losses::focal_loss_node(g, decoded.prob, targets[i],
                                                  cfg.loss.focal_gamma,
                                                  cfg.loss.focal_alpha_balance));
    dice_terms.push_back(losses::dice_loss_node(g, decoded.prob, targets[i],
                                                cfg.loss.dice_smooth));
    iou_terms.push_back(losses::iou_loss_node(g, decoded.prob, targets[i],
                                              cfg.loss.dice_smooth));
    if (variant != Variant::no_ssa) {
      auto w = model.pooling_weights(targets[i]);
      if (w) {
        live_embeddings.push_back(model.instance_embedding_on(g, feat, *w));
        live_idx.push_back(i);
      }
    }
  }

  auto mean_of = [&g](const std::vector<VarId>& terms) {
    VarId acc = terms[0];
    for (size_t i = 1; i < terms.size(); ++i) acc = g.add(acc, terms[i]);
    return g.scale(acc, 1.0 / double(terms.size()));
  };
  VarId focal_mean = mean_of(focal_terms);
  VarId dice_mean = mean_of(dice_terms);
  VarId iou_mean = mean_of(iou_terms);

  // (8) queue alignment over history plus the current live embeddings
  VarId total = g.add(g.scale(focal_mean, cfg.loss.alpha), g.add(dice_mean, iou_mean));
  if (variant != Variant::no_ssa) {
    queue.begin_iteration();
    std::vector<std::vector<double>> frozen;
    const size_t room = queue.capacity() > live_embeddings.size()
                            ? queue.capacity() - live_embeddings.size()
                            : 0;
    const size_t start = queue.size() > room ? queue.size() - room : 0;
    for (size_t i = start; i < queue.size(); ++i) frozen.push_back(queue.entry(i).embedding);
    if (frozen.size() + live_embeddings.size() >= 2 && !live_embeddings.empty()) {
      VarId ssa_term = ssa::loss_node(g, live_embeddings, frozen, cfg.tau);
      res.ssa = g.value(ssa_term).item();
      res.ssa_active = true;
      total = g.add(total, g.scale(ssa_term, cfg.loss.beta));
    }
  }

  res.focal = g.value(focal_mean).item();
  res.dice = g.value(dice_mean).item();
  res.iou = g.value(iou_mean).item();
  res.total = g.value(total).item();

  // (9) one optimizer step on the adapter factors only
  g.backward(total);
  optimizer.step(model.trainable_parameters());

  // (10) push current embeddings (computed pre-update) into the queue
  if (variant != Variant::no_ssa)
    for (size_t i = 0; i < live_embeddings.size(); ++i)
      queue.push(g.value(live_embeddings[i]).d, item.numeric_id, kept_ids[live_idx[i]]);

  return res;
}

// --- training loop -------------------------------------------------------------

struct EpochReport {
  int epoch = 0;
  double focal = 0.0, dice = 0.0, iou = 0.0, ssa = 0.0, total = 0.0;
  double test_miou = 0.0, test_f1 = 0.0;
  double leak_pre = 0.0, leak_post = 0.0;
  double queue_mean_similarity = 0.0;
  bool queue_active = false;
  double wall_seconds = 0.0;
  int steps = 0;
  int skipped_steps = 0;
  double point_mask_iou = 0.0, pseudo_mask_iou = 0.0;

  nlohmann::json to_json(const std::string& variant, double beta) const {
    return nlohmann::json{{"schema_version", 1},
                          {"epoch", epoch},
                          {"variant", variant},
                          {"beta", beta},
                          {"focal", focal},
                          {"dice", dice},
                          {"iou", iou},
                          {"ssa", ssa},
                          {"total", total},
                          {"test_miou", test_miou},
                          {"test_f1", test_f1},
                          {"leak_pre", leak_pre},
                          {"leak_post", leak_post},
                          {"queue_mean_similarity",
                           queue_active ? nlohmann::json(queue_mean_similarity)
                                        : nlohmann::json()},
                          {"wall_seconds", wall_seconds},
                          {"steps", steps},
                          {"skipped_steps", skipped_steps},
                          {"point_mask_iou", point_mask_iou},
                          {"pseudo_mask_iou", pseudo_mask_iou}};
  }
};

struct TrainOutput {
  datakit::TrainState state;
  std::vector<EpochReport> reports;
  EvalResult final_eval;
};

inline datakit::TrainState make_train_state(const ToySegmenter& model, const Adam& opt,
                                            uint64_t run_seed, int epochs_trained) {
  datakit::TrainState st;
  st.arch_hash = model.arch_hash();
  st.lora_rank = uint32_t(model.config().lora_rank);
  st.run_seed = run_seed;
  st.epochs_trained = uint32_t(epochs_trained);
  st.opt_steps = opt.steps();
  for (const auto& p : model.trainable_parameters())
    st.blobs.emplace_back("adapter." + p.name, *p.value);
  for (const auto& [name, t] : opt.first_moments()) st.blobs.emplace_back("adam.m." + name, t);
  for (const auto& [name, t] : opt.second_moments()) st.blobs.emplace_back("adam.v." + name, t);
  return st;
}

inline void apply_train_state(const datakit::TrainState& st, ToySegmenter& model, Adam* opt) {
  if (st.arch_hash != model.arch_hash())
    throw CompatError("checkpoint/base architecture mismatch: checkpoint " +
                      datakit::fnv_hex(st.arch_hash) + ", base " +
                      datakit::fnv_hex(model.arch_hash()));
  if (int(st.lora_rank) != model.config().lora_rank)
    throw CompatError("checkpoint rank " + std::to_string(st.lora_rank) +
                      " does not match model rank " +
                      std::to_string(model.config().lora_rank));
  auto params = model.trainable_parameters();
  for (const auto& p : params) {
    bool found = false;
    for (const auto& [name, t] : st.blobs)
      if (name == "adapter." + p.name) {
        if (!t.same_shape(*p.value))
          throw CompatError("checkpoint blob shape mismatch for " + p.name);
        *p.value = t;
        found = true;
        break;
      }
    if (!found) throw CompatError("checkpoint missing adapter blob " + p.name);
  }
  if (opt) {
    opt->first_moments().clear();
    opt->second_moments().clear();
    for (const auto& [name, t] : st.blobs) {
      if (name.rfind("adam.m.", 0) == 0) opt->first_moments()[name.substr(7)] = t;
      if (name.rfind("adam.v.", 0) == 0) opt->second_moments()[name.substr(7)] = t;
    }
    opt->restore_steps(st.opt_steps);
  }
}

// Deterministic end-to-end training. Iteration order is a seeded shuffle per
// epoch; every per-sample seed derives from (run seed, epoch, sample index).
inline TrainOutput train(const TrainConfig& cfg, const std::vector<LoadedItem>& train_items,
                         const std::vector<LoadedItem>& test_items, Variant variant,
                         std::vector<std::string>* log_lines = nullptr) {
  cfg.validate();
  if (train_items.empty()) throw ConfigError("train: dataset is empty");

  ToySegmenter model(cfg.model_config());
  Adam optimizer(AdamConfig{cfg.learning_rate, 0.9, 0.999, 1e-8, cfg.weight_decay});
  ssa::EmbeddingQueue queue(size_t(cfg.queue_capacity));

  TrainOutput out;
  const int epochs = variant == Variant::direct ? 0 : cfg.epochs;
  for (int epoch = 0; epoch < epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    if (cfg.queue_reset_per_epoch) queue.clear();

    std::vector<size_t> order(train_items.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng shuffle_rng(mix_seed(cfg.seed, 0x0E70C, uint64_t(epoch)));
    for (size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[size_t(shuffle_rng.uniform_int(0, int(i) - 1))]);

    EpochReport rep;
    rep.epoch = epoch + 1;
    double leak_pre_sum = 0.0, leak_post_sum = 0.0;
    int leak_count = 0;
    for (size_t oi = 0; oi < order.size(); ++oi) {
      const size_t idx = order[oi];
      const uint64_t step_seed = mix_seed(cfg.seed, uint64_t(epoch), uint64_t(idx));
      auto sr = r3_step(model, optimizer, queue, train_items[idx], cfg, variant, step_seed);
      if (sr.skipped) {
        ++rep.skipped_steps;
        continue;
      }
      ++rep.steps;
      rep.focal += sr.focal;
      rep.dice += sr.dice;
      rep.iou += sr.iou;
      rep.ssa += sr.ssa;
      rep.total += sr.total;
      rep.point_mask_iou += sr.point_mask_iou;
      rep.pseudo_mask_iou += sr.pseudo_mask_iou;
      leak_pre_sum += sr.leak_pre;
      leak_post_sum += sr.leak_post;
      ++leak_count;
    }
    if (rep.steps > 0) {
      rep.focal /= rep.steps;
      rep.dice /= rep.steps;
      rep.iou /= rep.steps;
      rep.ssa /= rep.steps;
      rep.total /= rep.steps;
      rep.point_mask_iou /= rep.steps;
      rep.pseudo_mask_iou /= rep.steps;
    }
    if (leak_count > 0) {
      rep.leak_pre = leak_pre_sum / leak_count;
      rep.leak_post = leak_post_sum / leak_count;
    }
    if (variant != Variant::no_ssa && queue.size() >= 2) {
      rep.queue_active = true;
      rep.queue_mean_similarity = ssa::mean_offdiag_similarity(queue);
    }
    const auto ev = evaluate(model, test_items, cfg.n_points, mix_seed(cfg.seed, 0xE7A1, epoch));
    rep.test_miou = ev.miou;
    rep.test_f1 = ev.f1;
    rep.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    out.reports.push_back(rep);
    if (log_lines) {
      char buf[256];
      std::snprintf(buf, sizeof buf,
                    "epoch %d: total %.4f (focal %.4f dice %.4f iou %.4f ssa %.4f) "
                    "test mIoU %.2f F1 %.2f leak %.3f->%.3f",
                    rep.epoch, rep.total, rep.focal, rep.dice, rep.iou, rep.ssa,
                    100.0 * rep.test_miou, 100.0 * rep.test_f1, rep.leak_pre, rep.leak_post);
      log_lines->push_back(buf);
    }
  }

  out.final_eval = evaluate(model, test_items, cfg.n_points, mix_seed(cfg.seed, 0xF17A1));
  out.state = make_train_state(model, optimizer, cfg.seed, epochs);
  return out;
}

// --- ablation ------------------------------------------------------------------

struct AblationRow {
  std::string variant;
  uint64_t seed = 0;
  double miou = 0.0;
  double f1 = 0.0;
};

struct AblationResult {
  std::vector<AblationRow> rows;

  double median_miou(const std::string& variant) const {
    std::vector<double> v;
    for (const auto& r : rows)
      if (r.variant == variant) v.push_back(r.miou);
    if (v.empty()) throw InputError("no rows for variant " + variant);
    std::sort(v.begin(), v.end());
    return v[v.size() / 2];
  }
};

// One evaluation row per (variant, seed); seeds are shared across variants so
// comparisons are paired.
inline AblationResult run_ablation(const TrainConfig& base_cfg,
                                   const std::vector<LoadedItem>& train_items,
                                   const std::vector<LoadedItem>& test_items,
                                   const std::vector<Variant>& variants,
                                   const std::vector<uint64_t>& seeds,
                                   std::vector<std::string>* log_lines = nullptr) {
  if (variants.empty() || seeds.empty()) throw ConfigError("run_ablation: nothing to run");
  AblationResult out;
  for (Variant v : variants) {
    for (uint64_t seed : seeds) {
      TrainConfig cfg = base_cfg;
      cfg.seed = seed;
      if (v == Variant::no_ssa) cfg.loss.beta = 0.0;
      EvalResult ev;
      if (v == Variant::direct) {
        ev = direct_test(cfg, test_items, cfg.n_points, mix_seed(seed, 0xF17A1));
      } else {
        ev = train(cfg, train_items, test_items, v, nullptr).final_eval;
      }
      out.rows.push_back(AblationRow{variant_name(v), seed, ev.miou, ev.f1});
      if (log_lines) {
        char buf[128];
        std::snprintf(buf, sizeof buf, "%-10s seed %llu: mIoU %.2f F1 %.2f", variant_name(v),
                      static_cast<unsigned long long>(seed), 100.0 * ev.miou, 100.0 * ev.f1);
        log_lines->push_back(buf);
      }
    }
  }
  return out;
}

}  // namespace r3seg::pipeline
