#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "r3seg/errors.hpp"
#include "r3seg/graph.hpp"
#include "r3seg/grid.hpp"
#include "r3seg/lora.hpp"
#include "r3seg/maskops.hpp"
#include "r3seg/prompts.hpp"
#include "r3seg/rng.hpp"
#include "r3seg/tensor.hpp"

// Desk-scale promptable segmenter: a patchify encoder with two LoRA-wrapped
// self-attention blocks, a prompt-token decoder with cross-attention into the
// image features, and a dot-product mask head combined with a fixed
// prompt-geometry prior (the stand-in for a pretrained backbone's zero-shot
// prompt following).
//
// Feature channels are laid out as [content | positional | flags]; the base
// weights are constructed so the frozen model follows prompts by color
// similarity inside a geometric envelope, leaving the low-rank adapters to
// learn dataset-specific corrections.

namespace r3seg::segmenter {

using maskops::BoundingBox;
using prompts::BoxPrompt;
using prompts::PointPrompt;
using prompts::Polarity;

struct SegmenterConfig {
  int image_size = 64;  // default raster side; encode accepts any multiple of stride
  int stride = 8;
  int dim = 48;
  int enc_blocks = 2;
  int dec_blocks = 2;
  int lora_rank = 4;
  uint64_t init_seed = 17;

  int content_channels() const { return dim - 32; }
  void validate() const {
    if (stride < 2) throw ConfigError("segmenter: stride must be >= 2");
    if (image_size % stride != 0) throw ConfigError("segmenter: image_size % stride != 0");
    if (content_channels() < 8)
      throw ConfigError("segmenter: dim too small, needs >= 40 (8 content + 24 pos + 8 flags)");
    if (enc_blocks < 1 || dec_blocks < 1) throw ConfigError("segmenter: needs >= 1 block");
    if (lora_rank < 1 || lora_rank > dim) throw ConfigError("segmenter: bad lora rank");
  }
};

// Fixed mask-head and prior constants; hashed into the architecture id.
struct HeadParams {
  double pt_amp = 5.0;        // positive point bump height (logits)
  double pt_sigma = 5.5;      // bump radius, px
  double neg_amp = 3.0;       // negative point dip
  double neg_sigma = 5.0;
  // Box prompts localize rather than fill: content decides inside the box,
  // suppression applies outside, so requeried masks trace object shape.
  double box_in = 0.6;
  double box_out = 2.5;
  double box_soft = 1.5;      // box edge softness, px
  double env_rho = 16.0;      // content-envelope radius around points, px
  double env_box_margin = 5.0;
  double env_box_soft = 3.0;
  double env_floor = 0.25;    // content term is never fully muted
  double logit_bias = -1.2;
  double sim_gain = 3.0;      // content-similarity gain (folded into head proj)
  double cross_pos_gain = 3.0;  // decoder cross-attention sharpness
  double route_gain = 3.5;      // decoder token routing sharpness
  double geo_attn_gain = 6.0;   // prompt-geometry bias on the mask token's attention
  double geo_attn_sigma = 8.0;
  double adapter_scale = 2.0;   // multiplier on the low-rank update inside projections
  // Base encoder attention is position-matched (mostly self plus neighbors),
  // so the adapter value path acts as a local per-cell feature recalibration
  // rather than a global average.
  double enc_local_gain = 2.0;
};

// Encoder features as (gh*gw) x dim rows, cell-major (row cy*gw+cx holds the
// feature of cell (cy, cx)); C x H' x W' with C = dim.
struct ImageEmbedding {
  int stride = 0;
  int gh = 0;
  int gw = 0;
  Tensor features;
};

enum class TokenKind { PointPositive, PointNegative, CornerMin, CornerMax };

struct PromptEmbedding {
  Tensor tokens;  // one row per token
  std::vector<TokenKind> kinds;
};

// One prompt group per instance: points and/or a box.
struct PromptGroup {
  int64_t instance_id = -1;
  std::vector<PointPrompt> points;
  std::optional<BoxPrompt> box;

  bool empty() const { return points.empty() && !box.has_value(); }
};

struct InstancePrediction {
  Tensor mask_logits;  // H x W
  Tensor mask_prob;    // sigmoid of logits
  std::optional<std::vector<double>> embedding;  // unit norm when present
  int64_t instance_id = -1;
};

struct ParamRef {
  std::string name;
  Tensor* value;
  Tensor* grad;
};

namespace detail {

constexpr int kPosChannels = 24;  // 6 frequencies x (sin x, cos x, sin y, cos y)
constexpr int kFlagChannels = 8;
// flag slots
constexpr int kFlagImageCell = 0;
constexpr int kFlagPointPos = 1;
constexpr int kFlagPointNeg = 2;
constexpr int kFlagCornerMin = 3;
constexpr int kFlagCornerMax = 4;
constexpr int kFlagMaskToken = 5;
constexpr int kFlagRoute = 6;
constexpr double kFlagValue = 1.5;

inline void write_posenc(Tensor& t, int row, int col0, double x, double y, double base) {
  const double two_pi = 6.283185307179586476925286766559;
  for (int f = 0; f < 6; ++f) {
    const double omega = two_pi * std::pow(2.0, 0.5 * f) / base;
    t.at(row, col0 + 4 * f + 0) = std::sin(omega * x);
    t.at(row, col0 + 4 * f + 1) = std::cos(omega * x);
    t.at(row, col0 + 4 * f + 2) = std::sin(omega * y);
    t.at(row, col0 + 4 * f + 3) = std::cos(omega * y);
  }
}

inline double soft_box_indicator(double x, double y, const BoundingBox& b, double soft) {
  auto sig = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };
  return sig((x - (b.x_min - 0.5)) / soft) * sig(((b.x_max + 0.5) - x) / soft) *
         sig((y - (b.y_min - 0.5)) / soft) * sig(((b.y_max + 0.5) - y) / soft);
}

}  // namespace detail

class ToySegmenter {
 public:
  explicit ToySegmenter(SegmenterConfig cfg = {}, HeadParams head = {})
      : cfg_(cfg), head_(head) {
    cfg_.validate();
    build_base();
    build_adapters();
  }

  const SegmenterConfig& config() const { return cfg_; }
  const HeadParams& head() const { return head_; }

  // Structural identity of the frozen base: config dims plus the seed the
  // base weights are derived from. Checkpoints refuse to load across it.
  uint64_t arch_hash() const {
    uint64_t h = 0xcbf29ce484222325ULL;
    auto mix = [&h](uint64_t v) {
      h ^= v;
      h *= 0x100000001b3ULL;
    };
    mix(2);  // architecture format version
    mix(uint64_t(cfg_.stride));
    mix(uint64_t(cfg_.dim));
    mix(uint64_t(cfg_.enc_blocks));
    mix(uint64_t(cfg_.dec_blocks));
    mix(cfg_.init_seed);
    return h;
  }

  // --- encoding -----------------------------------------------------------

  VarId encode_image_on(Graph& g, const Image& img, bool train) const {
    if (img.h < cfg_.stride || img.w < cfg_.stride || img.h % cfg_.stride != 0 ||
        img.w % cfg_.stride != 0)
      throw StructureError("encode_image: image sides must be positive multiples of stride");
    const int s = cfg_.stride, gh = img.h / s, gw = img.w / s, n = gh * gw;
    const int d = cfg_.dim, pc = 3 * s * s;

    Tensor patches(n, pc);
    for (int cy = 0; cy < gh; ++cy)
      for (int cx = 0; cx < gw; ++cx) {
        const int row = cy * gw + cx;
        for (int py = 0; py < s; ++py)
          for (int px = 0; px < s; ++px)
            for (int c = 0; c < 3; ++c)
              patches.at(row, (py * s + px) * 3 + c) =
                  img.at(cy * s + py, cx * s + px, c) / 255.0;
      }

    Tensor pos(n, d);
    const double base = double(std::max(img.h, img.w));
    for (int cy = 0; cy < gh; ++cy)
      for (int cx = 0; cx < gw; ++cx)
        detail::write_posenc(pos, cy * gw + cx, pos0(), (cx + 0.5) * s - 0.5,
                             (cy + 0.5) * s - 0.5, base);

    VarId x = g.add_row(g.matmul_nt(g.constant(std::move(patches)), g.constant(w_patch_)),
                        g.constant(b_patch_));
    x = g.add(x, g.constant(std::move(pos)));

    const double inv_sqrt_d = 1.0 / std::sqrt(double(d));
    for (int bi = 0; bi < cfg_.enc_blocks; ++bi) {
      const EncBlock& b = enc_[bi];
      VarId ln = g.layernorm_rows(x, b.ln1_g, b.ln1_b);
      VarId q = lora_proj(g, ln, b.wq, adapters_[3 * bi + 0], train);
      VarId k = lora_proj(g, ln, b.wk, adapters_[3 * bi + 1], train);
      VarId v = lora_proj(g, ln, b.wv, adapters_[3 * bi + 2], train);
      VarId attn = g.row_softmax(g.matmul_nt(q, k), inv_sqrt_d);
      VarId mixed = g.matmul_nt(g.matmul(attn, v), g.constant(b.wo));
      x = g.add(x, mixed);
      VarId ln2 = g.layernorm_rows(x, b.ln2_g, b.ln2_b);
      VarId h1 = g.gelu(g.add_row(g.matmul_nt(ln2, g.constant(b.w1)), g.constant(b.b1)));
      VarId mlp = g.add_row(g.matmul_nt(h1, g.constant(b.w2)), g.constant(b.b2));
      x = g.add(x, mlp);
    }
    return x;
  }

  ImageEmbedding encode_image(const Image& img) const {
    Graph g;
    VarId x = encode_image_on(g, img, false);
    ImageEmbedding e;
    e.stride = cfg_.stride;
    e.gh = img.h / cfg_.stride;
    e.gw = img.w / cfg_.stride;
    e.features = g.value(x);
    return e;
  }

  // --- prompt encoding ----------------------------------------------------

  // Point token: positional encoding of (x, y) plus a learned polarity
  // vector. Box: both corners with corner-type vectors.
  PromptEmbedding encode_prompts(const PromptGroup& group, int img_h, int img_w) const {
    if (group.empty()) throw InputError("encode_prompts: empty prompt group");
    check_bounds(group, img_h, img_w);
    const int n_tok = int(group.points.size()) + (group.box ? 2 : 0);
    PromptEmbedding pe;
    pe.tokens = Tensor(n_tok, cfg_.dim);
    const double base = double(std::max(img_h, img_w));
    int row = 0;
    for (const auto& p : group.points) {
      detail::write_posenc(pe.tokens, row, pos0(), p.x, p.y, base);
      const bool positive = p.polarity == Polarity::positive;
      axpy_row(pe.tokens, row, positive ? kind_point_pos_ : kind_point_neg_);
      pe.kinds.push_back(positive ? TokenKind::PointPositive : TokenKind::PointNegative);
      ++row;
    }
    if (group.box) {
      const auto& b = group.box->box;
      detail::write_posenc(pe.tokens, row, pos0(), b.x_min, b.y_min, base);
      axpy_row(pe.tokens, row, kind_corner_min_);
      pe.kinds.push_back(TokenKind::CornerMin);
      ++row;
      detail::write_posenc(pe.tokens, row, pos0(), b.x_max, b.y_max, base);
      axpy_row(pe.tokens, row, kind_corner_max_);
      pe.kinds.push_back(TokenKind::CornerMax);
      ++row;
    }
    return pe;
  }

  const Tensor& polarity_offset(bool positive) const {
    return positive ? kind_point_pos_ : kind_point_neg_;
  }

  // --- decoding -----------------------------------------------------------

  // Per-graph precomputation shared by every prompt group on one image.
  struct DecodeContext {
    VarId features;
    VarId cross_k, cross_v, head_proj;
    VarId neg_mean;  // minus the per-image mean feature row
    int gh, gw, img_h, img_w;
  };

  // Cross-attention keys/values are identical across decoder blocks by
  // construction, so they are computed once per image here.
  DecodeContext prepare_decode(Graph& g, VarId features, int gh, int gw) const {
    DecodeContext ctx;
    ctx.features = features;
    ctx.gh = gh;
    ctx.gw = gw;
    ctx.img_h = gh * cfg_.stride;
    ctx.img_w = gw * cfg_.stride;
    ctx.cross_k = g.matmul_nt(features, g.constant(dec_[0].xk));
    ctx.cross_v = g.matmul_nt(features, g.constant(dec_[0].xv));
    const std::vector<double> uniform(size_t(gh) * gw, 1.0);
    ctx.neg_mean = g.scale(g.weighted_row_mean(features, uniform), -1.0);
    ctx.head_proj =
        g.matmul_nt(g.add_row(features, ctx.neg_mean), g.constant(w_head_proj_));
    return ctx;
  }

  struct DecodedInstance {
    VarId logits;  // H x W
    VarId prob;
    int64_t instance_id;
  };

  // Decodes one prompt group, independent of any other group.
  DecodedInstance decode_group_on(Graph& g, const DecodeContext& ctx,
                                  const PromptGroup& group) const {
    if (group.empty()) throw InputError("decode_masks: empty prompt group");
    check_bounds(group, ctx.img_h, ctx.img_w);
    PromptEmbedding pe = encode_prompts(group, ctx.img_h, ctx.img_w);
    const int n_prompt = pe.tokens.rows;
    Tensor init(n_prompt + 1, cfg_.dim);
    for (int i = 0; i < n_prompt; ++i)
      for (int j = 0; j < cfg_.dim; ++j) init.at(i, j) = pe.tokens.at(i, j);
    for (int j = 0; j < cfg_.dim; ++j) init.at(n_prompt, j) = kind_mask_.at(0, j);

    // Geometry bias: the mask token's cross-attention is steered toward
    // cells inside the prompted region.
    Tensor geo_bias(n_prompt + 1, ctx.gh * ctx.gw);
    fill_geo_attention(group, ctx, geo_bias, n_prompt);

    VarId tok = g.constant(std::move(init));
    const double inv_sqrt_d = 1.0 / std::sqrt(double(cfg_.dim));
    VarId geo = g.constant(std::move(geo_bias));
    for (int bi = 0; bi < cfg_.dec_blocks; ++bi) {
      const DecBlock& b = dec_[bi];
      // token self-attention: the mask token pools prompt-token content
      VarId sq = g.matmul_nt(tok, g.constant(b.sq));
      VarId sk = g.matmul_nt(tok, g.constant(b.sk));
      VarId sv = g.matmul_nt(tok, g.constant(b.sv));
      VarId sattn = g.row_softmax(g.matmul_nt(sq, sk), inv_sqrt_d);
      tok = g.add(tok, g.matmul_nt(g.matmul(sattn, sv), g.constant(b.so)));
      // cross-attention into image cells
      VarId xq = g.matmul_nt(tok, g.constant(b.xq));
      VarId logits = g.add(g.scale(g.matmul_nt(xq, ctx.cross_k), inv_sqrt_d), geo);
      VarId xattn = g.row_softmax(logits, 1.0);
      VarId gathered = g.matmul_nt(g.matmul(xattn, ctx.cross_v), g.constant(b.xo));
      tok = g.add(tok, gathered);
    }

    VarId mask_tok = g.gather_rows(tok, {n_prompt});
    // Content is centered on the per-image mean before the similarity head;
    // common-mode feature drift then cancels instead of inflating every
    // similarity at once (the balloon failure mode of self-distillation).
    VarId m = g.matmul_nt(g.add_row(mask_tok, ctx.neg_mean), g.constant(w_mask_head_));

    // coarse per-cell similarity, upsampled and gated by the content envelope
    VarId cell_scores = g.matmul_nt(ctx.head_proj, m);  // n x 1
    VarId coarse = g.bilinear_upsample(g.reshape(cell_scores, ctx.gh, ctx.gw), cfg_.stride);
    VarId gated = g.mul(coarse, g.constant(env_map(group, ctx.img_h, ctx.img_w)));

    // fine per-patch refinement
    VarId cat = g.concat_cols(ctx.features, g.repeat_row(m, ctx.gh * ctx.gw));
    VarId h1 = g.gelu(g.add_row(g.matmul_nt(cat, w_u1_var(g)), g.constant(b_u1_)));
    VarId fine = g.scatter_patches(g.matmul_nt(h1, w_u2_var(g)), ctx.gh, ctx.gw, cfg_.stride);

    VarId logit_map = g.add(g.add(gated, fine),
                            g.constant(prior_map(group, ctx.img_h, ctx.img_w)));
    DecodedInstance out;
    out.logits = logit_map;
    out.prob = g.sigmoid(logit_map);
    out.instance_id = group.instance_id;
    return out;
  }

  std::vector<InstancePrediction> decode_masks(const ImageEmbedding& emb,
                                               const std::vector<PromptGroup>& groups) const {
    Graph g;
    VarId f = g.constant(emb.features);
    DecodeContext ctx = prepare_decode(g, f, emb.gh, emb.gw);
    std::vector<InstancePrediction> out;
    out.reserve(groups.size());
    for (const auto& group : groups) {
      DecodedInstance di = decode_group_on(g, ctx, group);
      InstancePrediction ip;
      ip.mask_logits = g.value(di.logits);
      ip.mask_prob = g.value(di.prob);
      ip.instance_id = group.instance_id;
      MaskPlane pred(ip.mask_prob.rows, ip.mask_prob.cols);
      for (size_t i = 0; i < pred.d.size(); ++i) pred.d[i] = ip.mask_prob.d[i] >= 0.5 ? 1 : 0;
      ip.embedding = instance_embedding(emb, pred);
      out.push_back(std::move(ip));
    }
    return out;
  }

  // --- instance embeddings --------------------------------------------------

  // Cell weights for masked average pooling: a cell participates when at
  // least half its pixels are masked; if none qualify, fall back to the cells
  // overlapping the mask's box; empty mask -> no weights at all.
  std::optional<std::vector<double>> pooling_weights(const MaskPlane& mask) const {
    const int s = cfg_.stride;
    if (mask.h % s != 0 || mask.w % s != 0)
      throw StructureError("instance_embedding: mask shape not a stride multiple");
    const int gh = mask.h / s, gw = mask.w / s;
    std::vector<double> w(size_t(gh) * gw, 0.0);
    bool any = false;
    for (int cy = 0; cy < gh; ++cy)
      for (int cx = 0; cx < gw; ++cx) {
        int covered = 0;
        for (int py = 0; py < s; ++py)
          for (int px = 0; px < s; ++px) covered += mask.at(cy * s + py, cx * s + px) ? 1 : 0;
        if (covered * 2 >= s * s) {
          w[size_t(cy) * gw + cx] = 1.0;
          any = true;
        }
      }
    if (any) return w;
    const auto box = maskops::enclosing_box(mask);
    if (!box) return std::nullopt;  // empty mask
    for (int cy = 0; cy < gh; ++cy)
      for (int cx = 0; cx < gw; ++cx) {
        const bool hit = box->x_min / s <= cx && cx <= box->x_max / s &&
                         box->y_min / s <= cy && cy <= box->y_max / s;
        if (hit) w[size_t(cy) * gw + cx] = 1.0;
      }
    return w;
  }

  VarId instance_embedding_on(Graph& g, VarId features, const std::vector<double>& weights) const {
    return g.l2_normalize_row(g.weighted_row_mean(features, weights));
  }

  std::optional<std::vector<double>> instance_embedding(const ImageEmbedding& emb,
                                                        const MaskPlane& mask) const {
    if (emb.gh * cfg_.stride != mask.h || emb.gw * cfg_.stride != mask.w)
      throw StructureError("instance_embedding: mask does not match embedding grid");
    auto w = pooling_weights(mask);
    if (!w) return std::nullopt;
    Graph g;
    VarId e = instance_embedding_on(g, g.constant(emb.features), *w);
    return g.value(e).d;
  }

  // --- training surface -----------------------------------------------------

  std::vector<ParamRef> trainable_parameters() const {
    std::vector<ParamRef> out;
    for (auto& a : adapters_) {
      out.push_back(ParamRef{a.target + ".A", &a.A, &a.grad_A});
      out.push_back(ParamRef{a.target + ".B", &a.B, &a.grad_B});
    }
    return out;
  }

  std::vector<lora::LoraAdapter>& adapters() const { return adapters_; }

  void zero_grads() const {
    for (auto& a : adapters_) a.zero_grads();
  }

  // Flat copy of every frozen tensor, for conservation checks.
  std::vector<double> base_snapshot() const {
    std::vector<double> out;
    auto put = [&out](const Tensor& t) { out.insert(out.end(), t.d.begin(), t.d.end()); };
    put(w_patch_);
    put(b_patch_);
    for (const auto& b : enc_) {
      put(b.wq);
      put(b.wk);
      put(b.wv);
      put(b.wo);
      put(b.ln1_g);
      put(b.ln1_b);
      put(b.w1);
      put(b.b1);
      put(b.w2);
      put(b.b2);
      put(b.ln2_g);
      put(b.ln2_b);
    }
    for (const auto& b : dec_) {
      put(b.sq);
      put(b.sk);
      put(b.sv);
      put(b.so);
      put(b.xq);
      put(b.xk);
      put(b.xv);
      put(b.xo);
    }
    put(kind_point_pos_);
    put(kind_point_neg_);
    put(kind_corner_min_);
    put(kind_corner_max_);
    put(kind_mask_);
    put(w_head_proj_);
    put(w_mask_head_);
    put(w_u1_);
    put(b_u1_);
    put(w_u2_);
    return out;
  }

  // Prompt-geometry maps (also used by tests; pure functions of the group).
  Tensor prior_map(const PromptGroup& group, int h, int w) const {
    Tensor t(h, w);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double v = head_.logit_bias;
        double pos_bump = 0.0, neg_bump = 0.0;
        for (const auto& p : group.points) {
          const double d2 = sq(x - p.x) + sq(y - p.y);
          if (p.polarity == Polarity::positive)
            pos_bump = std::max(pos_bump, std::exp(-d2 / (2 * sq(head_.pt_sigma))));
          else
            neg_bump = std::max(neg_bump, std::exp(-d2 / (2 * sq(head_.neg_sigma))));
        }
        v += head_.pt_amp * pos_bump - head_.neg_amp * neg_bump;
        if (group.box) {
          const double ind =
              detail::soft_box_indicator(x, y, group.box->box, head_.box_soft);
          v += head_.box_in * ind - head_.box_out * (1.0 - ind);
        }
        t.at(y, x) = v;
      }
    return t;
  }

  Tensor env_map(const PromptGroup& group, int h, int w) const {
    Tensor t(h, w);
    BoundingBox dilated;
    if (group.box) {
      dilated = group.box->box;
      const int m = int(std::lround(head_.env_box_margin));
      dilated.x_min -= m;
      dilated.x_max += m;
      dilated.y_min -= m;
      dilated.y_max += m;
    }
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double e = 0.0;
        for (const auto& p : group.points) {
          if (p.polarity != Polarity::positive) continue;
          const double d2 = sq(x - p.x) + sq(y - p.y);
          e = std::max(e, std::exp(-d2 / (2 * sq(head_.env_rho))));
        }
        if (group.box)
          e = std::max(e, detail::soft_box_indicator(x, y, dilated, head_.env_box_soft));
        t.at(y, x) = std::max(e, head_.env_floor);
      }
    return t;
  }

 private:
  struct EncBlock {
    Tensor wq, wk, wv, wo;
    Tensor ln1_g, ln1_b, ln2_g, ln2_b;
    Tensor w1, b1, w2, b2;
  };
  struct DecBlock {
    Tensor sq, sk, sv, so;  // token self-attention
    Tensor xq, xk, xv, xo;  // token -> image cross-attention
  };

  static double sq(double v) { return v * v; }
  int pos0() const { return cfg_.content_channels(); }
  int flag0() const { return cfg_.content_channels() + detail::kPosChannels; }

  static void axpy_row(Tensor& t, int row, const Tensor& add) {
    for (int j = 0; j < t.cols; ++j) t.at(row, j) += add.at(0, j);
  }

  void check_bounds(const PromptGroup& g, int h, int w) const {
    for (const auto& p : g.points)
      if (p.x < 0 || p.x >= w || p.y < 0 || p.y >= h)
        throw InputError("prompt point outside the image");
    if (g.box) {
      const auto& b = g.box->box;
      if (b.x_min < 0 || b.y_min < 0 || b.x_max >= w || b.y_max >= h || b.x_min > b.x_max ||
          b.y_min > b.y_max)
        throw InputError("prompt box outside the image");
    }
  }

  VarId lora_proj(Graph& g, VarId x, const Tensor& w, const lora::LoraAdapter& a,
                  bool train) const {
    VarId base = g.matmul_nt(x, g.constant(w));
    VarId bvar = train ? g.leaf(a.B, &const_cast<lora::LoraAdapter&>(a).grad_B)
                       : g.constant(a.B);
    VarId avar = train ? g.leaf(a.A, &const_cast<lora::LoraAdapter&>(a).grad_A)
                       : g.constant(a.A);
    return g.add(base, g.scale(g.matmul_nt(g.matmul_nt(x, bvar), avar), head_.adapter_scale));
  }

  VarId w_u1_var(Graph& g) const { return g.constant(w_u1_); }
  VarId w_u2_var(Graph& g) const { return g.constant(w_u2_); }

  void fill_geo_attention(const PromptGroup& group, const DecodeContext& ctx, Tensor& bias,
                          int mask_row) const {
    const int s = cfg_.stride;
    for (int cy = 0; cy < ctx.gh; ++cy)
      for (int cx = 0; cx < ctx.gw; ++cx) {
        const double px = (cx + 0.5) * s - 0.5, py = (cy + 0.5) * s - 0.5;
        double gv = 0.0;
        for (const auto& p : group.points) {
          if (p.polarity != Polarity::positive) continue;
          const double d2 = sq(px - p.x) + sq(py - p.y);
          gv = std::max(gv, std::exp(-d2 / (2 * sq(head_.geo_attn_sigma))));
        }
        if (group.box)
          gv = std::max(gv,
                        detail::soft_box_indicator(px, py, group.box->box, head_.box_soft));
        bias.at(mask_row, cy * ctx.gw + cx) = head_.geo_attn_gain * gv;
      }
  }

  void build_base() {
    const int d = cfg_.dim, s = cfg_.stride, nc = cfg_.content_channels();
    Rng rng(mix_seed(cfg_.init_seed, 0xBA5E));

    // Patch embedding: content rows carry color statistics centered on
    // mid-gray; everything else comes in through the positional table.
    const int pc = 3 * s * s;
    w_patch_ = Tensor(d, pc);
    b_patch_ = Tensor(1, d);
    const double g_color = 2.2;
    for (int c = 0; c < 3; ++c) {
      for (int p = 0; p < s * s; ++p) w_patch_.at(c, p * 3 + c) = g_color / (s * s);
      b_patch_.at(0, c) = -0.5 * g_color;
    }
    const double lum[3] = {0.299, 0.587, 0.114};
    for (int p = 0; p < s * s; ++p)
      for (int c = 0; c < 3; ++c) w_patch_.at(3, p * 3 + c) = g_color * lum[c] / (s * s);
    b_patch_.at(0, 3) = -0.5 * g_color;
    const double g_tex = 1.2 / std::sqrt(double(pc));
    for (int r = 4; r < nc; ++r) {
      double wsum = 0.0;
      for (int cpos = 0; cpos < pc; ++cpos) {
        const double v = rng.normal() * g_tex;
        w_patch_.at(r, cpos) = v;
        wsum += v;
      }
      b_patch_.at(0, r) = -0.5 * wsum;  // center against a flat mid-gray patch
    }
    b_patch_.at(0, flag0() + detail::kFlagImageCell) = 1.0;

    // Encoder blocks: value path opens at zero so the frozen encoder is a
    // pure feature extractor; LoRA owns the attention contribution.
    enc_.clear();
    for (int bi = 0; bi < cfg_.enc_blocks; ++bi) {
      EncBlock b;
      b.wq = gaussian(d, d, 0.1 / std::sqrt(double(d)), rng);
      b.wk = gaussian(d, d, 0.1 / std::sqrt(double(d)), rng);
      for (int j = 0; j < detail::kPosChannels; ++j) {
        b.wq.at(pos0() + j, pos0() + j) += head_.enc_local_gain;
        b.wk.at(pos0() + j, pos0() + j) += 1.0;
      }
      b.wv = Tensor(d, d);
      b.wo = identity(d);
      b.ln1_g = Tensor(1, d, 1.0);
      b.ln1_b = Tensor(1, d);
      b.ln2_g = Tensor(1, d, 1.0);
      b.ln2_b = Tensor(1, d);
      b.w1 = gaussian(2 * d, d, 0.4 / std::sqrt(double(d)), rng);
      b.b1 = Tensor(1, 2 * d);
      b.w2 = gaussian(d, 2 * d, 0.15 / std::sqrt(2.0 * d), rng);
      b.b2 = Tensor(1, d);
      enc_.push_back(std::move(b));
    }

    // Prompt kind embeddings: one flag slot each.
    auto kind = [&](int slot) {
      Tensor t(1, d);
      t.at(0, flag0() + slot) = detail::kFlagValue;
      return t;
    };
    kind_point_pos_ = kind(detail::kFlagPointPos);
    kind_point_neg_ = kind(detail::kFlagPointNeg);
    kind_corner_min_ = kind(detail::kFlagCornerMin);
    kind_corner_max_ = kind(detail::kFlagCornerMax);
    kind_mask_ = kind(detail::kFlagMaskToken);

    // Decoder: routing self-attention (mask token pools positive-point and
    // corner token content) and pos-matched cross-attention gathering content
    // from image cells. Constructed, not random.
    dec_.clear();
    for (int bi = 0; bi < cfg_.dec_blocks; ++bi) {
      DecBlock b;
      b.sq = Tensor(d, d);
      b.sq.at(flag0() + detail::kFlagRoute, flag0() + detail::kFlagMaskToken) = head_.route_gain;
      b.sk = Tensor(d, d);
      b.sk.at(flag0() + detail::kFlagRoute, flag0() + detail::kFlagPointPos) = head_.route_gain;
      b.sk.at(flag0() + detail::kFlagRoute, flag0() + detail::kFlagCornerMin) = head_.route_gain;
      b.sk.at(flag0() + detail::kFlagRoute, flag0() + detail::kFlagCornerMax) = head_.route_gain;
      b.sv = content_identity(1.0);
      b.so = content_identity(1.0);
      b.xq = Tensor(d, d);
      for (int j = 0; j < detail::kPosChannels; ++j)
        b.xq.at(pos0() + j, pos0() + j) = head_.cross_pos_gain;
      b.xk = Tensor(d, d);
      for (int j = 0; j < detail::kPosChannels; ++j) b.xk.at(pos0() + j, pos0() + j) = 1.0;
      b.xv = content_identity(1.0);
      b.xo = bi == 0 ? content_identity(1.0) : Tensor(d, d);  // only block 1 writes content
      dec_.push_back(std::move(b));
    }

    // Mask head: similarity of cell content against the mask token content,
    // plus a per-patch refinement MLP.
    w_mask_head_ = content_identity(1.0);
    w_head_proj_ = content_identity(head_.sim_gain);
    const int hu = 64;
    w_u1_ = gaussian(hu, 2 * d, 0.4 / std::sqrt(2.0 * d), rng);
    b_u1_ = Tensor(1, hu);
    w_u2_ = gaussian(s * s, hu, 0.3 / std::sqrt(double(hu)), rng);
  }

  void build_adapters() {
    adapters_.clear();
    const char* proj[3] = {"q", "k", "v"};
    for (int bi = 0; bi < cfg_.enc_blocks; ++bi)
      for (int p = 0; p < 3; ++p)
        adapters_.push_back(lora::LoraAdapter::init(
            cfg_.dim, cfg_.dim, cfg_.lora_rank,
            mix_seed(cfg_.init_seed, 0xAD00 + bi * 3 + p),
            "enc" + std::to_string(bi) + "." + proj[p]));
  }

  Tensor identity(int n) const {
    Tensor t(n, n);
    for (int i = 0; i < n; ++i) t.at(i, i) = 1.0;
    return t;
  }

  Tensor content_identity(double gain) const {
    Tensor t(cfg_.dim, cfg_.dim);
    for (int i = 0; i < cfg_.content_channels(); ++i) t.at(i, i) = gain;
    return t;
  }

  static Tensor gaussian(int r, int c, double sigma, Rng& rng) {
    Tensor t(r, c);
    for (double& v : t.d) v = rng.normal() * sigma;
    return t;
  }

  SegmenterConfig cfg_;
  HeadParams head_;
  Tensor w_patch_, b_patch_;
  std::vector<EncBlock> enc_;
  std::vector<DecBlock> dec_;
  Tensor kind_point_pos_, kind_point_neg_, kind_corner_min_, kind_corner_max_, kind_mask_;
  Tensor w_head_proj_, w_mask_head_, w_u1_, b_u1_, w_u2_;
  mutable std::vector<lora::LoraAdapter> adapters_;
};

}  // namespace r3seg::segmenter
