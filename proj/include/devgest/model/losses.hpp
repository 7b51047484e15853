#pragma once

#include <string>
#include <vector>

#include "devgest/core/autodiff.hpp"
#include "devgest/core/errors.hpp"
#include "devgest/core/nn.hpp"
#include "devgest/core/serialize.hpp"
#include "devgest/media/image.hpp"

namespace devgest {

// ---- frozen perceptual feature extractor --------------------------------------

struct PerceptualConfig {
  // first conv keeps full resolution with >= 27 channels so that matching the
  // first tap pins pixels exactly (3x3x3 patches embed injectively)
  std::vector<int> widths = {28, 32, 48};
  std::vector<int> strides = {1, 2, 2};
  std::vector<double> layer_weights = {1.0, 1.0, 1.0};
  uint64_t seed = 1234;
  int local_size = 32;  // crops are resized to this before the local loss
};

/// Fixed feature extractor standing in for a large pretrained backbone.
/// Weights never train; provenance records where they came from.
struct PerceptualNet {
  PerceptualConfig cfg;
  ParamStore weights;
  std::string provenance;  // "random-frozen" | "pretrained-external"

  static PerceptualNet make_random(const PerceptualConfig& cfg = {}) {
    PerceptualNet net;
    net.cfg = cfg;
    net.provenance = "random-frozen";
    Rng rng(cfg.seed);
    int cin = 3;
    for (size_t i = 0; i < cfg.widths.size(); ++i) {
      Conv2dLayer{"perc.c" + std::to_string(i), cin, cfg.widths[i], 3, cfg.strides[i], 1}.init(
          net.weights, rng);
      cin = cfg.widths[i];
    }
    return net;
  }

  /// Load externally trained weights (same layer names/shapes as make_random).
  static PerceptualNet load_external(const std::filesystem::path& path) {
    PerceptualNet net;
    TensorFile tf = read_tensor_file(path);
    net.provenance = "pretrained-external";
    if (tf.meta.contains("widths")) {
      net.cfg.widths = tf.meta["widths"].get<std::vector<int>>();
      net.cfg.strides = tf.meta["strides"].get<std::vector<int>>();
      net.cfg.layer_weights.assign(net.cfg.widths.size(), 1.0);
    }
    for (auto& [name, t] : tf.tensors) net.weights.add(name, t);
    return net;
  }

  /// Feature maps after each frozen conv block.
  std::vector<Var> taps(Exec& ex, Var img) const {
    std::vector<Var> out;
    Var x = img;
    int cin = img->val.dim(0);
    for (size_t i = 0; i < cfg.widths.size(); ++i) {
      Conv2dLayer layer{"perc.c" + std::to_string(i), cin, cfg.widths[i], 3, cfg.strides[i], 1};
      x = leaky(ex.g, layer.frozen_apply(ex, weights, x));
      out.push_back(x);
      cin = cfg.widths[i];
    }
    return out;
  }
};

// ---- perceptual losses ---------------------------------------------------------

/// Multi-resolution perceptual distance: sum over J pyramid levels of the
/// c_i-weighted mean absolute tap differences.
inline Var perceptual_global(Exec& ex, Var target, Var pred, const PerceptualNet& net, int J) {
  Graph& g = ex.g;
  if (J < 1) throw Error("perceptual_global: J must be >= 1");
  int H = target->val.dim(1), W = target->val.dim(2);
  if ((H >> (J - 1)) < 2 || (W >> (J - 1)) < 2 || H % (1 << (J - 1)) || W % (1 << (J - 1)))
    throw Error("perceptual_global: image too small for " + std::to_string(J) + " pyramid levels");
  Var total;
  Var a = target, b = pred;
  for (int j = 0; j < J; ++j) {
    if (j > 0) {
      a = avg_pool2(g, a);
      b = avg_pool2(g, b);
    }
    auto ta = net.taps(ex, a);
    auto tb = net.taps(ex, b);
    for (size_t i = 0; i < ta.size(); ++i) {
      Var term = mul_scalar(g, mean_all(g, vabs(g, sub(g, ta[i], tb[i]))), net.cfg.layer_weights[i]);
      total = total ? add(g, total, term) : term;
    }
  }
  return total;
}

/// Crop a box, bilinearly resize to the local net input size.
inline Var crop_resize(Graph& g, Var img, const Box& box, int size) {
  if (box.width() <= 0 || box.height() <= 0) throw Error("crop_resize: degenerate box");
  if (!box.valid_in(img->val.dim(2), img->val.dim(1))) throw Error("crop_resize: box out of bounds");
  Var c = crop3(g, img, box.y0, box.x0, box.height(), box.width());
  if (c->val.dim(1) == size && c->val.dim(2) == size) return c;
  return grid_sample(g, c, g.constant(identity_grid(size, size)));
}

struct LocalLosses {
  Var hand;
  Var face;
};

/// Hand/face perceptual losses on cropped-and-resized regions (J = 1).
inline LocalLosses perceptual_local(Exec& ex, Var target, Var pred,
                                    const std::vector<Box>& hand_boxes, const Box& face_box,
                                    const PerceptualNet& net_local) {
  Graph& g = ex.g;
  const int S = net_local.cfg.local_size;
  Var hand;
  for (const Box& b : hand_boxes) {
    Var t = crop_resize(g, target, b, S);
    Var p = crop_resize(g, pred, b, S);
    Var term = perceptual_global(ex, t, p, net_local, 1);
    hand = hand ? add(g, hand, term) : term;
  }
  if (!hand) hand = ex.g.constant(Tensor::scalar(0.0));
  Var face = perceptual_global(ex, crop_resize(g, target, face_box, S),
                               crop_resize(g, pred, face_box, S), net_local, 1);
  return {hand, face};
}

// ---- adversarial losses ---------------------------------------------------------

enum class GanKind { LeastSquares, Hinge };

inline void init_discriminator_params(ParamStore& ps, Rng& rng, const std::string& prefix = "disc") {
  Conv2dLayer{prefix + ".c0", 3, 16, 3, 2, 1}.init(ps, rng);
  Conv2dLayer{prefix + ".c1", 16, 32, 3, 2, 1}.init(ps, rng);
  Conv2dLayer{prefix + ".head", 32, 1, 3, 1, 1}.init(ps, rng);
}

/// Patch logits {1, H/4, W/4}; requires input >= 8x8 so the map stays patch-based.
inline Var discriminate(Exec& ex, Var img, const std::string& prefix = "disc") {
  Graph& g = ex.g;
  if (img->val.dim(1) < 8 || img->val.dim(2) < 8)
    throw Error("discriminate: image too small for a patch map");
  Var x = leaky(g, Conv2dLayer{prefix + ".c0", 3, 16, 3, 2, 1}(ex, img));
  x = leaky(g, Conv2dLayer{prefix + ".c1", 16, 32, 3, 2, 1}(ex, x));
  return Conv2dLayer{prefix + ".head", 32, 1, 3, 1, 1}(ex, x);
}

struct AdvLosses {
  Var l_gan;    // generator objective
  Var l_discr;  // discriminator objective (fake side detached)
};

inline AdvLosses adversarial_losses(Exec& ex, Var real, Var fake,
                                    GanKind kind = GanKind::LeastSquares,
                                    const std::string& prefix = "disc") {
  Graph& g = ex.g;
  Var d_real = discriminate(ex, real, prefix);
  Var d_fake_det = discriminate(ex, detach(g, fake), prefix);
  Var d_fake = discriminate(ex, fake, prefix);
  AdvLosses out;
  if (kind == GanKind::LeastSquares) {
    out.l_discr = add(g, mean_all(g, vsquare(g, add_scalar(g, d_real, -1.0))),
                      mean_all(g, vsquare(g, d_fake_det)));
    out.l_gan = mean_all(g, vsquare(g, add_scalar(g, d_fake, -1.0)));
  } else {
    auto relu = [&](Var v) { return leaky(g, v, 0.0); };
    out.l_discr = add(g, mean_all(g, relu(add_scalar(g, vneg(g, d_real), 1.0))),
                      mean_all(g, relu(add_scalar(g, d_fake_det, 1.0))));
    out.l_gan = vneg(g, mean_all(g, d_fake));
  }
  return out;
}

// ---- total ---------------------------------------------------------------------

struct LossWeights {
  double per_glo = 1.0;
  double per_loc = 1.0;
  double per = 1.0;
  double gan = 0.1;
  double discr = 0.1;
  int J = 3;  // pyramid depth of the global term
  bool valid() const {
    return per_glo >= 0 && per_loc >= 0 && per >= 0 && gan >= 0 && discr >= 0 && J >= 1;
  }
};

struct Stage1Parts {
  Var per_glo, hand, face, l_gan, l_discr;
};

struct Stage1Total {
  Var per;        // combined perceptual term
  Var generator;  // optimized by the generator
  Var discr;      // optimized by the discriminator
  Var reported;   // full weighted sum including the discriminator term, for logging
};

inline Stage1Total stage1_total(Graph& g, const Stage1Parts& p, const LossWeights& w) {
  if (!w.valid()) throw Error("stage1_total: invalid weights");
  Var per = add(g, mul_scalar(g, p.per_glo, w.per_glo),
                mul_scalar(g, add(g, p.hand, p.face), w.per_loc));
  Stage1Total out;
  out.per = per;
  out.generator = add(g, mul_scalar(g, per, w.per), mul_scalar(g, p.l_gan, w.gan));
  out.discr = mul_scalar(g, p.l_discr, w.discr);
  out.reported = add(g, out.generator, out.discr);
  return out;
}

}  // namespace devgest
