#include <catch2/catch_amalgamated.hpp>

#include <filesystem>

#include "devgest/model/losses.hpp"
#include "support/gradcheck.hpp"

using namespace devgest;
using namespace devgest::testing;

namespace {

Tensor random_image(int h, int w, uint64_t seed, double lo = 0.0, double hi = 1.0) {
  Tensor t({3, h, w});
  Rng rng(seed);
  for (auto& v : t.data) v = rng.uniform(lo, hi);
  return t;
}

PerceptualConfig small_net_cfg() {
  PerceptualConfig cfg;
  cfg.widths = {12, 8};
  cfg.strides = {1, 2};
  cfg.layer_weights = {1.0, 1.0};
  cfg.local_size = 8;
  return cfg;
}

double eval_global(const PerceptualNet& net, const Tensor& a, const Tensor& b, int J) {
  ParamStore dummy;
  Exec ex(dummy, /*training=*/false);
  Var l = perceptual_global(ex, ex.g.constant(a), ex.g.constant(b), net, J);
  return l->val[0];
}

// Center-tap averaging kernels: a constant input c stays exactly c through
// every layer (center taps never touch padding at these strides), so the
// patch map of a constant image is that constant.
ParamStore passthrough_disc() {
  ParamStore ps;
  Rng rng(0);
  init_discriminator_params(ps, rng);
  auto center_avg = [](Tensor& w, double scale) {
    std::fill(w.data.begin(), w.data.end(), 0.0);
    int cout = w.dim(0), cin = w.dim(1), k = w.dim(2);
    for (int o = 0; o < cout; ++o)
      for (int i = 0; i < cin; ++i)
        w.data[((static_cast<size_t>(o) * cin + i) * k + 1) * k + 1] = scale;
  };
  center_avg(ps.get("disc.c0.w"), 1.0 / 3.0);
  center_avg(ps.get("disc.c1.w"), 1.0 / 16.0);
  center_avg(ps.get("disc.head.w"), 1.0 / 32.0);
  return ps;
}

}  // namespace

// ---- perceptual global ----------------------------------------------------

TEST_CASE("perceptual global is zero at identity and symmetric") {
  PerceptualNet net = PerceptualNet::make_random(small_net_cfg());
  Tensor a = random_image(16, 16, 7);
  Tensor b = random_image(16, 16, 8);

  REQUIRE(eval_global(net, a, a, 1) == 0.0);
  REQUIRE(eval_global(net, a, a, 3) == 0.0);

  double ab = eval_global(net, a, b, 2);
  REQUIRE(ab > 0.0);
  REQUIRE(eval_global(net, b, a, 2) == ab);
}

TEST_CASE("perceptual global is linear in the layer weights") {
  PerceptualConfig cfg = small_net_cfg();
  PerceptualNet net = PerceptualNet::make_random(cfg);
  PerceptualNet doubled = net;
  for (auto& c : doubled.cfg.layer_weights) c *= 2.0;

  Tensor a = random_image(16, 16, 3);
  Tensor b = random_image(16, 16, 4);
  double base = eval_global(net, a, b, 2);
  REQUIRE(eval_global(doubled, a, b, 2) == Catch::Approx(2.0 * base).epsilon(1e-12));
}

TEST_CASE("pyramid levels add up across J") {
  PerceptualNet net = PerceptualNet::make_random(small_net_cfg());
  Tensor a = random_image(16, 16, 11);
  Tensor b = random_image(16, 16, 12);

  double j1 = eval_global(net, a, b, 1);
  double j2 = eval_global(net, a, b, 2);

  // the j=1 term alone: evaluate J=1 on the half-resolution pair
  ParamStore dummy;
  Exec ex(dummy, false);
  Var a2 = avg_pool2(ex.g, ex.g.constant(a));
  Var b2 = avg_pool2(ex.g, ex.g.constant(b));
  Var extra = perceptual_global(ex, a2, b2, net, 1);

  REQUIRE(j2 == Catch::Approx(j1 + extra->val[0]).epsilon(1e-12));
}

TEST_CASE("perceptual global rejects images too small for the pyramid") {
  PerceptualNet net = PerceptualNet::make_random(small_net_cfg());
  Tensor a = random_image(16, 16, 1);
  REQUIRE_THROWS_AS(eval_global(net, a, a, 0), Error);
  REQUIRE_THROWS_AS(eval_global(net, a, a, 5), Error);  // 16 >> 4 == 1
  Tensor odd = random_image(15, 15, 2);
  REQUIRE_THROWS_AS(eval_global(net, odd, odd, 2), Error);  // not divisible
}

TEST_CASE("perceptual global gradient matches finite differences") {
  PerceptualNet net = PerceptualNet::make_random(small_net_cfg());
  Tensor target = random_image(8, 8, 21);
  Tensor pred = random_image(8, 8, 22, 0.1, 0.9);

  ParamStore dummy;
  Exec ex(dummy, true);
  Var p = ex.g.leaf(pred);
  Var l = perceptual_global(ex, ex.g.constant(target), p, net, 2);
  ex.g.backward(l);

  auto f = [&](const Tensor& x) {
    ParamStore d2;
    Exec e2(d2, false);
    return perceptual_global(e2, e2.g.constant(target), e2.g.constant(x), net, 2)->val[0];
  };
  FdReport rep = fd_compare(f, pred, p->grad);
  CAPTURE(rep.max_rel, rep.worst_index);
  REQUIRE(rep.max_rel < 1e-4);
}

// ---- crops and local losses -------------------------------------------------

TEST_CASE("crop_resize passes a crop through untouched when sizes match") {
  Tensor img = random_image(20, 20, 31);
  Graph g;
  Box box{4, 6, 12, 14};  // 8x8
  Var c = crop_resize(g, g.constant(img), box, 8);
  for (int ch = 0; ch < 3; ++ch)
    for (int y = 0; y < 8; ++y)
      for (int x = 0; x < 8; ++x)
        REQUIRE(c->val.at3(ch, y, x) == img.at3(ch, box.y0 + y, box.x0 + x));
}

TEST_CASE("crop_resize keeps corner pixels under align-corners resizing") {
  Tensor img = random_image(20, 20, 32);
  Graph g;
  Box box{2, 3, 13, 10};  // 11x7 -> resized to 8x8
  Var c = crop_resize(g, g.constant(img), box, 8);
  REQUIRE(c->val.dim(1) == 8);
  REQUIRE(c->val.at3(0, 0, 0) == Catch::Approx(img.at3(0, box.y0, box.x0)).margin(1e-12));
  REQUIRE(c->val.at3(2, 7, 7) ==
          Catch::Approx(img.at3(2, box.y1 - 1, box.x1 - 1)).margin(1e-12));
}

TEST_CASE("crop_resize validates boxes") {
  Tensor img = random_image(16, 16, 1);
  Graph g;
  Var v = g.constant(img);
  REQUIRE_THROWS_AS(crop_resize(g, v, Box{4, 4, 4, 9}, 8), Error);    // zero width
  REQUIRE_THROWS_AS(crop_resize(g, v, Box{10, 10, 20, 20}, 8), Error);  // out of bounds
  REQUIRE_THROWS_AS(crop_resize(g, v, Box{-1, 0, 4, 4}, 8), Error);
}

TEST_CASE("local losses vanish for identical crops") {
  PerceptualNet net = PerceptualNet::make_random(small_net_cfg());
  Tensor target = random_image(32, 32, 41);
  std::vector<Box> hands = {{2, 3, 10, 12}, {20, 18, 29, 30}};
  Box face{12, 2, 22, 11};

  SECTION("identical images") {
    ParamStore dummy;
    Exec ex(dummy, false);
    Var t = ex.g.constant(target);
    auto ll = perceptual_local(ex, t, t, hands, face, net);
    REQUIRE(ll.hand->val[0] == 0.0);
    REQUIRE(ll.face->val[0] == 0.0);
  }

  SECTION("differences only outside every box") {
    Tensor pred = target;
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < 32; ++y)
        for (int x = 0; x < 32; ++x) {
          bool inside = face.contains(x, y);
          for (const Box& b : hands) inside = inside || b.contains(x, y);
          if (!inside) pred.at3(c, y, x) += 0.3;
        }
    ParamStore dummy;
    Exec ex(dummy, false);
    auto ll = perceptual_local(ex, ex.g.constant(target), ex.g.constant(pred), hands, face, net);
    REQUIRE(ll.hand->val[0] == 0.0);
    REQUIRE(ll.face->val[0] == 0.0);
  }
}

TEST_CASE("swapping hand and face boxes swaps the local components") {
  PerceptualNet net = PerceptualNet::make_random(small_net_cfg());
  Tensor target = random_image(32, 32, 43);
  Tensor pred = random_image(32, 32, 44);
  Box hand{2, 3, 11, 12};
  Box face{18, 16, 30, 29};

  ParamStore dummy;
  Exec ex(dummy, false);
  Var t = ex.g.constant(target), p = ex.g.constant(pred);
  auto ab = perceptual_local(ex, t, p, {hand}, face, net);
  auto ba = perceptual_local(ex, t, p, {face}, hand, net);
  REQUIRE(ab.hand->val[0] == ba.face->val[0]);
  REQUIRE(ab.face->val[0] == ba.hand->val[0]);
  REQUIRE(ab.hand->val[0] != ab.face->val[0]);  // asymmetric pair
}

TEST_CASE("local hand loss sums over all hand boxes") {
  PerceptualNet net = PerceptualNet::make_random(small_net_cfg());
  Tensor target = random_image(32, 32, 45);
  Tensor pred = random_image(32, 32, 46);
  Box b1{1, 1, 9, 9}, b2{20, 20, 31, 30}, face{10, 12, 19, 20};

  ParamStore dummy;
  Exec ex(dummy, false);
  Var t = ex.g.constant(target), p = ex.g.constant(pred);
  double both = perceptual_local(ex, t, p, {b1, b2}, face, net).hand->val[0];
  double first = perceptual_local(ex, t, p, {b1}, face, net).hand->val[0];
  double second = perceptual_local(ex, t, p, {b2}, face, net).hand->val[0];
  REQUIRE(both == Catch::Approx(first + second).epsilon(1e-12));

  // no hand boxes at all: defined as zero
  REQUIRE(perceptual_local(ex, t, p, {}, face, net).hand->val[0] == 0.0);
}

TEST_CASE("local loss gradient flows through crop and resize") {
  PerceptualConfig cfg = small_net_cfg();
  cfg.local_size = 6;
  PerceptualNet net = PerceptualNet::make_random(cfg);
  Tensor target = random_image(12, 12, 51);
  Tensor pred = random_image(12, 12, 52, 0.15, 0.85);
  std::vector<Box> hands = {{1, 2, 6, 8}};
  Box face{7, 6, 11, 11};

  ParamStore dummy;
  Exec ex(dummy, true);
  Var p = ex.g.leaf(pred);
  auto ll = perceptual_local(ex, ex.g.constant(target), p, hands, face, net);
  Var total = add(ex.g, ll.hand, ll.face);
  ex.g.backward(total);

  auto f = [&](const Tensor& x) {
    ParamStore d2;
    Exec e2(d2, false);
    auto l2 = perceptual_local(e2, e2.g.constant(target), e2.g.constant(x), hands, face, net);
    return l2.hand->val[0] + l2.face->val[0];
  };
  FdReport rep = fd_compare(f, pred, p->grad);
  CAPTURE(rep.max_rel, rep.worst_index);
  REQUIRE(rep.max_rel < 1e-4);
}

// ---- adversarial ------------------------------------------------------------

TEST_CASE("discriminator emits a patch map") {
  ParamStore ps;
  Rng rng(5);
  init_discriminator_params(ps, rng);
  Exec ex(ps, false);
  Var d = discriminate(ex, ex.g.constant(random_image(16, 16, 1)));
  REQUIRE(d->val.shape == std::vector<int>{1, 4, 4});

  Exec ex2(ps, false);
  REQUIRE_THROWS_AS(discriminate(ex2, ex2.g.constant(random_image(4, 4, 2))), Error);
}

TEST_CASE("least-squares losses at hand-picked discriminator outputs") {
  Tensor real = Tensor::full({3, 16, 16}, 1.0);
  Tensor fake = Tensor::zeros({3, 16, 16});

  SECTION("D == 0 everywhere") {
    ParamStore ps;
    Rng rng(5);
    init_discriminator_params(ps, rng);
    for (auto& [name, t] : ps.t) std::fill(t.data.begin(), t.data.end(), 0.0);
    Exec ex(ps, false);
    auto adv = adversarial_losses(ex, ex.g.constant(real), ex.g.constant(fake));
    REQUIRE(adv.l_discr->val[0] == 1.0);  // (0-1)^2 + 0^2
    REQUIRE(adv.l_gan->val[0] == 1.0);
  }

  SECTION("D(real) == 1, D(fake) == 0") {
    ParamStore ps = passthrough_disc();
    Exec ex(ps, false);
    auto adv = adversarial_losses(ex, ex.g.constant(real), ex.g.constant(fake));
    REQUIRE(adv.l_discr->val[0] == 0.0);
    REQUIRE(adv.l_gan->val[0] == 1.0);
  }
}

TEST_CASE("hinge losses at hand-picked discriminator outputs") {
  Tensor real = Tensor::full({3, 16, 16}, 1.0);
  Tensor fake = Tensor::zeros({3, 16, 16});
  ParamStore ps = passthrough_disc();
  Exec ex(ps, false);
  auto adv = adversarial_losses(ex, ex.g.constant(real), ex.g.constant(fake), GanKind::Hinge);
  REQUIRE(adv.l_discr->val[0] == 1.0);  // relu(1-1) + relu(1+0)
  REQUIRE(adv.l_gan->val[0] == 0.0);    // -mean(0)
}

TEST_CASE("discriminator loss sends no gradient to the generator side") {
  ParamStore ps;
  Rng rng(9);
  init_discriminator_params(ps, rng);
  Tensor real = random_image(16, 16, 61);
  Tensor fake_px = random_image(16, 16, 62);

  SECTION("l_discr: fake is detached") {
    Exec ex(ps, true);
    Var fake = ex.g.leaf(fake_px);
    auto adv = adversarial_losses(ex, ex.g.constant(real), fake);
    ex.g.backward(adv.l_discr);
    REQUIRE_FALSE(fake->has_grad());
    const Tensor* gw = ex.grad_of("disc.c0.w");
    REQUIRE(gw != nullptr);
    double mag = 0.0;
    for (double v : gw->data) mag += std::fabs(v);
    REQUIRE(mag > 0.0);
  }

  SECTION("l_gan: fake does receive gradient") {
    Exec ex(ps, true);
    Var fake = ex.g.leaf(fake_px);
    auto adv = adversarial_losses(ex, ex.g.constant(real), fake);
    ex.g.backward(adv.l_gan);
    REQUIRE(fake->has_grad());
    double mag = 0.0;
    for (double v : fake->grad.data) mag += std::fabs(v);
    REQUIRE(mag > 0.0);
  }
}

TEST_CASE("generator objective gradient matches finite differences") {
  ParamStore ps;
  Rng rng(13);
  init_discriminator_params(ps, rng);
  Tensor real = random_image(8, 8, 71);
  Tensor fake_px = random_image(8, 8, 72);

  Exec ex(ps, true);
  Var fake = ex.g.leaf(fake_px);
  auto adv = adversarial_losses(ex, ex.g.constant(real), fake);
  ex.g.backward(adv.l_gan);

  auto f = [&](const Tensor& x) {
    Exec e2(ps, false);
    return adversarial_losses(e2, e2.g.constant(real), e2.g.constant(x)).l_gan->val[0];
  };
  FdReport rep = fd_compare(f, fake_px, fake->grad);
  CAPTURE(rep.max_rel, rep.worst_index);
  REQUIRE(rep.max_rel < 1e-4);
}

TEST_CASE("discriminator objective gradient w.r.t. its weights matches finite differences") {
  ParamStore ps;
  Rng rng(17);
  init_discriminator_params(ps, rng);
  Tensor real = random_image(8, 8, 73);
  Tensor fake_px = random_image(8, 8, 74);

  Exec ex(ps, true);
  auto adv = adversarial_losses(ex, ex.g.constant(real), ex.g.constant(fake_px));
  ex.g.backward(adv.l_discr);
  const Tensor* analytic = ex.grad_of("disc.head.w");
  REQUIRE(analytic != nullptr);

  Tensor w0 = ps.get("disc.head.w");
  auto f = [&](const Tensor& w) {
    ParamStore ps2 = ps;
    ps2.get("disc.head.w") = w;
    Exec e2(ps2, false);
    return adversarial_losses(e2, e2.g.constant(real), e2.g.constant(fake_px)).l_discr->val[0];
  };
  FdReport rep = fd_compare(f, w0, *analytic);
  CAPTURE(rep.max_rel, rep.worst_index);
  REQUIRE(rep.max_rel < 1e-4);
}

// ---- total ------------------------------------------------------------------

TEST_CASE("stage1 total arithmetic") {
  Graph g;
  auto c = [&](double v) { return g.constant(Tensor::scalar(v)); };
  Stage1Parts parts{c(2.0), c(3.0), c(0.5), c(0.7), c(1.1)};

  SECTION("documented example") {
    LossWeights w;  // 1, 1, 1, 0.1, 0.1
    auto t = stage1_total(g, parts, w);
    REQUIRE(t.per->val[0] == Catch::Approx(5.5).epsilon(1e-12));
    REQUIRE(t.generator->val[0] == Catch::Approx(5.57).epsilon(1e-12));
    REQUIRE(t.discr->val[0] == Catch::Approx(0.11).epsilon(1e-12));
    REQUIRE(t.reported->val[0] == Catch::Approx(5.68).epsilon(1e-12));
  }

  SECTION("all weights zero") {
    LossWeights w;
    w.per_glo = w.per_loc = w.per = w.gan = w.discr = 0.0;
    auto t = stage1_total(g, parts, w);
    REQUIRE(t.reported->val[0] == 0.0);
  }

  SECTION("negative weights rejected") {
    LossWeights w;
    w.gan = -0.5;
    REQUIRE_THROWS_AS(stage1_total(g, parts, w), Error);
  }
}

TEST_CASE("stage1 total is zero for identical images with perceptual weights only") {
  PerceptualNet net = PerceptualNet::make_random(small_net_cfg());
  Tensor img = random_image(16, 16, 81);
  ParamStore dummy;
  Exec ex(dummy, false);
  Var t = ex.g.constant(img);

  std::vector<Box> hands = {{2, 2, 9, 9}};
  Box face{8, 8, 15, 15};
  auto ll = perceptual_local(ex, t, t, hands, face, net);
  Stage1Parts parts{perceptual_global(ex, t, t, net, 2), ll.hand, ll.face,
                    ex.g.constant(Tensor::scalar(0.3)), ex.g.constant(Tensor::scalar(0.4))};
  LossWeights w;
  w.gan = w.discr = 0.0;
  auto total = stage1_total(ex.g, parts, w);
  REQUIRE(total.reported->val[0] == 0.0);
}

// ---- provenance -------------------------------------------------------------

TEST_CASE("perceptual net records provenance and loads external weights") {
  PerceptualConfig cfg = small_net_cfg();
  PerceptualNet net = PerceptualNet::make_random(cfg);
  REQUIRE(net.provenance == "random-frozen");

  auto path = std::filesystem::temp_directory_path() / "devgest_losses_perc.bin";
  TensorFile tf;
  tf.meta["widths"] = cfg.widths;
  tf.meta["strides"] = cfg.strides;
  for (auto& [name, t] : net.weights.t) tf.tensors.emplace_back(name, t);
  write_tensor_file(path, tf);

  PerceptualNet loaded = PerceptualNet::load_external(path);
  REQUIRE(loaded.provenance == "pretrained-external");
  REQUIRE(loaded.cfg.widths == cfg.widths);

  Tensor a = random_image(16, 16, 91);
  Tensor b = random_image(16, 16, 92);
  // container stores float32, so the roundtrip is only float-exact
  REQUIRE(eval_global(loaded, a, b, 2) ==
          Catch::Approx(eval_global(net, a, b, 2)).epsilon(1e-6));
  std::filesystem::remove(path);
}

TEST_CASE("perceptual taps never accumulate weight gradients") {
  PerceptualNet net = PerceptualNet::make_random(small_net_cfg());
  Tensor a = random_image(8, 8, 93);
  Tensor b = random_image(8, 8, 94);
  ParamStore dummy;
  Exec ex(dummy, true);
  Var p = ex.g.leaf(b);
  Var l = perceptual_global(ex, ex.g.constant(a), p, net, 1);
  ex.g.backward(l);
  REQUIRE(p->has_grad());
  // frozen bindings are constants; nothing to check beyond the weights
  // themselves staying bit-identical
  PerceptualNet fresh = PerceptualNet::make_random(small_net_cfg());
  for (auto& [name, t] : net.weights.t) {
    const Tensor& f = fresh.weights.get(name);
    REQUIRE(t.data == f.data);
  }
}
