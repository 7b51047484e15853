#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "devgest/model/diffusion.hpp"
#include "support/gradcheck.hpp"

using namespace devgest;
using namespace devgest::testing;

namespace {

DiffusionConfig tiny_cfg() {
  DiffusionConfig cfg;
  cfg.K = 8;
  cfg.M = 4;
  cfg.audio_dim = 3;
  cfg.width = 16;
  cfg.blocks = 1;
  cfg.heads = 2;
  cfg.t_steps = 10;
  return cfg;
}

Tensor randn(std::vector<int> shape, uint64_t seed) {
  Tensor t(std::move(shape));
  Rng rng(seed);
  for (auto& v : t.data) v = rng.normal();
  return t;
}

Condition random_condition(const DiffusionConfig& cfg, uint64_t seed) {
  Condition c;
  c.audio = randn({cfg.M, cfg.audio_dim}, seed);
  c.prev4 = randn({4, cfg.K}, seed + 1);
  c.source_mf = randn({1, cfg.K}, seed + 2);
  return c;
}

ParamStore tiny_params(const DiffusionConfig& cfg, uint64_t seed) {
  ParamStore ps;
  Rng rng(seed);
  init_denoiser_params(ps, cfg, rng);
  return ps;
}

}  // namespace

// ---- schedule ---------------------------------------------------------------

TEST_CASE("noise schedule is strictly decreasing and bounded") {
  for (ScheduleKind kind : {ScheduleKind::Cosine, ScheduleKind::Linear}) {
    DiffusionSchedule s = make_schedule(200, kind);
    REQUIRE(s.alpha_bar.size() == 200);
    double prev = 1.0;
    for (double a : s.alpha_bar) {
      REQUIRE(a > 0.0);
      REQUIRE(a < prev);
      prev = a;
    }
  }
  REQUIRE_THROWS_AS(make_schedule(1), Error);
  REQUIRE_NOTHROW(make_schedule(2));
}

TEST_CASE("cosine schedule matches its formula") {
  DiffusionSchedule s = make_schedule(1000);
  REQUIRE(s.alpha_bar[0] > 0.999);
  REQUIRE(s.alpha_bar.back() < 0.01);

  // recompute a mid-table entry independently
  DiffusionSchedule s50 = make_schedule(50);
  const double off = 0.008;
  auto f = [&](double t) {
    double c = std::cos((t / 50.0 + off) / (1.0 + off) * M_PI / 2.0);
    return c * c;
  };
  REQUIRE(s50.alpha_bar[6] == Catch::Approx(f(7.0) / f(0.0)).epsilon(1e-12));
}

// ---- q_sample -----------------------------------------------------------------

TEST_CASE("q_sample endpoints and formula") {
  DiffusionSchedule s;
  s.t_steps = 3;
  s.alpha_bar = {1.0, 0.25, 0.0};
  Tensor x0 = randn({4, 6}, 1);
  Tensor eps = randn({4, 6}, 2);

  Tensor a = q_sample(x0, 1, eps, s);
  REQUIRE(a.data == x0.data);  // abar = 1

  Tensor c = q_sample(x0, 3, eps, s);
  REQUIRE(c.data == eps.data);  // abar = 0

  Tensor b = q_sample(x0, 2, eps, s);
  for (int64_t i = 0; i < b.numel(); ++i)
    REQUIRE(b[i] == Catch::Approx(0.5 * x0[i] + std::sqrt(0.75) * eps[i]).margin(1e-15));

  REQUIRE_THROWS_AS(q_sample(x0, 0, eps, s), Error);
  REQUIRE_THROWS_AS(q_sample(x0, 4, eps, s), Error);
  REQUIRE_THROWS_AS(q_sample(x0, 2, randn({4, 5}, 3), s), Error);
}

TEST_CASE("q_sample noise variance matches the schedule") {
  DiffusionSchedule s;
  s.t_steps = 1;
  s.alpha_bar = {0.36};
  Tensor x0 = Tensor::zeros({2, 8});
  Rng rng(77);

  double sum = 0.0, sq = 0.0;
  int64_t n = 0;
  for (int draw = 0; draw < 10000; ++draw) {
    Tensor eps({2, 8});
    for (auto& v : eps.data) v = rng.normal();
    Tensor xt = q_sample(x0, 1, eps, s);
    for (int64_t i = 0; i < xt.numel(); ++i) {
      sum += xt[i];
      sq += xt[i] * xt[i];
      ++n;
    }
  }
  double var = sq / n - (sum / n) * (sum / n);
  REQUIRE(var == Catch::Approx(0.64).epsilon(0.05));
}

// ---- denoiser -------------------------------------------------------------------

TEST_CASE("predict_clean shape, determinism, and input validation") {
  DiffusionConfig cfg = tiny_cfg();
  ParamStore ps = tiny_params(cfg, 5);
  Condition cond = random_condition(cfg, 10);
  Tensor xt = randn({cfg.M, cfg.K}, 20);

  Exec ex1(ps, false);
  Var y1 = predict_clean(ex1, cfg, ex1.g.constant(xt), 3, cond);
  REQUIRE(y1->val.shape == std::vector<int>{cfg.M, cfg.K});

  Exec ex2(ps, false);
  Var y2 = predict_clean(ex2, cfg, ex2.g.constant(xt), 3, cond);
  REQUIRE(y1->val.data == y2->val.data);

  // a different time step and different audio must both reach the output
  Exec ex3(ps, false);
  Var y3 = predict_clean(ex3, cfg, ex3.g.constant(xt), 7, cond);
  REQUIRE(y1->val.data != y3->val.data);

  Condition loud = cond;
  for (auto& v : loud.audio.data) v += 1.0;
  Exec ex4(ps, false);
  Var y4 = predict_clean(ex4, cfg, ex4.g.constant(xt), 3, loud);
  REQUIRE(y1->val.data != y4->val.data);

  Exec bad(ps, false);
  Condition c2 = cond;
  c2.prev4 = randn({3, cfg.K}, 1);
  REQUIRE_THROWS_AS(predict_clean(bad, cfg, bad.g.constant(xt), 3, c2), Error);
  c2 = cond;
  c2.audio = randn({cfg.M + 1, cfg.audio_dim}, 1);
  REQUIRE_THROWS_AS(predict_clean(bad, cfg, bad.g.constant(xt), 3, c2), Error);
  c2 = cond;
  c2.source_mf = randn({2, cfg.K}, 1);
  REQUIRE_THROWS_AS(predict_clean(bad, cfg, bad.g.constant(xt), 3, c2), Error);
  REQUIRE_THROWS_AS(predict_clean(bad, cfg, bad.g.constant(randn({cfg.M, cfg.K + 1}, 1)), 3, cond),
                    Error);
}

TEST_CASE("denoiser training gradient matches finite differences") {
  DiffusionConfig cfg = tiny_cfg();
  ParamStore ps = tiny_params(cfg, 8);
  Condition cond = random_condition(cfg, 30);
  Tensor xt = randn({cfg.M, cfg.K}, 40);
  Tensor x0 = randn({cfg.M, cfg.K}, 41);

  auto loss_value = [&](ParamStore& p, const Tensor& xt_in) {
    Exec ex(p, false);
    Var xhat = predict_clean(ex, cfg, ex.g.constant(xt_in), 4, cond);
    return diffusion_loss(ex.g, xhat, ex.g.constant(x0)).total->val[0];
  };

  Exec ex(ps, true);
  Var xt_leaf = ex.g.leaf(xt);
  Var xhat = predict_clean(ex, cfg, xt_leaf, 4, cond);
  auto parts = diffusion_loss(ex.g, xhat, ex.g.constant(x0));
  ex.g.backward(parts.total);

  SECTION("w.r.t. the noisy input") {
    auto f = [&](const Tensor& x) { return loss_value(ps, x); };
    FdReport rep = fd_compare(f, xt, xt_leaf->grad);
    CAPTURE(rep.max_rel, rep.worst_index);
    REQUIRE(rep.max_rel < 1e-3);
  }

  for (const char* pname : {"dn.out.w", "dn.in.w", "dn.b0.q.w", "dn.b0.m1.b", "dn.lnf.g"}) {
    DYNAMIC_SECTION("w.r.t. " << pname) {
      const Tensor* analytic = ex.grad_of(pname);
      REQUIRE(analytic != nullptr);
      Tensor w0 = ps.get(pname);
      auto f = [&](const Tensor& w) {
        ParamStore p2 = ps;
        p2.get(pname) = w;
        return loss_value(p2, xt);
      };
      FdReport rep = fd_compare(f, w0, *analytic);
      CAPTURE(rep.max_rel, rep.worst_index);
      REQUIRE(rep.max_rel < 1e-3);
    }
  }
}

// ---- loss ----------------------------------------------------------------------

TEST_CASE("diffusion loss closed forms") {
  Graph g;

  SECTION("identical sequences") {
    Tensor x = randn({5, 3}, 1);
    auto p = diffusion_loss(g, g.constant(x), g.constant(x));
    REQUIRE(p.mf->val[0] == 0.0);
    REQUIRE(p.vel->val[0] == 0.0);
    REQUIRE(p.acc->val[0] == 0.0);
    REQUIRE(p.total->val[0] == 0.0);
  }

  SECTION("constant offset leaves differences untouched") {
    Tensor x = randn({6, 4}, 2);
    Tensor y = x;
    for (auto& v : y.data) v += 0.7;
    auto p = diffusion_loss(g, g.constant(y), g.constant(x));
    REQUIRE(p.mf->val[0] == Catch::Approx(0.49).epsilon(1e-12));
    REQUIRE(p.vel->val[0] == Catch::Approx(0.0).margin(1e-25));
    REQUIRE(p.acc->val[0] == Catch::Approx(0.0).margin(1e-25));
  }

  SECTION("hand-built three-frame example") {
    Tensor x0({3, 1}, {0.0, 1.0, 2.0});
    Tensor xh({3, 1}, {0.0, 2.0, 4.0});
    auto p = diffusion_loss(g, g.constant(xh), g.constant(x0));
    REQUIRE(p.mf->val[0] == Catch::Approx(5.0 / 3.0).epsilon(1e-9));
    REQUIRE(p.vel->val[0] == Catch::Approx(1.0).epsilon(1e-9));
    REQUIRE(p.acc->val[0] == 0.0);
  }

  SECTION("lambda weighting") {
    Tensor a = randn({4, 2}, 3), b = randn({4, 2}, 4);
    auto p = diffusion_loss(g, g.constant(a), g.constant(b), 2.0, 3.0);
    REQUIRE(p.total->val[0] ==
            Catch::Approx(p.mf->val[0] + 2.0 * p.vel->val[0] + 3.0 * p.acc->val[0])
                .epsilon(1e-12));
  }

  SECTION("too short for acceleration") {
    Tensor x = randn({2, 3}, 5);
    REQUIRE_THROWS_AS(diffusion_loss(g, g.constant(x), g.constant(x)), Error);
  }
}

// ---- sampling -------------------------------------------------------------------

TEST_CASE("sampling is seed-deterministic and well-shaped") {
  DiffusionConfig cfg = tiny_cfg();
  ParamStore ps = tiny_params(cfg, 11);
  Condition cond = random_condition(cfg, 50);
  DiffusionSchedule sched = make_schedule(cfg.t_steps);

  Tensor a = sample(ps, cfg, cond, sched, 5, 123);
  Tensor b = sample(ps, cfg, cond, sched, 5, 123);
  Tensor c = sample(ps, cfg, cond, sched, 5, 124);
  REQUIRE(a.shape == std::vector<int>{cfg.M, cfg.K});
  REQUIRE(a.data == b.data);
  REQUIRE(a.data != c.data);
  for (double v : a.data) REQUIRE(std::isfinite(v));

  REQUIRE_THROWS_AS(sample(ps, cfg, cond, sched, 0, 1), Error);
  REQUIRE_THROWS_AS(sample(ps, cfg, cond, sched, cfg.t_steps + 1, 1), Error);
}

TEST_CASE("rollout windows chain through emitted frames") {
  DiffusionConfig cfg = tiny_cfg();
  ParamStore ps = tiny_params(cfg, 13);
  DiffusionSchedule sched = make_schedule(cfg.t_steps);
  Tensor source = randn({1, cfg.K}, 60);
  const int M = cfg.M;

  Tensor audio1 = randn({M, cfg.audio_dim}, 61);
  Tensor audio2({2 * M, cfg.audio_dim});
  std::copy(audio1.data.begin(), audio1.data.end(), audio2.data.begin());
  {
    Tensor tail = randn({M, cfg.audio_dim}, 62);
    std::copy(tail.data.begin(), tail.data.end(), audio2.data.begin() + audio1.numel());
  }

  Tensor one = rollout(ps, cfg, audio1, source, sched, 5, 99);
  REQUIRE(one.shape == std::vector<int>{M, cfg.K});

  Tensor two = rollout(ps, cfg, audio2, source, sched, 5, 99);
  REQUIRE(two.shape == std::vector<int>{2 * M, cfg.K});

  // autoregression is causal: a longer track reuses the first window verbatim
  for (int64_t i = 0; i < one.numel(); ++i) REQUIRE(two[i] == one[i]);
  // and the second window is genuinely new
  bool differs = false;
  for (int64_t i = 0; i < one.numel(); ++i)
    differs = differs || two[one.numel() + i] != one[i];
  REQUIRE(differs);

  SECTION("determinism and seed sensitivity") {
    Tensor again = rollout(ps, cfg, audio2, source, sched, 5, 99);
    REQUIRE(again.data == two.data);
    Tensor other = rollout(ps, cfg, audio2, source, sched, 5, 100);
    REQUIRE(other.data != two.data);
  }

  SECTION("ragged tail is trimmed, not duplicated") {
    Tensor audio3({M + 3, cfg.audio_dim});
    for (int64_t i = 0; i < audio3.numel(); ++i) audio3[i] = audio2[i];
    Tensor out = rollout(ps, cfg, audio3, source, sched, 5, 99);
    REQUIRE(out.shape == std::vector<int>{M + 3, cfg.K});
    for (int64_t i = 0; i < one.numel(); ++i) REQUIRE(out[i] == one[i]);
  }

  SECTION("input validation") {
    REQUIRE_THROWS_AS(rollout(ps, cfg, randn({M - 1, cfg.audio_dim}, 1), source, sched, 5, 1),
                      Error);
    REQUIRE_THROWS_AS(rollout(ps, cfg, randn({M, cfg.audio_dim + 2}, 1), source, sched, 5, 1),
                      Error);
    REQUIRE_THROWS_AS(rollout(ps, cfg, audio1, randn({2, cfg.K}, 1), sched, 5, 1), Error);
  }
}
