#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "densessm/ssm_kernels.hpp"
#include "test_support.hpp"

namespace densessm {
namespace {

using test::param;
using test::randn;
using test::weighted_sum;

Tensor<double> uniform(Shape shape, double lo, double hi, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return random_uniform<double>(std::move(shape), lo, hi, rng);
}

// Direct double sum over the decayed score matrix, no library code involved.
Tensor<double> naive_retention(const Tensor<double>& q, const Tensor<double>& k, const Tensor<double>& v,
                               double gamma) {
  const std::size_t len = q.dim(0), dk = q.dim(1), dv = v.dim(1);
  Tensor<double> y(Shape{len, dv});
  for (std::size_t t = 0; t < len; ++t) {
    for (std::size_t i = 0; i <= t; ++i) {
      double score = 0;
      for (std::size_t c = 0; c < dk; ++c) score += q[t * dk + c] * k[i * dk + c];
      score *= std::pow(gamma, static_cast<double>(t - i));
      for (std::size_t j = 0; j < dv; ++j) y[t * dv + j] += score * v[i * dv + j];
    }
  }
  return y;
}

TEST(Retention, DecayScheduleValues) {
  const auto g = decay_schedule(3);
  ASSERT_EQ(g.size(), 3u);
  EXPECT_DOUBLE_EQ(g[0], 1.0 - 1.0 / 32.0);
  EXPECT_DOUBLE_EQ(g[1], 1.0 - 1.0 / 64.0);
  EXPECT_DOUBLE_EQ(g[2], 1.0 - 1.0 / 128.0);
  EXPECT_THROW(decay_schedule(0), ArgumentError);
}

TEST(Retention, HeadRejectsDecayOutsideUnitInterval) {
  EXPECT_THROW(RetentionHead(1.0, 2, 2), DomainError);
  EXPECT_THROW(RetentionHead(0.0, 2, 2), DomainError);
  EXPECT_NO_THROW(RetentionHead(0.5, 2, 2));
}

TEST(Retention, RecurrentStepByHand) {
  RetentionHead head(0.5, 2, 1);
  const auto s0 = Tensor<double>::matrix({{2.0}, {4.0}});
  const auto r = retention_recurrent_step(s0, head, Tensor<double>::vector({1.0, 1.0}),
                                          Tensor<double>::vector({1.0, 0.0}), Tensor<double>::vector({3.0}));
  EXPECT_EQ(r.s, Tensor<double>::matrix({{4.0}, {2.0}}));
  EXPECT_DOUBLE_EQ(r.y[0], 6.0);
}

TEST(Retention, TwoStepExampleInBothModes) {
  RetentionHead head(0.5, 2, 1);
  const auto q = Tensor<double>::matrix({{1.0, 0.0}, {1.0, 1.0}});
  const auto k = Tensor<double>::matrix({{1.0, 0.0}, {0.0, 1.0}});
  const auto v = Tensor<double>::matrix({{2.0}, {4.0}});
  using V = Tensor<double>;
  const auto r0 = retention_recurrent_step(V(Shape{2, 1}), head, V::vector({1.0, 0.0}), V::vector({1.0, 0.0}),
                                           V::vector({2.0}));
  EXPECT_DOUBLE_EQ(r0.y[0], 2.0);
  const auto r1 = retention_recurrent_step(r0.s, head, V::vector({1.0, 1.0}), V::vector({0.0, 1.0}), V::vector({4.0}));
  EXPECT_DOUBLE_EQ(r1.y[0], 5.0);
  EXPECT_EQ(retention_parallel(q, k, v, head), Tensor<double>::matrix({{2.0}, {5.0}}));
}

TEST(Retention, ParallelMatchesNaiveOracle) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const std::size_t len = 1 + seed * 3, dk = 3, dv = 5;
    const double gamma = 0.5 + 0.04 * static_cast<double>(seed);
    const auto q = randn({len, dk}, seed), k = randn({len, dk}, seed + 100), v = randn({len, dv}, seed + 200);
    EXPECT_LT(max_abs_diff(retention_parallel(q, k, v, RetentionHead(gamma, dk, dv)), naive_retention(q, k, v, gamma)),
              1e-12);
  }
}

TEST(Retention, ParallelMatchesRecurrentRollout) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const std::size_t len = 16, dk = 4, dv = 6;
    RetentionHead head(decay_schedule(4)[seed % 4], dk, dv);
    const auto q = randn({len, dk}, seed), k = randn({len, dk}, seed + 1), v = randn({len, dv}, seed + 2);
    const auto par = retention_parallel(q, k, v, head);
    Tensor<double> s(Shape{dk, dv});
    double worst = 0;
    for (std::size_t t = 0; t < len; ++t) {
      auto row = [&](const Tensor<double>& m, std::size_t w) {
        return Tensor<double>(Shape{w}, std::vector<double>(m.ptr() + t * w, m.ptr() + (t + 1) * w));
      };
      const auto step = retention_recurrent_step(s, head, row(q, dk), row(k, dk), row(v, dv));
      s = step.s;
      for (std::size_t j = 0; j < dv; ++j) worst = std::max(worst, std::abs(step.y[j] - par[t * dv + j]));
    }
    EXPECT_LT(worst, 1e-10) << "seed " << seed;
  }
}

TEST(Retention, ShapeErrors) {
  RetentionHead head(0.9, 2, 3);
  EXPECT_THROW(retention_parallel(randn({4, 3}, 1), randn({4, 3}, 2), randn({4, 3}, 3), head), DimensionError);
  EXPECT_THROW(retention_recurrent_step(Tensor<double>(Shape{2, 2}), head, randn({2}, 1), randn({2}, 2), randn({3}, 3)),
               DimensionError);
}

TEST(Retention, BatchedOpMatchesPerHeadKernel) {
  const std::size_t nb = 2, len = 7, heads = 3, dk = 2, dv = 4;
  const auto gammas = decay_schedule(heads);
  const auto q = randn({nb, len, heads * dk}, 1), k = randn({nb, len, heads * dk}, 2),
             v = randn({nb, len, heads * dv}, 3);
  const auto y = retention_parallel_op(Var<double>(q), Var<double>(k), Var<double>(v), gammas).value();
  for (std::size_t b = 0; b < nb; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      Tensor<double> qh(Shape{len, dk}), kh(Shape{len, dk}), vh(Shape{len, dv});
      for (std::size_t t = 0; t < len; ++t) {
        for (std::size_t c = 0; c < dk; ++c) {
          qh[t * dk + c] = q[(b * len + t) * heads * dk + h * dk + c];
          kh[t * dk + c] = k[(b * len + t) * heads * dk + h * dk + c];
        }
        for (std::size_t c = 0; c < dv; ++c) vh[t * dv + c] = v[(b * len + t) * heads * dv + h * dv + c];
      }
      const auto ref = naive_retention(qh, kh, vh, gammas[h]);
      for (std::size_t t = 0; t < len; ++t) {
        for (std::size_t c = 0; c < dv; ++c) {
          EXPECT_NEAR(y[(b * len + t) * heads * dv + h * dv + c], ref[t * dv + c], 1e-12);
        }
      }
    }
  }
}

TEST(Retention, BatchedOpGradient) {
  const auto gammas = decay_schedule(2);
  Var<double> q = param({2, 5, 4}, 1), k = param({2, 5, 4}, 2), v = param({2, 5, 6}, 3);
  for (Var<double>* p : {&q, &k, &v}) {
    const auto r =
        finite_diff_check<double>([&] { return weighted_sum(retention_parallel_op(q, k, v, gammas)); }, *p, 1e-6);
    EXPECT_LT(r.max_rel_err, 1e-7);
  }
}

TEST(Retention, DecayMaskFaultIsDetectable) {
  const auto gammas = decay_schedule(1);
  const auto q = randn({1, 6, 2}, 1), k = randn({1, 6, 2}, 2), v = randn({1, 6, 3}, 3);
  const auto good = retention_parallel_op(Var<double>(q), Var<double>(k), Var<double>(v), gammas).value();
  testing::set_decay_mask_fault(true);
  const auto bad = retention_parallel_op(Var<double>(q), Var<double>(k), Var<double>(v), gammas).value();
  testing::set_decay_mask_fault(false);
  EXPECT_GT(max_abs_diff(good, bad), 1e-3);
}

DiscreteSSM<double> random_lti(std::size_t d, std::size_t s, std::uint64_t seed) {
  return DiscreteSSM<double>(uniform({d, s}, -0.95, 0.95, seed), randn({d, s}, seed + 1),
                             randn({d, s}, seed + 2));
}

TEST(LtiSsm, RejectsUnstableTransition) {
  EXPECT_THROW(DiscreteSSM<double>(Tensor<double>::matrix({{1.0}}), Tensor<double>::matrix({{1.0}}),
                                   Tensor<double>::matrix({{1.0}})),
               DomainError);
  EXPECT_THROW(DiscreteSSM<double>(Tensor<double>::matrix({{0.5}}), Tensor<double>::matrix({{1.0, 2.0}}),
                                   Tensor<double>::matrix({{1.0}})),
               DimensionError);
}

TEST(LtiSsm, KernelByHand) {
  // One channel, two modes: K_t = c0 a0^t b0 + c1 a1^t b1.
  DiscreteSSM<double> ssm(Tensor<double>::matrix({{0.5, -0.25}}), Tensor<double>::matrix({{2.0, 1.0}}),
                          Tensor<double>::matrix({{1.0, 4.0}}));
  const auto k = ssm_conv_kernel(ssm, 3);
  EXPECT_DOUBLE_EQ(k[0], 2.0 + 4.0);
  EXPECT_DOUBLE_EQ(k[1], 1.0 - 1.0);
  EXPECT_DOUBLE_EQ(k[2], 0.5 + 0.25);
}

TEST(LtiSsm, GeometricKernelAndLengthCheck) {
  DiscreteSSM<double> ssm(Tensor<double>::matrix({{0.5}}), Tensor<double>::matrix({{1.0}}),
                          Tensor<double>::matrix({{1.0}}));
  const auto k = ssm_conv_kernel(ssm, 3);
  EXPECT_EQ(k.data()[0], 1.0);
  EXPECT_EQ(k.data()[1], 0.5);
  EXPECT_EQ(k.data()[2], 0.25);
  EXPECT_THROW(ssm_conv_kernel(ssm, 0), ArgumentError);
}

TEST(LtiSsm, ConvolutionMatchesRecurrence) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const std::size_t d = 3, s = 5, len = 24;
    const auto ssm = random_lti(d, s, seed * 7);
    const auto x = randn({len, d}, seed * 7 + 3);
    const auto conv = ssm_conv_apply(x, ssm_conv_kernel(ssm, len));
    Tensor<double> h(Shape{d, s});
    double worst = 0;
    for (std::size_t t = 0; t < len; ++t) {
      Tensor<double> xt(Shape{d}, std::vector<double>(x.ptr() + t * d, x.ptr() + (t + 1) * d));
      h = ssm_recurrent_step(h, ssm, xt);
      const auto y = ssm_output(ssm, h);
      for (std::size_t c = 0; c < d; ++c) worst = std::max(worst, std::abs(y[c] - conv[t * d + c]));
    }
    EXPECT_LT(worst, 1e-10);
  }
}

TEST(Selective, DiscretizationFormula) {
  const auto delta = Tensor<double>::matrix({{0.1, 0.2}});
  const auto a = Tensor<double>::matrix({{-1.0, -2.0}, {-3.0, -4.0}});
  const auto b = Tensor<double>::matrix({{5.0, 6.0}});
  const auto disc = selective_discretize(delta, a, b);
  ASSERT_EQ(disc.a_bar.shape(), (Shape{1, 2, 2}));
  EXPECT_DOUBLE_EQ(disc.a_bar[3], std::exp(0.2 * -4.0));
  EXPECT_DOUBLE_EQ(disc.b_bar[2], 0.2 * 5.0);
  const auto single = selective_discretize(Tensor<double>::vector({0.1, 0.2}), a, Tensor<double>::vector({5.0, 6.0}));
  EXPECT_EQ(single.a_bar.shape(), (Shape{2, 2}));
  EXPECT_EQ(single.a_bar.data()[3], disc.a_bar[3]);
  EXPECT_THROW(selective_discretize(Tensor<double>::matrix({{0.0, 0.2}}), a, b), DomainError);
  EXPECT_THROW(selective_discretize(delta, Tensor<double>::matrix({{-1.0, 0.0}, {-3.0, -4.0}}), b), DomainError);
}

TEST(Selective, ConstantParametersReduceToLti) {
  // With delta, B and C constant over time the selective scan is an LTI system.
  const std::size_t len = 12, d = 2, s = 3;
  Tensor<double> delta = Tensor<double>::full({len, d}, 0.3);
  const Tensor<double> a = uniform({d, s}, -2.0, -0.1, 5);
  const Tensor<double> b1 = randn({s}, 6), c1 = randn({s}, 7);
  Tensor<double> b(Shape{len, s}), c(Shape{len, s});
  for (std::size_t t = 0; t < len; ++t) {
    for (std::size_t n = 0; n < s; ++n) {
      b[t * s + n] = b1[n];
      c[t * s + n] = c1[n];
    }
  }
  const auto x = randn({len, d}, 8);
  const auto scan = selective_scan(x, SelectiveParams<double>{delta, a, b, c}, Tensor<double>(Shape{d}));

  Tensor<double> abar(Shape{d, s}), bbar(Shape{d, s}), cc(Shape{d, s});
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t n = 0; n < s; ++n) {
      abar[i * s + n] = std::exp(0.3 * a[i * s + n]);
      bbar[i * s + n] = 0.3 * b1[n];
      cc[i * s + n] = c1[n];
    }
  }
  const auto conv = ssm_conv_apply(x, ssm_conv_kernel(DiscreteSSM<double>(abar, bbar, cc), len));
  EXPECT_LT(max_abs_diff(scan.y, conv), 1e-12);
}

TEST(Selective, SkipConnectionAndStates) {
  const std::size_t len = 4, d = 2, s = 2;
  const auto x = randn({len, d}, 1);
  SelectiveParams<double> p{uniform({len, d}, 0.1, 0.5, 2), uniform({d, s}, -1.0, -0.2, 3), randn({len, s}, 4),
                            Tensor<double>(Shape{len, s})};
  const auto r = selective_scan(x, p, Tensor<double>::vector({2.0, -1.0}));
  // C = 0 leaves only D x.
  for (std::size_t t = 0; t < len; ++t) {
    EXPECT_DOUBLE_EQ(r.y[t * d], 2.0 * x[t * d]);
    EXPECT_DOUBLE_EQ(r.y[t * d + 1], -x[t * d + 1]);
  }
  // First state is b_bar x.
  EXPECT_DOUBLE_EQ(r.h_seq[0], p.delta[0] * p.b[0] * x[0]);
}

TEST(Selective, BatchedStatesMatchSingleSequenceScan) {
  const std::size_t nb = 2, len = 6, d = 3, s = 4;
  const auto x = randn({nb, len, d}, 1);
  const auto delta = uniform({nb, len, d}, 0.05, 0.6, 2);
  const auto a = uniform({d, s}, -2.0, -0.1, 3);
  const auto b = randn({nb, len, s}, 4);
  const auto h = selective_scan_states(Var<double>(x), Var<double>(delta), Var<double>(a), Var<double>(b)).value();
  for (std::size_t bi = 0; bi < nb; ++bi) {
    auto part = [&](const Tensor<double>& t, std::size_t w) {
      return Tensor<double>(Shape{len, w},
                            std::vector<double>(t.ptr() + bi * len * w, t.ptr() + (bi + 1) * len * w));
    };
    const auto ref = selective_scan(part(x, d), SelectiveParams<double>{part(delta, d), a, part(b, s), part(b, s)},
                                    Tensor<double>(Shape{d}));
    for (std::size_t i = 0; i < len * d * s; ++i) EXPECT_NEAR(h[bi * len * d * s + i], ref.h_seq[i], 1e-14);
  }
}

TEST(Selective, StatesAndReadoutGradients) {
  Var<double> x = param({2, 5, 3}, 1);
  Var<double> delta(uniform({2, 5, 3}, 0.05, 0.6, 2), true);
  Var<double> a(uniform({3, 2}, -2.0, -0.1, 3), true);
  Var<double> b = param({2, 5, 2}, 4);
  Var<double> c = param({2, 5, 2}, 5);
  auto loss = [&] { return weighted_sum(state_readout(selective_scan_states(x, delta, a, b), c)); };
  for (Var<double>* p : {&x, &delta, &a, &b, &c}) {
    EXPECT_LT(finite_diff_check<double>(loss, *p, 1e-6).max_rel_err, 1e-6);
  }
}

TEST(CausalConv, MatchesDirectSum) {
  const std::size_t nb = 2, len = 6, d = 3, w = 4;
  const auto x = randn({nb, len, d}, 1), wt = randn({w, d}, 2), bias = randn({d}, 3);
  const auto y = causal_conv1d(Var<double>(x), Var<double>(wt), Var<double>(bias)).value();
  for (std::size_t b = 0; b < nb; ++b) {
    for (std::size_t t = 0; t < len; ++t) {
      for (std::size_t c = 0; c < d; ++c) {
        double acc = bias[c];
        for (std::size_t j = 0; j < w; ++j) {
          const long src = static_cast<long>(t) - static_cast<long>(w) + 1 + static_cast<long>(j);
          if (src >= 0) acc += wt[j * d + c] * x[(b * len + static_cast<std::size_t>(src)) * d + c];
        }
        EXPECT_NEAR(y[(b * len + t) * d + c], acc, 1e-14);
      }
    }
  }
}

TEST(CausalConv, Gradient) {
  Var<double> x = param({2, 5, 3}, 1), w = param({4, 3}, 2), bias = param({3}, 3);
  auto loss = [&] { return weighted_sum(causal_conv1d(x, w, bias)); };
  for (Var<double>* p : {&x, &w, &bias}) EXPECT_LT(finite_diff_check<double>(loss, *p, 1e-6).max_rel_err, 1e-7);
}

}  // namespace
}  // namespace densessm
