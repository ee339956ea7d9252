#include <gtest/gtest.h>

#include "support.hpp"

using namespace uvtc;
using namespace uvtc::testing;

namespace {

/// b = a + offsets whose magnitude stays well clear of zero, so |a-b| has no
/// kink within a finite-difference step.
Frame offset_frame(const Frame& a, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> mag(0.02, 0.2);
  Frame b = a;
  for (auto& v : b.values()) v += (rng() & 1 ? 1 : -1) * mag(rng);
  return b;
}

/// Staircase plus small noise: every neighbour difference is at least 0.15
/// in magnitude.
Frame kink_free_frame(int h, int w, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> noise(0.0, 0.1);
  Frame f(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) f.at(y, x, c) = 0.1 + noise(rng) + ((x + 2 * y + c) % 3) * 0.25;
  return f;
}

}  // namespace

TEST(L1, MatchesDefinition) {
  Frame a(1, 2), b(1, 2);
  a.at(0, 0, 0) = 1.0;
  b.at(0, 1, 2) = 0.5;
  EXPECT_NEAR(l1_loss(a, b).value, 1.5 / 6, 1e-15);
  SoftMask m(1, 2);
  m[0] = 0.0;
  m[1] = 2.0;
  EXPECT_NEAR(l1_loss(a, b, &m).value, 2 * 0.5 / (3 * 2), 1e-15);
  SoftMask zero(1, 2, 0.0);
  EXPECT_EQ(l1_loss(a, b, &zero).value, 0.0);
}

TEST(L1, SignOfZeroIsZero) {
  const Frame a(2, 2, 0.3);
  const LossValue l = l1_loss(a, a);
  EXPECT_EQ(l.value, 0.0);
  for (double g : l.gradient.values()) EXPECT_EQ(g, 0.0);
}

TEST(L1, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(31);
  const Frame a = random_frame(16, 16, rng);
  const Frame b = offset_frame(a, rng);
  const SoftMask m = random_map(16, 16, rng, 0.1, 1.0);
  const auto numeric = central_differences(to_vector(a), [&](const std::vector<double>& v) {
    return l1_loss(from_vector(v, 16, 16), b, &m).value;
  });
  EXPECT_LT(relative_error(numeric, to_vector(l1_loss(a, b, &m).gradient)), 1e-3);
}

TEST(Ssim, IdenticalFramesScoreOne) {
  std::mt19937_64 rng(32);
  const Frame a = random_frame(12, 13, rng);
  const LossValue l = ssim_loss(a, a);
  EXPECT_NEAR(l.value, 0.0, 1e-12);
  for (double g : l.gradient.values()) EXPECT_NEAR(g, 0.0, 1e-12);
}

TEST(Ssim, ConstantFramesMatchClosedForm) {
  for (auto [va, vb] : {std::pair{0.2, 0.8}, std::pair{0.5, 0.5}, std::pair{0.0, 1.0}, std::pair{0.9, 0.1}}) {
    const ScalarMap map = ssim_map(Frame(11, 14, va), Frame(11, 14, vb));
    for (double s : map.values()) EXPECT_NEAR(s, constant_ssim(va, vb), 1e-12);
  }
}

TEST(Ssim, MapMatchesDirectWindowOracle) {
  std::mt19937_64 rng(33);
  const Frame a = random_frame(13, 15, rng), b = random_frame(13, 15, rng);
  const ScalarMap map = ssim_map(a, b), oracle = oracle_ssim_map(a, b);
  for (std::size_t p = 0; p < map.size(); ++p) EXPECT_NEAR(map[p], oracle[p], 1e-10);
}

TEST(Ssim, SymmetricAndBounded) {
  std::mt19937_64 rng(34);
  const Frame a = random_frame(12, 12, rng), b = random_frame(12, 12, rng);
  EXPECT_NEAR(ssim_loss(a, b).value, ssim_loss(b, a).value, 1e-12);
  const ScalarMap map = ssim_map(a, b);
  for (double s : map.values()) {
    EXPECT_LE(s, 1.0 + 1e-12);
    EXPECT_GE(s, -1.0 - 1e-12);
  }
}

TEST(Ssim, RejectsFramesSmallerThanWindow) {
  EXPECT_THROW(ssim_loss(Frame(10, 20), Frame(10, 20)), Error);
}

TEST(Ssim, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(35);
  const Frame a = random_frame(16, 16, rng), b = random_frame(16, 16, rng);
  const auto numeric = central_differences(to_vector(a), [&](const std::vector<double>& v) {
    return ssim_loss(from_vector(v, 16, 16), b).value;
  });
  EXPECT_LT(relative_error(numeric, to_vector(ssim_loss(a, b).gradient)), 1e-3);
}

TEST(Photometric, CompositeValueAndGradient) {
  std::mt19937_64 rng(36);
  const Frame a = random_frame(16, 16, rng);
  const Frame b = offset_frame(a, rng);
  const LossValue l = photometric_loss(a, b, 0.2);
  EXPECT_NEAR(l.value, 0.8 * l1_loss(a, b).value + 0.1 * ssim_loss(a, b).value, 1e-14);
  const auto numeric = central_differences(to_vector(a), [&](const std::vector<double>& v) {
    return photometric_loss(from_vector(v, 16, 16), b, 0.2).value;
  });
  EXPECT_LT(relative_error(numeric, to_vector(l.gradient)), 1e-3);
}

TEST(Tv, HandComputedValue) {
  Frame a(2, 2);
  for (int c = 0; c < 3; ++c) {
    a.at(0, 1, c) = 1.0;
    a.at(1, 1, c) = 1.0;
  }
  // Horizontal: every row jumps by 1 (mean 1); vertical: no change.
  EXPECT_NEAR(tv_loss(a).value, 1.0, 1e-15);
  EXPECT_EQ(tv_loss(Frame(4, 4, 0.3)).value, 0.0);
}

TEST(Tv, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(37);
  const Frame a = kink_free_frame(16, 16, rng);
  const auto numeric = central_differences(to_vector(a), [&](const std::vector<double>& v) {
    return tv_loss(from_vector(v, 16, 16)).value;
  });
  EXPECT_LT(relative_error(numeric, to_vector(tv_loss(a).gradient)), 1e-3);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  AdamState st(3, 0.1);
  std::vector<double> p{1.0, 2.0, 3.0};
  const std::vector<double> g{0.5, -2.0, 0.0};
  adam_step(st, p, g);
  EXPECT_NEAR(p[0], 0.9, 1e-6);
  EXPECT_NEAR(p[1], 2.1, 1e-6);
  EXPECT_EQ(p[2], 3.0);
}

TEST(Adam, UntouchedParametersKeepValueAndMoments) {
  AdamState st(2, 0.1);
  std::vector<double> p{1.0, 1.0};
  const std::vector<double> g{1.0, 1.0};
  const std::vector<std::uint8_t> touched{1, 0};
  adam_step(st, p, g, touched);
  EXPECT_LT(p[0], 1.0);
  EXPECT_EQ(p[1], 1.0);
  EXPECT_EQ(st.m[1], 0.0);
  EXPECT_EQ(st.step, 1);
}

TEST(Adam, MinimizesQuadratic) {
  AdamState st(1, 0.05);
  std::vector<double> p{3.0};
  for (int i = 0; i < 2000; ++i) {
    const std::vector<double> g{2 * (p[0] - 1.0)};
    adam_step(st, p, g);
  }
  EXPECT_NEAR(p[0], 1.0, 1e-2);
}

TEST(LrSchedule, GeometricWithExactEndpoints) {
  EXPECT_EQ(lr_schedule(0, 35, 0.01, 0.001), 0.01);
  EXPECT_EQ(lr_schedule(34, 35, 0.01, 0.001), 0.001);
  double prev = 1;
  for (int e = 0; e < 35; ++e) {
    const double lr = lr_schedule(e, 35, 0.01, 0.001);
    EXPECT_LT(lr, prev);
    prev = lr;
  }
  EXPECT_EQ(lr_schedule(10, 70, 0.05, 0.05), 0.05);
}
