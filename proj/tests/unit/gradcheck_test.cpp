#include <chrono>

#include <gtest/gtest.h>

#include "gradcheck.hpp"

TEST(Gradcheck, EveryConfigurationWithinTolerance) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto results = gradcheck::run_suite(20240611);
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  EXPECT_GE(results.size(), 50u);
  for (const auto& r : results) {
    EXPECT_TRUE(r.ok()) << r.name << ": max rel err " << r.max_error << " at " << r.worst << " (" << r.checked
                        << " checked, " << r.skipped << " skipped)";
    // A handful of kinks is expected; most coordinates must be comparable.
    EXPECT_LE(r.skipped, r.checked) << r.name;
  }
  EXPECT_LT(seconds, 120.0);
}

TEST(Gradcheck, DifferentSeedsAlsoPass) {
  for (std::uint64_t seed : {1u, 2u}) {
    std::mt19937_64 rng(seed);
    for (int i = 0; i < 6; ++i) {
      const auto r = gradcheck::check_conv(rng, i);
      EXPECT_TRUE(r.ok()) << r.name << " " << r.worst;
    }
    const auto f = gradcheck::check_focal(rng, 1);
    EXPECT_TRUE(f.ok()) << f.name << " " << f.worst;
  }
}

TEST(Gradcheck, DetectsAWrongGradient) {
  // The checker itself must fail on a deliberately broken backward.
  std::mt19937_64 rng(5);
  gradcheck::Tensor x = gradcheck::random_tensor({6}, rng);
  gradcheck::Tensor dx(x.shape());
  gradcheck::Checker c("broken", 1);
  c.watch("x", &x, &dx);
  const auto r = c.run(
      [&] {
        double s = 0;
        for (double v : x.values()) s += v * v;
        return s;
      },
      [&] {
        for (std::size_t i = 0; i < x.numel(); ++i) dx[i] = 2.1 * x[i];
      },
      6);
  EXPECT_FALSE(r.ok());
}
