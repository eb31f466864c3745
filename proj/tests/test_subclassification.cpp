#include <gtest/gtest.h>

#include <random>

#include "distdesign/subclassification.hpp"
#include "oracles/subclass_oracle.hpp"

using namespace distdesign;

namespace {

struct Scored {
  ScoreVector s;
  Treatment w;
};

// Treated scores drawn from Beta-like logits shifted by `gap`.
Scored scored_sample(std::size_t n, double gap, std::uint64_t seed, double treated_frac = 0.4) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> z(0.0, 1.0);
  std::bernoulli_distribution b(treated_frac);
  Scored out;
  out.s.values.resize(static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < n; ++i) {
    const int w = b(rng);
    out.w.push_back(w);
    out.s.values(static_cast<Eigen::Index>(i)) = 1.0 / (1.0 + std::exp(-(z(rng) + (w ? gap : 0.0))));
  }
  return out;
}

std::vector<std::vector<int>> groups(const DesignVector& d) {
  std::vector<std::vector<int>> g(static_cast<std::size_t>(d.group_count()));
  for (std::size_t i = 0; i < d.assignments.size(); ++i)
    if (d.assignments[i] > 0) g[static_cast<std::size_t>(d.assignments[i] - 1)].push_back(static_cast<int>(i));
  return g;
}

}  // namespace

TEST(Subclassification, IdenticalDistributionsGiveOneSubclass) {
  auto sc = scored_sample(2000, 0.0, 1);
  // Make treated and control logits literally identical multisets.
  for (std::size_t i = 0; i + 1 < sc.w.size(); i += 2) {
    sc.w[i] = 1;
    sc.w[i + 1] = 0;
    sc.s.values(static_cast<Eigen::Index>(i + 1)) = sc.s.values(static_cast<Eigen::Index>(i));
  }
  auto d = iterative_subclassification(sc.s, sc.w);
  EXPECT_EQ(d.group_count(), 1);
  EXPECT_EQ(d.n_retained(), 2000u);
}

TEST(Subclassification, SmallSampleCountingBound) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto sc = scored_sample(200, 2.0, seed, 0.5);
    auto d = iterative_subclassification(sc.s, sc.w);
    EXPECT_LE(d.group_count(), 3);
  }
}

TEST(Subclassification, SeparatedScoresReplayToNoSplit) {
  const SubclassParams p;
  auto sc = scored_sample(10000, 2.5, 42, 0.3);
  auto d = iterative_subclassification(sc.s, sc.w);
  validate_design(d, sc.w);
  EXPECT_GT(d.group_count(), 3);
  for (const auto& g : groups(d)) {
    std::size_t t = 0;
    for (int i : g) t += static_cast<std::size_t>(sc.w[static_cast<std::size_t>(i)]);
    EXPECT_GE(g.size(), p.min_subclass);
    EXPECT_GE(t, p.min_group);
    EXPECT_GE(g.size() - t, p.min_group);
    EXPECT_FALSE(oracle::replay_would_split(g, sc.s.values, sc.w, p));
  }
}

TEST(Subclassification, IdsFollowScoreOrder) {
  auto sc = scored_sample(5000, 2.0, 3);
  auto d = iterative_subclassification(sc.s, sc.w);
  const auto g = groups(d);
  for (std::size_t k = 1; k < g.size(); ++k) {
    double max_prev = -1, min_cur = 2;
    for (int i : g[k - 1]) max_prev = std::max(max_prev, sc.s.values(i));
    for (int i : g[k]) min_cur = std::min(min_cur, sc.s.values(i));
    EXPECT_LE(max_prev, min_cur);
  }
}

TEST(Subclassification, MaskedSubjectsStayDropped) {
  auto sc = scored_sample(3000, 1.5, 4);
  Mask m(3000, 1);
  for (std::size_t i = 0; i < 3000; i += 7) m[i] = 0;
  auto d = iterative_subclassification(sc.s, sc.w, m);
  for (std::size_t i = 0; i < 3000; ++i) {
    if (!m[i]) {
      EXPECT_EQ(d.assignments[i], 0);
    }
  }
}

TEST(Subclassification, BelowFloorsIsAnError) {
  auto sc = scored_sample(40, 1.0, 5);
  EXPECT_THROW(iterative_subclassification(sc.s, sc.w), DataError);
}

TEST(Subclassification, DeterministicAndRecordsParams) {
  auto sc = scored_sample(4000, 1.0, 6);
  auto a = iterative_subclassification(sc.s, sc.w);
  auto b = iterative_subclassification(sc.s, sc.w);
  EXPECT_EQ(a.assignments, b.assignments);
  EXPECT_EQ(a.params.at("p_threshold"), 0.15);
  EXPECT_EQ(a.params.at("min_subclass"), 50);
  EXPECT_EQ(a.params.at("min_group"), 30);
}

TEST(Subclassification, LowerMedianTiesGoLow) {
  // Half the subjects share the lower-median score; all of them go low.
  const int n = 400;
  ScoreVector s;
  s.values.resize(n);
  Treatment w(n);
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(0.05, 0.95);
  for (int i = 0; i < n; ++i) {
    w[static_cast<std::size_t>(i)] = i % 2;
    s.values(i) = i < 250 ? 0.3 : (i % 2 ? 0.9 : 0.6) + 0.01 * u(rng);
  }
  SubclassParams p;
  p.min_subclass = 10;
  p.min_group = 5;
  std::vector<int> members(n);
  std::iota(members.begin(), members.end(), 0);
  std::sort(members.begin(), members.end(),
            [&](int a, int b) { return s.values(a) < s.values(b) || (s.values(a) == s.values(b) && a < b); });
  const auto dec = evaluate_split(members, s.values, linearize(s).values, w, p);
  ASSERT_TRUE(dec.split);
  EXPECT_EQ(dec.low_size, 250u);
}
