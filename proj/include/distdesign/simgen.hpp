#pragma once

// Simulated studies: iid normal covariates, a sparse logit treatment
// mechanism with powered mains and heredity-respecting interactions, and the
// two covariate-to-designer assignment settings.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "distdesign/data.hpp"
#include "distdesign/error.hpp"
#include "distdesign/json_io.hpp"
#include "distdesign/propensity.hpp"
#include "distdesign/rng.hpp"

namespace distdesign {

struct MainTerm {
  int column = 0;
  int power = 1;  // 1, 2 or 3
  double coefficient = 0.0;
};

struct InteractionTerm {
  int a = 0, b = 0;  // a is an active main
  double coefficient = 0.0;
};

struct MechanismSpec {
  std::size_t p = 0;
  std::vector<MainTerm> mains;
  std::vector<InteractionTerm> interactions;
  double intercept = std::log(0.2 / 0.8);
  std::uint64_t seed = 0;
};

enum class Setting { one, two };

inline std::string to_string(Setting s) { return s == Setting::two ? "two" : "one"; }

inline Setting setting_from_string(const std::string& s) {
  if (s == "one" || s == "1") return Setting::one;
  if (s == "two" || s == "2") return Setting::two;
  throw UsageError("unknown setting '" + s + "' (expected one or two)");
}

inline constexpr int kActiveMains = 15;
inline constexpr int kInteractions = 5;

inline Eigen::MatrixXd generate_covariates(std::size_t n, std::size_t p, std::uint64_t seed) {
  if (n < 1 || p < 1) throw UsageError("need n >= 1 and p >= 1");
  Rng rng(derive_seed(seed, "covariates"));
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::MatrixXd x(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(p));
  for (Eigen::Index i = 0; i < x.rows(); ++i)
    for (Eigen::Index j = 0; j < x.cols(); ++j) x(i, j) = normal(rng);
  return x;
}

inline void validate_mechanism(const MechanismSpec& spec) {
  if (spec.mains.size() != kActiveMains) throw DataError("mechanism needs 15 active mains");
  int counts[3] = {0, 0, 0};
  std::vector<int> seen;
  for (const auto& m : spec.mains) {
    if (m.column < 0 || static_cast<std::size_t>(m.column) >= spec.p) throw DataError("main column out of range");
    if (m.power < 1 || m.power > 3) throw DataError("main power must be 1, 2 or 3");
    const double mag = std::fabs(m.coefficient);
    if (mag == 0.3) ++counts[0];
    else if (mag == 0.6) ++counts[1];
    else if (mag == 0.9) ++counts[2];
    else throw DataError("main coefficient magnitude must be 0.3, 0.6 or 0.9");
    seen.push_back(m.column);
  }
  if (counts[0] != 5 || counts[1] != 5 || counts[2] != 5) throw DataError("need five mains of each magnitude");
  std::sort(seen.begin(), seen.end());
  if (std::adjacent_find(seen.begin(), seen.end()) != seen.end()) throw DataError("duplicate active main");
  if (spec.interactions.size() != kInteractions) throw DataError("mechanism needs 5 interactions");
  for (const auto& t : spec.interactions) {
    if (std::fabs(t.coefficient) != 0.6) throw DataError("interaction coefficient magnitude must be 0.6");
    if (t.a == t.b || t.a < 0 || t.b < 0 || static_cast<std::size_t>(std::max(t.a, t.b)) >= spec.p)
      throw DataError("invalid interaction pair");
    if (!std::binary_search(seen.begin(), seen.end(), t.a) && !std::binary_search(seen.begin(), seen.end(), t.b))
      throw DataError("interaction violates weak heredity");
  }
}

inline MechanismSpec sample_mechanism(std::size_t p, std::uint64_t seed) {
  if (p < kActiveMains) throw DataError("mechanism needs p >= 15, got " + std::to_string(p));
  Rng rng(derive_seed(seed, "mechanism"));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto sign = [&] { return unit(rng) < 0.5 ? -1.0 : 1.0; };

  MechanismSpec spec;
  spec.p = p;
  spec.seed = seed;
  std::vector<int> cols(p);
  std::iota(cols.begin(), cols.end(), 0);
  std::shuffle(cols.begin(), cols.end(), rng);
  constexpr double magnitudes[3] = {0.3, 0.6, 0.9};
  for (int k = 0; k < kActiveMains; ++k) {
    MainTerm m;
    m.column = cols[static_cast<std::size_t>(k)];
    m.power = unit(rng) < 0.5 ? 1 : (unit(rng) < 0.5 ? 2 : 3);
    m.coefficient = sign() * magnitudes[k / 5];
    spec.mains.push_back(m);
  }
  std::uniform_int_distribution<int> pick_main(0, kActiveMains - 1);
  std::uniform_int_distribution<int> pick_other(0, static_cast<int>(p) - 2);
  while (spec.interactions.size() < kInteractions) {
    const int a = spec.mains[static_cast<std::size_t>(pick_main(rng))].column;
    int b = pick_other(rng);
    if (b >= a) ++b;
    const auto same = [&](const InteractionTerm& t) {
      return std::minmax(t.a, t.b) == std::minmax(a, b);
    };
    if (std::any_of(spec.interactions.begin(), spec.interactions.end(), same)) continue;
    spec.interactions.push_back({a, b, sign() * 0.6});
  }
  return spec;
}

// Columns entering the logit: a powered main is standardized to sample mean 0
// and sd 1; linear mains and interaction products are raw.
inline Eigen::VectorXd mechanism_main_column(const MainTerm& m, const Eigen::MatrixXd& x) {
  Eigen::VectorXd g = x.col(m.column);
  if (m.power == 1) return g;
  g = g.array().pow(m.power);
  const double mean = g.mean();
  g.array() -= mean;
  const double sd = std::sqrt(g.squaredNorm() / static_cast<double>(g.size() - 1));
  if (sd > 0.0) g /= sd;
  return g;
}

inline Eigen::VectorXd true_logit(const MechanismSpec& spec, const Eigen::MatrixXd& x) {
  if (static_cast<std::size_t>(x.cols()) != spec.p)
    throw DataError("mechanism expects " + std::to_string(spec.p) + " covariates, got " + std::to_string(x.cols()));
  Eigen::VectorXd eta = Eigen::VectorXd::Constant(x.rows(), spec.intercept);
  for (const auto& m : spec.mains) eta += m.coefficient * mechanism_main_column(m, x);
  for (const auto& t : spec.interactions) eta += t.coefficient * x.col(t.a).cwiseProduct(x.col(t.b));
  return eta;
}

inline ScoreVector true_propensity(const MechanismSpec& spec, const Eigen::MatrixXd& x) {
  ScoreVector s;
  s.values = true_logit(spec, x).unaryExpr([](double e) { return sigmoid(e); });
  s.source = ScoreSource::oracle;
  s.stage = ScoreStage::truth;
  return s;
}

inline Treatment assign_treatments(const Eigen::VectorXd& probabilities, std::uint64_t seed) {
  Rng rng(derive_seed(seed, "treatment"));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  Treatment w(static_cast<std::size_t>(probabilities.size()));
  for (Eigen::Index i = 0; i < probabilities.size(); ++i) w[static_cast<std::size_t>(i)] = unit(rng) < probabilities(i);
  return w;
}

namespace detail {

inline int find_root(std::vector<int>& parent, int v) {
  while (parent[static_cast<std::size_t>(v)] != v) {
    parent[static_cast<std::size_t>(v)] = parent[static_cast<std::size_t>(parent[static_cast<std::size_t>(v)])];
    v = parent[static_cast<std::size_t>(v)];
  }
  return v;
}

inline PartitionSpec sorted_blocks(int m, std::vector<std::vector<int>> blocks) {
  for (auto& b : blocks) std::sort(b.begin(), b.end());
  return PartitionSpec{m, std::move(blocks)};
}

}  // namespace detail

// Setting one keeps both parents of every interaction in one block;
// setting two is a uniformly random equal split.
inline PartitionSpec make_partition(const MechanismSpec& spec, int m, Setting setting, std::uint64_t seed) {
  const std::size_t p = spec.p;
  if (m < 1 || p % static_cast<std::size_t>(m) != 0)
    throw DataError("cannot split " + std::to_string(p) + " covariates into " + std::to_string(m) + " equal blocks");
  const std::size_t cap = p / static_cast<std::size_t>(m);
  Rng rng(derive_seed(seed, "partition"));
  std::vector<int> cols(p);
  std::iota(cols.begin(), cols.end(), 0);

  if (setting == Setting::two) {
    std::shuffle(cols.begin(), cols.end(), rng);
    std::vector<std::vector<int>> blocks(static_cast<std::size_t>(m));
    for (std::size_t k = 0; k < p; ++k) blocks[k / cap].push_back(cols[k]);
    return detail::sorted_blocks(m, std::move(blocks));
  }

  std::vector<int> parent(p);
  std::iota(parent.begin(), parent.end(), 0);
  for (const auto& t : spec.interactions)
    parent[static_cast<std::size_t>(detail::find_root(parent, t.a))] = detail::find_root(parent, t.b);
  std::vector<std::vector<int>> groups(p);
  for (int c : cols) groups[static_cast<std::size_t>(detail::find_root(parent, c))].push_back(c);
  std::erase_if(groups, [](const auto& g) { return g.empty(); });
  if (std::any_of(groups.begin(), groups.end(), [&](const auto& g) { return g.size() > cap; }))
    throw DataError("interaction parents form a group larger than a block of " + std::to_string(cap));

  for (int attempt = 0; attempt < 200; ++attempt) {
    std::shuffle(groups.begin(), groups.end(), rng);
    std::stable_sort(groups.begin(), groups.end(), [](const auto& a, const auto& b) { return a.size() > b.size(); });
    std::vector<std::vector<int>> blocks(static_cast<std::size_t>(m));
    bool ok = true;
    for (const auto& g : groups) {
      std::vector<std::size_t> fits;
      for (std::size_t b = 0; b < blocks.size(); ++b)
        if (blocks[b].size() + g.size() <= cap) fits.push_back(b);
      if (fits.empty()) {
        ok = false;
        break;
      }
      auto& dest = blocks[fits[std::uniform_int_distribution<std::size_t>(0, fits.size() - 1)(rng)]];
      dest.insert(dest.end(), g.begin(), g.end());
    }
    if (ok) return detail::sorted_blocks(m, std::move(blocks));
  }
  throw DataError("could not place interaction parents into " + std::to_string(m) + " equal blocks");
}

struct SimulatedStudy {
  Dataset data;
  MechanismSpec mechanism;
  ScoreVector true_scores;
  PartitionSpec partition;
  Setting setting = Setting::one;
  std::uint64_t seed = 0;
};

inline SimulatedStudy simulate_study(std::size_t n, std::size_t p, int m, Setting setting, std::uint64_t seed) {
  auto x = generate_covariates(n, p, seed);
  auto spec = sample_mechanism(p, seed);
  auto scores = true_propensity(spec, x);
  auto w = assign_treatments(scores.values, seed);
  auto partition = make_partition(spec, m, setting, seed);
  return SimulatedStudy{Dataset(std::move(x), std::move(w)), std::move(spec), std::move(scores),
                        std::move(partition), setting, seed};
}

// Manifest JSON (mechanism, partition, setting).

inline Json mechanism_to_json(const MechanismSpec& spec) {
  Json mains = Json::array(), inter = Json::array();
  for (const auto& m : spec.mains)
    mains.push_back({{"column", m.column}, {"power", m.power}, {"coefficient", m.coefficient}});
  for (const auto& t : spec.interactions) inter.push_back({{"a", t.a}, {"b", t.b}, {"coefficient", t.coefficient}});
  return {{"p", spec.p}, {"intercept", spec.intercept}, {"seed", spec.seed}, {"mains", mains}, {"interactions", inter}};
}

inline MechanismSpec mechanism_from_json(const Json& j) {
  try {
    MechanismSpec spec;
    spec.p = j.at("p").get<std::size_t>();
    spec.intercept = j.at("intercept").get<double>();
    spec.seed = j.at("seed").get<std::uint64_t>();
    for (const auto& m : j.at("mains"))
      spec.mains.push_back({m.at("column").get<int>(), m.at("power").get<int>(), m.at("coefficient").get<double>()});
    for (const auto& t : j.at("interactions"))
      spec.interactions.push_back({t.at("a").get<int>(), t.at("b").get<int>(), t.at("coefficient").get<double>()});
    validate_mechanism(spec);
    return spec;
  } catch (const Json::exception& e) {
    throw DataError(std::string("malformed mechanism manifest: ") + e.what());
  }
}

inline Json partition_to_json(const PartitionSpec& p) { return {{"m", p.m_designers}, {"blocks", p.blocks}}; }

inline PartitionSpec partition_from_json(const Json& j) {
  try {
    return PartitionSpec{j.at("m").get<int>(), j.at("blocks").get<std::vector<std::vector<int>>>()};
  } catch (const Json::exception& e) {
    throw DataError(std::string("malformed partition: ") + e.what());
  }
}

inline Json study_manifest(const SimulatedStudy& s) {
  return {{"seed", s.seed},
          {"n", s.data.n_subjects()},
          {"setting", to_string(s.setting)},
          {"mechanism", mechanism_to_json(s.mechanism)},
          {"partition", partition_to_json(s.partition)}};
}

}  // namespace distdesign
