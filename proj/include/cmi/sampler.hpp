#pragma once

#include <algorithm>
#include <cstdint>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "cmi/activation.hpp"
#include "cmi/inception.hpp"

namespace cmi {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

// Seed of stream `index` under `base`: splitmix64(base ^ splitmix64(index)).
// Streams are independent of how many siblings exist.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t index) {
  return splitmix64(base ^ splitmix64(index));
}

// Unbiased draw from [0, n) by rejection on mt19937_64's standardized output.
inline std::uint64_t uniform_index(std::mt19937_64& rng, std::uint64_t n) {
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                              std::numeric_limits<std::uint64_t>::max() % n;
  std::uint64_t r;
  do r = rng();
  while (r >= limit);
  return r % n;
}

struct SamplePlan {
  ArchConfig arch;
  std::size_t num_models = 10;
  std::uint64_t base_seed = 0;
  std::vector<ActivationKind> activation_set{kAllActivations.begin(), kAllActivations.end()};
};

inline void validate_sample_plan(const SamplePlan& plan) {
  require(plan.num_models >= 1, "sample plan: num_models must be >= 1");
  require(!plan.activation_set.empty(), "sample plan: activation set is empty");
  auto set = plan.activation_set;
  std::sort(set.begin(), set.end());
  require(std::adjacent_find(set.begin(), set.end()) == set.end(),
          "sample plan: activation set has duplicates");
  const auto violations = validate_config(plan.arch);
  require(violations.empty(), "sample plan: invalid architecture: " +
                                  (violations.empty() ? std::string() : violations.front()));
}

// Per-block assignment for model `model_index`; depends only on the plan's
// architecture, set, base seed and the index.
inline ActivationAssignment sample_assignment(const SamplePlan& plan, std::size_t model_index) {
  ActivationAssignment a;
  a.granularity = Granularity::per_block;
  a.seed = derive_seed(plan.base_seed, model_index);
  std::mt19937_64 rng(*a.seed);
  const std::size_t n = cb_count(plan.arch.k, plan.arch.m, plan.arch.n);
  a.entries.reserve(n);
  for (std::size_t i = 0; i < n; ++i)
    a.entries.push_back(plan.activation_set[uniform_index(rng, plan.activation_set.size())]);
  return a;
}

inline std::vector<ActivationAssignment> sample_assignments(const SamplePlan& plan) {
  validate_sample_plan(plan);
  std::vector<ActivationAssignment> out;
  out.reserve(plan.num_models);
  for (std::size_t j = 0; j < plan.num_models; ++j) out.push_back(sample_assignment(plan, j));
  return out;
}

// Every CB gets `kind`: the CI_i / I baselines when kind is RELU.
inline ActivationAssignment baseline_assignment(const ArchConfig& arch, ActivationKind kind) {
  ActivationAssignment a;
  a.granularity = Granularity::per_block;
  a.entries.assign(cb_count(arch.k, arch.m, arch.n), kind);
  return a;
}

// File name for a persisted assignment: <arch>_model<j>_seed<seed>.json
inline std::string assignment_file_name(const std::string& arch, std::size_t model_index,
                                        const ActivationAssignment& a) {
  return arch + "_model" + std::to_string(model_index) + "_seed" + std::to_string(a.seed.value_or(0)) +
         ".json";
}

}  // namespace cmi
