#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mivhead/grad_check.hpp"

namespace mivhead {

struct GradSuiteEntry {
  std::string label;
  GradCheckReport report;
};

// Central-difference checks of the differentiable ops on small random inputs.
std::vector<GradSuiteEntry> ops_grad_suite(std::uint64_t seed, double tol = 1e-4);

// Full episode loss (head logits + cross-entropy) checked against every head
// parameter on `episodes` random small episodes: C <= 32, S <= 4 per class,
// L <= 4, two blocks, explicit head counts. Families and attention variants
// rotate across episodes.
std::vector<GradSuiteEntry> head_grad_suite(std::size_t episodes, std::uint64_t seed, double tol = 1e-4);

}  // namespace mivhead
