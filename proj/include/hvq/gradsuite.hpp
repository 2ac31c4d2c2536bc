#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "hvq/gradcheck.hpp"

namespace hvq {

struct GradSuiteEntry {
    std::string name;
    GradCheckReport report;
};

/// Finite-difference checks of every differentiable op, the quantizer
/// losses, masked convolution, attention, and the composed codec and prior
/// forward passes on small random instances.
std::vector<GradSuiteEntry> gradient_suite(std::uint64_t seed = 0, const GradCheckOptions& options = {});

}  // namespace hvq
