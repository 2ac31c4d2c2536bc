#pragma once

#include <functional>
#include <string>
#include <vector>

#include "hvq/tensor.hpp"

namespace hvq {

struct GradCheckOptions {
    double step = 1e-5;
    double tolerance = 1e-4;
    // Denominator floor for the relative error, so gradients that are zero up
    // to roundoff on both sides do not count as failures.
    double abs_floor = 1e-6;
    // 0 = check every element; otherwise a seeded subset per tensor.
    std::size_t max_elements_per_tensor = 0;
    std::uint64_t seed = 0;
    // An element whose central difference fails but whose one-sided slopes
    // disagree, with the analytic value matching one of them, straddles a
    // kink (e.g. a relu input within one step of zero). Such elements are
    // counted in `kinks` instead of `mismatches`.
    bool skip_kinks = true;
};

struct GradCheckReport {
    double max_rel_error = 0;
    double max_abs_error = 0;
    std::size_t checked = 0;
    std::size_t mismatches = 0;  // elements above tolerance
    std::size_t kinks = 0;
    std::string worst;           // "<tensor #>[<element>]" of the max relative error
    bool passed = true;
};

/// Compares the tape gradient of a scalar function against central
/// differences (f(x + h e_i) - f(x - h e_i)) / 2h for every element of x.
/// Failures are reported, never thrown.
GradCheckReport grad_check(const std::function<Tensor(Tape&, const Tensor&)>& f, Tensor x,
                           const GradCheckOptions& options = {});

/// Same check over several leaf tensors (typically parameters) perturbed in place.
GradCheckReport grad_check(const std::function<Tensor(Tape&)>& f, std::vector<Tensor> inputs,
                           const GradCheckOptions& options = {});

}  // namespace hvq
