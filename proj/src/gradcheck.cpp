#include "hvq/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "hvq/rng.hpp"

namespace hvq {

GradCheckReport grad_check(const std::function<Tensor(Tape&, const Tensor&)>& f, Tensor x,
                           const GradCheckOptions& options) {
    return grad_check([&f, x](Tape& tape) { return f(tape, x); }, std::vector<Tensor>{x}, options);
}

GradCheckReport grad_check(const std::function<Tensor(Tape&)>& f, std::vector<Tensor> inputs,
                           const GradCheckOptions& options) {
    if (options.step <= 0) throw ContractError("grad_check: step must be positive");
    std::vector<bool> saved_flags;
    for (auto& t : inputs) {
        saved_flags.push_back(t.requires_grad());
        t.set_requires_grad(true);
        t.zero_grad();
    }

    {
        Tape tape;
        Tensor loss = f(tape);
        tape.backward(loss);
    }
    std::vector<std::vector<real>> analytic;
    for (auto& t : inputs) {
        if (t.has_grad())
            analytic.emplace_back(t.grad().begin(), t.grad().end());
        else
            analytic.emplace_back(t.numel(), real(0));
    }

    auto eval = [&f] {
        Tape tape(Tape::Mode::inference);
        return double(f(tape).item());
    };

    GradCheckReport report;
    Rng rng(options.seed);
    for (std::size_t ti = 0; ti < inputs.size(); ++ti) {
        Tensor& t = inputs[ti];
        std::vector<std::size_t> elems(t.numel());
        std::iota(elems.begin(), elems.end(), 0);
        if (options.max_elements_per_tensor && elems.size() > options.max_elements_per_tensor) {
            std::shuffle(elems.begin(), elems.end(), rng.engine());
            elems.resize(options.max_elements_per_tensor);
            std::sort(elems.begin(), elems.end());
        }
        auto data = t.mutable_data();
        for (std::size_t i : elems) {
            const real orig = data[i];
            data[i] = real(orig + options.step);
            const double up = eval();
            data[i] = real(orig - options.step);
            const double down = eval();
            data[i] = orig;
            const double numeric = (up - down) / (2 * options.step);
            const double a = analytic[ti][i];
            const double abs_err = std::abs(a - numeric);
            const double rel = abs_err / std::max({std::abs(a), std::abs(numeric), options.abs_floor});
            ++report.checked;
            if (rel > options.tolerance && options.skip_kinks) {
                const double centre = eval();
                const double fwd = (up - centre) / options.step, bwd = (centre - down) / options.step;
                auto rel_to = [&](double u, double v) {
                    return std::abs(u - v) / std::max({std::abs(u), std::abs(v), options.abs_floor});
                };
                if (rel_to(fwd, bwd) > 1e-2 && std::min(rel_to(a, fwd), rel_to(a, bwd)) < 1e-3) {
                    ++report.kinks;
                    continue;
                }
            }
            report.max_abs_error = std::max(report.max_abs_error, abs_err);
            if (rel > options.tolerance) ++report.mismatches;
            if (rel > report.max_rel_error || report.worst.empty()) {
                report.max_rel_error = std::max(report.max_rel_error, rel);
                if (rel >= report.max_rel_error)
                    report.worst = std::to_string(ti) + "[" + std::to_string(i) + "]";
            }
        }
    }
    report.passed = report.mismatches == 0;
    for (std::size_t ti = 0; ti < inputs.size(); ++ti) inputs[ti].set_requires_grad(saved_flags[ti]);
    return report;
}

}  // namespace hvq
