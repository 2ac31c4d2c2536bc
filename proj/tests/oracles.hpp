#pragma once

// Independent reference implementations used only by tests. Nothing here
// calls into the library's numeric kernels.

#include <cmath>
#include <cstddef>
#include <vector>

#include "hvq/rng.hpp"
#include "hvq/tensor.hpp"

namespace oracle {

using hvq::real;

inline hvq::Tensor random_tensor(hvq::Shape shape, hvq::Rng& rng, double stddev = 1.0, bool requires_grad = false) {
    std::vector<real> v(hvq::shape_numel(shape));
    for (auto& x : v) x = real(rng.normal(0.0, stddev));
    return hvq::Tensor::from(std::move(shape), std::move(v), requires_grad);
}

// Direct six-loop cross-correlation.
inline std::vector<double> conv2d(const hvq::Tensor& x, const hvq::Tensor& w, int stride, int pad) {
    const long B = long(x.dim(0)), C = long(x.dim(1)), H = long(x.dim(2)), W = long(x.dim(3));
    const long O = long(w.dim(0)), k = long(w.dim(2));
    const long Ho = (H + 2 * pad - k) / stride + 1, Wo = (W + 2 * pad - k) / stride + 1;
    std::vector<double> out(std::size_t(B * O * Ho * Wo), 0.0);
    for (long b = 0; b < B; ++b)
        for (long o = 0; o < O; ++o)
            for (long i = 0; i < Ho; ++i)
                for (long j = 0; j < Wo; ++j) {
                    double acc = 0;
                    for (long c = 0; c < C; ++c)
                        for (long u = 0; u < k; ++u)
                            for (long v = 0; v < k; ++v) {
                                const long r = i * stride - pad + u, s = j * stride - pad + v;
                                if (r < 0 || r >= H || s < 0 || s >= W) continue;
                                acc += double(x[std::size_t(((b * C + c) * H + r) * W + s)]) *
                                       double(w[std::size_t(((o * C + c) * k + u) * k + v)]);
                            }
                    out[std::size_t(((b * O + o) * Ho + i) * Wo + j)] = acc;
                }
    return out;
}

inline double dot(const hvq::Tensor& a, const hvq::Tensor& b) {
    double acc = 0;
    for (std::size_t i = 0; i < a.numel(); ++i) acc += double(a[i]) * double(b[i]);
    return acc;
}

// -log softmax(logits)[target] evaluated with long double scalars.
inline double cross_entropy(const std::vector<double>& logits, std::size_t target) {
    long double mx = logits[0];
    for (double l : logits) mx = std::max<long double>(mx, l);
    long double z = 0;
    for (double l : logits) z += std::exp((long double)l - mx);
    return double(std::log(z) - ((long double)logits[target] - mx));
}

}  // namespace oracle
