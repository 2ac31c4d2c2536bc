#pragma once

#include <string>

#include "hvq/nn.hpp"
#include "hvq/ops.hpp"

// Parameterised building blocks shared by the codec, priors and classifier.
// Each block registers "<name>.w" / "<name>.b" (or a prefix tree) in a
// ParameterSet and reads them back by name during forward.
namespace hvq::layers {

void add_conv(ParameterSet& ps, const std::string& name, std::size_t in, std::size_t out, std::size_t k, Rng& rng);
Tensor conv(Tape& tape, const ParameterSet& ps, const std::string& name, const Tensor& x, int stride = 1,
            int padding = -1);  // -1 = same padding k/2

void add_conv_transpose(ParameterSet& ps, const std::string& name, std::size_t in, std::size_t out, std::size_t k,
                        std::size_t stride, Rng& rng);
Tensor conv_transpose(Tape& tape, const ParameterSet& ps, const std::string& name, const Tensor& x, int stride,
                      int padding);

void add_linear(ParameterSet& ps, const std::string& name, std::size_t in, std::size_t out, Rng& rng);
Tensor linear(Tape& tape, const ParameterSet& ps, const std::string& name, const Tensor& x);

// Residual block x + conv1x1(relu(convKxK(relu(x)))), repeated `layers` times.
void add_residual_stack(ParameterSet& ps, const std::string& prefix, std::size_t hidden, std::size_t residual,
                        std::size_t layers, std::size_t k, Rng& rng);
Tensor residual_stack(Tape& tape, const ParameterSet& ps, const std::string& prefix, const Tensor& x,
                      std::size_t layers);

// Number of stride-2 stages needed for `factor`; throws unless factor is a power of two >= 2.
std::size_t stride2_stages(std::size_t factor);

}  // namespace hvq::layers
