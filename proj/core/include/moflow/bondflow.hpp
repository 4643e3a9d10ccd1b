#pragma once

#include <vector>

#include "moflow/layers.hpp"

namespace moflow::flow {

using layers::ForwardResult;

struct BondFlowConfig {
    std::size_t channels = 4;
    std::size_t n = 9;  // spatial extent before padding
    std::size_t n_coupling_layers = 10;
    std::size_t squeeze_factor = 3;
    std::vector<std::size_t> conv_hidden = {128, 128};
    std::size_t virtual_channel = 3;

    std::size_t n_pad() const {
        return ((n + squeeze_factor - 1) / squeeze_factor) * squeeze_factor;
    }
    void validate() const;
};

// Glow variant over bond tensors:
// pad -> squeeze -> K x (actnorm -> inv 1x1 conv -> affine coupling) -> unsqueeze
class BondFlow {
public:
    BondFlow(BondFlowConfig config, Rng& rng);

    // B: [b, c, n, n]; output Z_B: [b, c, n_pad, n_pad]
    ForwardResult forward(layers::Tape& t, layers::Var b_tensor, layers::Mode mode);
    // Z_B: [b, c, n_pad, n_pad] -> B: [b, c, n, n]
    Tensor inverse(const Tensor& z) const;

    std::size_t latent_size() const;
    const BondFlowConfig& config() const { return config_; }
    void collect(const std::string& prefix, layers::ParamBag& bag);

private:
    BondFlowConfig config_;
    std::vector<layers::ActNorm> norms_;
    std::vector<layers::InvConv1x1> convs_;
    std::vector<layers::AffineCoupling> couplings_;
};

}  // namespace moflow::flow
