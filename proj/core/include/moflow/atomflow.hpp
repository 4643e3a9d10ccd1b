#pragma once

#include <vector>

#include "moflow/layers.hpp"

namespace moflow::flow {

// normalized adjacency per bond channel (virtual channel excluded)
struct GraphNormed {
    Tensor bhat;                 // [c-1, n, n]
    std::vector<double> degree;  // per node
};

// B: discrete one-hot bond tensor [c, n, n]; D_i = sum over real channels
// and partners; rows of isolated nodes stay zero
GraphNormed graphnorm(const Tensor& b_onehot, std::size_t virtual_channel = 3);

// per-channel batched condition used by graph coupling layers
struct GraphCondition {
    std::vector<Tensor> channels;  // (c-1) tensors of shape [b, n, n]

    static GraphCondition from(const std::vector<GraphNormed>& items);
};

// relational-GCN-based S/T producing row-masked scale and shift
class GraphCoupling {
public:
    GraphCoupling(std::size_t n, std::size_t k, std::size_t gcn_dim,
                  const std::vector<std::size_t>& mlp_hidden, bool mask_first_half,
                  std::size_t bond_channels, Rng& rng);

    layers::ForwardResult forward(layers::Tape& t, layers::Var a, const GraphCondition& cond,
                                  layers::Mode mode);
    Tensor inverse(const Tensor& z, const GraphCondition& cond) const;
    void collect(const std::string& prefix, layers::ParamBag& bag);
    const Tensor& mask() const { return mask_; }

private:
    std::pair<layers::Var, layers::Var> scale_shift(layers::Tape& t, layers::Var a1,
                                                    const GraphCondition& cond,
                                                    layers::Mode mode);
    std::size_t n_, k_;
    Tensor mask_, inv_mask_;  // [n, k]
    // graphconv: sum_i bhat_i (M.A) W_i + (M.A) W_0
    std::vector<Tensor> w_rel_;  // (c-1) x [k, d]
    Tensor w_self_;              // [k, d]
    Tensor bn_gamma_, bn_beta_;
    ad::BatchNormState bn_;
    std::vector<Tensor> mlp_w_, mlp_b_;  // last layer zero-init to 2k
};

struct AtomFlowConfig {
    std::size_t n = 9;
    std::size_t k = 5;
    std::size_t n_coupling_layers = 27;
    std::size_t gcn_dim = 64;
    std::vector<std::size_t> mlp_hidden = {128, 64};
    std::size_t bond_channels = 4;

    void validate() const;
};

// graph conditional flow: interleaved actnorm2D + graph coupling layers
// with alternating row masks; B enters only through the fixed condition
class AtomFlow {
public:
    AtomFlow(AtomFlowConfig config, Rng& rng);

    // A: [b, n, k]
    layers::ForwardResult forward(layers::Tape& t, layers::Var a, const GraphCondition& cond,
                                  layers::Mode mode);
    Tensor inverse(const Tensor& z, const GraphCondition& cond) const;

    std::size_t latent_size() const { return config_.n * config_.k; }
    const AtomFlowConfig& config() const { return config_; }
    void collect(const std::string& prefix, layers::ParamBag& bag);

private:
    AtomFlowConfig config_;
    std::vector<layers::ActNorm2D> norms_;
    std::vector<GraphCoupling> couplings_;
};

}  // namespace moflow::flow
