#include "moflow/atomflow.hpp"

#include <cmath>

#include "moflow/errors.hpp"

namespace moflow::flow {

GraphNormed graphnorm(const Tensor& b_onehot, std::size_t virtual_channel) {
    if (b_onehot.rank() != 3 || b_onehot.extent(1) != b_onehot.extent(2)) {
        throw DimensionError("graphnorm: expected [c,n,n]");
    }
    const std::size_t c = b_onehot.extent(0), n = b_onehot.extent(1);
    for (std::size_t i = 0; i < b_onehot.size(); ++i) {
        if (b_onehot[i] < 0.0) throw DimensionError("graphnorm: negative entry");
    }
    GraphNormed g;
    g.degree.assign(n, 0.0);
    for (std::size_t l = 0; l < c; ++l) {
        if (l == virtual_channel) continue;
        for (std::size_t j = 0; j < n; ++j) {
            for (std::size_t i = 0; i < n; ++i) g.degree[j] += b_onehot.at3(l, i, j);
        }
    }
    g.bhat = Tensor({c - 1, n, n});
    std::size_t out_l = 0;
    for (std::size_t l = 0; l < c; ++l) {
        if (l == virtual_channel) continue;
        for (std::size_t i = 0; i < n; ++i) {
            if (g.degree[i] <= 0.0) continue;  // isolated node: rows stay zero
            for (std::size_t j = 0; j < n; ++j) {
                g.bhat.at3(out_l, i, j) = b_onehot.at3(l, i, j) / g.degree[i];
            }
        }
        ++out_l;
    }
    return g;
}

GraphCondition GraphCondition::from(const std::vector<GraphNormed>& items) {
    if (items.empty()) throw DimensionError("GraphCondition: empty batch");
    const std::size_t cm1 = items[0].bhat.extent(0), n = items[0].bhat.extent(1);
    GraphCondition cond;
    for (std::size_t l = 0; l < cm1; ++l) {
        Tensor t({items.size(), n, n});
        for (std::size_t b = 0; b < items.size(); ++b) {
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t j = 0; j < n; ++j) {
                    t.at3(b, i, j) = items[b].bhat.at3(l, i, j);
                }
            }
        }
        cond.channels.push_back(std::move(t));
    }
    return cond;
}

// ------------------------------------------------------------ GraphCoupling

GraphCoupling::GraphCoupling(std::size_t n, std::size_t k, std::size_t gcn_dim,
                             const std::vector<std::size_t>& mlp_hidden, bool mask_first_half,
                             std::size_t bond_channels, Rng& rng)
    : n_(n), k_(k) {
    mask_ = layers::row_mask(n, k, mask_first_half);
    inv_mask_ = mask_;
    for (std::size_t i = 0; i < inv_mask_.size(); ++i) inv_mask_[i] = 1.0 - mask_[i];
    for (std::size_t l = 0; l + 1 < bond_channels; ++l) {
        w_rel_.push_back(layers::init_linear(k, gcn_dim, rng));
    }
    w_self_ = layers::init_linear(k, gcn_dim, rng);
    bn_gamma_ = Tensor({gcn_dim}, 1.0);
    bn_beta_ = Tensor({gcn_dim}, 0.0);
    bn_.running_mean = Tensor({gcn_dim}, 0.0);
    bn_.running_var = Tensor({gcn_dim}, 1.0);
    std::size_t in = gcn_dim;
    for (std::size_t h : mlp_hidden) {
        mlp_w_.push_back(layers::init_linear(in, h, rng));
        mlp_b_.push_back(Tensor({h}, 0.0));
        in = h;
    }
    mlp_w_.push_back(Tensor({in, 2 * k}, 0.0));  // zero-init output
    mlp_b_.push_back(Tensor({2 * k}, 0.0));
}

std::pair<layers::Var, layers::Var> GraphCoupling::scale_shift(layers::Tape& t,
                                                               layers::Var a1,
                                                               const GraphCondition& cond,
                                                               layers::Mode mode) {
    if (cond.channels.size() != w_rel_.size()) {
        throw DimensionError("GraphCoupling: condition channel count mismatch");
    }
    layers::Var h = ad::matmul(a1, t.leaf_param(&w_self_));
    for (std::size_t l = 0; l < w_rel_.size(); ++l) {
        layers::Var bhat = t.leaf(cond.channels[l], false);
        layers::Var msg = ad::matmul(ad::bmm(bhat, a1), t.leaf_param(&w_rel_[l]));
        h = ad::add(h, msg);
    }
    h = ad::batchnorm(h, t.leaf_param(&bn_gamma_), t.leaf_param(&bn_beta_), bn_, mode);
    h = ad::relu(h);
    for (std::size_t i = 0; i < mlp_w_.size(); ++i) {
        h = ad::add_feat(ad::matmul(h, t.leaf_param(&mlp_w_[i])), t.leaf_param(&mlp_b_[i]));
        if (i + 1 < mlp_w_.size()) h = ad::relu(h);
    }
    return {ad::slice_feat(h, 0, k_), ad::slice_feat(h, k_, 2 * k_)};
}

layers::ForwardResult GraphCoupling::forward(layers::Tape& t, layers::Var a,
                                             const GraphCondition& cond, layers::Mode mode) {
    layers::Var a1 = ad::mask_mul(a, mask_);
    auto [s, tr] = scale_shift(t, a1, cond, mode);
    layers::Var sig = ad::sigmoid(s);
    layers::Var z2 = ad::mask_mul(ad::add(ad::mul(a, sig), tr), inv_mask_);
    layers::Var z = ad::add(a1, z2);
    layers::Var logdet = ad::sum(ad::mask_mul(ad::logsigmoid(s), inv_mask_));
    return {z, logdet};
}

Tensor GraphCoupling::inverse(const Tensor& z, const GraphCondition& cond) const {
    layers::Tape t;
    Tensor z1 = z;
    const std::size_t period = mask_.size();
    for (std::size_t i = 0; i < z1.size(); ++i) z1[i] *= mask_[i % period];
    layers::Var v1 = t.leaf(z1, false);
    auto [s, tr] = const_cast<GraphCoupling*>(this)->scale_shift(t, v1, cond, ad::Mode::Frozen);
    const Tensor& sv = s.value();
    const Tensor& tv = tr.value();
    Tensor x = z;
    for (std::size_t i = 0; i < x.size(); ++i) {
        double sig = 1.0 / (1.0 + std::exp(-sv[i]));
        std::size_t mi = i % period;
        x[i] = mask_[mi] * z[i] + inv_mask_[mi] * (z[i] - tv[i]) / sig;
    }
    return x;
}

void GraphCoupling::collect(const std::string& prefix, layers::ParamBag& bag) {
    for (std::size_t l = 0; l < w_rel_.size(); ++l) {
        bag.add(prefix + ".w_rel" + std::to_string(l), &w_rel_[l], true);
    }
    bag.add(prefix + ".w_self", &w_self_, true);
    bag.add(prefix + ".bn_gamma", &bn_gamma_, true);
    bag.add(prefix + ".bn_beta", &bn_beta_, true);
    bag.add(prefix + ".bn_mean", &bn_.running_mean, false);
    bag.add(prefix + ".bn_var", &bn_.running_var, false);
    for (std::size_t i = 0; i < mlp_w_.size(); ++i) {
        bag.add(prefix + ".mlp_w" + std::to_string(i), &mlp_w_[i], true);
        bag.add(prefix + ".mlp_b" + std::to_string(i), &mlp_b_[i], true);
    }
}

// ----------------------------------------------------------------- AtomFlow

void AtomFlowConfig::validate() const {
    if (n < 1 || k < 2) throw ConfigError("atom flow extents too small");
    if (bond_channels < 2) throw ConfigError("need at least one real bond channel");
}

AtomFlow::AtomFlow(AtomFlowConfig config, Rng& rng) : config_(std::move(config)) {
    config_.validate();
    for (std::size_t l = 0; l < config_.n_coupling_layers; ++l) {
        norms_.emplace_back(config_.n);
        couplings_.emplace_back(config_.n, config_.k, config_.gcn_dim, config_.mlp_hidden,
                                l % 2 == 0, config_.bond_channels, rng);
    }
}

layers::ForwardResult AtomFlow::forward(layers::Tape& t, layers::Var a,
                                        const GraphCondition& cond, layers::Mode mode) {
    const Tensor& av = a.value();
    if (av.rank() != 3 || av.extent(1) != config_.n || av.extent(2) != config_.k) {
        throw DimensionError("AtomFlow: expected [b," + std::to_string(config_.n) + "," +
                             std::to_string(config_.k) + "], got " + shape_str(av.shape()));
    }
    layers::Var x = a;
    layers::Var total = t.leaf(Tensor::scalar(0.0));
    for (std::size_t l = 0; l < couplings_.size(); ++l) {
        t.set_scope("atomflow.layer" + std::to_string(l) + ".actnorm2d");
        layers::ForwardResult an = norms_[l].forward(t, x, mode);
        t.set_scope("atomflow.layer" + std::to_string(l) + ".coupling");
        layers::ForwardResult cp = couplings_[l].forward(t, an.output, cond, mode);
        x = cp.output;
        total = ad::add(total, ad::add(an.logdet, cp.logdet));
    }
    t.set_scope("");
    return {x, total};
}

Tensor AtomFlow::inverse(const Tensor& z, const GraphCondition& cond) const {
    Tensor x = z;
    for (std::size_t l = couplings_.size(); l-- > 0;) {
        x = couplings_[l].inverse(x, cond);
        x = norms_[l].inverse(x);
    }
    return x;
}

void AtomFlow::collect(const std::string& prefix, layers::ParamBag& bag) {
    for (std::size_t l = 0; l < couplings_.size(); ++l) {
        std::string p = prefix + ".layer" + std::to_string(l);
        norms_[l].collect(p + ".actnorm2d", bag);
        couplings_[l].collect(p + ".coupling", bag);
    }
}

}  // namespace moflow::flow
