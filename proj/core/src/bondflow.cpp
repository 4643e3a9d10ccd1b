#include "moflow/bondflow.hpp"

#include <memory>

#include "moflow/errors.hpp"

namespace moflow::flow {

void BondFlowConfig::validate() const {
    if (squeeze_factor < 1) throw ConfigError("squeeze_factor must be >= 1");
    if (channels < 1 || n < 1) throw ConfigError("bond flow extents must be >= 1");
    if (virtual_channel >= channels) throw ConfigError("virtual channel out of range");
}

BondFlow::BondFlow(BondFlowConfig config, Rng& rng) : config_(std::move(config)) {
    config_.validate();
    const std::size_t h = config_.squeeze_factor;
    const std::size_t csq = config_.channels * h * h;
    const std::size_t m = config_.n_pad() / h;
    for (std::size_t l = 0; l < config_.n_coupling_layers; ++l) {
        norms_.emplace_back(csq);
        convs_.emplace_back(csq, rng);
        couplings_.emplace_back(
            layers::channel_mask(csq, csq / 2, m, m),
            std::make_unique<layers::ConvScaleShiftNet>(csq, config_.conv_hidden, rng));
    }
}

std::size_t BondFlow::latent_size() const {
    return config_.channels * config_.n_pad() * config_.n_pad();
}

ForwardResult BondFlow::forward(layers::Tape& t, layers::Var b_tensor, layers::Mode mode) {
    const Tensor& bv = b_tensor.value();
    if (bv.rank() != 4 || bv.extent(1) != config_.channels || bv.extent(2) != config_.n ||
        bv.extent(3) != config_.n) {
        throw DimensionError("BondFlow: expected [b," + std::to_string(config_.channels) +
                             "," + std::to_string(config_.n) + "," + std::to_string(config_.n) +
                             "], got " + shape_str(bv.shape()));
    }
    layers::Var x = ad::pad_spatial(b_tensor, config_.n_pad(), config_.virtual_channel);
    x = ad::squeeze2(x, config_.squeeze_factor);
    layers::Var total = t.leaf(Tensor::scalar(0.0));
    for (std::size_t l = 0; l < couplings_.size(); ++l) {
        t.set_scope("bondflow.layer" + std::to_string(l) + ".actnorm");
        ForwardResult an = norms_[l].forward(t, x, mode);
        t.set_scope("bondflow.layer" + std::to_string(l) + ".inv1x1");
        ForwardResult cv = convs_[l].forward(t, an.output, mode);
        t.set_scope("bondflow.layer" + std::to_string(l) + ".coupling");
        ForwardResult cp = couplings_[l].forward(t, cv.output, mode);
        x = cp.output;
        total = ad::add(total, ad::add(an.logdet, ad::add(cv.logdet, cp.logdet)));
    }
    t.set_scope("");
    x = ad::unsqueeze2(x, config_.squeeze_factor);
    return {x, total};
}

Tensor BondFlow::inverse(const Tensor& z) const {
    const std::size_t np = config_.n_pad();
    if (z.rank() != 4 || z.extent(1) != config_.channels || z.extent(2) != np ||
        z.extent(3) != np) {
        throw DimensionError("BondFlow inverse: bad latent shape " + shape_str(z.shape()));
    }
    Tensor x = ad::squeeze2(z, config_.squeeze_factor);
    for (std::size_t l = couplings_.size(); l-- > 0;) {
        x = couplings_[l].inverse(x);
        x = convs_[l].inverse(x);
        x = norms_[l].inverse(x);
    }
    x = ad::unsqueeze2(x, config_.squeeze_factor);
    if (np == config_.n) return x;
    // crop padding back off
    const std::size_t b = x.extent(0), c = config_.channels, n = config_.n;
    Tensor out({b, c, n, n});
    for (std::size_t bb = 0; bb < b; ++bb) {
        for (std::size_t cc = 0; cc < c; ++cc) {
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t j = 0; j < n; ++j) {
                    out.at4(bb, cc, i, j) = x.at4(bb, cc, i, j);
                }
            }
        }
    }
    return out;
}

void BondFlow::collect(const std::string& prefix, layers::ParamBag& bag) {
    for (std::size_t l = 0; l < couplings_.size(); ++l) {
        std::string p = prefix + ".layer" + std::to_string(l);
        norms_[l].collect(p + ".actnorm", bag);
        convs_[l].collect(p + ".inv1x1", bag);
        couplings_[l].collect(p + ".coupling", bag);
    }
}

}  // namespace moflow::flow
