#include "moflow/layers.hpp"

#include <cmath>

#include "moflow/errors.hpp"

namespace moflow::layers {

void ParamBag::add(std::string name, Tensor* value, bool trainable) {
    for (const auto& r : refs_) {
        if (r.name == name) throw ConfigError("duplicate parameter name: " + name);
    }
    refs_.push_back(ParamRef{std::move(name), value, trainable});
}

Tensor* ParamBag::find(const std::string& name) const {
    for (const auto& r : refs_) {
        if (r.name == name) return r.value;
    }
    return nullptr;
}

Tensor init_linear(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
    Tensor w({fan_in, fan_out});
    double s = std::sqrt(1.0 / static_cast<double>(fan_in));
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = rng.uniform(-s, s);
    return w;
}

Tensor init_conv3x3(std::size_t in_ch, std::size_t out_ch, Rng& rng) {
    Tensor k({out_ch, in_ch, 3, 3});
    double s = std::sqrt(1.0 / static_cast<double>(in_ch * 9));
    for (std::size_t i = 0; i < k.size(); ++i) k[i] = rng.uniform(-s, s);
    return k;
}

Tensor channel_mask(std::size_t c, std::size_t first, std::size_t h, std::size_t w) {
    Tensor m({c, h, w});
    for (std::size_t cc = 0; cc < first; ++cc) {
        for (std::size_t i = 0; i < h * w; ++i) m[cc * h * w + i] = 1.0;
    }
    return m;
}

Tensor row_mask(std::size_t n, std::size_t k, bool first_half) {
    Tensor m({n, k});
    std::size_t half = (n + 1) / 2;
    for (std::size_t r = 0; r < n; ++r) {
        bool sel = first_half ? (r < half) : (r >= half);
        if (sel) {
            for (std::size_t f = 0; f < k; ++f) m.at2(r, f) = 1.0;
        }
    }
    return m;
}

// ------------------------------------------------------------ AffineCoupling

AffineCoupling::AffineCoupling(Tensor mask, std::unique_ptr<ScaleShiftNet> net)
    : mask_(std::move(mask)), inv_mask_(mask_), net_(std::move(net)) {
    for (std::size_t i = 0; i < inv_mask_.size(); ++i) inv_mask_[i] = 1.0 - mask_[i];
}

ForwardResult AffineCoupling::forward(Tape& t, Var x, Mode mode) {
    Var x1 = ad::mask_mul(x, mask_);
    auto [s, tr] = net_->evaluate(t, x1, mode);
    Var sig = ad::sigmoid(s);
    Var z2 = ad::mask_mul(ad::add(ad::mul(x, sig), tr), inv_mask_);
    Var z = ad::add(x1, z2);
    Var logdet = ad::sum(ad::mask_mul(ad::logsigmoid(s), inv_mask_));
    return {z, logdet};
}

Tensor AffineCoupling::inverse(const Tensor& z) const {
    Tape t;
    Tensor z1 = z;
    std::size_t period = mask_.size();
    for (std::size_t i = 0; i < z1.size(); ++i) z1[i] *= mask_[i % period];
    Var v1 = t.leaf(z1, false);
    auto [s, tr] = net_->evaluate(t, v1, Mode::Frozen);
    const Tensor& sv = s.value();
    const Tensor& tv = tr.value();
    Tensor x = z;
    for (std::size_t i = 0; i < x.size(); ++i) {
        double sig = 1.0 / (1.0 + std::exp(-sv[i]));
        double inv = (z[i] - tv[i]) / sig;
        std::size_t mi = i % period;
        x[i] = mask_[mi] * z[i] + inv_mask_[mi] * inv;
    }
    return x;
}

void AffineCoupling::collect(const std::string& prefix, ParamBag& bag) {
    net_->collect(prefix + ".net", bag);
}

// ----------------------------------------------------------------- ActNorm

ActNorm::ActNorm(std::size_t channels)
    : bias_({channels}, 0.0), log_scale_({channels}, 0.0), init_flag_({1}, 0.0) {}

ForwardResult ActNorm::forward(Tape& t, Var x, Mode mode) {
    const Tensor& xv = x.value();
    if (xv.rank() != 4) throw DimensionError("ActNorm expects [b,c,h,w]");
    const std::size_t b = xv.extent(0), c = xv.extent(1);
    const std::size_t hw = xv.extent(2) * xv.extent(3);
    if (c != bias_.size()) throw DimensionError("ActNorm channel mismatch");
    if (mode == Mode::Training && !initialized()) {
        for (std::size_t cc = 0; cc < c; ++cc) {
            double m = 0.0, v = 0.0;
            for (std::size_t bb = 0; bb < b; ++bb) {
                const double* p = xv.data() + (bb * c + cc) * hw;
                for (std::size_t i = 0; i < hw; ++i) m += p[i];
            }
            m /= static_cast<double>(b * hw);
            for (std::size_t bb = 0; bb < b; ++bb) {
                const double* p = xv.data() + (bb * c + cc) * hw;
                for (std::size_t i = 0; i < hw; ++i) v += (p[i] - m) * (p[i] - m);
            }
            v /= static_cast<double>(b * hw);
            bias_[cc] = m;
            log_scale_[cc] = -0.5 * std::log(v + ActNorm2D::kEps);
        }
        init_flag_[0] = 1.0;
    }
    Var bias = t.leaf_param(&bias_);
    Var ls = t.leaf_param(&log_scale_);
    Var y = ad::mul_chan(ad::sub_chan(x, bias), ad::vexp(ls));
    Var logdet = ad::mul_scalar(ad::sum(ls), static_cast<double>(b * hw));
    return {y, logdet};
}

Tensor ActNorm::inverse(const Tensor& y) const {
    if (y.rank() != 4) throw DimensionError("ActNorm expects [b,c,h,w]");
    const std::size_t b = y.extent(0), c = y.extent(1), hw = y.extent(2) * y.extent(3);
    Tensor x = y;
    for (std::size_t bb = 0; bb < b; ++bb) {
        for (std::size_t cc = 0; cc < c; ++cc) {
            double inv_scale = std::exp(-log_scale_[cc]);
            double* p = x.data() + (bb * c + cc) * hw;
            for (std::size_t i = 0; i < hw; ++i) p[i] = p[i] * inv_scale + bias_[cc];
        }
    }
    return x;
}

void ActNorm::collect(const std::string& prefix, ParamBag& bag) {
    bag.add(prefix + ".bias", &bias_, true);
    bag.add(prefix + ".log_scale", &log_scale_, true);
    bag.add(prefix + ".initialized", &init_flag_, false);
}

// --------------------------------------------------------------- ActNorm2D

ActNorm2D::ActNorm2D(std::size_t rows)
    : row_mean_({rows}, 0.0), row_logvar_({rows}, 0.0), init_flag_({1}, 0.0) {}

ForwardResult ActNorm2D::forward(Tape& t, Var x, Mode mode) {
    const Tensor& xv = x.value();
    if (xv.rank() != 3) throw DimensionError("ActNorm2D expects [b,n,k]");
    const std::size_t b = xv.extent(0), n = xv.extent(1), k = xv.extent(2);
    if (n != row_mean_.size()) throw DimensionError("ActNorm2D row mismatch");
    if (mode == Mode::Training && !initialized()) {
        for (std::size_t r = 0; r < n; ++r) {
            double m = 0.0, v = 0.0;
            for (std::size_t bb = 0; bb < b; ++bb) {
                for (std::size_t f = 0; f < k; ++f) m += xv.at3(bb, r, f);
            }
            m /= static_cast<double>(b * k);
            for (std::size_t bb = 0; bb < b; ++bb) {
                for (std::size_t f = 0; f < k; ++f) {
                    double d = xv.at3(bb, r, f) - m;
                    v += d * d;
                }
            }
            v /= static_cast<double>(b * k);
            row_mean_[r] = m;
            row_logvar_[r] = std::log(v + kEps);
        }
        init_flag_[0] = 1.0;
    }
    Var mu = t.leaf_param(&row_mean_);
    Var lv = t.leaf_param(&row_logvar_);
    Var scale = ad::vexp(ad::mul_scalar(lv, -0.5));
    Var y = ad::mul_row(ad::sub_row(x, mu), scale);
    Var logdet = ad::mul_scalar(ad::sum(ad::vabs(lv)),
                                static_cast<double>(b) * static_cast<double>(k) / 2.0);
    return {y, logdet};
}

Tensor ActNorm2D::inverse(const Tensor& y) const {
    if (y.rank() != 3) throw DimensionError("ActNorm2D expects [b,n,k]");
    const std::size_t b = y.extent(0), n = y.extent(1), k = y.extent(2);
    Tensor x = y;
    for (std::size_t bb = 0; bb < b; ++bb) {
        for (std::size_t r = 0; r < n; ++r) {
            double s = std::exp(0.5 * row_logvar_[r]);
            for (std::size_t f = 0; f < k; ++f) {
                x.at3(bb, r, f) = y.at3(bb, r, f) * s + row_mean_[r];
            }
        }
    }
    return x;
}

void ActNorm2D::collect(const std::string& prefix, ParamBag& bag) {
    bag.add(prefix + ".row_mean", &row_mean_, true);
    bag.add(prefix + ".row_logvar", &row_logvar_, true);
    bag.add(prefix + ".initialized", &init_flag_, false);
}

// --------------------------------------------------------------- InvConv1x1

InvConv1x1::InvConv1x1(std::size_t channels, Rng& rng)
    : weight_(linalg::random_rotation(channels, rng)) {}

ForwardResult InvConv1x1::forward(Tape& t, Var x, Mode) {
    const Tensor& xv = x.value();
    if (xv.rank() != 4) throw DimensionError("InvConv1x1 expects [b,c,h,w]");
    const double factor =
        static_cast<double>(xv.extent(0)) * static_cast<double>(xv.extent(2) * xv.extent(3));
    Var w = t.leaf_param(&weight_);
    Var y = ad::chan_transform(x, w);
    Var logdet = ad::logdet_matrix(w, factor);
    return {y, logdet};
}

Tensor InvConv1x1::inverse(const Tensor& y) const {
    if (y.rank() != 4) throw DimensionError("InvConv1x1 expects [b,c,h,w]");
    Tensor winv = linalg::inverse(weight_);
    const std::size_t b = y.extent(0), c = y.extent(1), hw = y.extent(2) * y.extent(3);
    Tensor x(y.shape());
    for (std::size_t bb = 0; bb < b; ++bb) {
        for (std::size_t o = 0; o < c; ++o) {
            double* dst = x.data() + (bb * c + o) * hw;
            for (std::size_t ci = 0; ci < c; ++ci) {
                double wv = winv.at2(o, ci);
                if (wv == 0.0) continue;
                const double* src = y.data() + (bb * c + ci) * hw;
                for (std::size_t s = 0; s < hw; ++s) dst[s] += wv * src[s];
            }
        }
    }
    return x;
}

void InvConv1x1::collect(const std::string& prefix, ParamBag& bag) {
    bag.add(prefix + ".weight", &weight_, true);
}

// ------------------------------------------------------- ConvScaleShiftNet

ConvScaleShiftNet::ConvScaleShiftNet(std::size_t channels,
                                     const std::vector<std::size_t>& hidden, Rng& rng)
    : channels_(channels) {
    std::size_t in = channels;
    for (std::size_t h : hidden) {
        Block blk;
        blk.kernel = init_conv3x3(in, h, rng);
        blk.bias = Tensor({h}, 0.0);
        blk.gamma = Tensor({h}, 1.0);
        blk.beta = Tensor({h}, 0.0);
        blk.bn.running_mean = Tensor({h}, 0.0);
        blk.bn.running_var = Tensor({h}, 1.0);
        blocks_.push_back(std::move(blk));
        in = h;
    }
    out_kernel_ = Tensor({2 * channels, in, 3, 3}, 0.0);  // zero-init output
    out_bias_ = Tensor({2 * channels}, 0.0);
}

std::pair<Var, Var> ConvScaleShiftNet::evaluate(Tape& t, Var x, Mode mode) {
    Var h = x;
    for (Block& blk : blocks_) {
        h = ad::conv3x3(h, t.leaf_param(&blk.kernel), t.leaf_param(&blk.bias));
        h = ad::batchnorm(h, t.leaf_param(&blk.gamma), t.leaf_param(&blk.beta), blk.bn, mode);
        h = ad::relu(h);
    }
    Var out = ad::conv3x3(h, t.leaf_param(&out_kernel_), t.leaf_param(&out_bias_));
    return {ad::slice_channels(out, 0, channels_),
            ad::slice_channels(out, channels_, 2 * channels_)};
}

void ConvScaleShiftNet::collect(const std::string& prefix, ParamBag& bag) {
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
        std::string p = prefix + ".block" + std::to_string(i);
        Block& blk = blocks_[i];
        bag.add(p + ".kernel", &blk.kernel, true);
        bag.add(p + ".bias", &blk.bias, true);
        bag.add(p + ".bn_gamma", &blk.gamma, true);
        bag.add(p + ".bn_beta", &blk.beta, true);
        bag.add(p + ".bn_mean", &blk.bn.running_mean, false);
        bag.add(p + ".bn_var", &blk.bn.running_var, false);
    }
    bag.add(prefix + ".out_kernel", &out_kernel_, true);
    bag.add(prefix + ".out_bias", &out_bias_, true);
}

// -------------------------------------------------------- MlpScaleShiftNet

MlpScaleShiftNet::MlpScaleShiftNet(std::size_t dim, const std::vector<std::size_t>& hidden,
                                   Rng& rng)
    : dim_(dim) {
    std::size_t in = dim;
    for (std::size_t h : hidden) {
        weights_.push_back(init_linear(in, h, rng));
        biases_.push_back(Tensor({h}, 0.0));
        in = h;
    }
    weights_.push_back(Tensor({in, 2 * dim}, 0.0));  // zero-init output
    biases_.push_back(Tensor({2 * dim}, 0.0));
}

std::pair<Var, Var> MlpScaleShiftNet::evaluate(Tape& t, Var x, Mode) {
    Var h = x;
    for (std::size_t i = 0; i < weights_.size(); ++i) {
        h = ad::add_feat(ad::matmul(h, t.leaf_param(&weights_[i])),
                         t.leaf_param(&biases_[i]));
        if (i + 1 < weights_.size()) h = ad::relu(h);
    }
    return {ad::slice_feat(h, 0, dim_), ad::slice_feat(h, dim_, 2 * dim_)};
}

void MlpScaleShiftNet::collect(const std::string& prefix, ParamBag& bag) {
    for (std::size_t i = 0; i < weights_.size(); ++i) {
        bag.add(prefix + ".w" + std::to_string(i), &weights_[i], true);
        bag.add(prefix + ".b" + std::to_string(i), &biases_[i], true);
    }
}

}  // namespace moflow::layers
