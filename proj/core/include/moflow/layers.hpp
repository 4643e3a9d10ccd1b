#pragma once

#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "moflow/autodiff.hpp"
#include "moflow/linalg.hpp"
#include "moflow/rng.hpp"
#include "moflow/tensor.hpp"

namespace moflow::layers {

using ad::Mode;
using ad::Tape;
using ad::Var;

// output plus the log|det Jacobian| summed over the whole batch
struct ForwardResult {
    Var output;
    Var logdet;
};

struct ParamRef {
    std::string name;
    Tensor* value;
    bool trainable;
};

// flat registry of every tensor a model owns (weights and buffers)
class ParamBag {
public:
    void add(std::string name, Tensor* value, bool trainable = true);
    const std::vector<ParamRef>& refs() const { return refs_; }
    Tensor* find(const std::string& name) const;

private:
    std::vector<ParamRef> refs_;
};

// S/T subnet used by generic affine coupling layers
class ScaleShiftNet {
public:
    virtual ~ScaleShiftNet() = default;
    virtual std::pair<Var, Var> evaluate(Tape& t, Var x, Mode mode) = 0;
    virtual void collect(const std::string& prefix, ParamBag& bag) = 0;
};

// z = x1 + (1-m) . (x . sigmoid(S(x1)) + T(x1)), x1 = m . x
class AffineCoupling {
public:
    AffineCoupling(Tensor mask, std::unique_ptr<ScaleShiftNet> net);
    ForwardResult forward(Tape& t, Var x, Mode mode);
    Tensor inverse(const Tensor& z) const;
    void collect(const std::string& prefix, ParamBag& bag);

private:
    Tensor mask_, inv_mask_;
    std::unique_ptr<ScaleShiftNet> net_;
};

// per-channel affine normalization for [b,c,h,w]; data-initialized
class ActNorm {
public:
    explicit ActNorm(std::size_t channels);
    ForwardResult forward(Tape& t, Var x, Mode mode);
    Tensor inverse(const Tensor& y) const;
    void collect(const std::string& prefix, ParamBag& bag);
    bool initialized() const { return init_flag_[0] != 0.0; }

private:
    Tensor bias_, log_scale_, init_flag_;
};

// per-row normalization for [b,n,k]; stores log(sigma^2 + eps) per row
class ActNorm2D {
public:
    explicit ActNorm2D(std::size_t rows);
    ForwardResult forward(Tape& t, Var x, Mode mode);
    Tensor inverse(const Tensor& y) const;
    void collect(const std::string& prefix, ParamBag& bag);
    bool initialized() const { return init_flag_[0] != 0.0; }
    static constexpr double kEps = 1e-6;

private:
    Tensor row_mean_, row_logvar_, init_flag_;
};

// invertible 1x1 convolution over channels; W starts as a random rotation
class InvConv1x1 {
public:
    InvConv1x1(std::size_t channels, Rng& rng);
    ForwardResult forward(Tape& t, Var x, Mode mode);
    Tensor inverse(const Tensor& y) const;
    void collect(const std::string& prefix, ParamBag& bag);
    const Tensor& weight() const { return weight_; }

private:
    Tensor weight_;
};

// conv3x3 -> BN2d -> relu blocks with a zero-initialized output convolution
// producing 2x channels (S and T halves)
class ConvScaleShiftNet : public ScaleShiftNet {
public:
    ConvScaleShiftNet(std::size_t channels, const std::vector<std::size_t>& hidden, Rng& rng);
    std::pair<Var, Var> evaluate(Tape& t, Var x, Mode mode) override;
    void collect(const std::string& prefix, ParamBag& bag) override;

private:
    struct Block {
        Tensor kernel, bias, gamma, beta;
        ad::BatchNormState bn;
    };
    std::size_t channels_;
    std::vector<Block> blocks_;
    Tensor out_kernel_, out_bias_;
};

// linear -> relu stack with a zero-initialized output layer; for [b,d] inputs
class MlpScaleShiftNet : public ScaleShiftNet {
public:
    MlpScaleShiftNet(std::size_t dim, const std::vector<std::size_t>& hidden, Rng& rng);
    std::pair<Var, Var> evaluate(Tape& t, Var x, Mode mode) override;
    void collect(const std::string& prefix, ParamBag& bag) override;

private:
    std::size_t dim_;
    std::vector<Tensor> weights_, biases_;  // last layer zero-initialized
};

// He-style uniform initialization used across subnets
Tensor init_linear(std::size_t fan_in, std::size_t fan_out, Rng& rng);
Tensor init_conv3x3(std::size_t in_ch, std::size_t out_ch, Rng& rng);

// half-channel mask (1 on the first `first` channels) shaped [c,h,w]
Tensor channel_mask(std::size_t c, std::size_t first, std::size_t h, std::size_t w);
// row mask (1 on the given rows) shaped [n,k]
Tensor row_mask(std::size_t n, std::size_t k, bool first_half);

}  // namespace moflow::layers
