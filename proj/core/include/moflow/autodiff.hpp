#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "moflow/tensor.hpp"

namespace moflow::ad {

// Training mode uses batch statistics and performs data-dependent
// initialization; Frozen mode is deterministic and side-effect free.
enum class Mode { Training, Frozen };

class Tape;

struct Var {
    Tape* tape = nullptr;
    std::size_t idx = 0;
    const Tensor& value() const;
};

// Eager reverse-mode tape. Values are computed as ops are recorded;
// backward() accumulates gradients into every reachable node.
class Tape {
public:
    using BackFn = std::function<void(Tape&, std::size_t self)>;

    Var leaf(Tensor value, bool requires_grad = false);
    // Leaf tied to external parameter storage; gradient retrievable by pointer.
    Var leaf_param(Tensor* storage);

    Var make(Tensor value, std::vector<std::size_t> parents, BackFn back, const char* op);

    const Tensor& value(std::size_t idx) const { return nodes_[idx].value; }
    const Tensor& value(Var v) const { return nodes_[v.idx].value; }
    bool requires_grad(std::size_t idx) const { return nodes_[idx].requires_; }

    void backward(Var loss);
    const Tensor& grad(Var v) const;
    bool has_grad(Var v) const { return nodes_[v.idx].grad_set; }
    // nullptr when the parameter never received a gradient
    const Tensor* param_grad(const Tensor* storage) const;

    void accumulate(std::size_t idx, const Tensor& g);

    // diagnostic label attached to subsequently recorded nodes
    void set_scope(std::string scope) { scope_ = std::move(scope); }
    // scope + op of the first node holding a non-finite value, or empty
    std::string first_nonfinite() const;

    std::size_t node_count() const { return nodes_.size(); }

private:
    struct Node {
        Tensor value;
        Tensor grad;
        bool grad_set = false;
        bool requires_ = false;
        std::vector<std::size_t> parents;
        BackFn back;
        const char* op = "";
        std::string scope;
    };
    std::vector<Node> nodes_;
    std::string scope_;
    std::unordered_map<const Tensor*, std::size_t> param_nodes_;
};

// ---- elementwise ----
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var add_scalar(Var a, double s);
Var mul_scalar(Var a, double s);
Var sigmoid(Var x);
Var relu(Var x);
Var vlog(Var x);
Var vexp(Var x);
Var vabs(Var x);
// log(sigmoid(x)), computed stably
Var logsigmoid(Var x);
// elementwise product with a constant; mask may cover one batch item
// (mask.size() == x.size() / batch) or the full tensor
Var mask_mul(Var x, const Tensor& mask);

// ---- reductions (over all elements) ----
Var sum(Var x);
Var mean(Var x);
Var variance(Var x);  // population variance

// ---- linear / structural ----
// x: [n,k] or [b,n,k]; w: [k,d]
Var matmul(Var x, Var w);
// p: [b,n,n], x: [b,n,k] -> [b,n,k]
Var bmm(Var p, Var x);
// broadcast over leading dims; v matches the last extent
Var add_feat(Var x, Var v);
Var mul_feat(Var x, Var v);
// x: [b,c,h,w]; v: [c]
Var sub_chan(Var x, Var v);
Var mul_chan(Var x, Var v);
// x: [b,n,k]; v: [n]
Var sub_row(Var x, Var v);
Var mul_row(Var x, Var v);
Var reshape(Var x, std::vector<std::size_t> shape);
// slice along axis 1 of [b,c,h,w]
Var slice_channels(Var x, std::size_t from, std::size_t to);
// slice along the last axis of [b,f] or [b,n,f]
Var slice_feat(Var x, std::size_t from, std::size_t to);

// ---- convolution ----
// x: [b,ci,h,w]; kernel: [co,ci,3,3]; bias: [co]; zero padding preserves h,w
Var conv3x3(Var x, Var kernel, Var bias);

// ---- normalization ----
struct BatchNormState {
    Tensor running_mean;
    Tensor running_var;
};
// rank-3 input [b,n,d]: statistics per feature d over (b,n);
// rank-4 input [b,c,h,w]: statistics per channel c over (b,h,w).
Var batchnorm(Var x, Var gamma, Var beta, BatchNormState& state, Mode mode,
              double momentum = 0.9, double eps = 1e-5);

// ---- flow-specific ----
// every spatial fiber of x [b,c,h,w] multiplied by w [c,c]
Var chan_transform(Var x, Var w);
// factor * log|det w|; throws NumericalError on singular w
Var logdet_matrix(Var w, double factor);
// [b,c,n,n] -> [b,c*h*h,n/h,n/h]
Var squeeze2(Var x, std::size_t h);
Var unsqueeze2(Var x, std::size_t h);
// pad spatial extent to n_pad, filling one-hot at onehot_channel
Var pad_spatial(Var x, std::size_t n_pad, std::size_t onehot_channel);

// plain-tensor counterparts used on inverse paths
Tensor squeeze2(const Tensor& x, std::size_t h);
Tensor unsqueeze2(const Tensor& x, std::size_t h);

// ---- verification harness ----
// Max relative error between the analytic gradient of the scalar map f
// and central finite differences, denominator max(|a|,|n|,1e-8).
double finite_diff_check(const std::function<Var(Tape&, Var)>& f, const Tensor& x,
                         double eps);

}  // namespace moflow::ad
