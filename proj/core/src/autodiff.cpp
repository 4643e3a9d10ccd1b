#include "moflow/autodiff.hpp"

#include <cmath>

#include "moflow/linalg.hpp"

namespace moflow::ad {

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (!a.same_shape(b)) {
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                             " vs " + shape_str(b.shape()));
    }
}

Tape* tape_of(Var a, Var b) {
    if (a.tape != b.tape) throw DimensionError("operands from different tapes");
    return a.tape;
}

double stable_sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    double e = std::exp(x);
    return e / (1.0 + e);
}

// log(sigmoid(x)) = -softplus(-x)
double stable_logsigmoid(double x) {
    if (x >= 0.0) return -std::log1p(std::exp(-x));
    return x - std::log1p(std::exp(x));
}

}  // namespace

const Tensor& Var::value() const { return tape->value(idx); }

Var Tape::leaf(Tensor value, bool requires_grad) {
    Node n;
    n.value = std::move(value);
    n.requires_ = requires_grad;
    n.op = "leaf";
    n.scope = scope_;
    nodes_.push_back(std::move(n));
    return Var{this, nodes_.size() - 1};
}

Var Tape::leaf_param(Tensor* storage) {
    Var v = leaf(*storage, true);
    param_nodes_[storage] = v.idx;
    return v;
}

Var Tape::make(Tensor value, std::vector<std::size_t> parents, BackFn back, const char* op) {
    Node n;
    n.value = std::move(value);
    for (std::size_t p : parents) n.requires_ = n.requires_ || nodes_[p].requires_;
    n.parents = std::move(parents);
    if (n.requires_) n.back = std::move(back);
    n.op = op;
    n.scope = scope_;
    nodes_.push_back(std::move(n));
    return Var{this, nodes_.size() - 1};
}

void Tape::accumulate(std::size_t idx, const Tensor& g) {
    Node& n = nodes_[idx];
    if (!n.requires_) return;
    require_same_shape(n.value, g, "grad");
    if (!n.grad_set) {
        n.grad = g;
        n.grad_set = true;
    } else {
        for (std::size_t i = 0; i < g.size(); ++i) n.grad[i] += g[i];
    }
}

void Tape::backward(Var loss) {
    if (loss.tape != this) throw DimensionError("loss from a different tape");
    if (value(loss).size() != 1) throw DimensionError("backward requires a scalar loss");
    accumulate(loss.idx, Tensor(value(loss).shape(), 1.0));
    for (std::size_t i = loss.idx + 1; i-- > 0;) {
        Node& n = nodes_[i];
        if (n.grad_set && n.back) n.back(*this, i);
    }
}

const Tensor& Tape::grad(Var v) const {
    const Node& n = nodes_[v.idx];
    if (!n.grad_set) throw NumericalError("no gradient recorded for node");
    return n.grad;
}

const Tensor* Tape::param_grad(const Tensor* storage) const {
    auto it = param_nodes_.find(storage);
    if (it == param_nodes_.end()) return nullptr;
    const Node& n = nodes_[it->second];
    return n.grad_set ? &n.grad : nullptr;
}

std::string Tape::first_nonfinite() const {
    for (const Node& n : nodes_) {
        if (!n.value.all_finite()) {
            return n.scope.empty() ? std::string(n.op) : n.scope + "/" + n.op;
        }
    }
    return {};
}

// ---------------------------------------------------------------- elementwise

Var add(Var a, Var b) {
    Tape* t = tape_of(a, b);
    require_same_shape(a.value(), b.value(), "add");
    Tensor y = a.value();
    const Tensor& bv = b.value();
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += bv[i];
    std::size_t ai = a.idx, bi = b.idx;
    return t->make(std::move(y), {ai, bi},
                   [ai, bi](Tape& tp, std::size_t self) {
                       const Tensor& g = tp.grad(Var{&tp, self});
                       tp.accumulate(ai, g);
                       tp.accumulate(bi, g);
                   },
                   "add");
}

Var sub(Var a, Var b) {
    Tape* t = tape_of(a, b);
    require_same_shape(a.value(), b.value(), "sub");
    Tensor y = a.value();
    const Tensor& bv = b.value();
    for (std::size_t i = 0; i < y.size(); ++i) y[i] -= bv[i];
    std::size_t ai = a.idx, bi = b.idx;
    return t->make(std::move(y), {ai, bi},
                   [ai, bi](Tape& tp, std::size_t self) {
                       const Tensor& g = tp.grad(Var{&tp, self});
                       tp.accumulate(ai, g);
                       Tensor ng = g;
                       for (std::size_t i = 0; i < ng.size(); ++i) ng[i] = -ng[i];
                       tp.accumulate(bi, ng);
                   },
                   "sub");
}

Var mul(Var a, Var b) {
    Tape* t = tape_of(a, b);
    require_same_shape(a.value(), b.value(), "mul");
    Tensor y = a.value();
    const Tensor& bv = b.value();
    for (std::size_t i = 0; i < y.size(); ++i) y[i] *= bv[i];
    std::size_t ai = a.idx, bi = b.idx;
    return t->make(std::move(y), {ai, bi},
                   [ai, bi](Tape& tp, std::size_t self) {
                       const Tensor& g = tp.grad(Var{&tp, self});
                       const Tensor& av = tp.value(ai);
                       const Tensor& bv2 = tp.value(bi);
                       Tensor ga = g, gb = g;
                       for (std::size_t i = 0; i < g.size(); ++i) {
                           ga[i] *= bv2[i];
                           gb[i] *= av[i];
                       }
                       tp.accumulate(ai, ga);
                       tp.accumulate(bi, gb);
                   },
                   "mul");
}

Var add_scalar(Var a, double s) {
    Tensor y = a.value();
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += s;
    std::size_t ai = a.idx;
    return a.tape->make(std::move(y), {ai},
                        [ai](Tape& tp, std::size_t self) {
                            tp.accumulate(ai, tp.grad(Var{&tp, self}));
                        },
                        "add_scalar");
}

Var mul_scalar(Var a, double s) {
    Tensor y = a.value();
    for (std::size_t i = 0; i < y.size(); ++i) y[i] *= s;
    std::size_t ai = a.idx;
    return a.tape->make(std::move(y), {ai},
                        [ai, s](Tape& tp, std::size_t self) {
                            Tensor g = tp.grad(Var{&tp, self});
                            for (std::size_t i = 0; i < g.size(); ++i) g[i] *= s;
                            tp.accumulate(ai, g);
                        },
                        "mul_scalar");
}

namespace {

template <typename Fwd, typename Bwd>
Var unary(Var x, Fwd fwd, Bwd bwd, const char* op) {
    Tensor y = x.value();
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = fwd(y[i]);
    std::size_t xi = x.idx;
    return x.tape->make(std::move(y), {xi},
                        [xi, bwd](Tape& tp, std::size_t self) {
                            const Tensor& g = tp.grad(Var{&tp, self});
                            const Tensor& xv = tp.value(xi);
                            const Tensor& yv = tp.value(self);
                            Tensor gx = g;
                            for (std::size_t i = 0; i < g.size(); ++i) {
                                gx[i] = g[i] * bwd(xv[i], yv[i]);
                            }
                            tp.accumulate(xi, gx);
                        },
                        op);
}

}  // namespace

Var sigmoid(Var x) {
    return unary(
        x, [](double v) { return stable_sigmoid(v); },
        [](double, double y) { return y * (1.0 - y); }, "sigmoid");
}

Var relu(Var x) {
    return unary(
        x, [](double v) { return v > 0.0 ? v : 0.0; },
        [](double v, double) { return v > 0.0 ? 1.0 : 0.0; }, "relu");
}

Var vlog(Var x) {
    return unary(
        x, [](double v) { return std::log(v); },
        [](double v, double) { return 1.0 / v; }, "log");
}

Var vexp(Var x) {
    return unary(
        x, [](double v) { return std::exp(v); },
        [](double, double y) { return y; }, "exp");
}

Var vabs(Var x) {
    return unary(
        x, [](double v) { return std::fabs(v); },
        [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }, "abs");
}

Var logsigmoid(Var x) {
    return unary(
        x, [](double v) { return stable_logsigmoid(v); },
        [](double v, double) { return 1.0 - stable_sigmoid(v); }, "logsigmoid");
}

Var mask_mul(Var x, const Tensor& mask) {
    const Tensor& xv = x.value();
    std::size_t period = mask.size();
    if (period != xv.size() && (xv.size() % period != 0)) {
        throw DimensionError("mask_mul: mask size incompatible");
    }
    Tensor y = xv;
    for (std::size_t i = 0; i < y.size(); ++i) y[i] *= mask[i % period];
    std::size_t xi = x.idx;
    Tensor m = mask;
    return x.tape->make(std::move(y), {xi},
                        [xi, m](Tape& tp, std::size_t self) {
                            Tensor g = tp.grad(Var{&tp, self});
                            for (std::size_t i = 0; i < g.size(); ++i) g[i] *= m[i % m.size()];
                            tp.accumulate(xi, g);
                        },
                        "mask_mul");
}

// ---------------------------------------------------------------- reductions

Var sum(Var x) {
    double s = 0.0;
    const Tensor& xv = x.value();
    for (std::size_t i = 0; i < xv.size(); ++i) s += xv[i];
    std::size_t xi = x.idx;
    return x.tape->make(Tensor::scalar(s), {xi},
                        [xi](Tape& tp, std::size_t self) {
                            double g = tp.grad(Var{&tp, self}).item();
                            Tensor gx(tp.value(xi).shape(), g);
                            tp.accumulate(xi, gx);
                        },
                        "sum");
}

Var mean(Var x) {
    const Tensor& xv = x.value();
    double s = 0.0;
    for (std::size_t i = 0; i < xv.size(); ++i) s += xv[i];
    double n = static_cast<double>(xv.size());
    std::size_t xi = x.idx;
    return x.tape->make(Tensor::scalar(s / n), {xi},
                        [xi, n](Tape& tp, std::size_t self) {
                            double g = tp.grad(Var{&tp, self}).item() / n;
                            Tensor gx(tp.value(xi).shape(), g);
                            tp.accumulate(xi, gx);
                        },
                        "mean");
}

Var variance(Var x) {
    const Tensor& xv = x.value();
    double n = static_cast<double>(xv.size());
    double m = 0.0;
    for (std::size_t i = 0; i < xv.size(); ++i) m += xv[i];
    m /= n;
    double v = 0.0;
    for (std::size_t i = 0; i < xv.size(); ++i) v += (xv[i] - m) * (xv[i] - m);
    v /= n;
    std::size_t xi = x.idx;
    return x.tape->make(Tensor::scalar(v), {xi},
                        [xi, m, n](Tape& tp, std::size_t self) {
                            double g = tp.grad(Var{&tp, self}).item();
                            const Tensor& xv2 = tp.value(xi);
                            Tensor gx = xv2;
                            for (std::size_t i = 0; i < gx.size(); ++i) {
                                gx[i] = g * 2.0 * (xv2[i] - m) / n;
                            }
                            tp.accumulate(xi, gx);
                        },
                        "variance");
}

// ---------------------------------------------------------------- linear

Var matmul(Var x, Var w) {
    Tape* t = tape_of(x, w);
    const Tensor& xv = x.value();
    const Tensor& wv = w.value();
    if (wv.rank() != 2) throw DimensionError("matmul: weight must be rank 2");
    const bool batched = xv.rank() == 3;
    if (!batched && xv.rank() != 2) throw DimensionError("matmul: input must be rank 2 or 3");
    const std::size_t b = batched ? xv.extent(0) : 1;
    const std::size_t n = xv.extent(batched ? 1 : 0);
    const std::size_t k = xv.extent(batched ? 2 : 1);
    const std::size_t d = wv.extent(1);
    if (wv.extent(0) != k) {
        throw DimensionError("matmul: inner extents differ: " + shape_str(xv.shape()) + " x " +
                             shape_str(wv.shape()));
    }
    Tensor y(batched ? std::vector<std::size_t>{b, n, d} : std::vector<std::size_t>{n, d});
    const double* xp = xv.data();
    const double* wp = wv.data();
    double* yp = y.data();
    for (std::size_t bb = 0; bb < b; ++bb) {
        for (std::size_t i = 0; i < n; ++i) {
            const double* xrow = xp + (bb * n + i) * k;
            double* yrow = yp + (bb * n + i) * d;
            for (std::size_t kk = 0; kk < k; ++kk) {
                double xval = xrow[kk];
                if (xval == 0.0) continue;
                const double* wrow = wp + kk * d;
                for (std::size_t j = 0; j < d; ++j) yrow[j] += xval * wrow[j];
            }
        }
    }
    std::size_t xi = x.idx, wi = w.idx;
    return t->make(std::move(y), {xi, wi},
                   [xi, wi, b, n, k, d](Tape& tp, std::size_t self) {
                       const Tensor& g = tp.grad(Var{&tp, self});
                       const Tensor& xv2 = tp.value(xi);
                       const Tensor& wv2 = tp.value(wi);
                       Tensor gx(xv2.shape());
                       Tensor gw(wv2.shape());
                       const double* gp = g.data();
                       const double* xp2 = xv2.data();
                       const double* wp2 = wv2.data();
                       double* gxp = gx.data();
                       double* gwp = gw.data();
                       for (std::size_t bb = 0; bb < b; ++bb) {
                           for (std::size_t i = 0; i < n; ++i) {
                               const double* grow = gp + (bb * n + i) * d;
                               const double* xrow = xp2 + (bb * n + i) * k;
                               double* gxrow = gxp + (bb * n + i) * k;
                               for (std::size_t kk = 0; kk < k; ++kk) {
                                   const double* wrow = wp2 + kk * d;
                                   double acc = 0.0;
                                   for (std::size_t j = 0; j < d; ++j) acc += grow[j] * wrow[j];
                                   gxrow[kk] += acc;
                                   double xval = xrow[kk];
                                   if (xval != 0.0) {
                                       double* gwrow = gwp + kk * d;
                                       for (std::size_t j = 0; j < d; ++j) {
                                           gwrow[j] += xval * grow[j];
                                       }
                                   }
                               }
                           }
                       }
                       tp.accumulate(xi, gx);
                       tp.accumulate(wi, gw);
                   },
                   "matmul");
}

Var bmm(Var p, Var x) {
    Tape* t = tape_of(p, x);
    const Tensor& pv = p.value();
    const Tensor& xv = x.value();
    if (pv.rank() != 3 || xv.rank() != 3 || pv.extent(0) != xv.extent(0) ||
        pv.extent(1) != pv.extent(2) || pv.extent(2) != xv.extent(1)) {
        throw DimensionError("bmm: incompatible shapes " + shape_str(pv.shape()) + " x " +
                             shape_str(xv.shape()));
    }
    const std::size_t b = pv.extent(0), n = pv.extent(1), k = xv.extent(2);
    Tensor y({b, n, k});
    for (std::size_t bb = 0; bb < b; ++bb) {
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < n; ++j) {
                double pij = pv.at3(bb, i, j);
                if (pij == 0.0) continue;
                for (std::size_t f = 0; f < k; ++f) {
                    y.at3(bb, i, f) += pij * xv.at3(bb, j, f);
                }
            }
        }
    }
    std::size_t pi = p.idx, xi = x.idx;
    return t->make(std::move(y), {pi, xi},
                   [pi, xi, b, n, k](Tape& tp, std::size_t self) {
                       const Tensor& g = tp.grad(Var{&tp, self});
                       const Tensor& pv2 = tp.value(pi);
                       const Tensor& xv2 = tp.value(xi);
                       Tensor gx(xv2.shape());
                       for (std::size_t bb = 0; bb < b; ++bb) {
                           for (std::size_t i = 0; i < n; ++i) {
                               for (std::size_t j = 0; j < n; ++j) {
                                   double pij = pv2.at3(bb, i, j);
                                   if (pij == 0.0) continue;
                                   for (std::size_t f = 0; f < k; ++f) {
                                       gx.at3(bb, j, f) += pij * g.at3(bb, i, f);
                                   }
                               }
                           }
                       }
                       tp.accumulate(xi, gx);
                       if (tp.requires_grad(pi)) {
                           Tensor gp(pv2.shape());
                           for (std::size_t bb = 0; bb < b; ++bb) {
                               for (std::size_t i = 0; i < n; ++i) {
                                   for (std::size_t j = 0; j < n; ++j) {
                                       double acc = 0.0;
                                       for (std::size_t f = 0; f < k; ++f) {
                                           acc += g.at3(bb, i, f) * xv2.at3(bb, j, f);
                                       }
                                       gp.at3(bb, i, j) = acc;
                                   }
                               }
                           }
                           tp.accumulate(pi, gp);
                       }
                   },
                   "bmm");
}

namespace {

// broadcast helper shared by add_feat / mul_feat
Var feat_op(Var x, Var v, bool is_mul) {
    Tape* t = tape_of(x, v);
    const Tensor& xv = x.value();
    const Tensor& vv = v.value();
    if (vv.rank() != 1 || xv.rank() < 1 ||
        xv.extent(xv.rank() - 1) != vv.extent(0)) {
        throw DimensionError("feat op: last extent mismatch");
    }
    const std::size_t d = vv.extent(0);
    Tensor y = xv;
    for (std::size_t i = 0; i < y.size(); ++i) {
        if (is_mul) {
            y[i] *= vv[i % d];
        } else {
            y[i] += vv[i % d];
        }
    }
    std::size_t xi = x.idx, vi = v.idx;
    return t->make(std::move(y), {xi, vi},
                   [xi, vi, d, is_mul](Tape& tp, std::size_t self) {
                       const Tensor& g = tp.grad(Var{&tp, self});
                       const Tensor& xv2 = tp.value(xi);
                       const Tensor& vv2 = tp.value(vi);
                       Tensor gx = g;
                       Tensor gv(vv2.shape());
                       for (std::size_t i = 0; i < g.size(); ++i) {
                           if (is_mul) {
                               gx[i] = g[i] * vv2[i % d];
                               gv[i % d] += g[i] * xv2[i];
                           } else {
                               gv[i % d] += g[i];
                           }
                       }
                       tp.accumulate(xi, gx);
                       tp.accumulate(vi, gv);
                   },
                   is_mul ? "mul_feat" : "add_feat");
}

// per-channel ([b,c,h,w], axis 1) or per-row ([b,n,k], axis 1) affine helpers
Var axis1_op(Var x, Var v, bool is_mul, bool negate_v, const char* op) {
    Tape* t = tape_of(x, v);
    const Tensor& xv = x.value();
    const Tensor& vv = v.value();
    if (vv.rank() != 1 || xv.rank() < 2 || xv.extent(1) != vv.extent(0)) {
        throw DimensionError(std::string(op) + ": axis-1 extent mismatch");
    }
    const std::size_t b = xv.extent(0), c = xv.extent(1);
    const std::size_t inner = xv.size() / (b * c);
    Tensor y = xv;
    for (std::size_t bb = 0; bb < b; ++bb) {
        for (std::size_t cc = 0; cc < c; ++cc) {
            double vval = negate_v ? -vv[cc] : vv[cc];
            double* row = y.data() + (bb * c + cc) * inner;
            for (std::size_t i = 0; i < inner; ++i) {
                if (is_mul) {
                    row[i] *= vval;
                } else {
                    row[i] += vval;
                }
            }
        }
    }
    std::size_t xi = x.idx, vi = v.idx;
    return t->make(std::move(y), {xi, vi},
                   [xi, vi, b, c, inner, is_mul, negate_v](Tape& tp, std::size_t self) {
                       const Tensor& g = tp.grad(Var{&tp, self});
                       const Tensor& xv2 = tp.value(xi);
                       const Tensor& vv2 = tp.value(vi);
                       Tensor gx = g;
                       Tensor gv(vv2.shape());
                       for (std::size_t bb = 0; bb < b; ++bb) {
                           for (std::size_t cc = 0; cc < c; ++cc) {
                               const double* grow = g.data() + (bb * c + cc) * inner;
                               const double* xrow = xv2.data() + (bb * c + cc) * inner;
                               double* gxrow = gx.data() + (bb * c + cc) * inner;
                               double vval = negate_v ? -vv2[cc] : vv2[cc];
                               for (std::size_t i = 0; i < inner; ++i) {
                                   if (is_mul) {
                                       gxrow[i] = grow[i] * vval;
                                       gv[cc] += grow[i] * xrow[i];
                                   } else {
                                       gv[cc] += grow[i];
                                   }
                               }
                           }
                       }
                       if (!is_mul && negate_v) {
                           for (std::size_t cc = 0; cc < c; ++cc) gv[cc] = -gv[cc];
                       }
                       tp.accumulate(xi, gx);
                       tp.accumulate(vi, gv);
                   },
                   op);
}

}  // namespace

Var add_feat(Var x, Var v) { return feat_op(x, v, false); }
Var mul_feat(Var x, Var v) { return feat_op(x, v, true); }
Var sub_chan(Var x, Var v) { return axis1_op(x, v, false, true, "sub_chan"); }
Var mul_chan(Var x, Var v) { return axis1_op(x, v, true, false, "mul_chan"); }
Var sub_row(Var x, Var v) { return axis1_op(x, v, false, true, "sub_row"); }
Var mul_row(Var x, Var v) { return axis1_op(x, v, true, false, "mul_row"); }

Var reshape(Var x, std::vector<std::size_t> shape) {
    Tensor y = x.value().reshaped(shape);
    std::size_t xi = x.idx;
    return x.tape->make(std::move(y), {xi},
                        [xi](Tape& tp, std::size_t self) {
                            Tensor g = tp.grad(Var{&tp, self}).reshaped(tp.value(xi).shape());
                            tp.accumulate(xi, g);
                        },
                        "reshape");
}

namespace {

// slice along a middle axis: x viewed as [outer, axis, inner]
Var slice_impl(Var x, std::size_t outer, std::size_t axis, std::size_t inner,
               std::size_t from, std::size_t to, std::vector<std::size_t> out_shape,
               const char* op) {
    if (from >= to || to > axis) throw DimensionError("slice: bad range");
    const Tensor& xv = x.value();
    Tensor y(std::move(out_shape));
    const std::size_t width = to - from;
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t a = 0; a < width; ++a) {
            const double* src = xv.data() + (o * axis + from + a) * inner;
            double* dst = y.data() + (o * width + a) * inner;
            for (std::size_t i = 0; i < inner; ++i) dst[i] = src[i];
        }
    }
    std::size_t xi = x.idx;
    return x.tape->make(std::move(y), {xi},
                        [xi, outer, axis, inner, from, width](Tape& tp, std::size_t self) {
                            const Tensor& g = tp.grad(Var{&tp, self});
                            Tensor gx(tp.value(xi).shape());
                            for (std::size_t o = 0; o < outer; ++o) {
                                for (std::size_t a = 0; a < width; ++a) {
                                    const double* src = g.data() + (o * width + a) * inner;
                                    double* dst = gx.data() + (o * axis + from + a) * inner;
                                    for (std::size_t i = 0; i < inner; ++i) dst[i] = src[i];
                                }
                            }
                            tp.accumulate(xi, gx);
                        },
                        op);
}

}  // namespace

Var slice_channels(Var x, std::size_t from, std::size_t to) {
    const Tensor& xv = x.value();
    if (xv.rank() != 4) throw DimensionError("slice_channels: expected rank 4");
    return slice_impl(x, xv.extent(0), xv.extent(1), xv.extent(2) * xv.extent(3), from, to,
                      {xv.extent(0), to - from, xv.extent(2), xv.extent(3)}, "slice_channels");
}

Var slice_feat(Var x, std::size_t from, std::size_t to) {
    const Tensor& xv = x.value();
    if (xv.rank() == 2) {
        return slice_impl(x, xv.extent(0), xv.extent(1), 1, from, to,
                          {xv.extent(0), to - from}, "slice_feat");
    }
    if (xv.rank() == 3) {
        return slice_impl(x, xv.extent(0) * xv.extent(1), xv.extent(2), 1, from, to,
                          {xv.extent(0), xv.extent(1), to - from}, "slice_feat");
    }
    throw DimensionError("slice_feat: expected rank 2 or 3");
}

// ---------------------------------------------------------------- convolution

Var conv3x3(Var x, Var kernel, Var bias) {
    Tape* t = tape_of(x, kernel);
    const Tensor& xv = x.value();
    const Tensor& kv = kernel.value();
    const Tensor& bv = bias.value();
    if (xv.rank() != 4 || kv.rank() != 4 || kv.extent(2) != 3 || kv.extent(3) != 3 ||
        kv.extent(1) != xv.extent(1) || bv.rank() != 1 || bv.extent(0) != kv.extent(0)) {
        throw DimensionError("conv3x3: incompatible shapes " + shape_str(xv.shape()) + ", " +
                             shape_str(kv.shape()));
    }
    const std::size_t b = xv.extent(0), ci = xv.extent(1), h = xv.extent(2), w = xv.extent(3);
    const std::size_t co = kv.extent(0);
    Tensor y({b, co, h, w});
    for (std::size_t bb = 0; bb < b; ++bb) {
        for (std::size_t o = 0; o < co; ++o) {
            for (std::size_t i = 0; i < h; ++i) {
                for (std::size_t j = 0; j < w; ++j) {
                    double acc = bv[o];
                    for (std::size_t c = 0; c < ci; ++c) {
                        for (int di = -1; di <= 1; ++di) {
                            int ii = static_cast<int>(i) + di;
                            if (ii < 0 || ii >= static_cast<int>(h)) continue;
                            for (int dj = -1; dj <= 1; ++dj) {
                                int jj = static_cast<int>(j) + dj;
                                if (jj < 0 || jj >= static_cast<int>(w)) continue;
                                acc += xv.at4(bb, c, ii, jj) *
                                       kv.at4(o, c, di + 1, dj + 1);
                            }
                        }
                    }
                    y.at4(bb, o, i, j) = acc;
                }
            }
        }
    }
    std::size_t xi = x.idx, ki = kernel.idx, bi = bias.idx;
    return t->make(std::move(y), {xi, ki, bi},
                   [xi, ki, bi, b, ci, co, h, w](Tape& tp, std::size_t self) {
                       const Tensor& g = tp.grad(Var{&tp, self});
                       const Tensor& xv2 = tp.value(xi);
                       const Tensor& kv2 = tp.value(ki);
                       Tensor gx(xv2.shape());
                       Tensor gk(kv2.shape());
                       Tensor gb(tp.value(bi).shape());
                       for (std::size_t bb = 0; bb < b; ++bb) {
                           for (std::size_t o = 0; o < co; ++o) {
                               for (std::size_t i = 0; i < h; ++i) {
                                   for (std::size_t j = 0; j < w; ++j) {
                                       double gv = g.at4(bb, o, i, j);
                                       if (gv == 0.0) continue;
                                       gb[o] += gv;
                                       for (std::size_t c = 0; c < ci; ++c) {
                                           for (int di = -1; di <= 1; ++di) {
                                               int ii = static_cast<int>(i) + di;
                                               if (ii < 0 || ii >= static_cast<int>(h)) continue;
                                               for (int dj = -1; dj <= 1; ++dj) {
                                                   int jj = static_cast<int>(j) + dj;
                                                   if (jj < 0 || jj >= static_cast<int>(w)) {
                                                       continue;
                                                   }
                                                   gx.at4(bb, c, ii, jj) +=
                                                       gv * kv2.at4(o, c, di + 1, dj + 1);
                                                   gk.at4(o, c, di + 1, dj + 1) +=
                                                       gv * xv2.at4(bb, c, ii, jj);
                                               }
                                           }
                                       }
                                   }
                               }
                           }
                       }
                       tp.accumulate(xi, gx);
                       tp.accumulate(ki, gk);
                       tp.accumulate(bi, gb);
                   },
                   "conv3x3");
}

// ---------------------------------------------------------------- batchnorm

Var batchnorm(Var x, Var gamma, Var beta, BatchNormState& state, Mode mode,
              double momentum, double eps) {
    Tape* t = tape_of(x, gamma);
    const Tensor& xv = x.value();
    const Tensor& gv = gamma.value();
    const Tensor& bv = beta.value();
    std::size_t f = 0;         // feature extent
    std::size_t outer, inner;  // x viewed as [outer?, f, inner] per layout
    bool channel_layout;
    if (xv.rank() == 3) {
        f = xv.extent(2);  // [b,n,d], stats over (b,n)
        outer = xv.extent(0) * xv.extent(1);
        inner = 1;
        channel_layout = false;
    } else if (xv.rank() == 4) {
        f = xv.extent(1);  // [b,c,h,w], stats over (b,h,w)
        outer = xv.extent(0);
        inner = xv.extent(2) * xv.extent(3);
        channel_layout = true;
    } else {
        throw DimensionError("batchnorm: expected rank 3 or 4 input");
    }
    if (gv.rank() != 1 || gv.extent(0) != f || !bv.same_shape(gv)) {
        throw DimensionError("batchnorm: gamma/beta extent mismatch");
    }
    auto index = [channel_layout, f, inner](std::size_t o, std::size_t ff, std::size_t in) {
        return channel_layout ? (o * f + ff) * inner + in : o * f + ff;
    };
    const std::size_t reduce_n = outer * inner;

    Tensor mu({f}), var({f});
    if (mode == Mode::Training) {
        for (std::size_t ff = 0; ff < f; ++ff) {
            double m = 0.0;
            for (std::size_t o = 0; o < outer; ++o) {
                for (std::size_t in = 0; in < inner; ++in) m += xv[index(o, ff, in)];
            }
            m /= static_cast<double>(reduce_n);
            double v = 0.0;
            for (std::size_t o = 0; o < outer; ++o) {
                for (std::size_t in = 0; in < inner; ++in) {
                    double d = xv[index(o, ff, in)] - m;
                    v += d * d;
                }
            }
            v /= static_cast<double>(reduce_n);
            mu[ff] = m;
            var[ff] = v;
        }
        if (state.running_mean.size() != f) {
            state.running_mean = Tensor({f}, 0.0);
            state.running_var = Tensor({f}, 1.0);
        }
        for (std::size_t ff = 0; ff < f; ++ff) {
            state.running_mean[ff] = momentum * state.running_mean[ff] + (1.0 - momentum) * mu[ff];
            state.running_var[ff] = momentum * state.running_var[ff] + (1.0 - momentum) * var[ff];
        }
    } else {
        if (state.running_mean.size() != f) {
            state.running_mean = Tensor({f}, 0.0);
            state.running_var = Tensor({f}, 1.0);
        }
        mu = state.running_mean;
        var = state.running_var;
    }

    Tensor y = xv;
    for (std::size_t ff = 0; ff < f; ++ff) {
        double inv_std = 1.0 / std::sqrt(var[ff] + eps);
        for (std::size_t o = 0; o < outer; ++o) {
            for (std::size_t in = 0; in < inner; ++in) {
                std::size_t ix = index(o, ff, in);
                y[ix] = gv[ff] * (xv[ix] - mu[ff]) * inv_std + bv[ff];
            }
        }
    }

    std::size_t xi = x.idx, gi = gamma.idx, bi = beta.idx;
    bool training = mode == Mode::Training;
    return t->make(
        std::move(y), {xi, gi, bi},
        [xi, gi, bi, f, outer, inner, index, reduce_n, mu, var, eps,
         training](Tape& tp, std::size_t self) {
            const Tensor& g = tp.grad(Var{&tp, self});
            const Tensor& xv2 = tp.value(xi);
            const Tensor& gv2 = tp.value(gi);
            Tensor gx(xv2.shape());
            Tensor ggamma({f});
            Tensor gbeta({f});
            for (std::size_t ff = 0; ff < f; ++ff) {
                double inv_std = 1.0 / std::sqrt(var[ff] + eps);
                double sum_g = 0.0, sum_gxhat = 0.0;
                for (std::size_t o = 0; o < outer; ++o) {
                    for (std::size_t in = 0; in < inner; ++in) {
                        std::size_t ix = index(o, ff, in);
                        double xhat = (xv2[ix] - mu[ff]) * inv_std;
                        sum_g += g[ix];
                        sum_gxhat += g[ix] * xhat;
                    }
                }
                ggamma[ff] = sum_gxhat;
                gbeta[ff] = sum_g;
                double nrec = 1.0 / static_cast<double>(reduce_n);
                for (std::size_t o = 0; o < outer; ++o) {
                    for (std::size_t in = 0; in < inner; ++in) {
                        std::size_t ix = index(o, ff, in);
                        double xhat = (xv2[ix] - mu[ff]) * inv_std;
                        if (training) {
                            gx[ix] = gv2[ff] * inv_std *
                                     (g[ix] - sum_g * nrec - xhat * sum_gxhat * nrec);
                        } else {
                            gx[ix] = gv2[ff] * inv_std * g[ix];
                        }
                    }
                }
            }
            tp.accumulate(xi, gx);
            tp.accumulate(gi, ggamma);
            tp.accumulate(bi, gbeta);
        },
        "batchnorm");
}

// ---------------------------------------------------------------- flow ops

Var chan_transform(Var x, Var w) {
    Tape* t = tape_of(x, w);
    const Tensor& xv = x.value();
    const Tensor& wv = w.value();
    if (xv.rank() != 4 || wv.rank() != 2 || wv.extent(0) != wv.extent(1) ||
        wv.extent(0) != xv.extent(1)) {
        throw DimensionError("chan_transform: incompatible shapes");
    }
    const std::size_t b = xv.extent(0), c = xv.extent(1), hw = xv.extent(2) * xv.extent(3);
    Tensor y(xv.shape());
    for (std::size_t bb = 0; bb < b; ++bb) {
        for (std::size_t o = 0; o < c; ++o) {
            for (std::size_t ci = 0; ci < c; ++ci) {
                double wv2 = wv.at2(o, ci);
                if (wv2 == 0.0) continue;
                const double* src = xv.data() + (bb * c + ci) * hw;
                double* dst = y.data() + (bb * c + o) * hw;
                for (std::size_t s = 0; s < hw; ++s) dst[s] += wv2 * src[s];
            }
        }
    }
    std::size_t xi = x.idx, wi = w.idx;
    return t->make(std::move(y), {xi, wi},
                   [xi, wi, b, c, hw](Tape& tp, std::size_t self) {
                       const Tensor& g = tp.grad(Var{&tp, self});
                       const Tensor& xv2 = tp.value(xi);
                       const Tensor& wv2 = tp.value(wi);
                       Tensor gx(xv2.shape());
                       Tensor gw(wv2.shape());
                       for (std::size_t bb = 0; bb < b; ++bb) {
                           for (std::size_t o = 0; o < c; ++o) {
                               const double* grow = g.data() + (bb * c + o) * hw;
                               for (std::size_t ci = 0; ci < c; ++ci) {
                                   const double* xrow = xv2.data() + (bb * c + ci) * hw;
                                   double* gxrow = gx.data() + (bb * c + ci) * hw;
                                   double wval = wv2.at2(o, ci);
                                   double acc = 0.0;
                                   for (std::size_t s = 0; s < hw; ++s) {
                                       gxrow[s] += wval * grow[s];
                                       acc += grow[s] * xrow[s];
                                   }
                                   gw.at2(o, ci) += acc;
                               }
                           }
                       }
                       tp.accumulate(xi, gx);
                       tp.accumulate(wi, gw);
                   },
                   "chan_transform");
}

Var logdet_matrix(Var w, double factor) {
    double ld = linalg::log_abs_det(w.value());
    std::size_t wi = w.idx;
    return w.tape->make(Tensor::scalar(factor * ld), {wi},
                        [wi, factor](Tape& tp, std::size_t self) {
                            double g = tp.grad(Var{&tp, self}).item();
                            Tensor inv = linalg::inverse(tp.value(wi));
                            const std::size_t n = inv.extent(0);
                            Tensor gw({n, n});
                            for (std::size_t i = 0; i < n; ++i) {
                                for (std::size_t j = 0; j < n; ++j) {
                                    gw.at2(i, j) = g * factor * inv.at2(j, i);
                                }
                            }
                            tp.accumulate(wi, gw);
                        },
                        "logdet_matrix");
}

namespace {

void squeeze_shapes(const Tensor& x, std::size_t h, bool inverse, std::size_t& b,
                    std::size_t& c, std::size_t& n, std::vector<std::size_t>& out_shape) {
    if (x.rank() != 4) throw DimensionError("squeeze: expected rank 4");
    b = x.extent(0);
    if (!inverse) {
        c = x.extent(1);
        n = x.extent(2);
        if (x.extent(3) != n || h == 0 || n % h != 0) {
            throw DimensionError("squeeze: factor " + std::to_string(h) +
                                 " does not divide spatial extent of " + shape_str(x.shape()));
        }
        out_shape = {b, c * h * h, n / h, n / h};
    } else {
        if (h == 0 || x.extent(1) % (h * h) != 0) {
            throw DimensionError("unsqueeze: channel extent not divisible by h^2");
        }
        c = x.extent(1) / (h * h);
        n = x.extent(2) * h;
        if (x.extent(3) != x.extent(2)) throw DimensionError("unsqueeze: non-square input");
        out_shape = {b, c, n, n};
    }
}

Tensor squeeze_fwd(const Tensor& x, std::size_t h) {
    std::size_t b, c, n;
    std::vector<std::size_t> os;
    squeeze_shapes(x, h, false, b, c, n, os);
    Tensor y(os);
    const std::size_t m = n / h;
    for (std::size_t bb = 0; bb < b; ++bb) {
        for (std::size_t cc = 0; cc < c; ++cc) {
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t j = 0; j < n; ++j) {
                    std::size_t s = cc * h * h + (i % h) * h + (j % h);
                    y.at4(bb, s, i / h, j / h) = x.at4(bb, cc, i, j);
                }
            }
        }
    }
    return y;
}

Tensor unsqueeze_fwd(const Tensor& x, std::size_t h) {
    std::size_t b, c, n;
    std::vector<std::size_t> os;
    squeeze_shapes(x, h, true, b, c, n, os);
    Tensor y(os);
    for (std::size_t bb = 0; bb < b; ++bb) {
        for (std::size_t cc = 0; cc < c; ++cc) {
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t j = 0; j < n; ++j) {
                    std::size_t s = cc * h * h + (i % h) * h + (j % h);
                    y.at4(bb, cc, i, j) = x.at4(bb, s, i / h, j / h);
                }
            }
        }
    }
    return y;
}

}  // namespace

Tensor squeeze2(const Tensor& x, std::size_t h) { return squeeze_fwd(x, h); }
Tensor unsqueeze2(const Tensor& x, std::size_t h) { return unsqueeze_fwd(x, h); }

Var squeeze2(Var x, std::size_t h) {
    Tensor y = squeeze_fwd(x.value(), h);
    std::size_t xi = x.idx;
    return x.tape->make(std::move(y), {xi},
                        [xi, h](Tape& tp, std::size_t self) {
                            tp.accumulate(xi, unsqueeze_fwd(tp.grad(Var{&tp, self}), h));
                        },
                        "squeeze2");
}

Var unsqueeze2(Var x, std::size_t h) {
    Tensor y = unsqueeze_fwd(x.value(), h);
    std::size_t xi = x.idx;
    return x.tape->make(std::move(y), {xi},
                        [xi, h](Tape& tp, std::size_t self) {
                            tp.accumulate(xi, squeeze_fwd(tp.grad(Var{&tp, self}), h));
                        },
                        "unsqueeze2");
}

Var pad_spatial(Var x, std::size_t n_pad, std::size_t onehot_channel) {
    const Tensor& xv = x.value();
    if (xv.rank() != 4 || xv.extent(2) != xv.extent(3)) {
        throw DimensionError("pad_spatial: expected [b,c,n,n]");
    }
    const std::size_t b = xv.extent(0), c = xv.extent(1), n = xv.extent(2);
    if (n_pad < n || onehot_channel >= c) throw DimensionError("pad_spatial: bad arguments");
    if (n_pad == n) return x;
    Tensor y({b, c, n_pad, n_pad});
    for (std::size_t bb = 0; bb < b; ++bb) {
        for (std::size_t cc = 0; cc < c; ++cc) {
            for (std::size_t i = 0; i < n_pad; ++i) {
                for (std::size_t j = 0; j < n_pad; ++j) {
                    if (i < n && j < n) {
                        y.at4(bb, cc, i, j) = xv.at4(bb, cc, i, j);
                    } else {
                        y.at4(bb, cc, i, j) = (cc == onehot_channel) ? 1.0 : 0.0;
                    }
                }
            }
        }
    }
    std::size_t xi = x.idx;
    return x.tape->make(std::move(y), {xi},
                        [xi, b, c, n](Tape& tp, std::size_t self) {
                            const Tensor& g = tp.grad(Var{&tp, self});
                            Tensor gx(tp.value(xi).shape());
                            for (std::size_t bb = 0; bb < b; ++bb) {
                                for (std::size_t cc = 0; cc < c; ++cc) {
                                    for (std::size_t i = 0; i < n; ++i) {
                                        for (std::size_t j = 0; j < n; ++j) {
                                            gx.at4(bb, cc, i, j) = g.at4(bb, cc, i, j);
                                        }
                                    }
                                }
                            }
                            tp.accumulate(xi, gx);
                        },
                        "pad_spatial");
}

// ------------------------------------------------------------- finite diff

double finite_diff_check(const std::function<Var(Tape&, Var)>& f, const Tensor& x,
                         double eps) {
    if (eps <= 0.0) throw NumericalError("finite_diff_check: eps must be positive");
    Tape t;
    Var vx = t.leaf(x, true);
    Var y = f(t, vx);
    if (y.value().size() != 1) throw DimensionError("finite_diff_check: f must be scalar");
    t.backward(y);
    Tensor analytic = t.grad(vx);

    auto eval = [&f](const Tensor& point) {
        Tape tt;
        Var v = tt.leaf(point, false);
        return f(tt, v).value().item();
    };

    double worst = 0.0;
    Tensor xp = x;
    for (std::size_t i = 0; i < x.size(); ++i) {
        double orig = xp[i];
        xp[i] = orig + eps;
        double fp = eval(xp);
        xp[i] = orig - eps;
        double fm = eval(xp);
        xp[i] = orig;
        double numeric = (fp - fm) / (2.0 * eps);
        double denom = std::max({std::fabs(analytic[i]), std::fabs(numeric), 1e-8});
        double err = std::fabs(analytic[i] - numeric) / denom;
        worst = std::max(worst, err);
    }
    return worst;
}

}  // namespace moflow::ad
