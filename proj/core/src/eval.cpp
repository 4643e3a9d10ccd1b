#include "moflow/eval.hpp"

#include <algorithm>
#include <bit>
#include <cmath>

#include "moflow/errors.hpp"
#include "moflow/validity.hpp"

namespace moflow::eval {

// -------------------------------------------------------------- metrics

MetricsReport metrics(const std::vector<Molecule>& generated,
                      const std::set<std::string>& train_keys,
                      std::size_t reconstructed_ok, std::size_t dataset_size) {
    if (generated.empty()) throw ConfigError("metrics: empty generated set");
    MetricsReport r;
    r.n_generated = generated.size();
    r.n_reconstructed = reconstructed_ok;
    r.dataset_size = dataset_size;
    std::set<std::string> unique_keys;
    std::set<std::string> nuv_keys;
    for (const Molecule& m : generated) {
        if (m.empty() || !validity::check_valency(m).valid) continue;
        ++r.n_valid;
        const std::string key = chem::canonical_key(m);
        unique_keys.insert(key);
        const bool novel = !train_keys.contains(key);
        if (novel) {
            ++r.n_novel_valid;
            nuv_keys.insert(key);
        }
    }
    r.n_unique_valid = unique_keys.size();
    r.n_nuv = nuv_keys.size();
    const auto frac = [](std::size_t num, std::size_t den) {
        return den == 0 ? 0.0 : static_cast<double>(num) / static_cast<double>(den);
    };
    r.validity = frac(r.n_valid, r.n_generated);
    r.uniqueness = frac(r.n_unique_valid, r.n_valid);
    r.uniqueness_all = frac(r.n_unique_valid, r.n_generated);
    r.novelty = frac(r.n_novel_valid, r.n_valid);
    r.nuv = frac(r.n_nuv, r.n_generated);
    r.reconstruction = frac(r.n_reconstructed, r.dataset_size);
    return r;
}

// --------------------------------------------------------- fingerprints

Fingerprint::Fingerprint(std::size_t bits)
    : bits_(bits), words_((bits + 63) / 64, 0) {
    if (bits == 0) throw ConfigError("fingerprint width must be positive");
}

void Fingerprint::set(std::size_t bit) { words_[bit / 64] |= 1ULL << (bit % 64); }

bool Fingerprint::test(std::size_t bit) const {
    return (words_[bit / 64] >> (bit % 64)) & 1ULL;
}

std::size_t Fingerprint::popcount() const {
    std::size_t n = 0;
    for (std::uint64_t w : words_) n += static_cast<std::size_t>(std::popcount(w));
    return n;
}

namespace {

std::uint64_t splitmix(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

std::uint64_t fnv1a_bytes(const std::string& s) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

}  // namespace

Fingerprint fingerprint(const Molecule& m, std::size_t bits, std::size_t radius) {
    Fingerprint fp(bits);
    std::vector<std::uint64_t> label(m.atoms.size());
    for (std::size_t i = 0; i < m.atoms.size(); ++i) {
        label[i] = splitmix(fnv1a_bytes(m.atoms[i].element) ^
                            static_cast<std::uint64_t>(m.atoms[i].charge + 16));
    }
    for (std::size_t r = 0; r <= radius; ++r) {
        for (std::uint64_t l : label) fp.set(static_cast<std::size_t>(l % bits));
        if (r == radius) break;
        std::vector<std::uint64_t> next(label.size());
        for (std::size_t i = 0; i < label.size(); ++i) {
            std::vector<std::uint64_t> env;
            for (std::size_t j : m.neighbors(i)) {
                const int order = *m.bond_order(i, j);
                env.push_back(splitmix(label[j] ^ (static_cast<std::uint64_t>(order) << 56)));
            }
            std::sort(env.begin(), env.end());
            std::uint64_t h = splitmix(label[i]);
            for (std::uint64_t e : env) h = splitmix(h ^ e);
            next[i] = h;
        }
        label = std::move(next);
    }
    return fp;
}

double tanimoto(const Fingerprint& a, const Fingerprint& b) {
    if (a.bits() != b.bits()) throw DimensionError("tanimoto: width mismatch");
    std::size_t inter = 0, uni = 0;
    for (std::size_t w = 0; w < a.words().size(); ++w) {
        inter += static_cast<std::size_t>(std::popcount(a.words()[w] & b.words()[w]));
        uni += static_cast<std::size_t>(std::popcount(a.words()[w] | b.words()[w]));
    }
    if (uni == 0) return 1.0;
    return static_cast<double>(inter) / static_cast<double>(uni);
}

// ---------------------------------------------------- latent exploration

Tensor flatten_latent(const model::LatentVector& z) {
    Tensor flat({z.z_atom.size() + z.z_bond.size()});
    for (std::size_t i = 0; i < z.z_atom.size(); ++i) flat[i] = z.z_atom[i];
    for (std::size_t i = 0; i < z.z_bond.size(); ++i) flat[z.z_atom.size() + i] = z.z_bond[i];
    return flat;
}

model::LatentVector unflatten_latent(const Tensor& flat, const model::MoFlowModel& m) {
    const std::size_t na = m.atom_latent_size(), nb = m.bond_latent_size();
    if (flat.size() != na + nb) throw DimensionError("latent length mismatch");
    model::LatentVector z;
    z.z_atom = Tensor({na});
    z.z_bond = Tensor({nb});
    for (std::size_t i = 0; i < na; ++i) z.z_atom[i] = flat[i];
    for (std::size_t i = 0; i < nb; ++i) z.z_bond[i] = flat[na + i];
    return z;
}

namespace {

Tensor random_unit(std::size_t d, Rng& rng) {
    Tensor v({d});
    double norm = 0.0;
    do {
        for (std::size_t i = 0; i < d; ++i) v[i] = rng.normal();
        norm = 0.0;
        for (std::size_t i = 0; i < d; ++i) norm += v[i] * v[i];
        norm = std::sqrt(norm);
    } while (norm < 1e-12);
    for (std::size_t i = 0; i < d; ++i) v[i] /= norm;
    return v;
}

}  // namespace

std::vector<Molecule> grid_neighborhood(const model::MoFlowModel& m,
                                        const model::LatentVector& z,
                                        const std::vector<std::pair<double, double>>& steps,
                                        Rng& rng, bool apply_correction) {
    const Tensor base = flatten_latent(z);
    const std::size_t d = base.size();
    Tensor x = random_unit(d, rng);
    Tensor y = random_unit(d, rng);
    double dot = 0.0;
    for (std::size_t i = 0; i < d; ++i) dot += x[i] * y[i];
    double norm = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
        y[i] -= dot * x[i];
        norm += y[i] * y[i];
    }
    norm = std::sqrt(norm);
    if (norm < 1e-12) throw NumericalError("degenerate grid directions");
    for (std::size_t i = 0; i < d; ++i) y[i] /= norm;

    std::vector<Molecule> out;
    out.reserve(steps.size());
    for (const auto& [lx, ly] : steps) {
        Tensor p = base;
        for (std::size_t i = 0; i < d; ++i) p[i] += lx * x[i] + ly * y[i];
        out.push_back(m.decode(unflatten_latent(p, m), apply_correction));
    }
    return out;
}

std::vector<Molecule> interpolate(const model::MoFlowModel& m, const model::LatentVector& z0,
                                  const model::LatentVector& z1, std::size_t count,
                                  bool apply_correction) {
    if (count < 2) throw ConfigError("interpolate: count must be >= 2");
    const Tensor a = flatten_latent(z0), b = flatten_latent(z1);
    if (a.size() != b.size()) throw DimensionError("interpolate: latent size mismatch");
    std::vector<Molecule> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        const double s = static_cast<double>(i) / static_cast<double>(count - 1);
        Tensor p = a;
        for (std::size_t j = 0; j < p.size(); ++j) p[j] += s * (b[j] - a[j]);
        out.push_back(m.decode(unflatten_latent(p, m), apply_correction));
    }
    return out;
}

// ------------------------------------------------------------ regressor

PropertyRegressor::PropertyRegressor(std::size_t dim, std::size_t hidden, Rng& rng) {
    w1_ = layers::init_linear(dim, hidden, rng);
    b1_ = Tensor({hidden}, 0.0);
    w2_ = layers::init_linear(hidden, 1, rng);
    b2_ = Tensor({1}, 0.0);
}

layers::Var PropertyRegressor::evaluate(layers::Tape& t, layers::Var z) const {
    auto* self = const_cast<PropertyRegressor*>(this);
    layers::Var h = ad::relu(
        ad::add_feat(ad::matmul(z, t.leaf_param(&self->w1_)), t.leaf_param(&self->b1_)));
    return ad::add_feat(ad::matmul(h, t.leaf_param(&self->w2_)), t.leaf_param(&self->b2_));
}

double PropertyRegressor::predict(const Tensor& z_flat) const {
    layers::Tape t;
    layers::Var z = t.leaf(z_flat.reshaped({1, dim()}));
    return evaluate(t, z).value().item();
}

Tensor PropertyRegressor::input_gradient(const Tensor& z_flat) const {
    layers::Tape t;
    layers::Var z = t.leaf(z_flat.reshaped({1, dim()}), true);
    layers::Var y = evaluate(t, z);
    t.backward(y);
    Tensor g = t.grad(z);
    if (!g.all_finite()) throw NumericalError("non-finite property gradient");
    return g.reshaped({z_flat.size()});
}

double PropertyRegressor::fit(const std::vector<Tensor>& inputs,
                              const std::vector<double>& targets, std::size_t epochs,
                              double lr, std::uint64_t seed) {
    if (inputs.empty() || inputs.size() != targets.size()) {
        throw ConfigError("regressor fit: bad training data");
    }
    (void)seed;  // full-batch fit is already deterministic
    Tensor x({inputs.size(), dim()});
    Tensor yt({inputs.size(), 1});
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        if (inputs[i].size() != dim()) throw DimensionError("regressor fit: input size");
        for (std::size_t j = 0; j < dim(); ++j) x.at2(i, j) = inputs[i][j];
        yt.at2(i, 0) = targets[i];
    }
    layers::ParamBag bag;
    bag.add("w1", &w1_);
    bag.add("b1", &b1_);
    bag.add("w2", &w2_);
    bag.add("b2", &b2_);
    model::Adam opt(bag, lr);
    double mse = 0.0;
    for (std::size_t e = 0; e < epochs; ++e) {
        layers::Tape t;
        layers::Var pred = evaluate(t, t.leaf(x));
        layers::Var diff = ad::sub(pred, t.leaf(yt));
        layers::Var loss = ad::mean(ad::mul(diff, diff));
        mse = loss.value().item();
        t.backward(loss);
        opt.step(t);
    }
    return mse;
}

// ----------------------------------------------------------- optimization

std::vector<TrajectoryPoint> optimize_property(const model::MoFlowModel& m,
                                               const model::LatentVector& z,
                                               const PropertyRegressor& r, double lambda,
                                               std::size_t steps, bool apply_correction) {
    if (lambda < 0.0) throw ConfigError("optimize: lambda must be >= 0");
    Tensor cur = flatten_latent(z);
    std::vector<TrajectoryPoint> out;
    out.reserve(steps + 1);
    out.push_back({m.decode(unflatten_latent(cur, m), apply_correction), r.predict(cur)});
    for (std::size_t k = 0; k < steps; ++k) {
        const Tensor g = r.input_gradient(cur);
        for (std::size_t i = 0; i < cur.size(); ++i) cur[i] += lambda * g[i];
        out.push_back({m.decode(unflatten_latent(cur, m), apply_correction), r.predict(cur)});
    }
    return out;
}

ConstrainedResult constrained_optimize(const model::MoFlowModel& m, const Molecule& seed,
                                       const PropertyFn& property, const PropertyRegressor& r,
                                       double delta, double lambda, std::size_t steps) {
    if (delta < 0.0 || delta > 1.0) throw ConfigError("delta must be in [0,1]");
    const GraphTensorPair pair = encode_onehot(seed, m.config().vocab);
    Tensor cur = flatten_latent(m.encode(pair).z);
    const std::string seed_key = chem::canonical_key(seed);
    const Fingerprint seed_fp = fingerprint(seed);
    const double y0 = property(seed);

    ConstrainedResult result;
    for (std::size_t k = 0; k < steps; ++k) {
        const Tensor g = r.input_gradient(cur);
        for (std::size_t i = 0; i < cur.size(); ++i) cur[i] += lambda * g[i];
        Molecule cand = m.decode(unflatten_latent(cur, m));
        result.candidates.push_back(cand);
        if (chem::canonical_key(cand) == seed_key) continue;
        const double imp = property(cand) - y0;
        const double sim = tanimoto(seed_fp, fingerprint(cand));
        if (imp < 0.0 || sim < delta) continue;
        if (!result.success || imp > result.improvement) {
            result.success = true;
            result.improvement = imp;
            result.similarity = sim;
            result.best = cand;
        }
    }
    return result;
}

// ------------------------------------------------------ surrogate targets

double heavy_atom_count(const Molecule& m) { return static_cast<double>(m.atoms.size()); }

double ring_count(const Molecule& m) {
    if (m.atoms.empty()) return 0.0;
    std::vector<std::size_t> parent(m.atoms.size());
    for (std::size_t i = 0; i < parent.size(); ++i) parent[i] = i;
    const std::function<std::size_t(std::size_t)> find = [&](std::size_t i) {
        while (parent[i] != i) i = parent[i] = parent[parent[i]];
        return i;
    };
    std::size_t components = m.atoms.size();
    for (const Bond& b : m.bonds) {
        const std::size_t ri = find(b.i), rj = find(b.j);
        if (ri != rj) {
            parent[ri] = rj;
            --components;
        }
    }
    return static_cast<double>(m.bonds.size() + components) -
           static_cast<double>(m.atoms.size());
}

double bond_order_sum(const Molecule& m) {
    double s = 0.0;
    for (const Bond& b : m.bonds) s += b.order;
    return s;
}

PropertyFn property_fn(const std::string& name) {
    if (name == "heavy_atoms") return heavy_atom_count;
    if (name == "rings") return ring_count;
    if (name == "bond_order_sum") return bond_order_sum;
    throw ConfigError("unknown property: " + name);
}

}  // namespace moflow::eval
