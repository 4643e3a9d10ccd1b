#include "moflow/model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>

#include <json.hpp>

#include "moflow/errors.hpp"
#include "moflow/validity.hpp"

namespace moflow::model {

using nlohmann::json;

flow::BondFlowConfig ModelConfig::bond() const {
    flow::BondFlowConfig b;
    b.channels = VocabularyConfig::c();
    b.n = vocab.n_max;
    b.n_coupling_layers = bond_coupling_layers;
    b.squeeze_factor = squeeze_factor;
    b.conv_hidden = conv_hidden;
    b.virtual_channel = VocabularyConfig::virtual_bond_channel();
    return b;
}

flow::AtomFlowConfig ModelConfig::atom() const {
    flow::AtomFlowConfig a;
    a.n = vocab.n_max;
    a.k = vocab.k();
    a.n_coupling_layers = atom_coupling_layers;
    a.gcn_dim = gcn_dim;
    a.mlp_hidden = mlp_hidden;
    a.bond_channels = VocabularyConfig::c();
    return a;
}

void ModelConfig::validate() const {
    vocab.validate();
    bond().validate();
    atom().validate();
}

// ------------------------------------------------------------------- Adam

Adam::Adam(const layers::ParamBag& bag, double lr, double beta1, double beta2, double eps)
    : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (const auto& ref : bag.refs()) {
        if (!ref.trainable) continue;
        slots_.push_back({ref.value, Tensor(ref.value->shape(), 0.0),
                          Tensor(ref.value->shape(), 0.0)});
    }
}

void Adam::step(const layers::Tape& tape) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (auto& s : slots_) {
        const Tensor* g = tape.param_grad(s.param);
        if (g == nullptr) continue;  // parameter unused this step
        Tensor& p = *s.param;
        for (std::size_t i = 0; i < p.size(); ++i) {
            s.m[i] = beta1_ * s.m[i] + (1.0 - beta1_) * (*g)[i];
            s.v[i] = beta2_ * s.v[i] + (1.0 - beta2_) * (*g)[i] * (*g)[i];
            p[i] -= lr_ * (s.m[i] / bc1) / (std::sqrt(s.v[i] / bc2) + eps_);
        }
    }
}

// ------------------------------------------------------------- MoFlowModel

namespace {

// sum over the batch of the diagonal-Gaussian log-density; z: [b,d]
layers::Var gaussian_logp(layers::Tape& t, layers::Var z, Tensor* log_sigma) {
    const std::size_t b = z.value().extent(0);
    const std::size_t d = z.value().extent(1);
    layers::Var ls = t.leaf_param(log_sigma);
    layers::Var inv_var = ad::vexp(ad::mul_scalar(ls, -2.0));
    layers::Var quad = ad::sum(ad::mul_feat(ad::mul(z, z), inv_var));
    layers::Var logp = ad::mul_scalar(quad, -0.5);
    logp = ad::add(logp, ad::mul_scalar(ad::sum(ls), -static_cast<double>(b)));
    return ad::add_scalar(logp, -0.5 * static_cast<double>(b * d) *
                                    std::log(2.0 * std::numbers::pi));
}

}  // namespace

MoFlowModel::MoFlowModel(ModelConfig config, std::uint64_t seed)
    : config_(std::move(config)) {
    config_.validate();
    Rng rng(seed);
    bond_ = std::make_unique<flow::BondFlow>(config_.bond(), rng);
    atom_ = std::make_unique<flow::AtomFlow>(config_.atom(), rng);
    log_sigma_atom_ = std::make_unique<Tensor>(std::vector<std::size_t>{atom_->latent_size()}, 0.0);
    log_sigma_bond_ = std::make_unique<Tensor>(std::vector<std::size_t>{bond_->latent_size()}, 0.0);
    bond_->collect("bond", params_);
    atom_->collect("atom", params_);
    params_.add("prior.log_sigma_atom", log_sigma_atom_.get(), true);
    params_.add("prior.log_sigma_bond", log_sigma_bond_.get(), true);
}

MoFlowModel::Batched MoFlowModel::stage(layers::Tape& t,
                                        const std::vector<GraphTensorPair>& batch) const {
    if (batch.empty()) throw DimensionError("MoFlowModel: empty batch");
    const std::size_t n = config_.vocab.n_max, k = config_.vocab.k();
    const std::size_t c = VocabularyConfig::c();
    Tensor a({batch.size(), n, k});
    Tensor b({batch.size(), c, n, n});
    std::vector<flow::GraphNormed> normed;
    normed.reserve(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const GraphTensorPair& p = batch[i];
        if (p.A.shape() != std::vector<std::size_t>{n, k} ||
            p.B.shape() != std::vector<std::size_t>{c, n, n}) {
            throw DimensionError("graph tensors do not match the vocabulary: A " +
                                 shape_str(p.A.shape()) + ", B " + shape_str(p.B.shape()));
        }
        std::memcpy(&a[i * n * k], p.A.data(), n * k * sizeof(double));
        std::memcpy(&b[i * c * n * n], p.B.data(), c * n * n * sizeof(double));
        normed.push_back(flow::graphnorm(resolve_bond_onehot(p.B),
                                         VocabularyConfig::virtual_bond_channel()));
    }
    return {t.leaf(std::move(a)), t.leaf(std::move(b)),
            flow::GraphCondition::from(normed)};
}

MoFlowModel::Terms MoFlowModel::log_likelihood_terms(layers::Tape& t, const Batched& staged,
                                                     layers::Mode mode) const {
    const std::size_t bsz = staged.a.value().extent(0);
    layers::ForwardResult fb = bond_->forward(t, staged.b, mode);
    layers::Var zb = ad::reshape(fb.output, {bsz, bond_->latent_size()});
    layers::Var bond_term = ad::add(gaussian_logp(t, zb, log_sigma_bond_.get()), fb.logdet);
    layers::ForwardResult fa = atom_->forward(t, staged.a, staged.cond, mode);
    layers::Var za = ad::reshape(fa.output, {bsz, atom_->latent_size()});
    layers::Var atom_term = ad::add(gaussian_logp(t, za, log_sigma_atom_.get()), fa.logdet);
    return {bond_term, atom_term, zb, za};
}

EncodeResult MoFlowModel::encode(const GraphTensorPair& pair) const {
    layers::Tape t;
    Batched staged = stage(t, {pair});
    Terms terms = log_likelihood_terms(t, staged, ad::Mode::Frozen);
    EncodeResult r;
    r.bond_term = terms.bond_term.value().item();
    r.atom_term = terms.atom_term.value().item();
    r.log_likelihood = r.bond_term + r.atom_term;
    r.z.z_bond = terms.z_bond.value().reshaped({bond_->latent_size()});
    r.z.z_atom = terms.z_atom.value().reshaped({atom_->latent_size()});
    return r;
}

GraphTensorPair MoFlowModel::invert(const LatentVector& z) const {
    const std::size_t n = config_.vocab.n_max, k = config_.vocab.k();
    const std::size_t c = VocabularyConfig::c();
    const std::size_t np = config_.bond().n_pad();
    if (z.z_bond.size() != bond_->latent_size() || z.z_atom.size() != atom_->latent_size()) {
        throw DimensionError("latent vector does not match the model");
    }
    Tensor zb = z.z_bond.reshaped({1, c, np, np});
    Tensor b = bond_->inverse(zb);  // [1,c,n,n]
    Tensor b_single = b.reshaped({c, n, n});
    flow::GraphNormed gn = flow::graphnorm(resolve_bond_onehot(b_single),
                                           VocabularyConfig::virtual_bond_channel());
    flow::GraphCondition cond = flow::GraphCondition::from({gn});
    Tensor za = z.z_atom.reshaped({1, n, k});
    Tensor a = atom_->inverse(za, cond);
    GraphTensorPair pair;
    pair.A = a.reshaped({n, k});
    pair.B = std::move(b_single);
    pair.n_actual = n;
    return pair;
}

Molecule MoFlowModel::decode(const LatentVector& z, bool apply_correction) const {
    Molecule m = discretize(invert(z), config_.vocab);
    return apply_correction ? validity::correct(m) : m;
}

std::vector<LatentVector> MoFlowModel::sample_prior(std::size_t count, double temperature,
                                                    Rng& rng) const {
    if (temperature < 0.0) throw ConfigError("temperature must be >= 0");
    std::vector<LatentVector> out;
    out.reserve(count);
    for (std::size_t s = 0; s < count; ++s) {
        LatentVector z;
        z.z_atom = Tensor({atom_->latent_size()});
        z.z_bond = Tensor({bond_->latent_size()});
        for (std::size_t i = 0; i < z.z_atom.size(); ++i) {
            z.z_atom[i] = temperature * std::exp((*log_sigma_atom_)[i]) * rng.normal();
        }
        for (std::size_t i = 0; i < z.z_bond.size(); ++i) {
            z.z_bond[i] = temperature * std::exp((*log_sigma_bond_)[i]) * rng.normal();
        }
        out.push_back(std::move(z));
    }
    return out;
}

layers::Var MoFlowModel::nll(layers::Tape& t, const std::vector<GraphTensorPair>& batch,
                             layers::Mode mode) const {
    Batched staged = stage(t, batch);
    Terms terms = log_likelihood_terms(t, staged, mode);
    return ad::mul_scalar(ad::add(terms.bond_term, terms.atom_term),
                          -1.0 / static_cast<double>(batch.size()));
}

std::vector<double> MoFlowModel::train(const std::vector<Molecule>& dataset,
                                       const TrainConfig& tc) {
    if (dataset.empty()) throw ConfigError("training set is empty");
    std::vector<GraphTensorPair> onehot;
    onehot.reserve(dataset.size());
    for (const Molecule& m : dataset) onehot.push_back(encode_onehot(m, config_.vocab));

    Rng rng(tc.seed);
    Adam opt(params_, tc.learning_rate, tc.beta1, tc.beta2, tc.adam_eps);
    std::vector<std::size_t> order(dataset.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    std::vector<double> history;
    for (std::size_t epoch = 0; epoch < tc.epochs; ++epoch) {
        for (std::size_t i = order.size(); i > 1; --i) {
            std::swap(order[i - 1], order[rng.index(i)]);
        }
        double total = 0.0;
        for (std::size_t start = 0; start < order.size(); start += tc.batch_size) {
            const std::size_t end = std::min(start + tc.batch_size, order.size());
            std::vector<GraphTensorPair> batch;
            batch.reserve(end - start);
            for (std::size_t i = start; i < end; ++i) {
                batch.push_back(dequantize(onehot[order[i]], rng));
            }
            layers::Tape t;
            layers::Var loss = nll(t, batch, ad::Mode::Training);
            const double lv = loss.value().item();
            if (!std::isfinite(lv)) {
                throw NumericalError("non-finite training loss; first offender: " +
                                     t.first_nonfinite());
            }
            t.backward(loss);
            opt.step(t);
            total += lv * static_cast<double>(batch.size());
        }
        const double epoch_nll = total / static_cast<double>(order.size());
        history.push_back(epoch_nll);
        if (!tc.checkpoint_dir.empty()) {
            save(tc.checkpoint_dir + "/epoch_" + std::to_string(epoch + 1) + ".ckpt");
        }
        if (tc.on_epoch) tc.on_epoch(epoch + 1, epoch_nll);
    }
    return history;
}

// ------------------------------------------------------------- checkpoints

namespace {

constexpr char kMagic[8] = {'M', 'G', 'F', 'L', 'O', 'W', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void write_pod(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw IoError("checkpoint truncated");
    return v;
}

void write_string(std::ostream& os, const std::string& s) {
    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_string(std::istream& is) {
    const auto len = read_pod<std::uint32_t>(is);
    std::string s(len, '\0');
    is.read(s.data(), len);
    if (!is) throw IoError("checkpoint truncated");
    return s;
}

json config_to_json(const ModelConfig& c) {
    json j;
    j["atom_types"] = c.vocab.atom_types;
    j["n_max"] = c.vocab.n_max;
    j["valency"] = c.vocab.valency;
    j["bond_coupling_layers"] = c.bond_coupling_layers;
    j["squeeze_factor"] = c.squeeze_factor;
    j["conv_hidden"] = c.conv_hidden;
    j["atom_coupling_layers"] = c.atom_coupling_layers;
    j["gcn_dim"] = c.gcn_dim;
    j["mlp_hidden"] = c.mlp_hidden;
    j["bond_n_pad"] = c.bond().n_pad();
    return j;
}

ModelConfig config_from_json(const json& j) {
    ModelConfig c;
    c.vocab.atom_types = j.at("atom_types").get<std::vector<std::string>>();
    c.vocab.n_max = j.at("n_max").get<std::size_t>();
    c.vocab.valency = j.at("valency").get<std::map<std::string, int>>();
    c.bond_coupling_layers = j.at("bond_coupling_layers").get<std::size_t>();
    c.squeeze_factor = j.at("squeeze_factor").get<std::size_t>();
    c.conv_hidden = j.at("conv_hidden").get<std::vector<std::size_t>>();
    c.atom_coupling_layers = j.at("atom_coupling_layers").get<std::size_t>();
    c.gcn_dim = j.at("gcn_dim").get<std::size_t>();
    c.mlp_hidden = j.at("mlp_hidden").get<std::vector<std::size_t>>();
    return c;
}

}  // namespace

void MoFlowModel::save(const std::string& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open checkpoint for writing: " + path);
    os.write(kMagic, sizeof(kMagic));
    write_pod<std::uint32_t>(os, kVersion);
    write_string(os, config_to_json(config_).dump());
    write_pod<std::uint64_t>(os, params_.refs().size());
    for (const auto& ref : params_.refs()) {
        write_string(os, ref.name);
        const Tensor& v = *ref.value;
        write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(v.rank()));
        for (std::size_t d = 0; d < v.rank(); ++d) {
            write_pod<std::uint64_t>(os, v.extent(d));
        }
        os.write(reinterpret_cast<const char*>(v.data()),
                 static_cast<std::streamsize>(v.size() * sizeof(double)));
    }
    if (!os) throw IoError("failed writing checkpoint: " + path);
}

MoFlowModel MoFlowModel::load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open checkpoint: " + path);
    char magic[8];
    is.read(magic, sizeof(magic));
    if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
        throw IoError("not a model checkpoint: " + path);
    }
    const auto version = read_pod<std::uint32_t>(is);
    if (version != kVersion) {
        throw IoError("unsupported checkpoint version " + std::to_string(version));
    }
    ModelConfig config;
    try {
        config = config_from_json(json::parse(read_string(is)));
    } catch (const json::exception& e) {
        throw IoError(std::string("malformed checkpoint config: ") + e.what());
    }
    MoFlowModel model(std::move(config), 0);
    const auto n_blobs = read_pod<std::uint64_t>(is);
    for (std::uint64_t b = 0; b < n_blobs; ++b) {
        const std::string name = read_string(is);
        const auto rank = read_pod<std::uint32_t>(is);
        std::vector<std::size_t> shape(rank);
        for (auto& e : shape) e = read_pod<std::uint64_t>(is);
        Tensor* dst = model.params_.find(name);
        if (dst == nullptr) throw IoError("checkpoint has unknown parameter: " + name);
        if (dst->shape() != shape) {
            throw IoError("checkpoint shape mismatch for " + name + ": " + shape_str(shape) +
                          " vs " + shape_str(dst->shape()));
        }
        is.read(reinterpret_cast<char*>(dst->data()),
                static_cast<std::streamsize>(dst->size() * sizeof(double)));
        if (!is) throw IoError("checkpoint truncated in " + name);
    }
    return model;
}

}  // namespace moflow::model
