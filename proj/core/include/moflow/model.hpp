#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "moflow/atomflow.hpp"
#include "moflow/bondflow.hpp"
#include "moflow/molgraph.hpp"

namespace moflow::model {

// paired latent codes; z_bond covers the padded spatial extent
struct LatentVector {
    Tensor z_atom;  // flat [n*k]
    Tensor z_bond;  // flat [c*n_pad*n_pad]
};

struct ModelConfig {
    VocabularyConfig vocab = VocabularyConfig::qm9();
    std::size_t bond_coupling_layers = 10;
    std::size_t squeeze_factor = 3;
    std::vector<std::size_t> conv_hidden = {128, 128};
    std::size_t atom_coupling_layers = 27;
    std::size_t gcn_dim = 64;
    std::vector<std::size_t> mlp_hidden = {128, 64};

    flow::BondFlowConfig bond() const;
    flow::AtomFlowConfig atom() const;
    void validate() const;
};

struct EncodeResult {
    LatentVector z;
    double log_likelihood = 0.0;
    double bond_term = 0.0;  // log P_B(B)
    double atom_term = 0.0;  // log P_{A|B}(A|B)
};

struct TrainConfig {
    std::size_t epochs = 10;
    std::size_t batch_size = 256;
    double learning_rate = 0.001;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    std::uint64_t seed = 1;
    std::string checkpoint_dir;  // empty: no per-epoch checkpoints
    std::function<void(std::size_t epoch, double nll)> on_epoch;
};

// Adam over the trainable tensors of a ParamBag; gradients looked up by
// parameter pointer on the tape of the current step
class Adam {
public:
    Adam(const layers::ParamBag& bag, double lr, double beta1 = 0.9, double beta2 = 0.999,
         double eps = 1e-8);
    void step(const layers::Tape& tape);

private:
    struct Slot {
        Tensor* param;
        Tensor m, v;
    };
    std::vector<Slot> slots_;
    double lr_, beta1_, beta2_, eps_;
    std::size_t t_ = 0;
};

// Composite flow over (A, B) pairs: exact likelihoods, one-pass decoding,
// temperature sampling, and MLE training.
class MoFlowModel {
public:
    MoFlowModel(ModelConfig config, std::uint64_t seed);

    EncodeResult encode(const GraphTensorPair& pair) const;
    // inverts both flows and discretizes; validity correction unless disabled
    Molecule decode(const LatentVector& z, bool apply_correction = true) const;
    // continuous inverse only (round-trip checks)
    GraphTensorPair invert(const LatentVector& z) const;

    std::vector<LatentVector> sample_prior(std::size_t count, double temperature,
                                           Rng& rng) const;

    // batch-mean NLL in nats/molecule over already-dequantized pairs
    layers::Var nll(layers::Tape& t, const std::vector<GraphTensorPair>& batch,
                    layers::Mode mode) const;

    // per-epoch mean training NLL; throws NumericalError on non-finite loss
    std::vector<double> train(const std::vector<Molecule>& dataset, const TrainConfig& tc);

    void save(const std::string& path) const;
    static MoFlowModel load(const std::string& path);

    const ModelConfig& config() const { return config_; }
    std::size_t atom_latent_size() const { return atom_->latent_size(); }
    std::size_t bond_latent_size() const { return bond_->latent_size(); }
    layers::ParamBag& params() { return params_; }
    const layers::ParamBag& params() const { return params_; }

private:
    friend class ModelAccess;
    struct Batched {
        layers::Var a;  // [b,n,k]
        layers::Var b;  // [b,c,n,n]
        flow::GraphCondition cond;
    };
    struct Terms {
        layers::Var bond_term;  // total over batch
        layers::Var atom_term;
        layers::Var z_bond;  // [b, c*n_pad*n_pad]
        layers::Var z_atom;  // [b, n*k]
    };
    Batched stage(layers::Tape& t, const std::vector<GraphTensorPair>& batch) const;
    Terms log_likelihood_terms(layers::Tape& t, const Batched& staged,
                               layers::Mode mode) const;

    ModelConfig config_;
    std::unique_ptr<flow::BondFlow> bond_;
    std::unique_ptr<flow::AtomFlow> atom_;
    // heap-held so ParamBag pointers survive moves of the model
    std::unique_ptr<Tensor> log_sigma_atom_;  // [n*k]
    std::unique_ptr<Tensor> log_sigma_bond_;  // [c*n_pad*n_pad]
    layers::ParamBag params_;
};

// hooks for white-box invertibility and logdet checks
class ModelAccess {
public:
    explicit ModelAccess(MoFlowModel& m) : m_(m) {}
    flow::BondFlow& bond() { return *m_.bond_; }
    flow::AtomFlow& atom() { return *m_.atom_; }
    Tensor& log_sigma_atom() { return *m_.log_sigma_atom_; }
    Tensor& log_sigma_bond() { return *m_.log_sigma_bond_; }

private:
    MoFlowModel& m_;
};

}  // namespace moflow::model
