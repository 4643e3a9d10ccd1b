#pragma once

#include <cstdint>
#include <functional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "moflow/chemio.hpp"
#include "moflow/model.hpp"
#include "moflow/molgraph.hpp"

namespace moflow::eval {

// all fractions in [0,1]; raw counts kept for exact-ratio reporting
struct MetricsReport {
    std::size_t n_generated = 0;
    std::size_t n_valid = 0;
    std::size_t n_unique_valid = 0;    // distinct canonical keys among valid
    std::size_t n_novel_valid = 0;     // valid and outside the training set
    std::size_t n_nuv = 0;             // distinct, novel, valid
    std::size_t n_reconstructed = 0;
    std::size_t dataset_size = 0;

    double validity = 0.0;
    double uniqueness = 0.0;      // denominator: valid molecules
    double uniqueness_all = 0.0;  // denominator: all generated (ambiguity hedge)
    double novelty = 0.0;
    double nuv = 0.0;
    double reconstruction = 0.0;
};

MetricsReport metrics(const std::vector<Molecule>& generated,
                      const std::set<std::string>& train_keys,
                      std::size_t reconstructed_ok, std::size_t dataset_size);

// hashed-neighborhood bit set, radius 2
class Fingerprint {
public:
    explicit Fingerprint(std::size_t bits = 1024);
    void set(std::size_t bit);
    bool test(std::size_t bit) const;
    std::size_t bits() const { return bits_; }
    std::size_t popcount() const;
    const std::vector<std::uint64_t>& words() const { return words_; }

private:
    std::size_t bits_;
    std::vector<std::uint64_t> words_;
};

Fingerprint fingerprint(const Molecule& m, std::size_t bits = 1024, std::size_t radius = 2);
// |a & b| / |a | b|; 1 when both empty
double tanimoto(const Fingerprint& a, const Fingerprint& b);

// flat latent over both codes; layout [z_atom, z_bond]
Tensor flatten_latent(const model::LatentVector& z);
model::LatentVector unflatten_latent(const Tensor& flat, const model::MoFlowModel& m);

// decodes z + lx*X + ly*Y for every step; X,Y orthonormal random directions
std::vector<Molecule> grid_neighborhood(const model::MoFlowModel& m,
                                        const model::LatentVector& z,
                                        const std::vector<std::pair<double, double>>& steps,
                                        Rng& rng, bool apply_correction = true);

std::vector<Molecule> interpolate(const model::MoFlowModel& m, const model::LatentVector& z0,
                                  const model::LatentVector& z1, std::size_t count,
                                  bool apply_correction = true);

// latent -> hidden(18, relu) -> scalar; differentiable w.r.t. the input
class PropertyRegressor {
public:
    PropertyRegressor(std::size_t dim, std::size_t hidden, Rng& rng);

    double predict(const Tensor& z_flat) const;
    Tensor input_gradient(const Tensor& z_flat) const;
    // least-squares fit by Adam; returns final mean squared error
    double fit(const std::vector<Tensor>& inputs, const std::vector<double>& targets,
               std::size_t epochs, double lr, std::uint64_t seed);
    std::size_t dim() const { return w1_.extent(0); }

private:
    layers::Var evaluate(layers::Tape& t, layers::Var z) const;
    Tensor w1_, b1_, w2_, b2_;
};

struct TrajectoryPoint {
    Molecule molecule;
    double score = 0.0;  // regressor prediction at this latent
};

// K gradient-ascent steps z' = z + lambda * dy/dz; decodes each step
std::vector<TrajectoryPoint> optimize_property(const model::MoFlowModel& m,
                                               const model::LatentVector& z,
                                               const PropertyRegressor& r, double lambda,
                                               std::size_t steps,
                                               bool apply_correction = true);

using PropertyFn = std::function<double(const Molecule&)>;

struct ConstrainedResult {
    bool success = false;
    double improvement = 0.0;
    double similarity = 0.0;
    Molecule best;
    std::vector<Molecule> candidates;  // the K decoded steps, in order
};

// success iff some decoded candidate differs from the seed, improves the
// property, and stays within tanimoto >= delta
ConstrainedResult constrained_optimize(const model::MoFlowModel& m, const Molecule& seed,
                                       const PropertyFn& property, const PropertyRegressor& r,
                                       double delta, double lambda, std::size_t steps);

// built-in surrogate properties: heavy-atoms, rings, bond-order-sum
double heavy_atom_count(const Molecule& m);
double ring_count(const Molecule& m);  // cycle rank: bonds - atoms + components
double bond_order_sum(const Molecule& m);
PropertyFn property_fn(const std::string& name);  // throws ConfigError on unknown name

}  // namespace moflow::eval
