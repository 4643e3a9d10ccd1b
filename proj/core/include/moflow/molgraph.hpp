#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "moflow/rng.hpp"
#include "moflow/tensor.hpp"

namespace moflow {

struct Atom {
    std::string element;
    int charge = 0;

    bool operator==(const Atom&) const = default;
};

// undirected typed bond, i < j, order in {1,2,3}
struct Bond {
    std::size_t i = 0;
    std::size_t j = 0;
    int order = 1;

    bool operator==(const Bond&) const = default;
    auto operator<=>(const Bond&) const = default;
};

// Discrete labeled molecular graph; the chemical ground truth.
struct Molecule {
    std::vector<Atom> atoms;
    std::vector<Bond> bonds;  // kept sorted, unique per pair

    void add_atom(std::string element, int charge = 0);
    // throws DimensionError on self-bonds or duplicate pairs
    void add_bond(std::size_t i, std::size_t j, int order);
    std::optional<int> bond_order(std::size_t i, std::size_t j) const;
    std::vector<std::size_t> neighbors(std::size_t i) const;
    bool empty() const { return atoms.empty(); }

    bool operator==(const Molecule&) const = default;
};

// Atom vocabulary plus tensor geometry. Atom-type strings are the element
// symbol optionally suffixed with '+' or '-' (e.g. "N+").
struct VocabularyConfig {
    std::vector<std::string> atom_types;  // without the virtual type
    std::size_t n_max = 9;
    std::map<std::string, int> valency;  // element -> max bond-order sum

    static VocabularyConfig qm9();
    static VocabularyConfig zinc250k();

    std::size_t k() const { return atom_types.size() + 1; }  // + virtual, last
    static constexpr std::size_t c() { return 4; }           // 3 orders + virtual, last
    static constexpr std::size_t virtual_bond_channel() { return 3; }
    std::size_t virtual_atom_index() const { return atom_types.size(); }

    // index into atom_types, or throws VocabularyError
    std::size_t type_index(const Atom& a) const;
    Atom type_atom(std::size_t index) const;
    void validate() const;
};

std::string atom_type_string(const Atom& a);

// Continuous atom-matrix / bond-tensor pair consumed by the flows.
struct GraphTensorPair {
    Tensor A;  // [n_max, k]
    Tensor B;  // [c, n_max, n_max]
    std::size_t n_actual = 0;
};

GraphTensorPair encode_onehot(const Molecule& m, const VocabularyConfig& v);
// independent additive noise U[0, 0.6) on every entry of A and B
GraphTensorPair dequantize(const GraphTensorPair& t, Rng& rng);
// symmetrize B, resolve rows/fibers by argmax, drop virtual entries
Molecule discretize(const GraphTensorPair& t, const VocabularyConfig& v);

// argmax-resolved one-hot copy of a bond tensor (symmetrized first);
// used to derive the discrete structure for graphnorm
Tensor resolve_bond_onehot(const Tensor& B);

}  // namespace moflow
