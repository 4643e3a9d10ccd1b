#include "moflow/molgraph.hpp"

#include <algorithm>

#include "moflow/errors.hpp"

namespace moflow {

void Molecule::add_atom(std::string element, int charge) {
    atoms.push_back(Atom{std::move(element), charge});
}

void Molecule::add_bond(std::size_t i, std::size_t j, int order) {
    if (i == j) throw DimensionError("self-bond not allowed");
    if (i >= atoms.size() || j >= atoms.size()) throw DimensionError("bond index out of range");
    if (order < 1 || order > 3) throw DimensionError("bond order must be 1..3");
    if (i > j) std::swap(i, j);
    if (bond_order(i, j)) throw DimensionError("duplicate bond");
    Bond b{i, j, order};
    bonds.insert(std::lower_bound(bonds.begin(), bonds.end(), b), b);
}

std::optional<int> Molecule::bond_order(std::size_t i, std::size_t j) const {
    if (i > j) std::swap(i, j);
    for (const Bond& b : bonds) {
        if (b.i == i && b.j == j) return b.order;
    }
    return std::nullopt;
}

std::vector<std::size_t> Molecule::neighbors(std::size_t i) const {
    std::vector<std::size_t> out;
    for (const Bond& b : bonds) {
        if (b.i == i) out.push_back(b.j);
        if (b.j == i) out.push_back(b.i);
    }
    std::sort(out.begin(), out.end());
    return out;
}

namespace {

const std::map<std::string, int>& default_valency() {
    static const std::map<std::string, int> table = {
        {"C", 4}, {"N", 3}, {"O", 2}, {"F", 1},  {"P", 5},
        {"S", 6}, {"Cl", 1}, {"Br", 1}, {"I", 1},
    };
    return table;
}

std::string base_element(const std::string& type) {
    if (!type.empty() && (type.back() == '+' || type.back() == '-')) {
        return type.substr(0, type.size() - 1);
    }
    return type;
}

}  // namespace

std::string atom_type_string(const Atom& a) {
    if (a.charge > 0) return a.element + "+";
    if (a.charge < 0) return a.element + "-";
    return a.element;
}

VocabularyConfig VocabularyConfig::qm9() {
    VocabularyConfig v;
    v.atom_types = {"C", "N", "O", "F"};
    v.n_max = 9;
    for (const auto& t : v.atom_types) v.valency[t] = default_valency().at(t);
    return v;
}

VocabularyConfig VocabularyConfig::zinc250k() {
    VocabularyConfig v;
    v.atom_types = {"C", "N", "O", "F", "P", "S", "Cl", "Br", "I"};
    v.n_max = 38;
    for (const auto& t : v.atom_types) v.valency[t] = default_valency().at(t);
    return v;
}

std::size_t VocabularyConfig::type_index(const Atom& a) const {
    std::string key = atom_type_string(a);
    for (std::size_t i = 0; i < atom_types.size(); ++i) {
        if (atom_types[i] == key) return i;
    }
    throw VocabularyError("atom type '" + key + "' not in vocabulary");
}

Atom VocabularyConfig::type_atom(std::size_t index) const {
    const std::string& t = atom_types.at(index);
    Atom a;
    a.element = base_element(t);
    if (!t.empty() && t.back() == '+') a.charge = 1;
    if (!t.empty() && t.back() == '-') a.charge = -1;
    return a;
}

void VocabularyConfig::validate() const {
    if (n_max < 1) throw ConfigError("n_max must be >= 1");
    if (atom_types.empty()) throw ConfigError("empty atom vocabulary");
    for (const auto& t : atom_types) {
        if (!valency.count(base_element(t))) {
            throw ConfigError("valency table does not cover atom type '" + t + "'");
        }
    }
}

GraphTensorPair encode_onehot(const Molecule& m, const VocabularyConfig& v) {
    if (m.atoms.size() > v.n_max) {
        throw CapacityError("molecule has " + std::to_string(m.atoms.size()) +
                            " atoms, n_max is " + std::to_string(v.n_max));
    }
    const std::size_t n = v.n_max, k = v.k(), c = VocabularyConfig::c();
    GraphTensorPair t;
    t.A = Tensor({n, k});
    t.B = Tensor({c, n, n});
    t.n_actual = m.atoms.size();
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t type = (i < m.atoms.size()) ? v.type_index(m.atoms[i])
                                                : v.virtual_atom_index();
        t.A.at2(i, type) = 1.0;
    }
    // all pairs start at the virtual no-bond channel, diagonal included
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            t.B.at3(VocabularyConfig::virtual_bond_channel(), i, j) = 1.0;
        }
    }
    for (const Bond& b : m.bonds) {
        std::size_t ch = static_cast<std::size_t>(b.order - 1);
        t.B.at3(VocabularyConfig::virtual_bond_channel(), b.i, b.j) = 0.0;
        t.B.at3(VocabularyConfig::virtual_bond_channel(), b.j, b.i) = 0.0;
        t.B.at3(ch, b.i, b.j) = 1.0;
        t.B.at3(ch, b.j, b.i) = 1.0;
    }
    return t;
}

GraphTensorPair dequantize(const GraphTensorPair& t, Rng& rng) {
    GraphTensorPair out = t;
    for (std::size_t i = 0; i < out.A.size(); ++i) out.A[i] += 0.6 * rng.uniform();
    for (std::size_t i = 0; i < out.B.size(); ++i) out.B[i] += 0.6 * rng.uniform();
    return out;
}

namespace {

Tensor symmetrized(const Tensor& B) {
    Tensor s = B;
    const std::size_t c = B.extent(0), n = B.extent(1);
    for (std::size_t l = 0; l < c; ++l) {
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < n; ++j) {
                s.at3(l, i, j) = 0.5 * (B.at3(l, i, j) + B.at3(l, j, i));
            }
        }
    }
    return s;
}

// argmax with ties broken by the lowest index
std::size_t argmax_fiber(const Tensor& B, std::size_t i, std::size_t j) {
    std::size_t best = 0;
    for (std::size_t l = 1; l < B.extent(0); ++l) {
        if (B.at3(l, i, j) > B.at3(best, i, j)) best = l;
    }
    return best;
}

}  // namespace

Molecule discretize(const GraphTensorPair& t, const VocabularyConfig& v) {
    const std::size_t n = t.A.extent(0), k = t.A.extent(1);
    if (k != v.k() || t.B.extent(1) != n) {
        throw DimensionError("discretize: tensor shape does not match vocabulary");
    }
    Tensor bs = symmetrized(t.B);
    // map tensor row -> molecule atom index (or npos for virtual)
    std::vector<std::size_t> row_atom(n, static_cast<std::size_t>(-1));
    Molecule m;
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t best = 0;
        for (std::size_t x = 1; x < k; ++x) {
            if (t.A.at2(i, x) > t.A.at2(i, best)) best = x;
        }
        if (best != v.virtual_atom_index()) {
            row_atom[i] = m.atoms.size();
            m.atoms.push_back(v.type_atom(best));
        }
    }
    for (std::size_t i = 0; i < n; ++i) {
        if (row_atom[i] == static_cast<std::size_t>(-1)) continue;
        for (std::size_t j = i + 1; j < n; ++j) {
            if (row_atom[j] == static_cast<std::size_t>(-1)) continue;
            std::size_t ch = argmax_fiber(bs, i, j);
            if (ch != VocabularyConfig::virtual_bond_channel()) {
                m.add_bond(row_atom[i], row_atom[j], static_cast<int>(ch) + 1);
            }
        }
    }
    return m;
}

Tensor resolve_bond_onehot(const Tensor& B) {
    Tensor bs = symmetrized(B);
    const std::size_t c = B.extent(0), n = B.extent(1);
    Tensor out({c, n, n});
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            out.at3(argmax_fiber(bs, i, j), i, j) = 1.0;
        }
    }
    return out;
}

}  // namespace moflow
