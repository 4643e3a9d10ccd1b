#include "moflow/validity.hpp"

#include <algorithm>

#include "moflow/errors.hpp"

namespace moflow::validity {

namespace {

int base_valency(const std::string& element) {
    if (element == "C") return 4;
    if (element == "N") return 3;
    if (element == "O") return 2;
    if (element == "F") return 1;
    if (element == "P") return 5;
    if (element == "S") return 6;
    if (element == "Cl") return 1;
    if (element == "Br") return 1;
    if (element == "I") return 1;
    throw VocabularyError("no valency entry for element '" + element + "'");
}

}  // namespace

int valency_sum(const Molecule& m, std::size_t i) {
    if (i >= m.atoms.size()) throw DimensionError("valency_sum: atom index out of range");
    int s = 0;
    for (const Bond& b : m.bonds) {
        if (b.i == i || b.j == i) s += b.order;
    }
    return s;
}

int valency_allowance(const Atom& a) {
    int ch = 0;
    if (a.charge == 1 && (a.element == "N" || a.element == "S" || a.element == "O")) ch = 1;
    return base_valency(a.element) + ch;
}

ValencyReport check_valency(const Molecule& m) {
    ValencyReport r;
    r.order_sums.resize(m.atoms.size());
    r.allowances.resize(m.atoms.size());
    for (std::size_t i = 0; i < m.atoms.size(); ++i) {
        r.order_sums[i] = valency_sum(m, i);
        r.allowances[i] = valency_allowance(m.atoms[i]);
        if (r.order_sums[i] > r.allowances[i]) {
            r.violations.push_back(i);
            r.valid = false;
        }
    }
    return r;
}

Molecule largest_component(const Molecule& m) {
    if (m.empty()) return m;
    std::vector<int> comp(m.atoms.size(), -1);
    std::vector<std::vector<std::size_t>> members;
    for (std::size_t seed = 0; seed < m.atoms.size(); ++seed) {
        if (comp[seed] >= 0) continue;
        int id = static_cast<int>(members.size());
        members.emplace_back();
        std::vector<std::size_t> stack{seed};
        comp[seed] = id;
        while (!stack.empty()) {
            std::size_t a = stack.back();
            stack.pop_back();
            members[id].push_back(a);
            for (std::size_t nb : m.neighbors(a)) {
                if (comp[nb] < 0) {
                    comp[nb] = id;
                    stack.push_back(nb);
                }
            }
        }
        std::sort(members[id].begin(), members[id].end());
    }
    // components are discovered in order of their lowest atom index, so a
    // strict size comparison implements the tie rule
    std::size_t best = 0;
    for (std::size_t i = 1; i < members.size(); ++i) {
        if (members[i].size() > members[best].size()) best = i;
    }
    std::vector<std::size_t> old_to_new(m.atoms.size(), static_cast<std::size_t>(-1));
    Molecule out;
    for (std::size_t a : members[best]) {
        old_to_new[a] = out.atoms.size();
        out.atoms.push_back(m.atoms[a]);
    }
    for (const Bond& b : m.bonds) {
        if (comp[b.i] == static_cast<int>(best)) {
            out.add_bond(old_to_new[b.i], old_to_new[b.j], b.order);
        }
    }
    return out;
}

Molecule correct(const Molecule& m) {
    Molecule cur = m;
    while (true) {
        ValencyReport r = check_valency(cur);
        if (r.valid) return largest_component(cur);
        std::size_t atom = r.violations.front();
        // bond with the largest order; ties broken by the lowest partner index
        std::size_t best_idx = static_cast<std::size_t>(-1);
        int best_order = 0;
        std::size_t best_partner = 0;
        for (std::size_t bi = 0; bi < cur.bonds.size(); ++bi) {
            const Bond& b = cur.bonds[bi];
            if (b.i != atom && b.j != atom) continue;
            std::size_t partner = (b.i == atom) ? b.j : b.i;
            if (b.order > best_order ||
                (b.order == best_order && partner < best_partner)) {
                best_order = b.order;
                best_partner = partner;
                best_idx = bi;
            }
        }
        // a violating atom always has at least one bond (sum > allowance >= 0)
        if (best_idx == static_cast<std::size_t>(-1)) {
            throw NumericalError("valency violation without incident bonds");
        }
        if (cur.bonds[best_idx].order > 1) {
            cur.bonds[best_idx].order -= 1;
        } else {
            cur.bonds.erase(cur.bonds.begin() + static_cast<std::ptrdiff_t>(best_idx));
        }
    }
}

}  // namespace moflow::validity
