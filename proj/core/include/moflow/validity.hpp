#pragma once

#include <cstddef>
#include <vector>

#include "moflow/molgraph.hpp"

namespace moflow::validity {

struct ValencyReport {
    std::vector<int> order_sums;
    std::vector<int> allowances;
    std::vector<std::size_t> violations;  // ascending
    bool valid = true;
};

// total bond order incident to atom i
int valency_sum(const Molecule& m, std::size_t i);

// valency table value plus the formal-charge allowance
// (Ch = 1 only for N+, S+, O+)
int valency_allowance(const Atom& a);

ValencyReport check_valency(const Molecule& m);

// component with the most atoms; ties keep the one containing the lowest
// atom index; atoms re-indexed preserving relative order
Molecule largest_component(const Molecule& m);

// deterministic post-hoc correction: repeatedly decrement the largest-order
// bond of the first violating atom, then extract the largest component
Molecule correct(const Molecule& m);

}  // namespace moflow::validity
