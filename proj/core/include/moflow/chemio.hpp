#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "moflow/molgraph.hpp"

namespace moflow::chem {

struct SmilesToken {
    enum class Kind { Atom, BracketAtom, Bond, BranchOpen, BranchClose, RingClosure };
    Kind kind;
    std::size_t offset = 0;  // byte offset in the input
    std::string symbol;      // Atom / BracketAtom
    int charge = 0;          // BracketAtom
    int order = 0;           // Bond
    int ring_id = 0;         // RingClosure
};

std::vector<SmilesToken> tokenize_smiles(const std::string& s);

// Kekulized subset: organic-subset atoms, bracket atoms with charge,
// bonds {-,=,#}, branches, ring closures 1-9. Throws ParseError.
Molecule parse_smiles(const std::string& s);

// Requires a nonempty connected molecule; round-trips through parse_smiles
// up to isomorphism.
std::string write_smiles(const Molecule& m);

// Byte string equal exactly for isomorphic molecules: iterative neighborhood
// refinement plus exhaustive tie-breaking over symmetric orbits.
std::string canonical_key(const Molecule& m);

// dataset files: one SMILES per line, '#' header/comment lines skipped
std::vector<Molecule> load_smiles_file(const std::string& path);
void save_smiles_file(const std::string& path, const std::vector<std::string>& lines);

}  // namespace moflow::chem
