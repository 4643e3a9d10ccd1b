#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace moflow {

// Shape or extent mismatch between tensors.
struct DimensionError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Molecule does not fit into the configured n_max.
struct CapacityError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Atom type outside the configured vocabulary.
struct VocabularyError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Non-finite values, singular matrices, diverged training.
struct NumericalError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// SMILES syntax error; carries the byte offset of the offending character.
class ParseError : public std::runtime_error {
public:
    ParseError(const std::string& what, std::size_t offset)
        : std::runtime_error(what + " (at byte " + std::to_string(offset) + ")"),
          offset_(offset) {}

    std::size_t offset() const { return offset_; }

private:
    std::size_t offset_;
};

}  // namespace moflow
