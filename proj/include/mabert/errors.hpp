#pragma once

#include <stdexcept>
#include <string>

namespace mabert {

// Shape or extent mismatch between operands.
class DimensionError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// A padding mask that is all-zero on some row, or not end-padded.
class InvalidMaskError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class PatternError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class VocabularyError : public std::out_of_range {
public:
    using std::out_of_range::out_of_range;
};

class LengthError : public std::length_error {
public:
    using std::length_error::length_error;
};

// Violated precondition of an operation (non-scalar loss, non-positive step size, ...).
class ContractError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Training diverged (non-finite loss) or the data produced a degenerate batch.
class TrainingError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace mabert
