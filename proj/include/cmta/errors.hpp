#pragma once

#include <stdexcept>
#include <string>

namespace cmta {

// Shape or dimension disagreement between tensors.
struct ShapeError : std::invalid_argument {
    explicit ShapeError(const std::string& msg) : std::invalid_argument(msg) {}
};

// A caller broke an operation's precondition (non-scalar loss, even kernel, ...).
struct ContractError : std::logic_error {
    explicit ContractError(const std::string& msg) : std::logic_error(msg) {}
};

// Input value outside an operation's mathematical domain.
struct DomainError : std::domain_error {
    explicit DomainError(const std::string& msg) : std::domain_error(msg) {}
};

// Malformed on-disk data; carries the byte offset at which parsing failed.
struct FormatError : std::runtime_error {
    FormatError(const std::string& msg, std::size_t byte_offset)
        : std::runtime_error(msg + " (byte offset " + std::to_string(byte_offset) + ")"),
          offset(byte_offset) {}
    std::size_t offset;
};

// Structurally valid data that violates a cohort/record invariant.
struct IntegrityError : std::runtime_error {
    explicit IntegrityError(const std::string& msg) : std::runtime_error(msg) {}
};

// A statistic is undefined for the given sample (no comparable pairs, zero variance).
struct StatisticError : std::runtime_error {
    explicit StatisticError(const std::string& msg) : std::runtime_error(msg) {}
};

// Requested discretization cannot be built from the sample.
struct BinningError : std::runtime_error {
    explicit BinningError(const std::string& msg) : std::runtime_error(msg) {}
};

// Training produced a non-finite loss; carries enough context for a diagnostic dump.
struct TrainingDiverged : std::runtime_error {
    TrainingDiverged(const std::string& msg, std::size_t fold_, std::size_t epoch_,
                     std::string patient_id_)
        : std::runtime_error(msg), fold(fold_), epoch(epoch_), patient_id(std::move(patient_id_)) {}
    std::size_t fold;
    std::size_t epoch;
    std::string patient_id;
};

}  // namespace cmta
