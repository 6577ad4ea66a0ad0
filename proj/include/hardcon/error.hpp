#pragma once

#include <stdexcept>
#include <string>

namespace hardcon {

/// Caller broke a precondition (shape mismatch, empty input, bad index).
class ContractViolation : public std::logic_error {
public:
    explicit ContractViolation(const std::string& what) : std::logic_error(what) {}
};

/// Input outside the mathematical domain of an operation (e.g. log of a non-positive value).
class DomainError : public std::domain_error {
public:
    explicit DomainError(const std::string& what) : std::domain_error(what) {}
};

/// Token or operation id not present in a vocabulary.
class VocabularyError : public std::out_of_range {
public:
    explicit VocabularyError(const std::string& what) : std::out_of_range(what) {}
};

class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

/// Missing, unreadable or malformed data/annotation/checkpoint files.
class DataError : public std::runtime_error {
public:
    explicit DataError(const std::string& what) : std::runtime_error(what) {}
};

/// Training produced a non-finite loss.
class NumericalError : public std::runtime_error {
public:
    explicit NumericalError(const std::string& what) : std::runtime_error(what) {}
};

namespace detail {

inline void require(bool condition, const char* message) {
    if (!condition) {
        throw ContractViolation(message);
    }
}

inline void require(bool condition, const std::string& message) {
    if (!condition) {
        throw ContractViolation(message);
    }
}

} // namespace detail

} // namespace hardcon
