#pragma once

#include <stdexcept>
#include <string>

namespace cpmark {

// File could not be read or written.
class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// File exists but its content is not what we expected (bad image, bad archive).
class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Caller broke a documented precondition (shape, range, color space).
class ContractViolation : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

// Bad configuration value or unknown configuration key.
class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(const std::string& what, std::string key = {})
        : std::runtime_error(what), key_(std::move(key)) {}

    const std::string& key() const noexcept { return key_; }

private:
    std::string key_;
};

// A loss term became non-finite during training.
class DivergenceError : public std::runtime_error {
public:
    DivergenceError(const std::string& what, std::string term, long long step)
        : std::runtime_error(what), term_(std::move(term)), step_(step) {}

    const std::string& term() const noexcept { return term_; }
    long long step() const noexcept { return step_; }

private:
    std::string term_;
    long long step_;
};

namespace detail {

inline void require(bool ok, const std::string& message) {
    if (!ok) throw ContractViolation(message);
}

}  // namespace detail
}  // namespace cpmark
