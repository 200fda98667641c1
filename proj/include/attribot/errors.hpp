#pragma once

#include <stdexcept>
#include <string>

namespace attribot {

// Base for all library errors so callers can catch everything from this
// library in one handler while still using std exception machinery.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// A backend was asked for something it does not support (attention export,
// embedding gradients, KV sessions, generation).
class CapabilityError : public Error {
public:
    explicit CapabilityError(const std::string& msg) : Error(msg) {}
};

// A proxy backend does not share the token-id space of the layout it was
// asked to score.
class TokenizerMismatchError : public Error {
public:
    explicit TokenizerMismatchError(const std::string& msg) : Error(msg) {}
};

} // namespace attribot
