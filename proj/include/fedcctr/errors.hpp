#pragma once

#include <stdexcept>
#include <string>

namespace fedcctr {

// Error taxonomy shared by all modules. Everything derives from std::runtime_error
// so callers can catch coarsely; the CLI maps ConfigError to exit code 2 and the
// rest to 3.

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error("config error: " + msg) {}
};

struct DimensionError : std::runtime_error {
    explicit DimensionError(const std::string& msg) : std::runtime_error("dimension error: " + msg) {}
};

struct VocabularyError : std::runtime_error {
    explicit VocabularyError(const std::string& msg) : std::runtime_error("vocabulary error: " + msg) {}
};

struct EmptySequenceError : std::runtime_error {
    explicit EmptySequenceError(const std::string& msg) : std::runtime_error("empty sequence: " + msg) {}
};

struct DegenerateVectorError : std::runtime_error {
    explicit DegenerateVectorError(const std::string& msg) : std::runtime_error("degenerate vector: " + msg) {}
};

struct EvaluationError : std::runtime_error {
    explicit EvaluationError(const std::string& msg) : std::runtime_error("evaluation error: " + msg) {}
};

struct TransportError : std::runtime_error {
    explicit TransportError(const std::string& msg) : std::runtime_error("transport error: " + msg) {}
};

struct AugmentationError : std::runtime_error {
    explicit AugmentationError(const std::string& msg) : std::runtime_error("augmentation error: " + msg) {}
};

struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error("io error: " + msg) {}
};

}  // namespace fedcctr
