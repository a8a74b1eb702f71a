#pragma once

#include <stdexcept>
#include <string>

namespace xworld {

// Error taxonomy surfaced through the C API as error codes.
struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& m) : std::runtime_error(m) {}
};
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& m) : std::runtime_error(m) {}
};
struct VocabularyError : std::runtime_error {
    explicit VocabularyError(const std::string& m) : std::runtime_error(m) {}
};
struct CacheError : std::runtime_error {
    explicit CacheError(const std::string& m) : std::runtime_error(m) {}
};
struct StateError : std::runtime_error {
    explicit StateError(const std::string& m) : std::runtime_error(m) {}
};
struct RequestError : std::runtime_error {
    explicit RequestError(const std::string& m) : std::runtime_error(m) {}
};
struct InvariantError : std::runtime_error {
    explicit InvariantError(const std::string& m) : std::runtime_error(m) {}
};
struct DivergenceError : std::runtime_error {
    explicit DivergenceError(const std::string& m) : std::runtime_error(m) {}
};

}  // namespace xworld
