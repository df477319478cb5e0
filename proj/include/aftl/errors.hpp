#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace aftl {

/// Root of every error thrown by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Invalid or incompatible configuration (layer specs, partition plans, schedules).
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Tensor shape does not fit the layer it is fed to.
class ShapeError : public Error {
public:
    ShapeError(const std::string& what, std::ptrdiff_t layer_index = -1)
        : Error(layer_index >= 0 ? "layer " + std::to_string(layer_index) + ": " + what : what),
          layer_index_(layer_index) {}

    std::ptrdiff_t layer_index() const noexcept { return layer_index_; }

private:
    std::ptrdiff_t layer_index_;
};

/// Out-of-order, stale or mismatched protocol artefacts (tapes, feedback, messages).
class ProtocolError : public Error {
public:
    using Error::Error;
};

/// A participant did not upload in the current round.
class StragglerError : public ProtocolError {
public:
    explicit StragglerError(int client_id)
        : ProtocolError("missing feature upload from client " + std::to_string(client_id)),
          client_id_(client_id) {}

    int client_id() const noexcept { return client_id_; }

private:
    int client_id_;
};

/// Non-finite values where finite ones are required.
class NumericError : public Error {
public:
    using Error::Error;
};

/// Arguments outside an operation's domain (empty batches, out-of-range labels).
class DomainError : public Error {
public:
    using Error::Error;
};

/// Malformed file or wire payload; carries the byte offset where parsing failed.
class FormatError : public Error {
public:
    FormatError(const std::string& what, std::size_t offset)
        : Error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}

    std::size_t offset() const noexcept { return offset_; }

private:
    std::size_t offset_;
};

}  // namespace aftl
