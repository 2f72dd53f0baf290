#pragma once

#include <stdexcept>
#include <string>

namespace canlab {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Tensor shape incompatibility; message names the op and offending dims.
struct ShapeError : Error { using Error::Error; };

// NaN/Inf produced by a forward op on finite inputs.
struct NumericError : Error { using Error::Error; };

// API misuse (e.g. backward before forward).
struct ProtocolError : Error { using Error::Error; };

struct ConfigError : Error { using Error::Error; };
struct InputError : Error { using Error::Error; };
struct RangeError : Error { using Error::Error; };

// Unknown or out-of-bounds NeuronId.
struct AddressError : Error { using Error::Error; };

struct TrainingError : Error { using Error::Error; };

// Missing or stale pipeline artifact.
struct DependencyError : Error { using Error::Error; };

// Artifact config-hash mismatch.
struct ProvenanceError : Error { using Error::Error; };

// Oracle enumeration budget exhausted.
struct OracleAbort : Error { using Error::Error; };

} // namespace canlab
