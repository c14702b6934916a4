#ifndef SER_ERROR_HPP
#define SER_ERROR_HPP

#include <stdexcept>
#include <string>

namespace ser {

// Base class for all toolkit errors. Subclass choice drives the CLI exit
// code: errors caused by user input or data map to exit 2, everything else
// is an internal failure (exit 1).
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Malformed container/header while decoding audio.
class DecodeError : public Error {
public:
    using Error::Error;
};

// Valid container but an encoding we do not handle (non-PCM, non-16-bit).
class UnsupportedFormatError : public Error {
public:
    using Error::Error;
};

// Invalid configuration value (MfccConfig invariants, experiment config).
class ConfigError : public Error {
public:
    using Error::Error;
};

// Unknown (corpus, emotion) pair or unknown code in an otherwise valid name.
class MappingError : public Error {
public:
    using Error::Error;
};

// Filename does not follow the corpus convention.
class ParseError : public Error {
public:
    using Error::Error;
};

// Experiment protocol violation (same corpus on both sides, URDU in a
// sentence-independent run, empty test set, ...).
class ProtocolError : public Error {
public:
    using Error::Error;
};

// Tensor or layer dimension mismatch.
class ShapeError : public Error {
public:
    using Error::Error;
};

// Class label outside the declared range.
class LabelError : public Error {
public:
    using Error::Error;
};

// Backward called without a matching forward.
class CacheError : public Error {
public:
    using Error::Error;
};

// Required feature matrices missing from the cache.
class CacheMissError : public Error {
public:
    using Error::Error;
};

// Filesystem problem (missing directory, unreadable file).
class IoError : public Error {
public:
    using Error::Error;
};

} // namespace ser

#endif
