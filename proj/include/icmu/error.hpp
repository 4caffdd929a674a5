#pragma once

#include <stdexcept>
#include <string>

namespace icmu {

// Base for all errors raised by this library.
class Error : public std::runtime_error {
public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor dimension disagreements.
class ShapeError : public Error {
public:
  using Error::Error;
};

// Out-of-range ids/indices (vocabulary, class targets, gather).
class IndexError : public Error {
public:
  using Error::Error;
};

// Domain invariant violated by a value (degenerate box, bad mask entry, ...).
class ValidationError : public Error {
public:
  using Error::Error;
};

// API misuse: a precondition the caller is responsible for.
class ContractError : public Error {
public:
  using Error::Error;
};

// Malformed external input (files).
class ParseError : public Error {
public:
  using Error::Error;
};

}  // namespace icmu
