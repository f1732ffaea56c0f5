#pragma once

#include <stdexcept>
#include <string>

namespace nfilab {

/// Base for every error thrown by the library.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct InvalidMode : Error { using Error::Error; };
struct NonFiniteLogit : Error { using Error::Error; };
struct DimensionTooSmall : Error { using Error::Error; };
struct NotPrime : Error { using Error::Error; };
struct NotAProbabilityVector : Error { using Error::Error; };
struct TooLarge : Error { using Error::Error; };
struct NoConvergence : Error { using Error::Error; };
struct InconsistentK : Error { using Error::Error; };
struct DivergedNonFinite : Error { using Error::Error; };

struct ParseError : Error {
  ParseError(std::size_t line, const std::string& what)
      : Error("line " + std::to_string(line) + ": " + what), line(line) {}
  std::size_t line;
};

/// Configuration problem; `field` is a dotted path into the config document.
struct ConfigError : Error {
  ConfigError(std::string field, const std::string& what)
      : Error(field + ": " + what), field(std::move(field)) {}
  std::string field;
};

}  // namespace nfilab
