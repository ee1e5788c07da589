#pragma once

#include <stdexcept>
#include <string>

namespace dgmlab {

// Base class for all library errors. Specific types carry their name in
// what() so callers and logs can tell them apart without RTTI.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

#define DGMLAB_DEFINE_ERROR(Name)                                          \
    struct Name : Error {                                                  \
        explicit Name(const std::string& msg) : Error(#Name ": " + msg) {} \
    }

DGMLAB_DEFINE_ERROR(ShapeMismatch);
DGMLAB_DEFINE_ERROR(NonFiniteValue);
DGMLAB_DEFINE_ERROR(NonFiniteGradient);
DGMLAB_DEFINE_ERROR(GraphNotEvaluated);
DGMLAB_DEFINE_ERROR(InvalidSize);
DGMLAB_DEFINE_ERROR(IoError);
DGMLAB_DEFINE_ERROR(FormatError);
DGMLAB_DEFINE_ERROR(Diverged);
DGMLAB_DEFINE_ERROR(PlanShapeMismatch);
DGMLAB_DEFINE_ERROR(CardinalityViolation);
DGMLAB_DEFINE_ERROR(InapplicableError);
DGMLAB_DEFINE_ERROR(MissingBaseline);
DGMLAB_DEFINE_ERROR(InvalidFraction);
DGMLAB_DEFINE_ERROR(MissingArtifact);
DGMLAB_DEFINE_ERROR(DegenerateEndpoints);

#undef DGMLAB_DEFINE_ERROR

// Configuration errors carry the offending line (1-based) so the CLI can
// point at it.
struct ConfigError : Error {
    int line;
    int column;
    ConfigError(const std::string& kind, const std::string& msg, int line_, int column_)
        : Error(kind + " at line " + std::to_string(line_) + ", column " +
                std::to_string(column_) + ": " + msg),
          line(line_),
          column(column_) {}
};

struct ParseError : ConfigError {
    ParseError(const std::string& msg, int line, int column)
        : ConfigError("ParseError", msg, line, column) {}
};

struct UnknownKey : ConfigError {
    UnknownKey(const std::string& msg, int line, int column)
        : ConfigError("UnknownKey", msg, line, column) {}
};

struct TypeError : ConfigError {
    TypeError(const std::string& msg, int line, int column)
        : ConfigError("TypeError", msg, line, column) {}
};

}  // namespace dgmlab
