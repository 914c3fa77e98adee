#pragma once

#include <stdexcept>
#include <string>

namespace urec {

// Coarse error categories. The CLI maps these onto exit codes
// (config -> 2, data-ish -> 3, training/numeric -> 4).
enum class ErrorKind {
  config,
  data,        // I/O, missing files, bad bundles
  schema,      // header/column mismatch
  validation,  // well-formed input violating a value constraint
  dimension,   // shape mismatch between tensors
  numeric,     // NaN/Inf where finite values are required
  index,       // out-of-range index
  contract,    // API misuse (missing grad, impure batch, ...)
  training,    // divergence during optimization
  corruption,  // failed checkpoint hash / truncated file
  vocabulary,  // token not present in a closed vocabulary
  partition,   // impossible forget/retain split
  metric,      // undefined metric (e.g. single-class AUC)
};

class Error : public std::runtime_error {
public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

private:
  ErrorKind kind_;
};

[[noreturn]] inline void raise(ErrorKind kind, const std::string& message) {
  throw Error(kind, message);
}

inline const char* to_string(ErrorKind k) {
  switch (k) {
    case ErrorKind::config: return "config";
    case ErrorKind::data: return "data";
    case ErrorKind::schema: return "schema";
    case ErrorKind::validation: return "validation";
    case ErrorKind::dimension: return "dimension";
    case ErrorKind::numeric: return "numeric";
    case ErrorKind::index: return "index";
    case ErrorKind::contract: return "contract";
    case ErrorKind::training: return "training";
    case ErrorKind::corruption: return "corruption";
    case ErrorKind::vocabulary: return "vocabulary";
    case ErrorKind::partition: return "partition";
    case ErrorKind::metric: return "metric";
  }
  return "unknown";
}

}  // namespace urec
