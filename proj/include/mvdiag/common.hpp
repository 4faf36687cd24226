#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace mvdiag {

enum class ErrorCode {
  MalformedRecord,
  IoError,
  EmptyState,
  InsufficientData,
  UnknownSeries,
  NoInvocationPairs,
  UnknownPair,
  EmptyTraces,
  EmptyCorpus,
  RootCauseNotInGraph,
  NothingToDrop,
  DimensionMismatch,
  BatchTooSmall,
  LabelOutOfRange,
  RootIndexInvalid,
  EmptyDataset,
  NonFiniteLoss,
  ChecksumMismatch,
  ZeroLoss,
  FaultTargetUnknown,
  InvalidConfig,
  InvalidArgument,
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::MalformedRecord: return "MalformedRecord";
    case ErrorCode::IoError: return "IoError";
    case ErrorCode::EmptyState: return "EmptyState";
    case ErrorCode::InsufficientData: return "InsufficientData";
    case ErrorCode::UnknownSeries: return "UnknownSeries";
    case ErrorCode::NoInvocationPairs: return "NoInvocationPairs";
    case ErrorCode::UnknownPair: return "UnknownPair";
    case ErrorCode::EmptyTraces: return "EmptyTraces";
    case ErrorCode::EmptyCorpus: return "EmptyCorpus";
    case ErrorCode::RootCauseNotInGraph: return "RootCauseNotInGraph";
    case ErrorCode::NothingToDrop: return "NothingToDrop";
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::BatchTooSmall: return "BatchTooSmall";
    case ErrorCode::LabelOutOfRange: return "LabelOutOfRange";
    case ErrorCode::RootIndexInvalid: return "RootIndexInvalid";
    case ErrorCode::EmptyDataset: return "EmptyDataset";
    case ErrorCode::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorCode::ChecksumMismatch: return "ChecksumMismatch";
    case ErrorCode::ZeroLoss: return "ZeroLoss";
    case ErrorCode::FaultTargetUnknown: return "FaultTargetUnknown";
    case ErrorCode::InvalidConfig: return "InvalidConfig";
    case ErrorCode::InvalidArgument: return "InvalidArgument";
  }
  return "Unknown";
}

/// Every failure raised by the library. `line` is set for record-level
/// parse errors (1-based).
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message, std::optional<std::size_t> line = std::nullopt)
      : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code), line_(line) {}

  ErrorCode code() const noexcept { return code_; }
  std::optional<std::size_t> line() const noexcept { return line_; }

 private:
  ErrorCode code_;
  std::optional<std::size_t> line_;
};

/// A non-fatal condition that an operation skipped over and reports back,
/// e.g. a metric series with too few samples to fit.
struct Issue {
  ErrorCode code;
  std::string detail;
};

using Issues = std::vector<Issue>;

inline void report(Issues* issues, ErrorCode code, std::string detail) {
  if (issues != nullptr) issues->push_back({code, std::move(detail)});
}

inline constexpr std::uint64_t fnv1a(std::string_view text, std::uint64_t hash = 14695981039346656037ULL) {
  for (unsigned char c : text) {
    hash ^= c;
    hash *= 1099511628211ULL;
  }
  return hash;
}

inline constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Named sub-stream of a root seed. Each consumer (embedding, iforest,
/// augment, train, ...) draws from its own stream so that changing one
/// component never shifts another's random sequence.
inline std::uint64_t derive_seed(std::uint64_t root, std::string_view stream) {
  return splitmix64(root ^ fnv1a(stream));
}

inline std::uint64_t derive_seed(std::uint64_t root, std::uint64_t index) {
  return splitmix64(root ^ splitmix64(index + 0x632be59bd9b4e019ULL));
}

using Rng = std::mt19937_64;

inline Rng make_rng(std::uint64_t root, std::string_view stream) { return Rng(derive_seed(root, stream)); }

inline std::string hex64(std::uint64_t value) {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = kDigits[value & 0xF];
    value >>= 4;
  }
  return out;
}

}  // namespace mvdiag
