#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace ccbm {

enum class Errc {
  // credal-core / model / losses
  NonPositivePrior,
  OddDimension,
  DimensionMismatch,
  IndexOutOfRange,
  BadBounds,
  LengthMismatch,
  NotOnSimplex,
  NaNDetected,
  IsolationViolated,
  ShapeMismatch,
  // metrics
  TooFewSamples,
  DegenerateN,
  SingleClass,
  DegenerateInput,
  // data
  ManifestParse,
  DimMismatch,
  CountSumMismatch,
  LabelMismatch,
  TruncatedEmbeddingFile,
  AllZero,
  VersionMismatch,
  Corrupt,
  EmptyDataset,
  Io,
  // cli / config
  InvalidConfig,
};

constexpr std::string_view errc_name(Errc c) noexcept {
  switch (c) {
    case Errc::NonPositivePrior: return "NonPositivePrior";
    case Errc::OddDimension: return "OddDimension";
    case Errc::DimensionMismatch: return "DimensionMismatch";
    case Errc::IndexOutOfRange: return "IndexOutOfRange";
    case Errc::BadBounds: return "BadBounds";
    case Errc::LengthMismatch: return "LengthMismatch";
    case Errc::NotOnSimplex: return "NotOnSimplex";
    case Errc::NaNDetected: return "NaNDetected";
    case Errc::IsolationViolated: return "IsolationViolated";
    case Errc::ShapeMismatch: return "ShapeMismatch";
    case Errc::TooFewSamples: return "TooFewSamples";
    case Errc::DegenerateN: return "DegenerateN";
    case Errc::SingleClass: return "SingleClass";
    case Errc::DegenerateInput: return "DegenerateInput";
    case Errc::ManifestParse: return "ManifestParse";
    case Errc::DimMismatch: return "DimMismatch";
    case Errc::CountSumMismatch: return "CountSumMismatch";
    case Errc::LabelMismatch: return "LabelMismatch";
    case Errc::TruncatedEmbeddingFile: return "TruncatedEmbeddingFile";
    case Errc::AllZero: return "AllZero";
    case Errc::VersionMismatch: return "VersionMismatch";
    case Errc::Corrupt: return "Corrupt";
    case Errc::EmptyDataset: return "EmptyDataset";
    case Errc::Io: return "Io";
    case Errc::InvalidConfig: return "InvalidConfig";
  }
  return "Unknown";
}

/// Validation failures are caller mistakes (bad config, malformed files);
/// everything else is a runtime or numerical failure.
constexpr bool is_validation_error(Errc c) noexcept {
  switch (c) {
    case Errc::NonPositivePrior:
    case Errc::OddDimension:
    case Errc::DimensionMismatch:
    case Errc::IndexOutOfRange:
    case Errc::BadBounds:
    case Errc::LengthMismatch:
    case Errc::NotOnSimplex:
    case Errc::ShapeMismatch:
    case Errc::TooFewSamples:
    case Errc::DegenerateN:
    case Errc::SingleClass:
    case Errc::DegenerateInput:
    case Errc::ManifestParse:
    case Errc::DimMismatch:
    case Errc::CountSumMismatch:
    case Errc::LabelMismatch:
    case Errc::TruncatedEmbeddingFile:
    case Errc::AllZero:
    case Errc::VersionMismatch:
    case Errc::Corrupt:
    case Errc::EmptyDataset:
    case Errc::Io:
    case Errc::InvalidConfig:
      return true;
    case Errc::NaNDetected:
    case Errc::IsolationViolated:
      return false;
  }
  return false;
}

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(errc_name(code)) + ": " + what), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

[[noreturn]] inline void fail(Errc code, const std::string& what) { throw Error(code, what); }

}  // namespace ccbm
