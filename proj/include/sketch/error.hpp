#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace sketch {

enum class ErrorKind {
  // sketch_data
  MalformedRecord,
  MismatchedArrays,
  EmptyDrawing,
  TooFewClasses,
  QuotaExceedsPerClass,
  QuotaMismatch,
  // entropy_filter
  MixedClasses,
  TooFewSamples,
  ClassMismatch,
  // autodiff_core
  ShapeMismatch,
  NonScalarOutput,
  EmptySequence,
  MissingGrads,
  BadCheckpoint,
  // encoder / objectives
  TopologyMismatch,
  DimensionMismatch,
  EmptyBatch,
  LabelOutOfRange,
  EmptyClassAfterGating,
  MissingCenter,
  NonBinaryCode,
  MissingPrototype,
  // hashing
  OutOfRangeFeature,
  LengthMismatch,
  EmptyStore,
  BadCodeFile,
  // zero_shot
  EmptyClass,
  SplitOverlap,
  EmptyCandidateSet,
  // evaluation
  NoRelevantItems,
  SingleClass,
  // cli
  ConfigError,
  MissingInput,
  StageFailure,
};

constexpr std::string_view to_string(ErrorKind k) {
  switch (k) {
    case ErrorKind::MalformedRecord: return "MalformedRecord";
    case ErrorKind::MismatchedArrays: return "MismatchedArrays";
    case ErrorKind::EmptyDrawing: return "EmptyDrawing";
    case ErrorKind::TooFewClasses: return "TooFewClasses";
    case ErrorKind::QuotaExceedsPerClass: return "QuotaExceedsPerClass";
    case ErrorKind::QuotaMismatch: return "QuotaMismatch";
    case ErrorKind::MixedClasses: return "MixedClasses";
    case ErrorKind::TooFewSamples: return "TooFewSamples";
    case ErrorKind::ClassMismatch: return "ClassMismatch";
    case ErrorKind::ShapeMismatch: return "ShapeMismatch";
    case ErrorKind::NonScalarOutput: return "NonScalarOutput";
    case ErrorKind::EmptySequence: return "EmptySequence";
    case ErrorKind::MissingGrads: return "MissingGrads";
    case ErrorKind::BadCheckpoint: return "BadCheckpoint";
    case ErrorKind::TopologyMismatch: return "TopologyMismatch";
    case ErrorKind::DimensionMismatch: return "DimensionMismatch";
    case ErrorKind::EmptyBatch: return "EmptyBatch";
    case ErrorKind::LabelOutOfRange: return "LabelOutOfRange";
    case ErrorKind::EmptyClassAfterGating: return "EmptyClassAfterGating";
    case ErrorKind::MissingCenter: return "MissingCenter";
    case ErrorKind::NonBinaryCode: return "NonBinaryCode";
    case ErrorKind::MissingPrototype: return "MissingPrototype";
    case ErrorKind::OutOfRangeFeature: return "OutOfRangeFeature";
    case ErrorKind::LengthMismatch: return "LengthMismatch";
    case ErrorKind::EmptyStore: return "EmptyStore";
    case ErrorKind::BadCodeFile: return "BadCodeFile";
    case ErrorKind::EmptyClass: return "EmptyClass";
    case ErrorKind::SplitOverlap: return "SplitOverlap";
    case ErrorKind::EmptyCandidateSet: return "EmptyCandidateSet";
    case ErrorKind::NoRelevantItems: return "NoRelevantItems";
    case ErrorKind::SingleClass: return "SingleClass";
    case ErrorKind::ConfigError: return "ConfigError";
    case ErrorKind::MissingInput: return "MissingInput";
    case ErrorKind::StageFailure: return "StageFailure";
  }
  return "Unknown";
}

/// Every failure raised by the library carries a kind so callers (and the CLI
/// exit-code mapping) can dispatch without parsing messages.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& detail)
      : std::runtime_error(std::string(to_string(kind)) + ": " + detail), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& detail) { throw Error(kind, detail); }

}  // namespace sketch
