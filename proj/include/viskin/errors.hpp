#pragma once

#include <stdexcept>
#include <string>

namespace viskin {

// Contract violations shared across the library. Each maps to one failure
// mode of the public operations; callers that can recover catch the specific
// type.

struct DimensionMismatch : std::runtime_error {
  explicit DimensionMismatch(const std::string& what) : std::runtime_error(what) {}
};

struct DegenerateGeometry : std::runtime_error {
  explicit DegenerateGeometry(const std::string& what) : std::runtime_error(what) {}
};

struct InsufficientCorrespondences : std::runtime_error {
  explicit InsufficientCorrespondences(const std::string& what) : std::runtime_error(what) {}
};

struct SeedPairNotFound : std::runtime_error {
  explicit SeedPairNotFound(const std::string& what) : std::runtime_error(what) {}
};

struct InsufficientFeatures : std::runtime_error {
  explicit InsufficientFeatures(const std::string& what) : std::runtime_error(what) {}
};

struct MissingGenerated : std::runtime_error {
  explicit MissingGenerated(const std::string& what) : std::runtime_error(what) {}
};

struct NonFiniteValue : std::runtime_error {
  explicit NonFiniteValue(const std::string& what) : std::runtime_error(what) {}
};

struct ConvergenceFailure : std::runtime_error {
  explicit ConvergenceFailure(const std::string& what) : std::runtime_error(what) {}
};

struct EmptySolutionSet : std::runtime_error {
  explicit EmptySolutionSet(const std::string& what) : std::runtime_error(what) {}
};

struct NonPositiveDepth : std::runtime_error {
  explicit NonPositiveDepth(const std::string& what) : std::runtime_error(what) {}
};

struct UnreachableTarget : std::runtime_error {
  explicit UnreachableTarget(const std::string& what) : std::runtime_error(what) {}
};

struct IoError : std::runtime_error {
  explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

struct UsageError : std::runtime_error {
  explicit UsageError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace viskin
