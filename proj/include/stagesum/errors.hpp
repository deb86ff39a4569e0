#pragma once

#include <stdexcept>
#include <string>

namespace stagesum {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define STAGESUM_DEFINE_ERROR(Name)       \
  class Name : public Error {             \
   public:                                \
    using Error::Error;                   \
  }

STAGESUM_DEFINE_ERROR(DimensionError);
STAGESUM_DEFINE_ERROR(NumericError);
STAGESUM_DEFINE_ERROR(ConfigError);
STAGESUM_DEFINE_ERROR(ValidationError);
STAGESUM_DEFINE_ERROR(TrainingError);
STAGESUM_DEFINE_ERROR(StageError);
STAGESUM_DEFINE_ERROR(DecodeError);
STAGESUM_DEFINE_ERROR(SurgeryError);
STAGESUM_DEFINE_ERROR(IncompatibleCheckpointError);
STAGESUM_DEFINE_ERROR(FormatError);
STAGESUM_DEFINE_ERROR(CalibrationError);
STAGESUM_DEFINE_ERROR(MetricError);
STAGESUM_DEFINE_ERROR(ReportError);
STAGESUM_DEFINE_ERROR(SpecError);

#undef STAGESUM_DEFINE_ERROR

}  // namespace stagesum
