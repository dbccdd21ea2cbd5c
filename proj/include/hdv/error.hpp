#pragma once

#include <stdexcept>
#include <string>

namespace hdv {

// Base for every error raised by the library. The derived type names are part
// of the public contract and are asserted by tests.
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

#define HDV_DEFINE_ERROR(Name)                                   \
  struct Name : Error {                                          \
    explicit Name(const std::string& msg) : Error(#Name ": " + msg) {} \
  }

HDV_DEFINE_ERROR(ParseError);
HDV_DEFINE_ERROR(ValidationError);
HDV_DEFINE_ERROR(IoError);
HDV_DEFINE_ERROR(InsufficientPoints);
HDV_DEFINE_ERROR(DegenerateNeighborhood);
HDV_DEFINE_ERROR(CalibrationError);
HDV_DEFINE_ERROR(MetadataRequired);
HDV_DEFINE_ERROR(TargetTooLarge);
HDV_DEFINE_ERROR(ShapeError);
HDV_DEFINE_ERROR(AssignmentError);
HDV_DEFINE_ERROR(ContractError);
HDV_DEFINE_ERROR(ZeroSupervision);
HDV_DEFINE_ERROR(AbsentClass);
HDV_DEFINE_ERROR(EmptySlice);
HDV_DEFINE_ERROR(SpecTooSparse);
HDV_DEFINE_ERROR(DivergedError);

#undef HDV_DEFINE_ERROR

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw ContractError(msg);
}

}  // namespace hdv
