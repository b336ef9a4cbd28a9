// SPDX-License-Identifier: Apache-2.0
//
// Exception hierarchy. Every failure the library reports derives from
// ldke::Error; the CLI maps the three families onto exit codes.

#pragma once

#include <stdexcept>
#include <string>

namespace ldke {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed or missing inputs (files, records, tokens). CLI exit code 3.
class DataError : public Error {
 public:
  using Error::Error;
};

// Bad flags or configuration. CLI exit code 2.
class UsageError : public Error {
 public:
  using Error::Error;
};

#define LDKE_DEFINE_ERROR(Name, Base)   \
  class Name : public Base {            \
   public:                              \
    using Base::Base;                   \
  }

LDKE_DEFINE_ERROR(UnknownToken, DataError);
LDKE_DEFINE_ERROR(ParseError, DataError);
LDKE_DEFINE_ERROR(EmptyCategory, DataError);
LDKE_DEFINE_ERROR(MissingTaps, DataError);
LDKE_DEFINE_ERROR(UnknownKey, UsageError);
LDKE_DEFINE_ERROR(ShapeMismatch, Error);
LDKE_DEFINE_ERROR(AlignmentError, Error);
LDKE_DEFINE_ERROR(NonConvergence, Error);
LDKE_DEFINE_ERROR(InvalidDepth, Error);
LDKE_DEFINE_ERROR(KTooLarge, Error);
LDKE_DEFINE_ERROR(UnknownLayer, Error);
LDKE_DEFINE_ERROR(PartitionMismatch, Error);
LDKE_DEFINE_ERROR(NonFiniteLoss, Error);
LDKE_DEFINE_ERROR(ZeroNorm, Error);
LDKE_DEFINE_ERROR(EmptySet, Error);

#undef LDKE_DEFINE_ERROR

}  // namespace ldke
