#pragma once

#include <stdexcept>
#include <string>

namespace fblnet {

enum class Err {
  Config,
  Shape,
  Window,
  Node,
  Eval,
  Mode,
  ZeroMap,
  Domain,
  ConstMap,
  NotNormalized,
  EmptyFix,
  MissingPair,
  EmptyDataset,
  NanLoss,
  Io,
  Version,
};

inline const char* err_name(Err e) {
  switch (e) {
    case Err::Config: return "E_CONFIG";
    case Err::Shape: return "E_SHAPE";
    case Err::Window: return "E_WINDOW";
    case Err::Node: return "E_NODE";
    case Err::Eval: return "E_EVAL";
    case Err::Mode: return "E_MODE";
    case Err::ZeroMap: return "E_ZERO_MAP";
    case Err::Domain: return "E_DOMAIN";
    case Err::ConstMap: return "E_CONST_MAP";
    case Err::NotNormalized: return "E_NOT_NORMALIZED";
    case Err::EmptyFix: return "E_EMPTY_FIX";
    case Err::MissingPair: return "E_MISSING_PAIR";
    case Err::EmptyDataset: return "E_EMPTY_DATASET";
    case Err::NanLoss: return "E_NAN_LOSS";
    case Err::Io: return "E_IO";
    case Err::Version: return "E_VERSION";
  }
  return "E_UNKNOWN";
}

class FblError : public std::runtime_error {
 public:
  FblError(Err code, const std::string& what)
      : std::runtime_error(std::string(err_name(code)) + ": " + what), code_(code) {}
  Err code() const { return code_; }

 private:
  Err code_;
};

#define FBL_CHECK(cond, code, msg)                  \
  do {                                              \
    if (!(cond)) throw ::fblnet::FblError(code, msg); \
  } while (0)

}  // namespace fblnet
