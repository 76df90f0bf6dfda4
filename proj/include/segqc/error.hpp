#pragma once

#include <stdexcept>
#include <string>

namespace segqc {

/// Root of every error the library throws. `kind()` is a stable tag used by
/// the CLI and service layers to map failures onto exit codes / HTTP statuses.
class Error : public std::runtime_error {
public:
  Error(std::string kind, const std::string& what)
      : std::runtime_error(what), kind_(std::move(kind)) {}

  const std::string& kind() const noexcept { return kind_; }

private:
  std::string kind_;
};

#define SEGQC_DEFINE_ERROR(Name)                                              \
  class Name : public Error {                                                 \
  public:                                                                     \
    explicit Name(const std::string& what) : Error(#Name, what) {}            \
  }

SEGQC_DEFINE_ERROR(IoError);
SEGQC_DEFINE_ERROR(RangeError);
SEGQC_DEFINE_ERROR(DuplicateId);
SEGQC_DEFINE_ERROR(EmptyManifest);
SEGQC_DEFINE_ERROR(DimensionMismatch);
SEGQC_DEFINE_ERROR(EmptyReference);
SEGQC_DEFINE_ERROR(EmptyTopology);
SEGQC_DEFINE_ERROR(EmptyMask);
SEGQC_DEFINE_ERROR(EncodeError);
SEGQC_DEFINE_ERROR(EmptyImage);
SEGQC_DEFINE_ERROR(InvalidContext);
SEGQC_DEFINE_ERROR(AuthError);
SEGQC_DEFINE_ERROR(TransientExhausted);
SEGQC_DEFINE_ERROR(TimeoutError);
SEGQC_DEFINE_ERROR(TransportError);
SEGQC_DEFINE_ERROR(IdMismatch);
SEGQC_DEFINE_ERROR(UnknownCase);
SEGQC_DEFINE_ERROR(BoundExceeded);
SEGQC_DEFINE_ERROR(BadFilter);
SEGQC_DEFINE_ERROR(BadLabel);
SEGQC_DEFINE_ERROR(BadReviewer);
SEGQC_DEFINE_ERROR(StorageError);
SEGQC_DEFINE_ERROR(ConfigError);

#undef SEGQC_DEFINE_ERROR

/// Malformed manifest / record text. `line()` is 1-based, 0 when unknown.
class FormatError : public Error {
public:
  FormatError(std::size_t line, const std::string& what)
      : Error("FormatError",
              line ? "line " + std::to_string(line) + ": " + what : what),
        line_(line) {}

  std::size_t line() const noexcept { return line_; }

private:
  std::size_t line_;
};

} // namespace segqc
