#pragma once

#include <stdexcept>
#include <string>

namespace nictkit {

/// Base of every error raised by the toolkit. `kind()` is the stable error
/// name used in CLI messages and tests.
class Error : public std::runtime_error {
public:
    Error(std::string kind, const std::string& what)
        : std::runtime_error(kind + ": " + what), kind_(std::move(kind)) {}

    const std::string& kind() const noexcept { return kind_; }

private:
    std::string kind_;
};

#define NICTKIT_DEFINE_ERROR(Name)                                              \
    class Name : public Error {                                                 \
    public:                                                                     \
        explicit Name(const std::string& what) : Error(#Name, what) {}          \
    }

NICTKIT_DEFINE_ERROR(InvalidGeometry);
NICTKIT_DEFINE_ERROR(ShapeMismatch);
NICTKIT_DEFINE_ERROR(InvalidStride);
NICTKIT_DEFINE_ERROR(InvalidRange);
NICTKIT_DEFINE_ERROR(IoError);
NICTKIT_DEFINE_ERROR(CorruptVolume);
NICTKIT_DEFINE_ERROR(NonScalarLoss);
NICTKIT_DEFINE_ERROR(NonFiniteValue);
NICTKIT_DEFINE_ERROR(InvalidConfig);
NICTKIT_DEFINE_ERROR(ImageTooSmall);
NICTKIT_DEFINE_ERROR(NoTargetsMatched);
NICTKIT_DEFINE_ERROR(CorpusExhausted);
NICTKIT_DEFINE_ERROR(NonFiniteGradient);
NICTKIT_DEFINE_ERROR(IncompleteTable);
NICTKIT_DEFINE_ERROR(UnpairedFile);
NICTKIT_DEFINE_ERROR(NanLoss);

#undef NICTKIT_DEFINE_ERROR

}  // namespace nictkit
