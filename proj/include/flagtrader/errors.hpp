#ifndef FLAGTRADER_ERRORS_HPP
#define FLAGTRADER_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace flagtrader {

/// Broad failure classes. The CLI maps each class onto a process exit code.
enum class ErrorClass {
  Usage,      // bad configuration or API misuse
  Data,       // unreadable, malformed or incompatible input
  Numerical,  // non-finite values, failed gradient checks
};

class Error : public std::runtime_error {
 public:
  Error(ErrorClass cls, const std::string& what) : std::runtime_error(what), class_(cls) {}
  ErrorClass error_class() const noexcept { return class_; }

 private:
  ErrorClass class_;
};

#define FLAGTRADER_DEFINE_ERROR(Name, Class)                                  \
  class Name : public Error {                                                \
   public:                                                                   \
    explicit Name(const std::string& what) : Error(ErrorClass::Class, what) {} \
  };

FLAGTRADER_DEFINE_ERROR(ParseError, Data)
FLAGTRADER_DEFINE_ERROR(ValidationError, Data)
FLAGTRADER_DEFINE_ERROR(EmptyInputError, Data)
FLAGTRADER_DEFINE_ERROR(IoError, Data)
FLAGTRADER_DEFINE_ERROR(CompatibilityError, Data)
FLAGTRADER_DEFINE_ERROR(BoundsError, Usage)
FLAGTRADER_DEFINE_ERROR(ConfigError, Usage)
FLAGTRADER_DEFINE_ERROR(UsageError, Usage)
FLAGTRADER_DEFINE_ERROR(MaskedActionError, Usage)
FLAGTRADER_DEFINE_ERROR(HorizonError, Usage)
FLAGTRADER_DEFINE_ERROR(DomainError, Numerical)
FLAGTRADER_DEFINE_ERROR(InsufficientDataError, Data)
FLAGTRADER_DEFINE_ERROR(NumericalError, Numerical)

#undef FLAGTRADER_DEFINE_ERROR

}  // namespace flagtrader

#endif  // FLAGTRADER_ERRORS_HPP
