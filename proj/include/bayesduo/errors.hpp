#pragma once

#include <stdexcept>
#include <string>

namespace bayesduo {

// Every failure raised by the library derives from Error so callers can
// catch one type. The CLI maps the subclasses onto exit codes.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class FormatError : public Error {  // bad magic, version, dtype or schema
public:
    using Error::Error;
};

class CorruptError : public Error {  // header and payload disagree
public:
    using Error::Error;
};

class ValueError : public Error {  // non-finite numbers
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

class ArgError : public Error {  // dimension mismatch, bad counts, bad indices
public:
    using Error::Error;
};

class DegenerateInputError : public Error {  // zero-norm vectors and similar
public:
    using Error::Error;
};

class NumericalError : public Error {  // factorization failure, non-finite results
public:
    using Error::Error;
};

}  // namespace bayesduo
