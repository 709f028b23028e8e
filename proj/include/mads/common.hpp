#pragma once

#include <Eigen/Core>
#include <stdexcept>
#include <string>

namespace mads {

using Mat = Eigen::MatrixXd;
using MatF = Eigen::MatrixXf;
using Vec = Eigen::VectorXd;

// Base for all library errors. Subclasses map to the failure classes the
// operations promise: callers can catch the base or a specific kind.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

struct ConfigError : Error {
    using Error::Error;
};
struct IoError : Error {
    using Error::Error;
};
struct SchemaError : Error {
    using Error::Error;
};
struct ValidationError : Error {
    using Error::Error;
};
struct ParseError : Error {
    using Error::Error;
};
struct VocabError : Error {
    using Error::Error;
};
struct ShapeError : Error {
    using Error::Error;
};
struct NumericError : Error {
    using Error::Error;
};
struct CollectionError : Error {
    using Error::Error;
};

}  // namespace mads
