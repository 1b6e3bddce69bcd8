#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace dgc {

enum class ErrorKind {
    Domain,
    Contract,
    Numerical,
    Config,
    Invariant,
    Io,
};

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& msg) { throw Error(kind, msg); }

inline void require(bool ok, ErrorKind kind, const std::string& msg) {
    if (!ok) fail(kind, msg);
}

// Dense row-major array over time levels (rows) and space nodes (columns).
class Field {
public:
    Field() = default;
    Field(std::size_t rows, std::size_t cols, double value = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, value) {}

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    bool empty() const { return data_.empty(); }

    double& operator()(std::size_t k, std::size_t j) { return data_[k * cols_ + j]; }
    double operator()(std::size_t k, std::size_t j) const { return data_[k * cols_ + j]; }

    std::span<double> row(std::size_t k) { return {data_.data() + k * cols_, cols_}; }
    std::span<const double> row(std::size_t k) const { return {data_.data() + k * cols_, cols_}; }

    std::vector<double>& raw() { return data_; }
    const std::vector<double>& raw() const { return data_; }

    bool same_shape(const Field& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

}  // namespace dgc
