#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include "bayesduo/errors.hpp"

namespace bayesduo {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

inline Matrix symmetrize(const Matrix& m) { return 0.5 * (m + m.transpose()); }

inline bool all_finite(const Matrix& m) { return m.allFinite(); }

// Result of a Cholesky factorization that may have needed diagonal jitter.
struct SpdFactor {
    Eigen::LLT<Matrix> llt;
    double jitter = 0.0;

    Matrix inverse() const {
        const auto n = llt.matrixLLT().rows();
        Matrix inv = llt.solve(Matrix::Identity(n, n));
        return symmetrize(inv);
    }

    Matrix lower() const { return llt.matrixL(); }

    double log_det() const {
        const Matrix& l = llt.matrixLLT();
        double acc = 0.0;
        for (Eigen::Index i = 0; i < l.rows(); ++i) acc += std::log(l(i, i));
        return 2.0 * acc;
    }
};

// Cholesky with jitter escalation 1e-10 -> 1e-6 (relative to the mean
// diagonal magnitude, floored at 1). Throws NumericalError when every
// attempt fails or the input is not finite.
inline SpdFactor cholesky_with_jitter(const Matrix& m, const std::string& what = "matrix") {
    if (m.rows() != m.cols()) throw ArgError(what + ": not square");
    if (!m.allFinite()) throw NumericalError(what + ": non-finite entries");
    const Matrix sym = symmetrize(m);
    SpdFactor out;
    out.llt.compute(sym);
    if (out.llt.info() == Eigen::Success) return out;

    const auto n = sym.rows();
    const double scale = std::max(1.0, sym.diagonal().cwiseAbs().mean());
    for (double jitter = 1e-10; jitter <= 1e-6 * 1.0001; jitter *= 10.0) {
        out.llt.compute(sym + (jitter * scale) * Matrix::Identity(n, n));
        if (out.llt.info() == Eigen::Success) {
            out.jitter = jitter * scale;
            return out;
        }
    }
    throw NumericalError(what + ": Cholesky failed after jitter escalation");
}

inline Matrix kronecker(const Matrix& a, const Matrix& b) {
    Matrix out(a.rows() * b.rows(), a.cols() * b.cols());
    for (Eigen::Index i = 0; i < a.rows(); ++i)
        for (Eigen::Index j = 0; j < a.cols(); ++j)
            out.block(i * b.rows(), j * b.cols(), b.rows(), b.cols()) = a(i, j) * b;
    return out;
}

// Max-subtracted softmax.
inline Vector softmax(const Vector& logits) {
    const double m = logits.maxCoeff();
    Vector e = (logits.array() - m).exp().matrix();
    return e / e.sum();
}

inline Vector log_softmax(const Vector& logits) {
    const double m = logits.maxCoeff();
    const double lse = m + std::log((logits.array() - m).exp().sum());
    return (logits.array() - lse).matrix();
}

inline double sigmoid(double a) {
    return a >= 0.0 ? 1.0 / (1.0 + std::exp(-a)) : std::exp(a) / (1.0 + std::exp(a));
}

inline Vector to_vector(std::span<const double> xs) {
    return Eigen::Map<const Vector>(xs.data(), static_cast<Eigen::Index>(xs.size()));
}

}  // namespace bayesduo
