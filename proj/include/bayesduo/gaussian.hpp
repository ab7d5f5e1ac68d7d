#pragma once

#include "bayesduo/errors.hpp"
#include "bayesduo/linalg.hpp"

namespace bayesduo {

// Diagonal Gaussian over one embedding in the joint space.
struct GaussianEmbedding {
    Vector mean;
    Vector var;  // diagonal of the covariance, elementwise >= 0

    static GaussianEmbedding point(const Vector& mean) { return {mean, Vector::Zero(mean.size())}; }

    Eigen::Index dim() const { return mean.size(); }

    void validate() const {
        if (mean.size() != var.size()) throw ArgError("GaussianEmbedding: mean/var size mismatch");
        if (!mean.allFinite() || !var.allFinite()) throw ValueError("GaussianEmbedding: non-finite entries");
        if ((var.array() < 0.0).any()) throw ArgError("GaussianEmbedding: negative variance");
    }
};

}  // namespace bayesduo
