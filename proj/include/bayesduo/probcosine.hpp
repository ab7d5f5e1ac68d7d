#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <vector>

#include <Eigen/Eigenvalues>

#include "bayesduo/errors.hpp"
#include "bayesduo/gaussian.hpp"
#include "bayesduo/laplace.hpp"
#include "bayesduo/linalg.hpp"
#include "bayesduo/random.hpp"

namespace bayesduo {

// Mean and variance of one image-text cosine similarity.
struct CosineDistribution {
    double mean = 0.0;
    double var = 0.0;
};

// Class probabilities for one input. Nonnegative and sum to one.
struct Predictive {
    Vector probs;

    Eigen::Index n_classes() const { return probs.size(); }
    Eigen::Index argmax() const {
        Eigen::Index best = 0;
        for (Eigen::Index c = 1; c < probs.size(); ++c)
            if (probs(c) > probs(best)) best = c;
        return best;
    }
};

inline double cosine(const Vector& x, const Vector& y) {
    const double nx = x.norm(), ny = y.norm();
    if (!(nx >= kMinNorm) || !(ny >= kMinNorm)) throw DegenerateInputError("cosine: zero-norm vector");
    return x.dot(y) / (nx * ny);
}

// Analytic moments of cos(g, h) for independent diagonal Gaussians. The
// norms are replaced by sqrt(E|x|^2) = sqrt(sum mu^2 + sigma^2).
inline CosineDistribution probcosine_moments(const GaussianEmbedding& g, const GaussianEmbedding& h) {
    if (g.dim() != h.dim()) throw ArgError("probcosine_moments: dimension mismatch");
    if (g.var.size() != g.dim() || h.var.size() != h.dim()) throw ArgError("probcosine_moments: variance size mismatch");
    const double dg = g.mean.squaredNorm() + g.var.sum();
    const double dh = h.mean.squaredNorm() + h.var.sum();
    if (!(dg > 0.0) || !(dh > 0.0)) throw DegenerateInputError("probcosine_moments: zero mean and variance");
    const double denom = dg * dh;

    double dot = 0.0, num = 0.0;
    for (Eigen::Index i = 0; i < g.dim(); ++i) {
        const double mg = g.mean(i), mh = h.mean(i), vg = g.var(i), vh = h.var(i);
        dot += mg * mh;
        // Grouped so that swapping g and h gives bitwise-identical sums.
        num += vg * vh + (vg * mh * mh + vh * mg * mg);
    }
    return {dot / std::sqrt(denom), num / denom};
}

struct CosineEstimate {
    double mean = 0.0;
    double var = 0.0;
    double se_mean = 0.0;
};

namespace detail {

inline Vector sample_diag_gaussian(const GaussianEmbedding& e, const Vector& sd, Rng& rng) {
    constexpr long kMaxRejections = 1'000'000;
    for (long attempt = 0; attempt < kMaxRejections; ++attempt) {
        Vector x = e.mean;
        for (Eigen::Index i = 0; i < x.size(); ++i)
            if (sd(i) > 0.0) x(i) += sd(i) * rng.normal();
        if (x.norm() >= kMinNorm) return x;
    }
    throw DegenerateInputError("sampled embeddings keep collapsing to zero norm");
}

}  // namespace detail

// Monte-Carlo moments of cos(g, h) with g and h drawn independently.
// Near-zero samples are redrawn, not clamped.
inline CosineEstimate mc_cosine_oracle(const GaussianEmbedding& g, const GaussianEmbedding& h, std::size_t n_samples,
                                       std::uint64_t seed) {
    if (n_samples < 2) throw ArgError("mc_cosine_oracle: need at least 2 samples");
    if (g.dim() != h.dim()) throw ArgError("mc_cosine_oracle: dimension mismatch");
    g.validate();
    h.validate();
    Rng rng(derive_seed(seed, "oracle-cosine"));
    const Vector sg = g.var.cwiseSqrt(), sh = h.var.cwiseSqrt();
    double mean = 0.0, m2 = 0.0;
    for (std::size_t k = 1; k <= n_samples; ++k) {
        const Vector x = detail::sample_diag_gaussian(g, sg, rng);
        const Vector y = detail::sample_diag_gaussian(h, sh, rng);
        const double c = cosine(x, y);
        const double delta = c - mean;
        mean += delta / static_cast<double>(k);
        m2 += delta * (c - mean);
    }
    const double var = m2 / static_cast<double>(n_samples - 1);
    return {mean, var, std::sqrt(var / static_cast<double>(n_samples))};
}

// softmax(t E_c / sqrt(1 + pi/8 t^2 V_c)), one independent probit per class.
inline Predictive probit_predictive(const Vector& cos_means, const Vector& cos_vars, double temperature) {
    if (cos_means.size() != cos_vars.size()) throw ArgError("probit_predictive: size mismatch");
    if (!cos_means.allFinite() || !cos_vars.allFinite() || !std::isfinite(temperature))
        throw ValueError("probit_predictive: non-finite input");
    if (!(temperature > 0.0)) throw ArgError("probit_predictive: temperature must be positive");
    if ((cos_vars.array() < 0.0).any()) throw ArgError("probit_predictive: negative variance");
    const double k = std::numbers::pi / 8.0 * temperature * temperature;
    const Vector scaled = (temperature * cos_means.array() / (1.0 + k * cos_vars.array()).sqrt()).matrix();
    return {softmax(scaled)};
}

inline Predictive probit_predictive(std::span<const CosineDistribution> cos, double temperature) {
    Vector m(static_cast<Eigen::Index>(cos.size())), v(static_cast<Eigen::Index>(cos.size()));
    for (std::size_t c = 0; c < cos.size(); ++c) {
        m(static_cast<Eigen::Index>(c)) = cos[c].mean;
        v(static_cast<Eigen::Index>(c)) = cos[c].var;
    }
    return probit_predictive(m, v, temperature);
}

// Natural-log entropy with 0 log 0 = 0.
inline double entropy(const Vector& p) {
    double h = 0.0;
    for (Eigen::Index c = 0; c < p.size(); ++c)
        if (p(c) > 0.0) h -= p(c) * std::log(p(c));
    return h;
}

inline double entropy(const Predictive& p) { return entropy(p.probs); }

// Square root L with L L^T = S: Cholesky, or exactly zero for a zero matrix.
inline Matrix covariance_sqrt(const Matrix& s, const std::string& what) {
    if (s.isZero(0.0)) return Matrix::Zero(s.rows(), s.cols());
    return cholesky_with_jitter(s, what).lower();
}

// Draws projection matrices P = map + L_B E L_A^T from the matrix-normal
// posterior MN(map, B~^{-1}, A~^{-1}).
class PosteriorSampler {
public:
    explicit PosteriorSampler(const KfacPosterior& post)
        : map_(post.map),
          l_a_(covariance_sqrt(post.a_tilde_inv, "A~^{-1}")),
          l_b_(covariance_sqrt(post.b_tilde_inv, "B~^{-1}")) {}

    Matrix sample(Rng& rng) const {
        const Matrix e = rng.normal_matrix(map_.rows(), map_.cols());
        return map_ + l_b_ * e * l_a_.transpose();
    }

    const Matrix& map() const { return map_; }
    // True when every draw equals the MAP.
    bool deterministic() const { return l_a_.isZero(0.0) || l_b_.isZero(0.0); }

private:
    Matrix map_;
    Matrix l_a_;
    Matrix l_b_;
};

// Monte-Carlo predictive: average of softmax(t cos(P phi, h_c)) over
// matrix-normal draws of P and independent draws of each class embedding.
inline Predictive mc_predictive_oracle(const KfacPosterior& post_img, const Vector& feature,
                                       std::span<const GaussianEmbedding> classes, std::size_t n_samples,
                                       std::uint64_t seed, double temperature) {
    if (n_samples < 2) throw ArgError("mc_predictive_oracle: need at least 2 samples");
    if (feature.size() != post_img.d_in()) throw ArgError("mc_predictive_oracle: feature dimension mismatch");
    if (classes.empty()) throw ArgError("mc_predictive_oracle: no classes");
    const PosteriorSampler sampler(post_img);
    Rng rng(derive_seed(seed, "oracle-predictive"));
    const auto n_classes = static_cast<Eigen::Index>(classes.size());
    std::vector<Vector> class_sd;
    for (const auto& c : classes) {
        if (c.dim() != post_img.d_out()) throw ArgError("mc_predictive_oracle: class embedding dimension mismatch");
        class_sd.push_back(c.var.cwiseSqrt());
    }
    Vector mean = Vector::Zero(n_classes);
    Vector logits(n_classes);
    for (std::size_t k = 1; k <= n_samples; ++k) {
        Vector g;
        for (long attempt = 0;; ++attempt) {
            g = sampler.sample(rng) * feature;
            if (g.norm() >= kMinNorm) break;
            if (attempt > 1'000'000) throw DegenerateInputError("mc_predictive_oracle: zero-norm samples");
        }
        for (Eigen::Index c = 0; c < n_classes; ++c) {
            const auto& cls = classes[static_cast<std::size_t>(c)];
            const Vector h = detail::sample_diag_gaussian(cls, class_sd[static_cast<std::size_t>(c)], rng);
            logits(c) = temperature * cosine(g, h);
        }
        mean += (softmax(logits) - mean) / static_cast<double>(k);
    }
    return {mean};
}

}  // namespace bayesduo
