#pragma once

#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <string>

#include <Eigen/Eigenvalues>
#include <json.hpp>

#include "bayesduo/embeddings_io.hpp"
#include "bayesduo/errors.hpp"
#include "bayesduo/gaussian.hpp"
#include "bayesduo/linalg.hpp"

namespace bayesduo {

inline constexpr double kMinNorm = 1e-12;

// Input-side second moment A and output-side curvature B of one projection
// layer, both scaled by 1/sqrt(n_effective).
struct KroneckerFactors {
    Matrix a_factor;  // d_in x d_in
    Matrix b_factor;  // d_out x d_out
    std::size_t n_effective = 0;
};

// Laplace posterior over one projection matrix,
//   P ~ MN(map, b_tilde_inv [rows], a_tilde_inv [columns]),
// with A~ = sqrt(tau) A + sqrt(lam) I and B~ = sqrt(tau) B + sqrt(lam) I.
struct KfacPosterior {
    Matrix map;  // d_out x d_in
    KroneckerFactors factors;
    double tau = 1.0;
    double lam = 1.0;
    Matrix a_tilde_inv;
    Matrix b_tilde_inv;

    Eigen::Index d_in() const { return map.cols(); }
    Eigen::Index d_out() const { return map.rows(); }
};

// Other-modality context for the curvature of one sample: the unit-norm
// embeddings of the batch (H^ for the image side, G^ for the text side).
struct LossContext {
    Matrix batch_embeddings;  // n_batch x d_out, unit rows
    double temperature = 1.0;
    double bias = 0.0;
    LossKind loss_kind = LossKind::InfoNCE;

    void validate() const {
        if (batch_embeddings.rows() == 0) throw ArgError("LossContext: empty batch");
        for (Eigen::Index i = 0; i < batch_embeddings.rows(); ++i)
            if (std::abs(batch_embeddings.row(i).norm() - 1.0) > 1e-6)
                throw ArgError("LossContext: batch row " + std::to_string(i) + " is not unit norm");
        if (!std::isfinite(temperature) || temperature < 0.0) throw ArgError("LossContext: bad temperature");
    }
};

inline Matrix normalize_rows(const Matrix& m) {
    Matrix out = m;
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        const double n = m.row(i).norm();
        if (!(n >= kMinNorm)) throw DegenerateInputError("normalize_rows: row " + std::to_string(i) + " has zero norm");
        out.row(i) /= n;
    }
    return out;
}

inline EmbeddingMatrix normalize_rows(const EmbeddingMatrix& m) {
    return EmbeddingMatrix::from_eigen(normalize_rows(m.to_eigen()));
}

// d(g/|g|)/dg = I/|g| - g g^T/|g|^3. This is the SigLIP Jacobian.
inline Matrix jacobian_siglip(const Vector& g) {
    const double n = g.norm();
    if (!(n >= kMinNorm)) throw DegenerateInputError("jacobian: zero embedding");
    const auto d = g.size();
    return Matrix::Identity(d, d) / n - (g * g.transpose()) / (n * n * n);
}

// d(H^ g/|g|)/dg for the InfoNCE logits against the batch embeddings.
inline Matrix jacobian_infonce(const Vector& g, const LossContext& ctx) {
    if (ctx.batch_embeddings.cols() != g.size()) throw ArgError("jacobian_infonce: dimension mismatch");
    return ctx.batch_embeddings * jacobian_siglip(g);
}

// diag(pi) - pi pi^T with pi = softmax(t * logits).
inline Matrix loss_hessian_infonce(const Vector& logits, double temperature) {
    if (!logits.allFinite() || !std::isfinite(temperature)) throw ValueError("loss_hessian_infonce: non-finite input");
    const Vector pi = softmax(temperature * logits);
    Matrix lam = -pi * pi.transpose();
    lam.diagonal() += pi;
    return lam;
}

// (t^2/n) sum_j s(a_ij)(1 - s(a_ij)) h_j h_j^T with a_ij = z_ij (t g^T h_j + b).
inline Matrix loss_hessian_siglip(const Vector& g_hat, const LossContext& ctx, Eigen::Index pair_index) {
    const Matrix& h = ctx.batch_embeddings;
    if (pair_index < 0 || pair_index >= h.rows())
        throw ArgError("loss_hessian_siglip: pair index " + std::to_string(pair_index) + " out of range");
    if (h.cols() != g_hat.size()) throw ArgError("loss_hessian_siglip: dimension mismatch");
    const double t = ctx.temperature;
    Vector w(h.rows());
    for (Eigen::Index j = 0; j < h.rows(); ++j) {
        const double z = (j == pair_index) ? 1.0 : -1.0;
        const double s = sigmoid(z * (t * g_hat.dot(h.row(j))) + z * ctx.bias);
        w(j) = s * (1.0 - s);
    }
    return (t * t / static_cast<double>(h.rows())) * (h.transpose() * w.asDiagonal() * h);
}

// Per-sample GGN block J^T Lambda J with respect to the unnormalized
// embedding g. For InfoNCE the logits are t * H^ g^, so the chain rule
// carries t^2; the block is formed as
//   t^2 M (H^T (pi . H) - (H^T pi)(H^T pi)^T) M
// without materializing the n_batch x n_batch Lambda.
inline Matrix sample_curvature(const Vector& g, const LossContext& ctx, Eigen::Index pair_index) {
    const Matrix m = jacobian_siglip(g);
    const Matrix& h = ctx.batch_embeddings;
    if (h.cols() != g.size()) throw ArgError("sample_curvature: dimension mismatch");
    if (ctx.loss_kind == LossKind::SigLIP) {
        const Vector g_hat = g / g.norm();
        return m * loss_hessian_siglip(g_hat, ctx, pair_index) * m;
    }
    const double t = ctx.temperature;
    const Vector pi = softmax(t * (h * (g / g.norm())));
    const Vector hp = h.transpose() * pi;
    const Matrix inner = h.transpose() * pi.asDiagonal() * h - hp * hp.transpose();
    return (t * t) * (m * inner * m);
}

namespace detail {

// Pairwise summation of per-sample factor contributions over [lo, hi).
inline void pairwise_factor_sums(const Matrix& feats, const Matrix& embeds, const LossContext& ctx,
                                 Eigen::Index lo, Eigen::Index hi, Matrix& a_sum, Matrix& b_sum) {
    constexpr Eigen::Index kLeaf = 16;
    if (hi - lo <= kLeaf) {
        a_sum.setZero();
        b_sum.setZero();
        for (Eigen::Index i = lo; i < hi; ++i) {
            const Vector phi = feats.row(i).transpose();
            a_sum.noalias() += phi * phi.transpose();
            const Vector g = embeds.row(i).transpose();
            // A zero embedding has no defined normalization Jacobian; it adds no curvature.
            if (g.norm() >= kMinNorm) b_sum += sample_curvature(g, ctx, i);
        }
        return;
    }
    const Eigen::Index mid = lo + (hi - lo) / 2;
    Matrix a_right(a_sum.rows(), a_sum.cols()), b_right(b_sum.rows(), b_sum.cols());
    pairwise_factor_sums(feats, embeds, ctx, lo, mid, a_sum, b_sum);
    pairwise_factor_sums(feats, embeds, ctx, mid, hi, a_right, b_right);
    a_sum += a_right;
    b_sum += b_right;
}

}  // namespace detail

// KFAC GGN factors of one projection from a batch of encoder features:
//   A = 1/sqrt(n) sum phi phi^T,  B = 1/sqrt(n) sum J^T Lambda J.
// For SigLIP, row i of the features is paired with row i of the context.
inline KroneckerFactors accumulate_factors(const Matrix& features, const LossContext& ctx, const Matrix& map_proj) {
    const Eigen::Index n = features.rows();
    if (n < 1) throw ArgError("accumulate_factors: no samples");
    if (map_proj.cols() != features.cols())
        throw ArgError("accumulate_factors: projection has " + std::to_string(map_proj.cols()) +
                       " columns but features have " + std::to_string(features.cols()));
    if (ctx.batch_embeddings.cols() != map_proj.rows())
        throw ArgError("accumulate_factors: context dimension does not match projection output");
    if (ctx.loss_kind == LossKind::SigLIP && ctx.batch_embeddings.rows() != n)
        throw ArgError("accumulate_factors: SigLIP needs one paired context row per sample");
    ctx.validate();

    const Matrix embeds = features * map_proj.transpose();
    Matrix a_sum(features.cols(), features.cols()), b_sum(map_proj.rows(), map_proj.rows());
    detail::pairwise_factor_sums(features, embeds, ctx, 0, n, a_sum, b_sum);
    const double scale = 1.0 / std::sqrt(static_cast<double>(n));
    return {symmetrize(a_sum * scale), symmetrize(b_sum * scale), static_cast<std::size_t>(n)};
}

inline KroneckerFactors accumulate_factors(const EmbeddingMatrix& features, const LossContext& ctx,
                                           const EmbeddingMatrix& map_proj) {
    return accumulate_factors(features.to_eigen(), ctx, map_proj.to_eigen());
}

// Combines factors estimated on disjoint sample sets; the result equals a
// single accumulation over the union.
inline KroneckerFactors merge_factors(const KroneckerFactors& x, const KroneckerFactors& y) {
    if (x.n_effective == 0) return y;
    if (y.n_effective == 0) return x;
    const double nx = std::sqrt(static_cast<double>(x.n_effective));
    const double ny = std::sqrt(static_cast<double>(y.n_effective));
    const double nt = std::sqrt(static_cast<double>(x.n_effective + y.n_effective));
    return {(nx * x.a_factor + ny * y.a_factor) / nt, (nx * x.b_factor + ny * y.b_factor) / nt,
            x.n_effective + y.n_effective};
}

struct TildeFactors {
    SpdFactor a;
    SpdFactor b;
};

inline TildeFactors tilde_factors(const KroneckerFactors& f, double tau, double lam) {
    const double st = std::sqrt(tau), sl = std::sqrt(lam);
    Matrix a = st * symmetrize(f.a_factor);
    a.diagonal().array() += sl;
    Matrix b = st * symmetrize(f.b_factor);
    b.diagonal().array() += sl;
    return {cholesky_with_jitter(a, "A~"), cholesky_with_jitter(b, "B~")};
}

inline KfacPosterior assemble_posterior(const Matrix& map, const KroneckerFactors& factors, double tau, double lam) {
    if (!(tau > 0.0) || !(lam > 0.0)) throw ArgError("assemble_posterior: tau and lam must be positive");
    if (factors.a_factor.rows() != map.cols() || factors.b_factor.rows() != map.rows())
        throw ArgError("assemble_posterior: factor dimensions do not match the projection");
    if (!factors.a_factor.allFinite() || !factors.b_factor.allFinite())
        throw NumericalError("assemble_posterior: non-finite factors");
    const TildeFactors t = tilde_factors(factors, tau, lam);
    KfacPosterior post;
    post.map = map;
    post.factors = factors;
    post.tau = tau;
    post.lam = lam;
    post.a_tilde_inv = t.a.inverse();
    post.b_tilde_inv = t.b.inverse();
    if (!post.a_tilde_inv.allFinite() || !post.b_tilde_inv.allFinite())
        throw NumericalError("assemble_posterior: non-finite inverse");
    return post;
}

// Max elementwise deviation of (sqrt(tau) X + sqrt(lam) I) * X~^{-1} from I
// over both factors.
inline double inverse_check_error(const KfacPosterior& post) {
    auto dev = [&](const Matrix& f, const Matrix& inv) {
        Matrix t = std::sqrt(post.tau) * f;
        t.diagonal().array() += std::sqrt(post.lam);
        return (t * inv - Matrix::Identity(f.rows(), f.cols())).cwiseAbs().maxCoeff();
    };
    return std::max(dev(post.factors.a_factor, post.a_tilde_inv), dev(post.factors.b_factor, post.b_tilde_inv));
}

// Distribution of g = P phi: N(map phi, (phi^T A~^{-1} phi) B~^{-1}),
// keeping only the diagonal of B~^{-1}.
inline GaussianEmbedding embed_gaussian(const KfacPosterior& post, const Vector& feature) {
    if (feature.size() != post.d_in())
        throw ArgError("embed_gaussian: feature has " + std::to_string(feature.size()) + " dims, expected " +
                       std::to_string(post.d_in()));
    const double s = std::max(0.0, feature.dot(post.a_tilde_inv * feature));
    return {post.map * feature, s * post.b_tilde_inv.diagonal()};
}

// Log-likelihood of the fit batch at the MAP. For InfoNCE row i is the
// positive for context row i; for SigLIP the pairwise sigmoid terms are
// averaged over the batch as in the training loss.
inline double log_likelihood_at_map(const Matrix& features, const LossContext& ctx, const Matrix& map_proj) {
    if (ctx.batch_embeddings.rows() != features.rows())
        throw ArgError("log_likelihood_at_map: needs one paired context row per sample");
    const Matrix g_hat = normalize_rows(Matrix(features * map_proj.transpose()));
    const Matrix sims = g_hat * ctx.batch_embeddings.transpose();
    double ll = 0.0;
    const auto n = features.rows();
    for (Eigen::Index i = 0; i < n; ++i) {
        if (ctx.loss_kind == LossKind::InfoNCE) {
            ll += log_softmax(ctx.temperature * sims.row(i).transpose())(i);
        } else {
            double acc = 0.0;
            for (Eigen::Index j = 0; j < n; ++j) {
                const double z = (i == j) ? 1.0 : -1.0;
                const double a = z * (ctx.temperature * sims(i, j) + ctx.bias);
                acc += (a >= 0.0) ? -std::log1p(std::exp(-a)) : a - std::log1p(std::exp(a));
            }
            ll += acc / static_cast<double>(n);
        }
    }
    return ll;
}

// Laplace evidence as a function of u = log(lam), evaluated through the
// eigenvalues of A and B:
//   loglik - 1/2 (lam |MAP|_F^2 - log det Sigma - D log lam),
//   log det Sigma = -(d_out log det A~ + d_in log det B~).
class MarginalObjective {
public:
    MarginalObjective(const KroneckerFactors& f, const Matrix& map, double loglik_at_map, double tau)
        : sq_norm_(map.squaredNorm()),
          loglik_(loglik_at_map),
          sqrt_tau_(std::sqrt(tau)),
          d_in_(static_cast<double>(map.cols())),
          d_out_(static_cast<double>(map.rows())) {
        Eigen::SelfAdjointEigenSolver<Matrix> ea(symmetrize(f.a_factor), Eigen::EigenvaluesOnly);
        Eigen::SelfAdjointEigenSolver<Matrix> eb(symmetrize(f.b_factor), Eigen::EigenvaluesOnly);
        if (ea.info() != Eigen::Success || eb.info() != Eigen::Success)
            throw NumericalError("marginal likelihood: eigendecomposition failed");
        a_eig_ = ea.eigenvalues().cwiseMax(0.0);
        b_eig_ = eb.eigenvalues().cwiseMax(0.0);
    }

    double value(double log_lam) const {
        const double lam = std::exp(log_lam), sl = std::exp(0.5 * log_lam);
        const double logdet_a = (sqrt_tau_ * a_eig_.array() + sl).log().sum();
        const double logdet_b = (sqrt_tau_ * b_eig_.array() + sl).log().sum();
        const double logdet_sigma = -(d_out_ * logdet_a + d_in_ * logdet_b);
        return loglik_ - 0.5 * (lam * sq_norm_ - logdet_sigma - d_in_ * d_out_ * log_lam);
    }

    double gradient(double log_lam) const {
        const double lam = std::exp(log_lam), sl = std::exp(0.5 * log_lam);
        const double ta = (0.5 * sl / (sqrt_tau_ * a_eig_.array() + sl)).sum();
        const double tb = (0.5 * sl / (sqrt_tau_ * b_eig_.array() + sl)).sum();
        return -0.5 * (lam * sq_norm_ + d_out_ * ta + d_in_ * tb - d_in_ * d_out_);
    }

private:
    double sq_norm_;
    double loglik_;
    double sqrt_tau_;
    double d_in_;
    double d_out_;
    Vector a_eig_;
    Vector b_eig_;
};

inline double marginal_log_likelihood(const KfacPosterior& post, double loglik_at_map) {
    const TildeFactors t = tilde_factors(post.factors, post.tau, post.lam);
    const double logdet_sigma =
        -(static_cast<double>(post.d_out()) * t.a.log_det() + static_cast<double>(post.d_in()) * t.b.log_det());
    const double d = static_cast<double>(post.d_in() * post.d_out());
    return loglik_at_map - 0.5 * (post.lam * post.map.squaredNorm() - logdet_sigma - d * std::log(post.lam));
}

inline double marginal_log_likelihood_grad(const KfacPosterior& post, double loglik_at_map) {
    return MarginalObjective(post.factors, post.map, loglik_at_map, post.tau).gradient(std::log(post.lam));
}

struct PriorPrecisionFit {
    double lam = 1.0;
    double objective = 0.0;
    double gradient = 0.0;
    int iterations = 0;
    bool converged = false;  // false mirrors a convergence warning; lam is the best iterate
};

// Gradient ascent on log(lam) with step-halving; the step length after an
// accepted move is a Barzilai-Borwein estimate.
inline PriorPrecisionFit tune_prior_precision(const KroneckerFactors& factors, const Matrix& map, double loglik_at_map,
                                              double init_lam, double tau = 1.0, int max_iter = 500,
                                              double grad_tol = 1e-6) {
    if (!(init_lam > 0.0)) throw ArgError("tune_prior_precision: init_lam must be positive");
    const MarginalObjective obj(factors, map, loglik_at_map, tau);
    double u = std::log(init_lam);
    double f = obj.value(u);
    double g = obj.gradient(u);
    double step = 1.0;
    PriorPrecisionFit fit;
    for (fit.iterations = 0; fit.iterations < max_iter; ++fit.iterations) {
        if (std::abs(g) <= grad_tol) {
            fit.converged = true;
            break;
        }
        bool accepted = false;
        for (int halvings = 0; halvings < 60; ++halvings) {
            const double u_new = u + step * g;
            const double f_new = obj.value(u_new);
            if (std::isfinite(f_new) && f_new >= f) {
                const double g_new = obj.gradient(u_new);
                const double du = u_new - u, dg = g_new - g;
                step = (dg < 0.0) ? std::clamp(-du / dg, 1e-6, 1e6) : step * 2.0;
                u = u_new;
                f = f_new;
                g = g_new;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if (!accepted) break;  // no ascent possible at machine precision
    }
    if (std::abs(g) <= grad_tol) fit.converged = true;
    fit.lam = std::exp(u);
    fit.objective = f;
    fit.gradient = g;
    return fit;
}

// On-disk posterior: manifest.json + map.bvm, a_factor.bvm, b_factor.bvm.
struct PosteriorBundle {
    KfacPosterior posterior;
    LossKind loss_kind = LossKind::InfoNCE;
    double temperature = 1.0;
    double bias = 0.0;
    std::optional<double> loglik_at_map;  // kept so lam can be tuned later without the fit data
};

inline void save_posterior(const PosteriorBundle& b, const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
    save_matrix(EmbeddingMatrix::from_eigen(b.posterior.map), dir / "map.bvm");
    save_matrix(EmbeddingMatrix::from_eigen(b.posterior.factors.a_factor), dir / "a_factor.bvm");
    save_matrix(EmbeddingMatrix::from_eigen(b.posterior.factors.b_factor), dir / "b_factor.bvm");
    nlohmann::ordered_json j;
    j["tau"] = b.posterior.tau;
    j["lam"] = b.posterior.lam;
    j["n_effective"] = b.posterior.factors.n_effective;
    j["loss"] = to_string(b.loss_kind);
    j["temperature"] = b.temperature;
    j["bias"] = b.bias;
    if (b.loglik_at_map) j["loglik_at_map"] = *b.loglik_at_map;
    detail::write_file(dir / "manifest.json", j.dump(2) + "\n");
}

// Tilde inverses are recomputed and re-verified on load.
inline PosteriorBundle load_posterior(const fs::path& dir) {
    nlohmann::json j;
    try {
        std::ifstream in(dir / "manifest.json");
        if (!in) throw IoError("cannot open " + (dir / "manifest.json").string());
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError((dir / "manifest.json").string() + ": " + e.what());
    }
    PosteriorBundle b;
    KroneckerFactors f;
    Matrix map;
    double tau = 1.0, lam = 1.0;
    try {
        tau = j.at("tau").get<double>();
        lam = j.at("lam").get<double>();
        f.n_effective = j.at("n_effective").get<std::size_t>();
        b.loss_kind = parse_loss_kind(j.at("loss").get<std::string>());
        b.temperature = j.at("temperature").get<double>();
        b.bias = j.value("bias", 0.0);
        if (j.contains("loglik_at_map")) b.loglik_at_map = j["loglik_at_map"].get<double>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError((dir / "manifest.json").string() + ": " + e.what());
    }
    map = load_matrix(dir / "map.bvm").to_eigen();
    f.a_factor = load_matrix(dir / "a_factor.bvm").to_eigen();
    f.b_factor = load_matrix(dir / "b_factor.bvm").to_eigen();
    if (f.a_factor.rows() != map.cols() || f.a_factor.cols() != map.cols() || f.b_factor.rows() != map.rows() ||
        f.b_factor.cols() != map.rows())
        throw FormatError(dir.string() + ": factor shapes do not match map.bvm");
    b.posterior = assemble_posterior(map, f, tau, lam);
    const double err = inverse_check_error(b.posterior);
    if (!(err <= 1e-6)) throw NumericalError(dir.string() + ": inverse check failed (" + std::to_string(err) + ")");
    return b;
}

}  // namespace bayesduo
