#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "bayesduo/embeddings_io.hpp"
#include "bayesduo/laplace.hpp"
#include "bayesduo/metrics.hpp"
#include "bayesduo/model.hpp"
#include "bayesduo/probcosine.hpp"
#include "bayesduo/random.hpp"

namespace bayesduo {

enum class AcquisitionKind { Random, TargetedRandom, Entropy, TargetedEntropy, BALD, TargetedBALD, EPIG };
enum class KnnMetric { ExpectedCosine, Wasserstein2Diag };

inline std::string to_string(AcquisitionKind k) {
    switch (k) {
        case AcquisitionKind::Random: return "random";
        case AcquisitionKind::TargetedRandom: return "targeted_random";
        case AcquisitionKind::Entropy: return "entropy";
        case AcquisitionKind::TargetedEntropy: return "targeted_entropy";
        case AcquisitionKind::BALD: return "bald";
        case AcquisitionKind::TargetedBALD: return "targeted_bald";
        case AcquisitionKind::EPIG: return "epig";
    }
    return "unknown";
}

inline AcquisitionKind parse_acquisition_kind(const std::string& s) {
    for (auto k : {AcquisitionKind::Random, AcquisitionKind::TargetedRandom, AcquisitionKind::Entropy,
                   AcquisitionKind::TargetedEntropy, AcquisitionKind::BALD, AcquisitionKind::TargetedBALD,
                   AcquisitionKind::EPIG})
        if (to_string(k) == s) return k;
    throw ArgError("unknown acquisition strategy '" + s + "'");
}

inline std::string to_string(KnnMetric m) {
    return m == KnnMetric::ExpectedCosine ? "expected_cosine" : "wasserstein2_diag";
}

inline KnnMetric parse_knn_metric(const std::string& s) {
    if (s == "expected_cosine") return KnnMetric::ExpectedCosine;
    if (s == "wasserstein2_diag") return KnnMetric::Wasserstein2Diag;
    throw ArgError("unknown k-NN metric '" + s + "'");
}

struct AcquisitionConfig {
    AcquisitionKind kind = AcquisitionKind::Random;
    std::size_t n_theta_samples = 64;
    std::size_t n_target_samples = 32;
    KnnMetric metric = KnnMetric::ExpectedCosine;
    std::uint64_t seed = 0;

    void validate() const {
        if (n_theta_samples < 1 || n_target_samples < 1) throw ArgError("AcquisitionConfig: sample counts must be >= 1");
    }
};

// ---------------------------------------------------------------------------
// Posterior-sample predictives

// Class probabilities under S posterior draws of the image projection:
// result[s] is n x C with rows softmax(t cos(P_s phi_i, h_c)). Class
// prototypes stay fixed.
inline std::vector<Matrix> sample_class_probs(const PosteriorSampler& sampler, const Matrix& features,
                                              const Matrix& class_protos, double temperature, std::size_t n_samples,
                                              Rng& rng) {
    const Matrix h_hat = normalize_rows(class_protos);
    std::vector<Matrix> out;
    out.reserve(n_samples);
    for (std::size_t s = 0; s < n_samples; ++s) {
        const Matrix p = sampler.sample(rng);
        const Matrix g = features * p.transpose();
        const Vector norms = g.rowwise().norm();
        if (!(norms.minCoeff() >= kMinNorm)) throw NumericalError("sampled embedding with zero norm");
        Matrix logits = (temperature * (g * h_hat.transpose())).array().colwise() / norms.array();
        logits.colwise() -= logits.rowwise().maxCoeff();
        logits = logits.array().exp();
        logits.array().colwise() /= logits.rowwise().sum().array();
        out.push_back(std::move(logits));
    }
    return out;
}

namespace detail {

// Elementwise -p log p with 0 log 0 = 0.
template <typename Derived>
auto neg_plogp(const Eigen::ArrayBase<Derived>& a) {
    return (a > 0.0).select(-a * a.max(1e-300).log(), 0.0);
}

}  // namespace detail

// Mutual information H[mean_s p_s] - mean_s H[p_s], clamped at zero.
inline double bald_from_samples(std::span<const Vector> per_sample) {
    if (per_sample.empty()) throw ArgError("bald_from_samples: no samples");
    Vector marginal = Vector::Zero(per_sample.front().size());
    double mean_entropy = 0.0;
    for (const auto& p : per_sample) {
        marginal += p;
        mean_entropy += entropy(p);
    }
    const double s = static_cast<double>(per_sample.size());
    marginal /= s;
    mean_entropy /= s;
    return std::max(0.0, entropy(marginal) - mean_entropy);
}

inline std::vector<double> bald_scores(const KfacPosterior& post, const Matrix& features, const Matrix& class_protos,
                                       std::size_t n_theta_samples, double temperature, std::uint64_t seed) {
    if (n_theta_samples < 2) throw ArgError("bald: need at least 2 posterior samples");
    const PosteriorSampler sampler(post);
    if (sampler.deterministic()) return std::vector<double>(static_cast<std::size_t>(features.rows()), 0.0);
    Rng rng(derive_seed(seed, "bald"));
    const auto samples = sample_class_probs(sampler, features, class_protos, temperature, n_theta_samples, rng);
    Matrix marginal = Matrix::Zero(features.rows(), class_protos.rows());
    Vector mean_entropy = Vector::Zero(features.rows());
    for (const auto& ps : samples) {
        marginal += ps;
        mean_entropy += detail::neg_plogp(ps.array()).rowwise().sum().matrix();
    }
    const double s = static_cast<double>(n_theta_samples);
    marginal /= s;
    mean_entropy /= s;
    const Vector h = detail::neg_plogp(marginal.array()).rowwise().sum().matrix();
    std::vector<double> out(static_cast<std::size_t>(features.rows()));
    for (Eigen::Index i = 0; i < features.rows(); ++i) out[static_cast<std::size_t>(i)] = std::max(0.0, h(i) - mean_entropy(i));
    return out;
}

inline double bald_score(const Vector& pool_feature, const KfacPosterior& post, const Matrix& class_protos,
                         std::size_t n_theta_samples, double temperature, std::uint64_t seed) {
    return bald_scores(post, pool_feature.transpose(), class_protos, n_theta_samples, temperature, seed).front();
}

// KL(p(y, y*) || p(y) p(y*)) from S paired samples of the candidate's and the
// target's predictive (rows of `pool` and `target`, each S x C).
inline double pair_information(const Matrix& pool, const Matrix& target) {
    if (pool.rows() != target.rows() || pool.rows() == 0) throw ArgError("pair_information: sample count mismatch");
    const double s = static_cast<double>(pool.rows());
    const Matrix joint = pool.transpose() * target / s;
    const Vector mx = pool.colwise().mean().transpose();
    const Vector my = target.colwise().mean().transpose();
    double kl = 0.0;
    for (Eigen::Index a = 0; a < joint.rows(); ++a)
        for (Eigen::Index b = 0; b < joint.cols(); ++b) {
            const double j = joint(a, b);
            if (j > 0.0) kl += j * std::log(j / (mx(a) * my(b)));
        }
    return kl;
}

// Mean over targets of the pairwise information, clamped at zero.
inline double epig_from_samples(const Matrix& pool, std::span<const Matrix> targets) {
    if (targets.empty()) throw ArgError("epig: no target samples");
    double acc = 0.0;
    for (const auto& t : targets) acc += pair_information(pool, t);
    return std::max(0.0, acc / static_cast<double>(targets.size()));
}

// EPIG for every row of `pool_features`. Targets x* are drawn uniformly
// (with replacement) from `target_features`; the same posterior draws are
// shared by candidates and targets.
inline std::vector<double> epig_scores(const KfacPosterior& post, const Matrix& pool_features,
                                       const Matrix& target_features, const Matrix& class_protos,
                                       const AcquisitionConfig& cfg, double temperature) {
    cfg.validate();
    if (target_features.rows() == 0) throw ArgError("epig: empty target set");
    if (cfg.n_theta_samples < 2) throw ArgError("epig: need at least 2 posterior samples");
    const PosteriorSampler sampler(post);
    if (sampler.deterministic()) return std::vector<double>(static_cast<std::size_t>(pool_features.rows()), 0.0);
    Rng rng(derive_seed(cfg.seed, "epig"));
    Matrix targets(static_cast<Eigen::Index>(cfg.n_target_samples), target_features.cols());
    for (Eigen::Index j = 0; j < targets.rows(); ++j)
        targets.row(j) = target_features.row(static_cast<Eigen::Index>(rng.index(static_cast<std::size_t>(target_features.rows()))));

    const Eigen::Index n = pool_features.rows();
    Matrix stacked(n + targets.rows(), pool_features.cols());
    stacked << pool_features, targets;
    const auto samples = sample_class_probs(sampler, stacked, class_protos, temperature, cfg.n_theta_samples, rng);

    const auto S = static_cast<Eigen::Index>(cfg.n_theta_samples);
    const Eigen::Index C = class_protos.rows();
    const Eigen::Index T = targets.rows();
    // pool(x*C + y, s) = p_s(y | x); tgt(s, j*C + y*) = p_s(y* | x*_j)
    Matrix pool(n * C, S), tgt(S, T * C);
    for (Eigen::Index s = 0; s < S; ++s) {
        const Matrix& ps = samples[static_cast<std::size_t>(s)];
        const Matrix pool_t = ps.topRows(n).transpose();
        const Matrix tgt_t = ps.bottomRows(T).transpose();
        pool.col(s) = Eigen::Map<const Vector>(pool_t.data(), n * C);
        tgt.row(s) = Eigen::Map<const Eigen::RowVectorXd>(tgt_t.data(), T * C);
    }
    // Marginals of the joint are the sample-mean predictives, so
    // KL = H[p(y|x)] + H[p(y*|x*)] - H[p(y, y*|x, x*)].
    const Vector mx = pool.rowwise().mean();
    const Vector h_flat = detail::neg_plogp(mx.array()).matrix();
    const Vector h_pool = Eigen::Map<const Matrix>(h_flat.data(), C, n).colwise().sum().transpose();
    const Vector my = tgt.colwise().mean().transpose();
    const double h_targets = detail::neg_plogp(my.array()).sum();

    // Joint entropies summed over targets, in chunks to bound memory.
    constexpr Eigen::Index kChunk = 8;
    Vector h_joint_sum = Vector::Zero(n);
    for (Eigen::Index j0 = 0; j0 < T; j0 += kChunk) {
        const Eigen::Index k = std::min(kChunk, T - j0);
        const Matrix joint = pool * tgt.middleCols(j0 * C, k * C) / static_cast<double>(S);
        const Vector h_rows = detail::neg_plogp(joint.array()).rowwise().sum();
        h_joint_sum += Eigen::Map<const Matrix>(h_rows.data(), C, n).colwise().sum().transpose();
    }
    const Vector acc = static_cast<double>(T) * h_pool + Vector::Constant(n, h_targets) - h_joint_sum;
    std::vector<double> scores(acc.data(), acc.data() + n);
    for (auto& v : scores) v = std::max(0.0, v / static_cast<double>(targets.rows()));
    return scores;
}

inline double epig_score(const Vector& pool_feature, const Matrix& target_features, const KfacPosterior& post,
                         const Matrix& class_protos, const AcquisitionConfig& cfg, double temperature) {
    return epig_scores(post, pool_feature.transpose(), target_features, class_protos, cfg, temperature).front();
}

// ---------------------------------------------------------------------------
// Targeted selection

// Squared 2-Wasserstein distance between diagonal Gaussians.
inline double wasserstein2_diag(const GaussianEmbedding& a, const GaussianEmbedding& b) {
    if (a.dim() != b.dim()) throw ArgError("wasserstein2_diag: dimension mismatch");
    if ((a.var.array() < 0.0).any() || (b.var.array() < 0.0).any())
        throw ArgError("wasserstein2_diag: negative variance");
    double w = 0.0;
    for (Eigen::Index i = 0; i < a.dim(); ++i) {
        const double dm = a.mean(i) - b.mean(i);
        const double sa = std::sqrt(a.var(i)), sb = std::sqrt(b.var(i));
        w += dm * dm + (a.var(i) + b.var(i)) - 2.0 * sa * sb;
    }
    return std::max(0.0, w);
}

// Distance under the metric; smaller is nearer for both (expected cosine is
// negated).
inline double knn_distance(const GaussianEmbedding& test, const GaussianEmbedding& train, KnnMetric metric) {
    if (metric == KnnMetric::Wasserstein2Diag) return wasserstein2_diag(test, train);
    return -probcosine_moments(test, train).mean;
}

struct ScoredIndex {
    std::size_t index = 0;
    double score = 0.0;
};

// Ranks test points by score (descending, ties by ascending test index) and
// lets each claim its nearest unclaimed training point, walking outward when
// the nearest is taken. Passes repeat over the ranking until k_total
// distinct training indices are claimed. `excluded` holds already-used
// training indices.
inline std::vector<std::size_t> targeted_knn_select(std::span<const ScoredIndex> scored_test, std::size_t k_total,
                                                    std::span<const GaussianEmbedding> train,
                                                    std::span<const GaussianEmbedding> test, KnnMetric metric,
                                                    const std::unordered_set<std::size_t>& excluded = {}) {
    std::size_t available = 0;
    for (std::size_t j = 0; j < train.size(); ++j) available += !excluded.contains(j);
    if (k_total > available)
        throw ArgError("targeted_knn_select: requested " + std::to_string(k_total) + " but only " +
                       std::to_string(available) + " candidates remain");
    if (k_total == 0) return {};
    if (scored_test.empty()) throw ArgError("targeted_knn_select: no test points");

    std::vector<ScoredIndex> ranked(scored_test.begin(), scored_test.end());
    std::stable_sort(ranked.begin(), ranked.end(), [](const ScoredIndex& a, const ScoredIndex& b) {
        if (a.score != b.score) return a.score > b.score;
        return a.index < b.index;
    });

    std::unordered_set<std::size_t> claimed = excluded;
    std::vector<std::size_t> out;
    // Per test point: training indices ordered by distance, and a cursor.
    std::vector<std::vector<std::size_t>> order(ranked.size());
    std::vector<std::size_t> cursor(ranked.size(), 0);
    auto neighbours = [&](std::size_t r) -> const std::vector<std::size_t>& {
        if (order[r].empty()) {
            const auto& t = test[ranked[r].index];
            std::vector<std::pair<double, std::size_t>> d;
            d.reserve(train.size());
            for (std::size_t j = 0; j < train.size(); ++j) d.emplace_back(knn_distance(t, train[j], metric), j);
            std::sort(d.begin(), d.end());
            order[r].reserve(d.size());
            for (const auto& [dist, j] : d) order[r].push_back(j);
        }
        return order[r];
    };
    while (out.size() < k_total) {
        for (std::size_t r = 0; r < ranked.size() && out.size() < k_total; ++r) {
            if (ranked[r].index >= test.size()) throw ArgError("targeted_knn_select: test index out of range");
            const auto& nb = neighbours(r);
            while (cursor[r] < nb.size() && claimed.contains(nb[cursor[r]])) ++cursor[r];
            if (cursor[r] == nb.size()) continue;
            claimed.insert(nb[cursor[r]]);
            out.push_back(nb[cursor[r]]);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Online Laplace

struct OnlineLaplaceState {
    KfacPosterior posterior;
    std::size_t t_step = 0;
    double gamma = 1e-4;  // MAP step size
    double beta = 10.0;   // weight of the new sample in the factor update
};

// Gradient of -log softmax(t H^ g^)_label with respect to the projection.
inline Matrix classification_gradient(const Matrix& proj, const Vector& feature, int label, const LossContext& ctx) {
    const Vector g = proj * feature;
    const Matrix jac = jacobian_infonce(g, ctx);
    const Vector pi = softmax(ctx.temperature * (ctx.batch_embeddings * (g / g.norm())));
    Vector resid = pi;
    resid(label) -= 1.0;
    const Vector grad_g = ctx.temperature * (jac.transpose() * resid);
    return grad_g * feature.transpose();
}

inline double classification_loss(const Matrix& proj, const Vector& feature, int label, const LossContext& ctx) {
    const Vector g = proj * feature;
    if (!(g.norm() >= kMinNorm)) throw DegenerateInputError("classification_loss: zero embedding");
    return -log_softmax(ctx.temperature * (ctx.batch_embeddings * (g / g.norm())))(label);
}

// One labeled support point: a gradient step on the MAP and
//   A <- (sqrt(n+t) A + beta phi phi^T) / sqrt(n+t+1), B likewise with J^T Lambda J.
// `ctx` holds the unit-norm class prototypes.
inline OnlineLaplaceState online_update(const OnlineLaplaceState& state, const Vector& feature, int label,
                                        const LossContext& ctx) {
    if (state.gamma < 0.0 || state.beta < 0.0) throw ArgError("online_update: gamma and beta must be >= 0");
    if (label < 0 || label >= ctx.batch_embeddings.rows()) throw ArgError("online_update: label out of range");
    const KfacPosterior& post = state.posterior;
    if (feature.size() != post.d_in()) throw ArgError("online_update: feature dimension mismatch");

    Matrix map = post.map;
    const Vector g = post.map * feature;
    if (!(g.norm() >= kMinNorm)) throw DegenerateInputError("online_update: zero embedding");
    if (state.gamma != 0.0) {
        const Matrix grad = classification_gradient(post.map, feature, label, ctx);
        if (!grad.allFinite()) throw NumericalError("online_update: non-finite gradient");
        map -= state.gamma * grad;
    }

    const double n_t = static_cast<double>(post.factors.n_effective + state.t_step);
    const double keep = std::sqrt(n_t), norm = std::sqrt(n_t + 1.0);
    KroneckerFactors f = post.factors;
    f.a_factor = (keep * post.factors.a_factor + state.beta * (feature * feature.transpose())) / norm;
    f.b_factor = (keep * post.factors.b_factor + state.beta * sample_curvature(g, ctx, label)) / norm;
    f.a_factor = symmetrize(f.a_factor);
    f.b_factor = symmetrize(f.b_factor);

    OnlineLaplaceState next = state;
    next.posterior = assemble_posterior(map, f, post.tau, post.lam);
    next.t_step = state.t_step + 1;
    return next;
}

// ---------------------------------------------------------------------------
// Active learning loop

struct CurvePoint {
    std::size_t budget = 0;
    double weighted_acc = 0.0;
    double nlpd = 0.0;
};

struct ActiveState {
    std::vector<std::pair<std::size_t, int>> support;  // (pool index, label)
    std::set<std::size_t> pool_indices;                // not yet acquired
    std::set<std::size_t> test_indices;
    OnlineLaplaceState online;
    std::vector<CurvePoint> curve;
};

struct ActiveProblem {
    Matrix pool_features;
    std::vector<int> pool_labels;  // label oracle
    Matrix test_features;
    std::vector<int> test_labels;  // evaluation only
    Matrix class_protos;           // C x d_out class embeddings (text side, fixed)
    double temperature = 1.0;
};

inline std::vector<GaussianEmbedding> class_gaussians(const ActiveProblem& p, const Matrix& class_var) {
    std::vector<GaussianEmbedding> out;
    for (Eigen::Index c = 0; c < p.class_protos.rows(); ++c) {
        GaussianEmbedding e{p.class_protos.row(c).transpose(), Vector::Zero(p.class_protos.cols())};
        if (class_var.size() > 0) e.var = class_var.row(c).transpose();
        out.push_back(std::move(e));
    }
    return out;
}

struct ActiveOptions {
    AcquisitionConfig acquisition;
    std::vector<std::size_t> budgets{0, 10, 25, 50, 75, 100, 150, 200};
    double gamma = 1e-4;
    double beta = 10.0;
    Matrix class_var;  // C x d_out diagonal variances of the class embeddings (may be empty)
};

namespace detail {

inline std::size_t argmax_over(std::span<const double> scores, std::span<const std::size_t> candidates) {
    std::size_t best = candidates.front();
    double best_score = scores[0];
    for (std::size_t k = 1; k < candidates.size(); ++k)
        if (scores[k] > best_score) {
            best_score = scores[k];
            best = candidates[k];
        }
    return best;
}

inline Matrix gather_rows(const Matrix& m, std::span<const std::size_t> idx) {
    Matrix out(static_cast<Eigen::Index>(idx.size()), m.cols());
    for (std::size_t k = 0; k < idx.size(); ++k) out.row(static_cast<Eigen::Index>(k)) = m.row(static_cast<Eigen::Index>(idx[k]));
    return out;
}

}  // namespace detail

// Evaluation on the test set with the current online posterior.
inline CurvePoint evaluate_checkpoint(const ActiveProblem& p, const KfacPosterior& post,
                                      std::span<const GaussianEmbedding> classes, std::size_t budget) {
    const Matrix probs = bayes_predict(post, classes, p.test_features, p.temperature);
    return {budget, weighted_accuracy(probs, p.test_labels), nlpd(probs, p.test_labels).value};
}

// Greedy loop: score, select one pool point, query its label, apply the
// online Laplace update, and record test metrics at each budget checkpoint.
inline ActiveState run_active_learning(const ActiveProblem& p, const KfacPosterior& initial,
                                       const ActiveOptions& opt) {
    opt.acquisition.validate();
    const auto& budgets = opt.budgets;
    if (budgets.empty()) throw ArgError("run_active_learning: no budgets");
    if (!std::is_sorted(budgets.begin(), budgets.end())) throw ArgError("run_active_learning: budgets must ascend");
    const auto n_pool = static_cast<std::size_t>(p.pool_features.rows());
    if (budgets.back() > n_pool) throw ArgError("run_active_learning: budget exceeds pool size");
    if (p.pool_labels.size() != n_pool || p.test_labels.size() != static_cast<std::size_t>(p.test_features.rows()))
        throw ArgError("run_active_learning: label counts do not match features");

    const auto classes = class_gaussians(p, opt.class_var);
    LossContext ctx{normalize_rows(p.class_protos), p.temperature, 0.0, LossKind::InfoNCE};

    ActiveState st;
    for (std::size_t i = 0; i < n_pool; ++i) st.pool_indices.insert(i);
    for (std::size_t i = 0; i < static_cast<std::size_t>(p.test_features.rows()); ++i) st.test_indices.insert(i);
    st.online.posterior = initial;
    st.online.gamma = opt.gamma;
    st.online.beta = opt.beta;

    const AcquisitionKind kind = opt.acquisition.kind;
    const bool targeted = kind == AcquisitionKind::TargetedRandom || kind == AcquisitionKind::TargetedEntropy ||
                          kind == AcquisitionKind::TargetedBALD;
    std::unordered_set<std::size_t> used;
    std::size_t next_budget = 0;
    auto record = [&] {
        while (next_budget < budgets.size() && budgets[next_budget] == st.support.size()) {
            st.curve.push_back(evaluate_checkpoint(p, st.online.posterior, classes, st.support.size()));
            ++next_budget;
        }
    };
    record();

    for (std::size_t step = 0; step < budgets.back(); ++step) {
        const std::uint64_t step_seed = derive_seed(opt.acquisition.seed, "active", step);
        Rng rng(step_seed);
        const KfacPosterior& post = st.online.posterior;
        std::vector<std::size_t> candidates(st.pool_indices.begin(), st.pool_indices.end());
        std::size_t chosen = 0;

        if (targeted) {
            std::vector<double> test_scores;
            const auto n_test = static_cast<std::size_t>(p.test_features.rows());
            if (kind == AcquisitionKind::TargetedRandom) {
                for (std::size_t i = 0; i < n_test; ++i) test_scores.push_back(rng.uniform());
            } else if (kind == AcquisitionKind::TargetedEntropy) {
                const Matrix probs = map_predict(post.map, p.class_protos, p.test_features, p.temperature);
                for (Eigen::Index i = 0; i < probs.rows(); ++i) test_scores.push_back(entropy(Vector(probs.row(i).transpose())));
            } else {
                test_scores = bald_scores(post, p.test_features, p.class_protos, opt.acquisition.n_theta_samples,
                                          p.temperature, step_seed);
            }
            std::vector<ScoredIndex> scored;
            for (std::size_t i = 0; i < n_test; ++i) scored.push_back({i, test_scores[i]});
            const auto train_g = embed_rows(post, p.pool_features);
            const auto test_g = embed_rows(post, p.test_features);
            chosen = targeted_knn_select(scored, 1, train_g, test_g, opt.acquisition.metric, used).front();
        } else {
            const Matrix cand = detail::gather_rows(p.pool_features, candidates);
            std::vector<double> scores;
            switch (kind) {
                case AcquisitionKind::Random:
                    chosen = candidates[rng.index(candidates.size())];
                    break;
                case AcquisitionKind::Entropy: {
                    const Matrix probs = map_predict(post.map, p.class_protos, cand, p.temperature);
                    for (Eigen::Index i = 0; i < probs.rows(); ++i) scores.push_back(entropy(Vector(probs.row(i).transpose())));
                    chosen = detail::argmax_over(scores, candidates);
                    break;
                }
                case AcquisitionKind::BALD:
                    scores = bald_scores(post, cand, p.class_protos, opt.acquisition.n_theta_samples, p.temperature,
                                         step_seed);
                    chosen = detail::argmax_over(scores, candidates);
                    break;
                case AcquisitionKind::EPIG: {
                    AcquisitionConfig cfg = opt.acquisition;
                    cfg.seed = step_seed;
                    scores = epig_scores(post, cand, p.test_features, p.class_protos, cfg, p.temperature);
                    chosen = detail::argmax_over(scores, candidates);
                    break;
                }
                default:
                    throw ArgError("run_active_learning: unhandled strategy");
            }
        }

        const int label = p.pool_labels[chosen];
        st.online = online_update(st.online, p.pool_features.row(static_cast<Eigen::Index>(chosen)).transpose(), label, ctx);
        st.support.emplace_back(chosen, label);
        st.pool_indices.erase(chosen);
        used.insert(chosen);
        record();
    }
    return st;
}

}  // namespace bayesduo
