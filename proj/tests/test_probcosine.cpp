#include <gtest/gtest.h>

#include <numbers>

#include "bayesduo/probcosine.hpp"
#include "oracles.hpp"

using namespace bayesduo;

namespace {

GaussianEmbedding ge(std::initializer_list<double> mean, std::initializer_list<double> var) {
    GaussianEmbedding g;
    g.mean = Vector::Map(std::data(mean), static_cast<Eigen::Index>(mean.size()));
    g.var = Vector::Map(std::data(var), static_cast<Eigen::Index>(var.size()));
    return g;
}

GaussianEmbedding random_embedding(Rng& rng, Eigen::Index d, double sd_scale) {
    GaussianEmbedding g{rng.normal_vector(d), Vector()};
    const double cap = sd_scale * g.mean.norm() / std::sqrt(static_cast<double>(d));
    g.var = Vector(d);
    for (auto& v : g.var) v = std::pow(cap * rng.uniform(), 2);
    return g;
}

}  // namespace

TEST(ProbCosine, HandCases) {
    auto self = probcosine_moments(ge({1, 0}, {0, 0}), ge({1, 0}, {0, 0}));
    EXPECT_EQ(self.mean, 1.0);
    EXPECT_EQ(self.var, 0.0);
    auto orth = probcosine_moments(ge({1, 0}, {0, 0}), ge({0, 1}, {0, 0}));
    EXPECT_EQ(orth.mean, 0.0);
    EXPECT_EQ(orth.var, 0.0);
    auto noisy = probcosine_moments(ge({1, 0}, {0.01, 0.01}), ge({1, 0}, {0, 0}));
    EXPECT_NEAR(noisy.mean, 1.0 / std::sqrt(1.02), 1e-12);
    EXPECT_NEAR(noisy.var, 0.01 / 1.02, 1e-12);
    EXPECT_THROW(probcosine_moments(ge({0, 0}, {0, 0}), ge({1, 0}, {0, 0})), DegenerateInputError);
    EXPECT_THROW(probcosine_moments(ge({1, 0, 0}, {0, 0, 0}), ge({1, 0}, {0, 0})), ArgError);
}

TEST(ProbCosine, HandCaseAgreesWithMonteCarlo) {
    const auto g = ge({1, 0}, {0.01, 0.01}), h = ge({1, 0}, {0, 0});
    const auto mc = oracle::mc_cosine(g.mean, g.var.cwiseSqrt(), h.mean, h.var.cwiseSqrt(), 200000, 3);
    EXPECT_LE(std::abs(probcosine_moments(g, h).mean - mc.mean), 3 * mc.se);
}

TEST(ProbCosine, ZeroVarianceAndSymmetry) {
    Rng rng(1);
    for (int trial = 0; trial < 1000; ++trial) {
        const auto g = random_embedding(rng, 6, 1.0), h = random_embedding(rng, 6, 1.0);
        const auto z = probcosine_moments(GaussianEmbedding::point(g.mean), GaussianEmbedding::point(h.mean));
        EXPECT_NEAR(z.mean, oracle::plain_cosine(g.mean, h.mean), 1e-12);
        EXPECT_EQ(z.var, 0.0);
        const auto a = probcosine_moments(g, h), b = probcosine_moments(h, g);
        EXPECT_EQ(a.mean, b.mean);
        EXPECT_EQ(a.var, b.var);
        EXPECT_LE(std::abs(a.mean), 1.0 + 1e-9);
        EXPECT_GE(a.var, 0.0);
    }
}

TEST(McCosine, DeterministicAndExactAtZeroVariance) {
    const auto g = ge({1, 2}, {0.1, 0.2}), h = ge({0.5, -1}, {0.3, 0.0});
    const auto a = mc_cosine_oracle(g, h, 1000, 9), b = mc_cosine_oracle(g, h, 1000, 9);
    EXPECT_EQ(a.mean, b.mean);
    EXPECT_EQ(a.var, b.var);
    const auto z = mc_cosine_oracle(GaussianEmbedding::point(g.mean), GaussianEmbedding::point(h.mean), 10, 0);
    EXPECT_NEAR(z.mean, cosine(g.mean, h.mean), 1e-15);
    EXPECT_NEAR(z.var, 0.0, 1e-28);
    EXPECT_THROW(mc_cosine_oracle(g, h, 1, 0), ArgError);
}

TEST(Probit, HandCases) {
    Vector e(2), v(2);
    e << 1, 0;
    v << 24 / std::numbers::pi, 24 / std::numbers::pi;
    const auto p = probit_predictive(e, v, 1.0);
    EXPECT_NEAR(p.probs(0), 0.62245933, 1e-8);
    EXPECT_NEAR(p.probs(1), 0.37754067, 1e-8);
    e << 0.3, 0.3;
    v << 0.7, 0.7;
    const auto u = probit_predictive(e, v, 13.0);
    EXPECT_NEAR(u.probs(0), 0.5, 1e-15);
    Vector bad = e;
    bad(0) = std::numeric_limits<double>::quiet_NaN();
    EXPECT_THROW(probit_predictive(bad, v, 1.0), ValueError);
}

TEST(Probit, ZeroAndTinyVarianceMatchSoftmax) {
    Rng rng(2);
    for (int trial = 0; trial < 100; ++trial) {
        const Vector e = rng.normal_vector(5).cwiseMin(1.0).cwiseMax(-1.0);
        const Vector ref = oracle::plain_softmax(20.0 * e);
        EXPECT_LE((probit_predictive(e, Vector::Zero(5), 20.0).probs - ref).cwiseAbs().maxCoeff(), 1e-12);
        EXPECT_LE((probit_predictive(e, Vector::Constant(5, 1e-12), 20.0).probs - ref).cwiseAbs().maxCoeff(), 1e-8);
    }
}

TEST(Probit, SharedVarianceRaisesEntropy) {
    Rng rng(3);
    for (int trial = 0; trial < 50; ++trial) {
        const Vector e = rng.normal_vector(4) * 0.3;
        double prev = -1.0;
        for (double v = 0.0; v <= 2.0; v += 0.05) {
            const double h = entropy(probit_predictive(e, Vector::Constant(4, v), 10.0));
            EXPECT_GE(h, prev - 1e-12);
            prev = h;
        }
    }
}

TEST(Entropy, HandCases) {
    EXPECT_EQ(entropy(Vector::Unit(3, 1)), 0.0);
    EXPECT_NEAR(entropy(Vector::Constant(4, 0.25)), std::log(4.0), 1e-15);
    const double s = 1.0 / (1.0 + std::exp(-1.0));
    Vector p(2);
    p << s, 1 - s;
    EXPECT_NEAR(entropy(p), 0.58220, 5e-6);
    EXPECT_NEAR(entropy(p), oracle::plain_entropy(p), 1e-15);
}

TEST(McPredictive, ZeroCovarianceEqualsMapSoftmax) {
    Rng rng(4);
    KfacPosterior post;
    post.map = rng.normal_matrix(3, 5);
    post.a_tilde_inv = Matrix::Zero(5, 5);
    post.b_tilde_inv = Matrix::Zero(3, 3);
    const Vector phi = rng.normal_vector(5);
    std::vector<GaussianEmbedding> cls;
    Vector logits(2);
    for (int c = 0; c < 2; ++c) {
        cls.push_back(GaussianEmbedding::point(rng.normal_vector(3)));
        logits(c) = 5.0 * oracle::plain_cosine(post.map * phi, cls.back().mean);
    }
    const auto p = mc_predictive_oracle(post, phi, cls, 50, 1, 5.0);
    EXPECT_LE((p.probs - oracle::plain_softmax(logits)).cwiseAbs().maxCoeff(), 1e-12);
    const auto q = mc_predictive_oracle(post, phi, cls, 50, 1, 5.0);
    EXPECT_EQ(p.probs, q.probs);
}

TEST(McPredictive, AgreesWithFullCovarianceOracle) {
    Rng rng(5);
    KroneckerFactors f{Matrix::Identity(4, 4) * 5.0, Matrix::Identity(3, 3) * 5.0, 10};
    const auto post = assemble_posterior(rng.normal_matrix(3, 4), f, 1.0, 1.0);
    const Vector phi = rng.normal_vector(4);
    std::vector<GaussianEmbedding> cls;
    std::vector<Vector> mu, var;
    for (int c = 0; c < 3; ++c) {
        cls.push_back({rng.normal_vector(3), Vector::Constant(3, 0.05)});
        mu.push_back(cls.back().mean);
        var.push_back(cls.back().var);
    }
    const auto lib = mc_predictive_oracle(post, phi, cls, 40000, 2, 4.0);
    const Vector ref = oracle::mc_predictive_full(post.map, post.a_tilde_inv, post.b_tilde_inv, phi, mu, var, 4.0, 40000, 7);
    EXPECT_LE(0.5 * (lib.probs - ref).cwiseAbs().sum(), 0.01);
}
