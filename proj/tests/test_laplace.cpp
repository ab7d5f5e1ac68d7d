#include <gtest/gtest.h>

#include <Eigen/Eigenvalues>

#include "bayesduo/laplace.hpp"
#include "bayesduo/model.hpp"
#include "oracles.hpp"

using namespace bayesduo;

namespace {

LossContext random_ctx(Rng& rng, Eigen::Index n, Eigen::Index d, double t, LossKind kind = LossKind::InfoNCE,
                       double bias = 0.0) {
    return {normalize_rows(rng.normal_matrix(n, d)), t, bias, kind};
}

Matrix random_spd(Rng& rng, Eigen::Index d) {
    const Matrix x = rng.normal_matrix(d, d + 2);
    return x * x.transpose() / static_cast<double>(d);
}

double min_eig(const Matrix& m) { return Eigen::SelfAdjointEigenSolver<Matrix>(m).eigenvalues().minCoeff(); }

}  // namespace

TEST(NormalizeRows, Basics) {
    Matrix m(2, 2);
    m << 3, 4, 1, 0;
    const Matrix n = normalize_rows(m);
    EXPECT_NEAR(n(0, 0), 0.6, 1e-15);
    EXPECT_NEAR(n(0, 1), 0.8, 1e-15);
    EXPECT_EQ(n(1, 0), 1.0);
    EXPECT_THROW(normalize_rows(Matrix::Zero(1, 2)), DegenerateInputError);
}

TEST(Jacobian, SiglipHandCases) {
    const Matrix j = jacobian_siglip(Vector::Unit(2, 0) * 2.0);
    EXPECT_NEAR(j(0, 0), 0.0, 1e-15);
    EXPECT_NEAR(j(1, 1), 0.5, 1e-15);
    EXPECT_NEAR(j(0, 1), 0.0, 1e-15);
    const Matrix j2 = jacobian_siglip(Vector::Unit(3, 1));
    Matrix expect = Matrix::Identity(3, 3);
    expect(1, 1) = 0.0;
    EXPECT_LE((j2 - expect).cwiseAbs().maxCoeff(), 1e-15);
    EXPECT_THROW(jacobian_siglip(Vector::Zero(3)), DegenerateInputError);
}

TEST(Jacobian, InfonceUnitCase) {
    LossContext ctx{Matrix::Identity(2, 2), 1.0, 0.0, LossKind::InfoNCE};
    const Matrix j = jacobian_infonce(Vector::Unit(2, 0), ctx);
    EXPECT_NEAR(j(0, 0), 0.0, 1e-15);
    EXPECT_NEAR(j(0, 1), 0.0, 1e-15);
    EXPECT_NEAR(j(1, 0), 0.0, 1e-15);
    EXPECT_NEAR(j(1, 1), 1.0, 1e-15);
}

TEST(Jacobian, FiniteDifferenceAgreement) {
    Rng rng(11);
    for (int trial = 0; trial < 20; ++trial) {
        const Vector g = rng.normal_vector(4);
        const auto ctx = random_ctx(rng, 3, 4, 1.0);
        const Matrix fd = oracle::fd_jacobian([&](const Vector& x) { return Vector(ctx.batch_embeddings * oracle::unit(x)); }, g, 1e-5);
        EXPECT_LE((jacobian_infonce(g, ctx) - fd).cwiseAbs().maxCoeff(), 1e-6);
        const Matrix fds = oracle::fd_jacobian([](const Vector& x) { return oracle::unit(x); }, g, 1e-5);
        EXPECT_LE((jacobian_siglip(g) - fds).cwiseAbs().maxCoeff(), 1e-6);
        EXPECT_LE((jacobian_infonce(g, ctx) * g).cwiseAbs().maxCoeff(), 1e-9);
    }
}

TEST(LossHessian, InfonceHandCases) {
    const Matrix l2 = loss_hessian_infonce(Vector::Zero(2), 1.0);
    EXPECT_NEAR(l2(0, 0), 0.25, 1e-15);
    EXPECT_NEAR(l2(0, 1), -0.25, 1e-15);
    const Matrix l3 = loss_hessian_infonce(Vector::Zero(3), 1.0);
    const Matrix e3 = Matrix::Identity(3, 3) / 3.0 - Matrix::Constant(3, 3, 1.0 / 9.0);
    EXPECT_LE((l3 - e3).cwiseAbs().maxCoeff(), 1e-15);
    Vector z(2);
    z << 1, 0;
    const Matrix l = loss_hessian_infonce(z, 1.0);
    EXPECT_NEAR(l(0, 0), 0.19661193, 1e-8);
    EXPECT_NEAR(l(0, 1), -0.19661193, 1e-8);
    Vector bad(2);
    bad << 1, std::numeric_limits<double>::infinity();
    EXPECT_THROW(loss_hessian_infonce(bad, 1.0), ValueError);
}

TEST(LossHessian, SiglipHandCases) {
    LossContext ctx{Matrix::Identity(1, 2), 1.0, 0.0, LossKind::SigLIP};
    const Matrix l = loss_hessian_siglip(Vector::Unit(2, 0), ctx, 0);
    EXPECT_NEAR(l(0, 0), 0.19661193, 1e-8);
    EXPECT_NEAR(l(1, 1), 0.0, 1e-15);
    ctx.temperature = 0.0;
    EXPECT_TRUE(loss_hessian_siglip(Vector::Unit(2, 0), ctx, 0).isZero(0.0));
    EXPECT_THROW(loss_hessian_siglip(Vector::Unit(2, 0), ctx, 1), ArgError);
}

TEST(LossHessian, SiglipPsd) {
    Rng rng(3);
    for (int trial = 0; trial < 50; ++trial) {
        const auto ctx = random_ctx(rng, 5, 4, 3.0, LossKind::SigLIP, rng.normal());
        const Matrix l = loss_hessian_siglip(oracle::unit(rng.normal_vector(4)), ctx, trial % 5);
        EXPECT_GE(min_eig(l), -1e-10 * std::max(1.0, l.trace()));
    }
}

TEST(Factors, SingleSampleMatchesBruteForceGgn) {
    Rng rng(17);
    const Matrix proj = rng.normal_matrix(4, 5);
    const Vector phi = rng.normal_vector(5);
    const auto ctx = random_ctx(rng, 3, 4, 2.0);
    const auto f = accumulate_factors(Matrix(phi.transpose()), ctx, proj);
    const Matrix ggn = oracle::brute_force_ggn(proj, phi, ctx.batch_embeddings, ctx.temperature, 0);
    EXPECT_LE((kronecker(f.a_factor, f.b_factor) - ggn).norm() / ggn.norm(), 1e-4);
}

TEST(Factors, AllZeroFeatures) {
    Rng rng(1);
    const auto ctx = random_ctx(rng, 3, 2, 1.0);
    const auto f = accumulate_factors(Matrix::Zero(3, 4), ctx, rng.normal_matrix(2, 4));
    EXPECT_TRUE(f.a_factor.isZero(0.0));
}

TEST(Factors, DoublingScalesBySqrtTwo) {
    Rng rng(2);
    const Matrix feats = rng.normal_matrix(6, 4);
    const Matrix proj = rng.normal_matrix(3, 4);
    const auto ctx = random_ctx(rng, 5, 3, 4.0);
    const auto f1 = accumulate_factors(feats, ctx, proj);
    Matrix twice(12, 4);
    twice << feats, feats;
    const auto f2 = accumulate_factors(twice, ctx, proj);
    EXPECT_LE((f2.a_factor - std::sqrt(2.0) * f1.a_factor).norm(), 1e-12 * f1.a_factor.norm());
    EXPECT_LE((f2.b_factor - std::sqrt(2.0) * f1.b_factor).norm(), 1e-12 * f1.b_factor.norm());
}

TEST(Factors, OrderIndependentAndPsd) {
    Rng rng(4);
    const Matrix feats = rng.normal_matrix(100, 6);
    const Matrix proj = rng.normal_matrix(4, 6);
    const auto ctx = random_ctx(rng, 7, 4, 5.0);
    const auto f = accumulate_factors(feats, ctx, proj);
    Matrix rev = feats.colwise().reverse();
    const auto g = accumulate_factors(rev, ctx, proj);
    EXPECT_LE((f.a_factor - g.a_factor).norm(), 1e-6 * f.a_factor.norm());
    EXPECT_LE((f.b_factor - g.b_factor).norm(), 1e-6 * f.b_factor.norm());
    EXPECT_GE(min_eig(f.a_factor), -1e-8 * f.a_factor.trace() / 6);
    EXPECT_GE(min_eig(f.b_factor), -1e-8 * f.b_factor.trace() / 4);
}

TEST(Factors, MergeEqualsUnion) {
    Rng rng(6);
    const Matrix feats = rng.normal_matrix(10, 3);
    const Matrix proj = rng.normal_matrix(2, 3);
    const auto ctx = random_ctx(rng, 4, 2, 2.0);
    const auto all = accumulate_factors(feats, ctx, proj);
    const auto merged = merge_factors(accumulate_factors(Matrix(feats.topRows(4)), ctx, proj),
                                      accumulate_factors(Matrix(feats.bottomRows(6)), ctx, proj));
    EXPECT_EQ(merged.n_effective, 10u);
    EXPECT_LE((all.a_factor - merged.a_factor).norm(), 1e-12 * all.a_factor.norm());
    EXPECT_LE((all.b_factor - merged.b_factor).norm(), 1e-12 * all.b_factor.norm());
}

TEST(Factors, DimensionMismatch) {
    Rng rng(7);
    const auto ctx = random_ctx(rng, 3, 2, 1.0);
    EXPECT_THROW(accumulate_factors(Matrix::Ones(2, 5), ctx, rng.normal_matrix(2, 4)), ArgError);
    EXPECT_THROW(accumulate_factors(Matrix::Ones(2, 4), ctx, rng.normal_matrix(3, 4)), ArgError);
}

TEST(Posterior, HandCases) {
    KroneckerFactors f{Matrix::Zero(2, 2), Matrix::Zero(3, 3), 1};
    const auto p = assemble_posterior(Matrix::Zero(3, 2), f, 7.0, 4.0);
    EXPECT_LE((p.a_tilde_inv - Matrix::Identity(2, 2) / 2.0).cwiseAbs().maxCoeff(), 1e-15);
    EXPECT_LE((p.b_tilde_inv - Matrix::Identity(3, 3) / 2.0).cwiseAbs().maxCoeff(), 1e-15);
    KroneckerFactors g{Matrix::Identity(2, 2), Matrix::Identity(3, 3), 1};
    const auto q = assemble_posterior(Matrix::Zero(3, 2), g, 4.0, 1.0);
    EXPECT_LE((q.a_tilde_inv - Matrix::Identity(2, 2) / 3.0).cwiseAbs().maxCoeff(), 1e-15);
    EXPECT_LE((q.b_tilde_inv - Matrix::Identity(3, 3) / 3.0).cwiseAbs().maxCoeff(), 1e-15);
    EXPECT_THROW(assemble_posterior(Matrix::Zero(3, 2), g, 0.0, 1.0), ArgError);
    KroneckerFactors bad = g;
    bad.a_factor(0, 0) = std::numeric_limits<double>::quiet_NaN();
    EXPECT_THROW(assemble_posterior(Matrix::Zero(3, 2), bad, 1.0, 1.0), NumericalError);
}

TEST(Posterior, InverseCheckOnRandomFactors) {
    Rng rng(8);
    for (int trial = 0; trial < 20; ++trial) {
        KroneckerFactors f{random_spd(rng, 5), random_spd(rng, 3), 10};
        const auto p = assemble_posterior(rng.normal_matrix(3, 5), f, 1.0 + trial, 0.1 + 0.3 * trial);
        EXPECT_LE(inverse_check_error(p), 1e-6);
    }
}

TEST(EmbedGaussian, Cases) {
    KroneckerFactors f{Matrix::Zero(2, 2), Matrix::Zero(3, 3), 1};
    const auto p = assemble_posterior(Matrix::Ones(3, 2), f, 1.0, 1.0);
    const auto zero = embed_gaussian(p, Vector::Zero(2));
    EXPECT_TRUE(zero.mean.isZero(0.0));
    EXPECT_TRUE(zero.var.isZero(0.0));
    const auto e = embed_gaussian(p, Vector::Ones(2));
    EXPECT_LE((e.var - Vector::Constant(3, 2.0)).cwiseAbs().maxCoeff(), 1e-15);
    EXPECT_LE((e.mean - Vector::Constant(3, 2.0)).cwiseAbs().maxCoeff(), 1e-15);
    EXPECT_THROW(embed_gaussian(p, Vector::Ones(3)), ArgError);
}

TEST(Marginal, ZeroCurvatureUnitPrior) {
    KroneckerFactors f{Matrix::Zero(2, 2), Matrix::Zero(3, 3), 1};
    const auto p = assemble_posterior(Matrix::Zero(3, 2), f, 1.0, 1.0);
    EXPECT_NEAR(marginal_log_likelihood(p, 0.0), 0.0, 1e-12);
}

TEST(Marginal, GradientMatchesFiniteDifference) {
    Rng rng(9);
    for (int trial = 0; trial < 10; ++trial) {
        KroneckerFactors f{random_spd(rng, 3), random_spd(rng, 2), 5};
        const Matrix map = rng.normal_matrix(2, 3);
        const double lam = std::exp(rng.normal());
        const double ll = -3.0;
        auto value = [&](double u) { return marginal_log_likelihood(assemble_posterior(map, f, 2.0, std::exp(u)), ll); };
        const double fd = oracle::central_derivative(value, std::log(lam), 1e-4);
        const double an = marginal_log_likelihood_grad(assemble_posterior(map, f, 2.0, lam), ll);
        EXPECT_LE(std::abs(an - fd), 1e-5 * std::max(1.0, std::abs(fd)));
    }
}

TEST(Marginal, TuneMatchesGridOnScalarCase) {
    KroneckerFactors f{Matrix::Ones(1, 1), Matrix::Ones(1, 1), 1};
    const Matrix map = Matrix::Constant(1, 1, 2.0);
    const auto fit = tune_prior_precision(f, map, 0.0, 1.0);
    EXPECT_TRUE(fit.converged);
    auto value = [&](double u) { return marginal_log_likelihood(assemble_posterior(map, f, 1.0, std::exp(u)), 0.0); };
    const double grid = oracle::grid_argmax(value, -10.0, 10.0, 10000);
    EXPECT_NEAR(std::log(fit.lam), grid, 1e-3);
    EXPECT_GE(fit.objective, value(0.0));
}

TEST(Marginal, ZeroDataGivesFinitePositiveLambda) {
    KroneckerFactors f{Matrix::Zero(2, 2), Matrix::Zero(2, 2), 1};
    const auto fit = tune_prior_precision(f, Matrix::Zero(2, 2), 0.0, 0.5);
    EXPECT_TRUE(std::isfinite(fit.lam));
    EXPECT_GT(fit.lam, 0.0);
}

TEST(TauSearch, SingletonAndArgmin) {
    const auto prob = generate_synthetic(8, 4, 120, 3, 1);
    const Matrix feats = prob.features.to_eigen();
    const Matrix caps = paired_text_features(prob, 0.3, 1).to_eigen();
    const DualFit fit = fit_dual(feats, caps, prob.bundle);
    auto build = [&](double tau) {
        return BayesModel{assemble_posterior(fit.image.map, fit.image.factors, tau, 1.0),
                          assemble_posterior(fit.text.map, fit.text.factors, tau, 1.0), prob.bundle.temperature};
    };
    const Matrix ct = prob.class_text_features.to_eigen();
    const std::vector<double> one{5.0};
    EXPECT_EQ(tune_pseudo_count(build, feats, prob.labels, ct, one).tau, 5.0);
    const std::vector<double> grid{1, 5, 10, 50, 200};
    const auto res = tune_pseudo_count(build, feats, prob.labels, ct, grid);
    ASSERT_EQ(res.curve.size(), grid.size());
    double best = 1e300, best_tau = 0;
    for (double tau : grid) {
        const double v = nlpd(bayes_predict(build(tau), feats, ct), prob.labels).value;
        if (v < best) {
            best = v;
            best_tau = tau;
        }
    }
    EXPECT_EQ(res.tau, best_tau);
    EXPECT_THROW(tune_pseudo_count(build, feats, prob.labels, ct, std::vector<double>{}), ArgError);
}

TEST(PosteriorIo, RoundTrip) {
    Rng rng(10);
    KroneckerFactors f{random_spd(rng, 4), random_spd(rng, 3), 12};
    PosteriorBundle b{assemble_posterior(rng.normal_matrix(3, 4), f, 5.0, 0.5), LossKind::SigLIP, 3.0, -1.0, -7.5};
    const auto dir = std::filesystem::temp_directory_path() / "bayesduo_test_post";
    save_posterior(b, dir);
    const auto back = load_posterior(dir);
    EXPECT_EQ(back.loss_kind, LossKind::SigLIP);
    EXPECT_EQ(back.posterior.tau, 5.0);
    EXPECT_EQ(back.posterior.factors.n_effective, 12u);
    EXPECT_EQ(back.loglik_at_map, -7.5);
    EXPECT_LE((back.posterior.map - b.posterior.map).cwiseAbs().maxCoeff(), 1e-6);
    EXPECT_LE(inverse_check_error(back.posterior), 1e-6);
}
