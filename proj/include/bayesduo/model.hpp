#pragma once

#include <functional>
#include <limits>
#include <string>
#include <span>
#include <utility>
#include <vector>

#include "bayesduo/laplace.hpp"
#include "bayesduo/metrics.hpp"
#include "bayesduo/probcosine.hpp"

namespace bayesduo {

// Image and text posteriors of one dual encoder plus its temperature.
struct BayesModel {
    KfacPosterior image;
    KfacPosterior text;
    double temperature = 1.0;
};

inline std::vector<GaussianEmbedding> embed_rows(const KfacPosterior& post, const Matrix& features) {
    std::vector<GaussianEmbedding> out;
    out.reserve(static_cast<std::size_t>(features.rows()));
    for (Eigen::Index i = 0; i < features.rows(); ++i) out.push_back(embed_gaussian(post, features.row(i).transpose()));
    return out;
}

// Predictive for each row of `features` against the class embeddings:
// Gaussian embeddings -> cosine moments -> probit softmax.
inline Matrix bayes_predict(const KfacPosterior& image, std::span<const GaussianEmbedding> classes,
                            const Matrix& features, double temperature) {
    Matrix probs(features.rows(), static_cast<Eigen::Index>(classes.size()));
    Vector means(probs.cols()), vars(probs.cols());
    for (Eigen::Index i = 0; i < features.rows(); ++i) {
        const GaussianEmbedding g = embed_gaussian(image, features.row(i).transpose());
        for (Eigen::Index c = 0; c < probs.cols(); ++c) {
            const CosineDistribution cd = probcosine_moments(g, classes[static_cast<std::size_t>(c)]);
            means(c) = cd.mean;
            vars(c) = cd.var;
        }
        probs.row(i) = probit_predictive(means, vars, temperature).probs.transpose();
    }
    return probs;
}

inline Matrix bayes_predict(const BayesModel& model, const Matrix& features, const Matrix& class_text_features) {
    const auto classes = embed_rows(model.text, class_text_features);
    return bayes_predict(model.image, classes, features, model.temperature);
}

// Deterministic cosine similarities of MAP embeddings, n x C.
inline Matrix map_cosines(const Matrix& image_map, const Matrix& class_embeddings, const Matrix& features) {
    const Matrix g_hat = normalize_rows(Matrix(features * image_map.transpose()));
    const Matrix h_hat = normalize_rows(class_embeddings);
    return g_hat * h_hat.transpose();
}

inline Matrix map_predict(const Matrix& image_map, const Matrix& class_embeddings, const Matrix& features,
                          double temperature) {
    return softmax_rows(map_cosines(image_map, class_embeddings, features), temperature);
}

// Factors and MAP log-likelihood of one modality from a contrastive fit.
struct ModalityFit {
    Matrix map;
    KroneckerFactors factors;
    double loglik = 0.0;
};

struct DualFit {
    ModalityFit image;
    ModalityFit text;
};

// Accumulates both modalities over contiguous batches of `batch_size` pairs
// (0 = one batch). Row i of the image features is paired with row i of the
// text features; the other modality's batch embeddings form the context.
inline DualFit fit_dual(const Matrix& image_features, const Matrix& text_features, const ModelBundle& bundle,
                        std::size_t batch_size = 0) {
    bundle.validate();
    if (image_features.rows() != text_features.rows())
        throw ArgError("fit_dual: " + std::to_string(image_features.rows()) + " image rows but " +
                       std::to_string(text_features.rows()) + " text rows");
    const Matrix p = bundle.proj_image.to_eigen(), q = bundle.proj_text.to_eigen();
    if (image_features.cols() != p.cols()) throw ArgError("fit_dual: image feature dimension does not match proj_image");
    if (text_features.cols() != q.cols()) throw ArgError("fit_dual: text feature dimension does not match proj_text");
    const Eigen::Index n = image_features.rows();
    if (n < 1) throw ArgError("fit_dual: no samples");
    const Eigen::Index bs = batch_size == 0 ? n : static_cast<Eigen::Index>(batch_size);

    DualFit out;
    out.image.map = p;
    out.text.map = q;
    for (Eigen::Index lo = 0; lo < n; lo += bs) {
        const Eigen::Index m = std::min(bs, n - lo);
        const Matrix fi = image_features.middleRows(lo, m), ft = text_features.middleRows(lo, m);
        const Matrix g_hat = normalize_rows(Matrix(fi * p.transpose()));
        const Matrix h_hat = normalize_rows(Matrix(ft * q.transpose()));
        const LossContext img_ctx{h_hat, bundle.temperature, bundle.bias, bundle.loss_kind};
        const LossContext txt_ctx{g_hat, bundle.temperature, bundle.bias, bundle.loss_kind};
        out.image.factors = merge_factors(out.image.factors, accumulate_factors(fi, img_ctx, p));
        out.text.factors = merge_factors(out.text.factors, accumulate_factors(ft, txt_ctx, q));
        out.image.loglik += log_likelihood_at_map(fi, img_ctx, p);
        out.text.loglik += log_likelihood_at_map(ft, txt_ctx, q);
    }
    return out;
}

struct TauSearch {
    double tau = 1.0;
    std::vector<std::pair<double, double>> curve;  // (tau, validation NLPD)
};

// Default pseudo-data counts: 1, then 5 to 200 in steps of 5.
inline std::vector<double> default_tau_grid() {
    std::vector<double> g{1.0};
    for (int t = 5; t <= 200; t += 5) g.push_back(t);
    return g;
}

// Grid search over the pseudo-data count minimizing validation NLPD of the
// probit predictive; ties go to the smaller tau.
inline TauSearch tune_pseudo_count(const std::function<BayesModel(double)>& build, const Matrix& val_features,
                                   std::span<const int> val_labels, const Matrix& class_text_features,
                                   std::span<const double> grid) {
    if (grid.empty()) throw ArgError("tune_pseudo_count: empty grid");
    TauSearch out;
    double best = std::numeric_limits<double>::infinity();
    for (double tau : grid) {
        if (!(tau > 0.0)) throw ArgError("tune_pseudo_count: grid values must be positive");
        const Matrix probs = bayes_predict(build(tau), val_features, class_text_features);
        const double v = nlpd(probs, val_labels).value;
        out.curve.emplace_back(tau, v);
        if (v < best || (v == best && tau < out.tau)) {
            best = v;
            out.tau = tau;
        }
    }
    return out;
}

}  // namespace bayesduo
