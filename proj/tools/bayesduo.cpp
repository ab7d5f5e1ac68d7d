#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "bayesduo/bayesduo.hpp"

namespace fs = std::filesystem;
using namespace bayesduo;

namespace {

enum ExitCode { kOk = 0, kUsage = 1, kData = 2, kNumerical = 3 };

void log_line(const std::string& msg) { std::cerr << "bayesduo: " << msg << '\n'; }

std::string num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
}

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out << text;
    if (!out) throw IoError("write failed for " + path.string());
}

void require_exists(const std::string& path, const char* flag) {
    if (!path.empty() && !fs::exists(path)) throw IoError(std::string(flag) + ": no such file or directory '" + path + "'");
}

std::vector<double> parse_doubles(const std::string& s, const char* what) {
    std::vector<double> out;
    std::stringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        try {
            std::size_t used = 0;
            out.push_back(std::stod(tok, &used));
            if (used != tok.size()) throw std::invalid_argument(tok);
        } catch (const std::exception&) {
            throw ArgError(std::string(what) + ": cannot parse '" + tok + "'");
        }
    }
    if (out.empty()) throw ArgError(std::string(what) + ": empty list");
    return out;
}

std::vector<std::size_t> parse_counts(const std::string& s, const char* what) {
    std::vector<std::size_t> out;
    for (double v : parse_doubles(s, what)) {
        if (v < 0.0 || v != static_cast<double>(static_cast<std::size_t>(v)))
            throw ArgError(std::string(what) + ": expected nonnegative integers");
        out.push_back(static_cast<std::size_t>(v));
    }
    return out;
}

std::string probs_csv(const Matrix& probs, bool with_entropy) {
    std::string out;
    for (Eigen::Index c = 0; c < probs.cols(); ++c) out += (c ? ",p" : "p") + std::to_string(c);
    if (with_entropy) out += ",entropy";
    out += '\n';
    for (Eigen::Index i = 0; i < probs.rows(); ++i) {
        for (Eigen::Index c = 0; c < probs.cols(); ++c) out += (c ? "," : "") + num(probs(i, c));
        if (with_entropy) out += "," + num(entropy(Vector(probs.row(i).transpose())));
        out += '\n';
    }
    return out;
}

Matrix read_probs_csv(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    std::string line;
    if (!std::getline(in, line)) throw FormatError(path.string() + ": empty file");
    std::vector<bool> keep;
    std::stringstream hs(line);
    std::string cell;
    std::size_t n_keep = 0;
    while (std::getline(hs, cell, ',')) {
        const bool p = cell.size() > 1 && cell[0] == 'p' && cell.find_first_not_of("0123456789", 1) == std::string::npos;
        keep.push_back(p);
        n_keep += p;
    }
    if (n_keep == 0) throw FormatError(path.string() + ": no probability columns (p0, p1, ...)");
    std::vector<std::vector<double>> rows;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::stringstream ls(line);
        std::vector<double> row;
        std::size_t col = 0;
        while (std::getline(ls, cell, ',')) {
            if (col < keep.size() && keep[col]) {
                try {
                    row.push_back(std::stod(cell));
                } catch (const std::exception&) {
                    throw FormatError(path.string() + ":" + std::to_string(line_no) + ": bad number '" + cell + "'");
                }
            }
            ++col;
        }
        if (col != keep.size() || row.size() != n_keep)
            throw FormatError(path.string() + ":" + std::to_string(line_no) + ": wrong column count");
        rows.push_back(std::move(row));
    }
    Matrix m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(n_keep));
    for (std::size_t i = 0; i < rows.size(); ++i)
        for (std::size_t c = 0; c < n_keep; ++c) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) = rows[i][c];
    return m;
}

struct Posteriors {
    PosteriorBundle image;
    PosteriorBundle text;
};

Posteriors load_posteriors(const fs::path& dir) {
    return {load_posterior(dir / "image"), load_posterior(dir / "text")};
}

std::vector<GaussianEmbedding> class_embeddings(const Posteriors& p, const fs::path& class_text) {
    const Matrix t = load_matrix(class_text).to_eigen();
    if (t.cols() != p.text.posterior.d_in())
        throw FormatError(class_text.string() + ": " + std::to_string(t.cols()) +
                          " columns but the text posterior expects " + std::to_string(p.text.posterior.d_in()));
    return embed_rows(p.text.posterior, t);
}

Matrix load_features_for(const fs::path& path, const KfacPosterior& post) {
    Matrix f = load_matrix(path).to_eigen();
    if (f.cols() != post.d_in())
        throw FormatError(path.string() + ": " + std::to_string(f.cols()) + " columns but the image posterior expects " +
                          std::to_string(post.d_in()));
    return f;
}

Matrix class_means(std::span<const GaussianEmbedding> classes) {
    Matrix m(static_cast<Eigen::Index>(classes.size()), classes.front().dim());
    for (std::size_t c = 0; c < classes.size(); ++c) m.row(static_cast<Eigen::Index>(c)) = classes[c].mean.transpose();
    return m;
}

Matrix class_vars(std::span<const GaussianEmbedding> classes) {
    Matrix m(static_cast<Eigen::Index>(classes.size()), classes.front().dim());
    for (std::size_t c = 0; c < classes.size(); ++c) m.row(static_cast<Eigen::Index>(c)) = classes[c].var.transpose();
    return m;
}

// ---------------------------------------------------------------------------

struct SynthArgs {
    std::size_t d_in = 32, d_out = 16, n = 1024, n_test = 500, classes = 10;
    double separation = 1.0, prompt_noise = 0.6, temperature = 10.0, caption_noise = 0.3;
    std::uint64_t seed = 0;
    std::string out;
};

int cmd_synth(const SynthArgs& a) {
    SyntheticOptions opt;
    opt.class_separation = a.separation;
    opt.prompt_noise = a.prompt_noise;
    opt.temperature = a.temperature;
    const auto prob = generate_synthetic(a.d_in, a.d_out, a.n + a.n_test, a.classes, a.seed, opt);
    const Matrix feats = prob.features.to_eigen();
    const Matrix captions = paired_text_features(prob, a.caption_noise, a.seed).to_eigen();
    const fs::path dir(a.out);
    fs::create_directories(dir);

    const auto n = static_cast<Eigen::Index>(a.n), nt = static_cast<Eigen::Index>(a.n_test);
    std::vector<int> train_labels(prob.labels.begin(), prob.labels.begin() + n);
    std::vector<int> test_labels(prob.labels.begin() + n, prob.labels.end());
    save_matrix(EmbeddingMatrix::from_eigen(feats.topRows(n)), dir / "train_image.bvm");
    save_matrix(EmbeddingMatrix::from_eigen(captions.topRows(n)), dir / "train_text.bvm");
    save_labels(train_labels, dir / "train_labels.txt");
    save_matrix(EmbeddingMatrix::from_eigen(feats.bottomRows(nt)), dir / "test_image.bvm");
    save_labels(test_labels, dir / "test_labels.txt");
    save_matrix(prob.class_text_features, dir / "class_text.bvm");
    save_model_bundle(prob.bundle, dir / "model.json");

    std::vector<std::string> names;
    for (std::size_t c = 0; c < a.classes; ++c) names.push_back("class" + std::to_string(c));
    DatasetManifest train{dir / "train_image.bvm", dir / "train_labels.txt", names, static_cast<std::int64_t>(a.seed)};
    DatasetManifest test{dir / "test_image.bvm", dir / "test_labels.txt", names, static_cast<std::int64_t>(a.seed)};
    save_manifest(train, dir / "train.json");
    save_manifest(test, dir / "test.json");
    log_line("synth: wrote " + std::to_string(a.n) + " train and " + std::to_string(a.n_test) + " test rows to " +
             dir.string());
    return kOk;
}

struct FitArgs {
    std::string image, text, model, out;
    std::size_t batch_size = 0;
};

int cmd_fit(const FitArgs& a) {
    require_exists(a.image, "--image");
    require_exists(a.text, "--text");
    require_exists(a.model, "--model");
    const ModelBundle bundle = load_model_bundle(a.model);
    const Matrix fi = load_matrix(a.image).to_eigen();
    const Matrix ft = load_matrix(a.text).to_eigen();
    if (static_cast<std::size_t>(fi.cols()) != bundle.proj_image.cols())
        throw FormatError(a.image + ": " + std::to_string(fi.cols()) + " columns but proj_image in " + a.model +
                          " expects " + std::to_string(bundle.proj_image.cols()));
    if (static_cast<std::size_t>(ft.cols()) != bundle.proj_text.cols())
        throw FormatError(a.text + ": " + std::to_string(ft.cols()) + " columns but proj_text in " + a.model +
                          " expects " + std::to_string(bundle.proj_text.cols()));
    if (fi.rows() != ft.rows())
        throw FormatError(a.text + ": " + std::to_string(ft.rows()) + " rows but " + a.image + " has " +
                          std::to_string(fi.rows()));
    const DualFit fit = fit_dual(fi, ft, bundle, a.batch_size);
    const fs::path out(a.out);
    for (const auto& [name, m] : {std::pair{"image", &fit.image}, std::pair{"text", &fit.text}}) {
        PosteriorBundle pb{assemble_posterior(m->map, m->factors, 1.0, 1.0), bundle.loss_kind, bundle.temperature,
                           bundle.bias, m->loglik};
        save_posterior(pb, out / name);
    }
    log_line("fit: " + std::to_string(fi.rows()) + " pairs, posteriors written to " + out.string());
    return kOk;
}

std::string join_grid(const std::vector<double>& g) {
    std::string out;
    for (double v : g) out += (out.empty() ? "" : ",") + num(v);
    return out;
}

struct TuneArgs {
    std::string posterior, val, class_text, out, curve;
    std::string tau_grid = join_grid(default_tau_grid());
    double init_lam = 1.0;
};

int cmd_tune(const TuneArgs& a) {
    require_exists(a.posterior, "--posterior");
    require_exists(a.val, "--val");
    require_exists(a.class_text, "--class-text");
    const std::vector<double> grid = parse_doubles(a.tau_grid, "--tau-grid");
    Posteriors p = load_posteriors(a.posterior);
    const auto manifest = load_manifest(a.val);
    const Dataset val = load_dataset(manifest);
    if (val.labels.empty()) throw FormatError(a.val + ": validation manifest has no labels");
    const Matrix vf = val.features.to_eigen();
    if (vf.cols() != p.image.posterior.d_in())
        throw FormatError(manifest.features_path.string() + ": feature dimension does not match the image posterior");
    const Matrix ct = load_matrix(a.class_text).to_eigen();
    if (ct.cols() != p.text.posterior.d_in())
        throw FormatError(a.class_text + ": feature dimension does not match the text posterior");

    double lam[2];
    PosteriorBundle* bundles[2] = {&p.image, &p.text};
    for (int m = 0; m < 2; ++m) {
        const KfacPosterior& post = bundles[m]->posterior;
        if (!bundles[m]->loglik_at_map) throw FormatError(a.posterior + ": posterior lacks loglik_at_map; re-run fit");
        const auto fit = tune_prior_precision(post.factors, post.map, *bundles[m]->loglik_at_map, a.init_lam);
        if (!fit.converged) log_line("tune: warning: prior precision did not converge (gradient " + num(fit.gradient) + ")");
        lam[m] = fit.lam;
    }
    auto build = [&](double tau) {
        return BayesModel{assemble_posterior(p.image.posterior.map, p.image.posterior.factors, tau, lam[0]),
                          assemble_posterior(p.text.posterior.map, p.text.posterior.factors, tau, lam[1]),
                          p.image.temperature};
    };
    const TauSearch search = tune_pseudo_count(build, vf, val.labels, ct, grid);

    const fs::path out(a.out);
    for (int m = 0; m < 2; ++m) {
        PosteriorBundle b = *bundles[m];
        b.posterior = assemble_posterior(b.posterior.map, b.posterior.factors, search.tau, lam[m]);
        save_posterior(b, out / (m == 0 ? "image" : "text"));
    }
    std::string csv = "tau,nlpd\n";
    for (const auto& [tau, v] : search.curve) csv += num(tau) + "," + num(v) + "\n";
    write_text(a.curve.empty() ? out / "tau_curve.csv" : fs::path(a.curve), csv);
    log_line("tune: tau " + num(search.tau) + ", lam image " + num(lam[0]) + ", lam text " + num(lam[1]));
    return kOk;
}

struct PredictArgs {
    std::string posterior, features, class_text, out;
    std::string mode = "bayes";
};

Matrix predict_probs(const Posteriors& p, const Matrix& features, std::span<const GaussianEmbedding> classes,
                     const std::string& mode) {
    if (mode == "bayes") return bayes_predict(p.image.posterior, classes, features, p.image.temperature);
    if (mode == "map") return map_predict(p.image.posterior.map, class_means(classes), features, p.image.temperature);
    throw ArgError("--mode: expected bayes or map, got '" + mode + "'");
}

int cmd_predict(const PredictArgs& a) {
    require_exists(a.posterior, "--posterior");
    require_exists(a.features, "--features");
    require_exists(a.class_text, "--class-text");
    const Posteriors p = load_posteriors(a.posterior);
    if (p.image.posterior.tau == 1.0 && p.image.posterior.lam == 1.0)
        log_line("predict: warning: posterior has default tau = lam = 1; run tune first for calibrated output");
    const auto classes = class_embeddings(p, a.class_text);
    const Matrix f = load_features_for(a.features, p.image.posterior);
    const Matrix probs = predict_probs(p, f, classes, a.mode);
    write_text(a.out, probs_csv(probs, true));
    log_line("predict: " + std::to_string(probs.rows()) + " rows x " + std::to_string(probs.cols()) + " classes");
    return kOk;
}

struct EvalArgs {
    std::string probs, labels, out, reliability;
    std::size_t bins = 15;
};

std::string reliability_csv(const std::vector<ReliabilityBin>& table) {
    std::string csv = "bin_lo,bin_hi,count,acc,conf\n";
    for (const auto& b : table)
        csv += num(b.lo) + "," + num(b.hi) + "," + std::to_string(b.count) + "," + num(b.acc) + "," + num(b.conf) + "\n";
    return csv;
}

std::string eval_json(const EvalReport& r) {
    nlohmann::ordered_json j;
    j["acc"] = r.acc;
    j["acc_se"] = r.acc_se;
    j["weighted_acc"] = r.weighted_acc;
    j["nlpd"] = r.nlpd;
    j["nlpd_se"] = r.nlpd_se;
    j["ece"] = r.ece;
    j["n"] = r.n;
    j["bins"] = r.bins;
    return j.dump(2) + "\n";
}

int cmd_eval(const EvalArgs& a) {
    require_exists(a.probs, "--probs");
    require_exists(a.labels, "--labels");
    const Matrix probs = read_probs_csv(a.probs);
    const std::vector<int> labels = load_labels(a.labels);
    check_labels(labels, static_cast<std::size_t>(probs.rows()), static_cast<std::size_t>(probs.cols()), a.labels);
    const EvalReport r = evaluate(probs, labels, a.bins);
    const std::string json = eval_json(r);
    if (a.out.empty()) std::cout << json;
    else write_text(a.out, json);
    if (!a.reliability.empty()) write_text(a.reliability, reliability_csv(r.reliability));
    return kOk;
}

struct ActiveArgs {
    std::string posterior, pool, test, class_text, out;
    std::string strategy = "epig", metric = "expected_cosine";
    std::string budgets = "0,10,25,50,75,100,150,200";
    double gamma = 1e-4, beta = 10.0;
    std::size_t n_theta = 64, n_target = 32;
    std::uint64_t seed = 0;
};

int cmd_active(const ActiveArgs& a) {
    require_exists(a.posterior, "--posterior");
    require_exists(a.pool, "--pool");
    require_exists(a.test, "--test");
    require_exists(a.class_text, "--class-text");
    const Posteriors p = load_posteriors(a.posterior);
    const auto classes = class_embeddings(p, a.class_text);
    const Dataset pool = load_dataset(load_manifest(a.pool));
    const Dataset test = load_dataset(load_manifest(a.test));
    if (pool.labels.empty() || test.labels.empty()) throw FormatError("active: pool and test manifests need labels");

    ActiveProblem prob;
    prob.pool_features = pool.features.to_eigen();
    prob.pool_labels = pool.labels;
    prob.test_features = test.features.to_eigen();
    prob.test_labels = test.labels;
    prob.class_protos = class_means(classes);
    prob.temperature = p.image.temperature;
    if (prob.pool_features.cols() != p.image.posterior.d_in() || prob.test_features.cols() != p.image.posterior.d_in())
        throw FormatError("active: pool/test feature dimension does not match the image posterior");
    for (int y : prob.pool_labels)
        if (y >= static_cast<int>(classes.size())) throw FormatError(a.pool + ": label exceeds class count");
    for (int y : prob.test_labels)
        if (y >= static_cast<int>(classes.size())) throw FormatError(a.test + ": label exceeds class count");

    ActiveOptions opt;
    opt.acquisition.kind = parse_acquisition_kind(a.strategy);
    opt.acquisition.metric = parse_knn_metric(a.metric);
    opt.acquisition.n_theta_samples = a.n_theta;
    opt.acquisition.n_target_samples = a.n_target;
    opt.acquisition.seed = derive_seed(a.seed, "active");
    opt.budgets = parse_counts(a.budgets, "--budgets");
    opt.gamma = a.gamma;
    opt.beta = a.beta;
    opt.class_var = class_vars(classes);
    const ActiveState st = run_active_learning(prob, p.image.posterior, opt);

    std::string csv = "budget,weighted_acc,nlpd,strategy,seed\n";
    for (const auto& c : st.curve)
        csv += std::to_string(c.budget) + "," + num(c.weighted_acc) + "," + num(c.nlpd) + "," + a.strategy + "," +
               std::to_string(a.seed) + "\n";
    write_text(a.out, csv);
    log_line("active: " + a.strategy + " acquired " + std::to_string(st.support.size()) + " labels");
    return kOk;
}

struct OracleArgs {
    std::string posterior, features, class_text, out;
    std::size_t n_samples = 10000;
    std::uint64_t seed = 0;
};

int cmd_oracle(const OracleArgs& a) {
    require_exists(a.posterior, "--posterior");
    require_exists(a.features, "--features");
    require_exists(a.class_text, "--class-text");
    const Posteriors p = load_posteriors(a.posterior);
    const auto classes = class_embeddings(p, a.class_text);
    const Matrix f = load_features_for(a.features, p.image.posterior);
    const std::uint64_t base = derive_seed(a.seed, "oracle");
    std::string csv = "row,class,analytic_mean,analytic_var,mc_mean,mc_var,mc_se\n";
    for (Eigen::Index i = 0; i < f.rows(); ++i) {
        const GaussianEmbedding g = embed_gaussian(p.image.posterior, f.row(i).transpose());
        for (std::size_t c = 0; c < classes.size(); ++c) {
            const auto an = probcosine_moments(g, classes[c]);
            const auto mc = mc_cosine_oracle(g, classes[c], a.n_samples,
                                             derive_seed(base, "pair", static_cast<std::uint64_t>(i) * classes.size() + c));
            csv += std::to_string(i) + "," + std::to_string(c) + "," + num(an.mean) + "," + num(an.var) + "," +
                   num(mc.mean) + "," + num(mc.var) + "," + num(mc.se_mean) + "\n";
        }
    }
    if (a.out.empty()) std::cout << csv;
    else write_text(a.out, csv);
    return kOk;
}

// Turns a JSON config object into command-line tokens. Keys are flag names
// without dashes (underscores allowed); arrays become comma lists.
std::vector<std::string> config_tokens(const fs::path& path) {
    nlohmann::json j;
    {
        std::ifstream in(path);
        if (!in) throw IoError("--config: cannot open " + path.string());
        try {
            j = nlohmann::json::parse(in);
        } catch (const nlohmann::json::exception& e) {
            throw FormatError(path.string() + ": " + e.what());
        }
    }
    if (!j.is_object()) throw FormatError(path.string() + ": config must be a JSON object");
    auto scalar = [&](const nlohmann::json& v) -> std::string {
        if (v.is_string()) return v.get<std::string>();
        if (v.is_number_integer()) return std::to_string(v.get<long long>());
        if (v.is_number_unsigned()) return std::to_string(v.get<unsigned long long>());
        if (v.is_number()) return num(v.get<double>());
        throw FormatError(path.string() + ": unsupported config value " + v.dump());
    };
    std::vector<std::string> out;
    for (const auto& [key, v] : j.items()) {
        std::string flag = "--" + key;
        for (auto& ch : flag)
            if (ch == '_') ch = '-';
        if (v.is_boolean()) {
            if (v.get<bool>()) out.push_back(flag);
            continue;
        }
        std::string value;
        if (v.is_array()) {
            for (std::size_t k = 0; k < v.size(); ++k) value += (k ? "," : "") + scalar(v[k]);
        } else {
            value = scalar(v);
        }
        out.push_back(flag);
        out.push_back(value);
    }
    return out;
}

int run(int argc, char** argv) {
    CLI::App app{"Bayesian dual-encoder toolkit: Laplace posteriors, ProbCosine predictions, active learning"};
    app.require_subcommand(1);
    app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
    std::string config;
    auto add_config = [&](CLI::App* sub) {
        sub->add_option("--config", config, "JSON file of flag values; explicit flags override it");
    };

    SynthArgs synth;
    auto* s = app.add_subcommand("synth", "Generate a synthetic dual-encoder problem");
    add_config(s);
    s->add_option("--d-in", synth.d_in, "Encoder feature dimension")->capture_default_str();
    s->add_option("--d-out", synth.d_out, "Joint embedding dimension")->capture_default_str();
    s->add_option("--n", synth.n, "Training (pool) rows")->capture_default_str();
    s->add_option("--n-test", synth.n_test, "Test rows")->capture_default_str();
    s->add_option("--classes", synth.classes, "Number of classes")->capture_default_str();
    s->add_option("--separation", synth.separation, "Class-mean scale relative to unit noise")->capture_default_str();
    s->add_option("--prompt-noise", synth.prompt_noise, "Misalignment of class prompts")->capture_default_str();
    s->add_option("--caption-noise", synth.caption_noise, "Noise of paired caption features")->capture_default_str();
    s->add_option("--temperature", synth.temperature, "Model temperature")->capture_default_str();
    s->add_option("--seed", synth.seed, "Random seed")->capture_default_str();
    s->add_option("--out", synth.out, "Output directory")->required();

    FitArgs fit;
    auto* f = app.add_subcommand("fit", "Fit KFAC Laplace posteriors for both projections");
    add_config(f);
    f->add_option("--image", fit.image, "Image features (.bvm), one row per pair")->required();
    f->add_option("--text", fit.text, "Text features (.bvm), row i paired with image row i")->required();
    f->add_option("--model", fit.model, "Model bundle JSON")->required();
    f->add_option("--batch-size", fit.batch_size, "Contrastive batch size (0 = whole file)")->capture_default_str();
    f->add_option("--out", fit.out, "Output directory (image/ and text/ bundles)")->required();

    TuneArgs tune;
    auto* t = app.add_subcommand("tune", "Tune prior precision and pseudo-data count");
    add_config(t);
    t->add_option("--posterior", tune.posterior, "Directory written by fit")->required();
    t->add_option("--val", tune.val, "Labeled validation manifest JSON")->required();
    t->add_option("--class-text", tune.class_text, "Class prompt text features (.bvm)")->required();
    t->add_option("--tau-grid", tune.tau_grid, "Comma-separated pseudo-data counts")->capture_default_str();
    t->add_option("--init-lam", tune.init_lam, "Starting prior precision")->capture_default_str();
    t->add_option("--out", tune.out, "Output directory for tuned bundles")->required();
    t->add_option("--curve", tune.curve, "NLPD-vs-tau CSV path (default <out>/tau_curve.csv)");

    PredictArgs pred;
    auto* p = app.add_subcommand("predict", "Write class probabilities for a feature file");
    add_config(p);
    p->add_option("--posterior", pred.posterior, "Posterior directory")->required();
    p->add_option("--features", pred.features, "Image features (.bvm)")->required();
    p->add_option("--class-text", pred.class_text, "Class prompt text features (.bvm)")->required();
    p->add_option("--mode", pred.mode, "bayes (probit predictive) or map (deterministic softmax)")->capture_default_str();
    p->add_option("--out", pred.out, "Output CSV")->required();

    EvalArgs ev;
    auto* e = app.add_subcommand("eval", "Accuracy, NLPD and ECE of a probability CSV");
    add_config(e);
    e->add_option("--probs", ev.probs, "Probability CSV (p0,p1,...)")->required();
    e->add_option("--labels", ev.labels, "Labels file, one integer per line")->required();
    e->add_option("--bins", ev.bins, "ECE bins")->capture_default_str()->check(CLI::PositiveNumber);
    e->add_option("--out", ev.out, "Output JSON (default stdout)");
    e->add_option("--reliability", ev.reliability, "Reliability table CSV");

    ActiveArgs act;
    auto* a = app.add_subcommand("active", "Run an active-learning curve");
    add_config(a);
    a->add_option("--posterior", act.posterior, "Posterior directory")->required();
    a->add_option("--pool", act.pool, "Labeled pool manifest JSON (labels act as the oracle)")->required();
    a->add_option("--test", act.test, "Labeled test manifest JSON")->required();
    a->add_option("--class-text", act.class_text, "Class prompt text features (.bvm)")->required();
    a->add_option("--strategy", act.strategy,
                  "random|targeted_random|entropy|targeted_entropy|bald|targeted_bald|epig")->capture_default_str();
    a->add_option("--metric", act.metric, "k-NN metric: expected_cosine|wasserstein2_diag")->capture_default_str();
    a->add_option("--budgets", act.budgets, "Ascending comma-separated budgets")->capture_default_str();
    a->add_option("--gamma", act.gamma, "Online MAP step size")->capture_default_str();
    a->add_option("--beta", act.beta, "Online factor update weight")->capture_default_str();
    a->add_option("--n-theta", act.n_theta, "Posterior samples for BALD/EPIG")->capture_default_str();
    a->add_option("--n-target", act.n_target, "EPIG target samples")->capture_default_str();
    a->add_option("--seed", act.seed, "Random seed")->capture_default_str();
    a->add_option("--out", act.out, "Curve CSV")->required();

    OracleArgs orc;
    auto* o = app.add_subcommand("oracle", "Compare analytic cosine moments with Monte Carlo");
    add_config(o);
    o->add_option("--posterior", orc.posterior, "Posterior directory")->required();
    o->add_option("--features", orc.features, "Image features (.bvm)")->required();
    o->add_option("--class-text", orc.class_text, "Class prompt text features (.bvm)")->required();
    o->add_option("--n-samples", orc.n_samples, "Monte Carlo samples per pair")->capture_default_str();
    o->add_option("--seed", orc.seed, "Random seed")->capture_default_str();
    o->add_option("--out", orc.out, "Output CSV (default stdout)");

    // Config values are spliced in right after the subcommand, so any flag
    // given explicitly later on the command line wins.
    std::vector<std::string> args(argv + 1, argv + argc);
    for (std::size_t i = 0; i + 1 < args.size(); ++i)
        if (args[i] == "--config") {
            const auto extra = config_tokens(args[i + 1]);
            args.insert(args.begin() + 1, extra.begin(), extra.end());
            break;
        }
    std::reverse(args.begin(), args.end());
    try {
        app.parse(args);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? kOk : kUsage;
    }

    if (s->parsed()) return cmd_synth(synth);
    if (f->parsed()) return cmd_fit(fit);
    if (t->parsed()) return cmd_tune(tune);
    if (p->parsed()) return cmd_predict(pred);
    if (e->parsed()) return cmd_eval(ev);
    if (a->parsed()) return cmd_active(act);
    return cmd_oracle(orc);
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const ArgError& e) {
        log_line(std::string("usage error: ") + e.what());
        return kUsage;
    } catch (const NumericalError& e) {
        log_line(std::string("numerical error: ") + e.what());
        return kNumerical;
    } catch (const DegenerateInputError& e) {
        log_line(std::string("numerical error: ") + e.what());
        return kNumerical;
    } catch (const Error& e) {
        log_line(std::string("data error: ") + e.what());
        return kData;
    } catch (const std::filesystem::filesystem_error& e) {
        log_line(std::string("data error: ") + e.what());
        return kData;
    }
}
