#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numeric>
#include <optional>
#include <sstream>
#include <span>
#include <string>
#include <vector>

#include <Eigen/QR>
#include <json.hpp>

#include "bayesduo/errors.hpp"
#include "bayesduo/linalg.hpp"
#include "bayesduo/random.hpp"

namespace bayesduo {

namespace fs = std::filesystem;

// Dense row-major f32 matrix of encoder features or embeddings. Every
// element is finite; the constructor enforces both invariants.
class EmbeddingMatrix {
public:
    EmbeddingMatrix() = default;

    EmbeddingMatrix(std::size_t rows, std::size_t cols, std::vector<float> data)
        : rows_(rows), cols_(cols), data_(std::move(data)) {
        if (data_.size() != rows_ * cols_)
            throw CorruptError("EmbeddingMatrix: data length " + std::to_string(data_.size()) +
                               " != rows*cols " + std::to_string(rows_ * cols_));
        for (std::size_t i = 0; i < data_.size(); ++i)
            if (!std::isfinite(data_[i]))
                throw ValueError("EmbeddingMatrix: non-finite element at flat index " + std::to_string(i));
    }

    static EmbeddingMatrix zeros(std::size_t rows, std::size_t cols) {
        return EmbeddingMatrix(rows, cols, std::vector<float>(rows * cols, 0.0f));
    }

    static EmbeddingMatrix from_eigen(const Matrix& m) {
        std::vector<float> data(static_cast<std::size_t>(m.size()));
        for (Eigen::Index i = 0; i < m.rows(); ++i)
            for (Eigen::Index j = 0; j < m.cols(); ++j)
                data[static_cast<std::size_t>(i * m.cols() + j)] = static_cast<float>(m(i, j));
        return EmbeddingMatrix(static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols()),
                               std::move(data));
    }

    Matrix to_eigen() const {
        Matrix m(static_cast<Eigen::Index>(rows_), static_cast<Eigen::Index>(cols_));
        for (std::size_t i = 0; i < rows_; ++i)
            for (std::size_t j = 0; j < cols_; ++j)
                m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = data_[i * cols_ + j];
        return m;
    }

    Vector row_vector(std::size_t i) const {
        Vector v(static_cast<Eigen::Index>(cols_));
        for (std::size_t j = 0; j < cols_; ++j) v(static_cast<Eigen::Index>(j)) = data_[i * cols_ + j];
        return v;
    }

    std::span<const float> row(std::size_t i) const { return {data_.data() + i * cols_, cols_}; }
    float at(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    const std::vector<float>& data() const { return data_; }

    bool operator==(const EmbeddingMatrix&) const = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<float> data_;
};

// .bvm layout: "BVLM", version u8, rows u32 LE, cols u32 LE, dtype u32 LE,
// then rows*cols f32 LE row-major.
inline constexpr std::array<char, 4> kBvmMagic{'B', 'V', 'L', 'M'};
inline constexpr std::uint8_t kBvmVersion = 0x01;
inline constexpr std::uint32_t kBvmDtypeF32 = 0x01;
inline constexpr std::size_t kBvmHeaderBytes = 17;

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
    for (int k = 0; k < 4; ++k) out.push_back(static_cast<char>((v >> (8 * k)) & 0xffu));
}

inline std::uint32_t get_u32(const unsigned char* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

inline std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void write_file(const fs::path& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) throw IoError("write failed: " + path.string());
}

}  // namespace detail

inline std::string encode_matrix(const EmbeddingMatrix& m) {
    std::string out;
    out.reserve(kBvmHeaderBytes + 4 * m.data().size());
    out.append(kBvmMagic.data(), kBvmMagic.size());
    out.push_back(static_cast<char>(kBvmVersion));
    detail::put_u32(out, static_cast<std::uint32_t>(m.rows()));
    detail::put_u32(out, static_cast<std::uint32_t>(m.cols()));
    detail::put_u32(out, kBvmDtypeF32);
    for (float f : m.data()) {
        std::uint32_t bits;
        std::memcpy(&bits, &f, sizeof bits);
        detail::put_u32(out, bits);
    }
    return out;
}

inline EmbeddingMatrix decode_matrix(std::string_view bytes, const std::string& origin = "<memory>") {
    if (bytes.size() < kBvmHeaderBytes) throw FormatError(origin + ": truncated header");
    if (!std::equal(kBvmMagic.begin(), kBvmMagic.end(), bytes.begin()))
        throw FormatError(origin + ": bad magic (expected BVLM)");
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
    if (p[4] != kBvmVersion) throw FormatError(origin + ": unsupported version " + std::to_string(p[4]));
    const std::uint32_t rows = detail::get_u32(p + 5);
    const std::uint32_t cols = detail::get_u32(p + 9);
    const std::uint32_t dtype = detail::get_u32(p + 13);
    if (dtype != kBvmDtypeF32) throw FormatError(origin + ": unsupported dtype tag " + std::to_string(dtype));
    const std::uint64_t count = static_cast<std::uint64_t>(rows) * cols;
    if (bytes.size() - kBvmHeaderBytes != count * 4)
        throw CorruptError(origin + ": header declares " + std::to_string(rows) + "x" + std::to_string(cols) +
                           " but payload holds " + std::to_string(bytes.size() - kBvmHeaderBytes) + " bytes");
    std::vector<float> data(count);
    for (std::uint64_t i = 0; i < count; ++i) {
        const std::uint32_t bits = detail::get_u32(p + kBvmHeaderBytes + 4 * i);
        std::memcpy(&data[i], &bits, sizeof bits);
        if (!std::isfinite(data[i]))
            throw ValueError(origin + ": non-finite value at element " + std::to_string(i));
    }
    return EmbeddingMatrix(rows, cols, std::move(data));
}

inline EmbeddingMatrix load_matrix(const fs::path& path) {
    return decode_matrix(detail::read_file(path), path.string());
}

inline void save_matrix(const EmbeddingMatrix& m, const fs::path& path) {
    detail::write_file(path, encode_matrix(m));
}

// Labels: one decimal integer per line.
inline std::vector<int> load_labels(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    std::vector<int> labels;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::size_t used = 0;
        long value = 0;
        try {
            value = std::stol(line, &used);
        } catch (const std::exception&) {
            throw FormatError(path.string() + ":" + std::to_string(lineno) + ": not an integer");
        }
        if (used != line.size() || value < 0)
            throw FormatError(path.string() + ":" + std::to_string(lineno) + ": invalid label '" + line + "'");
        labels.push_back(static_cast<int>(value));
    }
    return labels;
}

inline void save_labels(std::span<const int> labels, const fs::path& path) {
    std::string out;
    for (int y : labels) out += std::to_string(y) + "\n";
    detail::write_file(path, out);
}

enum class LossKind { InfoNCE, SigLIP };

inline std::string to_string(LossKind k) { return k == LossKind::InfoNCE ? "infonce" : "siglip"; }

inline LossKind parse_loss_kind(const std::string& s) {
    if (s == "infonce") return LossKind::InfoNCE;
    if (s == "siglip") return LossKind::SigLIP;
    throw FormatError("unknown loss '" + s + "' (expected infonce|siglip)");
}

struct ModelBundle {
    EmbeddingMatrix proj_image;  // d_out x d_in_img
    EmbeddingMatrix proj_text;   // d_out x d_in_txt
    double temperature = 1.0;
    double bias = 0.0;
    LossKind loss_kind = LossKind::InfoNCE;

    void validate() const {
        if (proj_image.rows() != proj_text.rows())
            throw FormatError("model bundle: proj_image has " + std::to_string(proj_image.rows()) +
                              " rows but proj_text has " + std::to_string(proj_text.rows()));
        if (!(temperature > 0.0) || !std::isfinite(temperature))
            throw FormatError("model bundle: temperature must be positive");
        if (!std::isfinite(bias)) throw FormatError("model bundle: bias must be finite");
    }

    std::size_t joint_dim() const { return proj_image.rows(); }
};

inline fs::path resolve_relative(const fs::path& base_file, const std::string& p) {
    fs::path q(p);
    return q.is_absolute() ? q : base_file.parent_path() / q;
}

inline ModelBundle load_model_bundle(const fs::path& json_path) {
    nlohmann::json j;
    try {
        std::ifstream in(json_path);
        if (!in) throw IoError("cannot open " + json_path.string());
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(json_path.string() + ": " + e.what());
    }
    ModelBundle b;
    try {
        b.proj_image = load_matrix(resolve_relative(json_path, j.at("proj_image").get<std::string>()));
        b.proj_text = load_matrix(resolve_relative(json_path, j.at("proj_text").get<std::string>()));
        b.temperature = j.at("temperature").get<double>();
        b.bias = j.value("bias", 0.0);
        b.loss_kind = parse_loss_kind(j.value("loss", std::string("infonce")));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(json_path.string() + ": " + e.what());
    }
    b.validate();
    return b;
}

// Writes the JSON plus proj_image.bvm / proj_text.bvm next to it.
inline void save_model_bundle(const ModelBundle& b, const fs::path& json_path) {
    b.validate();
    const fs::path dir = json_path.parent_path();
    const std::string stem = json_path.stem().string();
    const std::string img = stem + "_proj_image.bvm";
    const std::string txt = stem + "_proj_text.bvm";
    save_matrix(b.proj_image, dir / img);
    save_matrix(b.proj_text, dir / txt);
    nlohmann::ordered_json j;
    j["proj_image"] = img;
    j["proj_text"] = txt;
    j["temperature"] = b.temperature;
    j["bias"] = b.bias;
    j["loss"] = to_string(b.loss_kind);
    detail::write_file(json_path, j.dump(2) + "\n");
}

struct DatasetManifest {
    fs::path features_path;
    std::optional<fs::path> labels_path;
    std::optional<std::vector<std::string>> class_names;
    std::optional<std::int64_t> seed;
};

inline DatasetManifest load_manifest(const fs::path& json_path) {
    DatasetManifest m;
    try {
        std::ifstream in(json_path);
        if (!in) throw IoError("cannot open " + json_path.string());
        const auto j = nlohmann::json::parse(in);
        m.features_path = resolve_relative(json_path, j.at("features").get<std::string>());
        if (j.contains("labels")) m.labels_path = resolve_relative(json_path, j["labels"].get<std::string>());
        if (j.contains("class_names")) m.class_names = j["class_names"].get<std::vector<std::string>>();
        if (j.contains("seed")) m.seed = j["seed"].get<std::int64_t>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(json_path.string() + ": " + e.what());
    }
    return m;
}

inline void save_manifest(const DatasetManifest& m, const fs::path& json_path) {
    nlohmann::ordered_json j;
    auto rel = [&](const fs::path& p) { return fs::relative(p, json_path.parent_path()).generic_string(); };
    j["features"] = rel(m.features_path);
    if (m.labels_path) j["labels"] = rel(*m.labels_path);
    if (m.class_names) j["class_names"] = *m.class_names;
    if (m.seed) j["seed"] = *m.seed;
    detail::write_file(json_path, j.dump(2) + "\n");
}

struct Dataset {
    EmbeddingMatrix features;
    std::vector<int> labels;  // empty when unlabeled
    std::size_t n_classes = 0;
};

inline void check_labels(std::span<const int> labels, std::size_t rows, std::size_t n_classes,
                         const std::string& origin) {
    if (labels.size() != rows)
        throw CorruptError(origin + ": " + std::to_string(labels.size()) + " labels for " + std::to_string(rows) +
                           " feature rows");
    for (std::size_t i = 0; i < labels.size(); ++i)
        if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= n_classes)
            throw CorruptError(origin + ": label " + std::to_string(labels[i]) + " at row " + std::to_string(i) +
                               " outside [0, " + std::to_string(n_classes) + ")");
}

// Loads and validates a manifest's files. Label/feature disagreement fails
// here, before any computation sees the data.
inline Dataset load_dataset(const DatasetManifest& m) {
    Dataset d;
    d.features = load_matrix(m.features_path);
    if (m.labels_path) {
        d.labels = load_labels(*m.labels_path);
        if (m.class_names) {
            d.n_classes = m.class_names->size();
        } else {
            d.n_classes = d.labels.empty() ? 0 : static_cast<std::size_t>(*std::max_element(d.labels.begin(), d.labels.end())) + 1;
        }
        check_labels(d.labels, d.features.rows(), d.n_classes, m.labels_path->string());
    } else if (m.class_names) {
        d.n_classes = m.class_names->size();
    }
    return d;
}

struct SyntheticProblem {
    EmbeddingMatrix features;             // n x d_in image-encoder features
    std::vector<int> labels;              // n, balanced over classes
    ModelBundle bundle;                   // P, Q, temperature
    EmbeddingMatrix class_text_features;  // n_classes x d_in text-encoder features
};

struct SyntheticOptions {
    double class_separation = 1.0;  // std of class means relative to unit noise
    double prompt_noise = 0.6;      // misalignment of class prompts in the joint space
    double temperature = 10.0;
};

// Per-class Gaussian blobs with unit-variance noise. Projections have
// N(0, 1/d_in) entries so rows have unit expected norm. Class text features
// are chosen so that Q psi_c lands near P m_c (plus prompt misalignment),
// which makes the MAP zero-shot classifier better than chance.
inline SyntheticProblem generate_synthetic(std::size_t d_in, std::size_t d_out, std::size_t n, std::size_t n_classes,
                                           std::uint64_t seed, const SyntheticOptions& opt = {}) {
    if (d_in < 1 || d_out < 1 || n < 1 || n_classes < 1) throw ArgError("generate_synthetic: counts must be >= 1");
    if (n_classes > n) throw ArgError("generate_synthetic: n_classes > n");
    Rng rng(derive_seed(seed, "synth"));
    const auto di = static_cast<Eigen::Index>(d_in);
    const auto dout = static_cast<Eigen::Index>(d_out);
    const auto nc = static_cast<Eigen::Index>(n_classes);

    const Matrix proj_img = rng.normal_matrix(dout, di) / std::sqrt(static_cast<double>(d_in));
    const Matrix proj_txt = rng.normal_matrix(dout, di) / std::sqrt(static_cast<double>(d_in));
    const Matrix means = opt.class_separation * rng.normal_matrix(nc, di);

    std::vector<int> labels(n);
    for (std::size_t i = 0; i < n; ++i) labels[i] = static_cast<int>(i % n_classes);
    std::shuffle(labels.begin(), labels.end(), rng.engine());

    Matrix feats(static_cast<Eigen::Index>(n), di);
    for (std::size_t i = 0; i < n; ++i)
        feats.row(static_cast<Eigen::Index>(i)) = means.row(labels[i]) + rng.normal_vector(di).transpose();

    // Least-squares preimage of the (perturbed) image-side class centroid.
    const auto qsolver = proj_txt.completeOrthogonalDecomposition();
    Matrix text(nc, di);
    for (Eigen::Index c = 0; c < nc; ++c) {
        const Vector target = proj_img * means.row(c).transpose();
        const double scale = target.norm() / std::sqrt(static_cast<double>(d_out));
        const Vector noisy = target + opt.prompt_noise * scale * rng.normal_vector(dout);
        text.row(c) = qsolver.solve(noisy).transpose();
    }

    SyntheticProblem out;
    out.features = EmbeddingMatrix::from_eigen(feats);
    out.labels = std::move(labels);
    out.bundle.proj_image = EmbeddingMatrix::from_eigen(proj_img);
    out.bundle.proj_text = EmbeddingMatrix::from_eigen(proj_txt);
    out.bundle.temperature = opt.temperature;
    out.bundle.bias = 0.0;
    out.bundle.loss_kind = LossKind::InfoNCE;
    out.class_text_features = EmbeddingMatrix::from_eigen(text);
    return out;
}

// Caption features paired with each image: the class prompt feature plus
// isotropic noise. Used as the text side of the contrastive fit.
inline EmbeddingMatrix paired_text_features(const SyntheticProblem& p, double noise, std::uint64_t seed) {
    Rng rng(derive_seed(seed, "synth-captions"));
    const Matrix text = p.class_text_features.to_eigen();
    Matrix out(static_cast<Eigen::Index>(p.labels.size()), text.cols());
    for (std::size_t i = 0; i < p.labels.size(); ++i)
        out.row(static_cast<Eigen::Index>(i)) = text.row(p.labels[i]) + noise * rng.normal_vector(text.cols()).transpose();
    return EmbeddingMatrix::from_eigen(out);
}

}  // namespace bayesduo
