#pragma once

// Class-conditional Gaussians over true-positive softmax vectors, their
// ridge-regularized precision matrices, and the class-mean correlation matrix.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "mdsafe/dataset_io.hpp"
#include "mdsafe/detail/codec.hpp"
#include "mdsafe/detail/parallel.hpp"
#include "mdsafe/error.hpp"

namespace mdsafe {

using Eigen::MatrixXd;
using Eigen::VectorXd;

struct FitConfig {
    std::size_t max_pixels_per_class = 1'000'000;
    std::size_t max_pixels_per_class_per_image = 10'000;
    double ridge_scale = 1e-6;
    std::optional<std::size_t> min_samples_per_class;  // unset: K + 1
    std::uint64_t rng_seed = 0;
    double simplex_tolerance = kDefaultSimplexTolerance;
    // Execution only; never affects results and is not serialized.
    unsigned threads = 1;

    std::size_t min_samples(std::size_t k) const { return min_samples_per_class.value_or(k + 1); }

    void validate() const {
        if (max_pixels_per_class_per_image > max_pixels_per_class) {
            throw ConfigError("fit: max_pixels_per_class_per_image exceeds max_pixels_per_class");
        }
        if (!(ridge_scale > 0.0)) throw ConfigError("fit: ridge_scale must be > 0");
    }
};

inline nlohmann::json to_json(const FitConfig& c) {
    nlohmann::json j = {{"max_pixels_per_class", c.max_pixels_per_class},
                        {"max_pixels_per_class_per_image", c.max_pixels_per_class_per_image},
                        {"ridge_scale", detail::format_double(c.ridge_scale)},
                        {"rng_seed", c.rng_seed},
                        {"simplex_tolerance", detail::format_double(c.simplex_tolerance)}};
    j["min_samples_per_class"] = c.min_samples_per_class ? nlohmann::json(*c.min_samples_per_class) : nlohmann::json();
    return j;
}

inline FitConfig fit_config_from_json(const nlohmann::json& j) {
    FitConfig c;
    c.max_pixels_per_class = j.at("max_pixels_per_class").get<std::size_t>();
    c.max_pixels_per_class_per_image = j.at("max_pixels_per_class_per_image").get<std::size_t>();
    c.ridge_scale = std::stod(j.at("ridge_scale").get<std::string>());
    c.rng_seed = j.at("rng_seed").get<std::uint64_t>();
    c.simplex_tolerance = std::stod(j.at("simplex_tolerance").get<std::string>());
    if (!j.at("min_samples_per_class").is_null()) c.min_samples_per_class = j.at("min_samples_per_class").get<std::size_t>();
    return c;
}

namespace detail {

// splitmix64 finalizer; derives independent per-image streams from one seed.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
    std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (stream + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

}  // namespace detail

/// Fixed-capacity uniform sample of K-vectors (Algorithm R).
class VectorReservoir {
public:
    VectorReservoir(std::size_t dim, std::size_t capacity) : dim_(dim), capacity_(capacity) {}

    template <typename Rng>
    void offer(std::span<const float> v, Rng& rng) {
        ++seen_;
        if (size() < capacity_) {
            data_.insert(data_.end(), v.begin(), v.end());
            return;
        }
        std::uniform_int_distribution<std::uint64_t> pick(0, seen_ - 1);
        const std::uint64_t j = pick(rng);
        if (j < capacity_) std::copy(v.begin(), v.end(), data_.begin() + static_cast<std::ptrdiff_t>(j * dim_));
    }

    std::size_t dim() const { return dim_; }
    std::size_t size() const { return dim_ == 0 ? 0 : data_.size() / dim_; }
    std::size_t capacity() const { return capacity_; }
    std::uint64_t seen() const { return seen_; }
    std::span<const float> data() const { return data_; }
    std::span<const float> vector(std::size_t i) const { return std::span<const float>(data_).subspan(i * dim_, dim_); }

private:
    std::size_t dim_;
    std::size_t capacity_;
    std::uint64_t seen_ = 0;
    std::vector<float> data_;
};

/// One reservoir per class plus the stream RNG that decides replacements.
class PixelPool {
public:
    PixelPool(std::size_t classes, const FitConfig& config) : rng_(config.rng_seed) {
        pools_.reserve(classes);
        for (std::size_t c = 0; c < classes; ++c) pools_.emplace_back(classes, config.max_pixels_per_class);
    }

    const VectorReservoir& operator[](std::size_t c) const { return pools_[c]; }
    std::size_t num_classes() const { return pools_.size(); }

    /// Appends per-image selections in order. Must be called in a fixed
    /// image order for reproducible pools.
    void absorb(const std::vector<std::vector<float>>& per_class) {
        for (std::size_t c = 0; c < pools_.size(); ++c) {
            const auto& vecs = per_class[c];
            const std::size_t k = pools_[c].dim();
            for (std::size_t off = 0; off < vecs.size(); off += k) {
                pools_[c].offer(std::span<const float>(vecs).subspan(off, k), rng_);
            }
        }
    }

private:
    std::vector<VectorReservoir> pools_;
    std::mt19937_64 rng_;
};

/// Per-class softmax vectors of pixels with argmax == label == c, uniformly
/// subsampled to the per-image cap. Ties in argmax go to the lowest id.
/// Pure function of its inputs; safe to run concurrently for distinct images.
inline std::vector<std::vector<float>> extract_true_positives(const SoftmaxTensor& tensor, const LabelMask& mask,
                                                              const FitConfig& config, std::uint64_t image_seed) {
    validate_pair(tensor, mask);
    const std::size_t k = tensor.num_classes();
    std::vector<std::vector<std::size_t>> idx(k);
    for (std::size_t p = 0; p < tensor.num_pixels(); ++p) {
        if (!mask.labeled(p)) continue;
        const auto o = tensor.pixel(p);
        const auto c = static_cast<std::size_t>(std::max_element(o.begin(), o.end()) - o.begin());
        if (static_cast<ClassId>(c) == mask.at(p)) idx[c].push_back(p);
    }
    std::mt19937_64 rng(image_seed);
    std::vector<std::vector<float>> out(k);
    for (std::size_t c = 0; c < k; ++c) {
        auto& ids = idx[c];
        const std::size_t cap = config.max_pixels_per_class_per_image;
        if (ids.size() > cap) {
            // Partial Fisher-Yates, then restore scan order.
            for (std::size_t i = 0; i < cap; ++i) {
                std::uniform_int_distribution<std::size_t> pick(i, ids.size() - 1);
                std::swap(ids[i], ids[pick(rng)]);
            }
            ids.resize(cap);
            std::sort(ids.begin(), ids.end());
        }
        out[c].reserve(ids.size() * k);
        for (auto p : ids) {
            const auto o = tensor.pixel(p);
            out[c].insert(out[c].end(), o.begin(), o.end());
        }
    }
    return out;
}

inline void select_true_positive_pixels(const SoftmaxTensor& tensor, const LabelMask& mask, const FitConfig& config,
                                        PixelPool& pool, std::uint64_t image_index = 0) {
    if (tensor.num_classes() != pool.num_classes()) throw SchemaError("pool: class count differs from tensor K");
    pool.absorb(extract_true_positives(tensor, mask, config, detail::mix_seed(config.rng_seed, image_index)));
}

struct ClassGaussian {
    ClassId class_id = 0;
    VectorXd mean;
    MatrixXd covariance;
    MatrixXd precision;  // (covariance + lambda I)^-1
    double lambda = 0.0;
    std::size_t sample_count = 0;
    bool valid = false;

    /// max-norm of (S + lambda I) P - I
    double precision_residual() const {
        const auto k = covariance.rows();
        MatrixXd reg = covariance + lambda * MatrixXd::Identity(k, k);
        return (reg * precision - MatrixXd::Identity(k, k)).cwiseAbs().maxCoeff();
    }
};

/// (covariance + lambda I)^-1 via Cholesky plus one Newton-Schulz
/// refinement step. Not re-symmetrized: averaging with the transpose undoes
/// the refinement on ill-conditioned inputs, and quadratic forms only see the
/// symmetric part anyway.
inline MatrixXd regularized_precision(const MatrixXd& covariance, double lambda, ClassId class_id = 0) {
    const MatrixXd id = MatrixXd::Identity(covariance.rows(), covariance.cols());
    const MatrixXd reg = covariance + lambda * id;
    Eigen::LLT<MatrixXd> llt(reg);
    if (llt.info() != Eigen::Success) {
        throw NumericalError("regularized covariance of class " + std::to_string(class_id) +
                             " is not positive definite");
    }
    MatrixXd p = llt.solve(id);
    p += p * (id - reg * p);
    return p;
}

/// Biased (1/N) mean and covariance of `pool` (row-major N x k floats), with
/// precision = (S + lambda I)^-1 and lambda = ridge_scale * trace(S) / k
/// (ridge_scale itself when the trace is zero). Never throws for small pools;
/// they come back with valid == false.
inline ClassGaussian fit_gaussian(std::span<const float> pool, std::size_t k, const FitConfig& config,
                                  ClassId class_id = 0) {
    ClassGaussian g;
    g.class_id = class_id;
    g.sample_count = k == 0 ? 0 : pool.size() / k;
    g.mean = VectorXd::Zero(static_cast<Eigen::Index>(k));
    g.covariance = MatrixXd::Zero(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(k));

    const std::size_t n = g.sample_count;
    using RowMajorF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    if (n > 0) {
        Eigen::Map<const RowMajorF> x(pool.data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(k));
        constexpr Eigen::Index kBlock = 4096;
        for (Eigen::Index r = 0; r < x.rows(); r += kBlock) {
            const Eigen::Index rows = std::min(kBlock, x.rows() - r);
            g.mean += x.middleRows(r, rows).cast<double>().colwise().sum().transpose();
        }
        g.mean /= static_cast<double>(n);
        for (Eigen::Index r = 0; r < x.rows(); r += kBlock) {
            const Eigen::Index rows = std::min(kBlock, x.rows() - r);
            MatrixXd centered = x.middleRows(r, rows).cast<double>().rowwise() - g.mean.transpose();
            g.covariance.noalias() += centered.transpose() * centered;
        }
        g.covariance /= static_cast<double>(n);
        g.covariance = 0.5 * (g.covariance + g.covariance.transpose()).eval();
    }

    const double trace = g.covariance.trace();
    g.lambda = trace > 0.0 ? config.ridge_scale * trace / static_cast<double>(k) : config.ridge_scale;
    g.precision = regularized_precision(g.covariance, g.lambda, class_id);
    g.valid = n >= config.min_samples(k);
    return g;
}

struct BankProvenance {
    std::string manifest_name;
    std::string manifest_hash;
};

struct GaussianBank {
    ClassRegistry registry;
    std::vector<ClassGaussian> gaussians;
    FitConfig fit_config;
    BankProvenance provenance;

    std::size_t num_classes() const { return registry.size(); }
    const ClassGaussian& operator[](std::size_t c) const { return gaussians[c]; }
};

/// Streams every sample through the true-positive selection and fits one
/// Gaussian per class. Images are processed in parallel batches; pools are
/// merged in manifest order, so the result is independent of `threads`.
inline GaussianBank fit_bank(const DatasetManifest& manifest, const FitConfig& config) {
    config.validate();
    if (manifest.samples.empty()) throw EmptyDatasetError("fit: manifest '" + manifest.name + "' has no samples");
    const std::size_t k = manifest.registry.size();
    PixelPool pool(k, config);

    const std::size_t batch = std::max<std::size_t>(1, 4 * static_cast<std::size_t>(config.threads));
    for (std::size_t start = 0; start < manifest.samples.size(); start += batch) {
        const std::size_t end = std::min(start + batch, manifest.samples.size());
        std::vector<std::vector<std::vector<float>>> extracted(end - start);
        detail::parallel_for(end - start, config.threads, [&](std::size_t i) {
            const auto& entry = manifest.samples[start + i];
            Sample s = load_sample(entry, manifest.registry, config.simplex_tolerance);
            extracted[i] = extract_true_positives(s.tensor, s.mask, config, detail::mix_seed(config.rng_seed, start + i));
        });
        for (const auto& e : extracted) pool.absorb(e);
    }

    GaussianBank bank{manifest.registry, {}, config, {manifest.name, manifest.content_hash}};
    bank.gaussians.resize(k);
    detail::parallel_for(k, config.threads, [&](std::size_t c) {
        bank.gaussians[c] = fit_gaussian(pool[c].data(), k, config, static_cast<ClassId>(c));
    });
    return bank;
}

// ---- class correlation -----------------------------------------------------

struct CorrelationMatrix {
    std::size_t k = 0;
    std::vector<double> values;  // row-major k x k; NaN where undefined
    std::vector<bool> undefined;
    std::string basis = "mean_vectors";
    bool diagonal_masked = true;  // the diagonal is 1 by construction and hidden in plots

    double at(std::size_t i, std::size_t j) const { return values[i * k + j]; }
};

/// Pearson correlation between class mean vectors across their K components.
/// Invalid classes and zero-variance means yield NaN entries, flagged undefined.
inline CorrelationMatrix class_correlation(const GaussianBank& bank) {
    const std::size_t k = bank.num_classes();
    const auto n_valid = std::count_if(bank.gaussians.begin(), bank.gaussians.end(), [](const auto& g) { return g.valid; });
    if (n_valid < 2) throw SchemaError("correlation: need at least two valid classes");

    std::vector<VectorXd> centered(k);
    std::vector<double> norms(k);
    for (std::size_t c = 0; c < k; ++c) {
        centered[c] = bank[c].mean.array() - bank[c].mean.mean();
        norms[c] = centered[c].norm();
    }
    CorrelationMatrix m;
    m.k = k;
    m.values.assign(k * k, std::numeric_limits<double>::quiet_NaN());
    m.undefined.assign(k * k, true);
    for (std::size_t i = 0; i < k; ++i) {
        for (std::size_t j = i; j < k; ++j) {
            if (!bank[i].valid || !bank[j].valid || norms[i] == 0.0 || norms[j] == 0.0) continue;
            const double r = i == j ? 1.0 : std::clamp(centered[i].dot(centered[j]) / (norms[i] * norms[j]), -1.0, 1.0);
            m.values[i * k + j] = m.values[j * k + i] = r;
            m.undefined[i * k + j] = m.undefined[j * k + i] = false;
        }
    }
    return m;
}

inline std::string correlation_csv(const CorrelationMatrix& m, const ClassRegistry& registry) {
    std::string out = "class";
    for (const auto& c : registry.classes()) out += "," + c.name;
    out += "\n";
    for (std::size_t i = 0; i < m.k; ++i) {
        out += registry.classes()[i].name;
        for (std::size_t j = 0; j < m.k; ++j) out += "," + (m.undefined[i * m.k + j] ? std::string("nan") : detail::format_double(m.at(i, j)));
        out += "\n";
    }
    return out;
}

// ---- persistence -------------------------------------------------------------

inline constexpr int kBankSchema = 1;

namespace detail {

inline std::string encode_doubles(const double* p, std::size_t n) {
    return base64_encode(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(p), n * sizeof(double)));
}

inline std::vector<double> decode_doubles(const std::string& s, std::size_t expected) {
    const auto bytes = base64_decode(s);
    if (bytes.size() != expected * sizeof(double)) throw IntegrityError("bank: matrix payload has wrong size");
    std::vector<double> out(expected);
    std::memcpy(out.data(), bytes.data(), bytes.size());
    return out;
}

}  // namespace detail

inline std::string serialize_bank(const GaussianBank& bank) {
    nlohmann::json classes = nlohmann::json::array();
    for (const auto& g : bank.gaussians) {
        const auto k = static_cast<std::size_t>(g.mean.size());
        classes.push_back({{"class_id", g.class_id},
                           {"sample_count", g.sample_count},
                           {"valid", g.valid},
                           {"lambda", detail::encode_doubles(&g.lambda, 1)},
                           {"mean", detail::encode_doubles(g.mean.data(), k)},
                           {"covariance", detail::encode_doubles(g.covariance.data(), k * k)},
                           {"precision", detail::encode_doubles(g.precision.data(), k * k)}});
    }
    nlohmann::json env = {{"schema", kBankSchema},
                          {"registry", to_json(bank.registry)},
                          {"fit_config", to_json(bank.fit_config)},
                          {"provenance", {{"manifest_name", bank.provenance.manifest_name},
                                          {"manifest_hash", bank.provenance.manifest_hash}}},
                          {"encoding", "base64 little-endian float64, column-major"},
                          {"classes", classes}};
    env["sha256"] = detail::sha256_hex(env.dump());
    return env.dump(1) + "\n";
}

inline GaussianBank deserialize_bank(std::string_view text) {
    nlohmann::json env;
    try {
        env = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw IntegrityError(std::string("bank: unreadable or truncated: ") + e.what());
    }
    if (!env.is_object() || !env.contains("sha256")) throw IntegrityError("bank: missing content hash");
    const std::string stored = env["sha256"].get<std::string>();
    env.erase("sha256");
    if (detail::sha256_hex(env.dump()) != stored) throw IntegrityError("bank: content hash mismatch");

    GaussianBank bank;
    try {
        if (env.at("schema").get<int>() != kBankSchema) throw SchemaError("bank: unsupported schema");
        bank.registry = registry_from_json(env.at("registry"));
        bank.fit_config = fit_config_from_json(env.at("fit_config"));
        bank.provenance = {env.at("provenance").at("manifest_name").get<std::string>(),
                           env.at("provenance").at("manifest_hash").get<std::string>()};
        const std::size_t k = bank.registry.size();
        const auto& classes = env.at("classes");
        if (classes.size() != k) throw SchemaError("bank: expected one Gaussian per registry class");
        for (std::size_t c = 0; c < k; ++c) {
            const auto& jc = classes[c];
            ClassGaussian g;
            g.class_id = jc.at("class_id").get<ClassId>();
            if (g.class_id != static_cast<ClassId>(c)) throw SchemaError("bank: classes out of order");
            g.sample_count = jc.at("sample_count").get<std::size_t>();
            g.valid = jc.at("valid").get<bool>();
            g.lambda = detail::decode_doubles(jc.at("lambda").get<std::string>(), 1)[0];
            const auto ek = static_cast<Eigen::Index>(k);
            const auto mean = detail::decode_doubles(jc.at("mean").get<std::string>(), k);
            const auto cov = detail::decode_doubles(jc.at("covariance").get<std::string>(), k * k);
            const auto prec = detail::decode_doubles(jc.at("precision").get<std::string>(), k * k);
            g.mean = Eigen::Map<const VectorXd>(mean.data(), ek);
            g.covariance = Eigen::Map<const MatrixXd>(cov.data(), ek, ek);
            g.precision = Eigen::Map<const MatrixXd>(prec.data(), ek, ek);
            bank.gaussians.push_back(std::move(g));
        }
    } catch (const nlohmann::json::exception& e) {
        throw SchemaError(std::string("bank: ") + e.what());
    } catch (const FormatError& e) {
        throw IntegrityError(std::string("bank: ") + e.what());
    }
    return bank;
}

inline void save_bank(const GaussianBank& bank, const fs::path& path) {
    detail::write_file_atomic(path, serialize_bank(bank));
}

inline GaussianBank load_bank(const fs::path& path) {
    const auto bytes = detail::read_file_bytes(path);
    return deserialize_bank(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
}

}  // namespace mdsafe
