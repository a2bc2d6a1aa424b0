#pragma once

// Synthetic datasets with known ground truth. Softmax vectors are Dirichlet
// draws around a per-class mean (so the generator mean is exactly that
// vector); planted misclassifications use a "confused" mean split between the
// predicted and true class; planted outliers are pushed off the simplex and
// renormalized.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "mdsafe/dataset_io.hpp"
#include "mdsafe/detail/codec.hpp"
#include "mdsafe/error.hpp"

namespace mdsafe::synth {

struct SynthSpec {
    std::string name = "synthetic";
    std::string location_tag = "synthetic";
    std::size_t num_classes = 19;
    std::size_t height = 32;
    std::size_t width = 32;
    std::size_t n_images = 10;
    std::uint64_t rng_seed = 0;

    // Parametric class means: `confidence` on the class itself,
    // `neighbor_mass` on class (c + 1) mod K, the rest spread evenly.
    double confidence = 0.9;
    double neighbor_mass = 0.0;
    // Explicit K x K means override the parametric form when present.
    std::optional<std::vector<std::vector<double>>> class_means;
    double concentration = 100.0;  // Dirichlet precision; larger is tighter

    double misclassification_rate = 0.0;
    double confusion_predicted_mass = 0.6;
    double confusion_label_mass = 0.35;

    double outlier_rate = 0.0;
    double outlier_shift = 0.0;

    double ignore_rate = 0.0;
};

inline std::vector<double> spread_mean(std::size_t k, std::size_t major, double major_mass, std::size_t minor,
                                       double minor_mass) {
    std::vector<double> m(k, 0.0);
    m[major] += major_mass;
    m[minor] += minor_mass;
    std::vector<std::size_t> others;
    for (std::size_t i = 0; i < k; ++i) {
        if (i != major && (i != minor || minor_mass == 0.0)) others.push_back(i);
    }
    const double rest = 1.0 - major_mass - minor_mass;
    if (others.empty()) {
        m[major] += rest;
    } else {
        for (auto i : others) m[i] += rest / static_cast<double>(others.size());
    }
    return m;
}

/// Generator mean vector of class c.
inline std::vector<std::vector<double>> generator_means(const SynthSpec& s) {
    if (s.class_means) return *s.class_means;
    std::vector<std::vector<double>> out;
    for (std::size_t c = 0; c < s.num_classes; ++c) {
        out.push_back(spread_mean(s.num_classes, c, s.confidence, (c + 1) % s.num_classes, s.neighbor_mass));
    }
    return out;
}

inline void validate(const SynthSpec& s) {
    auto in01 = [](double v) { return v >= 0.0 && v <= 1.0; };
    if (s.num_classes < 2 || s.num_classes > 254) throw ConfigError("synth: num_classes must be in [2, 254]");
    if (s.height == 0 || s.width == 0 || s.n_images == 0) throw ConfigError("synth: empty dimensions");
    if (!(s.concentration > 0.0)) throw ConfigError("synth: concentration must be > 0");
    if (!in01(s.misclassification_rate) || !in01(s.outlier_rate) || !in01(s.ignore_rate)) {
        throw ConfigError("synth: rates must lie in [0, 1]");
    }
    if (!(s.outlier_shift >= 0.0)) throw ConfigError("synth: outlier_shift must be >= 0");
    if (s.confusion_predicted_mass + s.confusion_label_mass > 1.0 || !(s.confusion_predicted_mass > 0.0) ||
        !(s.confusion_label_mass > 0.0)) {
        throw ConfigError("synth: invalid confusion masses");
    }
    const auto means = generator_means(s);
    if (means.size() != s.num_classes) throw ConfigError("synth: class_means must have K rows");
    for (const auto& m : means) {
        if (m.size() != s.num_classes) throw ConfigError("synth: class_means rows must have K entries");
        double sum = 0.0;
        for (double v : m) {
            if (!(v > 0.0)) throw ConfigError("synth: every mean component must be > 0");
            sum += v;
        }
        if (std::abs(sum - 1.0) > 1e-9) throw ConfigError("synth: class mean rows must sum to 1");
    }
}

inline nlohmann::json to_json(const SynthSpec& s) {
    nlohmann::json j = {{"name", s.name},
                        {"location_tag", s.location_tag},
                        {"num_classes", s.num_classes},
                        {"height", s.height},
                        {"width", s.width},
                        {"n_images", s.n_images},
                        {"rng_seed", s.rng_seed},
                        {"confidence", s.confidence},
                        {"neighbor_mass", s.neighbor_mass},
                        {"concentration", s.concentration},
                        {"misclassification_rate", s.misclassification_rate},
                        {"confusion_predicted_mass", s.confusion_predicted_mass},
                        {"confusion_label_mass", s.confusion_label_mass},
                        {"outlier_rate", s.outlier_rate},
                        {"outlier_shift", s.outlier_shift},
                        {"ignore_rate", s.ignore_rate}};
    if (s.class_means) j["class_means"] = *s.class_means;
    return j;
}

inline SynthSpec spec_from_json(const nlohmann::json& j) {
    SynthSpec s;
    try {
        s.name = j.value("name", s.name);
        s.location_tag = j.value("location_tag", s.location_tag);
        s.num_classes = j.value("num_classes", s.num_classes);
        s.height = j.value("height", s.height);
        s.width = j.value("width", s.width);
        s.n_images = j.value("n_images", s.n_images);
        s.rng_seed = j.value("rng_seed", s.rng_seed);
        s.confidence = j.value("confidence", s.confidence);
        s.neighbor_mass = j.value("neighbor_mass", s.neighbor_mass);
        s.concentration = j.value("concentration", s.concentration);
        s.misclassification_rate = j.value("misclassification_rate", s.misclassification_rate);
        s.confusion_predicted_mass = j.value("confusion_predicted_mass", s.confusion_predicted_mass);
        s.confusion_label_mass = j.value("confusion_label_mass", s.confusion_label_mass);
        s.outlier_rate = j.value("outlier_rate", s.outlier_rate);
        s.outlier_shift = j.value("outlier_shift", s.outlier_shift);
        s.ignore_rate = j.value("ignore_rate", s.ignore_rate);
        if (j.contains("class_means")) s.class_means = j.at("class_means").get<std::vector<std::vector<double>>>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("synth spec: ") + e.what());
    }
    validate(s);
    return s;
}

struct PlantedPixels {
    std::string sample_id;
    std::vector<std::size_t> outliers;
    std::vector<std::size_t> misclassified;
};

struct GroundTruth {
    SynthSpec spec;
    std::vector<std::vector<double>> class_means;
    std::vector<PlantedPixels> images;
};

struct GeneratedDataset {
    std::filesystem::path manifest_path;
    std::filesystem::path ground_truth_path;
    GroundTruth truth;
};

namespace detail_synth {

template <typename Rng>
std::vector<double> dirichlet(const std::vector<double>& mean, double concentration, Rng& rng) {
    std::vector<double> v(mean.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < mean.size(); ++i) {
        std::gamma_distribution<double> g(concentration * mean[i], 1.0);
        v[i] = g(rng);
        sum += v[i];
    }
    for (auto& x : v) x /= sum;
    return v;
}

inline std::size_t argmax(const std::vector<double>& v) {
    return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

// Redraws until `target` is the (first) argmax; falls back to a swap.
template <typename Rng>
std::vector<double> draw_with_argmax(const std::vector<double>& mean, double concentration, std::size_t target,
                                     Rng& rng) {
    std::vector<double> v;
    for (int attempt = 0; attempt < 64; ++attempt) {
        v = dirichlet(mean, concentration, rng);
        if (argmax(v) == target) return v;
    }
    std::swap(v[argmax(v)], v[target]);
    return v;
}

}  // namespace detail_synth

/// Writes tensors/, labels/, manifest.json and ground_truth.json under `out_dir`.
/// Single-threaded and fully determined by the spec (including rng_seed).
inline GeneratedDataset generate(const SynthSpec& spec, const std::filesystem::path& out_dir) {
    namespace fs = std::filesystem;
    using namespace detail_synth;
    validate(spec);
    std::error_code ec;
    fs::create_directories(out_dir / "tensors", ec);
    if (!ec) fs::create_directories(out_dir / "labels", ec);
    if (ec) throw IoError("synth: cannot create " + out_dir.string() + ": " + ec.message());

    const std::size_t k = spec.num_classes;
    const ClassRegistry registry = ClassRegistry::with_classes(k);
    GroundTruth truth{spec, generator_means(spec), {}};
    DatasetManifest manifest{spec.name, spec.location_tag, registry, {}, {}};

    std::mt19937_64 rng(spec.rng_seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::uniform_int_distribution<std::size_t> any_class(0, k - 1);
    std::uniform_int_distribution<std::size_t> other_class(1, k - 1);

    const std::size_t n_px = spec.height * spec.width;
    for (std::size_t img = 0; img < spec.n_images; ++img) {
        char id_buf[32];
        std::snprintf(id_buf, sizeof(id_buf), "img_%05zu", img);
        const std::string id = id_buf;
        PlantedPixels planted{id, {}, {}};
        std::vector<float> probs(n_px * k);
        std::vector<ClassId> labels(n_px);
        for (std::size_t p = 0; p < n_px; ++p) {
            const std::size_t label = any_class(rng);
            const bool ignored = unit(rng) < spec.ignore_rate;
            const double u = unit(rng);
            std::vector<double> v;
            if (u < spec.outlier_rate) {
                v = draw_with_argmax(truth.class_means[label], spec.concentration, label, rng);
                std::vector<double> w(k, 0.0);
                w[(label + 1) % k] += 1.0;
                if (k > 2) w[(label + 2) % k] += 0.8;
                double sum = 0.0;
                for (std::size_t i = 0; i < k; ++i) sum += (v[i] += spec.outlier_shift * w[i]);
                for (auto& x : v) x /= sum;
                planted.outliers.push_back(p);
            } else if (u < spec.outlier_rate + spec.misclassification_rate) {
                const std::size_t guess = (label + other_class(rng)) % k;
                const auto mean = spread_mean(k, guess, spec.confusion_predicted_mass, label, spec.confusion_label_mass);
                v = draw_with_argmax(mean, spec.concentration, guess, rng);
                planted.misclassified.push_back(p);
            } else {
                v = draw_with_argmax(truth.class_means[label], spec.concentration, label, rng);
            }
            for (std::size_t i = 0; i < k; ++i) probs[p * k + i] = static_cast<float>(v[i]);
            labels[p] = ignored ? registry.ignore_id() : static_cast<ClassId>(label);
        }
        SampleEntry entry{id, out_dir / "tensors" / (id + ".npy"), out_dir / "labels" / (id + ".png"), spec.width,
                          spec.height};
        write_softmax_tensor(entry.tensor_path, SoftmaxTensor(spec.height, spec.width, k, std::move(probs)));
        write_label_mask(entry.label_path, LabelMask(spec.height, spec.width, std::move(labels), registry));
        manifest.samples.push_back(std::move(entry));
        truth.images.push_back(std::move(planted));
    }

    GeneratedDataset out{out_dir / "manifest.json", out_dir / "ground_truth.json", std::move(truth)};
    write_manifest(out.manifest_path, manifest);

    nlohmann::json images = nlohmann::json::array();
    for (const auto& im : out.truth.images) {
        images.push_back({{"id", im.sample_id}, {"outliers", im.outliers}, {"misclassified", im.misclassified}});
    }
    nlohmann::json gt = {{"spec", to_json(spec)}, {"class_means", out.truth.class_means}, {"images", images}};
    mdsafe::detail::write_file_atomic(out.ground_truth_path, gt.dump(1) + "\n");
    return out;
}

}  // namespace mdsafe::synth
