#pragma once

// On-disk contract between external model inference and the toolkit:
// softmax tensors (NPY), label masks (PNG), class registry and manifests (JSON).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "mdsafe/detail/codec.hpp"
#include "mdsafe/detail/npy.hpp"
#include "mdsafe/detail/png.hpp"
#include "mdsafe/error.hpp"

namespace mdsafe {

namespace fs = std::filesystem;

using ClassId = std::int32_t;

/// Label value used on disk for "ignore" (Cityscapes trainId convention).
inline constexpr std::uint8_t kPngIgnoreValue = 255;
inline constexpr double kDefaultSimplexTolerance = 1e-4;

struct ClassInfo {
    ClassId id = 0;
    std::string name;

    bool operator==(const ClassInfo&) const = default;
};

class ClassRegistry {
public:
    ClassRegistry() = default;

    /// Sorts `classes` by id and checks that ids are exactly 0..K-1 and that
    /// ignore_id falls outside that range. Throws SchemaError otherwise.
    ClassRegistry(std::vector<ClassInfo> classes, ClassId ignore_id)
        : classes_(std::move(classes)), ignore_id_(ignore_id) {
        std::sort(classes_.begin(), classes_.end(),
                  [](const ClassInfo& a, const ClassInfo& b) { return a.id < b.id; });
        if (classes_.size() < 2) throw SchemaError("registry: need at least 2 classes");
        for (std::size_t i = 0; i < classes_.size(); ++i) {
            if (classes_[i].id != static_cast<ClassId>(i)) {
                throw SchemaError("registry: class ids must be exactly 0..K-1 (found id " +
                                  std::to_string(classes_[i].id) + " at position " + std::to_string(i) + ")");
            }
        }
        if (ignore_id_ >= 0 && ignore_id_ < num_classes()) {
            throw SchemaError("registry: ignore_id " + std::to_string(ignore_id_) + " collides with a class id");
        }
    }

    /// Registry with K anonymous classes named "class_<id>".
    static ClassRegistry with_classes(std::size_t k, ClassId ignore_id = kPngIgnoreValue) {
        std::vector<ClassInfo> cls;
        for (std::size_t i = 0; i < k; ++i) cls.push_back({static_cast<ClassId>(i), "class_" + std::to_string(i)});
        return ClassRegistry(std::move(cls), ignore_id);
    }

    ClassId num_classes() const { return static_cast<ClassId>(classes_.size()); }
    std::size_t size() const { return classes_.size(); }
    ClassId ignore_id() const { return ignore_id_; }
    const std::vector<ClassInfo>& classes() const { return classes_; }
    bool is_class(ClassId v) const { return v >= 0 && v < num_classes(); }

    bool operator==(const ClassRegistry&) const = default;

private:
    std::vector<ClassInfo> classes_;
    ClassId ignore_id_ = kPngIgnoreValue;
};

inline nlohmann::json to_json(const ClassRegistry& reg) {
    nlohmann::json classes = nlohmann::json::array();
    for (const auto& c : reg.classes()) classes.push_back({{"id", c.id}, {"name", c.name}});
    return {{"ignore_id", reg.ignore_id()}, {"classes", classes}};
}

inline ClassRegistry registry_from_json(const nlohmann::json& j) {
    try {
        std::vector<ClassInfo> classes;
        for (const auto& c : j.at("classes")) {
            classes.push_back({c.at("id").get<ClassId>(), c.at("name").get<std::string>()});
        }
        return ClassRegistry(std::move(classes), j.at("ignore_id").get<ClassId>());
    } catch (const nlohmann::json::exception& e) {
        throw SchemaError(std::string("registry: ") + e.what());
    }
}

/// H x W x K class probabilities, validated on construction and immutable after.
class SoftmaxTensor {
public:
    SoftmaxTensor() = default;

    /// Throws ValidationError naming the first pixel whose values leave [0, 1]
    /// or whose sum differs from 1 by more than `tolerance`.
    SoftmaxTensor(std::size_t height, std::size_t width, std::size_t classes, std::vector<float> data,
                  double tolerance = kDefaultSimplexTolerance)
        : height_(height), width_(width), classes_(classes), data_(std::move(data)) {
        if (data_.size() != height_ * width_ * classes_) {
            throw SchemaError("softmax: data size " + std::to_string(data_.size()) + " != H*W*K");
        }
        for (std::size_t p = 0; p < height_ * width_; ++p) {
            double sum = 0.0;
            for (std::size_t k = 0; k < classes_; ++k) {
                const float v = data_[p * classes_ + k];
                if (!(v >= 0.0f && v <= 1.0f)) {
                    throw ValidationError("softmax: value out of [0,1] at pixel (row " + std::to_string(p / width_) +
                                          ", col " + std::to_string(p % width_) + "), class " + std::to_string(k));
                }
                sum += v;
            }
            if (std::abs(sum - 1.0) > tolerance) {
                throw ValidationError("softmax: pixel (row " + std::to_string(p / width_) + ", col " +
                                      std::to_string(p % width_) + ") sums to " + detail::format_double(sum));
            }
        }
    }

    std::size_t height() const { return height_; }
    std::size_t width() const { return width_; }
    std::size_t num_classes() const { return classes_; }
    std::size_t num_pixels() const { return height_ * width_; }
    std::span<const float> data() const { return data_; }
    std::span<const float> pixel(std::size_t index) const {
        return std::span<const float>(data_).subspan(index * classes_, classes_);
    }

private:
    std::size_t height_ = 0, width_ = 0, classes_ = 0;
    std::vector<float> data_;
};

/// H x W ground-truth ids; each value is a registry class id or its ignore_id.
class LabelMask {
public:
    LabelMask() = default;

    LabelMask(std::size_t height, std::size_t width, std::vector<ClassId> data, const ClassRegistry& registry)
        : height_(height), width_(width), ignore_id_(registry.ignore_id()), data_(std::move(data)) {
        if (data_.size() != height_ * width_) throw SchemaError("label: data size != H*W");
        for (std::size_t p = 0; p < data_.size(); ++p) {
            if (data_[p] != ignore_id_ && !registry.is_class(data_[p])) {
                throw SchemaError("label: unknown class value " + std::to_string(data_[p]) + " at pixel " +
                                  std::to_string(p));
            }
        }
    }

    std::size_t height() const { return height_; }
    std::size_t width() const { return width_; }
    std::size_t num_pixels() const { return data_.size(); }
    ClassId ignore_id() const { return ignore_id_; }
    std::span<const ClassId> data() const { return data_; }
    ClassId at(std::size_t index) const { return data_[index]; }
    bool labeled(std::size_t index) const { return data_[index] != ignore_id_; }

private:
    std::size_t height_ = 0, width_ = 0;
    ClassId ignore_id_ = kPngIgnoreValue;
    std::vector<ClassId> data_;
};

inline void validate_pair(const SoftmaxTensor& tensor, const LabelMask& mask) {
    if (tensor.height() != mask.height() || tensor.width() != mask.width()) {
        throw SchemaError("tensor is " + std::to_string(tensor.height()) + "x" + std::to_string(tensor.width()) +
                          " but label is " + std::to_string(mask.height()) + "x" + std::to_string(mask.width()));
    }
}

// ---- softmax tensors (NPY) -------------------------------------------------

inline SoftmaxTensor decode_softmax_tensor(std::span<const std::uint8_t> bytes, const ClassRegistry& registry,
                                           double tolerance = kDefaultSimplexTolerance) {
    detail::NpyArray arr = detail::decode_npy(bytes);
    if (arr.shape.size() != 3) {
        throw SchemaError("softmax: expected a 3-D (H, W, K) array, got " + std::to_string(arr.shape.size()) + "-D");
    }
    if (arr.shape[2] != registry.size()) {
        throw SchemaError("softmax: last axis is " + std::to_string(arr.shape[2]) + " but registry has K=" +
                          std::to_string(registry.size()));
    }
    return SoftmaxTensor(arr.shape[0], arr.shape[1], arr.shape[2], std::move(arr.data), tolerance);
}

inline SoftmaxTensor load_softmax_tensor(const fs::path& path, const ClassRegistry& registry,
                                         double tolerance = kDefaultSimplexTolerance) {
    const auto bytes = detail::read_file_bytes(path);
    try {
        return decode_softmax_tensor(bytes, registry, tolerance);
    } catch (const FormatError& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

inline std::vector<std::uint8_t> encode_softmax_tensor(const SoftmaxTensor& t) {
    const std::size_t shape[3] = {t.height(), t.width(), t.num_classes()};
    return detail::encode_npy(shape, t.data());
}

inline void write_softmax_tensor(const fs::path& path, const SoftmaxTensor& t) {
    detail::write_file_atomic(path, encode_softmax_tensor(t));
}

/// 2-D float32 export of a distance map (+inf kept as IEEE infinity).
inline void write_float_image(const fs::path& path, std::size_t height, std::size_t width,
                              std::span<const double> values) {
    std::vector<float> f(values.begin(), values.end());
    const std::size_t shape[2] = {height, width};
    detail::write_file_atomic(path, detail::encode_npy(shape, f));
}

// ---- label masks (PNG) -----------------------------------------------------

inline LabelMask decode_label_mask(std::span<const std::uint8_t> bytes, const ClassRegistry& registry) {
    detail::Gray8Image img = detail::decode_gray8_png(bytes);
    std::vector<ClassId> ids(img.pixels.size());
    for (std::size_t p = 0; p < ids.size(); ++p) {
        const std::uint8_t v = img.pixels[p];
        if (v == kPngIgnoreValue) {
            ids[p] = registry.ignore_id();
        } else if (registry.is_class(v)) {
            ids[p] = v;
        } else {
            throw SchemaError("label: value " + std::to_string(v) + " at pixel " + std::to_string(p) +
                              " is not a class id (K=" + std::to_string(registry.size()) + ")");
        }
    }
    return LabelMask(img.height, img.width, std::move(ids), registry);
}

inline LabelMask load_label_mask(const fs::path& path, const ClassRegistry& registry) {
    const auto bytes = detail::read_file_bytes(path);
    try {
        return decode_label_mask(bytes, registry);
    } catch (const FormatError& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

inline std::vector<std::uint8_t> encode_label_mask(const LabelMask& mask) {
    std::vector<std::uint8_t> px(mask.num_pixels());
    for (std::size_t p = 0; p < px.size(); ++p) {
        const ClassId v = mask.at(p);
        if (v == mask.ignore_id()) {
            px[p] = kPngIgnoreValue;
        } else if (v >= 0 && v < kPngIgnoreValue) {
            px[p] = static_cast<std::uint8_t>(v);
        } else {
            throw SchemaError("label: class id " + std::to_string(v) + " does not fit an 8-bit PNG");
        }
    }
    return detail::encode_gray8_png(mask.height(), mask.width(), px);
}

inline void write_label_mask(const fs::path& path, const LabelMask& mask) {
    detail::write_file_atomic(path, encode_label_mask(mask));
}

// ---- manifests (JSON) ------------------------------------------------------

inline constexpr int kManifestSchema = 1;

struct SampleEntry {
    std::string sample_id;
    fs::path tensor_path;  // absolute or relative to the working directory
    fs::path label_path;
    std::size_t width = 0;
    std::size_t height = 0;
};

struct DatasetManifest {
    std::string name;
    std::string location_tag;
    ClassRegistry registry;
    std::vector<SampleEntry> samples;
    std::string content_hash;  // SHA-256 of the manifest file bytes
};

inline DatasetManifest load_manifest(const fs::path& path) {
    if (!fs::exists(path)) throw IoError("manifest not found: " + path.string());
    const auto bytes = detail::read_file_bytes(path);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(bytes.begin(), bytes.end());
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatError("manifest " + path.string() + ": " + e.what());
    }

    DatasetManifest m;
    m.content_hash = detail::sha256_hex(bytes);
    const fs::path base = path.parent_path();
    try {
        if (j.at("schema").get<int>() != kManifestSchema) {
            throw SchemaError("manifest: unsupported schema " + j.at("schema").dump());
        }
        m.name = j.at("name").get<std::string>();
        m.location_tag = j.value("location_tag", std::string{});
        m.registry = registry_from_json(j.at("registry"));
        std::set<std::string> seen;
        for (const auto& s : j.at("samples")) {
            SampleEntry e;
            e.sample_id = s.at("id").get<std::string>();
            if (!seen.insert(e.sample_id).second) throw SchemaError("manifest: duplicate sample_id '" + e.sample_id + "'");
            e.tensor_path = base / s.at("tensor").get<std::string>();
            e.label_path = base / s.at("label").get<std::string>();
            m.samples.push_back(std::move(e));
        }
    } catch (const nlohmann::json::exception& e) {
        throw SchemaError("manifest " + path.string() + ": " + e.what());
    }

    for (auto& e : m.samples) {
        if (!fs::exists(e.tensor_path)) {
            throw IoError("sample '" + e.sample_id + "': tensor file not found: " + e.tensor_path.string());
        }
        if (!fs::exists(e.label_path)) {
            throw IoError("sample '" + e.sample_id + "': label file not found: " + e.label_path.string());
        }
        detail::NpyHeader hdr;
        try {
            hdr = detail::peek_npy_header(e.tensor_path);
        } catch (const Error& err) {
            throw FormatError("sample '" + e.sample_id + "': " + err.what());
        }
        if (hdr.shape.size() != 3 || hdr.shape[2] != m.registry.size()) {
            throw SchemaError("sample '" + e.sample_id + "': tensor shape does not match (H, W, K=" +
                              std::to_string(m.registry.size()) + ")");
        }
        e.height = hdr.shape[0];
        e.width = hdr.shape[1];
    }
    return m;
}

/// Writes a manifest whose sample paths are stored relative to the manifest's directory.
inline void write_manifest(const fs::path& path, const DatasetManifest& m) {
    const fs::path base = path.parent_path();
    nlohmann::json samples = nlohmann::json::array();
    for (const auto& s : m.samples) {
        samples.push_back({{"id", s.sample_id},
                           {"tensor", s.tensor_path.lexically_relative(base).generic_string()},
                           {"label", s.label_path.lexically_relative(base).generic_string()}});
    }
    nlohmann::json j = {{"schema", kManifestSchema},
                        {"name", m.name},
                        {"location_tag", m.location_tag},
                        {"registry", to_json(m.registry)},
                        {"samples", samples}};
    detail::write_file_atomic(path, j.dump(2) + "\n");
}

struct Sample {
    SoftmaxTensor tensor;
    LabelMask mask;
};

/// Loads one manifest entry and checks that tensor and label agree spatially.
/// Errors are rethrown with the sample id prefixed.
inline Sample load_sample(const SampleEntry& entry, const ClassRegistry& registry,
                          double tolerance = kDefaultSimplexTolerance) {
    auto wrap = [&](const auto& e) { return "sample '" + entry.sample_id + "': " + e.what(); };
    try {
        Sample s{load_softmax_tensor(entry.tensor_path, registry, tolerance), load_label_mask(entry.label_path, registry)};
        validate_pair(s.tensor, s.mask);
        return s;
    } catch (const FormatError& e) {
        throw FormatError(wrap(e));
    } catch (const SchemaError& e) {
        throw SchemaError(wrap(e));
    } catch (const ValidationError& e) {
        throw ValidationError(wrap(e));
    } catch (const IoError& e) {
        throw IoError(wrap(e));
    }
}

}  // namespace mdsafe
