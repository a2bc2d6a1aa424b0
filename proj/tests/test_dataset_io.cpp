#include <fstream>
#include <random>

#include <gtest/gtest.h>

#include "test_helpers.hpp"

namespace mdsafe {
namespace {

using testing::TempDir;

TEST(SoftmaxTensor, OneHotTensorLoads) {
    TempDir dir;
    const auto reg = ClassRegistry::with_classes(3);
    std::vector<float> data;
    for (int p = 0; p < 4; ++p) data.insert(data.end(), {1.0f, 0.0f, 0.0f});
    write_softmax_tensor(dir / "t.npy", SoftmaxTensor(2, 2, 3, data));
    const auto t = load_softmax_tensor(dir / "t.npy", reg);
    EXPECT_EQ(t.height(), 2u);
    EXPECT_EQ(t.width(), 2u);
    EXPECT_EQ(t.num_classes(), 3u);
    EXPECT_EQ(t.pixel(3)[0], 1.0f);
}

TEST(SoftmaxTensor, SumOffSimplexIsValidationErrorNamingPixel) {
    const std::size_t shape[3] = {2, 2, 3};
    std::vector<float> data(12, 0.0f);
    for (int p = 0; p < 4; ++p) data[p * 3] = 1.0f;
    data[3 * 3] = 0.9f;  // pixel (1, 1)
    const auto bytes = detail::encode_npy(shape, data);
    try {
        decode_softmax_tensor(bytes, ClassRegistry::with_classes(3));
        FAIL() << "expected ValidationError";
    } catch (const ValidationError& e) {
        EXPECT_NE(std::string(e.what()).find("row 1, col 1"), std::string::npos) << e.what();
    }
}

TEST(SoftmaxTensor, ToleranceIsConfigurable) {
    const std::size_t shape[3] = {1, 1, 2};
    const std::vector<float> data = {0.5f, 0.49f};
    const auto bytes = detail::encode_npy(shape, data);
    EXPECT_THROW(decode_softmax_tensor(bytes, ClassRegistry::with_classes(2)), ValidationError);
    EXPECT_NO_THROW(decode_softmax_tensor(bytes, ClassRegistry::with_classes(2), 0.02));
}

TEST(SoftmaxTensor, NegativeOrNanValuesRejected) {
    EXPECT_THROW(SoftmaxTensor(1, 1, 2, {1.5f, -0.5f}), ValidationError);
    EXPECT_THROW(SoftmaxTensor(1, 1, 2, {std::nanf(""), 1.0f}), ValidationError);
}

TEST(SoftmaxTensor, ShapeMismatchesAreSchemaErrors) {
    const auto reg = ClassRegistry::with_classes(3);
    const std::vector<float> data(8, 0.5f);
    const std::size_t wrong_k[3] = {2, 2, 2};
    EXPECT_THROW(decode_softmax_tensor(detail::encode_npy(wrong_k, data), reg), SchemaError);
    const std::size_t two_d[2] = {4, 2};
    EXPECT_THROW(decode_softmax_tensor(detail::encode_npy(two_d, data), reg), SchemaError);
}

TEST(Npy, HeaderIsAlignedAndNewlineTerminated) {
    const std::size_t shape[3] = {3, 5, 19};
    const std::vector<float> data(3 * 5 * 19, 0.0f);
    const auto bytes = detail::encode_npy(shape, data);
    const std::size_t hlen = bytes[8] | (bytes[9] << 8);
    EXPECT_EQ((10 + hlen) % 64, 0u);
    EXPECT_EQ(bytes[10 + hlen - 1], '\n');
    const std::string header(bytes.begin() + 10, bytes.begin() + 10 + static_cast<long>(hlen));
    EXPECT_NE(header.find("'descr': '<f4'"), std::string::npos);
    EXPECT_NE(header.find("'shape': (3, 5, 19)"), std::string::npos);
}

TEST(Npy, MalformedHeadersAreFormatErrors) {
    const std::size_t shape[3] = {1, 1, 2};
    const std::vector<float> data = {0.5f, 0.5f};
    const auto good = detail::encode_npy(shape, data);
    const auto reg = ClassRegistry::with_classes(2);

    auto bad_magic = good;
    bad_magic[1] = 'X';
    EXPECT_THROW(decode_softmax_tensor(bad_magic, reg), FormatError);

    auto bad_version = good;
    bad_version[6] = 2;
    EXPECT_THROW(decode_softmax_tensor(bad_version, reg), FormatError);

    auto replace = [&](const std::string& from, const std::string& to) {
        std::string s(good.begin(), good.end());
        s.replace(s.find(from), from.size(), to);
        return std::vector<std::uint8_t>(s.begin(), s.end());
    };
    EXPECT_THROW(decode_softmax_tensor(replace("<f4", "<f8"), reg), FormatError);
    EXPECT_THROW(decode_softmax_tensor(replace("False", "True "), reg), FormatError);
    EXPECT_THROW(decode_softmax_tensor(replace("(1, 1, 2)", "(1, x, 2)"), reg), FormatError);

    auto extra = good;
    extra.push_back(0);
    EXPECT_THROW(decode_softmax_tensor(extra, reg), FormatError);
}

TEST(Npy, RoundTripIsBitExactForRandomTensors) {
    std::mt19937_64 rng(7);
    std::uniform_int_distribution<std::size_t> dim(1, 9), kdim(2, 21);
    for (int trial = 0; trial < 25; ++trial) {
        const std::size_t h = dim(rng), w = dim(rng), k = kdim(rng);
        const auto t = testing::random_tensor(h, w, k, rng);
        const auto bytes = encode_softmax_tensor(t);
        const auto back = decode_softmax_tensor(bytes, ClassRegistry::with_classes(k));
        ASSERT_EQ(back.data().size(), t.data().size());
        EXPECT_EQ(std::memcmp(back.data().data(), t.data().data(), t.data().size_bytes()), 0);
        EXPECT_EQ(encode_softmax_tensor(back), bytes);
    }
}

TEST(Npy, TruncatedAndCorruptedFilesNeverCrash) {
    std::mt19937_64 rng(11);
    const auto t = testing::random_tensor(3, 4, 5, rng);
    const auto good = encode_softmax_tensor(t);
    const auto reg = ClassRegistry::with_classes(5);
    for (std::size_t len = 0; len < good.size(); ++len) {
        std::vector<std::uint8_t> cut(good.begin(), good.begin() + static_cast<long>(len));
        EXPECT_THROW(decode_softmax_tensor(cut, reg), Error) << "length " << len;
    }
    std::uniform_int_distribution<std::size_t> pos(0, good.size() - 1);
    std::uniform_int_distribution<int> byte(0, 255);
    for (int trial = 0; trial < 2000; ++trial) {
        auto bad = good;
        for (int flips = 0; flips < 3; ++flips) bad[pos(rng)] = static_cast<std::uint8_t>(byte(rng));
        try {
            decode_softmax_tensor(bad, reg);
        } catch (const Error&) {
        }
    }
}

TEST(LabelMask, PngWithIgnoreValueMapsToIgnoreId) {
    const auto reg = ClassRegistry::with_classes(3, 99);
    const std::vector<std::uint8_t> px = {0, 1, 2, 255};
    const auto mask = decode_label_mask(detail::encode_gray8_png(2, 2, px), reg);
    EXPECT_EQ(mask.at(0), 0);
    EXPECT_EQ(mask.at(2), 2);
    EXPECT_EQ(mask.at(3), 99);
    EXPECT_EQ(count_labeled(mask), 3u);
}

TEST(LabelMask, OutOfRangeValueIsSchemaError) {
    const auto reg = ClassRegistry::with_classes(19);
    const std::vector<std::uint8_t> px = {0, 40, 1, 2};
    EXPECT_THROW(decode_label_mask(detail::encode_gray8_png(2, 2, px), reg), SchemaError);
}

TEST(LabelMask, RoundTripOfRandomMasks) {
    std::mt19937_64 rng(3);
    const auto reg = ClassRegistry::with_classes(19);
    TempDir dir;
    for (int trial = 0; trial < 10; ++trial) {
        const auto mask = testing::random_mask(7 + trial, 13, reg, 0.2, rng);
        write_label_mask(dir / "m.png", mask);
        const auto back = load_label_mask(dir / "m.png", reg);
        ASSERT_EQ(back.height(), mask.height());
        EXPECT_TRUE(std::equal(back.data().begin(), back.data().end(), mask.data().begin()));
    }
}

TEST(LabelMask, ColorPngRejected) {
    png_image image;
    std::memset(&image, 0, sizeof(image));
    image.version = PNG_IMAGE_VERSION;
    image.width = 2;
    image.height = 1;
    image.format = PNG_FORMAT_RGB;
    const std::vector<std::uint8_t> rgb = {0, 0, 0, 1, 1, 1};
    png_alloc_size_t size = 0;
    png_image_write_to_memory(&image, nullptr, &size, 0, rgb.data(), 0, nullptr);
    std::vector<std::uint8_t> buf(size);
    ASSERT_NE(png_image_write_to_memory(&image, buf.data(), &size, 0, rgb.data(), 0, nullptr), 0);
    buf.resize(size);
    EXPECT_THROW(decode_label_mask(buf, ClassRegistry::with_classes(3)), FormatError);
}

TEST(LabelMask, TruncatedPngNeverCrashes) {
    std::mt19937_64 rng(5);
    const auto reg = ClassRegistry::with_classes(4);
    const auto good = encode_label_mask(testing::random_mask(6, 6, reg, 0.1, rng));
    for (std::size_t len = 0; len < good.size(); ++len) {
        std::vector<std::uint8_t> cut(good.begin(), good.begin() + static_cast<long>(len));
        EXPECT_THROW(decode_label_mask(cut, reg), Error) << "length " << len;
    }
}

TEST(ClassRegistry, InvariantsEnforced) {
    EXPECT_THROW(ClassRegistry({{0, "a"}}, 255), SchemaError);
    EXPECT_THROW(ClassRegistry({{0, "a"}, {2, "b"}}, 255), SchemaError);
    EXPECT_THROW(ClassRegistry({{0, "a"}, {0, "b"}}, 255), SchemaError);
    EXPECT_THROW(ClassRegistry({{0, "a"}, {1, "b"}}, 1), SchemaError);
    const ClassRegistry r({{1, "b"}, {0, "a"}}, -1);
    EXPECT_EQ(r.classes()[0].name, "a");
}

TEST(ValidatePair, DimensionMismatchRejected) {
    const auto reg = ClassRegistry::with_classes(2);
    const SoftmaxTensor t(1, 2, 2, {1.0f, 0.0f, 0.0f, 1.0f});
    const LabelMask m(2, 1, {0, 1}, reg);
    EXPECT_THROW(validate_pair(t, m), SchemaError);
}

class ManifestTest : public ::testing::Test {
protected:
    void SetUp() override {
        reg_ = ClassRegistry::with_classes(3);
        for (const char* id : {"a", "b"}) {
            write_softmax_tensor(dir_ / (std::string(id) + ".npy"), SoftmaxTensor(1, 2, 3, {1, 0, 0, 0, 1, 0}));
            write_label_mask(dir_ / (std::string(id) + ".png"), LabelMask(1, 2, {0, 1}, reg_));
        }
    }

    fs::path write_json(const nlohmann::json& j) {
        const auto p = dir_ / "manifest.json";
        std::ofstream(p) << j.dump();
        return p;
    }

    nlohmann::json base(std::vector<std::pair<std::string, std::string>> samples) {
        nlohmann::json s = nlohmann::json::array();
        for (auto& [id, file] : samples) s.push_back({{"id", id}, {"tensor", file + ".npy"}, {"label", file + ".png"}});
        return {{"schema", 1}, {"name", "tiny"}, {"location_tag", "DE/Ulm"}, {"registry", to_json(reg_)}, {"samples", s}};
    }

    TempDir dir_;
    ClassRegistry reg_;
};

TEST_F(ManifestTest, TwoSamplesLoad) {
    const auto m = load_manifest(write_json(base({{"s1", "a"}, {"s2", "b"}})));
    ASSERT_EQ(m.samples.size(), 2u);
    EXPECT_EQ(m.name, "tiny");
    EXPECT_EQ(m.location_tag, "DE/Ulm");
    EXPECT_EQ(m.samples[1].width, 2u);
    EXPECT_EQ(m.samples[1].height, 1u);
    EXPECT_EQ(m.content_hash.size(), 64u);
    const auto s = load_sample(m.samples[0], m.registry);
    EXPECT_EQ(s.mask.at(1), 1);
}

TEST_F(ManifestTest, MissingTensorIsIoErrorWithSampleId) {
    try {
        load_manifest(write_json(base({{"s1", "a"}, {"ghost", "nope"}})));
        FAIL() << "expected IoError";
    } catch (const IoError& e) {
        EXPECT_NE(std::string(e.what()).find("ghost"), std::string::npos);
    }
}

TEST_F(ManifestTest, DuplicateIdIsSchemaError) {
    EXPECT_THROW(load_manifest(write_json(base({{"s1", "a"}, {"s1", "b"}}))), SchemaError);
}

TEST_F(ManifestTest, MissingFileAndBadJson) {
    EXPECT_THROW(load_manifest(dir_ / "absent.json"), IoError);
    std::ofstream(dir_ / "bad.json") << "{\"schema\": 1,";
    EXPECT_THROW(load_manifest(dir_ / "bad.json"), FormatError);
    auto j = base({{"s1", "a"}});
    j["schema"] = 7;
    EXPECT_THROW(load_manifest(write_json(j)), SchemaError);
}

TEST_F(ManifestTest, WriteThenLoadPreservesEntries) {
    auto m = load_manifest(write_json(base({{"s1", "a"}, {"s2", "b"}})));
    write_manifest(dir_ / "copy.json", m);
    const auto back = load_manifest(dir_ / "copy.json");
    ASSERT_EQ(back.samples.size(), 2u);
    EXPECT_EQ(fs::weakly_canonical(back.samples[1].label_path), fs::weakly_canonical(m.samples[1].label_path));
    EXPECT_EQ(back.registry, m.registry);
}

TEST(Manifest, SyntheticDatasetLoadsAndValidates) {
    TempDir dir;
    synth::SynthSpec spec;
    spec.num_classes = 4;
    spec.height = 5;
    spec.width = 6;
    spec.n_images = 3;
    spec.misclassification_rate = 0.1;
    spec.ignore_rate = 0.1;
    const auto gen = synth::generate(spec, dir.path());
    const auto m = load_manifest(gen.manifest_path);
    ASSERT_EQ(m.samples.size(), 3u);
    for (const auto& e : m.samples) {
        const auto s = load_sample(e, m.registry);
        EXPECT_EQ(s.tensor.height(), 5u);
        EXPECT_EQ(s.mask.width(), 6u);
    }
}

}  // namespace
}  // namespace mdsafe
