#include <cmath>
#include <fstream>
#include <random>

#include <gtest/gtest.h>

#include "mdsafe/oracles.hpp"
#include "test_helpers.hpp"

namespace mdsafe {
namespace {

using testing::TempDir;

std::vector<float> flatten(const std::vector<std::vector<float>>& rows) {
    std::vector<float> out;
    for (const auto& r : rows) out.insert(out.end(), r.begin(), r.end());
    return out;
}

TEST(FitConfig, ValidationRules) {
    FitConfig c;
    EXPECT_NO_THROW(c.validate());
    c.max_pixels_per_class_per_image = c.max_pixels_per_class + 1;
    EXPECT_THROW(c.validate(), ConfigError);
    c = FitConfig{};
    c.ridge_scale = 0.0;
    EXPECT_THROW(c.validate(), ConfigError);
    EXPECT_EQ(FitConfig{}.min_samples(19), 20u);
}

TEST(FitConfig, JsonRoundTrip) {
    FitConfig c;
    c.ridge_scale = 3.7e-5;
    c.rng_seed = 99;
    c.min_samples_per_class = 4;
    const auto back = fit_config_from_json(to_json(c));
    EXPECT_EQ(back.ridge_scale, c.ridge_scale);
    EXPECT_EQ(back.rng_seed, 99u);
    EXPECT_EQ(back.min_samples_per_class, 4u);
}

TEST(SelectTruePositives, PerImageCapBinds) {
    const auto reg = ClassRegistry::with_classes(2);
    std::vector<std::vector<float>> rows(12, {0.8f, 0.2f});
    const auto t = testing::tensor_from_rows(3, 4, rows);
    const LabelMask m(3, 4, std::vector<ClassId>(12, 0), reg);
    FitConfig cfg;
    cfg.max_pixels_per_class = 10;
    cfg.max_pixels_per_class_per_image = 5;
    PixelPool pool(2, cfg);
    select_true_positive_pixels(t, m, cfg, pool);
    EXPECT_EQ(pool[0].size(), 5u);
    EXPECT_EQ(pool[1].size(), 0u);
}

TEST(SelectTruePositives, NoCorrectPixelsLeavesPoolUnchanged) {
    const auto reg = ClassRegistry::with_classes(2);
    std::vector<std::vector<float>> rows(4, {0.8f, 0.2f});
    const auto t = testing::tensor_from_rows(2, 2, rows);
    const LabelMask m(2, 2, std::vector<ClassId>(4, 1), reg);
    FitConfig cfg;
    PixelPool pool(2, cfg);
    select_true_positive_pixels(t, m, cfg, pool);
    EXPECT_EQ(pool[0].size(), 0u);
    EXPECT_EQ(pool[1].size(), 0u);
}

TEST(SelectTruePositives, MatchesBruteForceScan) {
    std::mt19937_64 rng(21);
    const auto reg = ClassRegistry::with_classes(3);
    const auto t = testing::random_tensor(9, 11, 3, rng);
    const auto m = testing::random_mask(9, 11, reg, 0.1, rng);
    FitConfig cfg;
    PixelPool pool(3, cfg);
    select_true_positive_pixels(t, m, cfg, pool);
    for (int c = 0; c < 3; ++c) {
        std::vector<float> expected;
        for (std::size_t p = 0; p < t.num_pixels(); ++p) {
            const auto o = t.pixel(p);
            int best = 0;
            for (int i = 1; i < 3; ++i) {
                if (o[i] > o[best]) best = i;
            }
            if (best == c && m.at(p) == c) expected.insert(expected.end(), o.begin(), o.end());
        }
        const auto got = pool[c].data();
        EXPECT_TRUE(std::equal(got.begin(), got.end(), expected.begin(), expected.end())) << "class " << c;
    }
}

TEST(SelectTruePositives, GlobalCapIsReservoir) {
    const auto reg = ClassRegistry::with_classes(2);
    FitConfig cfg;
    cfg.max_pixels_per_class = 7;
    cfg.max_pixels_per_class_per_image = 5;
    PixelPool pool(2, cfg);
    for (int img = 0; img < 4; ++img) {
        std::vector<std::vector<float>> rows(6, {0.9f, 0.1f});
        const LabelMask m(2, 3, std::vector<ClassId>(6, 0), reg);
        select_true_positive_pixels(testing::tensor_from_rows(2, 3, rows), m, cfg, pool, img);
    }
    EXPECT_EQ(pool[0].size(), 7u);
    EXPECT_EQ(pool[0].seen(), 20u);
}

TEST(FitGaussian, MatchesDirectComputation) {
    std::mt19937_64 rng(4);
    const std::size_t k = 4, n = 500;
    const auto t = testing::random_tensor(1, n, k, rng);
    const auto pool = t.data();
    FitConfig cfg;
    const auto g = fit_gaussian(pool, k, cfg, 2);
    std::vector<double> mean(k, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < k; ++j) mean[j] += pool[i * k + j] / double(n);
    }
    for (std::size_t a = 0; a < k; ++a) {
        EXPECT_NEAR(g.mean[a], mean[a], 1e-12);
        for (std::size_t b = 0; b < k; ++b) {
            double s = 0.0;
            for (std::size_t i = 0; i < n; ++i) s += (pool[i * k + a] - mean[a]) * (pool[i * k + b] - mean[b]);
            EXPECT_NEAR(g.covariance(a, b), s / double(n), 1e-12);
        }
    }
    EXPECT_NEAR(g.lambda, cfg.ridge_scale * g.covariance.trace() / k, 1e-20);
    EXPECT_LE(g.precision_residual(), 1e-6);
    EXPECT_TRUE(g.valid);
    EXPECT_EQ(g.sample_count, n);
    EXPECT_EQ(g.class_id, 2);
    EXPECT_TRUE(g.precision.isApprox(g.precision.transpose(), 1e-9));
}

TEST(FitGaussian, IdenticalVectorsUseRidgeScaleAsLambda) {
    const std::vector<float> pool = flatten(std::vector<std::vector<float>>(10, {0.7f, 0.2f, 0.1f}));
    FitConfig cfg;
    const auto g = fit_gaussian(pool, 3, cfg);
    EXPECT_EQ(g.covariance.trace(), 0.0);
    EXPECT_EQ(g.lambda, cfg.ridge_scale);
    EXPECT_LE(g.precision_residual(), 1e-6);
}

TEST(FitGaussian, SmallPoolsAreInvalidNotErrors) {
    FitConfig cfg;
    const std::vector<float> two = flatten({{0.7f, 0.2f, 0.1f}, {0.6f, 0.3f, 0.1f}});
    auto g = fit_gaussian(two, 3, cfg);
    EXPECT_FALSE(g.valid);
    EXPECT_EQ(g.sample_count, 2u);
    g = fit_gaussian({}, 3, cfg);
    EXPECT_FALSE(g.valid);
    cfg.min_samples_per_class = 2;
    EXPECT_TRUE(fit_gaussian(two, 3, cfg).valid);
}

TEST(FitGaussian, ResidualHoldsOnSimplexData) {
    // Softmax vectors are rank deficient; the ridge keeps the inverse accurate.
    std::mt19937_64 rng(8);
    for (std::size_t k : {2u, 5u, 19u}) {
        const auto t = testing::random_tensor(20, 50, k, rng);
        const auto g = fit_gaussian(t.data(), k, FitConfig{});
        EXPECT_LE(g.precision_residual(), 1e-6) << "K=" << k;
    }
}

TEST(FitGaussian, NonPositiveDefiniteIsNumericalError) {
    Eigen::MatrixXd cov = Eigen::MatrixXd::Identity(2, 2);
    cov(1, 1) = -1.0;
    EXPECT_THROW(regularized_precision(cov, 1e-9), NumericalError);
}

class BankTest : public ::testing::Test {
protected:
    static synth::SynthSpec spec(std::size_t k, std::size_t n, std::uint64_t seed) {
        synth::SynthSpec s;
        s.num_classes = k;
        s.height = 16;
        s.width = 16;
        s.n_images = n;
        s.rng_seed = seed;
        s.misclassification_rate = 0.05;
        s.ignore_rate = 0.05;
        return s;
    }
    TempDir dir_;
};

TEST_F(BankTest, OneImageManifestEqualsDirectFit) {
    const auto gen = synth::generate(spec(4, 1, 1), dir_.path());
    const auto manifest = load_manifest(gen.manifest_path);
    FitConfig cfg;
    cfg.max_pixels_per_class_per_image = 20;
    const auto bank = fit_bank(manifest, cfg);
    ASSERT_EQ(bank.gaussians.size(), 4u);

    const auto s = load_sample(manifest.samples[0], manifest.registry);
    PixelPool pool(4, cfg);
    select_true_positive_pixels(s.tensor, s.mask, cfg, pool, 0);
    for (std::size_t c = 0; c < 4; ++c) {
        const auto g = fit_gaussian(pool[c].data(), 4, cfg, static_cast<ClassId>(c));
        EXPECT_EQ(bank[c].mean, g.mean);
        EXPECT_EQ(bank[c].precision, g.precision);
        EXPECT_EQ(bank[c].sample_count, 20u);
    }
    EXPECT_EQ(bank.provenance.manifest_name, manifest.name);
    EXPECT_EQ(bank.provenance.manifest_hash, manifest.content_hash);
}

TEST_F(BankTest, ThreadCountDoesNotChangeResult) {
    const auto gen = synth::generate(spec(5, 13, 2), dir_.path());
    const auto manifest = load_manifest(gen.manifest_path);
    FitConfig cfg;
    cfg.max_pixels_per_class = 100;
    cfg.max_pixels_per_class_per_image = 30;
    const auto serial = serialize_bank(fit_bank(manifest, cfg));
    for (unsigned threads : {2u, 3u, 8u}) {
        cfg.threads = threads;
        EXPECT_EQ(serialize_bank(fit_bank(manifest, cfg)), serial) << threads << " threads";
    }
}

TEST_F(BankTest, EmptyManifestRejected) {
    DatasetManifest m{"empty", "x", ClassRegistry::with_classes(3), {}, {}};
    EXPECT_THROW(fit_bank(m, FitConfig{}), EmptyDatasetError);
}

TEST_F(BankTest, SaveLoadRoundTripIsExact) {
    const auto gen = synth::generate(spec(4, 3, 3), dir_.path());
    const auto bank = fit_bank(load_manifest(gen.manifest_path), FitConfig{});
    save_bank(bank, dir_ / "bank.json");
    const auto back = load_bank(dir_ / "bank.json");
    EXPECT_EQ(back.registry, bank.registry);
    for (std::size_t c = 0; c < 4; ++c) {
        EXPECT_EQ(back[c].mean, bank[c].mean);
        EXPECT_EQ(back[c].covariance, bank[c].covariance);
        EXPECT_EQ(back[c].precision, bank[c].precision);
        EXPECT_EQ(back[c].lambda, bank[c].lambda);
        EXPECT_EQ(back[c].valid, bank[c].valid);
        EXPECT_LE(back[c].precision_residual(), 1e-6);
    }
    EXPECT_EQ(serialize_bank(back), serialize_bank(bank));
}

TEST_F(BankTest, TamperedOrTruncatedBankIsIntegrityError) {
    const auto gen = synth::generate(spec(3, 2, 4), dir_.path());
    const auto text = serialize_bank(fit_bank(load_manifest(gen.manifest_path), FitConfig{}));
    EXPECT_THROW(deserialize_bank(text.substr(0, text.size() / 2)), IntegrityError);

    auto j = nlohmann::json::parse(text);
    j["classes"][1]["sample_count"] = 12345;
    EXPECT_THROW(deserialize_bank(j.dump()), IntegrityError);

    j = nlohmann::json::parse(text);
    j.erase("sha256");
    EXPECT_THROW(deserialize_bank(j.dump()), IntegrityError);

    std::mt19937_64 rng(1);
    std::uniform_int_distribution<std::size_t> pos(0, text.size() - 1);
    for (int trial = 0; trial < 200; ++trial) {
        auto bad = text;
        const auto i = pos(rng);
        bad[i] = bad[i] == 'A' ? 'B' : 'A';
        if (bad == text) continue;
        EXPECT_THROW(deserialize_bank(bad), Error);
    }
    EXPECT_THROW(load_bank(dir_ / "missing.json"), IoError);
}

TEST(Correlation, IdenticalAndAntiCorrelatedMeans) {
    GaussianBank bank;
    bank.registry = ClassRegistry::with_classes(3);
    const Eigen::VectorXd m0 = (Eigen::VectorXd(3) << 0.7, 0.2, 0.1).finished();
    const Eigen::VectorXd m2 = (-2.0 * m0.array() + 1.0).matrix();
    for (const auto& m : {m0, m0, m2}) {
        ClassGaussian g;
        g.mean = m;
        g.valid = true;
        bank.gaussians.push_back(g);
    }
    const auto corr = class_correlation(bank);
    EXPECT_DOUBLE_EQ(corr.at(0, 1), 1.0);
    EXPECT_DOUBLE_EQ(corr.at(0, 2), -1.0);
    EXPECT_DOUBLE_EQ(corr.at(1, 1), 1.0);
    EXPECT_TRUE(corr.diagonal_masked);
    EXPECT_EQ(corr.basis, "mean_vectors");
}

TEST(Correlation, AgreesWithPearsonOracleAndFlagsInvalid) {
    std::mt19937_64 rng(6);
    std::uniform_real_distribution<double> u(0.01, 1.0);
    GaussianBank bank;
    bank.registry = ClassRegistry::with_classes(5);
    for (int c = 0; c < 5; ++c) {
        ClassGaussian g;
        g.mean = Eigen::VectorXd(5);
        for (int i = 0; i < 5; ++i) g.mean[i] = u(rng);
        g.valid = c != 3;
        bank.gaussians.push_back(g);
    }
    const auto corr = class_correlation(bank);
    for (int i = 0; i < 5; ++i) {
        for (int j = 0; j < 5; ++j) {
            if (i == 3 || j == 3) {
                EXPECT_TRUE(corr.undefined[i * 5 + j]);
                EXPECT_TRUE(std::isnan(corr.at(i, j)));
                continue;
            }
            const std::vector<double> a(bank[i].mean.data(), bank[i].mean.data() + 5);
            const std::vector<double> b(bank[j].mean.data(), bank[j].mean.data() + 5);
            EXPECT_NEAR(corr.at(i, j), oracle::pearson(a, b), 1e-12);
            EXPECT_EQ(corr.at(i, j), corr.at(j, i));
        }
    }
    const auto csv = correlation_csv(corr, bank.registry);
    EXPECT_NE(csv.find("nan"), std::string::npos);
}

TEST(Correlation, FewerThanTwoValidClassesRejected) {
    GaussianBank bank;
    bank.registry = ClassRegistry::with_classes(2);
    for (bool valid : {true, false}) {
        ClassGaussian g;
        g.mean = Eigen::VectorXd::Constant(2, 0.5);
        g.valid = valid;
        bank.gaussians.push_back(g);
    }
    EXPECT_THROW(class_correlation(bank), SchemaError);
}

}  // namespace
}  // namespace mdsafe
