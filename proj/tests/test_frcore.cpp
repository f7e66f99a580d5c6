#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>

#include "p3mask/binio.hpp"
#include "p3mask/frcore.hpp"
#include "p3mask/synthdata.hpp"

using p3mask::Architecture;
using p3mask::EmbeddingModel;
using p3mask::Gallery;
using p3mask::Image;
using p3mask::LabeledImage;
using p3mask::PoolModelSpec;
using p3mask::PoolTrainConfig;
using p3mask::Rng;
using p3mask::Tensor;

namespace {

namespace fs = std::filesystem;

fs::path fresh_dir(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / "p3mask_frcore_test" / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

const char* kTinyArch = "in:16x3;conv:3x4x2;relu;gap;dense:8";

EmbeddingModel seeded_model(const std::string& arch, std::uint64_t seed) {
    EmbeddingModel m;
    m.id = "seeded-" + std::to_string(seed);
    m.arch = Architecture::parse(arch);
    Rng rng(seed);
    m.params = m.arch.init_params(rng);
    m.train_seed = seed;
    m.train_accuracy = 93.75;
    return m;
}

Image noisy_image(int size, std::uint64_t seed) {
    Image img(size, size, 3);
    Rng rng(seed);
    for (double& v : img.data()) v = rng.uniform();
    return img;
}

Tensor unit2(double x, double y) {
    const double n = std::sqrt(x * x + y * y);
    return Tensor({2}, {x / n, y / n});
}

struct SmallDataset {
    p3mask::DatasetManifest manifest;
    std::vector<LabeledImage> images;
};

SmallDataset make_dataset(const std::string& dirname, std::uint64_t seed) {
    p3mask::GenConfig cfg;
    cfg.identities = 4;
    cfg.images_per_identity = 8;
    cfg.image_size = 16;
    cfg.channels = 3;
    cfg.seed = seed;
    cfg.out_dir = fresh_dir(dirname).string();
    SmallDataset d;
    d.manifest = p3mask::gen_dataset(cfg);
    d.images = p3mask::load_dataset_images(d.manifest);
    return d;
}

std::vector<const LabeledImage*> by_role(const std::vector<LabeledImage>& images,
                                         const std::string& role) {
    std::vector<const LabeledImage*> out;
    for (const LabeledImage& img : images) {
        if (img.role == role) out.push_back(&img);
    }
    return out;
}

} // namespace

TEST_CASE("architecture descriptor parses, walks shapes and round-trips") {
    const std::string desc = "in:32x3;conv:3x8x2;relu;conv:3x16x2;relu;gap;dense:32";
    const Architecture arch = Architecture::parse(desc);
    CHECK(arch.input_size == 32);
    CHECK(arch.input_channels == 3);
    CHECK(arch.layers.size() == 6);
    CHECK(arch.descriptor() == desc);
    CHECK(arch.embedding_dim() == 32);

    const std::vector<std::vector<int>> shapes = arch.param_shapes();
    REQUIRE(shapes.size() == 6);
    CHECK(shapes[0] == std::vector<int>{8, 3, 3, 3});
    CHECK(shapes[1] == std::vector<int>{8});
    CHECK(shapes[2] == std::vector<int>{16, 8, 3, 3});
    CHECK(shapes[3] == std::vector<int>{16});
    CHECK(shapes[4] == std::vector<int>{16, 32});
    CHECK(shapes[5] == std::vector<int>{32});

    CHECK_THROWS_AS(Architecture::parse("conv:3x8x2;gap;dense:4"), std::invalid_argument);
    CHECK_THROWS_AS(Architecture::parse("in:16x3;pool;gap;dense:4"), std::invalid_argument);
    CHECK_THROWS_AS(Architecture::parse("in:16x3;gap;conv:3x4x1;dense:4"), std::invalid_argument);
    CHECK_THROWS_AS(Architecture::parse("in:16x3;dense:4"), std::invalid_argument);
    CHECK_THROWS_AS(Architecture::parse("in:16x3;conv:3x4x1;gap"), std::invalid_argument);
    CHECK_THROWS_AS(Architecture::parse("in:8x3;conv:9x4x1;gap;dense:4"), std::invalid_argument);
    CHECK_THROWS_AS(Architecture::parse("in:16x2;conv:3x4x1;gap;dense:4"), std::invalid_argument);
    CHECK_THROWS_AS(Architecture::parse("in:16x3;conv:3x4x;gap;dense:4"), std::invalid_argument);
    CHECK_THROWS_AS(Architecture::parse("in:16x3;conv:0x4x1;gap;dense:4"), std::invalid_argument);
}

TEST_CASE("embedding is unit-norm, deterministic, and validates its input") {
    const EmbeddingModel model = seeded_model(kTinyArch, 5);
    const Image img = noisy_image(16, 900);

    const Tensor e = model.embed(img);
    REQUIRE(e.shape() == std::vector<int>{8});
    double nrm = 0.0;
    for (double v : e.data()) nrm += v * v;
    CHECK(std::fabs(std::sqrt(nrm) - 1.0) <= 1e-9);

    CHECK(model.embed(img) == e);                 // bit-identical re-embed
    CHECK(model.embed(noisy_image(24, 900)).shape() == e.shape());  // resized internally

    const Image gray(16, 16, 1, 0.5);
    CHECK_THROWS_AS(model.embed(gray), std::invalid_argument);

    EmbeddingModel zero = model;
    for (Tensor& t : zero.params) t.fill(0.0);
    CHECK_THROWS_AS(zero.embed(img), std::runtime_error);   // zero activations
}

TEST_CASE("angular distance matches closed forms and rejects bad input") {
    const Tensor e0({2}, {1.0, 0.0});
    const Tensor e1({2}, {0.0, 1.0});
    const Tensor neg({2}, {-1.0, 0.0});

    // The inner product is clamped away from +-1 (the same guard the graph op
    // uses), so the self-distance is acos(1 - 1e-7), not exactly zero.
    CHECK(p3mask::arccos_dist(e0, e0) == std::acos(1.0 - 1e-7));
    CHECK(p3mask::arccos_dist(e0, e0) <= 5e-4);
    CHECK(p3mask::arccos_dist(e0, e1) == std::acos(0.0));
    CHECK(p3mask::arccos_dist(e0, neg) == std::acos(-(1.0 - 1e-7)));

    const Tensor diag = unit2(1.0, 1.0);
    CHECK(p3mask::arccos_dist(e0, diag) == doctest::Approx(std::acos(std::sqrt(0.5))).epsilon(1e-12));

    CHECK_THROWS_AS(p3mask::arccos_dist(Tensor({2}, {1.0, 1.0}), e0), std::invalid_argument);
    CHECK_THROWS_AS(p3mask::arccos_dist(Tensor({3}, {1.0, 0.0, 0.0}), e0), std::invalid_argument);
    CHECK_THROWS_AS(p3mask::arccos_dist(Tensor({2, 1}, {1.0, 0.0}), Tensor({2, 1}, {1.0, 0.0})),
                    std::invalid_argument);
}

TEST_CASE("angular and Euclidean distance order unit vectors identically") {
    Rng rng(31);
    std::vector<Tensor> points;
    for (int i = 0; i < 12; ++i) {
        Tensor t({6});
        double nrm = 0.0;
        for (double& v : t.data()) {
            v = rng.normal();
            nrm += v * v;
        }
        for (double& v : t.data()) v /= std::sqrt(nrm);
        points.push_back(std::move(t));
    }
    auto euclid = [](const Tensor& a, const Tensor& b) {
        double acc = 0.0;
        for (std::size_t i = 0; i < a.size(); ++i) {
            const double d = a.data()[i] - b.data()[i];
            acc += d * d;
        }
        return std::sqrt(acc);
    };
    for (std::size_t i = 0; i + 1 < points.size(); i += 2) {
        const double a1 = p3mask::arccos_dist(points[i], points[0]);
        const double a2 = p3mask::arccos_dist(points[i + 1], points[0]);
        const double u1 = euclid(points[i], points[0]);
        const double u2 = euclid(points[i + 1], points[0]);
        // Same strict ordering whenever the angular gap is not within clamp
        // resolution.
        if (std::fabs(a1 - a2) > 1e-6) {
            CHECK((a1 < a2) == (u1 < u2));
        }
    }
}

TEST_CASE("identification picks the nearest entry and breaks ties low") {
    Gallery gal;
    gal.entries.push_back({"id00", "gallery-seen", Tensor({2}, {1.0, 0.0})});
    gal.entries.push_back({"id01", "gallery-seen", Tensor({2}, {0.0, 1.0})});
    gal.entries.push_back({"id02", "gallery-seen", unit2(1.0, 1.0)});

    CHECK(p3mask::fr_identify_index(Tensor({2}, {1.0, 0.0}), gal) == 0);
    CHECK(p3mask::fr_identify_index(unit2(1.0, 0.9), gal) == 2);
    CHECK(p3mask::fr_identify_index(unit2(0.1, 1.0), gal) == 1);

    Gallery tied;
    tied.entries.push_back({"id00", "gallery-seen", Tensor({2}, {0.0, 1.0})});
    tied.entries.push_back({"id01", "gallery-seen", Tensor({2}, {0.0, 1.0})});
    CHECK(p3mask::fr_identify_index(Tensor({2}, {0.0, 1.0}), tied) == 0);

    CHECK_THROWS_AS(p3mask::fr_identify_index(Tensor({2}, {0.0, 1.0}), Gallery{}),
                    std::invalid_argument);
}

TEST_CASE("checkpoint round-trips bit-identically and re-saves the same bytes") {
    const fs::path dir = fresh_dir("ckpt");
    const EmbeddingModel model = seeded_model(kTinyArch, 17);
    const std::string path = (dir / "model.p3fm").string();
    p3mask::model_save(model, path);

    const EmbeddingModel loaded = p3mask::model_load(path);
    CHECK(loaded.id == model.id);
    CHECK(loaded.arch.descriptor() == model.arch.descriptor());
    CHECK(loaded.train_seed == model.train_seed);
    CHECK(loaded.train_accuracy == model.train_accuracy);
    REQUIRE(loaded.params.size() == model.params.size());
    for (std::size_t i = 0; i < model.params.size(); ++i) {
        CHECK(loaded.params[i] == model.params[i]);
    }

    const std::string path2 = (dir / "model2.p3fm").string();
    p3mask::model_save(loaded, path2);
    CHECK(p3mask::read_file_bytes(path) == p3mask::read_file_bytes(path2));

    const Image img = noisy_image(16, 3);
    CHECK(loaded.embed(img) == model.embed(img));
}

TEST_CASE("checkpoint loading rejects corruption") {
    const fs::path dir = fresh_dir("ckpt_bad");
    const EmbeddingModel model = seeded_model(kTinyArch, 29);
    const std::string good = (dir / "good.p3fm").string();
    p3mask::model_save(model, good);
    const std::vector<std::uint8_t> bytes = p3mask::read_file_bytes(good);

    SUBCASE("flipped payload byte fails the checksum") {
        std::vector<std::uint8_t> bad = bytes;
        bad[bad.size() / 2] ^= 0x40;
        const std::string path = (dir / "flip.p3fm").string();
        p3mask::write_file_bytes(path, bad);
        CHECK_THROWS_WITH_AS(p3mask::model_load(path), doctest::Contains("CRC"),
                             std::runtime_error);
    }
    SUBCASE("truncated file is rejected") {
        std::vector<std::uint8_t> bad(bytes.begin(), bytes.end() - 9);
        const std::string path = (dir / "trunc.p3fm").string();
        p3mask::write_file_bytes(path, bad);
        CHECK_THROWS_AS(p3mask::model_load(path), std::runtime_error);
    }
    SUBCASE("wrong magic is rejected") {
        std::vector<std::uint8_t> bad = bytes;
        bad[0] = 'X';
        bad.resize(bad.size() - 4);
        const std::uint32_t crc = p3mask::crc32(bad);
        for (int i = 0; i < 4; ++i) bad.push_back(static_cast<std::uint8_t>(crc >> (8 * i)));
        const std::string path = (dir / "magic.p3fm").string();
        p3mask::write_file_bytes(path, bad);
        CHECK_THROWS_WITH_AS(p3mask::model_load(path), doctest::Contains("magic"),
                             std::runtime_error);
    }
    SUBCASE("unsupported version is rejected") {
        std::vector<std::uint8_t> bad = bytes;
        bad[4] = 2;   // version low byte
        bad.resize(bad.size() - 4);
        const std::uint32_t crc = p3mask::crc32(bad);
        for (int i = 0; i < 4; ++i) bad.push_back(static_cast<std::uint8_t>(crc >> (8 * i)));
        const std::string path = (dir / "ver.p3fm").string();
        p3mask::write_file_bytes(path, bad);
        CHECK_THROWS_WITH_AS(p3mask::model_load(path), doctest::Contains("version"),
                             std::runtime_error);
    }
    SUBCASE("missing file is rejected") {
        CHECK_THROWS_AS(p3mask::model_load((dir / "nope.p3fm").string()), std::runtime_error);
    }
}

TEST_CASE("pool training is deterministic for a fixed seed") {
    const SmallDataset data = make_dataset("train_det", 400);
    const std::vector<PoolModelSpec> specs = p3mask::default_pool_specs(16, 3);
    PoolTrainConfig cfg;
    cfg.epochs = 4;
    cfg.seed = 2024;

    const EmbeddingModel m1 = p3mask::train_pool_model(data.manifest, data.images, specs[1], cfg);
    const EmbeddingModel m2 = p3mask::train_pool_model(data.manifest, data.images, specs[1], cfg);
    CHECK(m1.train_seed == m2.train_seed);
    CHECK(m1.train_accuracy == m2.train_accuracy);
    REQUIRE(m1.params.size() == m2.params.size());
    for (std::size_t i = 0; i < m1.params.size(); ++i) {
        CHECK(m1.params[i] == m2.params[i]);
    }
}

TEST_CASE("sibling pool models disagree") {
    const SmallDataset data = make_dataset("train_sib", 410);
    const std::vector<PoolModelSpec> specs = p3mask::default_pool_specs(16, 3);
    PoolTrainConfig cfg;
    cfg.epochs = 3;
    cfg.seed = 7;

    const EmbeddingModel a = p3mask::train_pool_model(data.manifest, data.images, specs[0], cfg);
    const EmbeddingModel b = p3mask::train_pool_model(data.manifest, data.images, specs[2], cfg);
    CHECK(a.train_seed != b.train_seed);
    bool params_differ = false;
    for (std::size_t i = 0; i < a.params.size() && !params_differ; ++i) {
        params_differ = !(a.params[i] == b.params[i]);
    }
    CHECK(params_differ);

    const Image img = data.images.front().image;
    CHECK(p3mask::arccos_dist(a.embed(img), a.embed(img)) <= 5e-4);
    bool embeddings_differ = false;
    for (const LabeledImage& li : data.images) {
        if (p3mask::arccos_dist(a.embed(li.image), b.embed(li.image)) > 1e-3) {
            embeddings_differ = true;
            break;
        }
    }
    CHECK(embeddings_differ);
}

TEST_CASE("trained models identify well on a small dataset") {
    const SmallDataset data = make_dataset("train_acc", 420);
    const std::vector<PoolModelSpec> specs = p3mask::default_pool_specs(16, 3);
    PoolTrainConfig cfg;
    cfg.seed = 99;

    for (std::size_t si : {std::size_t{0}, std::size_t{3}}) {   // one per architecture
        const EmbeddingModel model =
            p3mask::train_pool_model(data.manifest, data.images, specs[si], cfg);
        CHECK(model.train_accuracy >= 90.0);

        const Gallery gallery =
            p3mask::build_gallery(model, by_role(data.images, p3mask::kRoleGallerySeen));
        const double probe_acc =
            p3mask::fr_accuracy(model, by_role(data.images, p3mask::kRoleProbe), gallery);
        CHECK(probe_acc >= 75.0);

        INFO("model ", model.id, " train ", model.train_accuracy, " probe ", probe_acc);
    }
}

TEST_CASE("pool training validates its inputs") {
    const SmallDataset data = make_dataset("train_bad", 430);
    const std::vector<PoolModelSpec> specs = p3mask::default_pool_specs(16, 3);

    PoolTrainConfig cfg;
    cfg.epochs = -1;
    CHECK_THROWS_AS(p3mask::train_pool_model(data.manifest, data.images, specs[0], cfg),
                    std::invalid_argument);
    cfg = PoolTrainConfig{};
    cfg.batch_size = 0;
    CHECK_THROWS_AS(p3mask::train_pool_model(data.manifest, data.images, specs[0], cfg),
                    std::invalid_argument);

    PoolModelSpec bad = specs[0];
    bad.subset_fraction = 0.0;
    CHECK_THROWS_AS(p3mask::train_pool_model(data.manifest, data.images, bad, PoolTrainConfig{}),
                    std::invalid_argument);
    bad.subset_fraction = 0.5;   // boundary: subsets this small starve training
    CHECK_THROWS_AS(p3mask::train_pool_model(data.manifest, data.images, bad, PoolTrainConfig{}),
                    std::invalid_argument);
    bad.subset_fraction = 1.5;
    CHECK_THROWS_AS(p3mask::train_pool_model(data.manifest, data.images, bad, PoolTrainConfig{}),
                    std::invalid_argument);
}
