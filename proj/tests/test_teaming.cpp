#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>
#include <set>

#include "oracles.hpp"
#include "p3mask/frcore.hpp"
#include "p3mask/rng.hpp"
#include "p3mask/synthdata.hpp"
#include "p3mask/teaming.hpp"

using p3mask::Architecture;
using p3mask::DiversityReport;
using p3mask::EmbeddingModel;
using p3mask::FailureProfile;
using p3mask::Gallery;
using p3mask::LabeledImage;
using p3mask::LambdaFocal;
using p3mask::Rng;
using p3mask::Tensor;

namespace {

namespace fs = std::filesystem;

fs::path fresh_dir(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / "p3mask_teaming_test" / name;
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
    return m;
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

FailureProfile profile_of(const std::string& id, std::vector<int> failed, int validation_size) {
    FailureProfile p;
    p.model_id = id;
    p.failed = std::move(failed);
    p.validation_size = validation_size;
    return p;
}

std::vector<const FailureProfile*> refs(const std::vector<FailureProfile>& pool) {
    std::vector<const FailureProfile*> out;
    for (const FailureProfile& p : pool) out.push_back(&p);
    return out;
}

oracle::ProfileRef as_oracle(const FailureProfile& p) {
    oracle::ProfileRef r;
    r.model_id = p.model_id;
    r.failed.insert(p.failed.begin(), p.failed.end());
    return r;
}

/// Random profile pool for the oracle sweeps: each model fails an independent
/// random subset of the validation set. One model never fails, to keep the
/// warning path inside the sweep.
std::vector<FailureProfile> random_pool(std::uint64_t seed, int models, int validation_size) {
    Rng rng(seed);
    std::vector<FailureProfile> pool;
    for (int m = 0; m < models; ++m) {
        FailureProfile p;
        p.model_id = "model-" + std::to_string(m);
        p.validation_size = validation_size;
        if (m != 3) {
            for (int i = 0; i < validation_size; ++i) {
                if (rng.uniform() < 0.4) p.failed.push_back(i);
            }
        }
        pool.push_back(std::move(p));
    }
    return pool;
}

} // namespace

TEST_CASE("validation and profiling galleries partition the dataset by role") {
    const SmallDataset d = make_dataset("roles", 61);

    const std::vector<const LabeledImage*> val = p3mask::validation_images(d.images);
    REQUIRE_FALSE(val.empty());
    // 8 images per identity split 1 probe / 5 seen / 2 unseen
    CHECK(val.size() == 4 * 3);
    for (const LabeledImage* li : val) {
        CHECK(li->role != p3mask::kRoleGallerySeen);
    }

    const std::vector<const LabeledImage*> gal = p3mask::profiling_gallery_images(d.images);
    REQUIRE(gal.size() == 4);
    std::set<std::string> ids;
    for (const LabeledImage* li : gal) {
        CHECK(li->role == p3mask::kRoleGallerySeen);
        ids.insert(li->identity);
    }
    CHECK(ids.size() == 4);

    // manifest order: the chosen exemplar is the first seen image of each id
    for (const LabeledImage* li : gal) {
        for (const LabeledImage& other : d.images) {
            if (other.identity == li->identity && other.role == p3mask::kRoleGallerySeen) {
                CHECK(&other == li);
                break;
            }
        }
    }
}

TEST_CASE("negative samples are the misidentified validation images") {
    const SmallDataset d = make_dataset("negatives", 62);
    const EmbeddingModel model = seeded_model(kTinyArch, 5);

    const std::vector<const LabeledImage*> val = p3mask::validation_images(d.images);
    const std::vector<const LabeledImage*> gal_imgs = p3mask::profiling_gallery_images(d.images);
    const Gallery gallery = p3mask::build_gallery(model, gal_imgs);

    const FailureProfile profile = p3mask::negative_samples(model, val, gallery);
    CHECK(profile.model_id == model.id);
    CHECK(profile.validation_size == static_cast<int>(val.size()));
    for (std::size_t i = 1; i < profile.failed.size(); ++i) {
        CHECK(profile.failed[i] > profile.failed[i - 1]);
    }
    for (int idx : profile.failed) {
        REQUIRE(idx >= 0);
        REQUIRE(idx < static_cast<int>(val.size()));
        const LabeledImage* li = val[static_cast<std::size_t>(idx)];
        CHECK(p3mask::fr_identify(model, li->image, gallery) != li->identity);
    }
    // and the complement really is identified correctly
    std::set<int> failed(profile.failed.begin(), profile.failed.end());
    for (std::size_t i = 0; i < val.size(); ++i) {
        if (failed.count(static_cast<int>(i))) continue;
        CHECK(p3mask::fr_identify(model, val[i]->image, gallery) == val[i]->identity);
    }

    const FailureProfile again = p3mask::negative_samples(model, val, gallery);
    CHECK(again.failed == profile.failed);

    CHECK_THROWS_AS((void)p3mask::negative_samples(model, {}, gallery), std::invalid_argument);
}

TEST_CASE("a model probed on its own enrolled exemplars never fails") {
    const SmallDataset d = make_dataset("perfect", 63);
    const EmbeddingModel model = seeded_model(kTinyArch, 6);

    // Perfect by construction: validate on the very images that are enrolled.
    // Each probe's nearest entry is its own exemplar at the self-distance
    // floor, so identification cannot miss.
    const std::vector<const LabeledImage*> gal_imgs = p3mask::profiling_gallery_images(d.images);
    const Gallery gallery = p3mask::build_gallery(model, gal_imgs);

    const FailureProfile profile = p3mask::negative_samples(model, gal_imgs, gallery);
    CHECK(profile.failed.empty());
}

TEST_CASE("a constant-embedding model fails every identity except one") {
    const SmallDataset d = make_dataset("constant", 64);

    // Zero dense weights plus a fixed bias: the embedding ignores the input.
    EmbeddingModel stub;
    stub.id = "constant";
    stub.arch = Architecture::parse("in:16x3;gap;dense:3");
    stub.params = {Tensor({3, 3}), Tensor({3}, {1.0, 0.0, 0.0})};

    const std::vector<const LabeledImage*> val = p3mask::validation_images(d.images);
    const std::vector<const LabeledImage*> gal_imgs = p3mask::profiling_gallery_images(d.images);
    const Gallery gallery = p3mask::build_gallery(stub, gal_imgs);

    // All gallery distances tie, so every probe resolves to the first entry.
    const std::string winner = gallery.entries.front().identity;
    const FailureProfile profile = p3mask::negative_samples(stub, val, gallery);

    std::size_t expected = 0;
    for (const LabeledImage* li : val) {
        if (li->identity != winner) ++expected;
    }
    CHECK(profile.failed.size() == expected);
    for (int idx : profile.failed) {
        CHECK(val[static_cast<std::size_t>(idx)]->identity != winner);
    }
}

TEST_CASE("pairwise failure correlation counts shared negatives") {
    const int vs = 10;
    SUBCASE("disjoint failures do not correlate") {
        const std::vector<FailureProfile> pool = {profile_of("a", {0, 1, 2}, vs),
                                                  profile_of("b", {3, 4}, vs)};
        CHECK(p3mask::lambda_focal(refs(pool), 0).value == 0.0);
        CHECK(p3mask::lambda_focal(refs(pool), 1).value == 0.0);
    }
    SUBCASE("identical failures correlate fully") {
        const std::vector<FailureProfile> pool = {profile_of("a", {1, 4, 7}, vs),
                                                  profile_of("b", {1, 4, 7}, vs)};
        CHECK(p3mask::lambda_focal(refs(pool), 0).value == 1.0);
        CHECK(p3mask::lambda_focal(refs(pool), 1).value == 1.0);
    }
    SUBCASE("one shared negative out of four") {
        const std::vector<FailureProfile> pool = {profile_of("a", {0, 1, 2, 3}, vs),
                                                  profile_of("b", {3, 8}, vs)};
        CHECK(p3mask::lambda_focal(refs(pool), 0).value == 0.25);
    }
    SUBCASE("a model that never fails is flagged") {
        const std::vector<FailureProfile> pool = {profile_of("a", {}, vs),
                                                  profile_of("b", {1, 2}, vs)};
        const LambdaFocal lf = p3mask::lambda_focal(refs(pool), 0);
        CHECK(lf.value == 0.0);
        CHECK(lf.never_fails);
        CHECK_FALSE(p3mask::lambda_focal(refs(pool), 1).never_fails);
    }
}

TEST_CASE("three-model correlation hits both boundary behaviors") {
    const int vs = 12;
    SUBCASE("no co-failures anywhere") {
        const std::vector<FailureProfile> pool = {profile_of("a", {0, 1}, vs),
                                                  profile_of("b", {2, 3}, vs),
                                                  profile_of("c", {4, 5}, vs)};
        for (std::size_t f = 0; f < 3; ++f) {
            CHECK(p3mask::lambda_focal(refs(pool), f).value == 0.0);
        }
        CHECK(p3mask::focal_diversity(refs(pool)).d_focal == 1.0);
    }
    SUBCASE("everyone fails together") {
        const std::vector<FailureProfile> pool = {profile_of("a", {0, 1, 2}, vs),
                                                  profile_of("b", {0, 1, 2}, vs),
                                                  profile_of("c", {0, 1, 2}, vs)};
        for (std::size_t f = 0; f < 3; ++f) {
            CHECK(p3mask::lambda_focal(refs(pool), f).value == 1.0);
        }
        CHECK(p3mask::focal_diversity(refs(pool)).d_focal == 0.0);
    }
}

TEST_CASE("malformed teams and profiles are rejected") {
    const int vs = 10;
    const std::vector<FailureProfile> ok = {profile_of("a", {0, 1}, vs),
                                            profile_of("b", {2}, vs)};
    CHECK_THROWS_AS((void)p3mask::lambda_focal(refs(ok), 2), std::invalid_argument);

    const std::vector<FailureProfile> solo = {profile_of("a", {0}, vs)};
    CHECK_THROWS_AS((void)p3mask::lambda_focal(refs(solo), 0), std::invalid_argument);
    CHECK_THROWS_AS((void)p3mask::focal_diversity(refs(solo)), std::invalid_argument);

    const std::vector<FailureProfile> mixed = {profile_of("a", {0}, 10),
                                               profile_of("b", {0}, 11)};
    CHECK_THROWS_AS((void)p3mask::focal_diversity(refs(mixed)), std::invalid_argument);

    const std::vector<FailureProfile> dup = {profile_of("a", {0}, vs), profile_of("a", {1}, vs)};
    CHECK_THROWS_AS((void)p3mask::focal_diversity(refs(dup)), std::invalid_argument);

    const std::vector<FailureProfile> unsorted = {profile_of("a", {3, 1}, vs),
                                                  profile_of("b", {0}, vs)};
    CHECK_THROWS_AS((void)p3mask::focal_diversity(refs(unsorted)), std::invalid_argument);

    const std::vector<FailureProfile> outside = {profile_of("a", {0, 10}, vs),
                                                 profile_of("b", {0}, vs)};
    CHECK_THROWS_AS((void)p3mask::focal_diversity(refs(outside)), std::invalid_argument);

    std::vector<const FailureProfile*> with_null = refs(ok);
    with_null.push_back(nullptr);
    CHECK_THROWS_AS((void)p3mask::focal_diversity(with_null), std::invalid_argument);
}

TEST_CASE("diversity is invariant under team permutation") {
    const int vs = 14;
    const std::vector<FailureProfile> pool = {profile_of("x", {0, 2, 4, 6}, vs),
                                              profile_of("y", {0, 3, 6}, vs),
                                              profile_of("z", {1, 2, 6, 9}, vs)};
    const DiversityReport fwd =
        p3mask::focal_diversity({&pool[0], &pool[1], &pool[2]});
    const DiversityReport rev =
        p3mask::focal_diversity({&pool[2], &pool[0], &pool[1]});
    CHECK(fwd.d_focal == rev.d_focal);
    CHECK(fwd.team == rev.team);
    CHECK(fwd.lambdas == rev.lambdas);
    CHECK(fwd.team == std::vector<std::string>{"x", "y", "z"});
}

TEST_CASE("adding a member with an identical failure set never increases diversity") {
    Rng rng(505);
    const int vs = 12;
    for (int trial = 0; trial < 60; ++trial) {
        std::vector<FailureProfile> pool;
        for (int m = 0; m < 2; ++m) {
            FailureProfile p;
            p.model_id = std::string(1, static_cast<char>('a' + m));
            p.validation_size = vs;
            for (int i = 0; i < vs; ++i) {
                if (rng.uniform() < 0.35) p.failed.push_back(i);
            }
            pool.push_back(std::move(p));
        }
        FailureProfile clone = pool[1];
        clone.model_id = "c";
        pool.push_back(std::move(clone));

        const double pair = p3mask::focal_diversity({&pool[0], &pool[1]}).d_focal;
        const double trio = p3mask::focal_diversity({&pool[0], &pool[1], &pool[2]}).d_focal;
        CHECK(trio <= pair);
    }
}

TEST_CASE("diversity matches the brute-force oracle on every team") {
    const std::vector<FailureProfile> pool = random_pool(506, 6, 15);
    std::vector<oracle::ProfileRef> opool;
    for (const FailureProfile& p : pool) opool.push_back(as_oracle(p));

    for (int s : {2, 3}) {
        for (const std::vector<int>& combo : oracle::combinations(6, s)) {
            std::vector<const FailureProfile*> team;
            std::vector<oracle::ProfileRef> oteam;
            for (int idx : combo) {
                team.push_back(&pool[static_cast<std::size_t>(idx)]);
                oteam.push_back(opool[static_cast<std::size_t>(idx)]);
            }
            const DiversityReport rep = p3mask::focal_diversity(team);
            CHECK(rep.d_focal == oracle::d_focal_bruteforce(oteam));
            CHECK(rep.d_focal >= 0.0);
            CHECK(rep.d_focal <= 1.0);
        }
    }
}

TEST_CASE("exhaustive selection returns the brute-force argmax") {
    const std::vector<FailureProfile> pool = random_pool(507, 6, 15);
    std::vector<oracle::ProfileRef> opool;
    for (const FailureProfile& p : pool) opool.push_back(as_oracle(p));

    for (int s : {2, 3}) {
        // independent argmax: score every combination, keep best d, break
        // ties toward the smaller sorted id list
        double best_d = -1.0;
        std::vector<std::string> best_ids;
        for (const std::vector<int>& combo : oracle::combinations(6, s)) {
            std::vector<oracle::ProfileRef> oteam;
            std::vector<std::string> ids;
            for (int idx : combo) {
                oteam.push_back(opool[static_cast<std::size_t>(idx)]);
                ids.push_back(pool[static_cast<std::size_t>(idx)].model_id);
            }
            std::sort(ids.begin(), ids.end());
            const double d = oracle::d_focal_bruteforce(oteam);
            if (d > best_d || (d == best_d && ids < best_ids)) {
                best_d = d;
                best_ids = ids;
            }
        }

        const DiversityReport picked = p3mask::select_team(pool, s);
        CHECK(picked.d_focal == best_d);
        CHECK(picked.team == best_ids);

        const std::vector<DiversityReport> ranked = p3mask::rank_teams(pool, s);
        REQUIRE_FALSE(ranked.empty());
        CHECK(ranked.front().d_focal == picked.d_focal);
        CHECK(ranked.front().team == picked.team);
        for (std::size_t i = 0; i + 1 < ranked.size(); ++i) {
            CHECK(ranked[i].d_focal >= ranked[i + 1].d_focal);
        }
    }
}

TEST_CASE("selection covers the degenerate and tied cases") {
    const int vs = 10;
    SUBCASE("team size equal to the pool is the single full team") {
        const std::vector<FailureProfile> pool = {profile_of("b", {0, 1}, vs),
                                                  profile_of("a", {2, 3}, vs),
                                                  profile_of("c", {4, 5}, vs)};
        const DiversityReport rep = p3mask::select_team(pool, 3);
        CHECK(rep.team == std::vector<std::string>{"a", "b", "c"});
        CHECK(rep.d_focal == 1.0);
    }
    SUBCASE("all-tied pairs resolve to the smallest id list") {
        const std::vector<FailureProfile> pool = {profile_of("d", {6, 7}, vs),
                                                  profile_of("b", {2, 3}, vs),
                                                  profile_of("c", {4, 5}, vs),
                                                  profile_of("a", {0, 1}, vs)};
        const DiversityReport rep = p3mask::select_team(pool, 2);
        CHECK(rep.d_focal == 1.0);
        CHECK(rep.team == std::vector<std::string>{"a", "b"});
    }
    SUBCASE("invalid sizes are rejected") {
        const std::vector<FailureProfile> pool = {profile_of("a", {0}, vs),
                                                  profile_of("b", {1}, vs)};
        CHECK_THROWS_AS((void)p3mask::select_team(pool, 1), std::invalid_argument);
        CHECK_THROWS_AS((void)p3mask::select_team(pool, 3), std::invalid_argument);
    }
}

TEST_CASE("the ranking report is deterministic and readable") {
    const std::vector<FailureProfile> pool = random_pool(508, 4, 12);
    const std::vector<DiversityReport> ranked = p3mask::rank_teams(pool, 2);
    const std::string text = p3mask::format_team_ranking(ranked);
    CHECK(text == p3mask::format_team_ranking(p3mask::rank_teams(pool, 2)));

    CHECK(text.rfind("1. d_focal=", 0) == 0);
    CHECK(text.find("team=") != std::string::npos);
    CHECK(text.find("lambda=") != std::string::npos);
    // model-3 never fails, so any of its teams carries the warning
    CHECK(text.find("warning=never-fails") != std::string::npos);

    std::size_t lines = 0;
    for (char c : text) {
        if (c == '\n') ++lines;
    }
    CHECK(lines == ranked.size());
}

TEST_CASE("profiles from real models produce usable team scores") {
    const SmallDataset d = make_dataset("end_to_end", 65);
    const EmbeddingModel m1 = seeded_model(kTinyArch, 5);
    const EmbeddingModel m2 = seeded_model(kTinyArch, 6);
    const EmbeddingModel m3 = seeded_model(kTinyArch, 7);

    const std::vector<const LabeledImage*> val = p3mask::validation_images(d.images);
    const std::vector<const LabeledImage*> gal_imgs = p3mask::profiling_gallery_images(d.images);

    std::vector<FailureProfile> pool;
    for (const EmbeddingModel* m : {&m1, &m2, &m3}) {
        pool.push_back(p3mask::negative_samples(*m, val, p3mask::build_gallery(*m, gal_imgs)));
    }

    const DiversityReport rep = p3mask::select_team(pool, 2);
    CHECK(rep.team.size() == 2);
    CHECK(rep.d_focal >= 0.0);
    CHECK(rep.d_focal <= 1.0);

    const DiversityReport again = p3mask::select_team(pool, 2);
    CHECK(again.team == rep.team);
    CHECK(again.d_focal == rep.d_focal);
}
