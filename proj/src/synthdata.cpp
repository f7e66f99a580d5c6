#include "p3mask/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "p3mask/rng.hpp"

namespace p3mask {

namespace {

constexpr int kBlobCount = 3;
constexpr double kBrightnessRange = 0.10;
constexpr double kTranslateRange = 0.10;
constexpr double kScaleLo = 0.9;
constexpr double kScaleHi = 1.1;
constexpr double kNoiseSigma = 0.02;

// Faces share one gross layout and differ in bounded details, so the
// population is drawn the same way: every identity of a dataset perturbs a
// single per-dataset template. Fully independent draws would space the
// identities so far apart in embedding space that no quality-bounded
// perturbation could ever move one across a decision boundary, which would
// make protection trivially unmeasurable.
struct IdentityParams {
    double bg_top[3];
    double bg_bottom[3];
    double blob_x[kBlobCount];
    double blob_y[kBlobCount];
    double blob_r[kBlobCount];
    double blob_amp[kBlobCount][3];
};

IdentityParams draw_template(std::uint64_t dataset_seed, int channels) {
    Rng rng(derive_seed(dataset_seed, "template"));
    IdentityParams p{};
    for (int c = 0; c < channels; ++c) p.bg_top[c] = rng.uniform(0.3, 0.7);
    for (int c = 0; c < channels; ++c) p.bg_bottom[c] = rng.uniform(0.3, 0.7);
    for (int b = 0; b < kBlobCount; ++b) {
        p.blob_x[b] = rng.uniform(0.25, 0.75);
        p.blob_y[b] = rng.uniform(0.25, 0.75);
        p.blob_r[b] = rng.uniform(0.14, 0.26);
        for (int c = 0; c < channels; ++c) p.blob_amp[b][c] = rng.uniform(-0.35, 0.35);
    }
    return p;
}

IdentityParams draw_identity(std::uint64_t dataset_seed, int identity_index, int channels) {
    IdentityParams p = draw_template(dataset_seed, channels);
    Rng rng(derive_seed(dataset_seed, "identity", static_cast<std::uint64_t>(identity_index)));
    for (int c = 0; c < channels; ++c) p.bg_top[c] += rng.uniform(-0.04, 0.04);
    for (int c = 0; c < channels; ++c) p.bg_bottom[c] += rng.uniform(-0.04, 0.04);
    for (int b = 0; b < kBlobCount; ++b) {
        p.blob_x[b] += rng.uniform(-0.048, 0.048);
        p.blob_y[b] += rng.uniform(-0.048, 0.048);
        p.blob_r[b] += rng.uniform(-0.016, 0.016);
        if (p.blob_r[b] < 0.05) p.blob_r[b] = 0.05;
        for (int c = 0; c < channels; ++c) p.blob_amp[b][c] += rng.uniform(-0.12, 0.12);
    }
    return p;
}

double sample_base(const IdentityParams& p, double u, double v, int c) {
    const double vc = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
    double value = p.bg_top[c] + (p.bg_bottom[c] - p.bg_top[c]) * vc;
    for (int b = 0; b < kBlobCount; ++b) {
        const double du = u - p.blob_x[b];
        const double dv = v - p.blob_y[b];
        value += p.blob_amp[b][c] *
                 std::exp(-(du * du + dv * dv) / (2.0 * p.blob_r[b] * p.blob_r[b]));
    }
    return value;
}

std::string identity_label(int index) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "id%02d", index);
    return buf;
}

std::string image_relpath(const std::string& identity, int image_index, int channels) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "images/%s/img%03d.%s", identity.c_str(), image_index,
                  channels == 3 ? "ppm" : "pgm");
    return buf;
}

Image render_image(const IdentityParams& params, std::uint64_t dataset_seed, int identity_index,
                   int image_index, int size, int channels) {
    Rng rng(derive_seed(dataset_seed, "image", static_cast<std::uint64_t>(identity_index),
                        static_cast<std::uint64_t>(image_index)));
    const double brightness = rng.uniform(-kBrightnessRange, kBrightnessRange);
    const double tx = rng.uniform(-kTranslateRange, kTranslateRange);
    const double ty = rng.uniform(-kTranslateRange, kTranslateRange);
    const double scale = rng.uniform(kScaleLo, kScaleHi);

    Image img(size, size, channels);
    for (int y = 0; y < size; ++y) {
        const double v = (y + 0.5) / size;
        const double vs = 0.5 + ((v - 0.5) - ty) / scale;
        for (int x = 0; x < size; ++x) {
            const double u = (x + 0.5) / size;
            const double us = 0.5 + ((u - 0.5) - tx) / scale;
            for (int c = 0; c < channels; ++c) {
                const double value =
                    sample_base(params, us, vs, c) + brightness + rng.normal(0.0, kNoiseSigma);
                img.pixel(y, x, c) = value < 0.0 ? 0.0 : (value > 1.0 ? 1.0 : value);
            }
        }
    }
    return img;
}

void validate_gen_config(const GenConfig& config) {
    if (config.identities < 1) {
        throw std::invalid_argument("gen_dataset: need at least 1 identity");
    }
    if (config.images_per_identity < 3) {
        throw std::invalid_argument(
            "gen_dataset: need at least 3 images per identity to populate all roles, got " +
            std::to_string(config.images_per_identity));
    }
    if (config.image_size < 8) {
        throw std::invalid_argument("gen_dataset: image size must be >= 8, got " +
                                    std::to_string(config.image_size));
    }
    if (config.channels != 1 && config.channels != 3) {
        throw std::invalid_argument("gen_dataset: channels must be 1 or 3");
    }
    if (config.out_dir.empty()) {
        throw std::invalid_argument("gen_dataset: output directory not set");
    }
}

} // namespace

SplitCounts role_split(int images_per_identity) {
    SplitCounts s;
    s.probe = std::max(1, static_cast<int>(std::lround(0.1 * images_per_identity)));
    s.unseen = std::max(1, static_cast<int>(std::lround(0.2 * images_per_identity)));
    s.seen = images_per_identity - s.probe - s.unseen;
    if (s.seen < 1) {
        throw std::invalid_argument("role_split: " + std::to_string(images_per_identity) +
                                    " images per identity leave no gallery-seen images");
    }
    return s;
}

Image render_identity_base(std::uint64_t dataset_seed, int identity_index, int size,
                           int channels) {
    const IdentityParams params = draw_identity(dataset_seed, identity_index, channels);
    Image img(size, size, channels);
    for (int y = 0; y < size; ++y) {
        const double v = (y + 0.5) / size;
        for (int x = 0; x < size; ++x) {
            const double u = (x + 0.5) / size;
            for (int c = 0; c < channels; ++c) {
                const double value = sample_base(params, u, v, c);
                img.pixel(y, x, c) = value < 0.0 ? 0.0 : (value > 1.0 ? 1.0 : value);
            }
        }
    }
    return img;
}

DatasetManifest gen_dataset(const GenConfig& config) {
    validate_gen_config(config);
    const SplitCounts split = role_split(config.images_per_identity);

    DatasetManifest manifest;
    manifest.seed = config.seed;
    manifest.identities = config.identities;
    manifest.images_per_identity = config.images_per_identity;
    manifest.image_size = config.image_size;
    manifest.channels = config.channels;
    manifest.root_dir = config.out_dir;

    const std::filesystem::path root(config.out_dir);
    for (int id = 0; id < config.identities; ++id) {
        const std::string label = identity_label(id);
        std::filesystem::create_directories(root / "images" / label);
        const IdentityParams params = draw_identity(config.seed, id, config.channels);
        for (int k = 0; k < config.images_per_identity; ++k) {
            const Image img = render_image(params, config.seed, id, k, config.image_size,
                                           config.channels);
            const std::string rel = image_relpath(label, k, config.channels);
            save_image(img, (root / rel).string());
            const char* role = k < split.probe
                                   ? kRoleProbe
                                   : (k < split.probe + split.seen ? kRoleGallerySeen
                                                                   : kRoleGalleryUnseen);
            manifest.images.push_back({label, role, rel});
        }
    }
    save_manifest(manifest, (root / "manifest.txt").string());
    return manifest;
}

std::vector<std::string> DatasetManifest::identity_ids() const {
    std::set<std::string> ids;
    for (const DatasetImage& e : images) ids.insert(e.identity);
    return {ids.begin(), ids.end()};
}

std::vector<const DatasetImage*> DatasetManifest::select(const std::string& identity,
                                                         const std::string& role) const {
    std::vector<const DatasetImage*> out;
    for (const DatasetImage& e : images) {
        if (!identity.empty() && e.identity != identity) continue;
        if (!role.empty() && e.role != role) continue;
        out.push_back(&e);
    }
    return out;
}

std::string DatasetManifest::path_of(const DatasetImage& entry) const {
    return (std::filesystem::path(root_dir) / entry.relpath).string();
}

void save_manifest(const DatasetManifest& manifest, const std::string& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw std::runtime_error("cannot open manifest for writing: " + path);
    }
    out << "p3mask-dataset v1\n"
        << "seed " << manifest.seed << "\n"
        << "identities " << manifest.identities << "\n"
        << "images-per-identity " << manifest.images_per_identity << "\n"
        << "image-size " << manifest.image_size << "\n"
        << "channels " << manifest.channels << "\n"
        << "begin-images\n";
    for (const DatasetImage& e : manifest.images) {
        out << "image " << e.identity << " " << e.role << " " << e.relpath << "\n";
    }
    out << "end-images\n";
    if (!out) {
        throw std::runtime_error("write error on manifest: " + path);
    }
}

DatasetManifest load_manifest(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw std::runtime_error("cannot open manifest: " + path);
    }
    DatasetManifest m;
    m.root_dir = std::filesystem::path(path).parent_path().string();
    if (m.root_dir.empty()) m.root_dir = ".";

    std::string line;
    int lineno = 0;
    const auto fail = [&](const std::string& why) -> void {
        throw std::runtime_error("manifest " + path + " line " + std::to_string(lineno) + ": " +
                                 why);
    };

    if (!std::getline(in, line)) fail("empty file");
    ++lineno;
    if (line != "p3mask-dataset v1") fail("unrecognized header '" + line + "'");

    bool in_images = false;
    bool ended = false;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string key;
        ls >> key;
        if (!in_images) {
            if (key == "seed") {
                ls >> m.seed;
            } else if (key == "identities") {
                ls >> m.identities;
            } else if (key == "images-per-identity") {
                ls >> m.images_per_identity;
            } else if (key == "image-size") {
                ls >> m.image_size;
            } else if (key == "channels") {
                ls >> m.channels;
            } else if (key == "begin-images") {
                in_images = true;
                continue;
            } else {
                fail("unknown header field '" + key + "'");
            }
            if (ls.fail()) fail("malformed value for '" + key + "'");
        } else {
            if (key == "end-images") {
                ended = true;
                break;
            }
            if (key != "image") fail("expected an image record, got '" + key + "'");
            DatasetImage e;
            ls >> e.identity >> e.role >> e.relpath;
            if (ls.fail()) fail("malformed image record");
            if (e.role != kRoleProbe && e.role != kRoleGallerySeen &&
                e.role != kRoleGalleryUnseen) {
                fail("unknown role '" + e.role + "'");
            }
            m.images.push_back(std::move(e));
        }
    }
    if (!ended) fail("missing end-images terminator");
    if (m.images.empty()) fail("no image records");
    const auto ids = m.identity_ids();
    if (static_cast<int>(ids.size()) != m.identities) {
        fail("header declares " + std::to_string(m.identities) + " identities but records list " +
             std::to_string(ids.size()));
    }
    for (const std::string& id : ids) {
        const auto count = m.select(id, "").size();
        if (static_cast<int>(count) != m.images_per_identity) {
            fail("identity " + id + " has " + std::to_string(count) + " images, expected " +
                 std::to_string(m.images_per_identity));
        }
    }
    return m;
}

std::vector<LabeledImage> load_dataset_images(const DatasetManifest& manifest) {
    std::vector<LabeledImage> out;
    out.reserve(manifest.images.size());
    for (const DatasetImage& e : manifest.images) {
        out.push_back({e.identity, e.role, e.relpath, load_image(manifest.path_of(e))});
    }
    return out;
}

} // namespace p3mask
