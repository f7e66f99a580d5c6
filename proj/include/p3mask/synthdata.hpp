#pragma once

// Seeded synthetic identity corpus.
//
// Each identity is a smooth procedural pattern (a vertical background
// gradient plus a handful of Gaussian blobs) whose parameters are drawn from
// an identity-specific stream of the dataset seed. Images of an identity are
// variations of that pattern: brightness shift, sub-pattern translation,
// scale jitter and per-pixel Gaussian noise. Every byte of the generated tree
// is a pure function of the generation config.
//
// Images of an identity are split into three roles:
//   probe           held-out query images (10%, at least 1)
//   gallery-seen    enrolled images a model may train on (the remainder)
//   gallery-unseen  enrolled images kept out of training (20%, at least 1)

#include <cstdint>
#include <string>
#include <vector>

#include "p3mask/image.hpp"

namespace p3mask {

inline constexpr const char* kRoleProbe = "probe";
inline constexpr const char* kRoleGallerySeen = "gallery-seen";
inline constexpr const char* kRoleGalleryUnseen = "gallery-unseen";

struct GenConfig {
    int identities = 8;
    int images_per_identity = 20;
    int image_size = 32;
    int channels = 3;
    std::uint64_t seed = 0;
    std::string out_dir;
};

struct DatasetImage {
    std::string identity;
    std::string role;
    std::string relpath;   // relative to the manifest's directory
};

struct DatasetManifest {
    std::uint64_t seed = 0;
    int identities = 0;
    int images_per_identity = 0;
    int image_size = 0;
    int channels = 0;
    std::vector<DatasetImage> images;
    std::string root_dir;   // directory the relpaths resolve against

    /// Sorted unique identity labels.
    std::vector<std::string> identity_ids() const;

    /// Entries matching the given identity and role; empty string matches any.
    std::vector<const DatasetImage*> select(const std::string& identity,
                                            const std::string& role) const;

    std::string path_of(const DatasetImage& entry) const;
};

struct SplitCounts {
    int probe = 0;
    int seen = 0;
    int unseen = 0;
};

/// Role counts for one identity: probe = max(1, round(0.1 n)),
/// unseen = max(1, round(0.2 n)), seen = the rest (must stay >= 1).
SplitCounts role_split(int images_per_identity);

/// Generates the image tree and manifest under config.out_dir and returns the
/// manifest. Rerunning with the same config reproduces every byte.
DatasetManifest gen_dataset(const GenConfig& config);

void save_manifest(const DatasetManifest& manifest, const std::string& path);
DatasetManifest load_manifest(const std::string& path);

/// Variation-free render of an identity's base pattern; exposed so tests can
/// measure how far apart distinct identities are.
Image render_identity_base(std::uint64_t dataset_seed, int identity_index, int size,
                           int channels);

struct LabeledImage {
    std::string identity;
    std::string role;
    std::string relpath;
    Image image;
};

/// Loads every image referenced by the manifest, in manifest order.
std::vector<LabeledImage> load_dataset_images(const DatasetManifest& manifest);

} // namespace p3mask
