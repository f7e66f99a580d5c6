#pragma once

// Applying and removing a privacy mask on shareable 8-bit images, and the
// portable key-file format that lets the mask travel as a de-obfuscation key.
//
// Both operations work on the integer 0..255 pixel grid: shared images are
// 8-bit, so doing the arithmetic in bytes makes apply followed by unmask an
// exact inverse at every pixel the subtraction did not saturate.

#include <optional>
#include <string>

#include "p3mask/image.hpp"
#include "p3mask/mask.hpp"

namespace p3mask {

/// How often the masked subtraction (or the unmask addition) hit the 0 or 255
/// rail. Saturated pixels are the only ones the roundtrip cannot restore.
struct SaturationStats {
    long clipped = 0;   // crop pixels pinned to the rail
    long total = 0;     // crop pixels examined
    double fraction() const {
        return total == 0 ? 0.0 : static_cast<double>(clipped) / static_cast<double>(total);
    }
};

/// Obfuscates the face region: the crop (centered largest square when absent)
/// is replaced by clamp(crop - quantize(resize(mask)), 0, 1) on the 1/255
/// grid; pixels outside the crop pass through untouched. Throws on an invalid
/// crop or a channel mismatch.
Image mask_apply(const Image& x, const P3Mask& mask, std::optional<CropSpec> crop = {},
                 SaturationStats* stats = nullptr);

/// Removes a mask previously applied with the same crop geometry: the crop is
/// replaced by clamp(crop + quantize(resize(mask)), 0, 1). Feeding the wrong
/// mask or the wrong crop is not detectable and simply yields a wrong image.
Image unmask(const Image& x_protected, const P3Mask& mask, std::optional<CropSpec> crop = {},
             SaturationStats* stats = nullptr);

/// Writes the mask key file: magic "P3MK", format version, mask geometry,
/// amplitude bound, owner id, creation seed, the values as little-endian
/// doubles and a CRC-32 trailer.
void mask_save(const P3Mask& mask, const std::string& path);

/// Reads a mask key file, verifying magic, version, CRC and the amplitude
/// bound; any mismatch is rejected with the specific cause.
P3Mask mask_load(const std::string& path);

} // namespace p3mask
