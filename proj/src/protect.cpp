#include "p3mask/protect.hpp"

#include <cmath>
#include <cstring>
#include <stdexcept>

#include "p3mask/binio.hpp"

namespace p3mask {

namespace {

constexpr char kMaskMagic[] = "P3MK";
constexpr std::uint16_t kMaskVersion = 1;

long clamp_byte(long b) { return b < 0 ? 0 : b > 255 ? 255 : b; }

/// Shared core: direction -1 subtracts the mask (protect), +1 adds it back
/// (unmask). All arithmetic happens on integer bytes so the two directions
/// cancel exactly wherever the clamp stays idle.
Image apply_delta(const Image& x, const P3Mask& mask, std::optional<CropSpec> crop, int direction,
                  SaturationStats* stats) {
    mask.validate();
    if (mask.values.channels() != x.channels()) {
        throw std::invalid_argument("mask has " + std::to_string(mask.values.channels()) +
                                    " channels, image has " + std::to_string(x.channels()));
    }
    const CropSpec c = effective_crop(x, crop);
    const Image m = quantize(resize_bilinear(mask.values, c.side, c.side));

    Image out = x;
    for (int y = 0; y < c.side; ++y) {
        for (int xx = 0; xx < c.side; ++xx) {
            for (int ch = 0; ch < x.channels(); ++ch) {
                const long xb = clamp_byte(std::lround(x.pixel(c.top + y, c.left + xx, ch) * 255.0));
                const long qb = std::lround(m.pixel(y, xx, ch) * 255.0);
                const long raw = xb + direction * qb;
                const long yb = clamp_byte(raw);
                out.pixel(c.top + y, c.left + xx, ch) = static_cast<double>(yb) / 255.0;
                if (stats != nullptr) {
                    ++stats->total;
                    if (raw != yb) ++stats->clipped;
                }
            }
        }
    }
    return out;
}

} // namespace

Image mask_apply(const Image& x, const P3Mask& mask, std::optional<CropSpec> crop,
                 SaturationStats* stats) {
    return apply_delta(x, mask, crop, -1, stats);
}

Image unmask(const Image& x_protected, const P3Mask& mask, std::optional<CropSpec> crop,
             SaturationStats* stats) {
    return apply_delta(x_protected, mask, crop, +1, stats);
}

void mask_save(const P3Mask& mask, const std::string& path) {
    mask.validate();
    ByteWriter w;
    w.bytes(kMaskMagic, 4);
    w.u16(kMaskVersion);
    w.u16(static_cast<std::uint16_t>(mask.values.height()));
    w.u16(static_cast<std::uint16_t>(mask.values.width()));
    w.u8(static_cast<std::uint8_t>(mask.values.channels()));
    w.f64(mask.epsilon);
    w.str(mask.owner_id);
    w.u64(mask.creation_seed);
    for (double v : mask.values.data()) w.f64(v);
    w.u32(crc32(w.data()));
    write_file_bytes(path, w.data());
}

P3Mask mask_load(const std::string& path) {
    const std::vector<std::uint8_t> bytes = read_file_bytes(path);
    if (bytes.size() < 8) throw std::runtime_error(path + ": not a mask key file (too short)");
    const std::uint32_t stored = static_cast<std::uint32_t>(bytes[bytes.size() - 4]) |
                                 (static_cast<std::uint32_t>(bytes[bytes.size() - 3]) << 8) |
                                 (static_cast<std::uint32_t>(bytes[bytes.size() - 2]) << 16) |
                                 (static_cast<std::uint32_t>(bytes[bytes.size() - 1]) << 24);
    if (crc32(bytes.data(), bytes.size() - 4) != stored) {
        throw std::runtime_error(path + ": mask key CRC mismatch");
    }
    ByteReader r(bytes.data(), bytes.size() - 4);
    char magic[4];
    magic[0] = static_cast<char>(r.u8());
    magic[1] = static_cast<char>(r.u8());
    magic[2] = static_cast<char>(r.u8());
    magic[3] = static_cast<char>(r.u8());
    if (std::memcmp(magic, kMaskMagic, 4) != 0) {
        throw std::runtime_error(path + ": not a mask key file (bad magic)");
    }
    const std::uint16_t version = r.u16();
    if (version != kMaskVersion) {
        throw std::runtime_error(path + ": unsupported mask key version " +
                                 std::to_string(version));
    }
    const int h = r.u16();
    const int w = r.u16();
    const int channels = r.u8();
    if (h < 1 || w < 1) throw std::runtime_error(path + ": mask key has empty geometry");
    if (channels != 1 && channels != 3) {
        throw std::runtime_error(path + ": mask key has unsupported channel count " +
                                 std::to_string(channels));
    }

    P3Mask mask;
    mask.epsilon = r.f64();
    if (!std::isfinite(mask.epsilon) || mask.epsilon <= 0.0) {
        throw std::runtime_error(path + ": mask key has a non-positive amplitude bound");
    }
    mask.owner_id = r.str();
    mask.creation_seed = r.u64();
    mask.values = Image(h, w, channels);
    for (double& v : mask.values.data()) {
        v = r.f64();
        if (!std::isfinite(v) || std::abs(v) > mask.epsilon) {
            throw std::runtime_error(path + ": mask value exceeds the amplitude bound");
        }
    }
    if (r.remaining() != 0) {
        throw std::runtime_error(path + ": trailing bytes in mask key file");
    }
    return mask;
}

} // namespace p3mask
