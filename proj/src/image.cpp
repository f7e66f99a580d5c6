#include "p3mask/image.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "p3mask/interp.hpp"

namespace p3mask {

namespace {

constexpr int kSsimWindow = 11;
constexpr double kSsimSigma = 1.5;
constexpr double kSsimC1 = 0.01 * 0.01;
constexpr double kSsimC2 = 0.03 * 0.03;
constexpr int kMinFileImageSide = 8;

/// Reflects an out-of-range index into [0, n) with symmetric boundaries
/// (-1 -> 0, -2 -> 1, n -> n-1, ...).
int reflect_index(int i, int n) {
    while (i < 0 || i >= n) {
        if (i < 0) i = -i - 1;
        if (i >= n) i = 2 * n - 1 - i;
    }
    return i;
}

double clamp01(double v) { return v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v); }

} // namespace

void validate_crop(const CropSpec& crop, const Image& img) {
    if (crop.side < 1 || crop.top < 0 || crop.left < 0 ||
        crop.top + crop.side > img.height() || crop.left + crop.side > img.width()) {
        throw std::invalid_argument(
            "crop " + std::to_string(crop.side) + "x" + std::to_string(crop.side) + " at (" +
            std::to_string(crop.top) + "," + std::to_string(crop.left) +
            ") does not fit inside a " + std::to_string(img.height()) + "x" +
            std::to_string(img.width()) + " image");
    }
}

CropSpec effective_crop(const Image& img, std::optional<CropSpec> crop) {
    if (crop) {
        validate_crop(*crop, img);
        return *crop;
    }
    const int side = std::min(img.height(), img.width());
    return CropSpec{(img.height() - side) / 2, (img.width() - side) / 2, side};
}

Image face_crop(const Image& img, std::optional<CropSpec> crop) {
    const CropSpec c = effective_crop(img, crop);
    Image out(c.side, c.side, img.channels());
    for (int y = 0; y < c.side; ++y) {
        for (int x = 0; x < c.side; ++x) {
            for (int ch = 0; ch < img.channels(); ++ch) {
                out.pixel(y, x, ch) = img.pixel(c.top + y, c.left + x, ch);
            }
        }
    }
    return out;
}

Image resize_bilinear(const Image& img, int out_h, int out_w) {
    if (out_h < 1 || out_w < 1) {
        throw std::invalid_argument("resize_bilinear: output size " + std::to_string(out_h) + "x" +
                                    std::to_string(out_w) + " must be positive");
    }
    std::vector<AxisTap> rows(static_cast<std::size_t>(out_h));
    std::vector<AxisTap> cols(static_cast<std::size_t>(out_w));
    for (int i = 0; i < out_h; ++i) rows[static_cast<std::size_t>(i)] = axis_tap(i, img.height(), out_h);
    for (int i = 0; i < out_w; ++i) cols[static_cast<std::size_t>(i)] = axis_tap(i, img.width(), out_w);
    Image out(out_h, out_w, img.channels());
    for (int ch = 0; ch < img.channels(); ++ch) {
        for (int oy = 0; oy < out_h; ++oy) {
            const AxisTap& ry = rows[static_cast<std::size_t>(oy)];
            for (int ox = 0; ox < out_w; ++ox) {
                const AxisTap& cx = cols[static_cast<std::size_t>(ox)];
                if (ry.w1 == 0.0 && cx.w1 == 0.0) {
                    out.pixel(oy, ox, ch) = img.pixel(ry.i0, cx.i0, ch);
                } else {
                    out.pixel(oy, ox, ch) =
                        ry.w0 * (cx.w0 * img.pixel(ry.i0, cx.i0, ch) + cx.w1 * img.pixel(ry.i0, cx.i1, ch)) +
                        ry.w1 * (cx.w0 * img.pixel(ry.i1, cx.i0, ch) + cx.w1 * img.pixel(ry.i1, cx.i1, ch));
                }
            }
        }
    }
    return out;
}

double quantize_value(double v) { return std::round(v * 255.0) / 255.0; }

Image quantize(const Image& img) {
    Image out = img;
    for (double& v : out.data()) v = std::round(v * 255.0) / 255.0;
    return out;
}

const std::vector<double>& ssim_window_11() {
    static const std::vector<double> window = [] {
        std::vector<double> g(kSsimWindow);
        const int half = kSsimWindow / 2;
        for (int i = 0; i < kSsimWindow; ++i) {
            const double d = static_cast<double>(i - half);
            g[static_cast<std::size_t>(i)] = std::exp(-(d * d) / (2.0 * kSsimSigma * kSsimSigma));
        }
        std::vector<double> w(kSsimWindow * kSsimWindow);
        double total = 0.0;
        for (int p = 0; p < kSsimWindow; ++p) {
            for (int q = 0; q < kSsimWindow; ++q) {
                const double v = g[static_cast<std::size_t>(p)] * g[static_cast<std::size_t>(q)];
                w[static_cast<std::size_t>(p * kSsimWindow + q)] = v;
                total += v;
            }
        }
        for (double& v : w) v /= total;
        return w;
    }();
    return window;
}

namespace {

/// The SSIM formula applied to first and second window moments. The operation
/// order here is mirrored node-for-node by the differentiable SSIM so both
/// routes agree to the last bit.
double ssim_from_moments(double mu_a, double mu_b, double raw_aa, double raw_bb, double raw_ab) {
    const double mu_aa = mu_a * mu_a;
    const double mu_bb = mu_b * mu_b;
    const double mu_ab = mu_a * mu_b;
    const double var_a = raw_aa - mu_aa;
    const double var_b = raw_bb - mu_bb;
    const double cov = raw_ab - mu_ab;
    const double t1 = 2.0 * mu_ab + kSsimC1;
    const double t2 = 2.0 * cov + kSsimC2;
    const double d1 = mu_aa + mu_bb + kSsimC1;
    const double d2 = var_a + var_b + kSsimC2;
    return (t1 * t2) / (d1 * d2);
}

} // namespace

double ssim(const Image& a, const Image& b) {
    if (!a.same_shape(b)) {
        throw std::invalid_argument("ssim: image shapes differ (" + std::to_string(a.height()) +
                                    "x" + std::to_string(a.width()) + "x" +
                                    std::to_string(a.channels()) + " vs " +
                                    std::to_string(b.height()) + "x" + std::to_string(b.width()) +
                                    "x" + std::to_string(b.channels()) + ")");
    }
    const int h = a.height(), w = a.width(), chans = a.channels();
    if (std::min(h, w) >= kSsimWindow) {
        const std::vector<double>& win = ssim_window_11();
        const int ho = h - kSsimWindow + 1;
        const int wo = w - kSsimWindow + 1;
        double acc = 0.0;
        for (int ch = 0; ch < chans; ++ch) {
            for (int y0 = 0; y0 < ho; ++y0) {
                for (int x0 = 0; x0 < wo; ++x0) {
                    double mu_a = 0.0, mu_b = 0.0, raw_aa = 0.0, raw_bb = 0.0, raw_ab = 0.0;
                    for (int p = 0; p < kSsimWindow; ++p) {
                        for (int q = 0; q < kSsimWindow; ++q) {
                            const double wv = win[static_cast<std::size_t>(p * kSsimWindow + q)];
                            const double av = a.pixel(y0 + p, x0 + q, ch);
                            const double bv = b.pixel(y0 + p, x0 + q, ch);
                            mu_a += wv * av;
                            mu_b += wv * bv;
                            raw_aa += wv * (av * av);
                            raw_bb += wv * (bv * bv);
                            raw_ab += wv * (av * bv);
                        }
                    }
                    acc += ssim_from_moments(mu_a, mu_b, raw_aa, raw_bb, raw_ab);
                }
            }
        }
        return acc / static_cast<double>(chans * ho * wo);
    }
    // Small images: global statistics per channel, averaged over channels.
    const double n = static_cast<double>(h) * static_cast<double>(w);
    double acc = 0.0;
    for (int ch = 0; ch < chans; ++ch) {
        double mu_a = 0.0, mu_b = 0.0, raw_aa = 0.0, raw_bb = 0.0, raw_ab = 0.0;
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                const double av = a.pixel(y, x, ch);
                const double bv = b.pixel(y, x, ch);
                mu_a += av;
                mu_b += bv;
                raw_aa += av * av;
                raw_bb += bv * bv;
                raw_ab += av * bv;
            }
        }
        mu_a /= n;
        mu_b /= n;
        raw_aa /= n;
        raw_bb /= n;
        raw_ab /= n;
        acc += ssim_from_moments(mu_a, mu_b, raw_aa, raw_bb, raw_ab);
    }
    return acc / static_cast<double>(chans);
}

Image gaussian_filter(const Image& img, double sigma) {
    if (!(sigma > 0.0)) {
        throw std::invalid_argument("gaussian_filter: sigma must be positive, got " +
                                    std::to_string(sigma));
    }
    const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
    std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
    double total = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        const double v = std::exp(-(static_cast<double>(i) * i) / (2.0 * sigma * sigma));
        kernel[static_cast<std::size_t>(i + radius)] = v;
        total += v;
    }
    for (double& v : kernel) v /= total;

    const int h = img.height(), w = img.width(), chans = img.channels();
    Image tmp(h, w, chans);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            for (int ch = 0; ch < chans; ++ch) {
                double acc = 0.0;
                for (int i = -radius; i <= radius; ++i) {
                    acc += kernel[static_cast<std::size_t>(i + radius)] *
                           img.pixel(y, reflect_index(x + i, w), ch);
                }
                tmp.pixel(y, x, ch) = acc;
            }
        }
    }
    Image out(h, w, chans);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            for (int ch = 0; ch < chans; ++ch) {
                double acc = 0.0;
                for (int i = -radius; i <= radius; ++i) {
                    acc += kernel[static_cast<std::size_t>(i + radius)] *
                           tmp.pixel(reflect_index(y + i, h), x, ch);
                }
                out.pixel(y, x, ch) = clamp01(acc);
            }
        }
    }
    return out;
}

Image median_filter(const Image& img, int k) {
    if (k < 1 || k % 2 == 0) {
        throw std::invalid_argument("median_filter: window must be odd and >= 1, got " +
                                    std::to_string(k));
    }
    const int radius = k / 2;
    const int h = img.height(), w = img.width(), chans = img.channels();
    Image out(h, w, chans);
    std::vector<double> window(static_cast<std::size_t>(k) * k);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            for (int ch = 0; ch < chans; ++ch) {
                std::size_t idx = 0;
                for (int dy = -radius; dy <= radius; ++dy) {
                    for (int dx = -radius; dx <= radius; ++dx) {
                        window[idx++] = img.pixel(reflect_index(y + dy, h),
                                                  reflect_index(x + dx, w), ch);
                    }
                }
                const std::size_t mid = window.size() / 2;
                std::nth_element(window.begin(), window.begin() + static_cast<std::ptrdiff_t>(mid),
                                 window.end());
                out.pixel(y, x, ch) = clamp01(window[mid]);
            }
        }
    }
    return out;
}

namespace {

// Standard JPEG luminance quantization table (in zig-zag-free row-major order).
constexpr int kJpegLuminance[64] = {
    16, 11, 10, 16, 24,  40,  51,  61,
    12, 12, 14, 19, 26,  58,  60,  55,
    14, 13, 16, 24, 40,  57,  69,  56,
    14, 17, 22, 29, 51,  87,  80,  62,
    18, 22, 37, 56, 68,  109, 103, 77,
    24, 35, 55, 64, 81,  104, 113, 92,
    49, 64, 78, 87, 103, 121, 120, 101,
    72, 92, 95, 98, 112, 100, 103, 99,
};

/// Orthonormal 8x8 DCT-II basis: A[u][x] = C(u)/2 * cos((2x+1)u*pi/16).
const double* dct_basis() {
    static const std::vector<double> basis = [] {
        std::vector<double> a(64);
        for (int u = 0; u < 8; ++u) {
            const double cu = (u == 0) ? 1.0 / std::sqrt(2.0) : 1.0;
            for (int x = 0; x < 8; ++x) {
                a[static_cast<std::size_t>(u * 8 + x)] =
                    0.5 * cu * std::cos((2.0 * x + 1.0) * u * 3.14159265358979323846 / 16.0);
            }
        }
        return a;
    }();
    return basis.data();
}

} // namespace

Image jpeg_filter(const Image& img, int quality) {
    if (quality < 1 || quality > 100) {
        throw std::invalid_argument("jpeg_filter: quality must be in [1, 100], got " +
                                    std::to_string(quality));
    }
    // Quality scaling as in the reference JPEG implementation.
    const int scale = quality < 50 ? 5000 / quality : 200 - 2 * quality;
    int qtable[64];
    for (int i = 0; i < 64; ++i) {
        const int q = (kJpegLuminance[i] * scale + 50) / 100;
        qtable[i] = std::clamp(q, 1, 255);
    }

    const int h = img.height(), w = img.width(), chans = img.channels();
    const int ph = (h + 7) / 8 * 8;
    const int pw = (w + 7) / 8 * 8;
    const double* basis = dct_basis();
    Image out(h, w, chans);

    std::vector<double> plane(static_cast<std::size_t>(ph) * pw);
    for (int ch = 0; ch < chans; ++ch) {
        // Level-shifted channel plane with edge replication to block multiples.
        for (int y = 0; y < ph; ++y) {
            const int sy = std::min(y, h - 1);
            for (int x = 0; x < pw; ++x) {
                const int sx = std::min(x, w - 1);
                plane[static_cast<std::size_t>(y) * pw + x] = img.pixel(sy, sx, ch) * 255.0 - 128.0;
            }
        }
        for (int by = 0; by < ph; by += 8) {
            for (int bx = 0; bx < pw; bx += 8) {
                double block[64], coef[64], tmp[64];
                for (int y = 0; y < 8; ++y) {
                    for (int x = 0; x < 8; ++x) {
                        block[y * 8 + x] = plane[static_cast<std::size_t>(by + y) * pw + bx + x];
                    }
                }
                // coef = A * block * A^T
                for (int u = 0; u < 8; ++u) {
                    for (int x = 0; x < 8; ++x) {
                        double acc = 0.0;
                        for (int y = 0; y < 8; ++y) acc += basis[u * 8 + y] * block[y * 8 + x];
                        tmp[u * 8 + x] = acc;
                    }
                }
                for (int u = 0; u < 8; ++u) {
                    for (int v = 0; v < 8; ++v) {
                        double acc = 0.0;
                        for (int x = 0; x < 8; ++x) acc += tmp[u * 8 + x] * basis[v * 8 + x];
                        coef[u * 8 + v] = acc;
                    }
                }
                for (int i = 0; i < 64; ++i) {
                    coef[i] = std::round(coef[i] / qtable[i]) * qtable[i];
                }
                // block = A^T * coef * A
                for (int y = 0; y < 8; ++y) {
                    for (int v = 0; v < 8; ++v) {
                        double acc = 0.0;
                        for (int u = 0; u < 8; ++u) acc += basis[u * 8 + y] * coef[u * 8 + v];
                        tmp[y * 8 + v] = acc;
                    }
                }
                for (int y = 0; y < 8; ++y) {
                    for (int x = 0; x < 8; ++x) {
                        double acc = 0.0;
                        for (int v = 0; v < 8; ++v) acc += tmp[y * 8 + v] * basis[v * 8 + x];
                        block[y * 8 + x] = acc;
                    }
                }
                for (int y = 0; y < 8; ++y) {
                    const int iy = by + y;
                    if (iy >= h) continue;
                    for (int x = 0; x < 8; ++x) {
                        const int ix = bx + x;
                        if (ix >= w) continue;
                        out.pixel(iy, ix, ch) = clamp01((block[y * 8 + x] + 128.0) / 255.0);
                    }
                }
            }
        }
    }
    return out;
}

namespace {

int parse_pnm_int(std::istream& in, const std::string& path) {
    int c = in.get();
    // Skip whitespace and comments.
    while (c != EOF) {
        if (c == '#') {
            while (c != EOF && c != '\n') c = in.get();
        } else if (std::isspace(c)) {
            c = in.get();
        } else {
            break;
        }
    }
    if (c == EOF || !std::isdigit(c)) {
        throw std::runtime_error("malformed PNM header in " + path);
    }
    long value = 0;
    while (c != EOF && std::isdigit(c)) {
        value = value * 10 + (c - '0');
        if (value > 1 << 24) {
            throw std::runtime_error("implausible dimension in PNM header of " + path);
        }
        c = in.get();
    }
    if (c != EOF) in.unget();
    return static_cast<int>(value);
}

} // namespace

Image load_image(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw std::runtime_error("cannot open image file: " + path);
    }
    char m0 = 0, m1 = 0;
    in.get(m0);
    in.get(m1);
    int channels = 0;
    if (m0 == 'P' && m1 == '6') {
        channels = 3;
    } else if (m0 == 'P' && m1 == '5') {
        channels = 1;
    } else {
        throw std::runtime_error("unsupported image format in " + path +
                                 " (binary P5/P6 expected)");
    }
    const int w = parse_pnm_int(in, path);
    const int h = parse_pnm_int(in, path);
    const int maxval = parse_pnm_int(in, path);
    if (maxval != 255) {
        throw std::runtime_error("unsupported maxval " + std::to_string(maxval) + " in " + path +
                                 " (only 255)");
    }
    if (h < kMinFileImageSide || w < kMinFileImageSide) {
        throw std::runtime_error("image " + path + " is " + std::to_string(h) + "x" +
                                 std::to_string(w) + ", smaller than the supported minimum 8x8");
    }
    const int sep = in.get();
    if (sep == EOF || !std::isspace(sep)) {
        throw std::runtime_error("malformed PNM header in " + path);
    }
    const std::size_t count = static_cast<std::size_t>(h) * w * channels;
    std::vector<unsigned char> bytes(count);
    in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(count));
    if (static_cast<std::size_t>(in.gcount()) != count) {
        throw std::runtime_error("truncated pixel data in " + path + " (expected " +
                                 std::to_string(count) + " bytes, got " +
                                 std::to_string(in.gcount()) + ")");
    }
    Image img(h, w, channels);
    for (std::size_t i = 0; i < count; ++i) {
        img.data()[i] = static_cast<double>(bytes[i]) / 255.0;
    }
    return img;
}

void save_image(const Image& img, const std::string& path) {
    if (img.height() < kMinFileImageSide || img.width() < kMinFileImageSide) {
        throw std::invalid_argument("refusing to save " + std::to_string(img.height()) + "x" +
                                    std::to_string(img.width()) +
                                    " image, smaller than the supported minimum 8x8");
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw std::runtime_error("cannot open image file for writing: " + path);
    }
    out << (img.channels() == 3 ? "P6" : "P5") << "\n"
        << img.width() << " " << img.height() << "\n255\n";
    std::vector<unsigned char> bytes(img.data().size());
    for (std::size_t i = 0; i < bytes.size(); ++i) {
        bytes[i] = static_cast<unsigned char>(std::lround(clamp01(img.data()[i]) * 255.0));
    }
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) {
        throw std::runtime_error("write error on image file: " + path);
    }
}

Tensor image_to_chw(const Image& img) {
    Tensor t({img.channels(), img.height(), img.width()});
    for (int c = 0; c < img.channels(); ++c) {
        for (int y = 0; y < img.height(); ++y) {
            for (int x = 0; x < img.width(); ++x) {
                t.at3(c, y, x) = img.pixel(y, x, c);
            }
        }
    }
    return t;
}

Image chw_to_image(const Tensor& t) {
    if (t.rank() != 3) {
        throw std::invalid_argument("chw_to_image: expected a [C,H,W] tensor, got " +
                                    shape_str(t.shape()));
    }
    Image img(t.dim(1), t.dim(2), t.dim(0));
    for (int c = 0; c < t.dim(0); ++c) {
        for (int y = 0; y < t.dim(1); ++y) {
            for (int x = 0; x < t.dim(2); ++x) {
                img.pixel(y, x, c) = t.at3(c, y, x);
            }
        }
    }
    return img;
}

} // namespace p3mask
