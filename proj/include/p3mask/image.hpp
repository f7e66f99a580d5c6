#pragma once

// Image container and the image-space operations of the pipeline: face
// cropping, corner-aligned bilinear resize, 8-bit quantization, SSIM, the
// adaptive-adversary filters (Gaussian blur, median, JPEG round-trip) and
// binary PPM/PGM file I/O.
//
// Images are channel-last [height, width, channels] tensors of doubles with
// the nominal pixel range [0, 1]. The container itself does not enforce the
// range or a minimum size; those invariants are enforced at the domain
// boundaries (file I/O, dataset generation, evaluation), because intermediate
// values (masks, difference images, test fixtures) legitimately fall outside
// them.

#include <optional>
#include <string>
#include <vector>

#include "p3mask/tensor.hpp"

namespace p3mask {

class Image {
public:
    Image() = default;

    Image(int height, int width, int channels, double fill = 0.0)
        : height_(height), width_(width), channels_(channels) {
        if (height < 1 || width < 1 || (channels != 1 && channels != 3)) {
            throw std::invalid_argument("image dimensions " + std::to_string(height) + "x" +
                                        std::to_string(width) + "x" + std::to_string(channels) +
                                        " invalid (channels must be 1 or 3)");
        }
        data_.assign(static_cast<std::size_t>(height) * width * channels, fill);
    }

    int height() const { return height_; }
    int width() const { return width_; }
    int channels() const { return channels_; }

    double& pixel(int y, int x, int c) {
        return data_[(static_cast<std::size_t>(y) * width_ + x) * channels_ + c];
    }
    double pixel(int y, int x, int c) const {
        return data_[(static_cast<std::size_t>(y) * width_ + x) * channels_ + c];
    }

    std::vector<double>& data() { return data_; }
    const std::vector<double>& data() const { return data_; }

    bool same_shape(const Image& o) const {
        return height_ == o.height_ && width_ == o.width_ && channels_ == o.channels_;
    }

    friend bool operator==(const Image& a, const Image& b) {
        return a.height_ == b.height_ && a.width_ == b.width_ && a.channels_ == b.channels_ &&
               a.data_ == b.data_;
    }

private:
    int height_ = 0;
    int width_ = 0;
    int channels_ = 0;
    std::vector<double> data_;
};

/// Square region of interest; `side` pixels starting at (top, left).
struct CropSpec {
    int top = 0;
    int left = 0;
    int side = 0;
};

/// Throws std::invalid_argument if the crop does not fit inside the image.
void validate_crop(const CropSpec& crop, const Image& img);

/// Extracts the square face region. Without an explicit crop the largest
/// centered square is used (top/left offsets rounded down).
Image face_crop(const Image& img, std::optional<CropSpec> crop = {});

/// Returns the crop rectangle face_crop would use.
CropSpec effective_crop(const Image& img, std::optional<CropSpec> crop = {});

/// Corner-aligned bilinear resize. A same-size resize returns the input
/// bit-for-bit.
Image resize_bilinear(const Image& img, int out_h, int out_w);

/// Snaps a value to the nearest multiple of 1/255 (ties away from zero).
double quantize_value(double v);

/// Elementwise 8-bit grid quantization of an image.
Image quantize(const Image& img);

/// Structural similarity between two same-shape images, dynamic range 1.0,
/// C1 = 0.01^2, C2 = 0.03^2. Uses an 11x11 Gaussian window (sigma 1.5) over
/// valid positions and averages the per-window map across channels; images
/// with min(height, width) < 11 fall back to global (whole-image) statistics.
double ssim(const Image& a, const Image& b);

/// The normalized 11x11 Gaussian window used by ssim, row-major, summing to 1.
/// Exposed so the differentiable SSIM assembles the identical weights.
const std::vector<double>& ssim_window_11();

/// Gaussian blur with standard deviation sigma > 0, symmetric-reflected
/// borders, kernel radius ceil(3*sigma). Output clamped to [0, 1].
Image gaussian_filter(const Image& img, double sigma);

/// k x k median filter (k odd, >= 1), symmetric-reflected borders. Output
/// clamped to [0, 1].
Image median_filter(const Image& img, int k);

/// JPEG-style degradation: per channel, 8x8 block DCT, quantization with the
/// standard luminance table scaled by `quality` in [1, 100], dequantization
/// and inverse DCT. Edge-replication padding to block multiples; no entropy
/// coding. Output clamped to [0, 1].
Image jpeg_filter(const Image& img, int quality);

/// Loads a binary PPM (P6) or PGM (P5) file with maxval 255. Rejects other
/// formats, other maxvals and images smaller than 8x8.
Image load_image(const std::string& path);

/// Writes a binary PPM (3 channels) or PGM (1 channel) with a canonical
/// header, quantizing pixel values to bytes. save followed by load reproduces
/// the image exactly, and re-saving a loaded file reproduces its bytes.
void save_image(const Image& img, const std::string& path);

/// Converts between channel-last images and the channel-first [C,H,W] tensors
/// used by the autodiff graph.
Tensor image_to_chw(const Image& img);
Image chw_to_image(const Tensor& t);

} // namespace p3mask
