#pragma once

#include <trajflow/tensor.hpp>

#include <algorithm>
#include <cmath>
#include <string>

namespace trajflow {

/// C×H×W image with values nominally in [0, 1].
class ImageTensor {
public:
    ImageTensor() = default;

    ImageTensor(std::size_t channels, std::size_t height, std::size_t width, double fill = 0.0)
        : pixels_(Shape{channels, height, width}, fill) {}

    explicit ImageTensor(Tensor pixels) : pixels_(std::move(pixels)) {
        if (pixels_.rank() != 3) {
            throw DimensionError("image: expected C×H×W tensor, got " + shape_str(pixels_.shape()));
        }
    }

    std::size_t channels() const { return pixels_.shape()[0]; }
    std::size_t height() const { return pixels_.shape()[1]; }
    std::size_t width() const { return pixels_.shape()[2]; }
    std::size_t numel() const { return pixels_.size(); }

    double& at(std::size_t c, std::size_t y, std::size_t x) { return pixels_[(c * height() + y) * width() + x]; }
    double at(std::size_t c, std::size_t y, std::size_t x) const {
        return pixels_[(c * height() + y) * width() + x];
    }

    const Tensor& tensor() const noexcept { return pixels_; }
    Tensor& tensor() noexcept { return pixels_; }

    /// Flattened 1×(C·H·W) row, the network input layout.
    Tensor as_row() const { return pixels_.reshaped({1, pixels_.size()}); }

    static ImageTensor from_row(const Tensor& row, std::size_t channels, std::size_t height, std::size_t width) {
        return ImageTensor(row.reshaped({channels, height, width}));
    }

    ImageTensor clamped() const {
        ImageTensor out = *this;
        for (double& v : out.pixels_.data()) {
            v = std::clamp(v, 0.0, 1.0);
        }
        return out;
    }

    bool same_shape(const ImageTensor& o) const { return pixels_.shape() == o.pixels_.shape(); }

    bool operator==(const ImageTensor& o) const = default;

private:
    Tensor pixels_;
};

/// Flips and transposes of a flattened C×H×W row. Bit 0 mirrors x, bit 1
/// mirrors y, bit 2 transposes (square images only).
inline Tensor dihedral_row(const Tensor& row, unsigned k, std::size_t channels, std::size_t height,
                           std::size_t width) {
    if (row.size() != channels * height * width) {
        throw DimensionError("dihedral_row: row of " + std::to_string(row.size()) + " values for " +
                             std::to_string(channels) + "x" + std::to_string(height) + "x" + std::to_string(width));
    }
    if ((k & 4u) && height != width) {
        throw ContractError("dihedral_row: transpose needs a square image");
    }
    Tensor out(row.shape());
    for (std::size_t c = 0; c < channels; ++c) {
        const std::size_t base = c * height * width;
        for (std::size_t y = 0; y < height; ++y) {
            for (std::size_t x = 0; x < width; ++x) {
                std::size_t sy = (k & 2u) ? height - 1 - y : y;
                std::size_t sx = (k & 1u) ? width - 1 - x : x;
                if (k & 4u) {
                    std::swap(sx, sy);
                }
                out[base + y * width + x] = row[base + sy * width + sx];
            }
        }
    }
    return out;
}

inline double image_mse(const ImageTensor& a, const ImageTensor& b) {
    if (!a.same_shape(b)) {
        throw DimensionError("image_mse: shape mismatch " + shape_str(a.tensor().shape()) + " vs " +
                             shape_str(b.tensor().shape()));
    }
    double s = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) {
        const double d = a.tensor()[i] - b.tensor()[i];
        s += d * d;
    }
    return s / static_cast<double>(a.numel());
}

inline constexpr double kPsnrCapDb = 99.0;

/// PSNR with peak 1.0, capped at 99 dB (identical images hit the cap).
inline double psnr(const ImageTensor& a, const ImageTensor& b) {
    const double mse = image_mse(a, b);
    if (mse == 0.0) {
        return kPsnrCapDb;
    }
    return std::min(kPsnrCapDb, 10.0 * std::log10(1.0 / mse));
}

}  // namespace trajflow
