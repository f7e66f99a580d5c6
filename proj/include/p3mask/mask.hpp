#pragma once

// The per-identity protection mask: a small signed perturbation field with an
// L-infinity budget. Training produces it, the protect module applies and
// removes it, and the key file format serializes it.

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

#include "p3mask/image.hpp"

namespace p3mask {

struct P3Mask {
    Image values;                  // [height, width, channels], each in [-epsilon, epsilon]
    double epsilon = 0.063;
    std::string owner_id;
    std::uint64_t creation_seed = 0;

    /// Throws std::invalid_argument if the budget is non-positive, any value
    /// exceeds it, or any value is non-finite.
    void validate() const {
        if (!(epsilon > 0.0)) {
            throw std::invalid_argument("mask budget must be positive, got " +
                                        std::to_string(epsilon));
        }
        for (double v : values.data()) {
            if (!std::isfinite(v) || std::fabs(v) > epsilon) {
                throw std::invalid_argument("mask value " + std::to_string(v) +
                                            " outside budget [-" + std::to_string(epsilon) + ", " +
                                            std::to_string(epsilon) + "]");
            }
        }
    }
};

} // namespace p3mask
