// Scalar images with physical spacing.
#pragma once

#include <cstddef>
#include <stdexcept>
#include <vector>

#include "kpreg/tensor.hpp"

namespace kpreg {

// 2D (H x W) or 3D (D x H x W) scalar image. `spacing_mm` is in physical
// axis order (x, y[, z]) with x the fastest-varying storage axis. Pixel
// (x, y, z) sits at physical position (x * sx, y * sy, z * sz).
struct ScalarImage {
    Tensor pixels;
    std::vector<double> spacing_mm;

    std::size_t rank() const { return pixels.ndim(); }

    // Extent along physical axis a (0 = x).
    std::size_t extent(std::size_t axis) const { return pixels.dim(pixels.ndim() - 1 - axis); }

    std::vector<std::size_t> extents_xyz() const {
        std::vector<std::size_t> e(rank());
        for (std::size_t a = 0; a < rank(); ++a) {
            e[a] = extent(a);
        }
        return e;
    }

    float at(std::size_t x, std::size_t y) const { return pixels[y * extent(0) + x]; }
    float at(std::size_t x, std::size_t y, std::size_t z) const {
        return pixels[(z * extent(1) + y) * extent(0) + x];
    }

    void validate() const {
        if (rank() != 2 && rank() != 3) {
            throw ShapeError("images must be 2D or 3D, got " + shape_str(pixels.shape()));
        }
        if (spacing_mm.size() != rank()) {
            throw std::invalid_argument("spacing must have one entry per image axis");
        }
        for (double s : spacing_mm) {
            if (!(s > 0.0)) {
                throw std::invalid_argument("spacing must be positive");
            }
        }
    }
};

} // namespace kpreg
