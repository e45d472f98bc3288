#pragma once

// Coordinated crops across pyramid levels. Levels are numbered base-up: the
// base level (0) is never cropped; a half-extent square is chosen in base
// coordinates and every higher level crops the same region, scaled by 2^j.

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "layerdiff/numerics/tensor.hpp"
#include "layerdiff/rng.hpp"

namespace layerdiff {

struct Rect {
    std::int64_t x = 0, y = 0, w = 0, h = 0;

    Rect scaled(std::int64_t s) const { return Rect{x * s, y * s, w * s, h * s}; }
    bool inside(std::int64_t width, std::int64_t height) const {
        return x >= 0 && y >= 0 && w > 0 && h > 0 && x + w <= width && y + h <= height;
    }
    bool operator==(const Rect&) const = default;
};

struct CropPlan {
    int base_resolution = 0;
    Rect base_rect;                  // in base-level coordinates
    std::vector<Rect> image_rects;   // per level; level 0 covers the whole base image
    std::vector<Rect> feature_rects; // per level j < top: crop of level j's up-path tensor before upsampling

    int num_levels() const { return static_cast<int>(image_rects.size()); }

    /// Spatial extent of the (possibly cropped) input at `level`.
    std::int64_t extent(int level) const {
        return level == 0 ? base_resolution : image_rects[static_cast<std::size_t>(level)].w;
    }

    void validate() const {
        if (image_rects.empty()) throw std::invalid_argument("crop plan: no levels");
        for (int j = 0; j < num_levels(); ++j) {
            const std::int64_t res = std::int64_t{base_resolution} << j;
            if (!image_rects[static_cast<std::size_t>(j)].inside(res, res)) {
                throw std::invalid_argument("crop plan: level " + std::to_string(j) + " rect out of bounds");
            }
            if (j >= 1 && !(image_rects[static_cast<std::size_t>(j)] == base_rect.scaled(std::int64_t{1} << j))) {
                throw std::invalid_argument("crop plan: level " + std::to_string(j) + " rect breaks the doubling rule");
            }
        }
        if (feature_rects.size() + 1 != image_rects.size()) {
            throw std::invalid_argument("crop plan: need one feature rect per upsampling transition");
        }
    }
};

namespace detail {

inline CropPlan plan_from_base_rect(int base_resolution, int num_levels, Rect base) {
    CropPlan plan;
    plan.base_resolution = base_resolution;
    plan.base_rect = base;
    plan.image_rects.push_back(Rect{0, 0, base_resolution, base_resolution});
    for (int j = 1; j < num_levels; ++j) plan.image_rects.push_back(base.scaled(std::int64_t{1} << j));
    for (int j = 0; j + 1 < num_levels; ++j) {
        // The base tensor is full size, so the base rect selects the region;
        // higher up-path tensors already cover exactly the cropped region.
        if (j == 0) plan.feature_rects.push_back(base);
        else plan.feature_rects.push_back(Rect{0, 0, base.w << j, base.h << j});
    }
    plan.validate();
    return plan;
}

}  // namespace detail

/// Half-extent square at a uniformly random even offset in the base image.
inline CropPlan make_crop_plan(Rng& rng, int base_resolution, int num_levels) {
    if (base_resolution < 4 || base_resolution % 4 != 0) {
        throw std::invalid_argument("make_crop_plan: base resolution must be a multiple of 4");
    }
    if (num_levels < 1) throw std::invalid_argument("make_crop_plan: num_levels must be >= 1");
    const std::int64_t side = base_resolution / 2;
    const std::int64_t positions = (base_resolution - side) / 2 + 1;  // even offsets 0, 2, ..., res - side
    const std::int64_t x = 2 * static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(positions)));
    const std::int64_t y = 2 * static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(positions)));
    return detail::plan_from_base_rect(base_resolution, num_levels, Rect{x, y, side, side});
}

inline CropPlan crop_plan_from_rect(int base_resolution, int num_levels, Rect base) {
    return detail::plan_from_base_rect(base_resolution, num_levels, base);
}

/// A plan whose crops cover every level completely.
inline CropPlan full_crop_plan(int base_resolution, int num_levels) {
    return detail::plan_from_base_rect(base_resolution, num_levels, Rect{0, 0, base_resolution, base_resolution});
}

/// Crops the last two axes of a tensor.
template <typename T>
Tensor<T> crop_tensor(const Tensor<T>& t, const Rect& r) {
    const auto& s = t.shape();
    if (s.size() < 2) throw ShapeError("crop_tensor: need two spatial axes");
    const std::int64_t h = s[s.size() - 2], w = s[s.size() - 1];
    if (!r.inside(w, h)) throw ShapeError("crop_tensor: rect outside " + shape_str(s));
    Shape ns = s;
    ns[ns.size() - 2] = r.h;
    ns[ns.size() - 1] = r.w;
    Tensor<T> out(ns);
    const std::int64_t planes = static_cast<std::int64_t>(t.size()) / (h * w);
    for (std::int64_t p = 0; p < planes; ++p) {
        for (std::int64_t i = 0; i < r.h; ++i) {
            const T* src = t.data() + (p * h + r.y + i) * w + r.x;
            std::copy(src, src + r.w, out.data() + (p * r.h + i) * r.w);
        }
    }
    return out;
}

}  // namespace layerdiff
