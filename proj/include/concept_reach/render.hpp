#pragma once

// Scene sampling and hard-edged rasterization of two coloured shapes on a
// black background. No anti-aliasing: every pixel is either background or one
// of the two pure shape colours, so colour counting downstream is exact.

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "concepts.hpp"
#include "image.hpp"
#include "rng.hpp"

namespace concept_reach {

inline constexpr std::array<std::array<uint8_t, 3>, 3> kColorRgb = {{
    {255, 0, 0},  // red
    {0, 255, 0},  // green
    {0, 0, 255},  // blue
}};

struct ShapeInstance {
    Shape kind;
    double cx, cy;  // center, px
    double size;    // characteristic size: circle diameter / square side / triangle width
};

struct SceneGeometry {
    ShapeInstance back;
    ShapeInstance front;
    Color c1, c2;
};

struct RenderParams {
    double back_size_min = 24.0, back_size_max = 32.0;
    double front_size_min = 20.0, front_size_max = 28.0;
    double neighborhood_factor = 0.6;   // front-center disk radius = factor * back size
    double min_visible_fraction = 0.45; // floor on the visible part of the back shape
    int max_attempts = 1000;
};

namespace detail {

// Half-extents of a shape's bounding box around its center.
inline void shape_extents(const ShapeInstance& s, double& ex, double& ey) {
    switch (s.kind) {
        case Shape::Circle:
            ex = ey = s.size / 2.0;
            return;
        case Shape::Square:
            ex = ey = s.size / 2.0;
            return;
        case Shape::Triangle: {
            // upward equilateral triangle of width `size`
            double h = s.size * std::sqrt(3.0) / 2.0;
            ex = s.size / 2.0;
            ey = h / 2.0;
            return;
        }
    }
    throw std::logic_error("bad Shape");
}

inline bool inside(const ShapeInstance& s, double x, double y) {
    double dx = x - s.cx, dy = y - s.cy;
    switch (s.kind) {
        case Shape::Circle: {
            double r = s.size / 2.0;
            return dx * dx + dy * dy <= r * r;
        }
        case Shape::Square: {
            double half = s.size / 2.0;
            return std::abs(dx) <= half && std::abs(dy) <= half;
        }
        case Shape::Triangle: {
            double h = s.size * std::sqrt(3.0) / 2.0;
            double top = -h / 2.0, bottom = h / 2.0;
            if (dy < top || dy > bottom) return false;
            // width shrinks linearly from `size` at the base to 0 at the apex
            double frac = (dy - top) / h;
            return std::abs(dx) <= frac * s.size / 2.0;
        }
    }
    throw std::logic_error("bad Shape");
}

inline bool in_frame(const ShapeInstance& s, int w, int h) {
    double ex, ey;
    shape_extents(s, ex, ey);
    return s.cx - ex >= 0.0 && s.cx + ex <= w && s.cy - ey >= 0.0 && s.cy + ey <= h;
}

inline long count_pixels(const ShapeInstance& s, int w, int h) {
    long n = 0;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            if (inside(s, x + 0.5, y + 0.5)) ++n;
    return n;
}

}  // namespace detail

// (back pixels not covered by front) / (back pixels drawn alone), by pixel
// counting on the two masks.
inline double visible_fraction(const SceneGeometry& g, int w = Image::kSize, int h = Image::kSize) {
    long back_total = 0, back_visible = 0;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double px = x + 0.5, py = y + 0.5;
            if (!detail::inside(g.back, px, py)) continue;
            ++back_total;
            if (!detail::inside(g.front, px, py)) ++back_visible;
        }
    if (back_total == 0) return 0.0;
    return double(back_visible) / double(back_total);
}

// Rejection-samples a scene: back shape uniform in-frame, front center uniform
// over a disk around the back center, resampled until the visibility and
// frame invariants hold.
inline SceneGeometry sample_geometry(const ConceptTuple& t, Rng& rng,
                                     const RenderParams& params = {}) {
    const int W = Image::kSize, H = Image::kSize;
    for (int attempt = 0; attempt < params.max_attempts; ++attempt) {
        SceneGeometry g;
        g.c1 = t.c1;
        g.c2 = t.c2;
        g.back.kind = t.s1;
        g.back.size = rng.uniform(params.back_size_min, params.back_size_max);
        double ex, ey;
        detail::shape_extents(g.back, ex, ey);
        if (2 * ex > W || 2 * ey > H) continue;
        g.back.cx = rng.uniform(ex, W - ex);
        g.back.cy = rng.uniform(ey, H - ey);

        g.front.kind = t.s2;
        g.front.size = rng.uniform(params.front_size_min, params.front_size_max);
        double radius = params.neighborhood_factor * g.back.size;
        double angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
        double r = radius * std::sqrt(rng.uniform());
        g.front.cx = g.back.cx + r * std::cos(angle);
        g.front.cy = g.back.cy + r * std::sin(angle);

        if (!detail::in_frame(g.front, W, H)) continue;
        if (detail::count_pixels(g.front, W, H) == 0) continue;
        double vis = visible_fraction(g);
        if (vis >= 1.0) continue;  // front must overlap back
        if (vis < params.min_visible_fraction) continue;
        return g;
    }
    throw std::runtime_error(
        "sample_geometry: rejection bound exceeded; size/neighborhood parameters infeasible");
}

// Deterministic rasterization: back shape in c1 first, front shape in c2 over it.
inline Image render(const SceneGeometry& g) {
    Image img;
    const auto& back_rgb = kColorRgb[size_t(g.c1)];
    const auto& front_rgb = kColorRgb[size_t(g.c2)];
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) {
            double px = x + 0.5, py = y + 0.5;
            if (detail::inside(g.front, px, py))
                img.set(x, y, front_rgb[0], front_rgb[1], front_rgb[2]);
            else if (detail::inside(g.back, px, py))
                img.set(x, y, back_rgb[0], back_rgb[1], back_rgb[2]);
        }
    return img;
}

}  // namespace concept_reach
