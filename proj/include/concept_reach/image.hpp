#pragma once

// 64x64 RGB images and lossless PNG round-tripping (libpng).

#include <array>
#include <cstdint>
#include <cstdio>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include <png.h>

namespace concept_reach {

struct Image {
    static constexpr int kSize = 64;
    int width = kSize;
    int height = kSize;
    std::vector<uint8_t> pixels;  // row-major RGB

    Image() : pixels(size_t(kSize) * kSize * 3, 0) {}
    Image(int w, int h) : width(w), height(h), pixels(size_t(w) * h * 3, 0) {}

    uint8_t* px(int x, int y) { return &pixels[(size_t(y) * width + x) * 3]; }
    const uint8_t* px(int x, int y) const { return &pixels[(size_t(y) * width + x) * 3]; }

    void set(int x, int y, uint8_t r, uint8_t g, uint8_t b) {
        auto* p = px(x, y);
        p[0] = r;
        p[1] = g;
        p[2] = b;
    }

    bool operator==(const Image& o) const {
        return width == o.width && height == o.height && pixels == o.pixels;
    }
};

namespace detail {
struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
}  // namespace detail

inline void write_png(const Image& img, const std::string& path) {
    std::unique_ptr<std::FILE, detail::FileCloser> fp(std::fopen(path.c_str(), "wb"));
    if (!fp) throw std::runtime_error("write_png: cannot open " + path);

    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (!png || !info || setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw std::runtime_error("write_png: libpng failure for " + path);
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, img.width, img.height, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (int y = 0; y < img.height; ++y)
        png_write_row(png, const_cast<png_bytep>(img.px(0, y)));
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

inline Image read_png(const std::string& path) {
    std::unique_ptr<std::FILE, detail::FileCloser> fp(std::fopen(path.c_str(), "rb"));
    if (!fp) throw std::runtime_error("read_png: cannot open " + path);

    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (!png || !info || setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw std::runtime_error("read_png: libpng failure for " + path);
    }
    png_init_io(png, fp.get());
    png_read_info(png, info);
    png_set_expand(png);
    png_set_strip_16(png);
    png_set_strip_alpha(png);
    if (png_get_color_type(png, info) == PNG_COLOR_TYPE_GRAY ||
        png_get_color_type(png, info) == PNG_COLOR_TYPE_GRAY_ALPHA)
        png_set_gray_to_rgb(png);
    png_read_update_info(png, info);

    Image img(int(png_get_image_width(png, info)), int(png_get_image_height(png, info)));
    for (int y = 0; y < img.height; ++y) png_read_row(png, img.px(0, y), nullptr);
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return img;
}

}  // namespace concept_reach
