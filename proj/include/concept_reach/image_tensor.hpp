#pragma once

// Image <-> tensor conversion; pixel values map linearly to [-1, 1].

#include <algorithm>
#include <cmath>

#include "image.hpp"
#include "tensor.hpp"

namespace concept_reach {

inline Tensor image_to_tensor(const Image& img) {
    Tensor t({3, img.height, img.width});
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) {
            const uint8_t* p = img.px(x, y);
            for (int c = 0; c < 3; ++c)
                t[(size_t(c) * img.height + y) * img.width + x] = real(p[c]) / real(127.5) - real(1);
        }
    return t;
}

inline Image tensor_to_image(const Tensor& t, size_t batch_index = 0) {
    int H = t.dim(int(t.shape.size()) - 2), W = t.dim(int(t.shape.size()) - 1);
    Image img(W, H);
    const real* base = t.ptr() + batch_index * 3 * size_t(H) * W;
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
            for (int c = 0; c < 3; ++c) {
                real v = (base[(size_t(c) * H + y) * W + x] + real(1)) * real(127.5);
                img.px(x, y)[c] = uint8_t(std::clamp<long>(std::lround(v), 0, 255));
            }
    return img;
}

}  // namespace concept_reach
