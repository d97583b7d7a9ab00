#pragma once
#include <cstdint>
#include <string>
#include <vector>

#include "dhformer/tensor.hpp"

namespace dhformer {

// Decoded PNG, row-major with interleaved channels. Samples are widened to
// uint16 regardless of bit depth so one buffer type serves both 8-bit color
// and 16-bit depth data.
struct PngImage {
    int width = 0;
    int height = 0;
    int channels = 0;   // 1 (gray) or 3 (rgb)
    int bit_depth = 0;  // 8 or 16
    std::vector<uint16_t> samples;

    int64_t sample_count() const {
        return static_cast<int64_t>(width) * height * channels;
    }
};

// Supported forms: 8-bit RGB, 8-bit gray, 16-bit gray. Palette images are
// expanded; alpha and other layouts are rejected with FormatError.
PngImage read_png(const std::string& path);
void write_png(const std::string& path, const PngImage& img);

// [3,H,W] in [0,1]; samples divided by the bit-depth maximum.
Tensor image_to_tensor(const PngImage& img);
// Rounds to 8-bit RGB; input values clamped to [0,1] first.
PngImage tensor_to_image(const Tensor& t);

// [1,H,W] scaled by the image's own maximum sample; an all-zero image maps
// to all zeros.
Tensor depth_to_tensor(const PngImage& img);
// 16-bit gray; input in [0,1], scaled to [0,65535] and rounded.
PngImage depth_to_png16(const Tensor& t);

}  // namespace dhformer
