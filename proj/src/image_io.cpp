#include "dhformer/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <memory>

namespace dhformer {

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

}  // namespace

PngImage read_png(const std::string& path) {
    FilePtr fp(std::fopen(path.c_str(), "rb"));
    if (!fp) throw IoError("cannot open for reading: " + path);

    png_byte header[8];
    if (std::fread(header, 1, 8, fp.get()) != 8 || png_sig_cmp(header, 0, 8))
        throw FormatError("not a PNG file: " + path);

    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw IoError("png_create_read_struct failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_read_struct(&png, nullptr, nullptr);
        throw IoError("png_create_info_struct failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw FormatError("corrupt PNG data: " + path);
    }

    png_init_io(png, fp.get());
    png_set_sig_bytes(png, 8);
    png_read_info(png, info);

    png_uint_32 width = png_get_image_width(png, info);
    png_uint_32 height = png_get_image_height(png, info);
    int bit_depth = png_get_bit_depth(png, info);
    int color_type = png_get_color_type(png, info);

    if (color_type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color_type == PNG_COLOR_TYPE_GRAY && bit_depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (bit_depth == 16) png_set_swap(png);  // stream is big-endian; host is little
    png_read_update_info(png, info);

    bit_depth = png_get_bit_depth(png, info);
    color_type = png_get_color_type(png, info);

    PngImage img;
    img.width = static_cast<int>(width);
    img.height = static_cast<int>(height);
    img.bit_depth = bit_depth;
    if (color_type == PNG_COLOR_TYPE_GRAY) {
        img.channels = 1;
    } else if (color_type == PNG_COLOR_TYPE_RGB) {
        img.channels = 3;
    } else {
        png_destroy_read_struct(&png, &info, nullptr);
        throw FormatError("unsupported PNG color type " + std::to_string(color_type) + ": " +
                          path);
    }
    if (bit_depth != 8 && bit_depth != 16) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw FormatError("unsupported PNG bit depth " + std::to_string(bit_depth) + ": " + path);
    }
    if (bit_depth == 16 && img.channels != 1) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw FormatError("16-bit PNG supported for grayscale only: " + path);
    }

    img.samples.resize(img.sample_count());
    std::vector<png_byte> row(png_get_rowbytes(png, info));
    for (int y = 0; y < img.height; ++y) {
        png_read_row(png, row.data(), nullptr);
        uint16_t* dst = img.samples.data() + static_cast<int64_t>(y) * img.width * img.channels;
        if (bit_depth == 8) {
            for (int i = 0; i < img.width * img.channels; ++i) dst[i] = row[i];
        } else {
            const uint16_t* src = reinterpret_cast<const uint16_t*>(row.data());
            for (int i = 0; i < img.width * img.channels; ++i) dst[i] = src[i];
        }
    }
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return img;
}

void write_png(const std::string& path, const PngImage& img) {
    if (img.width <= 0 || img.height <= 0)
        throw ContractError("write_png on empty image");
    if (!((img.channels == 3 && img.bit_depth == 8) ||
          (img.channels == 1 && (img.bit_depth == 8 || img.bit_depth == 16))))
        throw ContractError("write_png supports rgb8, gray8, gray16 only");
    if (static_cast<int64_t>(img.samples.size()) != img.sample_count())
        throw ContractError("write_png sample buffer size mismatch");

    FilePtr fp(std::fopen(path.c_str(), "wb"));
    if (!fp) throw IoError("cannot open for writing: " + path);

    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw IoError("png_create_write_struct failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        throw IoError("png_create_info_struct failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IoError("PNG write failed: " + path);
    }

    png_init_io(png, fp.get());
    int color_type = img.channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY;
    png_set_IHDR(png, info, img.width, img.height, img.bit_depth, color_type,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    if (img.bit_depth == 16) png_set_swap(png);

    std::vector<png_byte> row(static_cast<size_t>(img.width) * img.channels *
                              (img.bit_depth / 8));
    for (int y = 0; y < img.height; ++y) {
        const uint16_t* src =
            img.samples.data() + static_cast<int64_t>(y) * img.width * img.channels;
        if (img.bit_depth == 8) {
            for (int i = 0; i < img.width * img.channels; ++i)
                row[i] = static_cast<png_byte>(src[i] & 0xff);
        } else {
            std::memcpy(row.data(), src, row.size());
        }
        png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

Tensor image_to_tensor(const PngImage& img) {
    if (img.channels != 3) throw ContractError("image_to_tensor expects 3-channel image");
    double scale = img.bit_depth == 8 ? 255.0 : 65535.0;
    Tensor t = Tensor::zeros({3, img.height, img.width});
    auto& d = t.raw();
    int64_t plane = static_cast<int64_t>(img.height) * img.width;
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < 3; ++c)
                d[c * plane + static_cast<int64_t>(y) * img.width + x] =
                    img.samples[(static_cast<int64_t>(y) * img.width + x) * 3 + c] / scale;
    return t;
}

PngImage tensor_to_image(const Tensor& t) {
    if (t.ndim() != 3 || t.dim(0) != 3)
        throw ContractError("tensor_to_image expects [3,H,W], got " + shape_str(t.shape()));
    PngImage img;
    img.height = t.dim(1);
    img.width = t.dim(2);
    img.channels = 3;
    img.bit_depth = 8;
    img.samples.resize(img.sample_count());
    const auto& d = t.values();
    int64_t plane = static_cast<int64_t>(img.height) * img.width;
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < 3; ++c) {
                double v = d[c * plane + static_cast<int64_t>(y) * img.width + x];
                v = std::min(1.0, std::max(0.0, v));
                img.samples[(static_cast<int64_t>(y) * img.width + x) * 3 + c] =
                    static_cast<uint16_t>(std::lround(v * 255.0));
            }
    return img;
}

Tensor depth_to_tensor(const PngImage& img) {
    if (img.channels != 1) throw ContractError("depth_to_tensor expects 1-channel image");
    uint16_t mx = 0;
    for (uint16_t s : img.samples) mx = std::max(mx, s);
    Tensor t = Tensor::zeros({1, img.height, img.width});
    if (mx == 0) return t;
    auto& d = t.raw();
    for (int64_t i = 0; i < img.sample_count(); ++i)
        d[i] = static_cast<double>(img.samples[i]) / static_cast<double>(mx);
    return t;
}

PngImage depth_to_png16(const Tensor& t) {
    if (t.ndim() != 3 || t.dim(0) != 1)
        throw ContractError("depth_to_png16 expects [1,H,W], got " + shape_str(t.shape()));
    PngImage img;
    img.height = t.dim(1);
    img.width = t.dim(2);
    img.channels = 1;
    img.bit_depth = 16;
    img.samples.resize(img.sample_count());
    const auto& d = t.values();
    for (int64_t i = 0; i < img.sample_count(); ++i) {
        double v = std::min(1.0, std::max(0.0, d[i]));
        img.samples[i] = static_cast<uint16_t>(std::lround(v * 65535.0));
    }
    return img;
}

}  // namespace dhformer
