#include "png_sheet.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>
#include <stdexcept>
#include <vector>

namespace latent_unlearn {

void write_png(const Image& img, const std::filesystem::path& path) {
    if (img.n() != 1 || img.c() != 3) throw std::invalid_argument("write_png: need one RGB image, got " + img.shape().str());
    const int H = img.h(), W = img.w();
    std::vector<png_byte> rgb(static_cast<std::size_t>(H) * W * 3);
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                const double v = std::clamp(img.data()[(static_cast<std::size_t>(c) * H + y) * W + x], -1.0, 1.0);
                rgb[(static_cast<std::size_t>(y) * W + x) * 3 + c] = static_cast<png_byte>(std::lround((v + 1.0) * 127.5));
            }

    std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.c_str(), "wb"), &std::fclose);
    if (!fp) throw std::runtime_error("cannot open " + path.string());
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        throw std::runtime_error("libpng init failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw std::runtime_error("libpng failed writing " + path.string());
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, W, H, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    std::vector<png_bytep> rows(H);
    for (int y = 0; y < H; ++y) rows[y] = rgb.data() + static_cast<std::size_t>(y) * W * 3;
    png_set_rows(png, info, rows.data());
    png_write_png(png, info, PNG_TRANSFORM_IDENTITY, nullptr);
    png_destroy_write_struct(&png, &info);
}

}  // namespace latent_unlearn
