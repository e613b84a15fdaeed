#pragma once

#include <filesystem>

#include "latent_unlearn/synthdata.hpp"

namespace latent_unlearn {

// 8-bit RGB PNG of a (1, 3, H, W) image with values in [-1, 1].
void write_png(const Image& img, const std::filesystem::path& path);

}  // namespace latent_unlearn
