#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dtem/vit.hpp"

namespace dtem::ppm {

struct Color {
    std::uint8_t r, g, b;
};

// Deterministic, well-separated palette: hue steps by the golden-ratio
// conjugate per group index.
Color palette(std::size_t group);

struct Image {
    std::size_t width = 0, height = 0;
    std::vector<Color> pixels;  // row-major

    Color& at(std::size_t x, std::size_t y) { return pixels[y * width + x]; }
    const Color& at(std::size_t x, std::size_t y) const { return pixels[y * width + x]; }
};

// Plain-text portable pixmap (P3), one pixel per line triplet.
std::string serialize(const Image& img);
void save(const Image& img, const std::string& path);

// Patch grid colored by final merge group, scaled up for visibility. The
// class token (group of the first trace entry) is not drawn; patch tokens
// start at trace index 1.
Image render_merge_map(const vit::ViTConfig& cfg, const vit::ForwardTrace& trace,
                       std::size_t cell = 12);

}  // namespace dtem::ppm
