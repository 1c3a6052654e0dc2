#include "dtem/ppm.hpp"

#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace dtem::ppm {

namespace {

Color hsv(double h, double s, double v) {
    h = h - std::floor(h);
    double c = v * s;
    double hp = h * 6.0;
    double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
    double r = 0, g = 0, b = 0;
    if (hp < 1) { r = c; g = x; }
    else if (hp < 2) { r = x; g = c; }
    else if (hp < 3) { g = c; b = x; }
    else if (hp < 4) { g = x; b = c; }
    else if (hp < 5) { r = x; b = c; }
    else { r = c; b = x; }
    double m = v - c;
    auto q = [m](double t) { return (std::uint8_t)std::lround((t + m) * 255.0); };
    return {q(r), q(g), q(b)};
}

}  // namespace

Color palette(std::size_t group) {
    const double golden = 0.61803398874989484820;
    double h = std::fmod(0.12 + golden * (double)group, 1.0);
    // Alternate saturation/value slightly so adjacent indices stay distinct
    // even with similar hues.
    double s = group % 2 == 0 ? 0.85 : 0.60;
    double v = group % 3 == 0 ? 0.95 : 0.75;
    return hsv(h, s, v);
}

std::string serialize(const Image& img) {
    std::ostringstream ss;
    ss << "P3\n" << img.width << " " << img.height << "\n255\n";
    for (const auto& p : img.pixels)
        ss << (int)p.r << " " << (int)p.g << " " << (int)p.b << "\n";
    return ss.str();
}

void save(const Image& img, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("pixmap: cannot write '" + path + "'");
    f << serialize(img);
}

Image render_merge_map(const vit::ViTConfig& cfg, const vit::ForwardTrace& trace,
                       std::size_t cell) {
    if (trace.group_of_token.size() != cfg.tokens())
        throw std::invalid_argument("pixmap: trace does not cover every token (soft mode?)");
    const std::size_t grid = cfg.grid();
    Image img;
    img.width = grid * cell;
    img.height = grid * cell;
    img.pixels.assign(img.width * img.height, Color{0, 0, 0});
    for (std::size_t gy = 0; gy < grid; ++gy)
        for (std::size_t gx = 0; gx < grid; ++gx) {
            std::size_t token = 1 + gy * grid + gx;  // token 0 is the class token
            Color c = palette(trace.group_of_token[token]);
            for (std::size_t y = 0; y < cell; ++y)
                for (std::size_t x = 0; x < cell; ++x) {
                    // 1px dark border so group boundaries stay readable.
                    bool border = x == 0 || y == 0 || x == cell - 1 || y == cell - 1;
                    img.at(gx * cell + x, gy * cell + y) =
                        border ? Color{32, 32, 32} : c;
                }
        }
    return img;
}

}  // namespace dtem::ppm
