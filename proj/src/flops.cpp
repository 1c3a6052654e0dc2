#include "dtem/flops.hpp"

#include <sstream>
#include <stdexcept>

namespace dtem::flops {

ModelSpec preset(const std::string& name) {
    ModelSpec s;
    s.name = name;
    if (name == "deit-t") {
        s.d = 192;
        s.heads = 3;
    } else if (name == "deit-s") {
        s.d = 384;
        s.heads = 6;
    } else if (name == "deit-b") {
        s.d = 768;
        s.heads = 12;
    } else if (name == "mae-l") {
        s.d = 1024;
        s.heads = 16;
        s.blocks = 24;
        s.d_prime = 128;
    } else if (name == "toy") {
        s.image = 16;
        s.patch = 2;
        s.channels = 1;
        s.d = 32;
        s.heads = 2;
        s.blocks = 4;
        s.classes = 4;
        s.d_prime = 8;
    } else {
        throw std::invalid_argument("unknown model preset: " + name);
    }
    return s;
}

std::vector<std::string> preset_names() { return {"deit-t", "deit-s", "deit-b", "mae-l", "toy"}; }

CostBreakdown vit_flops(const ModelSpec& spec, std::size_t r, bool with_dtem_embedding) {
    const double n0 = static_cast<double>(spec.tokens());
    const double d = static_cast<double>(spec.d);
    if (r * spec.blocks >= spec.tokens())
        throw std::invalid_argument("vit_flops: r*blocks >= token count");

    CostBreakdown c;
    c.patch_embed = n0 * static_cast<double>(spec.patch_dim()) * d;
    for (std::size_t l = 1; l <= spec.blocks; ++l) {
        // Merging sits between attention and the MLP.
        const double n_attn = n0 - static_cast<double>(r * (l - 1));
        const double n_mlp = n0 - static_cast<double>(r * l);
        c.attn_linear += 4.0 * n_attn * d * d;
        c.attn_quadratic += 2.0 * n_attn * n_attn * d;
        c.mlp += 2.0 * static_cast<double>(spec.mlp_ratio) * n_mlp * d * d;
        // r = 0 performs no grouping, so the token embedding is never evaluated.
        if (with_dtem_embedding && r > 0)
            c.embedding += n_attn * d * static_cast<double>(spec.d_prime);
    }
    c.head = d * static_cast<double>(spec.classes);
    return c;
}

std::vector<SweepRow> sweep(const ModelSpec& spec, const std::vector<std::size_t>& r_values,
                            bool with_dtem_embedding) {
    const double base = vit_flops(spec, 0, false).gflops();
    std::vector<SweepRow> rows;
    for (auto r : r_values) {
        double g = vit_flops(spec, r, with_dtem_embedding).gflops();
        rows.push_back({r, g, 100.0 * g / base});
    }
    return rows;
}

std::string sweep_csv(const std::vector<SweepRow>& rows) {
    std::ostringstream ss;
    ss << "r,gflops,pct_baseline\n";
    for (const auto& row : rows)
        ss << row.r << "," << row.gflops << "," << row.pct_baseline << "\n";
    return ss.str();
}

}  // namespace dtem::flops
