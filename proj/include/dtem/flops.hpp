#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace dtem::flops {

// Geometry of a standard ViT for the analytic cost model. Token count is
// (image/patch)^2 + 1 class token.
struct ModelSpec {
    std::string name;
    std::size_t image = 224, patch = 16, channels = 3;
    std::size_t d = 384, heads = 6, blocks = 12, mlp_ratio = 4, classes = 1000;
    std::size_t d_prime = 64;  // decoupled embedding width

    std::size_t tokens() const { return (image / patch) * (image / patch) + 1; }
    std::size_t patch_dim() const { return patch * patch * channels; }
};

// Built-in geometries: deit-t, deit-s, deit-b, mae-l, toy.
ModelSpec preset(const std::string& name);
std::vector<std::string> preset_names();

// One multiply-accumulate = one FLOP. Norms, softmax, biases and activations
// are excluded.
struct CostBreakdown {
    double patch_embed = 0;
    double attn_linear = 0;  // QKV + output projections
    double attn_quadratic = 0;
    double mlp = 0;
    double embedding = 0;  // decoupled embedding modules
    double head = 0;
    double total() const {
        return patch_embed + attn_linear + attn_quadratic + mlp + embedding + head;
    }
    double gflops() const { return total() / 1e9; }
};

CostBreakdown vit_flops(const ModelSpec& spec, std::size_t r, bool with_dtem_embedding);

struct SweepRow {
    std::size_t r;
    double gflops;
    double pct_baseline;
};
std::vector<SweepRow> sweep(const ModelSpec& spec, const std::vector<std::size_t>& r_values,
                            bool with_dtem_embedding);

// CSV with header "r,gflops,pct_baseline".
std::string sweep_csv(const std::vector<SweepRow>& rows);

}  // namespace dtem::flops
