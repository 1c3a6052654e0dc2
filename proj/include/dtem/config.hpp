#pragma once

#include <string>
#include <vector>

#include "dtem/synthetic.hpp"
#include "dtem/train.hpp"
#include "dtem/vit.hpp"

namespace dtem::config {

// Flat key=value run configuration. Every key has a default; unknown keys are
// a hard error. parse(serialize(c)) reproduces c exactly.
struct RunConfig {
    // model geometry
    std::size_t image = 16, patch = 2, channels = 1;
    std::size_t d = 32, heads = 2, blocks = 4, mlp_ratio = 4, classes = 4;
    // merging
    std::string mode = "hard-decoupled";
    std::size_t r = 8;
    double tau = 0.1;
    double sim_scale = 0.1;
    std::size_t d_prime = 8;
    bool prop_attn = true;
    std::string precision = "f64";
    // synthetic task
    std::uint64_t seed = 0;
    std::size_t seeds = 1;  // suite repetitions for gradcheck
    std::size_t n_train = 512, n_val = 128, n_test = 256;
    double noise = 0.25;
    // training
    std::string train_mode = "modular";  // modular | e2e
    std::size_t epochs = 10, batch = 16;
    std::size_t r_train = 8, r_backbone = 8, alt_period = 10;
    double lr_embed = 1e-4, lr_backbone = 1e-4;
    std::size_t pretrain_epochs = 10;
    double lr_pretrain = 1e-3;
    // sweep
    std::string sweep_r = "0,2,4,6,8";
    // paths
    std::string checkpoint, out;

    // Key registry (name + one-line description), in serialization order.
    static const std::vector<std::pair<std::string, std::string>>& keys();

    void set(const std::string& key, const std::string& value);  // throws on unknown key
    std::string get(const std::string& key) const;               // throws on unknown key

    std::string serialize() const;
    static RunConfig parse(const std::string& text);
    static RunConfig parse_file(const std::string& path);
    void save(const std::string& path) const;

    std::vector<std::size_t> sweep_r_values() const;

    vit::ViTConfig vit_config() const;
    synth::SyntheticTask task() const;
    train::TrainConfig train_config() const;
};

bool operator==(const RunConfig& a, const RunConfig& b);

}  // namespace dtem::config
