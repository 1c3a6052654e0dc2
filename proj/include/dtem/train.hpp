#pragma once

#include <string>
#include <vector>

#include "dtem/flops.hpp"
#include "dtem/synthetic.hpp"
#include "dtem/vit.hpp"

namespace dtem::train {

enum class TrainMode { modular, e2e_alternating };

struct TrainConfig {
    TrainMode mode = TrainMode::modular;
    double lr_embed = 1e-4;
    double lr_backbone = 1e-4;
    std::size_t epochs = 10;
    std::size_t batch = 16;
    std::size_t r_train = 8;     // soft reduction rate for embedding updates
    std::size_t r_backbone = 8;  // hard reduction rate for backbone updates
    std::size_t alt_period = 10;  // 1 embedding step per (alt_period - 1) backbone steps
    std::uint64_t seed = 0;
};

struct MetricRow {
    std::size_t epoch;
    std::string split;
    double acc;
    double loss;
};
std::string metrics_csv(const std::vector<MetricRow>& rows);

struct Model {
    vit::ViTConfig cfg;
    vit::ViTParams vit;
    vit::EmbeddingStack emb;
};

// Accuracy/loss of the model under the merge mode in cfg.
struct EvalResult {
    double acc;
    double loss;
};
EvalResult evaluate(const vit::ViTConfig& cfg, const vit::ViTParams& params,
                    const vit::EmbeddingStack& emb, const std::vector<synth::Sample>& data);

// Plain backbone training with merge mode none (the pre-trained starting
// point for both DTEM regimes).
vit::ViTParams pretrain_backbone(const vit::ViTConfig& cfg, const synth::Dataset& data,
                                 std::size_t epochs, double lr, std::uint64_t seed);

// Modular: soft-decoupled forwards, embedding-only adaptive-moment updates.
// The backbone arrays are never written.
std::vector<MetricRow> train_modular(Model& model, const synth::Dataset& data,
                                     const TrainConfig& tc);

// Alternating end-to-end: within every alt_period steps the first uses soft
// operators and updates the embeddings, the rest use hard operators and
// update the backbone. Counts of each step kind are returned via the metrics.
struct E2EStats {
    std::size_t embed_steps = 0;
    std::size_t backbone_steps = 0;
};
std::vector<MetricRow> train_e2e(Model& model, const synth::Dataset& data, const TrainConfig& tc,
                                 E2EStats* stats = nullptr);

// Hard-decoupled evaluation across reduction rates, with the analytic cost
// of the matching toy geometry.
struct SweepRow {
    std::size_t r;
    double acc;
    double gflops;
};
std::vector<SweepRow> eval_sweep(const Model& model, const std::vector<synth::Sample>& data,
                                 const std::vector<std::size_t>& r_values);
std::string sweep_csv(const std::vector<SweepRow>& rows);

}  // namespace dtem::train
