#pragma once

#include <cstdint>
#include <vector>

#include "dtem/array.hpp"

namespace dtem::synth {

// Four-class toy classification task: each class lights up one quadrant of a
// 16x16 image with a bright structured patch at a random position inside the
// quadrant; the rest is pixel noise. Class-balanced and deterministic per
// seed.
struct SyntheticTask {
    std::uint64_t seed = 0;
    std::size_t image = 16;
    std::size_t classes = 4;
    std::size_t n_train = 512, n_val = 128, n_test = 256;
    double noise = 0.25;
};

struct Sample {
    DenseArray image;
    std::size_t label;
};

struct Dataset {
    std::vector<Sample> train, val, test;
};

Dataset generate(const SyntheticTask& task);

DenseArray one_hot(std::size_t label, std::size_t classes);

}  // namespace dtem::synth
