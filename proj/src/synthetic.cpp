#include "dtem/synthetic.hpp"

#include <random>
#include <stdexcept>

namespace dtem::synth {

namespace {

Sample make_sample(std::mt19937_64& rng, const SyntheticTask& task, std::size_t label) {
    const std::size_t n = task.image, half = n / 2;
    std::uniform_real_distribution<double> noise(-task.noise, task.noise);
    DenseArray img({n, n});
    for (double& v : img.data) v = noise(rng);

    // Quadrant per class: 0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right.
    const std::size_t qy = (label / 2) * half, qx = (label % 2) * half;
    const std::size_t pat = 4;
    std::uniform_int_distribution<std::size_t> off(0, half - pat);
    const std::size_t oy = qy + off(rng), ox = qx + off(rng);
    // Bright square with a brighter diagonal.
    for (std::size_t y = 0; y < pat; ++y)
        for (std::size_t x = 0; x < pat; ++x)
            img.at(oy + y, ox + x) = (y == x) ? 1.5 : 1.0;
    return {std::move(img), label};
}

std::vector<Sample> make_split(std::mt19937_64& rng, const SyntheticTask& task, std::size_t n) {
    std::vector<Sample> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) out.push_back(make_sample(rng, task, i % task.classes));
    return out;
}

}  // namespace

Dataset generate(const SyntheticTask& task) {
    if (task.classes != 4) throw std::invalid_argument("synthetic task: 4 classes only");
    std::mt19937_64 rng(task.seed);
    Dataset d;
    d.train = make_split(rng, task, task.n_train);
    d.val = make_split(rng, task, task.n_val);
    d.test = make_split(rng, task, task.n_test);
    return d;
}

DenseArray one_hot(std::size_t label, std::size_t classes) {
    DenseArray t({1, classes});
    t.data[label] = 1.0;
    return t;
}

}  // namespace dtem::synth
