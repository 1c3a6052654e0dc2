#include "dtem/config.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace dtem::config {

namespace {

std::string trim(const std::string& s) {
    const char* ws = " \t\r\n";
    auto b = s.find_first_not_of(ws);
    if (b == std::string::npos) return "";
    auto e = s.find_last_not_of(ws);
    return s.substr(b, e - b + 1);
}

std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::size_t to_size(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        long long x = std::stoll(v, &pos);
        if (pos != v.size() || x < 0) throw std::invalid_argument(v);
        return (std::size_t)x;
    } catch (const std::exception&) {
        throw std::invalid_argument("config: key '" + key + "': expected non-negative integer, got '" + v + "'");
    }
}

double to_double(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        double x = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw std::invalid_argument("config: key '" + key + "': expected number, got '" + v + "'");
    }
}

bool to_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw std::invalid_argument("config: key '" + key + "': expected true/false, got '" + v + "'");
}

}  // namespace

const std::vector<std::pair<std::string, std::string>>& RunConfig::keys() {
    static const std::vector<std::pair<std::string, std::string>> k = {
        {"image", "input image side length in pixels"},
        {"patch", "patch side length in pixels"},
        {"channels", "input channels"},
        {"d", "transformer width"},
        {"heads", "attention heads"},
        {"blocks", "transformer blocks"},
        {"mlp_ratio", "MLP hidden width as a multiple of d"},
        {"classes", "output classes"},
        {"mode", "merge mode: none | hard-keys | hard-decoupled | soft-decoupled"},
        {"r", "tokens merged per block"},
        {"tau", "soft grouping temperature"},
        {"sim_scale", "similarity pre-scale divisor"},
        {"d_prime", "decoupled embedding width"},
        {"prop_attn", "proportional attention on/off"},
        {"precision", "numeric mode: f64 | f32"},
        {"seed", "master RNG seed"},
        {"seeds", "number of suite repetitions (gradcheck)"},
        {"n_train", "synthetic training samples"},
        {"n_val", "synthetic validation samples"},
        {"n_test", "synthetic test samples"},
        {"noise", "synthetic background noise amplitude"},
        {"train_mode", "training regime: modular | e2e"},
        {"epochs", "training epochs"},
        {"batch", "minibatch size"},
        {"r_train", "soft reduction rate for embedding updates"},
        {"r_backbone", "hard reduction rate for backbone updates"},
        {"alt_period", "steps per alternation cycle (1 embedding + rest backbone)"},
        {"lr_embed", "embedding learning rate"},
        {"lr_backbone", "backbone learning rate"},
        {"pretrain_epochs", "backbone pre-training epochs"},
        {"lr_pretrain", "backbone pre-training learning rate"},
        {"sweep_r", "comma-separated reduction rates for eval sweeps"},
        {"checkpoint", "model checkpoint path (input or output)"},
        {"out", "output path (metrics CSV, image, ...)"},
    };
    return k;
}

void RunConfig::set(const std::string& key, const std::string& value) {
    if (key == "image") image = to_size(key, value);
    else if (key == "patch") patch = to_size(key, value);
    else if (key == "channels") channels = to_size(key, value);
    else if (key == "d") d = to_size(key, value);
    else if (key == "heads") heads = to_size(key, value);
    else if (key == "blocks") blocks = to_size(key, value);
    else if (key == "mlp_ratio") mlp_ratio = to_size(key, value);
    else if (key == "classes") classes = to_size(key, value);
    else if (key == "mode") {
        vit::merge_mode_from_string(value);  // validates; throws on bad value
        mode = value;
    }
    else if (key == "r") r = to_size(key, value);
    else if (key == "tau") tau = to_double(key, value);
    else if (key == "sim_scale") sim_scale = to_double(key, value);
    else if (key == "d_prime") d_prime = to_size(key, value);
    else if (key == "prop_attn") prop_attn = to_bool(key, value);
    else if (key == "precision") {
        if (value != "f64" && value != "f32")
            throw std::invalid_argument("config: precision must be f64 or f32, got '" + value + "'");
        precision = value;
    }
    else if (key == "seed") seed = to_size(key, value);
    else if (key == "seeds") seeds = to_size(key, value);
    else if (key == "n_train") n_train = to_size(key, value);
    else if (key == "n_val") n_val = to_size(key, value);
    else if (key == "n_test") n_test = to_size(key, value);
    else if (key == "noise") noise = to_double(key, value);
    else if (key == "train_mode") {
        if (value != "modular" && value != "e2e")
            throw std::invalid_argument("config: train_mode must be modular or e2e, got '" + value + "'");
        train_mode = value;
    }
    else if (key == "epochs") epochs = to_size(key, value);
    else if (key == "batch") batch = to_size(key, value);
    else if (key == "r_train") r_train = to_size(key, value);
    else if (key == "r_backbone") r_backbone = to_size(key, value);
    else if (key == "alt_period") alt_period = to_size(key, value);
    else if (key == "lr_embed") lr_embed = to_double(key, value);
    else if (key == "lr_backbone") lr_backbone = to_double(key, value);
    else if (key == "pretrain_epochs") pretrain_epochs = to_size(key, value);
    else if (key == "lr_pretrain") lr_pretrain = to_double(key, value);
    else if (key == "sweep_r") sweep_r = value;
    else if (key == "checkpoint") checkpoint = value;
    else if (key == "out") out = value;
    else throw std::invalid_argument("config: unknown key '" + key + "'");
}

std::string RunConfig::get(const std::string& key) const {
    if (key == "image") return std::to_string(image);
    if (key == "patch") return std::to_string(patch);
    if (key == "channels") return std::to_string(channels);
    if (key == "d") return std::to_string(d);
    if (key == "heads") return std::to_string(heads);
    if (key == "blocks") return std::to_string(blocks);
    if (key == "mlp_ratio") return std::to_string(mlp_ratio);
    if (key == "classes") return std::to_string(classes);
    if (key == "mode") return mode;
    if (key == "r") return std::to_string(r);
    if (key == "tau") return fmt_double(tau);
    if (key == "sim_scale") return fmt_double(sim_scale);
    if (key == "d_prime") return std::to_string(d_prime);
    if (key == "prop_attn") return prop_attn ? "true" : "false";
    if (key == "precision") return precision;
    if (key == "seed") return std::to_string(seed);
    if (key == "seeds") return std::to_string(seeds);
    if (key == "n_train") return std::to_string(n_train);
    if (key == "n_val") return std::to_string(n_val);
    if (key == "n_test") return std::to_string(n_test);
    if (key == "noise") return fmt_double(noise);
    if (key == "train_mode") return train_mode;
    if (key == "epochs") return std::to_string(epochs);
    if (key == "batch") return std::to_string(batch);
    if (key == "r_train") return std::to_string(r_train);
    if (key == "r_backbone") return std::to_string(r_backbone);
    if (key == "alt_period") return std::to_string(alt_period);
    if (key == "lr_embed") return fmt_double(lr_embed);
    if (key == "lr_backbone") return fmt_double(lr_backbone);
    if (key == "pretrain_epochs") return std::to_string(pretrain_epochs);
    if (key == "lr_pretrain") return fmt_double(lr_pretrain);
    if (key == "sweep_r") return sweep_r;
    if (key == "checkpoint") return checkpoint;
    if (key == "out") return out;
    throw std::invalid_argument("config: unknown key '" + key + "'");
}

std::string RunConfig::serialize() const {
    std::ostringstream ss;
    for (const auto& [k, desc] : keys()) ss << k << "=" << get(k) << "\n";
    return ss.str();
}

RunConfig RunConfig::parse(const std::string& text) {
    RunConfig c;
    std::istringstream ss(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(ss, line)) {
        ++lineno;
        std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        auto eq = t.find('=');
        if (eq == std::string::npos)
            throw std::invalid_argument("config: line " + std::to_string(lineno) +
                                        ": expected key=value, got '" + t + "'");
        c.set(trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
    }
    return c;
}

RunConfig RunConfig::parse_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("config: cannot open '" + path + "'");
    std::ostringstream ss;
    ss << f.rdbuf();
    return parse(ss.str());
}

void RunConfig::save(const std::string& path) const {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("config: cannot write '" + path + "'");
    f << serialize();
}

std::vector<std::size_t> RunConfig::sweep_r_values() const {
    std::vector<std::size_t> out_v;
    std::istringstream ss(sweep_r);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        tok = trim(tok);
        if (!tok.empty()) out_v.push_back(to_size("sweep_r", tok));
    }
    if (out_v.empty()) throw std::invalid_argument("config: sweep_r is empty");
    return out_v;
}

vit::ViTConfig RunConfig::vit_config() const {
    vit::ViTConfig c;
    c.image = image;
    c.patch = patch;
    c.channels = channels;
    c.d = d;
    c.heads = heads;
    c.blocks = blocks;
    c.mlp_ratio = mlp_ratio;
    c.classes = classes;
    c.r = r;
    c.mode = vit::merge_mode_from_string(mode);
    c.tau = tau;
    c.sim_scale = sim_scale;
    c.d_prime = d_prime;
    c.prop_attn = prop_attn;
    c.validate();
    return c;
}

synth::SyntheticTask RunConfig::task() const {
    synth::SyntheticTask t;
    t.seed = seed;
    t.image = image;
    t.classes = classes;
    t.n_train = n_train;
    t.n_val = n_val;
    t.n_test = n_test;
    t.noise = noise;
    return t;
}

train::TrainConfig RunConfig::train_config() const {
    train::TrainConfig t;
    t.mode = train_mode == "e2e" ? train::TrainMode::e2e_alternating : train::TrainMode::modular;
    t.lr_embed = lr_embed;
    t.lr_backbone = lr_backbone;
    t.epochs = epochs;
    t.batch = batch;
    t.r_train = r_train;
    t.r_backbone = r_backbone;
    t.alt_period = alt_period;
    t.seed = seed;
    return t;
}

bool operator==(const RunConfig& a, const RunConfig& b) {
    for (const auto& [k, desc] : RunConfig::keys())
        if (a.get(k) != b.get(k)) return false;
    return true;
}

}  // namespace dtem::config
