#include "dtem/checkpoint.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

namespace dtem::checkpoint {

const DenseArray& Checkpoint::array(const std::string& name) const {
    for (const auto& [n, a] : arrays)
        if (n == name) return a;
    throw std::out_of_range("checkpoint: missing array " + name);
}

std::int64_t Checkpoint::meta_at(const std::string& key) const {
    auto it = meta.find(key);
    if (it == meta.end()) throw std::out_of_range("checkpoint: missing meta " + key);
    return it->second;
}

void save(const Checkpoint& c, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("checkpoint: cannot open " + path + " for writing");
    f << "dtem-checkpoint v1\n";
    f << "kind " << c.kind << "\n";
    for (const auto& [k, v] : c.meta) f << "meta " << k << " " << v << "\n";
    for (const auto& [name, a] : c.arrays) {
        f << "array " << name << " " << a.rank();
        for (auto e : a.shape) f << " " << e;
        f << "\n";
    }
    f << "binary\n";
    for (const auto& [name, a] : c.arrays)
        f.write(reinterpret_cast<const char*>(a.data.data()),
                static_cast<std::streamsize>(a.numel() * sizeof(double)));
    if (!f) throw std::runtime_error("checkpoint: write failed for " + path);
}

Checkpoint load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("checkpoint: cannot open " + path);
    std::string line;
    if (!std::getline(f, line) || line != "dtem-checkpoint v1")
        throw std::runtime_error("checkpoint: bad magic in " + path);
    Checkpoint c;
    std::vector<std::vector<std::size_t>> shapes;
    while (std::getline(f, line)) {
        if (line == "binary") break;
        std::istringstream ss(line);
        std::string tag;
        ss >> tag;
        if (tag == "kind") {
            ss >> c.kind;
        } else if (tag == "meta") {
            std::string k;
            std::int64_t v;
            ss >> k >> v;
            c.meta[k] = v;
        } else if (tag == "array") {
            std::string name;
            std::size_t rank;
            ss >> name >> rank;
            std::vector<std::size_t> shape(rank);
            for (auto& e : shape) ss >> e;
            if (!ss) throw std::runtime_error("checkpoint: bad array line in " + path);
            c.arrays.emplace_back(name, DenseArray(shape));
        } else {
            throw std::runtime_error("checkpoint: unknown header line: " + line);
        }
    }
    for (auto& [name, a] : c.arrays) {
        f.read(reinterpret_cast<char*>(a.data.data()),
               static_cast<std::streamsize>(a.numel() * sizeof(double)));
        if (!f) throw std::runtime_error("checkpoint: truncated payload in " + path);
    }
    return c;
}

}  // namespace dtem::checkpoint
