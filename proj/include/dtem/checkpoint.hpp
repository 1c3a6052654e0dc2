#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "dtem/array.hpp"

namespace dtem::checkpoint {

// Checkpoint file: short text header (kind, integer metadata, array shapes)
// followed by the raw 64-bit reals of every array in listed order.
//
//   dtem-checkpoint v1
//   kind <string>
//   meta <key> <int>          (any number of lines)
//   array <name> <rank> <extents...>
//   binary
//   <doubles>
struct Checkpoint {
    std::string kind;
    std::map<std::string, std::int64_t> meta;
    std::vector<std::pair<std::string, DenseArray>> arrays;

    const DenseArray& array(const std::string& name) const;
    std::int64_t meta_at(const std::string& key) const;
};

void save(const Checkpoint& c, const std::string& path);
Checkpoint load(const std::string& path);

}  // namespace dtem::checkpoint
