#pragma once

#include <string>
#include <vector>

#include "dtem/merge.hpp"

namespace dtem::conformance {

// One grouping test vector: a bipartite similarity matrix plus either the
// expected hard matching (checked exactly) or the expected soft adjacency
// (checked entrywise within tol). File grammar (line-oriented, '#' comments):
//
//   case <name>
//   r <int>
//   tau <float>            # optional, default 0.1; used by adjacency checks
//   tol <float>            # optional, default 1e-6; adjacency comparison
//   matrix <na> <nb>
//   <na> rows of <nb> similarity values
//   expect edges           # or: expect adjacency
//   <a> <b>                # one matched pair per line (edges)
//   <na> rows of <nb> values (adjacency)
//   end
struct Case {
    std::string name;
    std::size_t r = 0;
    double tau = 0.1;
    double tol = 1e-6;
    DenseArray values;  // [na x nb]
    enum class Expect { edges, adjacency } expect = Expect::edges;
    std::vector<std::pair<std::size_t, std::size_t>> edges;
    DenseArray adjacency;
};

std::vector<Case> parse(const std::string& text);
std::vector<Case> parse_file(const std::string& path);

struct CaseResult {
    std::string name;
    bool ok;
    std::string detail;  // empty when ok
};

struct Report {
    std::vector<CaseResult> cases;
    std::size_t failures = 0;
};

Report run(const std::vector<Case>& cases);

}  // namespace dtem::conformance
