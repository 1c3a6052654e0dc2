#include "dtem/conformance.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace dtem::conformance {

namespace {

std::vector<std::string> tokens(const std::string& line) {
    std::istringstream ss(line);
    std::vector<std::string> out;
    std::string t;
    while (ss >> t) {
        if (t[0] == '#') break;
        out.push_back(t);
    }
    return out;
}

[[noreturn]] void fail(std::size_t lineno, const std::string& msg) {
    throw std::invalid_argument("conformance: line " + std::to_string(lineno) + ": " + msg);
}

}  // namespace

std::vector<Case> parse(const std::string& text) {
    std::vector<Case> cases;
    std::istringstream ss(text);
    std::string line;
    std::size_t lineno = 0;

    auto next = [&](std::vector<std::string>& toks) {
        while (std::getline(ss, line)) {
            ++lineno;
            toks = tokens(line);
            if (!toks.empty()) return true;
        }
        return false;
    };

    std::vector<std::string> t;
    while (next(t)) {
        if (t[0] != "case" || t.size() != 2) fail(lineno, "expected 'case <name>'");
        Case c;
        c.name = t[1];
        bool have_matrix = false, have_expect = false, done = false;
        while (!done) {
            if (!next(t)) fail(lineno, "unexpected end of file inside case '" + c.name + "'");
            if (t[0] == "r" && t.size() == 2) c.r = std::stoul(t[1]);
            else if (t[0] == "tau" && t.size() == 2) c.tau = std::stod(t[1]);
            else if (t[0] == "tol" && t.size() == 2) c.tol = std::stod(t[1]);
            else if (t[0] == "matrix" && t.size() == 3) {
                std::size_t na = std::stoul(t[1]), nb = std::stoul(t[2]);
                c.values = DenseArray({na, nb});
                for (std::size_t i = 0; i < na; ++i) {
                    if (!next(t) || t.size() != nb) fail(lineno, "expected a row of " + std::to_string(nb) + " values");
                    for (std::size_t j = 0; j < nb; ++j) c.values.at(i, j) = std::stod(t[j]);
                }
                have_matrix = true;
            } else if (t[0] == "expect" && t.size() == 2) {
                if (!have_matrix) fail(lineno, "'expect' before 'matrix'");
                have_expect = true;
                if (t[1] == "edges") {
                    c.expect = Case::Expect::edges;
                    while (true) {
                        if (!next(t)) fail(lineno, "unexpected end of file in edge list");
                        if (t[0] == "end") { done = true; break; }
                        if (t.size() != 2) fail(lineno, "expected '<a> <b>' or 'end'");
                        c.edges.emplace_back(std::stoul(t[0]), std::stoul(t[1]));
                    }
                } else if (t[1] == "adjacency") {
                    c.expect = Case::Expect::adjacency;
                    std::size_t na = c.values.rows(), nb = c.values.cols();
                    c.adjacency = DenseArray({na, nb});
                    for (std::size_t i = 0; i < na; ++i) {
                        if (!next(t) || t.size() != nb) fail(lineno, "expected a row of " + std::to_string(nb) + " values");
                        for (std::size_t j = 0; j < nb; ++j) c.adjacency.at(i, j) = std::stod(t[j]);
                    }
                    if (!next(t) || t[0] != "end") fail(lineno, "expected 'end'");
                    done = true;
                } else fail(lineno, "expected 'expect edges' or 'expect adjacency'");
            } else if (t[0] == "end") {
                fail(lineno, "case '" + c.name + "' has no 'expect' section");
            } else fail(lineno, "unrecognized directive '" + t[0] + "'");
        }
        if (!have_matrix || !have_expect) fail(lineno, "incomplete case '" + c.name + "'");
        cases.push_back(std::move(c));
    }
    return cases;
}

std::vector<Case> parse_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("conformance: cannot open '" + path + "'");
    std::ostringstream ss;
    ss << f.rdbuf();
    return parse(ss.str());
}

Report run(const std::vector<Case>& cases) {
    Report rep;
    for (const auto& c : cases) {
        CaseResult res{c.name, true, ""};
        try {
            DenseArray mask({c.values.rows(), c.values.cols()});
            for (double& v : mask.data) v = 1.0;
            if (c.expect == Case::Expect::edges) {
                merge::HardMatching m = merge::hard_group(c.values, mask, c.r);
                // Edge order in the file is immaterial; compare as sets.
                std::sort(m.edges.begin(), m.edges.end());
                auto want = c.edges;
                std::sort(want.begin(), want.end());
                if (m.edges != want) {
                    std::ostringstream msg;
                    msg << "matching mismatch: got {";
                    for (auto [a, b] : m.edges) msg << " (" << a << "," << b << ")";
                    msg << " }, expected {";
                    for (auto [a, b] : want) msg << " (" << a << "," << b << ")";
                    msg << " }";
                    res.ok = false;
                    res.detail = msg.str();
                }
            } else {
                Tape tape;
                merge::SimilarityMatrix s{tape.constant(c.values), mask};
                merge::SoftAdjacency adj = merge::soft_group(tape, s, c.r, c.tau);
                const DenseArray& got = tape.value(adj.values);
                double worst = 0.0;
                for (std::size_t k = 0; k < got.numel(); ++k)
                    worst = std::max(worst, std::abs(got.data[k] - c.adjacency.data[k]));
                if (worst > c.tol) {
                    std::ostringstream msg;
                    msg << "adjacency max abs error " << worst << " > tol " << c.tol;
                    res.ok = false;
                    res.detail = msg.str();
                }
            }
        } catch (const std::exception& e) {
            res.ok = false;
            res.detail = std::string("exception: ") + e.what();
        }
        if (!res.ok) ++rep.failures;
        rep.cases.push_back(std::move(res));
    }
    return rep;
}

}  // namespace dtem::conformance
