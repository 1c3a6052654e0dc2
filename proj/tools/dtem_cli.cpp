#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "dtem/config.hpp"
#include "dtem/conformance.hpp"
#include "dtem/flops.hpp"
#include "dtem/ppm.hpp"
#include "dtem/train.hpp"

namespace {

using namespace dtem;

// ---------------------------------------------------------------------------
// gradcheck

struct PipelineReport {
    std::string name;
    double max_rel_err = 0.0;
    std::size_t instances = 0;
};

// Loss of the similarity -> soft grouping -> soft merging composite as a
// function of the token features, with fixed random readout weights.
double composite_loss(Precision prec, const DenseArray& feats, std::size_t r, double tau,
                      double sim_scale, const DenseArray& w_feat, const DenseArray& w_size,
                      int pipeline, DenseArray* grad_out, DenseArray* denom_out = nullptr,
                      const DenseArray* denom_frozen = nullptr) {
    Tape tape(prec);
    Var f = tape.leaf(feats, true);
    merge::TokenState state;
    state.features = f;
    state.sizes = tape.constant(DenseArray::ones({feats.rows()}));
    state.excluded.assign(feats.rows(), 0);
    state.protected_.assign(feats.rows(), 0);
    state.protected_[0] = 1;

    merge::BipartitePartition p = merge::partition(state);
    Var ea = tape.gather_rows(f, p.index_a);
    Var eb = tape.gather_rows(f, p.index_b);
    merge::SimilarityMatrix sim = merge::similarity(tape, ea, eb, sim_scale);

    // The clipping denominator max(1, rowsum(A*)) in the soft grouping is
    // detached; finite-difference probes must hold it frozen at the base point
    // (denom_out captures it, denom_frozen replays it) or they compare against
    // a different function wherever the clamp is active.
    auto grouped = [&]() {
        merge::SoftAdjacency adj = merge::soft_group(tape, sim, r, tau, /*keep_steps=*/true);
        const std::size_t na = p.index_a.size(), nb = p.index_b.size();
        if (denom_out) {
            *denom_out = DenseArray::zeros({na});
            for (std::size_t i = 0; i < na; ++i) {
                double rs = 0.0;
                for (const auto& st : adj.per_step)
                    for (std::size_t j = 0; j < nb; ++j) rs += st.at(i, j);
                denom_out->data[i] = std::max(1.0, rs);
            }
        }
        if (denom_frozen) {
            DenseArray raw = DenseArray::zeros({na, nb});
            for (const auto& st : adj.per_step)
                for (std::size_t k = 0; k < raw.data.size(); ++k) raw.data[k] += st.data[k];
            for (std::size_t i = 0; i < na; ++i)
                for (std::size_t j = 0; j < nb; ++j) raw.at(i, j) /= denom_frozen->data[i];
            adj.values = tape.constant(raw);
        }
        return adj;
    };
    Var loss{};
    if (pipeline == 0) {
        DenseArray w({p.index_a.size(), p.index_b.size()});
        for (std::size_t k = 0; k < w.numel(); ++k)
            w.data[k] = w_feat.data[k % w_feat.numel()];
        loss = tape.sum(tape.mul(sim.values, tape.constant(w)));
    } else if (pipeline == 1) {
        merge::SoftAdjacency adj = grouped();
        DenseArray w({p.index_a.size(), p.index_b.size()});
        for (std::size_t k = 0; k < w.numel(); ++k)
            w.data[k] = w_feat.data[k % w_feat.numel()];
        // The direct linear term keeps every feature coordinate's gradient O(1);
        // without it, saturated-softmax coordinates have gradients below the
        // finite-difference noise floor and the relative error is meaningless.
        loss = tape.add(tape.sum(tape.mul(adj.values, tape.constant(w))),
                        tape.sum(tape.mul(f, tape.constant(w_feat))));
    } else {
        merge::SoftAdjacency adj = grouped();
        merge::TokenState merged = merge::soft_merge(tape, state, p, adj);
        Var lf = tape.sum(tape.mul(merged.features, tape.constant(w_feat)));
        Var ls = tape.sum(tape.mul(merged.sizes, tape.constant(w_size)));
        loss = tape.add(lf, ls);
    }
    double out = tape.value(loss).data[0];
    if (grad_out) {
        tape.backward(loss);
        *grad_out = tape.grad(f);
    }
    return out;
}

std::vector<PipelineReport> run_gradcheck(Precision prec, std::uint64_t seed,
                                          const std::vector<double>& taus) {
    static const char* names[3] = {"similarity", "soft_group", "soft_group+soft_merge"};
    std::vector<PipelineReport> reports;
    for (int pl = 0; pl < 3; ++pl) reports.push_back({names[pl], 0.0, 0});

    std::mt19937_64 rng(seed);
    std::normal_distribution<double> dist(0.0, 1.0);
    for (std::size_t inst = 0; inst < 12; ++inst) {
        std::size_t n = 6 + rng() % 7;    // 6..12 tokens
        std::size_t d = 3 + rng() % 4;    // 3..6 features
        std::size_t r = 1 + rng() % 3;    // 1..3 merges
        double tau = taus[inst % taus.size()];
        DenseArray feats({n, d}), w_feat({n, d}), w_size({n});
        for (double& v : feats.data) v = dist(rng);
        for (double& v : w_feat.data) v = dist(rng);
        for (double& v : w_size.data) v = dist(rng);
        for (int pl = 0; pl < 3; ++pl) {
            DenseArray grad, denom0;
            composite_loss(prec, feats, r, tau, 0.1, w_feat, w_size, pl, &grad, &denom0);
            double err = finite_difference_check(
                [&](const DenseArray& x) {
                    return composite_loss(prec, x, r, tau, 0.1, w_feat, w_size, pl, nullptr,
                                          nullptr, &denom0);
                },
                feats, grad);
            reports[pl].max_rel_err = std::max(reports[pl].max_rel_err, err);
            ++reports[pl].instances;
        }
    }
    return reports;
}

int cmd_gradcheck(const config::RunConfig& cfg, bool tau_given) {
    Precision prec = cfg.precision == "f32" ? Precision::f32 : Precision::f64;
    std::vector<double> taus =
        tau_given ? std::vector<double>{cfg.tau} : std::vector<double>{0.1, 0.5, 1.0};
    const double threshold = 1e-4;
    bool ok = true;
    try {
        for (std::size_t rep = 0; rep < cfg.seeds; ++rep) {
            auto reports = run_gradcheck(prec, cfg.seed + rep, taus);
            std::printf("repetition %zu (seed %llu):\n", rep + 1,
                        (unsigned long long)(cfg.seed + rep));
            for (const auto& r : reports) {
                bool pass = r.max_rel_err < threshold;
                ok = ok && pass;
                std::printf("  %-22s max rel-err %.3e over %zu instances  %s\n", r.name.c_str(),
                            r.max_rel_err, r.instances, pass ? "PASS" : "FAIL");
            }
        }
    } catch (const std::runtime_error& e) {
        std::fprintf(stderr, "gradcheck: %s\n", e.what());
        return 2;
    }
    std::printf("gradcheck: %s (%zu repetitions)\n", ok ? "PASS" : "FAIL", cfg.seeds);
    return ok ? 0 : 1;
}

// ---------------------------------------------------------------------------
// model persistence: <path> holds the backbone, <path>.emb<l> each embedding.

void save_model(const train::Model& m, const std::string& path) {
    vit::save(m.vit, m.cfg, path);
    for (std::size_t l = 0; l < m.emb.size(); ++l)
        embed::save(m.emb[l], path + ".emb" + std::to_string(l));
}

train::Model load_model(const config::RunConfig& rc, const std::string& path) {
    train::Model m;
    m.cfg = rc.vit_config();
    vit::ViTConfig stored = m.cfg;
    m.vit = vit::load(path, stored);
    for (std::size_t l = 0; l < m.cfg.blocks; ++l)
        m.emb.push_back(embed::load(path + ".emb" + std::to_string(l)));
    return m;
}

// ---------------------------------------------------------------------------

int cmd_flops(const std::string& preset, const std::string& r_list, bool no_embedding) {
    flops::ModelSpec spec = flops::preset(preset);
    std::vector<std::size_t> rs;
    {
        std::stringstream ss(r_list);
        std::string tok;
        while (std::getline(ss, tok, ',')) if (!tok.empty()) rs.push_back(std::stoul(tok));
    }
    std::printf("%-8s  image %zu  patch %zu  d %zu  heads %zu  blocks %zu  tokens %zu\n",
                spec.name.c_str(), spec.image, spec.patch, spec.d, spec.heads, spec.blocks,
                spec.tokens());
    std::printf("%6s %10s %8s %12s %12s %12s %12s %12s\n", "r", "GFLOPs", "%base", "patch",
                "attn-lin", "attn-quad", "mlp", "embedding");
    double base = flops::vit_flops(spec, 0, false).gflops();
    for (auto r : rs) {
        bool emb = !no_embedding && r > 0;
        flops::CostBreakdown c = flops::vit_flops(spec, r, emb);
        std::printf("%6zu %10.3f %8.2f %12.4g %12.4g %12.4g %12.4g %12.4g\n", r, c.gflops(),
                    100.0 * c.gflops() / base, c.patch_embed / 1e9, c.attn_linear / 1e9,
                    c.attn_quadratic / 1e9, c.mlp / 1e9, c.embedding / 1e9);
    }
    std::printf("\n%s", flops::sweep_csv(flops::sweep(spec, rs, !no_embedding)).c_str());
    return 0;
}

train::Model build_model(const config::RunConfig& rc, const synth::Dataset& data) {
    train::Model m;
    m.cfg = rc.vit_config();
    std::printf("pre-training backbone: %zu epochs, lr %g\n", rc.pretrain_epochs, rc.lr_pretrain);
    m.vit = train::pretrain_backbone(m.cfg, data, rc.pretrain_epochs, rc.lr_pretrain, rc.seed);
    m.emb = vit::init_embeddings(rc.seed, m.cfg);
    return m;
}

int cmd_train(const config::RunConfig& rc) {
    synth::Dataset data = synth::generate(rc.task());
    train::Model m = build_model(rc, data);
    train::TrainConfig tc = rc.train_config();
    std::vector<train::MetricRow> metrics;
    if (tc.mode == train::TrainMode::modular) {
        std::printf("modular training: %zu epochs\n", tc.epochs);
        metrics = train::train_modular(m, data, tc);
    } else {
        train::E2EStats stats;
        std::printf("alternating end-to-end training: %zu epochs\n", tc.epochs);
        metrics = train::train_e2e(m, data, tc, &stats);
        std::printf("steps: %zu embedding, %zu backbone\n", stats.embed_steps,
                    stats.backbone_steps);
    }
    std::string csv = train::metrics_csv(metrics);
    if (!rc.out.empty()) {
        std::ofstream f(rc.out);
        if (!f) { std::fprintf(stderr, "train: cannot write '%s'\n", rc.out.c_str()); return 1; }
        f << csv;
        std::printf("metrics written to %s\n", rc.out.c_str());
    } else {
        std::fputs(csv.c_str(), stdout);
    }
    if (!rc.checkpoint.empty()) {
        save_model(m, rc.checkpoint);
        std::printf("checkpoint written to %s\n", rc.checkpoint.c_str());
    }
    if (!metrics.empty()) {
        const auto& last = metrics.back();
        std::printf("final %s: acc %.4f loss %.4f\n", last.split.c_str(), last.acc, last.loss);
    }
    return 0;
}

int cmd_eval(const config::RunConfig& rc) {
    if (rc.checkpoint.empty()) { std::fprintf(stderr, "eval: checkpoint required\n"); return 1; }
    train::Model m = load_model(rc, rc.checkpoint);
    synth::Dataset data = synth::generate(rc.task());
    train::EvalResult ev = train::evaluate(m.cfg, m.vit, m.emb, data.test);
    std::printf("mode %s r %zu: test acc %.4f loss %.4f\n", rc.mode.c_str(), rc.r, ev.acc,
                ev.loss);
    return 0;
}

int cmd_sweep(const config::RunConfig& rc) {
    if (rc.checkpoint.empty()) { std::fprintf(stderr, "sweep: checkpoint required\n"); return 1; }
    train::Model m = load_model(rc, rc.checkpoint);
    synth::Dataset data = synth::generate(rc.task());
    auto rows = train::eval_sweep(m, data.test, rc.sweep_r_values());
    std::string csv = train::sweep_csv(rows);
    std::fputs(csv.c_str(), stdout);
    if (!rc.out.empty()) {
        std::ofstream f(rc.out);
        if (!f) { std::fprintf(stderr, "sweep: cannot write '%s'\n", rc.out.c_str()); return 1; }
        f << csv;
    }
    return 0;
}

int cmd_visualize(const config::RunConfig& rc) {
    vit::ViTConfig cfg = rc.vit_config();
    if (cfg.mode == vit::MergeMode::soft_decoupled) {
        std::fprintf(stderr, "visualize: soft mode has no discrete groups to render\n");
        return 1;
    }
    train::Model m;
    if (!rc.checkpoint.empty()) {
        m = load_model(rc, rc.checkpoint);
        m.cfg = cfg;
    } else {
        m.cfg = cfg;
        m.vit = vit::init_params(rc.seed, cfg);
        m.emb = vit::init_embeddings(rc.seed, cfg);
    }
    synth::SyntheticTask task = rc.task();
    task.n_train = 1;
    task.n_val = 0;
    task.n_test = 0;
    synth::Dataset data = synth::generate(task);

    Tape tape;
    vit::BoundViT bv = vit::bind(tape, m.vit, false);
    vit::BoundEmbeddings be = vit::bind(tape, m.emb, false);
    vit::ForwardResult fr =
        vit::forward(tape, m.cfg, bv, &be, data.train[0].image, /*want_trace=*/true);
    ppm::Image img = ppm::render_merge_map(m.cfg, fr.trace);
    std::string path = rc.out.empty() ? "merge_map.ppm" : rc.out;
    ppm::save(img, path);
    std::printf("%zu merge groups over %zu tokens; image written to %s\n", fr.trace.group_count,
                m.cfg.tokens(), path.c_str());
    return 0;
}

std::string config_key_footer() {
    std::string s = "Config keys (key=value file and --set overrides):\n";
    for (const auto& [k, desc] : config::RunConfig::keys())
        s += "  " + k + std::string(k.size() < 16 ? 16 - k.size() : 1, ' ') + desc + "\n";
    return s;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"dtem: decoupled token embeddings for merging -- toy-scale artifact"};
    app.footer(config_key_footer());
    app.require_subcommand(1);

    std::string config_path;
    std::vector<std::string> sets;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", config_path, "key=value config file");
        sub->add_option("--set", sets, "override a config key, e.g. --set r=8")
            ->take_all();
    };

    auto* g = app.add_subcommand("gradcheck", "finite-difference checks of the soft operators");
    double g_tau = 0.1;
    std::size_t g_seeds = 1;
    std::string g_precision;
    add_common(g);
    g->add_option("--seeds", g_seeds, "number of suite repetitions");
    g->add_option("--tau", g_tau, "run the suite at this single temperature");
    g->add_option("--precision", g_precision, "f64 or f32");

    auto* c = app.add_subcommand("conformance", "run a grouping conformance-vector file");
    std::string c_file;
    c->add_option("file", c_file, "conformance vector file")->required();

    auto* f = app.add_subcommand("flops", "analytic cost tables");
    std::string f_preset = "deit-s", f_rs = "0,11,12,13,14,15,16";
    bool f_noemb = false;
    f->add_option("--preset", f_preset, "geometry preset: deit-t, deit-s, deit-b, mae-l, toy");
    f->add_option("--r", f_rs, "comma-separated reduction rates");
    f->add_flag("--no-embedding", f_noemb, "exclude the decoupled embedding cost");

    auto* tr = app.add_subcommand("train", "pre-train a toy backbone, then train merge embeddings");
    add_common(tr);
    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on the synthetic test split");
    add_common(ev);
    auto* sw = app.add_subcommand("sweep", "accuracy/GFLOPs across reduction rates");
    add_common(sw);
    auto* vz = app.add_subcommand("visualize", "render the final merge groups as a pixmap");
    add_common(vz);

    CLI11_PARSE(app, argc, argv);

    try {
        config::RunConfig rc;
        if (!config_path.empty()) rc = config::RunConfig::parse_file(config_path);
        for (const auto& kv : sets) {
            auto eq = kv.find('=');
            if (eq == std::string::npos)
                throw std::invalid_argument("--set expects key=value, got '" + kv + "'");
            rc.set(kv.substr(0, eq), kv.substr(eq + 1));
        }
        if (g->parsed()) {
            if (g->count("--seeds")) rc.seeds = g_seeds;
            if (g->count("--precision")) rc.set("precision", g_precision);
            bool tau_given = g->count("--tau") > 0;
            if (tau_given) rc.tau = g_tau;
            return cmd_gradcheck(rc, tau_given);
        }
        if (c->parsed()) {
            auto report = conformance::run(conformance::parse_file(c_file));
            for (const auto& r : report.cases) {
                if (r.ok) std::printf("ok   %s\n", r.name.c_str());
                else std::printf("FAIL %s: %s\n", r.name.c_str(), r.detail.c_str());
            }
            std::printf("conformance: %zu cases, %zu failures\n", report.cases.size(),
                        report.failures);
            return report.failures == 0 ? 0 : 1;
        }
        if (f->parsed()) return cmd_flops(f_preset, f_rs, f_noemb);
        if (tr->parsed()) return cmd_train(rc);
        if (ev->parsed()) return cmd_eval(rc);
        if (sw->parsed()) return cmd_sweep(rc);
        if (vz->parsed()) return cmd_visualize(rc);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
