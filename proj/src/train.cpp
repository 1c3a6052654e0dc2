#include "dtem/train.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>
#include <stdexcept>

namespace dtem::train {

namespace {

// Persistent parameter arrays in the exact order their bound Vars appear.
std::vector<DenseArray*> vit_param_ptrs(vit::ViTParams& p) {
    std::vector<DenseArray*> v{&p.patch_w, &p.patch_b, &p.cls, &p.pos,
                               &p.lnf_g,   &p.lnf_b,   &p.head_w, &p.head_b};
    for (auto& b : p.block) {
        v.insert(v.end(), {&b.ln1_g, &b.ln1_b, &b.ln2_g, &b.ln2_b, &b.wo, &b.bo, &b.w1, &b.b1,
                           &b.w2, &b.b2});
        for (auto& x : b.wq) v.push_back(&x);
        for (auto& x : b.wk) v.push_back(&x);
        for (auto& x : b.wv) v.push_back(&x);
        for (auto& x : b.bq) v.push_back(&x);
        for (auto& x : b.bk) v.push_back(&x);
        for (auto& x : b.bv) v.push_back(&x);
    }
    return v;
}

std::vector<DenseArray*> emb_param_ptrs(vit::EmbeddingStack& e) {
    std::vector<DenseArray*> v;
    for (auto& ep : e) {
        for (auto& w : ep.weights) v.push_back(&w);
        for (auto& b : ep.biases) v.push_back(&b);
    }
    return v;
}

std::vector<Var> vit_var_list(const vit::BoundViT& b) { return b.all(); }

std::vector<Var> emb_var_list(const vit::BoundEmbeddings& b) {
    std::vector<Var> v;
    for (auto& be : b.block) {
        for (auto x : be.weights) v.push_back(x);
        for (auto x : be.biases) v.push_back(x);
    }
    return v;
}

struct Adam {
    double lr, beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    std::vector<DenseArray> m, v;
    std::size_t t = 0;

    explicit Adam(double lr_, const std::vector<DenseArray*>& params) : lr(lr_) {
        for (auto* p : params) {
            m.emplace_back(p->shape);
            v.emplace_back(p->shape);
        }
    }

    void step(const std::vector<DenseArray*>& params, const std::vector<DenseArray>& grads) {
        ++t;
        const double bc1 = 1.0 - std::pow(beta1, (double)t);
        const double bc2 = 1.0 - std::pow(beta2, (double)t);
        for (std::size_t i = 0; i < params.size(); ++i) {
            DenseArray& p = *params[i];
            const DenseArray& g = grads[i];
            for (std::size_t k = 0; k < p.numel(); ++k) {
                m[i].data[k] = beta1 * m[i].data[k] + (1.0 - beta1) * g.data[k];
                v[i].data[k] = beta2 * v[i].data[k] + (1.0 - beta2) * g.data[k] * g.data[k];
                p.data[k] -= lr * (m[i].data[k] / bc1) / (std::sqrt(v[i].data[k] / bc2) + eps);
            }
        }
    }
};

// Mean loss and mean gradients over a minibatch. Each sample runs on its own
// tape (parallelizable); the reduction is in fixed sample order so results
// do not depend on the thread count.
double batch_grads(const vit::ViTConfig& cfg, const vit::ViTParams& vparams,
                   const vit::EmbeddingStack& eparams, const std::vector<synth::Sample>& batch,
                   bool train_backbone, bool train_embed, std::vector<DenseArray>& grads_out) {
    const std::size_t bs = batch.size();
    std::vector<std::vector<DenseArray>> per_sample(bs);
    std::vector<double> losses(bs, 0.0);

#pragma omp parallel for schedule(dynamic)
    for (std::ptrdiff_t si = 0; si < (std::ptrdiff_t)bs; ++si) {
        Tape tape;
        vit::BoundViT bv = vit::bind(tape, vparams, train_backbone);
        vit::BoundEmbeddings be = vit::bind(tape, eparams, train_embed);
        vit::ForwardResult fr = vit::forward(tape, cfg, bv, &be, batch[si].image);
        Var loss = tape.softmax_cross_entropy(fr.logits,
                                              synth::one_hot(batch[si].label, cfg.classes));
        losses[si] = tape.value(loss).data[0];
        tape.backward(loss);
        std::vector<Var> vars;
        if (train_backbone)
            for (auto x : vit_var_list(bv)) vars.push_back(x);
        if (train_embed)
            for (auto x : emb_var_list(be)) vars.push_back(x);
        auto& dst = per_sample[si];
        dst.reserve(vars.size());
        for (auto x : vars) dst.push_back(tape.grad(x));
    }

    grads_out = per_sample[0];
    for (std::size_t si = 1; si < bs; ++si)
        for (std::size_t i = 0; i < grads_out.size(); ++i)
            for (std::size_t k = 0; k < grads_out[i].numel(); ++k)
                grads_out[i].data[k] += per_sample[si][i].data[k];
    double loss = 0.0;
    for (std::size_t si = 0; si < bs; ++si) loss += losses[si];
    for (auto& g : grads_out)
        for (double& v : g.data) v /= (double)bs;
    loss /= (double)bs;
    if (!std::isfinite(loss))
        throw std::runtime_error("training diverged: non-finite loss");
    return loss;
}

std::vector<std::size_t> shuffled_indices(std::size_t n, std::uint64_t seed) {
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    std::mt19937_64 rng(seed);
    std::shuffle(idx.begin(), idx.end(), rng);
    return idx;
}

}  // namespace

std::string metrics_csv(const std::vector<MetricRow>& rows) {
    std::ostringstream ss;
    ss << "epoch,split,acc,loss\n";
    for (const auto& r : rows) ss << r.epoch << "," << r.split << "," << r.acc << "," << r.loss << "\n";
    return ss.str();
}

EvalResult evaluate(const vit::ViTConfig& cfg, const vit::ViTParams& params,
                    const vit::EmbeddingStack& emb, const std::vector<synth::Sample>& data) {
    std::vector<int> correct(data.size(), 0);
    std::vector<double> losses(data.size(), 0.0);
#pragma omp parallel for schedule(dynamic)
    for (std::ptrdiff_t i = 0; i < (std::ptrdiff_t)data.size(); ++i) {
        Tape tape;
        vit::BoundViT bv = vit::bind(tape, params, false);
        vit::BoundEmbeddings be = vit::bind(tape, emb, false);
        vit::ForwardResult fr = vit::forward(tape, cfg, bv, &be, data[i].image);
        const DenseArray& lg = tape.value(fr.logits);
        std::size_t best = 0;
        for (std::size_t c = 1; c < cfg.classes; ++c)
            if (lg.data[c] > lg.data[best]) best = c;
        correct[i] = best == data[i].label ? 1 : 0;
        Var loss =
            tape.softmax_cross_entropy(fr.logits, synth::one_hot(data[i].label, cfg.classes));
        losses[i] = tape.value(loss).data[0];
    }
    EvalResult r{0.0, 0.0};
    for (std::size_t i = 0; i < data.size(); ++i) {
        r.acc += correct[i];
        r.loss += losses[i];
    }
    r.acc /= (double)data.size();
    r.loss /= (double)data.size();
    return r;
}

vit::ViTParams pretrain_backbone(const vit::ViTConfig& cfg, const synth::Dataset& data,
                                 std::size_t epochs, double lr, std::uint64_t seed) {
    vit::ViTConfig pc = cfg;
    pc.mode = vit::MergeMode::none;
    vit::ViTParams params = vit::init_params(seed, pc);
    vit::EmbeddingStack no_emb;
    std::vector<DenseArray*> ptrs = vit_param_ptrs(params);
    Adam opt(lr, ptrs);
    std::vector<DenseArray> grads;
    for (std::size_t ep = 0; ep < epochs; ++ep) {
        auto idx = shuffled_indices(data.train.size(), seed * 1000003 + ep);
        for (std::size_t off = 0; off < idx.size(); off += 16) {
            std::vector<synth::Sample> batch;
            for (std::size_t k = off; k < std::min(idx.size(), off + 16); ++k)
                batch.push_back(data.train[idx[k]]);
            batch_grads(pc, params, no_emb, batch, true, false, grads);
            opt.step(ptrs, grads);
        }
    }
    return params;
}

std::vector<MetricRow> train_modular(Model& model, const synth::Dataset& data,
                                     const TrainConfig& tc) {
    vit::ViTConfig soft_cfg = model.cfg;
    soft_cfg.mode = vit::MergeMode::soft_decoupled;
    soft_cfg.r = tc.r_train;
    vit::ViTConfig eval_cfg = model.cfg;
    eval_cfg.mode = vit::MergeMode::hard_decoupled;
    eval_cfg.r = tc.r_train;

    std::vector<MetricRow> metrics;
    EvalResult ev = evaluate(eval_cfg, model.vit, model.emb, data.val);
    metrics.push_back({0, "val", ev.acc, ev.loss});

    std::vector<DenseArray*> ptrs = emb_param_ptrs(model.emb);
    Adam opt(tc.lr_embed, ptrs);
    std::vector<DenseArray> grads;
    for (std::size_t ep = 1; ep <= tc.epochs; ++ep) {
        auto idx = shuffled_indices(data.train.size(), tc.seed * 1000003 + ep);
        double train_loss = 0.0;
        std::size_t steps = 0;
        for (std::size_t off = 0; off < idx.size(); off += tc.batch) {
            std::vector<synth::Sample> batch;
            for (std::size_t k = off; k < std::min(idx.size(), off + tc.batch); ++k)
                batch.push_back(data.train[idx[k]]);
            train_loss += batch_grads(soft_cfg, model.vit, model.emb, batch, false, true, grads);
            opt.step(ptrs, grads);
            ++steps;
        }
        metrics.push_back({ep, "train", 0.0, train_loss / (double)steps});
        ev = evaluate(eval_cfg, model.vit, model.emb, data.val);
        metrics.push_back({ep, "val", ev.acc, ev.loss});
    }
    return metrics;
}

std::vector<MetricRow> train_e2e(Model& model, const synth::Dataset& data, const TrainConfig& tc,
                                 E2EStats* stats) {
    vit::ViTConfig soft_cfg = model.cfg;
    soft_cfg.mode = vit::MergeMode::soft_decoupled;
    soft_cfg.r = tc.r_train;
    vit::ViTConfig hard_cfg = model.cfg;
    hard_cfg.mode = vit::MergeMode::hard_decoupled;
    hard_cfg.r = tc.r_backbone;

    std::vector<MetricRow> metrics;
    EvalResult ev = evaluate(hard_cfg, model.vit, model.emb, data.val);
    metrics.push_back({0, "val", ev.acc, ev.loss});

    std::vector<DenseArray*> emb_ptrs = emb_param_ptrs(model.emb);
    std::vector<DenseArray*> vit_ptrs = vit_param_ptrs(model.vit);
    Adam emb_opt(tc.lr_embed, emb_ptrs);
    Adam vit_opt(tc.lr_backbone, vit_ptrs);
    std::vector<DenseArray> grads;
    std::size_t step = 0;
    for (std::size_t ep = 1; ep <= tc.epochs; ++ep) {
        auto idx = shuffled_indices(data.train.size(), tc.seed * 1000003 + 500 + ep);
        double train_loss = 0.0;
        std::size_t steps = 0;
        for (std::size_t off = 0; off < idx.size(); off += tc.batch) {
            std::vector<synth::Sample> batch;
            for (std::size_t k = off; k < std::min(idx.size(), off + tc.batch); ++k)
                batch.push_back(data.train[idx[k]]);
            if (step % tc.alt_period == 0) {
                // Embedding step: soft operators, backbone frozen.
                train_loss += batch_grads(soft_cfg, model.vit, model.emb, batch, false, true, grads);
                emb_opt.step(emb_ptrs, grads);
                if (stats) ++stats->embed_steps;
            } else {
                // Backbone step: discretized operators, embeddings frozen.
                train_loss += batch_grads(hard_cfg, model.vit, model.emb, batch, true, false, grads);
                vit_opt.step(vit_ptrs, grads);
                if (stats) ++stats->backbone_steps;
            }
            ++step;
            ++steps;
        }
        metrics.push_back({ep, "train", 0.0, train_loss / (double)steps});
        ev = evaluate(hard_cfg, model.vit, model.emb, data.val);
        metrics.push_back({ep, "val", ev.acc, ev.loss});
    }
    return metrics;
}

std::vector<SweepRow> eval_sweep(const Model& model, const std::vector<synth::Sample>& data,
                                 const std::vector<std::size_t>& r_values) {
    flops::ModelSpec spec;
    spec.name = "custom";
    spec.image = model.cfg.image;
    spec.patch = model.cfg.patch;
    spec.channels = model.cfg.channels;
    spec.d = model.cfg.d;
    spec.heads = model.cfg.heads;
    spec.blocks = model.cfg.blocks;
    spec.mlp_ratio = model.cfg.mlp_ratio;
    spec.classes = model.cfg.classes;
    spec.d_prime = model.cfg.d_prime;

    std::vector<SweepRow> rows;
    for (auto r : r_values) {
        vit::ViTConfig c = model.cfg;
        c.r = r;
        c.mode = r == 0 ? vit::MergeMode::none : vit::MergeMode::hard_decoupled;
        EvalResult ev = evaluate(c, model.vit, model.emb, data);
        rows.push_back({r, ev.acc, flops::vit_flops(spec, r, r > 0).gflops()});
    }
    return rows;
}

std::string sweep_csv(const std::vector<SweepRow>& rows) {
    std::ostringstream ss;
    ss << "r,acc,gflops\n";
    for (const auto& r : rows) ss << r.r << "," << r.acc << "," << r.gflops << "\n";
    return ss.str();
}

}  // namespace dtem::train
