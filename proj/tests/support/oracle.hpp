#pragma once

// Toy data and the joined-graph oracle shared by the federation tests and the
// acceptance binary.

#include <cmath>
#include <random>
#include <utility>
#include <vector>

#include "aftl/federation.hpp"

namespace aftl::oracle {


// Gaussian blobs around a fixed mean per class on a 1x4x4 "image".
inline LabeledSet blobs(std::size_t n, std::size_t classes, std::uint64_t seed, double noise = 0.3) {
    Rng means_rng = make_rng(77);
    std::normal_distribution<double> unit(0.0, 1.0);
    std::vector<std::vector<double>> mu(classes, std::vector<double>(16));
    for (auto& m : mu)
        for (auto& v : m) v = unit(means_rng);
    Rng rng = make_rng(seed);
    LabeledSet s{Tensor({n, 1, 4, 4}), std::vector<std::size_t>(n)};
    for (std::size_t i = 0; i < n; ++i) {
        s.labels[i] = i % classes;
        for (std::size_t k = 0; k < 16; ++k) s.images[i * 16 + k] = mu[s.labels[i]][k] + noise * unit(rng);
    }
    return s;
}

inline Partition toy_partition(std::size_t sources, std::size_t per_client, std::size_t classes, std::uint64_t seed,
                        std::size_t target = 10) {
    Partition p;
    for (std::size_t i = 0; i < sources; ++i) p.sources.push_back(blobs(per_client, classes, seed * 100 + i));
    p.target_train = UnlabeledSet{blobs(target, classes, seed * 100 + 50).images};
    p.target_test = blobs(target, classes, seed * 100 + 51);
    return p;
}

// Extractor and head joined into one sequential network.
inline Network join(const Network& a, const Network& b) {
    std::vector<Layer> layers(a.layers().begin(), a.layers().end());
    layers.insert(layers.end(), b.layers().begin(), b.layers().end());
    return Network(std::move(layers));
}

// Splits gradients of a joined network back into its two parts.
inline std::pair<std::vector<Tensor>, std::vector<Tensor>> split_grads(const GradientBuffer& g, std::size_t first_layers,
                                                                const Network& joined) {
    std::vector<Tensor> a, b;
    for (std::size_t i = 0; i < joined.layer_count(); ++i) {
        if (!joined.layers()[i].spec.has_params()) continue;
        auto& out = i < first_layers ? a : b;
        out.push_back(g.weight(i));
        out.push_back(g.bias(i));
    }
    return {a, b};
}

inline std::vector<Tensor> sgd(std::vector<Tensor> params, const std::vector<Tensor>& grads, double eta) {
    for (std::size_t i = 0; i < params.size(); ++i)
        for (std::size_t k = 0; k < params[i].size(); ++k) params[i][k] -= eta * grads[i][k];
    return params;
}

inline std::vector<Tensor> add(std::vector<Tensor> a, const std::vector<Tensor>& b) {
    for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
    return a;
}

inline double max_diff(const std::vector<Tensor>& a, const std::vector<Tensor>& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, max_abs_diff(a[i], b[i]));
    return m;
}

inline std::vector<std::size_t> to_size(const std::vector<std::uint64_t>& v) { return {v.begin(), v.end()}; }

struct OracleUpdate {
    std::vector<std::vector<Tensor>> source_F, source_C;
    std::vector<Tensor> target_F;
};

// One round of parameter updates from the joined graphs. `prev` holds the
// pre-round-1 discriminator, `mid` the state after round 1 (its caches name the
// batches round 2 backpropagates through).
inline OracleUpdate monolithic_round(const Federation& prev, const Federation& mid, bool consistency) {
    const double eta = mid.schedule.eta;
    const std::size_t n = mid.sources.size();
    const Network& disc0 = prev.server.discriminator;

    // Domain loss over every client's cached upload batch, through extractor -> GRL -> discriminator.
    std::vector<DomainBatch> batches;
    std::vector<Network> joined;
    std::vector<Tape> tapes;
    auto push = [&](const Network& extractor, const Tensor& x, std::uint32_t id) {
        joined.push_back(join(extractor, disc0));
        auto f = forward(joined.back(), x, true);
        batches.push_back({f.output, std::vector<std::size_t>(x.rows(), id)});
        tapes.push_back(*f.tape);
    };
    push(mid.target.extractor, mid.target.train->images.gather_rows(to_size(mid.target.uploaded_indices)), 0);
    for (const auto& c : mid.sources)
        push(c.extractor, c.shard->images.gather_rows(to_size(c.uploaded_indices)), c.id);
    const auto ld = domain_loss(batches);

    // Consistency over the target batch broadcast in round 1.
    std::vector<std::vector<Tensor>> lp_grads(n);
    if (consistency) {
        const auto feats = forward(mid.target.extractor,
                                   mid.target.train->images.gather_rows(to_size(mid.target.uploaded_indices)))
                               .output;
        PredictionSet set;
        std::vector<Tape> ctapes;
        for (const auto& c : mid.sources) {
            auto out = forward(c.classifier, feats, true);
            set.predictions.push_back(softmax(out.output));
            ctapes.push_back(*out.tape);
        }
        const auto lp = consistency_loss(set);
        for (std::size_t i = 0; i < n; ++i) {
            const auto& cls = mid.sources[i].classifier;
            const auto g =
                backward(cls, ctapes[i], softmax_backward(set.predictions[i], lp.prob_grads[i])).grads;
            for (std::size_t l = 0; l < cls.layer_count(); ++l)
                if (cls.layers()[l].spec.has_params()) {
                    lp_grads[i].push_back(g.weight(l));
                    lp_grads[i].push_back(g.bias(l));
                }
        }
    }

    OracleUpdate u;
    {
        const auto& t = mid.target;
        const auto g = backward(joined[0], tapes[0], ld.logit_grads[0]).grads;
        auto [gf, gd] = split_grads(g, t.extractor.layer_count(), joined[0]);
        for (auto& x : gf) x *= -1.0;  // GRL
        u.target_F = sgd(t.extractor.tensors(), gf, eta);
    }
    for (std::size_t i = 0; i < n; ++i) {
        const auto& c = mid.sources[i];
        const auto gd_all = backward(joined[i + 1], tapes[i + 1], ld.logit_grads[i + 1]).grads;
        auto [gf_d, unused] = split_grads(gd_all, c.extractor.layer_count(), joined[i + 1]);
        for (auto& x : gf_d) x *= -1.0;  // GRL

        // L_c on this round's batch through extractor -> classifier.
        auto cursor = c.cursor;
        const auto batch = cursor.next(mid.schedule.batch_size);
        std::vector<std::size_t> y;
        for (auto b : batch) y.push_back(c.shard->labels[b]);
        const auto full = join(c.extractor, c.classifier);
        auto f = forward(full, c.shard->images.gather_rows(batch), true);
        const auto lc = classification_loss(f.output, y);
        auto [gf_c, gc] = split_grads(backward(full, *f.tape, lc.logit_grad).grads, c.extractor.layer_count(), full);

        u.source_F.push_back(sgd(c.extractor.tensors(), add(gf_c, gf_d), eta));
        u.source_C.push_back(sgd(c.classifier.tensors(), consistency ? add(gc, lp_grads[i]) : gc, eta));
    }
    return u;
}


/// Runs initialization and two rounds on a dense toy federation, and returns the
/// largest deviation of the second round's client updates from the joined-graph
/// oracle.
inline double split_round_error(std::size_t sources, std::size_t samples, bool consistency, std::uint64_t seed) {
    RoundSchedule sch;
    sch.batch_size = samples;
    sch.eta = 0.1;
    sch.init_epochs = 1;
    sch.consistency_enabled = consistency;
    auto f = make_federation(Architecture::dense({1, 4, 4}, 3, sources, 5), sch,
                             toy_partition(sources, samples, 3, seed, samples), seed);
    run_initialization(f, 1);
    const Federation before = f;
    run_round(f, false);
    const Federation mid = f;
    const auto expect = monolithic_round(before, mid, consistency);
    run_round(f, false);
    double worst = max_diff(f.target.extractor.tensors(), expect.target_F);
    for (std::size_t i = 0; i < sources; ++i) {
        worst = std::max(worst, max_diff(f.sources[i].extractor.tensors(), expect.source_F[i]));
        worst = std::max(worst, max_diff(f.sources[i].classifier.tensors(), expect.source_C[i]));
    }
    return worst;
}

}  // namespace aftl::oracle
