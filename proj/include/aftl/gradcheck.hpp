#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "aftl/errors.hpp"
#include "aftl/losses.hpp"
#include "aftl/nn.hpp"
#include "aftl/rng.hpp"

namespace aftl {

inline constexpr double kFiniteDiffStep = 1e-5;

inline double relative_error(double analytic, double numeric) {
    return std::abs(analytic - numeric) / std::max(1e-12, std::abs(numeric));
}

namespace detail {

inline Tensor random_tensor(Shape shape, Rng& rng, double std = 1.0) {
    Tensor t(std::move(shape));
    std::normal_distribution<double> normal(0.0, std);
    for (auto& v : t.data()) v = normal(rng);
    return t;
}

inline double dot(const Tensor& a, const Tensor& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

/// Central difference of f with respect to one scalar parameter of net.
inline double central_difference(Network& net, std::size_t flat, const std::function<double()>& f) {
    const double x = net.parameter(flat);
    net.set_parameter(flat, x + kFiniteDiffStep);
    const double up = f();
    net.set_parameter(flat, x - kFiniteDiffStep);
    const double down = f();
    net.set_parameter(flat, x);
    return (up - down) / (2.0 * kFiniteDiffStep);
}

inline std::vector<std::size_t> probe_indices(std::size_t population, std::size_t count, Rng& rng) {
    std::uniform_int_distribution<std::size_t> pick(0, population - 1);
    std::vector<std::size_t> out(count);
    for (auto& i : out) i = pick(rng);
    return out;
}

inline Shape default_sample_shape(const LayerSpecs& specs) {
    if (specs.empty()) throw ConfigError("gradient check needs at least one layer");
    if (specs[0].kind != LayerKind::dense) throw ConfigError("sample shape required when the first layer is not dense");
    return {specs[0].in};
}

}  // namespace detail

/// Compares backward() against central differences of the scalar sum(output * R)
/// for a random batch and random R, at probe_count randomly chosen parameters.
/// Returns the largest relative error.
inline double finite_diff_check(const LayerSpecs& specs, const Shape& sample_shape, std::uint64_t seed,
                                std::size_t probe_count, std::size_t batch = 3) {
    if (probe_count == 0) throw ConfigError("probe count must be at least 1");
    Network net = init_params(specs, sample_shape, seed);
    Rng rng = make_rng(derive_seed(seed, 0x9c));
    Shape in_shape{batch};
    in_shape.insert(in_shape.end(), sample_shape.begin(), sample_shape.end());
    const Tensor x = detail::random_tensor(in_shape, rng);
    auto fwd = forward(net, x, true);
    const Tensor r = detail::random_tensor(fwd.output.shape(), rng);
    const auto grads = backward(net, *fwd.tape, r).grads;

    auto objective = [&] { return detail::dot(forward(net, x).output, r); };
    double worst = 0.0;
    for (auto flat : detail::probe_indices(net.parameter_count(), probe_count, rng))
        worst = std::max(worst, relative_error(grads.flat(flat), detail::central_difference(net, flat, objective)));
    return worst;
}

inline double finite_diff_check(const LayerSpecs& specs, std::uint64_t seed, std::size_t probe_count) {
    return finite_diff_check(specs, detail::default_sample_shape(specs), seed, probe_count);
}

/// Extractor -> GRL -> head with a cross-entropy on the head. The extractor
/// gradient that arrives through grl_backward must equal the negated numeric
/// gradient of the same loss without reversal.
inline double grl_path_check(const LayerSpecs& extractor, const LayerSpecs& head, const Shape& sample_shape,
                             std::uint64_t seed, std::size_t probe_count, std::size_t batch = 4) {
    if (probe_count == 0) throw ConfigError("probe count must be at least 1");
    Network f = init_params(extractor, sample_shape, derive_seed(seed, 1));
    const Shape feat = output_shape(extractor, sample_shape);
    Network d = init_params(head, feat, derive_seed(seed, 2));
    Rng rng = make_rng(derive_seed(seed, 0x9d));
    Shape in_shape{batch};
    in_shape.insert(in_shape.end(), sample_shape.begin(), sample_shape.end());
    const Tensor x = detail::random_tensor(in_shape, rng);
    const std::size_t width = output_shape(head, feat).back();
    std::vector<std::size_t> labels(batch);
    std::uniform_int_distribution<std::size_t> label(0, width - 1);
    for (auto& l : labels) l = label(rng);

    auto ff = forward(f, x, true);
    auto fd = forward(d, grl_forward(ff.output), true);
    const auto loss = classification_loss(fd.output, labels);
    const auto feature_grad = backward(d, *fd.tape, loss.logit_grad).input_grad;
    const auto grads = backward(f, *ff.tape, grl_backward(feature_grad)).grads;

    auto objective = [&] { return classification_loss(forward(d, forward(f, x).output).output, labels).loss; };
    double worst = 0.0;
    for (auto flat : detail::probe_indices(f.parameter_count(), probe_count, rng))
        worst = std::max(worst, relative_error(grads.flat(flat), -detail::central_difference(f, flat, objective)));
    return worst;
}

/// Checks a loss gradient with respect to the entries of its input tensors.
/// loss(inputs) returns the value; grads are the analytic gradients.
inline double tensor_gradient_check(std::vector<Tensor> inputs, const std::vector<Tensor>& grads,
                                    const std::function<double(const std::vector<Tensor>&)>& loss,
                                    std::size_t probe_count, Rng& rng) {
    std::size_t total = 0;
    for (const auto& t : inputs) total += t.size();
    double worst = 0.0;
    for (auto flat : detail::probe_indices(total, probe_count, rng)) {
        std::size_t k = 0;
        while (flat >= inputs[k].size()) flat -= inputs[k++].size();
        const double v = inputs[k][flat];
        inputs[k][flat] = v + kFiniteDiffStep;
        const double up = loss(inputs);
        inputs[k][flat] = v - kFiniteDiffStep;
        const double down = loss(inputs);
        inputs[k][flat] = v;
        worst = std::max(worst, relative_error(grads[k][flat], (up - down) / (2.0 * kFiniteDiffStep)));
    }
    return worst;
}

struct GradcheckEntry {
    std::string name;
    std::size_t probes = 0;
    double max_relative_error = 0.0;
};

/// Every layer kind, the classification, domain and consistency losses, and the
/// reversed path into an extractor.
inline std::vector<GradcheckEntry> run_gradcheck(std::uint64_t seed, std::size_t probes = 200) {
    std::vector<GradcheckEntry> out;
    const LayerSpecs mlp{LayerSpec::dense(6, 5), LayerSpec::relu(), LayerSpec::dense(5, 4)};
    out.push_back({"dense_relu", probes, finite_diff_check(mlp, derive_seed(seed, 10), probes)});

    const LayerSpecs cnn{LayerSpec::conv2d(2, 3, 3, 2), LayerSpec::relu(), LayerSpec::flatten(), LayerSpec::dense(27, 4)};
    out.push_back({"conv2d_relu_flatten_dense", probes, finite_diff_check(cnn, {2, 7, 7}, derive_seed(seed, 11), probes)});

    Rng rng = make_rng(derive_seed(seed, 12));
    {
        const std::vector<std::size_t> labels{0, 3, 1, 2, 2};
        const std::vector<Tensor> logits{detail::random_tensor({5, 4}, rng)};
        const auto r = classification_loss(logits[0], labels);
        out.push_back({"classification_loss", probes,
                       tensor_gradient_check(
                           logits, {r.logit_grad},
                           [&](const std::vector<Tensor>& in) { return classification_loss(in[0], labels).loss; },
                           probes, rng)});
    }
    {
        std::vector<DomainBatch> batches;
        for (std::size_t c = 0; c < 3; ++c)
            batches.push_back({detail::random_tensor({2 + c, 3}, rng), std::vector<std::size_t>(2 + c, c)});
        const auto r = domain_loss(batches);
        std::vector<Tensor> logits;
        for (const auto& b : batches) logits.push_back(b.logits);
        out.push_back({"domain_loss", probes,
                       tensor_gradient_check(
                           logits, r.logit_grads,
                           [&](const std::vector<Tensor>& in) {
                               auto b = batches;
                               for (std::size_t c = 0; c < b.size(); ++c) b[c].logits = in[c];
                               return domain_loss(b).total;
                           },
                           probes, rng)});
    }
    {
        // Through softmax so perturbed inputs stay on the simplex.
        std::vector<Tensor> logits;
        for (int i = 0; i < 3; ++i) logits.push_back(detail::random_tensor({4, 5}, rng));
        auto lp = [](const std::vector<Tensor>& in) {
            PredictionSet set;
            for (const auto& l : in) set.predictions.push_back(softmax(l));
            return consistency_loss(set);
        };
        const auto r = lp(logits);
        std::vector<Tensor> grads;
        for (std::size_t i = 0; i < logits.size(); ++i) grads.push_back(softmax_backward(softmax(logits[i]), r.prob_grads[i]));
        out.push_back({"consistency_loss", probes,
                       tensor_gradient_check(
                           logits, grads, [&](const std::vector<Tensor>& in) { return lp(in).loss; }, probes, rng)});
    }
    out.push_back({"grl_path", probes,
                   grl_path_check({LayerSpec::conv2d(1, 2, 3, 2), LayerSpec::relu(), LayerSpec::flatten(),
                                   LayerSpec::dense(8, 6)},
                                  {LayerSpec::dense(6, 3)}, {1, 6, 6}, derive_seed(seed, 13), probes)});
    return out;
}

}  // namespace aftl
