#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "aftl/errors.hpp"
#include "aftl/tensor.hpp"

namespace aftl {

/// Smallest probability the cross-entropy terms will take the log of.
inline constexpr double kMinProbability = 1e-300;

/// Row-wise softmax with max subtraction.
inline Tensor softmax(const Tensor& logits) {
    if (logits.rank() != 2) throw ShapeError("softmax expects [B x K], got " + shape_string(logits.shape()));
    Tensor p(logits.shape());
    const std::size_t k = logits.dim(1);
    for (std::size_t r = 0; r < logits.dim(0); ++r) {
        const auto x = logits.row(r);
        auto y = p.row(r);
        const double m = *std::max_element(x.begin(), x.end());
        double z = 0.0;
        for (std::size_t j = 0; j < k; ++j) z += (y[j] = std::exp(x[j] - m));
        for (std::size_t j = 0; j < k; ++j) y[j] /= z;
    }
    return p;
}

/// Backpropagates a gradient w.r.t. softmax probabilities to the logits.
inline Tensor softmax_backward(const Tensor& probs, const Tensor& prob_grad) {
    if (probs.shape() != prob_grad.shape()) throw ShapeError("softmax_backward: shape mismatch");
    Tensor g(probs.shape());
    for (std::size_t r = 0; r < probs.rows(); ++r) {
        const auto p = probs.row(r);
        const auto dp = prob_grad.row(r);
        double dot = 0.0;
        for (std::size_t j = 0; j < p.size(); ++j) dot += p[j] * dp[j];
        auto out = g.row(r);
        for (std::size_t j = 0; j < p.size(); ++j) out[j] = p[j] * (dp[j] - dot);
    }
    return g;
}

struct ClassBatch {
    Tensor logits;                    // batch x K
    std::vector<std::size_t> labels;  // each in [0, K)
};

struct DomainBatch {
    Tensor logits;                           // batch x (N+1)
    std::vector<std::size_t> domain_labels;  // each in [0, N]
};

struct LossResult {
    double loss = 0.0;
    Tensor logit_grad;
};

/// Mean cross-entropy over the batch and its gradient (softmax - onehot) / n.
inline LossResult classification_loss(const Tensor& logits, std::span<const std::size_t> labels) {
    if (logits.rank() != 2) throw ShapeError("logits must be [B x K], got " + shape_string(logits.shape()));
    const std::size_t n = logits.dim(0), k = logits.dim(1);
    if (n == 0) throw DomainError("cross-entropy over an empty batch");
    if (labels.size() != n)
        throw DomainError("batch has " + std::to_string(n) + " rows but " + std::to_string(labels.size()) + " labels");
    const double log_floor = std::log(kMinProbability);
    LossResult r{0.0, Tensor(logits.shape())};
    const double inv_n = 1.0 / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
        if (labels[i] >= k) throw DomainError("label " + std::to_string(labels[i]) + " outside [0, " + std::to_string(k) + ")");
        const auto x = logits.row(i);
        auto g = r.logit_grad.row(i);
        const double m = *std::max_element(x.begin(), x.end());
        double z = 0.0;
        for (std::size_t j = 0; j < k; ++j) z += std::exp(x[j] - m);
        const double log_z = std::log(z);
        r.loss -= std::max(x[labels[i]] - m - log_z, log_floor);
        for (std::size_t j = 0; j < k; ++j) g[j] = std::exp(x[j] - m - log_z) * inv_n;
        g[labels[i]] -= inv_n;
    }
    r.loss *= inv_n;
    return r;
}

inline LossResult classification_loss(const ClassBatch& batch) { return classification_loss(batch.logits, batch.labels); }

struct DomainLossResult {
    double total = 0.0;
    std::vector<double> per_client;
    std::vector<Tensor> logit_grads;
};

/// Client-discrimination loss: sum over clients of each client's mean cross-entropy.
inline DomainLossResult domain_loss(std::span<const DomainBatch> batches) {
    if (batches.empty()) throw DomainError("domain loss needs at least one client batch");
    const auto width = batches[0].logits.rank() == 2 ? batches[0].logits.dim(1) : 0;
    DomainLossResult r;
    for (std::size_t c = 0; c < batches.size(); ++c) {
        const auto& b = batches[c];
        if (b.logits.rank() != 2 || b.logits.dim(1) != width)
            throw ShapeError("client batch " + std::to_string(c) + " has discriminator width " +
                             (b.logits.rank() == 2 ? std::to_string(b.logits.dim(1)) : std::string("?")) +
                             ", expected " + std::to_string(width));
        if (b.logits.dim(0) == 0) throw DomainError("client batch " + std::to_string(c) + " is empty");
        auto term = classification_loss(b.logits, b.domain_labels);
        r.total += term.loss;
        r.per_client.push_back(term.loss);
        r.logit_grads.push_back(std::move(term.logit_grad));
    }
    return r;
}

/// Outputs of N source classifiers on the same target batch; each batch x K.
struct PredictionSet {
    std::vector<Tensor> predictions;

    std::size_t classifiers() const noexcept { return predictions.size(); }
};

inline void validate_prediction_set(const PredictionSet& set, double tol = 1e-9) {
    if (set.predictions.empty()) throw DomainError("prediction set needs at least one classifier");
    const auto& shape = set.predictions[0].shape();
    if (shape.size() != 2) throw ShapeError("predictions must be [B x K]");
    for (std::size_t i = 0; i < set.predictions.size(); ++i) {
        const auto& p = set.predictions[i];
        if (p.shape() != shape)
            throw ShapeError("classifier " + std::to_string(i) + " predicted " + shape_string(p.shape()) +
                             ", expected " + shape_string(shape));
        for (std::size_t r = 0; r < p.rows(); ++r) {
            double s = 0.0;
            for (double v : p.row(r)) {
                if (!(v >= 0.0)) throw DomainError("negative or NaN probability");
                s += v;
            }
            if (std::abs(s - 1.0) > tol) throw DomainError("prediction row does not sum to 1");
        }
    }
}

/// Elementwise arithmetic mean over classifiers.
inline Tensor mean_prediction(const PredictionSet& set) {
    if (set.predictions.empty()) throw DomainError("mean over zero classifiers");
    Tensor m = set.predictions[0];
    for (std::size_t i = 1; i < set.predictions.size(); ++i) m += set.predictions[i];
    if (set.predictions.size() > 1) m *= 1.0 / static_cast<double>(set.predictions.size());
    return m;
}

struct ConsistencyResult {
    double loss = 0.0;
    std::vector<Tensor> prob_grads;  // one per classifier, same shape as its predictions
};

/// Mean L2 distance of every classifier's prediction row from the ensemble mean row.
/// Gradients account for each classifier's share of the mean. A zero-norm row
/// contributes zero (sub)gradient.
inline ConsistencyResult consistency_loss(const PredictionSet& set) {
    validate_prediction_set(set);
    const std::size_t n_cls = set.predictions.size();
    const auto& shape = set.predictions[0].shape();
    const std::size_t rows = shape[0], k = shape[1];
    ConsistencyResult r;
    r.prob_grads.assign(n_cls, Tensor(shape));
    if (rows == 0) throw DomainError("consistency loss over an empty target batch");
    const Tensor mean = mean_prediction(set);
    const double scale = 1.0 / (static_cast<double>(rows) * static_cast<double>(n_cls));

    std::vector<double> unit(n_cls * k);  // unit direction of each classifier's deviation
    std::vector<double> unit_sum(k);
    for (std::size_t j = 0; j < rows; ++j) {
        // Unanimous rows sit at the kink of every norm; rounding in the mean must not
        // turn them into unit vectors.
        const auto first = set.predictions[0].row(j);
        const bool unanimous = std::all_of(set.predictions.begin() + 1, set.predictions.end(), [&](const Tensor& p) {
            const auto row = p.row(j);
            return std::equal(row.begin(), row.end(), first.begin());
        });
        if (unanimous) continue;

        std::fill(unit_sum.begin(), unit_sum.end(), 0.0);
        const auto mj = mean.row(j);
        for (std::size_t i = 0; i < n_cls; ++i) {
            const auto pj = set.predictions[i].row(j);
            double sq = 0.0;
            for (std::size_t c = 0; c < k; ++c) {
                const double d = pj[c] - mj[c];
                unit[i * k + c] = d;
                sq += d * d;
            }
            const double norm = std::sqrt(sq);
            r.loss += norm;
            for (std::size_t c = 0; c < k; ++c) {
                unit[i * k + c] = norm > 0.0 ? unit[i * k + c] / norm : 0.0;
                unit_sum[c] += unit[i * k + c];
            }
        }
        for (std::size_t i = 0; i < n_cls; ++i) {
            auto g = r.prob_grads[i].row(j);
            for (std::size_t c = 0; c < k; ++c)
                g[c] = scale * (unit[i * k + c] - unit_sum[c] / static_cast<double>(n_cls));
        }
    }
    r.loss *= scale;
    return r;
}

}  // namespace aftl
