#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "aftl/errors.hpp"
#include "aftl/tensor.hpp"

namespace aftl {

/// Row-wise argmax; the lowest index wins ties.
inline std::vector<std::size_t> argmax_rows(const Tensor& scores) {
    if (scores.rank() != 2) throw ShapeError("argmax_rows expects [B x K]");
    std::vector<std::size_t> out(scores.dim(0));
    for (std::size_t r = 0; r < out.size(); ++r) {
        const auto row = scores.row(r);
        std::size_t best = 0;
        for (std::size_t j = 1; j < row.size(); ++j)
            if (row[j] > row[best]) best = j;
        out[r] = best;
    }
    return out;
}

/// votes[i][j] is classifier i's class for sample j. Returns the per-sample
/// mode; ties go to the lowest class index.
inline std::vector<std::size_t> majority_vote(std::span<const std::vector<std::size_t>> votes, std::size_t classes) {
    if (votes.empty()) throw DomainError("majority vote needs at least one classifier");
    const std::size_t batch = votes[0].size();
    for (const auto& v : votes)
        if (v.size() != batch) throw ShapeError("classifiers voted on different batch sizes");
    std::vector<std::size_t> decisions(batch);
    std::vector<std::size_t> tally(classes);
    for (std::size_t j = 0; j < batch; ++j) {
        std::fill(tally.begin(), tally.end(), 0);
        for (const auto& v : votes) {
            if (v[j] >= classes) throw DomainError("vote " + std::to_string(v[j]) + " outside [0, K)");
            ++tally[v[j]];
        }
        std::size_t best = 0;
        for (std::size_t c = 1; c < classes; ++c)
            if (tally[c] > tally[best]) best = c;
        decisions[j] = best;
    }
    return decisions;
}

struct Evaluation {
    double accuracy = 0.0;
    std::size_t classes = 0;
    std::vector<std::size_t> confusion;  // classes x classes, row = true class

    std::size_t at(std::size_t truth, std::size_t predicted) const { return confusion.at(truth * classes + predicted); }
};

inline Evaluation evaluate(std::span<const std::size_t> decisions, std::span<const std::size_t> labels,
                           std::size_t classes) {
    if (decisions.size() != labels.size()) throw DomainError("decisions and labels differ in length");
    if (decisions.empty()) throw DomainError("nothing to evaluate");
    Evaluation e{0.0, classes, std::vector<std::size_t>(classes * classes, 0)};
    std::size_t correct = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] >= classes || decisions[i] >= classes) throw DomainError("class index outside [0, K)");
        ++e.confusion[labels[i] * classes + decisions[i]];
        correct += decisions[i] == labels[i];
    }
    e.accuracy = static_cast<double>(correct) / static_cast<double>(labels.size());
    return e;
}

}  // namespace aftl
