#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include "aftl/inference.hpp"
#include "aftl/rng.hpp"

using namespace aftl;

namespace {

std::vector<std::size_t> vote(std::initializer_list<std::initializer_list<std::size_t>> v, std::size_t classes = 10) {
    std::vector<std::vector<std::size_t>> votes;
    for (auto r : v) votes.emplace_back(r);
    return majority_vote(votes, classes);
}

}  // namespace

TEST(MajorityVote, Examples) {
    EXPECT_EQ(vote({{3}, {3}, {7}}), std::vector<std::size_t>{3});
    EXPECT_EQ(vote({{5}}), std::vector<std::size_t>{5});
    EXPECT_EQ(vote({{2}, {4}}), std::vector<std::size_t>{2});
    EXPECT_EQ(vote({{4}, {2}}), std::vector<std::size_t>{2});
    EXPECT_EQ(vote({{9, 1}, {8, 1}, {8, 0}}), (std::vector<std::size_t>{8, 1}));
}

TEST(MajorityVote, DecisionIsAMode) {
    Rng rng = make_rng(3);
    std::uniform_int_distribution<std::size_t> cls(0, 3);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<std::vector<std::size_t>> votes(5, std::vector<std::size_t>(8));
        for (auto& v : votes)
            for (auto& x : v) x = cls(rng);
        const auto d = majority_vote(votes, 4);
        auto shuffled = votes;
        std::shuffle(shuffled.begin(), shuffled.end(), rng);
        EXPECT_EQ(majority_vote(shuffled, 4), d);
        for (std::size_t j = 0; j < 8; ++j) {
            std::vector<int> tally(4);
            for (const auto& v : votes) ++tally[v[j]];
            const int best = *std::max_element(tally.begin(), tally.end());
            EXPECT_EQ(tally[d[j]], best);
            for (std::size_t c = 0; c < d[j]; ++c) EXPECT_LT(tally[c], best);
        }
    }
}

TEST(MajorityVote, UnanimousEqualsAnyClassifier) {
    const std::vector<std::size_t> p{0, 9, 3, 3, 7};
    const std::vector<std::vector<std::size_t>> votes(4, p);
    EXPECT_EQ(majority_vote(votes, 10), p);
}

TEST(MajorityVote, Errors) {
    EXPECT_THROW(majority_vote(std::vector<std::vector<std::size_t>>{}, 10), DomainError);
    EXPECT_THROW(vote({{1, 2}, {1}}), ShapeError);
    EXPECT_THROW(vote({{10}}), DomainError);
}

TEST(Evaluate, AllCorrect) {
    const std::vector<std::size_t> y{0, 1, 2, 2, 1};
    const auto e = evaluate(y, y, 3);
    EXPECT_EQ(e.accuracy, 1.0);
    for (std::size_t a = 0; a < 3; ++a)
        for (std::size_t b = 0; b < 3; ++b)
            if (a != b) EXPECT_EQ(e.at(a, b), 0u);
    EXPECT_EQ(e.at(2, 2), 2u);
}

TEST(Evaluate, ConstantPredictionOnUniformLabels) {
    std::vector<std::size_t> labels(100), decisions(100, 0);
    for (std::size_t i = 0; i < 100; ++i) labels[i] = i % 10;
    EXPECT_DOUBLE_EQ(evaluate(decisions, labels, 10).accuracy, 0.1);
}

TEST(Evaluate, MatchesLoopOracle) {
    Rng rng = make_rng(8);
    std::uniform_int_distribution<std::size_t> cls(0, 9);
    std::vector<std::size_t> d(100), y(100);
    for (auto& v : d) v = cls(rng);
    for (auto& v : y) v = cls(rng);
    const auto e = evaluate(d, y, 10);
    std::size_t correct = 0, trace = 0, total = 0;
    for (std::size_t i = 0; i < 100; ++i) correct += d[i] == y[i];
    for (std::size_t t = 0; t < 10; ++t)
        for (std::size_t p = 0; p < 10; ++p) {
            std::size_t n = 0;
            for (std::size_t i = 0; i < 100; ++i) n += y[i] == t && d[i] == p;
            EXPECT_EQ(e.at(t, p), n);
            total += n;
            if (t == p) trace += n;
        }
    EXPECT_EQ(e.accuracy, static_cast<double>(correct) / 100.0);
    EXPECT_EQ(e.accuracy, static_cast<double>(trace) / static_cast<double>(total));
}

TEST(Evaluate, Errors) {
    const std::vector<std::size_t> none, one{1}, two{1, 2};
    EXPECT_THROW(evaluate(none, none, 10), DomainError);
    EXPECT_THROW(evaluate(one, two, 10), DomainError);
}

TEST(ArgmaxRows, LowestIndexWinsTies) {
    EXPECT_EQ(argmax_rows(Tensor::matrix(2, 3, {0.2, 0.5, 0.5, 1, 0, 1})), (std::vector<std::size_t>{1, 0}));
}
