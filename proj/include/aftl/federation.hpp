#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "aftl/datasets.hpp"
#include "aftl/errors.hpp"
#include "aftl/inference.hpp"
#include "aftl/losses.hpp"
#include "aftl/messages.hpp"
#include "aftl/nn.hpp"
#include "aftl/rng.hpp"
#include "aftl/tensor.hpp"

namespace aftl {

inline constexpr std::uint32_t kTargetClientId = 0;  // sources are 1..N

/// Layer stacks for the three networks. The extractor output feeds both the
/// classifier and the discriminator.
struct Architecture {
    Shape sample_shape;
    LayerSpecs extractor;
    LayerSpecs classifier;
    LayerSpecs discriminator;
    std::size_t classes = 0;
    std::size_t clients = 0;  // N + 1

    std::size_t feature_width() const { return output_shape(extractor, sample_shape).at(0); }

    void validate() const {
        const auto feat = output_shape(extractor, sample_shape);
        if (feat.size() != 1) throw ConfigError("feature extractor must end in a flat feature vector");
        if (output_shape(classifier, feat) != Shape{classes})
            throw ConfigError("classifier output width must equal the class count " + std::to_string(classes));
        if (output_shape(discriminator, feat) != Shape{clients})
            throw ConfigError("discriminator output width must equal the client count " + std::to_string(clients));
    }

    /// conv2d(C->8, 5x5, stride 2) -> relu -> flatten -> dense(->64) -> relu;
    /// classifier dense(64->K); discriminator dense(64->32) -> relu -> dense(32->N+1).
    static Architecture conv(const Shape& sample_shape, std::size_t classes, std::size_t sources) {
        Architecture a{sample_shape, {}, {}, {}, classes, sources + 1};
        a.extractor = {LayerSpec::conv2d(sample_shape.at(0), 8, 5, 2), LayerSpec::relu(), LayerSpec::flatten()};
        const auto flat = output_shape(a.extractor, sample_shape).at(0);
        a.extractor.push_back(LayerSpec::dense(flat, 64));
        a.extractor.push_back(LayerSpec::relu());
        a.classifier = {LayerSpec::dense(64, classes)};
        a.discriminator = {LayerSpec::dense(64, 32), LayerSpec::relu(), LayerSpec::dense(32, sources + 1)};
        return a;
    }

    /// flatten -> dense(->hidden) -> relu; same heads as conv() at width `hidden`.
    static Architecture dense(const Shape& sample_shape, std::size_t classes, std::size_t sources,
                              std::size_t hidden = 32) {
        Architecture a{sample_shape, {}, {}, {}, classes, sources + 1};
        a.extractor = {LayerSpec::flatten(), LayerSpec::dense(shape_size(sample_shape), hidden), LayerSpec::relu()};
        a.classifier = {LayerSpec::dense(hidden, classes)};
        a.discriminator = {LayerSpec::dense(hidden, hidden), LayerSpec::relu(), LayerSpec::dense(hidden, sources + 1)};
        return a;
    }
};

/// theta_F, theta_C, theta_D.
struct ModelParams {
    Network feature_extractor;
    Network classifier;
    Network discriminator;
};

inline ModelParams init_model(const Architecture& arch, std::uint64_t seed) {
    arch.validate();
    return {init_params(arch.extractor, derive_seed(seed, 1)), init_params(arch.classifier, derive_seed(seed, 2)),
            init_params(arch.discriminator, derive_seed(seed, 3))};
}

struct RoundSchedule {
    std::size_t rounds = 100;
    std::size_t init_epochs = 50;
    std::size_t batch_size = 100;
    double eta = 0.01;
    bool discriminator_enabled = true;
    bool consistency_enabled = true;

    void validate() const {
        if (batch_size == 0) throw ConfigError("batch size must be positive");
        if (!(eta > 0.0) || !std::isfinite(eta)) throw ConfigError("learning rate must be positive");
    }
};

/// Cyclic minibatches over a shard, reshuffled at the start of every epoch.
class BatchCursor {
public:
    BatchCursor() = default;
    BatchCursor(std::size_t shard_size, std::uint64_t seed) : size_(shard_size), seed_(seed) {}

    std::vector<std::size_t> next(std::size_t batch_size) {
        if (size_ == 0) throw DomainError("cannot draw a batch from an empty shard");
        if (pos_ == 0 || pos_ >= size_) reshuffle();
        const std::size_t n = std::min(batch_size, size_ - pos_);
        std::vector<std::size_t> batch(order_.begin() + static_cast<std::ptrdiff_t>(pos_),
                                       order_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
        pos_ += n;
        return batch;
    }

    std::size_t epoch() const noexcept { return epoch_; }

    friend bool operator==(const BatchCursor&, const BatchCursor&) = default;

private:
    void reshuffle() {
        order_.resize(size_);
        std::iota(order_.begin(), order_.end(), std::size_t{0});
        Rng rng = make_rng(derive_seed(seed_, epoch_));
        std::shuffle(order_.begin(), order_.end(), rng);
        ++epoch_;
        pos_ = 0;
    }

    std::size_t size_ = 0;
    std::uint64_t seed_ = 0;
    std::size_t epoch_ = 0;
    std::size_t pos_ = 0;
    std::vector<std::size_t> order_;
};

struct SourceClientState {
    std::uint32_t id = 1;
    Network extractor;
    Network classifier;
    std::shared_ptr<const LabeledSet> shard;
    BatchCursor cursor;

    // Last feature upload; the next DiscFeedback is backpropagated through this tape.
    std::vector<std::uint64_t> uploaded_indices;
    std::optional<Tape> upload_tape;
    Shape upload_shape;
    // Last prediction on broadcast target features, for ConsistencyFeedback.
    std::optional<Tape> prediction_tape;
    Tensor prediction_probs;

    std::optional<DiscFeedback> pending_disc;
    std::optional<ConsistencyFeedback> pending_consistency;
    double last_loss = 0.0;
};

struct TargetClientState {
    Network extractor;
    std::shared_ptr<const UnlabeledSet> train;
    std::shared_ptr<const LabeledSet> test;  // evaluation only
    BatchCursor cursor;

    std::vector<std::uint64_t> uploaded_indices;
    std::optional<Tape> upload_tape;
    Shape upload_shape;
    std::optional<DiscFeedback> pending_disc;
};

struct ServerState {
    Network discriminator;
    std::uint64_t round = 0;
    std::vector<FeatureUpload> latest_uploads;  // by client id order
};

namespace detail {

inline void check_feedback_shape(const Shape& expected, const Tensor& grads, std::uint32_t id, const char* what) {
    if (grads.shape() != expected)
        throw ProtocolError(std::string(what) + " for client " + std::to_string(id) + " has shape " +
                            shape_string(grads.shape()) + ", expected " + shape_string(expected));
}

}  // namespace detail

/// Supervised step on L_c plus, when present, the reversed discriminator gradient
/// into theta_F and the consistency gradient into theta_C. Returns the upload of
/// the same batch under the updated extractor.
inline FeatureUpload source_local_step(SourceClientState& c, std::span<const std::size_t> batch,
                                       const std::optional<DiscFeedback>& feedback,
                                       const std::optional<ConsistencyFeedback>& cfeedback, double eta) {
    if (feedback) {
        if (feedback->client_id != c.id || !c.upload_tape)
            throw ProtocolError("discriminator feedback does not belong to client " + std::to_string(c.id));
        detail::check_feedback_shape(c.upload_shape, feedback->feature_grads, c.id, "discriminator feedback");
    }
    if (cfeedback) {
        if (cfeedback->client_id != c.id || !c.prediction_tape)
            throw ProtocolError("consistency feedback does not belong to client " + std::to_string(c.id));
        detail::check_feedback_shape(c.prediction_probs.shape(), cfeedback->probability_grads, c.id,
                                     "consistency feedback");
    }

    const Tensor x = c.shard->images.gather_rows(batch);
    std::vector<std::size_t> y;
    y.reserve(batch.size());
    for (auto i : batch) y.push_back(c.shard->labels.at(i));

    auto f = forward(c.extractor, x, true);
    auto logits = forward(c.classifier, f.output, true);
    auto lc = classification_loss(logits.output, y);
    auto bc = backward(c.classifier, *logits.tape, lc.logit_grad);
    auto bf = backward(c.extractor, *f.tape, bc.input_grad);
    GradientBuffer grad_f = std::move(bf.grads);
    GradientBuffer grad_c = std::move(bc.grads);

    if (feedback) grad_f += backward(c.extractor, *c.upload_tape, grl_backward(feedback->feature_grads)).grads;
    if (cfeedback) {
        const Tensor dlogits = softmax_backward(c.prediction_probs, cfeedback->probability_grads);
        grad_c += backward(c.classifier, *c.prediction_tape, dlogits).grads;
    }

    sgd_step(c.extractor, grad_f, eta);
    sgd_step(c.classifier, grad_c, eta);
    c.last_loss = lc.loss;

    auto up = forward(c.extractor, x, true);
    c.upload_tape = std::move(up.tape);
    c.upload_shape = up.output.shape();
    c.uploaded_indices.assign(batch.begin(), batch.end());
    c.prediction_tape.reset();
    return FeatureUpload{c.id, std::move(up.output), c.uploaded_indices};
}

struct TargetStepOutput {
    FeatureUpload upload;
    TargetFeatureBroadcast broadcast;
};

/// theta_F^t moves only along the reversed discriminator gradient; no labels
/// are involved. Returns the upload of a fresh batch.
inline TargetStepOutput target_local_step(TargetClientState& t, std::span<const std::size_t> batch,
                                          const std::optional<DiscFeedback>& feedback, double eta) {
    if (feedback) {
        if (feedback->client_id != kTargetClientId || !t.upload_tape)
            throw ProtocolError("discriminator feedback does not belong to the target client");
        detail::check_feedback_shape(t.upload_shape, feedback->feature_grads, kTargetClientId,
                                     "discriminator feedback");
        const auto g = backward(t.extractor, *t.upload_tape, grl_backward(feedback->feature_grads));
        sgd_step(t.extractor, g.grads, eta);
    }
    const Tensor x = t.train->images.gather_rows(batch);
    auto up = forward(t.extractor, x, true);
    t.upload_tape = std::move(up.tape);
    t.upload_shape = up.output.shape();
    t.uploaded_indices.assign(batch.begin(), batch.end());
    FeatureUpload upload{kTargetClientId, up.output, t.uploaded_indices};
    return {std::move(upload), TargetFeatureBroadcast{std::move(up.output)}};
}

struct ServerStepResult {
    std::vector<DiscFeedback> feedback;  // empty when the discriminator is disabled
    double domain_loss = 0.0;
};

/// One SGD step of theta_D on L_d over every client's upload (domain label =
/// client id). Feature gradients are taken at the pre-update discriminator.
inline ServerStepResult server_step(ServerState& s, std::span<const FeatureUpload> uploads, std::size_t sources,
                                    const RoundSchedule& schedule) {
    if (!schedule.discriminator_enabled) return {};
    std::vector<const FeatureUpload*> by_id(sources + 1, nullptr);
    for (const auto& u : uploads) {
        if (u.client_id > sources) throw ProtocolError("upload from unknown client " + std::to_string(u.client_id));
        if (by_id[u.client_id]) throw ProtocolError("duplicate upload from client " + std::to_string(u.client_id));
        by_id[u.client_id] = &u;
    }
    for (std::uint32_t id = 0; id <= sources; ++id)
        if (!by_id[id]) throw StragglerError(static_cast<int>(id));

    std::vector<DomainBatch> batches;
    std::vector<Tape> tapes;
    for (const auto* u : by_id) {
        auto out = forward(s.discriminator, u->features, true);
        batches.push_back({std::move(out.output), std::vector<std::size_t>(u->features.rows(), u->client_id)});
        tapes.push_back(std::move(*out.tape));
    }
    const auto ld = domain_loss(batches);

    ServerStepResult result;
    result.domain_loss = ld.total;
    GradientBuffer grad(s.discriminator);
    for (std::size_t id = 0; id <= sources; ++id) {
        auto b = backward(s.discriminator, tapes[id], ld.logit_grads[id]);
        grad += b.grads;
        result.feedback.push_back({static_cast<std::uint32_t>(id), std::move(b.input_grad), ld.per_client[id]});
    }
    sgd_step(s.discriminator, grad, schedule.eta);
    ++s.round;
    s.latest_uploads.clear();
    for (const auto* u : by_id) s.latest_uploads.push_back(*u);
    return result;
}

/// A source classifier's probabilities on the broadcast target features.
inline PredictionUpload source_predict(SourceClientState& c, const TargetFeatureBroadcast& target) {
    auto out = forward(c.classifier, target.features, true);
    c.prediction_probs = softmax(out.output);
    c.prediction_tape = std::move(out.tape);
    return {c.id, c.prediction_probs};
}

struct ConsistencyRoundResult {
    std::vector<ConsistencyFeedback> feedback;  // by source id order
    double loss = 0.0;
};

/// Server side of the consistency exchange: L_p over the uploaded predictions.
inline ConsistencyRoundResult server_consistency(std::span<const PredictionUpload> uploads, std::size_t sources) {
    std::vector<const PredictionUpload*> by_id(sources + 1, nullptr);
    for (const auto& u : uploads) {
        if (u.client_id == kTargetClientId || u.client_id > sources)
            throw ProtocolError("prediction upload from non-source client " + std::to_string(u.client_id));
        if (by_id[u.client_id]) throw ProtocolError("duplicate prediction from client " + std::to_string(u.client_id));
        by_id[u.client_id] = &u;
    }
    PredictionSet set;
    for (std::uint32_t id = 1; id <= sources; ++id) {
        if (!by_id[id]) throw StragglerError(static_cast<int>(id));
        if (!set.predictions.empty() && by_id[id]->probabilities.shape() != set.predictions[0].shape())
            throw ProtocolError("prediction batch mismatch from client " + std::to_string(id));
        set.predictions.push_back(by_id[id]->probabilities);
    }
    auto lp = consistency_loss(set);
    ConsistencyRoundResult r;
    r.loss = lp.loss;
    for (std::uint32_t id = 1; id <= sources; ++id)
        r.feedback.push_back({id, std::move(lp.prob_grads[id - 1]), lp.loss});
    return r;
}

/// Broadcast, predict, compute L_p: one ConsistencyFeedback per source client.
inline ConsistencyRoundResult consistency_round(std::span<SourceClientState> sources,
                                                const TargetFeatureBroadcast& target) {
    std::vector<PredictionUpload> uploads;
    for (auto& c : sources) uploads.push_back(source_predict(c, target));
    return server_consistency(uploads, sources.size());
}

struct MetricsRow {
    std::size_t round = 0;
    double source_loss = 0.0;
    double domain_loss = 0.0;
    double consistency_loss = 0.0;
    double target_accuracy = std::numeric_limits<double>::quiet_NaN();
    double wall_ms = 0.0;
};

/// Every inter-participant message passes through encode/decode; the encoded
/// bytes are optionally kept as a transcript.
class MessageBus {
public:
    explicit MessageBus(bool record = false) : record_(record) {}

    template <typename M>
    M send(const M& msg) {
        std::vector<std::uint8_t> bytes;
        encode(Message{msg}, bytes);
        auto decoded = std::get<M>(decode(bytes));
        if (record_) transcript_.insert(transcript_.end(), bytes.begin(), bytes.end());
        return decoded;
    }

    bool recording() const noexcept { return record_; }
    const std::vector<std::uint8_t>& transcript() const noexcept { return transcript_; }
    std::vector<std::uint8_t> take_transcript() noexcept { return std::exchange(transcript_, {}); }
    void restore_transcript(std::vector<std::uint8_t> bytes) { transcript_ = std::move(bytes); }

private:
    bool record_;
    std::vector<std::uint8_t> transcript_;
};

struct Federation {
    Architecture arch;
    RoundSchedule schedule;
    std::uint64_t seed = 0;
    std::vector<SourceClientState> sources;
    TargetClientState target;
    ServerState server;
    MessageBus bus;
    bool initialized = false;

    std::size_t source_count() const noexcept { return sources.size(); }
};

/// Builds participants from a partition. Every network starts from its own seeded
/// initialization; initialization overwrites the clients' copies.
inline Federation make_federation(const Architecture& arch, const RoundSchedule& schedule, Partition data,
                                  std::uint64_t seed, bool record_transcript = false) {
    arch.validate();
    schedule.validate();
    if (data.sources.empty()) throw ConfigError("federation needs at least one source client");
    if (arch.clients != data.sources.size() + 1)
        throw ConfigError("architecture sized for " + std::to_string(arch.clients) + " clients, partition has " +
                          std::to_string(data.sources.size() + 1));
    if (data.target_train.size() == 0) throw ConfigError("target client needs unlabeled training samples");
    Federation f{arch, schedule, seed, {}, {}, {}, MessageBus(record_transcript), false};
    for (std::size_t i = 0; i < data.sources.size(); ++i) {
        const auto id = static_cast<std::uint32_t>(i + 1);
        if (data.sources[i].size() == 0) throw ConfigError("source client " + std::to_string(id) + " has no samples");
        auto m = init_model(arch, derive_seed(seed, 0xc1, id));
        SourceClientState c;
        c.id = id;
        c.extractor = std::move(m.feature_extractor);
        c.classifier = std::move(m.classifier);
        c.cursor = BatchCursor(data.sources[i].size(), derive_seed(seed, 0xba, id));
        c.shard = std::make_shared<const LabeledSet>(std::move(data.sources[i]));
        f.sources.push_back(std::move(c));
    }
    f.target.extractor = init_model(arch, derive_seed(seed, 0xc1, kTargetClientId)).feature_extractor;
    f.target.cursor = BatchCursor(data.target_train.size(), derive_seed(seed, 0xba, kTargetClientId));
    f.target.train = std::make_shared<const UnlabeledSet>(std::move(data.target_train));
    f.target.test = std::make_shared<const LabeledSet>(std::move(data.target_test));
    f.server.discriminator = init_model(arch, derive_seed(seed, 0x5e)).discriminator;
    return f;
}

struct InitReport {
    std::vector<double> epoch_loss;  // [0] is the full-shard loss before training
};

inline double full_shard_loss(const Network& extractor, const Network& classifier, const LabeledSet& shard) {
    const auto logits = forward(classifier, forward(extractor, shard.images).output).output;
    return classification_loss(logits, shard.labels).loss;
}

/// The representative trains on its own labels for init_epochs epochs, then its
/// theta_F, theta_C go to every source client and theta_F to the target.
inline InitReport run_initialization(Federation& f, std::uint32_t representative = 1) {
    if (representative == kTargetClientId || representative > f.sources.size())
        throw ConfigError("representative must be a labeled source client in [1, " +
                          std::to_string(f.sources.size()) + "], got " + std::to_string(representative));
    auto& rep = f.sources[representative - 1];
    InitReport report;
    report.epoch_loss.push_back(full_shard_loss(rep.extractor, rep.classifier, *rep.shard));
    BatchCursor cursor(rep.shard->size(), derive_seed(f.seed, 0x1a17));
    for (std::size_t e = 0; e < f.schedule.init_epochs; ++e) {
        double sum = 0.0;
        std::size_t seen = 0;
        while (seen < rep.shard->size()) {
            const auto batch = cursor.next(f.schedule.batch_size);
            source_local_step(rep, batch, std::nullopt, std::nullopt, f.schedule.eta);
            sum += rep.last_loss * static_cast<double>(batch.size());
            seen += batch.size();
        }
        report.epoch_loss.push_back(sum / static_cast<double>(seen));
    }
    rep.upload_tape.reset();
    rep.uploaded_indices.clear();

    const auto to_sources = f.bus.send(ParamBroadcast{rep.extractor.tensors(), rep.classifier.tensors()});
    const auto to_target = f.bus.send(ParamBroadcast{rep.extractor.tensors(), {}});
    for (auto& c : f.sources) {
        c.extractor.assign(to_sources.params_F);
        c.classifier.assign(to_sources.params_C);
    }
    f.target.extractor.assign(to_target.params_F);
    f.initialized = true;
    return report;
}

/// Majority vote of every source classifier over target-extractor features.
inline std::vector<std::size_t> predict_target(const Federation& f, const Tensor& images, std::size_t chunk = 500) {
    std::vector<std::size_t> decisions;
    for (std::size_t start = 0; start < images.rows(); start += chunk) {
        const std::size_t n = std::min(chunk, images.rows() - start);
        std::vector<std::size_t> idx(n);
        std::iota(idx.begin(), idx.end(), start);
        const auto feats = forward(f.target.extractor, images.gather_rows(idx)).output;
        std::vector<std::vector<std::size_t>> votes;
        for (const auto& c : f.sources) votes.push_back(argmax_rows(forward(c.classifier, feats).output));
        const auto d = majority_vote(votes, f.arch.classes);
        decisions.insert(decisions.end(), d.begin(), d.end());
    }
    return decisions;
}

inline Evaluation evaluate_target(const Federation& f) {
    if (!f.target.test || f.target.test->size() == 0) throw DomainError("target client has no test set");
    return evaluate(predict_target(f, f.target.test->images), f.target.test->labels, f.arch.classes);
}

namespace detail {

inline MetricsRow run_round_body(Federation& f, bool evaluate_accuracy) {
    const auto& sch = f.schedule;
    const std::size_t n = f.sources.size();

    std::vector<FeatureUpload> uploads;
    double source_loss = 0.0;
    for (auto& c : f.sources) {
        const auto batch = c.cursor.next(sch.batch_size);
        auto up = source_local_step(c, batch, c.pending_disc, c.pending_consistency, sch.eta);
        c.pending_disc.reset();
        c.pending_consistency.reset();
        source_loss += c.last_loss;
        uploads.push_back(f.bus.send(up));
    }
    const auto tbatch = f.target.cursor.next(sch.batch_size);
    auto tout = target_local_step(f.target, tbatch, f.target.pending_disc, sch.eta);
    f.target.pending_disc.reset();
    uploads.push_back(f.bus.send(tout.upload));

    MetricsRow row;
    row.round = static_cast<std::size_t>(f.server.round) + 1;
    row.source_loss = source_loss / static_cast<double>(n);

    const auto ss = server_step(f.server, uploads, n, sch);
    if (!sch.discriminator_enabled) ++f.server.round;
    row.domain_loss = ss.domain_loss;
    for (const auto& fb : ss.feedback) {
        auto msg = f.bus.send(fb);
        if (msg.client_id == kTargetClientId)
            f.target.pending_disc = std::move(msg);
        else
            f.sources.at(msg.client_id - 1).pending_disc = std::move(msg);
    }

    if (sch.consistency_enabled) {
        const auto broadcast = f.bus.send(tout.broadcast);
        std::vector<PredictionUpload> preds;
        for (auto& c : f.sources) preds.push_back(f.bus.send(source_predict(c, broadcast)));
        auto cr = server_consistency(preds, n);
        row.consistency_loss = cr.loss;
        for (const auto& fb : cr.feedback) {
            auto msg = f.bus.send(fb);
            f.sources.at(msg.client_id - 1).pending_consistency = std::move(msg);
        }
    }

    if (!std::isfinite(row.source_loss) || !std::isfinite(row.domain_loss) || !std::isfinite(row.consistency_loss))
        throw NumericError("non-finite loss in round " + std::to_string(row.round));
    if (evaluate_accuracy) row.target_accuracy = evaluate_target(f).accuracy;
    return row;
}

}  // namespace detail

/// One protocol round. Works on a copy and commits only on success, so a failing
/// sub-step leaves every participant untouched.
inline MetricsRow run_round(Federation& fed, bool evaluate_accuracy = true) {
    if (!fed.initialized) throw ProtocolError("run_round before initialization");
    const auto t0 = std::chrono::steady_clock::now();
    auto transcript = fed.bus.take_transcript();
    Federation f = fed;
    try {
        auto row = detail::run_round_body(f, evaluate_accuracy);
        auto fresh = f.bus.take_transcript();
        transcript.insert(transcript.end(), fresh.begin(), fresh.end());
        f.bus.restore_transcript(std::move(transcript));
        row.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
        fed = std::move(f);
        return row;
    } catch (...) {
        fed.bus.restore_transcript(std::move(transcript));
        throw;
    }
}

/// Bitwise comparison of everything that evolves during training.
inline bool same_state(const Federation& a, const Federation& b) {
    if (a.sources.size() != b.sources.size()) return false;
    for (std::size_t i = 0; i < a.sources.size(); ++i) {
        const auto& x = a.sources[i];
        const auto& y = b.sources[i];
        if (!same_parameters(x.extractor, y.extractor) || !same_parameters(x.classifier, y.classifier) ||
            !(x.cursor == y.cursor) || x.pending_disc != y.pending_disc ||
            x.pending_consistency != y.pending_consistency)
            return false;
    }
    return same_parameters(a.target.extractor, b.target.extractor) && a.target.cursor == b.target.cursor &&
           a.target.pending_disc == b.target.pending_disc &&
           same_parameters(a.server.discriminator, b.server.discriminator) && a.server.round == b.server.round;
}

/// Rebuilds final states from a freshly built (uninitialized) federation and a
/// recorded transcript. Clients consume only the recorded server messages and
/// the server only the recorded client messages; every message a participant
/// regenerates must match its recorded counterpart bit for bit.
inline void replay_transcript(Federation& f, std::span<const std::uint8_t> transcript) {
    const auto messages = decode_all(transcript);
    const auto& sch = f.schedule;
    const std::size_t n = f.sources.size();
    std::vector<FeatureUpload> inbox;
    std::vector<PredictionUpload> prediction_inbox;
    std::optional<ServerStepResult> server_out;
    std::optional<ConsistencyRoundResult> consistency_out;
    std::vector<PredictionUpload> expected_predictions;
    std::optional<TargetFeatureBroadcast> expected_broadcast;

    auto diverged = [](std::size_t i, const std::string& what) {
        return ProtocolError("transcript record " + std::to_string(i) + " diverges: " + what);
    };

    for (std::size_t i = 0; i < messages.size(); ++i) {
        const auto& msg = messages[i];
        if (const auto* m = std::get_if<ParamBroadcast>(&msg)) {
            if (m->params_C.empty()) {
                f.target.extractor.assign(m->params_F);
            } else {
                for (auto& c : f.sources) {
                    c.extractor.assign(m->params_F);
                    c.classifier.assign(m->params_C);
                }
            }
            f.initialized = true;
        } else if (const auto* m = std::get_if<FeatureUpload>(&msg)) {
            server_out.reset();
            consistency_out.reset();
            FeatureUpload regenerated;
            if (m->client_id == kTargetClientId) {
                const auto batch = f.target.cursor.next(sch.batch_size);
                auto out = target_local_step(f.target, batch, f.target.pending_disc, sch.eta);
                f.target.pending_disc.reset();
                regenerated = std::move(out.upload);
                expected_broadcast = std::move(out.broadcast);
            } else {
                if (m->client_id > n) throw diverged(i, "upload from unknown client");
                auto& c = f.sources[m->client_id - 1];
                const auto batch = c.cursor.next(sch.batch_size);
                regenerated = source_local_step(c, batch, c.pending_disc, c.pending_consistency, sch.eta);
                c.pending_disc.reset();
                c.pending_consistency.reset();
            }
            if (!(regenerated == *m)) throw diverged(i, "feature upload");
            inbox.push_back(*m);
            if (!sch.discriminator_enabled && inbox.size() == n + 1) {
                ++f.server.round;
                inbox.clear();
            }
        } else if (const auto* m = std::get_if<DiscFeedback>(&msg)) {
            if (!server_out) {
                server_out = server_step(f.server, inbox, n, sch);
                inbox.clear();
            }
            if (m->client_id >= server_out->feedback.size() || !(server_out->feedback[m->client_id] == *m))
                throw diverged(i, "discriminator feedback");
            if (m->client_id == kTargetClientId)
                f.target.pending_disc = *m;
            else
                f.sources[m->client_id - 1].pending_disc = *m;
        } else if (const auto* m = std::get_if<TargetFeatureBroadcast>(&msg)) {
            if (!expected_broadcast || !(*expected_broadcast == *m)) throw diverged(i, "target feature broadcast");
            expected_predictions.clear();
            for (auto& c : f.sources) expected_predictions.push_back(source_predict(c, *m));
            prediction_inbox.clear();
        } else if (const auto* m = std::get_if<PredictionUpload>(&msg)) {
            if (m->client_id == kTargetClientId || m->client_id > expected_predictions.size() ||
                !(expected_predictions[m->client_id - 1] == *m))
                throw diverged(i, "prediction upload");
            prediction_inbox.push_back(*m);
        } else if (const auto* m = std::get_if<ConsistencyFeedback>(&msg)) {
            if (!consistency_out) {
                consistency_out = server_consistency(prediction_inbox, n);
                prediction_inbox.clear();
            }
            if (m->client_id == kTargetClientId || m->client_id > n ||
                !(consistency_out->feedback[m->client_id - 1] == *m))
                throw diverged(i, "consistency feedback");
            f.sources[m->client_id - 1].pending_consistency = *m;
        }
    }
}

}  // namespace aftl
