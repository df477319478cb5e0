#pragma once

#include <algorithm>
#include <bit>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <limits>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "aftl/errors.hpp"
#include "aftl/tensor.hpp"

namespace aftl {

// Wire record: u32 LE length of (tag + payload), u8 tag, payload.
// Payload fields appear in declaration order:
//   tensor       u32 rank, rank x u64 dims, fp64 LE values
//   tensor list  u32 count, tensors
//   client id    u32
//   indices      u32 count, count x u64
//   loss         fp64

/// Initial parameters pushed by the representative client. params_C is empty
/// when the recipient is the target client.
struct ParamBroadcast {
    std::vector<Tensor> params_F;
    std::vector<Tensor> params_C;

    friend bool operator==(const ParamBroadcast&, const ParamBroadcast&) = default;
};

struct FeatureUpload {
    std::uint32_t client_id = 0;
    Tensor features;
    std::vector<std::uint64_t> sample_indices;

    friend bool operator==(const FeatureUpload&, const FeatureUpload&) = default;
};

struct TargetFeatureBroadcast {
    Tensor features;

    friend bool operator==(const TargetFeatureBroadcast&, const TargetFeatureBroadcast&) = default;
};

struct PredictionUpload {
    std::uint32_t client_id = 0;
    Tensor probabilities;

    friend bool operator==(const PredictionUpload&, const PredictionUpload&) = default;
};

/// dL_d / d(features) for one client's last upload, plus that client's L_d term.
struct DiscFeedback {
    std::uint32_t client_id = 0;
    Tensor feature_grads;
    double loss = 0.0;

    friend bool operator==(const DiscFeedback& a, const DiscFeedback& b) {
        return a.client_id == b.client_id && a.feature_grads == b.feature_grads &&
               std::bit_cast<std::uint64_t>(a.loss) == std::bit_cast<std::uint64_t>(b.loss);
    }
};

/// dL_p / d(probabilities) for one source classifier, plus the ensemble L_p.
struct ConsistencyFeedback {
    std::uint32_t client_id = 0;
    Tensor probability_grads;
    double loss = 0.0;

    friend bool operator==(const ConsistencyFeedback& a, const ConsistencyFeedback& b) {
        return a.client_id == b.client_id && a.probability_grads == b.probability_grads &&
               std::bit_cast<std::uint64_t>(a.loss) == std::bit_cast<std::uint64_t>(b.loss);
    }
};

/// Variant index is the wire tag.
using Message = std::variant<ParamBroadcast, FeatureUpload, TargetFeatureBroadcast, PredictionUpload, DiscFeedback,
                             ConsistencyFeedback>;

inline const char* message_name(const Message& m) {
    static constexpr const char* names[] = {"ParamBroadcast", "FeatureUpload", "TargetFeatureBroadcast",
                                            "PredictionUpload", "DiscFeedback", "ConsistencyFeedback"};
    return names[m.index()];
}

namespace wire {

class Writer {
public:
    explicit Writer(std::vector<std::uint8_t>& out) : out_(out) {}

    void u8(std::uint8_t v) { out_.push_back(v); }
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void u64(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
    void tensor(const Tensor& t) {
        u32(static_cast<std::uint32_t>(t.rank()));
        for (auto d : t.shape()) u64(d);
        for (double v : t.data()) f64(v);
    }
    void tensors(const std::vector<Tensor>& ts) {
        u32(static_cast<std::uint32_t>(ts.size()));
        for (const auto& t : ts) tensor(t);
    }
    void indices(const std::vector<std::uint64_t>& v) {
        u32(static_cast<std::uint32_t>(v.size()));
        for (auto i : v) u64(i);
    }

private:
    std::vector<std::uint8_t>& out_;
};

class Reader {
public:
    Reader(std::span<const std::uint8_t> bytes, std::size_t offset, std::size_t end)
        : bytes_(bytes), pos_(offset), end_(end) {}

    std::size_t position() const noexcept { return pos_; }

    std::uint8_t u8() {
        need(1, "u8");
        return bytes_[pos_++];
    }
    std::uint32_t u32() {
        need(4, "u32");
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= std::uint32_t{bytes_[pos_++]} << (8 * i);
        return v;
    }
    std::uint64_t u64() {
        need(8, "u64");
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= std::uint64_t{bytes_[pos_++]} << (8 * i);
        return v;
    }
    double f64() { return std::bit_cast<double>(u64()); }
    Tensor tensor() {
        const auto at = pos_;
        const auto rank = u32();
        if (rank > 8) throw FormatError("implausible tensor rank " + std::to_string(rank), at);
        Shape shape(rank);
        std::size_t count = 1;
        bool overflow = false;
        for (auto& d : shape) {
            d = u64();
            if (d != 0 && count > std::numeric_limits<std::size_t>::max() / d) overflow = true;
            count *= d;
        }
        // a zero dim anywhere makes the payload empty, even after an overflowing prefix
        if (std::find(shape.begin(), shape.end(), 0) != shape.end()) {
            count = 0;
            overflow = false;
        }
        if (overflow || count > (end_ - pos_) / 8) throw FormatError("tensor payload exceeds record", at);
        std::vector<double> data(count);
        for (auto& v : data) v = f64();
        return Tensor(std::move(shape), std::move(data));
    }
    std::vector<Tensor> tensors() {
        const auto n = u32();
        std::vector<Tensor> out;
        for (std::uint32_t i = 0; i < n; ++i) out.push_back(tensor());
        return out;
    }
    std::vector<std::uint64_t> indices() {
        const auto n = u32();
        need(std::size_t{n} * 8, "index list");
        std::vector<std::uint64_t> out(n);
        for (auto& v : out) v = u64();
        return out;
    }

private:
    void need(std::size_t n, const char* what) const {
        if (end_ - pos_ < n) throw FormatError(std::string("record truncated reading ") + what, pos_);
    }

    std::span<const std::uint8_t> bytes_;
    std::size_t pos_;
    std::size_t end_;
};

}  // namespace wire

/// Appends one length-prefixed record for the message.
inline void encode(const Message& msg, std::vector<std::uint8_t>& out) {
    const std::size_t length_at = out.size();
    out.resize(out.size() + 4);
    wire::Writer w(out);
    w.u8(static_cast<std::uint8_t>(msg.index()));
    std::visit(
        [&](const auto& m) {
            using T = std::decay_t<decltype(m)>;
            if constexpr (std::is_same_v<T, ParamBroadcast>) {
                w.tensors(m.params_F);
                w.tensors(m.params_C);
            } else if constexpr (std::is_same_v<T, FeatureUpload>) {
                w.u32(m.client_id);
                w.tensor(m.features);
                w.indices(m.sample_indices);
            } else if constexpr (std::is_same_v<T, TargetFeatureBroadcast>) {
                w.tensor(m.features);
            } else if constexpr (std::is_same_v<T, PredictionUpload>) {
                w.u32(m.client_id);
                w.tensor(m.probabilities);
            } else if constexpr (std::is_same_v<T, DiscFeedback>) {
                w.u32(m.client_id);
                w.tensor(m.feature_grads);
                w.f64(m.loss);
            } else {
                w.u32(m.client_id);
                w.tensor(m.probability_grads);
                w.f64(m.loss);
            }
        },
        msg);
    const auto length = static_cast<std::uint32_t>(out.size() - length_at - 4);
    for (int i = 0; i < 4; ++i) out[length_at + i] = static_cast<std::uint8_t>(length >> (8 * i));
}

inline std::vector<std::uint8_t> encode(const Message& msg) {
    std::vector<std::uint8_t> out;
    encode(msg, out);
    return out;
}

/// Decodes the record starting at offset and advances offset past it.
inline Message decode(std::span<const std::uint8_t> bytes, std::size_t& offset) {
    if (bytes.size() - offset < 5) throw FormatError("record header truncated", offset);
    wire::Reader head(bytes, offset, bytes.size());
    const std::size_t length = head.u32();
    const std::size_t end = offset + 4 + length;
    if (length == 0 || end > bytes.size()) throw FormatError("record length exceeds input", offset);
    wire::Reader r(bytes, offset + 4, end);
    const auto tag_at = r.position();
    Message msg;
    switch (r.u8()) {
        case 0: {
            ParamBroadcast m;
            m.params_F = r.tensors();
            m.params_C = r.tensors();
            msg = std::move(m);
            break;
        }
        case 1: {
            FeatureUpload m;
            m.client_id = r.u32();
            m.features = r.tensor();
            m.sample_indices = r.indices();
            msg = std::move(m);
            break;
        }
        case 2: msg = TargetFeatureBroadcast{r.tensor()}; break;
        case 3: {
            PredictionUpload m;
            m.client_id = r.u32();
            m.probabilities = r.tensor();
            msg = std::move(m);
            break;
        }
        case 4: {
            DiscFeedback m;
            m.client_id = r.u32();
            m.feature_grads = r.tensor();
            m.loss = r.f64();
            msg = std::move(m);
            break;
        }
        case 5: {
            ConsistencyFeedback m;
            m.client_id = r.u32();
            m.probability_grads = r.tensor();
            m.loss = r.f64();
            msg = std::move(m);
            break;
        }
        default: throw FormatError("unknown message tag", tag_at);
    }
    if (r.position() != end) throw FormatError("trailing bytes in record", r.position());
    offset = end;
    return msg;
}

inline Message decode(std::span<const std::uint8_t> record) {
    std::size_t offset = 0;
    auto m = decode(record, offset);
    if (offset != record.size()) throw FormatError("trailing bytes after record", offset);
    return m;
}

/// Splits a concatenation of records.
inline std::vector<Message> decode_all(std::span<const std::uint8_t> bytes) {
    std::vector<Message> out;
    std::size_t offset = 0;
    while (offset < bytes.size()) out.push_back(decode(bytes, offset));
    return out;
}

inline void write_transcript(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write transcript " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

inline std::vector<std::uint8_t> read_transcript(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open transcript " + path.string(), 0);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace aftl
