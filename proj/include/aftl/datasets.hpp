#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numbers>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "aftl/errors.hpp"
#include "aftl/rng.hpp"
#include "aftl/tensor.hpp"

namespace aftl {

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;
inline constexpr std::size_t kMnistClasses = 10;

struct LabeledSample {
    Tensor image;  // 1 x H x W, values in [0, 1]
    std::size_t label = 0;
};

/// Images stored as one batch tensor [n x 1 x H x W] with a parallel label list.
struct LabeledSet {
    Tensor images;
    std::vector<std::size_t> labels;

    std::size_t size() const noexcept { return labels.size(); }
    Shape sample_shape() const { return Shape(images.shape().begin() + 1, images.shape().end()); }

    LabeledSample sample(std::size_t i) const {
        return {images.gather_rows(std::span<const std::size_t>(&i, 1)).reshaped(sample_shape()), labels.at(i)};
    }

    LabeledSet subset(std::span<const std::size_t> indices) const {
        LabeledSet out{images.gather_rows(indices), {}};
        out.labels.reserve(indices.size());
        for (auto i : indices) out.labels.push_back(labels.at(i));
        return out;
    }
};

/// Images only. The training shard of the target client has this type, so no
/// training-path code can reach target labels.
struct UnlabeledSet {
    Tensor images;

    std::size_t size() const noexcept { return images.rows(); }
    Shape sample_shape() const { return Shape(images.shape().begin() + 1, images.shape().end()); }

    UnlabeledSet subset(std::span<const std::size_t> indices) const { return {images.gather_rows(indices)}; }
};

namespace detail {

inline std::uint32_t read_be32(std::span<const std::uint8_t> bytes, std::size_t offset, const char* what) {
    if (bytes.size() < offset + 4) throw FormatError(std::string("truncated header reading ") + what, bytes.size());
    return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
           (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open " + path.string(), 0);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace detail

/// Parses an IDX image/label pair held in memory. Pixels are scaled by 1/255.
inline LabeledSet parse_idx(std::span<const std::uint8_t> image_bytes, std::span<const std::uint8_t> label_bytes) {
    using detail::read_be32;
    if (const auto m = read_be32(image_bytes, 0, "image magic"); m != kIdxImageMagic)
        throw FormatError("bad image-file magic " + std::to_string(m), 0);
    if (const auto m = read_be32(label_bytes, 0, "label magic"); m != kIdxLabelMagic)
        throw FormatError("bad label-file magic " + std::to_string(m), 0);
    const std::size_t count = read_be32(image_bytes, 4, "image count");
    const std::size_t rows = read_be32(image_bytes, 8, "image rows");
    const std::size_t cols = read_be32(image_bytes, 12, "image cols");
    const std::size_t label_count = read_be32(label_bytes, 4, "label count");
    if (label_count != count)
        throw FormatError("label file holds " + std::to_string(label_count) + " labels for " + std::to_string(count) +
                              " images",
                          4);
    const std::size_t pixels = rows * cols;
    if (image_bytes.size() < 16 + count * pixels)
        throw FormatError("image payload truncated: expected " + std::to_string(count * pixels) + " bytes",
                          image_bytes.size());
    if (label_bytes.size() < 8 + count)
        throw FormatError("label payload truncated: expected " + std::to_string(count) + " bytes", label_bytes.size());

    LabeledSet set{Tensor({count, 1, rows, cols}), std::vector<std::size_t>(count)};
    const auto* px = image_bytes.data() + 16;
    for (std::size_t i = 0; i < count * pixels; ++i) set.images[i] = static_cast<double>(px[i]) / 255.0;
    for (std::size_t i = 0; i < count; ++i) {
        const std::size_t label = label_bytes[8 + i];
        if (label >= kMnistClasses) throw FormatError("label " + std::to_string(label) + " out of range", 8 + i);
        set.labels[i] = label;
    }
    return set;
}

inline LabeledSet load_idx(const std::filesystem::path& images, const std::filesystem::path& labels) {
    const auto ib = detail::read_file(images);
    const auto lb = detail::read_file(labels);
    return parse_idx(ib, lb);
}

/// Standard MNIST training pair under a directory.
inline LabeledSet load_mnist_train(const std::filesystem::path& dir) {
    return load_idx(dir / "train-images-idx3-ubyte", dir / "train-labels-idx1-ubyte");
}

struct PartitionPlan {
    std::vector<std::size_t> source_counts;  // n^{s,i} per source client
    std::size_t target_train = 0;
    std::size_t target_test = 0;
    std::uint64_t seed = 0;
    bool label_skew = false;  // each source client oversamples two classes

    static PartitionPlan even(std::size_t total_source, std::size_t clients, std::size_t target_train,
                              std::size_t target_test, std::uint64_t seed) {
        if (clients == 0) throw ConfigError("partition needs at least one source client");
        return {std::vector<std::size_t>(clients, total_source / clients), target_train, target_test, seed, false};
    }

    std::size_t total() const {
        return std::accumulate(source_counts.begin(), source_counts.end(), std::size_t{0}) + target_train + target_test;
    }

    void validate(std::size_t available) const {
        if (source_counts.empty()) throw ConfigError("partition needs at least one source client");
        for (std::size_t i = 0; i < source_counts.size(); ++i)
            if (source_counts[i] == 0) throw ConfigError("source client " + std::to_string(i + 1) + " gets no samples");
        if (total() > available)
            throw ConfigError("partition needs " + std::to_string(total()) + " samples, only " +
                              std::to_string(available) + " available");
    }
};

struct Partition {
    std::vector<LabeledSet> sources;
    UnlabeledSet target_train;
    LabeledSet target_test;  // evaluation only
};

/// Shuffled, disjoint split into source shards and target train/test shards.
/// The target training shard is emitted without labels.
inline Partition partition(const LabeledSet& samples, const PartitionPlan& plan) {
    plan.validate(samples.size());
    std::vector<std::size_t> order(samples.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng = make_rng(derive_seed(plan.seed, 0x9a47));
    std::shuffle(order.begin(), order.end(), rng);

    // Target shards come off the front so they do not depend on the source layout.
    std::size_t cursor = 0;
    auto take = [&](std::size_t n) {
        std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(cursor),
                                     order.begin() + static_cast<std::ptrdiff_t>(cursor + n));
        cursor += n;
        return idx;
    };
    Partition out;
    const auto train_idx = take(plan.target_train);
    const auto test_idx = take(plan.target_test);
    out.target_train = UnlabeledSet{samples.images.gather_rows(train_idx)};
    out.target_test = samples.subset(test_idx);

    if (!plan.label_skew) {
        for (auto n : plan.source_counts) out.sources.push_back(samples.subset(take(n)));
        return out;
    }

    // Label skew: half of each shard from the client's two favoured classes.
    std::vector<std::vector<std::size_t>> by_class(kMnistClasses);
    for (std::size_t i = cursor; i < order.size(); ++i) by_class[samples.labels[order[i]] % kMnistClasses].push_back(order[i]);
    std::vector<std::size_t> class_pos(kMnistClasses, 0);
    std::vector<bool> used(samples.size(), false);
    std::size_t general = cursor;
    auto next_general = [&]() -> std::size_t {
        while (general < order.size() && used[order[general]]) ++general;
        if (general == order.size()) throw ConfigError("label-skew partition ran out of samples");
        used[order[general]] = true;
        return order[general++];
    };
    for (std::size_t c = 0; c < plan.source_counts.size(); ++c) {
        const std::size_t n = plan.source_counts[c];
        std::vector<std::size_t> idx;
        const std::size_t favoured[2] = {(2 * c) % kMnistClasses, (2 * c + 1) % kMnistClasses};
        for (std::size_t k = 0; k < n / 2; ++k) {
            const auto cls = favoured[k % 2];
            auto& pool = by_class[cls];
            auto& pos = class_pos[cls];
            while (pos < pool.size() && used[pool[pos]]) ++pos;
            if (pos == pool.size()) break;
            used[pool[pos]] = true;
            idx.push_back(pool[pos++]);
        }
        while (idx.size() < n) idx.push_back(next_general());
        out.sources.push_back(samples.subset(idx));
    }
    return out;
}

struct DomainShiftSpec {
    double degrees = 0.0;
    double scale = 1.0;
    double noise_std = 0.0;
    std::uint64_t seed = 0;

    void validate() const {
        if (!(degrees >= -45.0 && degrees <= 45.0)) throw ConfigError("shift angle must lie in [-45, 45] degrees");
        if (!(scale > 0.0 && scale <= 2.0)) throw ConfigError("intensity scale must lie in (0, 2]");
        if (!(noise_std >= 0.0)) throw ConfigError("noise std must be non-negative");
    }
};

/// Bilinear rotation of one H x W plane about its centre; samples outside read as 0.
inline void rotate_plane(std::span<const double> src, std::span<double> dst, std::size_t h, std::size_t w,
                         double degrees) {
    const double rad = degrees * std::numbers::pi / 180.0;
    const double c = std::cos(rad), s = std::sin(rad);
    const double cy = (static_cast<double>(h) - 1.0) / 2.0, cx = (static_cast<double>(w) - 1.0) / 2.0;
    auto at = [&](std::ptrdiff_t y, std::ptrdiff_t x) -> double {
        if (y < 0 || x < 0 || y >= static_cast<std::ptrdiff_t>(h) || x >= static_cast<std::ptrdiff_t>(w)) return 0.0;
        return src[static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x)];
    };
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
            const double dy = static_cast<double>(y) - cy, dx = static_cast<double>(x) - cx;
            // inverse map: output pixel reads from the source rotated back by -degrees
            const double sx = c * dx + s * dy + cx;
            const double sy = -s * dx + c * dy + cy;
            const double fy = std::floor(sy), fx = std::floor(sx);
            const double ty = sy - fy, tx = sx - fx;
            const auto y0 = static_cast<std::ptrdiff_t>(fy), x0 = static_cast<std::ptrdiff_t>(fx);
            dst[y * w + x] = (1 - ty) * ((1 - tx) * at(y0, x0) + tx * at(y0, x0 + 1)) +
                             ty * ((1 - tx) * at(y0 + 1, x0) + tx * at(y0 + 1, x0 + 1));
        }
}

/// Rotate, rescale intensity, add seeded Gaussian noise, clamp to [0, 1].
/// Works on any [n x C x H x W] image batch.
inline Tensor apply_shift(const Tensor& images, const DomainShiftSpec& spec) {
    spec.validate();
    if (images.rank() != 4) throw ShapeError("apply_shift expects [n x C x H x W] images");
    Tensor out = images;
    const std::size_t h = images.dim(2), w = images.dim(3), planes = images.dim(0) * images.dim(1);
    if (spec.degrees != 0.0) {
        for (std::size_t p = 0; p < planes; ++p)
            rotate_plane(images.data().subspan(p * h * w, h * w), out.data().subspan(p * h * w, h * w), h, w,
                         spec.degrees);
    }
    if (spec.scale != 1.0)
        for (auto& v : out.data()) v *= spec.scale;
    if (spec.noise_std > 0.0) {
        Rng rng = make_rng(derive_seed(spec.seed, 0x5e1f));
        std::normal_distribution<double> noise(0.0, spec.noise_std);
        for (auto& v : out.data()) v += noise(rng);
    }
    for (auto& v : out.data()) v = std::clamp(v, 0.0, 1.0);
    return out;
}

inline LabeledSet apply_shift(const LabeledSet& set, const DomainShiftSpec& spec) {
    return {apply_shift(set.images, spec), set.labels};
}

inline UnlabeledSet apply_shift(const UnlabeledSet& set, const DomainShiftSpec& spec) {
    return {apply_shift(set.images, spec)};
}

}  // namespace aftl
