#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "aftl/datasets.hpp"

using namespace aftl;

namespace {

void put_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<std::uint8_t>(v >> s));
}

struct IdxPair {
    std::vector<std::uint8_t> images, labels;
};

IdxPair make_idx(std::uint32_t count, std::uint32_t rows, std::uint32_t cols, std::uint8_t seed = 0) {
    IdxPair p;
    put_be32(p.images, 0x803);
    put_be32(p.images, count);
    put_be32(p.images, rows);
    put_be32(p.images, cols);
    for (std::uint32_t i = 0; i < count * rows * cols; ++i) p.images.push_back(static_cast<std::uint8_t>(seed + i * 37));
    put_be32(p.labels, 0x801);
    put_be32(p.labels, count);
    for (std::uint32_t i = 0; i < count; ++i) p.labels.push_back(static_cast<std::uint8_t>((seed + i * 3) % 10));
    return p;
}

// Reads the header fields and pixels by hand, byte by byte.
struct ReferenceIdx {
    std::uint32_t magic, count, rows, cols;
    std::vector<double> pixels;
};

ReferenceIdx reference_parse(const std::vector<std::uint8_t>& b) {
    auto be = [&](std::size_t o) {
        return static_cast<std::uint32_t>(b[o] << 24 | b[o + 1] << 16 | b[o + 2] << 8 | b[o + 3]);
    };
    ReferenceIdx r{be(0), be(4), be(8), be(12), {}};
    for (std::size_t i = 16; i < b.size(); ++i) r.pixels.push_back(b[i] / 255.0);
    return r;
}

LabeledSet numbered_set(std::size_t n) {
    LabeledSet s{Tensor({n, 1, 2, 2}), std::vector<std::size_t>(n)};
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t k = 0; k < 4; ++k) s.images[i * 4 + k] = static_cast<double>(i) / static_cast<double>(n);
        s.labels[i] = i % 10;
    }
    return s;
}

std::filesystem::path data_dir() { return AFTL_DATA_DIR; }

bool have_mnist() { return std::filesystem::exists(data_dir() / "train-images-idx3-ubyte"); }

}  // namespace

TEST(Idx, HandBuiltTwoSampleFile) {
    const auto p = make_idx(2, 3, 4, 9);
    const auto ref = reference_parse(p.images);
    ASSERT_EQ(ref.magic, 0x00000803u);
    const auto set = parse_idx(p.images, p.labels);
    ASSERT_EQ(set.size(), 2u);
    EXPECT_EQ(set.images.shape(), (Shape{2, 1, 3, 4}));
    ASSERT_EQ(ref.pixels.size(), set.images.size());
    for (std::size_t i = 0; i < ref.pixels.size(); ++i) EXPECT_EQ(set.images[i], ref.pixels[i]);
    EXPECT_EQ(set.labels, (std::vector<std::size_t>{9, 2}));
    const auto s1 = set.sample(1);
    EXPECT_EQ(s1.image.shape(), (Shape{1, 3, 4}));
    EXPECT_EQ(s1.label, 2u);
}

TEST(Idx, EmptyButValid) {
    const auto p = make_idx(0, 28, 28);
    EXPECT_EQ(parse_idx(p.images, p.labels).size(), 0u);
}

TEST(Idx, WrongMagic) {
    auto p = make_idx(2, 2, 2);
    std::swap(p.images, p.labels);
    try {
        (void)parse_idx(p.images, p.labels);
        FAIL();
    } catch (const FormatError& e) {
        EXPECT_EQ(e.offset(), 0u);
    }
    auto q = make_idx(1, 2, 2);
    q.images[3] = 0x01;  // little-endian reading would see 0x03080000
    EXPECT_THROW((void)parse_idx(q.images, q.labels), FormatError);
}

TEST(Idx, TruncatedPayload) {
    auto p = make_idx(3, 4, 4);
    p.images.resize(p.images.size() - 1);
    try {
        (void)parse_idx(p.images, p.labels);
        FAIL();
    } catch (const FormatError& e) {
        EXPECT_EQ(e.offset(), p.images.size());
    }
    auto q = make_idx(3, 4, 4);
    q.labels.pop_back();
    EXPECT_THROW((void)parse_idx(q.images, q.labels), FormatError);
    auto h = make_idx(1, 1, 1);
    h.images.resize(10);
    EXPECT_THROW((void)parse_idx(h.images, h.labels), FormatError);
}

TEST(Idx, CountMismatch) {
    auto p = make_idx(3, 2, 2);
    const auto q = make_idx(2, 2, 2);
    try {
        (void)parse_idx(p.images, q.labels);
        FAIL();
    } catch (const FormatError& e) {
        EXPECT_EQ(e.offset(), 4u);
    }
}

TEST(Idx, LabelOutOfRange) {
    auto p = make_idx(2, 2, 2);
    p.labels[9] = 10;
    try {
        (void)parse_idx(p.images, p.labels);
        FAIL();
    } catch (const FormatError& e) {
        EXPECT_EQ(e.offset(), 9u);
    }
}

TEST(Idx, LoadFromFilesIsReproducible) {
    const auto dir = std::filesystem::temp_directory_path() / "aftl_idx_test";
    std::filesystem::create_directories(dir);
    const auto p = make_idx(5, 28, 28, 3);
    std::ofstream(dir / "train-images-idx3-ubyte", std::ios::binary)
        .write(reinterpret_cast<const char*>(p.images.data()), static_cast<std::streamsize>(p.images.size()));
    std::ofstream(dir / "train-labels-idx1-ubyte", std::ios::binary)
        .write(reinterpret_cast<const char*>(p.labels.data()), static_cast<std::streamsize>(p.labels.size()));
    const auto a = load_mnist_train(dir), b = load_mnist_train(dir);
    EXPECT_EQ(a.images, b.images);
    EXPECT_EQ(a.labels, b.labels);
    EXPECT_THROW(load_mnist_train(dir / "missing"), FormatError);
    std::filesystem::remove_all(dir);
}

TEST(Idx, StandardMnistTrainingPair) {
    if (!have_mnist()) GTEST_SKIP() << "MNIST not found under " << data_dir();
    const auto set = load_mnist_train(data_dir());
    EXPECT_EQ(set.size(), 60000u);
    EXPECT_EQ(set.sample_shape(), (Shape{1, 28, 28}));
    const auto [lo, hi] = std::minmax_element(set.images.data().begin(), set.images.data().end());
    EXPECT_GE(*lo, 0.0);
    EXPECT_LE(*hi, 1.0);
    for (auto l : set.labels) EXPECT_LT(l, 10u);
}

TEST(Partition, EvenSplitIsDisjoint) {
    const auto all = numbered_set(17000);
    const auto plan = PartitionPlan::even(15000, 10, 1000, 1000, 4);
    const auto part = partition(all, plan);
    ASSERT_EQ(part.sources.size(), 10u);
    std::set<double> seen;
    auto add = [&](const Tensor& images) {
        for (std::size_t r = 0; r < images.rows(); ++r) EXPECT_TRUE(seen.insert(images.row(r)[0]).second);
    };
    for (const auto& s : part.sources) {
        EXPECT_EQ(s.size(), 1500u);
        add(s.images);
    }
    EXPECT_EQ(part.target_train.size(), 1000u);
    EXPECT_EQ(part.target_test.size(), 1000u);
    add(part.target_train.images);
    add(part.target_test.images);
    EXPECT_EQ(seen.size(), 17000u);  // union is the whole input
}

TEST(Partition, LabelsFollowTheirImages) {
    const auto all = numbered_set(200);
    const auto part = partition(all, PartitionPlan{{60, 40}, 30, 20, 2, false});
    for (const auto& s : part.sources)
        for (std::size_t i = 0; i < s.size(); ++i) {
            const auto original = static_cast<std::size_t>(std::lround(s.images.row(i)[0] * 200.0));
            EXPECT_EQ(s.labels[i], original % 10);
        }
}

TEST(Partition, SingleClientTakesEverything) {
    const auto all = numbered_set(50);
    const auto part = partition(all, PartitionPlan{{50}, 0, 0, 1, false});
    ASSERT_EQ(part.sources.size(), 1u);
    std::vector<double> a(all.images.data().begin(), all.images.data().end());
    std::vector<double> b(part.sources[0].images.data().begin(), part.sources[0].images.data().end());
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    EXPECT_EQ(a, b);
}

TEST(Partition, SameSeedSameMembership) {
    const auto all = numbered_set(300);
    const PartitionPlan plan{{100, 100}, 50, 50, 9, false};
    const auto a = partition(all, plan), b = partition(all, plan);
    for (std::size_t i = 0; i < 2; ++i) EXPECT_EQ(a.sources[i].images, b.sources[i].images);
    EXPECT_EQ(a.target_train.images, b.target_train.images);
    auto other = plan;
    other.seed = 10;
    EXPECT_FALSE(partition(all, other).sources[0].images == a.sources[0].images);
}

TEST(Partition, InfeasiblePlans) {
    const auto all = numbered_set(100);
    EXPECT_THROW(partition(all, PartitionPlan{{60, 60}, 0, 0, 1, false}), ConfigError);
    EXPECT_THROW(partition(all, PartitionPlan{{10, 0}, 5, 5, 1, false}), ConfigError);
    EXPECT_THROW(partition(all, PartitionPlan{{}, 5, 5, 1, false}), ConfigError);
}

TEST(Partition, LabelSkewFavoursTwoClasses) {
    LabeledSet all{Tensor({2000, 1, 1, 1}), std::vector<std::size_t>(2000)};
    for (std::size_t i = 0; i < 2000; ++i) {
        all.labels[i] = i % 10;
        all.images[i] = static_cast<double>(i);
    }
    const auto part = partition(all, PartitionPlan{{100, 100, 100}, 0, 0, 3, true});
    for (std::size_t c = 0; c < 3; ++c) {
        const auto& s = part.sources[c];
        EXPECT_EQ(s.size(), 100u);
        const auto favoured = std::count_if(s.labels.begin(), s.labels.end(),
                                            [&](std::size_t l) { return l == 2 * c || l == 2 * c + 1; });
        EXPECT_GE(favoured, 50);
        std::set<double> unique(s.images.data().begin(), s.images.data().end());
        EXPECT_EQ(unique.size(), 100u);
    }
}

TEST(Shift, ZeroSpecIsIdentity) {
    auto set = numbered_set(20);
    EXPECT_EQ(apply_shift(set.images, DomainShiftSpec{}), set.images);
}

TEST(Shift, HalfTurnTwiceIsIdentity) {
    // 28x28 plane with a smooth blob; a half turn maps pixel centres onto pixel centres.
    std::vector<double> img(28 * 28), once(28 * 28), twice(28 * 28), full(28 * 28);
    for (std::size_t y = 0; y < 28; ++y)
        for (std::size_t x = 0; x < 28; ++x)
            img[y * 28 + x] = std::exp(-(std::pow(x - 10.0, 2) + std::pow(y - 15.0, 2)) / 20.0);
    rotate_plane(img, once, 28, 28, 180.0);
    rotate_plane(once, twice, 28, 28, 180.0);
    rotate_plane(img, full, 28, 28, 360.0);
    double mad = 0.0;
    for (std::size_t i = 0; i < img.size(); ++i) {
        EXPECT_NEAR(twice[i], full[i], 1e-6);
        mad += std::abs(twice[i] - img[i]);
    }
    EXPECT_LE(mad / static_cast<double>(img.size()), 0.02);
    EXPECT_NEAR(once[(27 - 15) * 28 + (27 - 10)], 1.0, 1e-9);
}

TEST(Shift, ScaleHalvesMean) {
    auto set = numbered_set(40);
    const auto shifted = apply_shift(set.images, DomainShiftSpec{0.0, 0.5, 0.0, 1});
    double a = 0.0, b = 0.0;
    for (double v : set.images.data()) a += v;
    for (double v : shifted.data()) b += v;
    EXPECT_NEAR(b / static_cast<double>(shifted.size()), 0.5 * a / static_cast<double>(set.images.size()), 1e-9);
}

TEST(Shift, KeepsLabelsCountAndRange) {
    auto set = numbered_set(30);
    const auto shifted = apply_shift(set, DomainShiftSpec{25.0, 1.7, 0.3, 5});
    EXPECT_EQ(shifted.labels, set.labels);
    EXPECT_EQ(shifted.size(), set.size());
    for (double v : shifted.images.data()) {
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
    }
    EXPECT_EQ(apply_shift(UnlabeledSet{set.images}, DomainShiftSpec{25.0, 1.7, 0.3, 5}).images, shifted.images);
}

TEST(Shift, RotationMovesMass) {
    LabeledSet set{Tensor({1, 1, 28, 28}), {0}};
    for (std::size_t y = 4; y < 24; ++y) set.images[y * 28 + 14] = 1.0;  // vertical bar
    const auto rotated = apply_shift(set.images, DomainShiftSpec{25.0, 1.0, 0.0, 0});
    EXPECT_LT(rotated[4 * 28 + 14], 0.5);
    EXPECT_NEAR(rotated[14 * 28 + 14], set.images[14 * 28 + 14], 0.5);
}

TEST(Shift, SpecValidation) {
    auto set = numbered_set(2);
    EXPECT_THROW(apply_shift(set.images, DomainShiftSpec{46.0, 1.0, 0.0, 0}), ConfigError);
    EXPECT_THROW(apply_shift(set.images, DomainShiftSpec{0.0, 0.0, 0.0, 0}), ConfigError);
    EXPECT_THROW(apply_shift(set.images, DomainShiftSpec{0.0, 2.5, 0.0, 0}), ConfigError);
    EXPECT_THROW(apply_shift(set.images, DomainShiftSpec{0.0, 1.0, -0.1, 0}), ConfigError);
}
