// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "lbt/data.hpp"
#include "scratch.hpp"

using namespace lbt;
namespace fs = std::filesystem;

namespace {

using scratch::TempDir;

std::string error_of(const std::function<void()>& f) {
    try {
        f();
    } catch (const Error& e) {
        return e.what();
    }
    return "";
}

} // namespace

TEST(Idx, TwoImageFixture) {
    TempDir dir;
    write_idx_images_u8(dir / "fx-images-idx3-ubyte", 2, 2, 2, {0, 255, 51, 102, 255, 0, 0, 0});
    write_idx_labels(dir / "fx-labels-idx1-ubyte", {3, 7});
    const RealTensor img = load_idx_images(dir / "fx-images-idx3-ubyte");
    EXPECT_EQ(img.shape, (Shape{2, 1, 2, 2}));
    EXPECT_EQ(img.values, (std::vector<double>{0.0, 1.0, 0.2, 0.4, 1.0, 0.0, 0.0, 0.0}));
    EXPECT_EQ(load_idx_labels(dir / "fx-labels-idx1-ubyte"), (std::vector<int>{3, 7}));

    const auto raw = read_file_bytes(dir / "fx-images-idx3-ubyte");
    ASSERT_EQ(raw.size(), 16u + 8u);
    EXPECT_EQ((std::vector<std::uint8_t>(raw.begin(), raw.begin() + 8)), (std::vector<std::uint8_t>{0, 0, 8, 3, 0, 0, 0, 2}));

    const Dataset d = load_idx_dataset(dir / "fx-images-idx3-ubyte", dir / "fx-labels-idx1-ubyte");
    EXPECT_EQ(d.size(), 2u);
    EXPECT_EQ(d.sample_shape(), (Shape{1, 2, 2}));
}

TEST(Idx, Errors) {
    TempDir dir;
    write_idx_labels(dir / "l", {1, 2, 3});
    write_idx_images_u8(dir / "i", 1, 2, 2, {1, 2, 3, 4});

    std::string msg = error_of([&] { load_idx_images(dir / "l"); });
    EXPECT_NE(msg.find("bad magic 0x00000801 at offset 0"), std::string::npos) << msg;
    msg = error_of([&] { load_idx_labels(dir / "i"); });
    EXPECT_NE(msg.find("bad magic 0x00000803"), std::string::npos) << msg;

    auto bytes = read_file_bytes(dir / "i");
    bytes.pop_back();
    write_file_bytes(dir / "short", bytes);
    msg = error_of([&] { load_idx_images(dir / "short"); });
    EXPECT_NE(msg.find("truncated file at offset 16"), std::string::npos) << msg;

    write_file_bytes(dir / "header", {0, 0, 8, 3, 0, 0});
    msg = error_of([&] { load_idx_images(dir / "header"); });
    EXPECT_NE(msg.find("truncated file at offset 4"), std::string::npos) << msg;

    write_file_bytes(dir / "huge", {0, 0, 8, 3, 0xff, 0xff, 0xff, 0xff, 0xff, 0xff, 0xff, 0xff, 0, 0, 0, 1});
    msg = error_of([&] { load_idx_images(dir / "huge"); });
    EXPECT_NE(msg.find("dimension overflow at offset 8"), std::string::npos) << msg;

    msg = error_of([&] { load_idx_images(dir / "missing"); });
    EXPECT_NE(msg.find("cannot open"), std::string::npos) << msg;

    write_idx_labels(dir / "two", {1, 2});
    EXPECT_THROW(load_idx_dataset(dir / "i", dir / "two"), Error);
    write_idx_labels(dir / "bad", {12});
    msg = error_of([&] { load_idx_dataset(dir / "i", dir / "bad"); });
    EXPECT_NE(msg.find("label 12"), std::string::npos) << msg;
}

TEST(Idx, RoundTrips) {
    TempDir dir;
    std::vector<std::uint8_t> px(5 * 3 * 4);
    for (std::size_t i = 0; i < px.size(); ++i) px[i] = static_cast<std::uint8_t>(i * 37);
    for (const std::string name : {"a-images-idx3-ubyte", "a-images-idx3-ubyte.gz"}) {
        write_idx_images_u8(dir / name, 5, 3, 4, px);
        const RealTensor t = load_idx_images(dir / name);
        ASSERT_EQ(t.shape, (Shape{5, 1, 3, 4}));
        for (std::size_t i = 0; i < px.size(); ++i) {
            EXPECT_EQ(t[i], px[i] / 255.0);
            EXPECT_GE(t[i], 0.0);
            EXPECT_LE(t[i], 1.0);
        }
    }
    EXPECT_LT(fs::file_size(dir / "a-images-idx3-ubyte.gz"), fs::file_size(dir / "a-images-idx3-ubyte") + 64);

    const std::vector<int> labels = {0, 9, 4, 4, 1};
    write_idx_labels(dir / "l.gz", labels);
    EXPECT_EQ(load_idx_labels(dir / "l.gz"), labels);

    const Dataset b = synth_blobs(3, 4, 5, 2.0, 9);
    write_idx_features(dir / "f-images.idx", b.images);
    const RealTensor back = load_idx_images(dir / "f-images.idx");
    EXPECT_EQ(back.shape, b.images.shape);
    EXPECT_EQ(back.values, b.images.values);

    IdxArray f32{IdxType::f32, {2, 2}, {0.5, -1.25, 3.0, 1e-3f}};
    EXPECT_EQ(parse_idx(encode_idx(f32), std::vector<std::uint32_t>{0x00000D02}, "f32").values, f32.values);
    EXPECT_THROW(encode_idx({IdxType::u8, {1}, {256.0}}), Error);
}

TEST(Idx, CorruptGzip) {
    TempDir dir;
    write_idx_labels(dir / "l.gz", std::vector<int>(1000, 3));
    auto bytes = read_file_bytes(dir / "l.gz"); // decompressed
    std::ifstream in(dir / "l.gz", std::ios::binary);
    std::vector<char> gz((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    gz.resize(gz.size() / 2);
    std::ofstream(dir / "cut.gz", std::ios::binary).write(gz.data(), static_cast<std::streamsize>(gz.size()));
    EXPECT_THROW(load_idx_labels(dir / "cut.gz"), Error);
    EXPECT_EQ(bytes.size(), 1008u);
}

TEST(Idx, SiblingLabels) {
    EXPECT_EQ(sibling_labels_path("/d/train-images-idx3-ubyte"), fs::path("/d/train-labels-idx1-ubyte"));
    EXPECT_EQ(sibling_labels_path("/d/t10k-images-idx3-ubyte.gz"), fs::path("/d/t10k-labels-idx1-ubyte.gz"));
    EXPECT_EQ(sibling_labels_path("blobs-images.idx"), fs::path("blobs-labels.idx"));
    EXPECT_THROW(sibling_labels_path("/d/pixels.bin"), Error);
}

TEST(Blobs, ShapeAndDeterminism) {
    const Dataset one = synth_blobs(7, 1, 3, 1.0, 1);
    EXPECT_EQ(one.size(), 7u);
    EXPECT_EQ(one.images.shape, (Shape{7, 1, 1, 3}));
    EXPECT_EQ(one.labels, (std::vector<int>{0, 1, 2, 3, 4, 5, 6}));

    const Dataset a = synth_blobs(4, 50, 6, 3.0, 12), b = synth_blobs(4, 50, 6, 3.0, 12), c = synth_blobs(4, 50, 6, 3.0, 13);
    EXPECT_EQ(a.images.values, b.images.values);
    EXPECT_EQ(a.labels, b.labels);
    EXPECT_NE(a.images.values, c.images.values);
    EXPECT_NO_THROW(a.validate());
    EXPECT_THROW(synth_blobs(0, 1, 1, 1.0, 1), Error);
    EXPECT_THROW(synth_blobs(2, 0, 1, 1.0, 1), Error);
}

// Class means sit at distance `spread` from the origin, up to sampling noise.
TEST(Blobs, CentersAtSpread) {
    const std::size_t per = 4000, dim = 8;
    const Dataset d = synth_blobs(3, per, dim, 5.0, 2);
    for (int c = 0; c < 3; ++c) {
        std::vector<double> mean(dim, 0.0);
        for (std::size_t i = 0; i < per; ++i)
            for (std::size_t k = 0; k < dim; ++k) mean[k] += d.images[(c * per + i) * dim + k] / per;
        double norm = 0;
        for (double m : mean) norm += m * m;
        EXPECT_NEAR(std::sqrt(norm), 5.0, 0.1) << c;
    }
}

TEST(Dataset, HeadAndBatches) {
    const Dataset d = synth_blobs(3, 2, 2, 1.0, 5);
    const Dataset h = d.head(4);
    EXPECT_EQ(h.size(), 4u);
    EXPECT_EQ(h.images.shape, (Shape{4, 1, 1, 2}));
    EXPECT_EQ(h.images.values, std::vector<double>(d.images.values.begin(), d.images.values.begin() + 8));
    EXPECT_EQ(d.head(0).size(), 6u);
    EXPECT_EQ(d.head(100).size(), 6u);

    const std::vector<std::size_t> idx = {5, 0};
    const RealTensor bi = d.batch_images(idx);
    EXPECT_EQ(bi.shape, (Shape{2, 1, 1, 2}));
    EXPECT_EQ(bi[0], d.images[10]);
    EXPECT_EQ(bi[3], d.images[1]);
    EXPECT_EQ(d.batch_labels(idx), (std::vector<int>{2, 0}));
}

TEST(Mnist, CanonicalFiles) {
    const fs::path dir = LBT_MNIST_DIR;
    if (!fs::exists(dir / "train-images-idx3-ubyte")) GTEST_SKIP() << "MNIST not found in " << dir;
    const Dataset train = load_idx_dataset(dir / "train-images-idx3-ubyte", dir / "train-labels-idx1-ubyte");
    const Dataset test = load_idx_dataset(dir / "t10k-images-idx3-ubyte", dir / "t10k-labels-idx1-ubyte");
    EXPECT_EQ(train.images.shape, (Shape{60000, 1, 28, 28}));
    EXPECT_EQ(test.images.shape, (Shape{10000, 1, 28, 28}));
    for (const Dataset* d : {&train, &test}) {
        EXPECT_EQ(*std::min_element(d->images.values.begin(), d->images.values.end()), 0.0);
        EXPECT_EQ(*std::max_element(d->images.values.begin(), d->images.values.end()), 1.0);
        std::vector<int> count(10, 0);
        for (int l : d->labels) ++count[static_cast<std::size_t>(l)];
        for (int c : count) EXPECT_GT(c, static_cast<int>(d->size() / 20));
    }
}
