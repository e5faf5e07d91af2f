#include <doctest.h>

#include <cmath>
#include <fstream>
#include <set>
#include <string>

#include "qg/data.hpp"
#include "support.hpp"

using namespace qg;
using qg::test::TempDir;

namespace {

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const std::filesystem::path& p, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(p, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

std::string error_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const std::exception& e) {
    return e.what();
  }
  return {};
}

}  // namespace

TEST_SUITE("quantizer") {
  TEST_CASE("two-bit bins of width 64") {
    CHECK(discretize_pixel(0, 2) == 32.0f);
    CHECK(discretize_pixel(63, 2) == 32.0f);
    CHECK(discretize_pixel(64, 2) == 96.0f);
    CHECK(discretize_pixel(255, 2) == 224.0f);
  }

  TEST_CASE("eight-bit bins of width 1 add a half step") {
    for (int i = 0; i <= 255; ++i) CHECK(discretize_pixel(static_cast<float>(i), 8) == static_cast<float>(i) + 0.5f);
  }

  TEST_CASE("three and four bits") {
    CHECK(discretize_pixel(31, 3) == 16.0f);
    CHECK(discretize_pixel(32, 3) == 48.0f);
    CHECK(discretize_pixel(200, 4) == 200.0f);
    CHECK(discretize_pixel(207, 4) == 200.0f);
    CHECK(discretize_pixel(208, 4) == 216.0f);
  }

  TEST_CASE("invalid inputs are rejected") {
    CHECK_THROWS_AS(discretize_pixel(-0.5f, 2), std::invalid_argument);
    CHECK_THROWS_AS(discretize_pixel(256.0f, 2), std::invalid_argument);
    CHECK(discretize_pixel(255.5f, 8) == 255.5f);
    CHECK_THROWS_AS(discretize_pixel(10, 5), std::invalid_argument);
    CHECK_THROWS_AS(discretize_pixel(10, 1), std::invalid_argument);
    CHECK_THROWS_AS(quantize_inputs(Tensor::vector({1.5f}), 2), std::invalid_argument);
  }

  TEST_CASE("idempotent, monotone, at most 2^bits outputs") {
    Rng rng(42);
    for (int bits : kSupportedInputBits) {
      CAPTURE(bits);
      std::vector<float> inputs;
      for (int i = 0; i <= 255; ++i) inputs.push_back(static_cast<float>(i));
      for (int i = 0; i < 5000; ++i) inputs.push_back(static_cast<float>(rng.uniform(0.0, 255.0)));
      std::sort(inputs.begin(), inputs.end());
      std::set<float> outputs;
      float prev = -1.0f;
      for (float v : inputs) {
        const float once = discretize_pixel(v, bits);
        CHECK(discretize_pixel(once, bits) == once);
        CHECK(once >= prev);
        prev = once;
        outputs.insert(once);
      }
      CHECK(outputs.size() <= (std::size_t{1} << bits));
      CHECK(outputs.size() == (std::size_t{1} << bits));
    }
  }

  TEST_CASE("normalized two-bit centres") {
    Tensor x({1, 4});
    x[0] = 0.0f;
    x[1] = 0.3f;
    x[2] = 0.6f;
    x[3] = 1.0f;
    const Tensor q = quantize_inputs(x, 2);
    CHECK(q[0] == 0.125f);
    CHECK(q[1] == 0.375f);
    CHECK(q[2] == 0.625f);
    CHECK(q[3] == 0.875f);
  }

  TEST_CASE("pipeline quantizer is idempotent and stays in [0, 1]") {
    Rng rng(1);
    const Tensor x = qg::test::random_uniform(rng, {20, 50}, 0.0, 1.0);
    for (int bits : kSupportedInputBits) {
      const Tensor q = quantize_inputs(x, bits);
      CHECK(quantize_inputs(q, bits) == q);
      for (float v : q.values()) CHECK((v >= 0.0f && v <= 1.0f));
    }
  }
}

TEST_SUITE("idx") {
  TEST_CASE("round trip through writer and parser") {
    TempDir dir;
    const RawDataset ds = qg::test::synthetic_dataset(37, 3, Split::test);
    write_idx_images(dir / "img", ds);
    write_idx_labels(dir / "lbl", ds);
    const RawDataset back = load_idx(dir / "img", dir / "lbl", Split::test);
    CHECK(back.count() == 37);
    CHECK(back.images == ds.images);
    CHECK(back.labels == ds.labels);
    CHECK(read_bytes(dir / "img").size() == 16 + 37 * 784);
    CHECK(read_bytes(dir / "lbl").size() == 8 + 37);
  }

  TEST_CASE("truncated file names expected and actual byte counts") {
    TempDir dir;
    const RawDataset ds = qg::test::synthetic_dataset(5, 3);
    write_idx_images(dir / "img", ds);
    write_idx_labels(dir / "lbl", ds);
    auto bytes = read_bytes(dir / "img");
    bytes.resize(bytes.size() - 100);
    write_bytes(dir / "img", bytes);
    const std::string msg = error_of([&] { load_idx(dir / "img", dir / "lbl", Split::train); });
    CHECK(msg.find(std::to_string(16 + 5 * 784)) != std::string::npos);
    CHECK(msg.find(std::to_string(16 + 5 * 784 - 100)) != std::string::npos);
    CHECK_THROWS_AS(load_idx(dir / "img", dir / "lbl", Split::train), IdxError);
  }

  TEST_CASE("images file carrying the labels magic") {
    TempDir dir;
    const RawDataset ds = qg::test::synthetic_dataset(5, 3);
    write_idx_labels(dir / "lbl", ds);
    const std::string msg = error_of([&] { load_idx(dir / "lbl", dir / "lbl", Split::train); });
    CHECK(msg.find("magic") != std::string::npos);
  }

  TEST_CASE("count mismatch and bad labels") {
    TempDir dir;
    const RawDataset a = qg::test::synthetic_dataset(5, 3);
    const RawDataset b = qg::test::synthetic_dataset(6, 3);
    write_idx_images(dir / "img", a);
    write_idx_labels(dir / "lbl", b);
    CHECK_THROWS_AS(load_idx(dir / "img", dir / "lbl", Split::train), IdxError);
    RawDataset bad = a;
    bad.labels[2] = 11;
    CHECK_THROWS_AS(bad.validate(), IdxError);
    CHECK_THROWS_AS(load_idx(dir / "missing", dir / "lbl", Split::train), IdxError);
  }

  TEST_CASE("official test split has 10000 items") {
    const auto dir = qg::test::real_mnist_dir();
    if (!dir) {
      MESSAGE("MNIST not found; skipping");
      return;
    }
    const RawDataset test = load_mnist(*dir, Split::test);
    CHECK(test.count() == 10000);
    CHECK(test.rows == 28);
    CHECK(test.cols == 28);
    CHECK(std::vector<int>(test.labels.begin(), test.labels.begin() + 5) == std::vector<int>{7, 2, 1, 0, 4});
  }
}

TEST_SUITE("batching") {
  TEST_CASE("same seed and epoch give the same order") {
    const RawDataset ds = qg::test::synthetic_dataset(250, 1);
    PipelineConfig cfg{2, 99, 32};
    const BatchSequence a = batches(ds, cfg, 3);
    const BatchSequence b = batches(ds, cfg, 3);
    CHECK(a.order() == b.order());
    CHECK(a[4].inputs == b[4].inputs);
    CHECK_FALSE(a.order() == batches(ds, cfg, 4).order());
    cfg.shuffle_seed = 100;
    CHECK_FALSE(a.order() == batches(ds, cfg, 3).order());
  }

  TEST_CASE("order is a permutation and the short batch is kept") {
    const RawDataset ds = qg::test::synthetic_dataset(250, 1);
    const BatchSequence seq = batches(ds, {8, 1, 100}, 0);
    CHECK(seq.size() == 3);
    CHECK(seq[2].labels.size() == 50);
    std::set<std::size_t> ids(seq.order().begin(), seq.order().end());
    CHECK(ids.size() == 250);
    CHECK(*ids.rbegin() == 249);
    CHECK_THROWS_AS(seq[3], std::out_of_range);
  }

  TEST_CASE("100-item batches over 10000 items") {
    const RawDataset ds = qg::test::synthetic_dataset(10000, 2);
    CHECK(batches(ds, {8, 1, 100}, 0).size() == 100);
  }

  TEST_CASE("batch contents follow the pipeline") {
    const RawDataset ds = qg::test::synthetic_dataset(10, 5);
    const std::vector<std::size_t> ids{3, 7};
    const Batch b = make_batch(ds, ids, 2);
    CHECK(b.labels == std::vector<std::uint8_t>{ds.labels[3], ds.labels[7]});
    for (std::size_t p = 0; p < kImagePixels; ++p) {
      CHECK(b.raw(1, p) == static_cast<float>(ds.image(7)[p]) / 256.0f);
      CHECK(b.inputs(1, p) == discretize_pixel(ds.image(7)[p], 2) / 256.0f);
    }
    for (float v : b.raw.values()) CHECK((v >= 0.0f && v <= 1.0f));
  }

  TEST_CASE("pipeline config validation") {
    CHECK_THROWS_AS((PipelineConfig{5, 1, 100}.validate()), std::invalid_argument);
    CHECK_THROWS_AS((PipelineConfig{8, 1, 0}.validate()), std::invalid_argument);
    CHECK_NOTHROW((PipelineConfig{3, 1, 1}.validate()));
  }
}
