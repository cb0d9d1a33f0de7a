#include <cmath>
#include <cstdlib>
#include <fstream>
#include <set>

#include "doctest.h"
#include "helpers.hpp"
#include "vitfl/data.hpp"
#include "vitfl/error.hpp"
#include "vitfl/partition.hpp"

using namespace vitfl;

namespace {

std::vector<std::uint8_t> cifar_fixture(const std::vector<int>& labels) {
  std::vector<std::uint8_t> bytes;
  for (std::size_t r = 0; r < labels.size(); ++r) {
    bytes.push_back(static_cast<std::uint8_t>(labels[r]));
    for (std::size_t i = 0; i < 3072; ++i) bytes.push_back(static_cast<std::uint8_t>((i * 7 + r * 13) % 256));
  }
  return bytes;
}

void write_bytes(const std::filesystem::path& p, const std::vector<std::uint8_t>& b) {
  std::ofstream f(p, std::ios::binary);
  f.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

// Balanced labels-only set: 1x1x1 images, `per_class` samples of each class.
LabeledDataset labels_only(std::size_t classes, std::size_t per_class) {
  std::vector<int> labels;
  for (std::size_t c = 0; c < classes; ++c) labels.insert(labels.end(), per_class, static_cast<int>(c));
  std::vector<std::uint8_t> px(labels.size(), 0);
  return LabeledDataset::from_bytes(1, 1, 1, classes, std::move(px), std::move(labels),
                                    Provenance::Synthetic);
}

void check_window(const ClientShard& s, const LabeledDataset& d, std::size_t n, std::size_t k) {
  REQUIRE(s.label_window.size() == k);
  for (std::size_t j = 0; j < k; ++j)
    CHECK(s.label_window[j] == static_cast<int>((s.client_id + j) % d.num_classes()));
  const std::set<int> window(s.label_window.begin(), s.label_window.end());
  for (std::size_t i : s.indices) CHECK(window.count(d.label(i)) == 1);
  (void)n;
}

}  // namespace

TEST_SUITE("data-plane") {

TEST_CASE("cifar-10 records parse to exact pixel values") {
  const auto bytes = cifar_fixture({3, 9});
  const auto d = parse_cifar10(bytes, "fixture");
  REQUIRE(d.size() == 2);
  CHECK(d.label(0) == 3);
  CHECK(d.label(1) == 9);
  CHECK(d.channels() == 3);
  CHECK(d.height() == 32);
  CHECK(d.width() == 32);
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t i = 0; i < 3072; ++i)
      CHECK(d.pixel(r, i) == static_cast<double>(bytes[r * 3073 + 1 + i]) / 255.0);

  // Plane layout: offset 1024 is the first green byte.
  const Tensor t = d.batch(std::vector<std::size_t>{1});
  CHECK(t.shape() == Shape{1, 3, 32, 32});
  CHECK(t[1024] == static_cast<double>(bytes[3073 + 1 + 1024]) / 255.0);
}

TEST_CASE("cifar-10 files round-trip and malformed files are rejected") {
  const auto dir = test::scratch("cifar");
  const auto bytes = cifar_fixture({0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 4});
  write_bytes(dir / "a.bin", bytes);
  const auto d = load_cifar10({dir / "a.bin"});
  REQUIRE(d.size() == 11);
  CHECK(d.count_per_class()[4] == 2);
  std::vector<std::uint8_t> back;
  for (std::size_t r = 0; r < d.size(); ++r) {
    back.push_back(static_cast<std::uint8_t>(d.label(r)));
    for (std::size_t i = 0; i < 3072; ++i)
      back.push_back(static_cast<std::uint8_t>(std::lround(d.pixel(r, i) * 255.0)));
  }
  CHECK(back == bytes);

  // Two files concatenate in order.
  write_bytes(dir / "b.bin", cifar_fixture({7}));
  const auto both = load_cifar10({dir / "a.bin", dir / "b.bin"});
  CHECK(both.size() == 12);
  CHECK(both.label(11) == 7);

  auto truncated = bytes;
  truncated.pop_back();
  write_bytes(dir / "t.bin", truncated);
  CHECK_THROWS_AS(load_cifar10({dir / "t.bin"}), FormatError);

  write_bytes(dir / "empty.bin", {});
  CHECK_THROWS_AS(load_cifar10({dir / "empty.bin"}), FormatError);

  auto bad_label = cifar_fixture({10});
  CHECK_THROWS_AS(parse_cifar10(bad_label, "bad"), FormatError);
  CHECK_THROWS_AS(load_cifar10({dir / "absent.bin"}), Error);
}

TEST_CASE("real cifar-10 batches, when present") {
  const char* root = std::getenv("VITFL_CIFAR10_DIR");
  if (!root) {
    MESSAGE("VITFL_CIFAR10_DIR not set; skipping the real-file check");
    return;
  }
  std::vector<std::filesystem::path> train;
  for (int i = 1; i <= 5; ++i)
    train.push_back(std::filesystem::path(root) / ("data_batch_" + std::to_string(i) + ".bin"));
  const auto d = load_cifar10(train);
  CHECK(d.size() == 50000);
  const auto test_set = load_cifar10({std::filesystem::path(root) / "test_batch.bin"});
  CHECK(test_set.size() == 10000);
  const auto tr = d.count_per_class(), te = test_set.count_per_class();
  for (std::size_t c = 0; c < 10; ++c) {
    CHECK(tr[c] == 5000);
    CHECK(tr[c] + te[c] == 6000);
  }
}

TEST_CASE("synthetic generator: counts, determinism, dump round trip") {
  SyntheticSpec s;
  s.seed = 4;
  const auto a = generate_synthetic(s);
  CHECK(a.size() == 1000);
  for (auto n : a.count_per_class()) CHECK(n == 100);
  const auto b = generate_synthetic(s);
  CHECK(std::equal(a.float_pixels().begin(), a.float_pixels().end(), b.float_pixels().begin()));
  for (float v : a.float_pixels()) {
    CHECK(v >= 0.0f);
    CHECK(v <= 1.0f);
  }
  s.seed = 5;
  const auto c = generate_synthetic(s);
  CHECK_FALSE(std::equal(a.float_pixels().begin(), a.float_pixels().end(), c.float_pixels().begin()));

  const auto dir = test::scratch("synthetic");
  save_synthetic(dir / "s.bin", s, c);
  SyntheticSpec back_spec;
  const auto back = load_synthetic(dir / "s.bin", &back_spec);
  CHECK(back_spec == s);
  CHECK(std::equal(back.float_pixels().begin(), back.float_pixels().end(), c.float_pixels().begin()));
  CHECK(std::equal(back.labels().begin(), back.labels().end(), c.labels().begin()));
}

TEST_CASE("synthetic set is linearly learnable") {
  // Plain softmax regression, trained on 80 samples per class, scored on 40.
  SyntheticSpec s;
  s.per_class = 120;
  s.height = s.width = 16;
  s.seed = 12;
  const auto d = generate_synthetic(s);
  const std::size_t p = d.sample_size(), k = 10;
  std::vector<std::size_t> train, test_idx;
  for (std::size_t i = 0; i < d.size(); ++i) ((i % 120) < 80 ? train : test_idx).push_back(i);

  std::vector<double> w(k * (p + 1), 0.0), x(p), z(k);
  auto scores = [&](std::size_t i) {
    d.copy_features(i, x);
    for (std::size_t c = 0; c < k; ++c) {
      double v = w[c * (p + 1) + p];
      for (std::size_t j = 0; j < p; ++j) v += w[c * (p + 1) + j] * x[j];
      z[c] = v;
    }
  };
  const double lr = 0.05;
  for (int epoch = 0; epoch < 15; ++epoch) {
    for (std::size_t i : train) {
      scores(i);
      const double mx = *std::max_element(z.begin(), z.end());
      double sum = 0.0;
      for (double& v : z) sum += (v = std::exp(v - mx));
      for (std::size_t c = 0; c < k; ++c) {
        const double g = z[c] / sum - (static_cast<int>(c) == d.label(i) ? 1.0 : 0.0);
        for (std::size_t j = 0; j < p; ++j) w[c * (p + 1) + j] -= lr * g * x[j];
        w[c * (p + 1) + p] -= lr * g;
      }
    }
  }
  std::size_t correct = 0;
  for (std::size_t i : test_idx) {
    scores(i);
    correct += static_cast<int>(std::max_element(z.begin(), z.end()) - z.begin()) == d.label(i);
  }
  const double acc = static_cast<double>(correct) / static_cast<double>(test_idx.size());
  INFO("held-out accuracy " << acc);
  CHECK(acc > 0.3);
}

TEST_CASE("label windows wrap around") {
  CHECK(label_window(0, 4, 10) == std::vector<int>{0, 1, 2, 3});
  CHECK(label_window(8, 4, 10) == std::vector<int>{8, 9, 0, 1});
  CHECK(label_window(13, 4, 10) == std::vector<int>{3, 4, 5, 6});
}

TEST_CASE("S1: ten participants on a 50,000-sample set") {
  const auto d = labels_only(10, 5000);
  PartitionSpec spec;
  spec.num_participants = 10;
  spec.seed = 3;
  const auto shards = partition(d, spec);
  REQUIRE(shards.size() == 10);
  for (const auto& s : shards) {
    CHECK(s.size() == 5000);
    check_window(s, d, 10, 4);
  }
}

TEST_CASE("S1: disjoint shards that cover every sample") {
  const auto d = labels_only(10, 5000);
  for (std::size_t n : {10u, 20u, 50u, 100u}) {
    PartitionSpec spec;
    spec.num_participants = n;
    spec.seed = 8;
    const auto shards = partition(d, spec);
    REQUIRE(shards.size() == n);
    std::vector<int> seen(d.size(), 0);
    std::size_t lo = d.size(), hi = 0;
    for (const auto& s : shards) {
      check_window(s, d, n, 4);
      for (std::size_t i : s.indices) ++seen[i];
      lo = std::min(lo, s.size());
      hi = std::max(hi, s.size());
    }
    CHECK(std::all_of(seen.begin(), seen.end(), [](int v) { return v == 1; }));
    CHECK(hi - lo <= 4);  // at most one extra sample per label
  }
}

TEST_CASE("S1 with one participant keeps only its window") {
  const auto d = labels_only(10, 5000);
  PartitionSpec spec;
  spec.num_participants = 1;
  const auto shards = partition(d, spec);
  REQUIRE(shards.size() == 1);
  CHECK(shards[0].size() == 20000);
  check_window(shards[0], d, 1, 4);
}

TEST_CASE("S2: every shard has exactly the configured volume") {
  const auto d = labels_only(10, 5000);
  for (std::size_t v : {500u, 1000u}) {
    for (std::size_t n : {10u, 100u}) {
      PartitionSpec spec;
      spec.scenario = Scenario::S2;
      spec.num_participants = n;
      spec.per_client_volume = v;
      spec.seed = 1;
      PartitionStats stats;
      const auto shards = partition(d, spec, &stats);
      for (const auto& s : shards) {
        CHECK(s.size() == v);
        check_window(s, d, n, 4);
        CHECK(std::set<std::size_t>(s.indices.begin(), s.indices.end()).size() == v);
      }
      // 100 x 1000 samples need 40,000 per 4 labels: overlap is needed only then.
      CHECK((stats.reused_assignments > 0) == (n * v > d.size()));
    }
  }
}

TEST_CASE("S2 without overlap refuses to reuse samples") {
  const auto d = labels_only(10, 100);
  PartitionSpec spec;
  spec.scenario = Scenario::S2;
  spec.num_participants = 10;
  spec.per_client_volume = 200;
  spec.allow_overlap = false;
  CHECK_THROWS_AS(partition(d, spec), Error);
  spec.per_client_volume = 500;
  spec.allow_overlap = true;
  CHECK_THROWS_AS(partition(d, spec), Error);  // more than the window holds
}

TEST_CASE("partitions are pure functions of the dataset and spec") {
  const auto d = labels_only(10, 300);
  PartitionSpec spec;
  spec.num_participants = 20;
  spec.seed = 9;
  CHECK(partition(d, spec) == partition(d, spec));
  spec.seed = 10;
  const auto other = partition(d, spec);
  spec.seed = 9;
  CHECK_FALSE(partition(d, spec) == other);
}

TEST_CASE("partition spec validation") {
  PartitionSpec spec;
  spec.labels_per_client = 11;
  CHECK_THROWS_AS(spec.validate(10), ConfigError);
  spec = {};
  spec.num_participants = 0;
  CHECK_THROWS_AS(spec.validate(10), ConfigError);
  spec = {};
  spec.scenario = Scenario::S2;
  CHECK_THROWS_AS(spec.validate(10), ConfigError);  // S2 needs a volume
  CHECK(scenario_from_string("S2") == Scenario::S2);
}

}  // TEST_SUITE
