#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "mapu/data.hpp"

namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& tag) {
  auto p = fs::temp_directory_path() / ("mapu_test_" + tag);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

// DFT magnitude at an arbitrary (possibly fractional) frequency in cycles
// per window, computed directly.
double dft_magnitude(const float* x, std::size_t L, double f) {
  double re = 0, im = 0;
  for (std::size_t t = 0; t < L; ++t) {
    const double a =
        2.0 * 3.141592653589793 * f * static_cast<double>(t) / static_cast<double>(L);
    re += x[t] * std::cos(a);
    im -= x[t] * std::sin(a);
  }
  return re * re + im * im;
}

}  // namespace

TEST_CASE("dataset save/load round trip preserves bytes and labels") {
  auto dir = temp_dir("roundtrip");
  mapu::DatasetMeta meta{2, 4, 3, {"a", "b"}};
  std::map<std::string, mapu::DomainData<float>> doms;
  mapu::DomainData<float> a;
  a.n = 2;
  a.channels = 2;
  a.length = 4;
  a.domain_id = "a";
  a.x = {1, 2, 3, 4, 5, 6, 7, 8, -1, -2, -3, -4, -5, -6, -7, -8};
  a.y = std::vector<int>{0, 2};
  mapu::DomainData<float> b = a;
  b.domain_id = "b";
  b.y.reset();
  doms["a"] = a;
  doms["b"] = b;
  mapu::save_dataset(dir, meta, doms);

  auto [m2, d2] = mapu::load_dataset<float>(dir);
  CHECK(m2.channels == 2);
  CHECK(m2.num_classes == 3);
  CHECK(d2.at("a").x == a.x);
  REQUIRE(d2.at("a").y.has_value());
  CHECK(*d2.at("a").y == std::vector<int>{0, 2});
  CHECK_FALSE(d2.at("b").y.has_value());

  // second save of the loaded data is byte-identical
  auto dir2 = temp_dir("roundtrip2");
  mapu::save_dataset(dir2, m2, d2);
  CHECK(slurp(dir / "a_x.f32") == slurp(dir2 / "a_x.f32"));
  CHECK(slurp(dir / "a_y.u8") == slurp(dir2 / "a_y.u8"));
  CHECK(slurp(dir / "meta.json") == slurp(dir2 / "meta.json"));
  fs::remove_all(dir);
  fs::remove_all(dir2);
}

TEST_CASE("loading rejects inconsistent sizes and bad values") {
  auto dir = temp_dir("badsize");
  std::ofstream(dir / "meta.json")
      << R"({"channels":2,"length":4,"num_classes":2,"domains":["a"]})";
  // 3 floats cannot tile samples of 8 values
  std::vector<float> vals{1, 2, 3};
  std::ofstream(dir / "a_x.f32", std::ios::binary)
      .write(reinterpret_cast<char*>(vals.data()), 12);
  CHECK_THROWS_AS(mapu::load_dataset<float>(dir), mapu::io_error);

  // right size, but contains a NaN
  std::vector<float> nanv(8, 0.0f);
  nanv[5] = std::numeric_limits<float>::quiet_NaN();
  std::ofstream(dir / "a_x.f32", std::ios::binary)
      .write(reinterpret_cast<char*>(nanv.data()), 32);
  CHECK_THROWS_AS(mapu::load_dataset<float>(dir), mapu::io_error);

  // label count mismatch
  nanv[5] = 0.0f;
  std::ofstream(dir / "a_x.f32", std::ios::binary)
      .write(reinterpret_cast<char*>(nanv.data()), 32);
  std::ofstream(dir / "a_y.u8", std::ios::binary).write("\0\0\0", 3);
  CHECK_THROWS_AS(mapu::load_dataset<float>(dir), mapu::io_error);

  // missing meta
  fs::remove_all(dir);
  CHECK_THROWS_AS(mapu::load_dataset<float>(dir), mapu::io_error);
}

TEST_CASE("synthetic pair with zero-magnitude noise shift matches source law") {
  mapu::ShiftSpec shift{mapu::ShiftKind::additive_noise, 0.0, 0};
  auto [src, tgt] = mapu::synth_domain_pair<float>(3, 10, shift, 123);
  CHECK(src.n == 30);
  CHECK(tgt.n == 30);
  CHECK(src.length == 64);
  CHECK(src.domain_id == "source");
  CHECK(tgt.domain_id == "target");
  REQUIRE(src.y.has_value());
  // balanced classes
  std::vector<int> counts(3, 0);
  for (int k : *src.y) counts[static_cast<std::size_t>(k)]++;
  CHECK(counts == std::vector<int>{10, 10, 10});
  // different RNG streams: target is not a copy of source
  CHECK(src.x != tgt.x);
}

TEST_CASE("synthetic generation is deterministic in the seed") {
  mapu::ShiftSpec shift{mapu::ShiftKind::phase_shift, 1.0, 0};
  auto [s1, t1] = mapu::synth_domain_pair<float>(3, 5, shift, 9);
  auto [s2, t2] = mapu::synth_domain_pair<float>(3, 5, shift, 9);
  CHECK(s1.x == s2.x);
  CHECK(t1.x == t2.x);
  auto [s3, t3] = mapu::synth_domain_pair<float>(3, 5, shift, 10);
  CHECK(s1.x != s3.x);
}

TEST_CASE("class identity is carried by frequency content") {
  // With a long window, an oracle classifier that compares DFT magnitude at
  // the nominal class frequencies must recover the label in source and
  // target alike, since the shift only moves phase.
  mapu::ShiftSpec shift{mapu::ShiftKind::phase_shift, 1.5707963, 0};
  auto [src, tgt] = mapu::synth_domain_pair<float>(3, 40, shift, 77, 128);
  for (const auto* d : {&src, &tgt}) {
    std::size_t correct = 0;
    for (std::size_t i = 0; i < d->n; ++i) {
      int pred = 0;
      double best = -1.0;
      for (int k = 0; k < 3; ++k) {
        const double mag =
            dft_magnitude(&d->x[i * 128], 128, mapu::detail::class_frequency(k));
        if (mag > best) {
          best = mag;
          pred = k;
        }
      }
      if (pred == (*d->y)[i]) ++correct;
    }
    CHECK(static_cast<double>(correct) / static_cast<double>(d->n) > 0.95);
  }
}

TEST_CASE("shift magnitude validation") {
  using K = mapu::ShiftKind;
  CHECK_THROWS_AS(mapu::validate_shift({K::amplitude_scale, -0.95, 0}),
                  mapu::config_error);
  CHECK_THROWS_AS(mapu::validate_shift({K::phase_shift, 7.0, 0}),
                  mapu::config_error);
  CHECK_THROWS_AS(mapu::validate_shift({K::time_warp, 0.6, 0}),
                  mapu::config_error);
  CHECK_THROWS_AS(mapu::validate_shift({K::additive_noise, -0.1, 0}),
                  mapu::config_error);
  CHECK_NOTHROW(mapu::validate_shift({K::phase_shift, 3.14159, 0}));
  CHECK_THROWS_AS(mapu::parse_shift_kind("bogus"), mapu::config_error);
  CHECK(mapu::parse_shift_kind("time_warp") == K::time_warp);
}

TEST_CASE("normalize produces zero mean unit variance per channel") {
  mapu::Rng rng(5);
  mapu::DomainData<double> d;
  d.n = 50;
  d.channels = 2;
  d.length = 8;
  d.x.resize(50 * 2 * 8);
  for (auto& v : d.x) v = rng.normal() * 3.0 + 1.0;
  auto stats = mapu::normalize(d);
  for (std::size_t c = 0; c < 2; ++c) {
    double m = 0;
    for (std::size_t i = 0; i < d.n; ++i)
      for (std::size_t t = 0; t < 8; ++t) m += d.x[(i * 2 + c) * 8 + t];
    m /= static_cast<double>(d.n * 8);
    CHECK(std::abs(m) < 1e-9);
    double v = 0;
    for (std::size_t i = 0; i < d.n; ++i)
      for (std::size_t t = 0; t < 8; ++t) {
        const double dd = d.x[(i * 2 + c) * 8 + t] - m;
        v += dd * dd;
      }
    v /= static_cast<double>(d.n * 8);
    CHECK(std::abs(v - 1.0) < 1e-9);
  }
  CHECK(stats.mean.size() == 2);

  // re-normalizing standardized data is (x-0)/1 up to rounding
  auto copy = d.x;
  mapu::normalize(d);
  double max_diff = 0.0;
  for (std::size_t i = 0; i < d.x.size(); ++i)
    max_diff = std::max(max_diff, std::abs(d.x[i] - copy[i]));
  CHECK(max_diff < 1e-12);
}

TEST_CASE("normalize with external stats applies them verbatim") {
  mapu::DomainData<double> d;
  d.n = 1;
  d.channels = 1;
  d.length = 3;
  d.x = {4.0, 6.0, 8.0};
  mapu::ChannelStats s{{6.0}, {2.0}};
  mapu::normalize(d, s);
  CHECK(d.x == std::vector<double>{-1.0, 0.0, 1.0});

  mapu::ChannelStats wrong{{0.0, 0.0}, {1.0, 1.0}};
  CHECK_THROWS_AS(mapu::normalize(d, wrong), mapu::dimension_error);
}

TEST_CASE("constant channels become zero instead of blowing up") {
  mapu::DomainData<double> d;
  d.n = 2;
  d.channels = 1;
  d.length = 2;
  d.x = {5.0, 5.0, 5.0, 5.0};
  mapu::normalize(d);
  for (double v : d.x) CHECK(v == 0.0);
}

TEST_CASE("slice_batch gathers rows and labels by index") {
  mapu::DomainData<double> d;
  d.n = 3;
  d.channels = 1;
  d.length = 2;
  d.x = {1, 2, 3, 4, 5, 6};
  d.y = std::vector<int>{0, 1, 2};
  d.domain_id = "src";
  auto b = mapu::slice_batch(d, {2, 0});
  CHECK(b.values.shape() == mapu::Shape{2, 1, 2});
  CHECK(b.values.value() == std::vector<double>{5, 6, 1, 2});
  CHECK(*b.labels == std::vector<int>{2, 0});
  CHECK(b.domain_id == "src");
}

TEST_CASE("strip_labels drops labels but keeps samples") {
  mapu::DomainData<double> d;
  d.n = 1;
  d.channels = 1;
  d.length = 2;
  d.x = {1, 2};
  d.y = std::vector<int>{1};
  auto u = mapu::strip_labels(d);
  CHECK(u.x == d.x);
  CHECK(u.n == 1);
}

TEST_CASE("batch_indices covers every sample exactly once") {
  auto plain = mapu::batch_indices(10, 4, nullptr);
  REQUIRE(plain.size() == 3);
  CHECK(plain[0] == std::vector<std::size_t>{0, 1, 2, 3});
  CHECK(plain[2] == std::vector<std::size_t>{8, 9});

  mapu::Rng rng(3);
  auto shuffled = mapu::batch_indices(10, 4, &rng);
  std::vector<std::size_t> all;
  for (const auto& b : shuffled) all.insert(all.end(), b.begin(), b.end());
  std::sort(all.begin(), all.end());
  std::vector<std::size_t> want(10);
  for (std::size_t i = 0; i < 10; ++i) want[i] = i;
  CHECK(all == want);
}
