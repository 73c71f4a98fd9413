#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "mpae/metrics.hpp"
#include "mpae/repr.hpp"
#include "mpae/synthgen.hpp"
#include "oracles.hpp"

using namespace mpae;
namespace fs = std::filesystem;

TEST_CASE("dice overlap") {
  Dims d{4, 4, 4};
  PhaseMask a(d), b(d);
  SUBCASE("identical masks score 1") {
    a.set(1, 1, 1, true);
    CHECK(metrics::dice(a, a) == 1.0);
  }
  SUBCASE("both empty score 1") { CHECK(metrics::dice(a, b) == 1.0); }
  SUBCASE("disjoint masks score 0") {
    a.set(0, 0, 0, true);
    b.set(3, 3, 3, true);
    CHECK(metrics::dice(a, b) == 0.0);
  }
  SUBCASE("half-offset blocks score 1/2") {
    // 2x2x2 blocks sharing a 1x2x2 overlap: dice = 2*4 / (8 + 8).
    for (int k = 0; k < 2; ++k)
      for (int j = 0; j < 2; ++j)
        for (int i = 0; i < 2; ++i) {
          a.set(i, j, k, true);
          b.set(i + 1, j, k, true);
        }
    CHECK(metrics::dice(a, b) == 0.5);
  }
  SUBCASE("dimension mismatch") {
    PhaseMask c({3, 4, 4});
    CHECK_THROWS_AS(metrics::dice(a, c), DimensionError);
  }
}

TEST_CASE("interface_mask marks foreground touching in-domain background") {
  SUBCASE("4-cube inside an 8-grid has 56 interface voxels") {
    PhaseMask m({8, 8, 8});
    for (int k = 2; k < 6; ++k)
      for (int j = 2; j < 6; ++j)
        for (int i = 2; i < 6; ++i) m.set(i, j, k, true);
    auto gamma = metrics::interface_mask(m);
    CHECK(gamma.count_true() == 64 - 8);  // all but the 2x2x2 interior
  }
  SUBCASE("an all-true mask has no interface") {
    PhaseMask m({4, 4, 4}, true);
    CHECK(metrics::interface_mask(m).count_true() == 0);
  }
  SUBCASE("matches the reference on random masks") {
    Rng rng(19);
    for (int t = 0; t < 10; ++t) {
      auto m = oracles::random_mask({6, 7, 5}, 0.4, rng);
      auto fast = metrics::interface_mask(m);
      auto slow = oracles::brute_interface(m);
      CHECK(fast.data == slow.data);
    }
  }
}

TEST_CASE("hausdorff distance") {
  SUBCASE("identical masks give 0") {
    PhaseMask m({8, 8, 8});
    m.set(4, 4, 4, true);
    auto r = metrics::hausdorff(m, m);
    CHECK(r.value == 0.0);
    CHECK(!r.one_sided_empty);
  }
  SUBCASE("parallel slabs give the inter-face gap") {
    PhaseMask a({8, 8, 8}), b({8, 8, 8});
    for (int k = 0; k < 8; ++k)
      for (int j = 0; j < 8; ++j) {
        a.set(0, j, k, true);
        a.set(1, j, k, true);
        b.set(6, j, k, true);
        b.set(7, j, k, true);
      }
    // Interfaces are the planes x=1 and x=6 (domain faces do not count).
    auto r = metrics::hausdorff(a, b);
    CHECK(r.value == doctest::Approx(5.0 / 8.0));
  }
  SUBCASE("one empty interface raises the sentinel") {
    PhaseMask a({4, 4, 4}), b({4, 4, 4});
    a.set(2, 2, 2, true);
    auto r = metrics::hausdorff(a, b);
    CHECK(r.value == kDomainDiagonal);
    CHECK(r.one_sided_empty);
  }
  SUBCASE("both empty interfaces give 0") {
    PhaseMask a({4, 4, 4}), full({4, 4, 4}, true);
    auto r = metrics::hausdorff(a, a);
    CHECK(r.value == 0.0);
    CHECK(!r.one_sided_empty);
    // A full mask also has an empty interface set.
    auto r2 = metrics::hausdorff(a, full);
    CHECK(r2.value == 0.0);
  }
  SUBCASE("matches the all-pairs reference exactly on random masks") {
    Rng rng(29);
    for (int t = 0; t < 10; ++t) {
      auto a = oracles::random_mask({8, 8, 8}, 0.3, rng);
      auto b = oracles::random_mask({8, 8, 8}, 0.3, rng);
      auto fast = metrics::hausdorff(a, b);
      auto slow = oracles::brute_hausdorff(a, b);
      CHECK(fast.value == slow.value);
      CHECK(fast.one_sided_empty == slow.one_sided_empty);
    }
  }
}

TEST_CASE("droplet size distribution") {
  SUBCASE("diagonal chain is one 26-connected component") {
    PhaseMask m({6, 6, 6});
    for (int i = 0; i < 6; ++i) m.set(i, i, i, true);
    auto stats = metrics::droplet_size_distribution(m);
    REQUIRE(stats.volumes.size() == 1);
    CHECK(stats.volumes[0] == 6);
  }
  SUBCASE("six-disconnected corners stay separate") {
    PhaseMask m({8, 8, 8});
    m.set(0, 0, 0, true);
    m.set(7, 7, 7, true);
    m.set(0, 7, 0, true);
    auto stats = metrics::droplet_size_distribution(m);
    CHECK(stats.volumes.size() == 3);
  }
  SUBCASE("volumes are listed in scan-order first encounter") {
    PhaseMask m({8, 4, 4});
    m.set(6, 0, 0, true);  // encountered first (lowest j,k then x)
    m.set(0, 0, 1, true);
    m.set(1, 0, 1, true);
    auto stats = metrics::droplet_size_distribution(m);
    REQUIRE(stats.volumes.size() == 2);
    CHECK(stats.volumes[0] == 1);
    CHECK(stats.volumes[1] == 2);
  }
  SUBCASE("equivalent diameter of a rasterized sphere") {
    PhaseMask m({16, 16, 16});
    const double r = 6.0;
    for (int k = 0; k < 16; ++k)
      for (int j = 0; j < 16; ++j)
        for (int i = 0; i < 16; ++i) {
          double dx = i + 0.5 - 8.0, dy = j + 0.5 - 8.0, dz = k + 0.5 - 8.0;
          if (dx * dx + dy * dy + dz * dz <= r * r) m.set(i, j, k, true);
        }
    auto stats = metrics::droplet_size_distribution(m);
    REQUIRE(stats.volumes.size() == 1);
    CHECK(stats.volumes[0] == 912);
    REQUIRE(stats.d_eq.size() == 1);
    CHECK(stats.d_eq[0] == doctest::Approx(2.0 * std::cbrt(3.0 * 912 / (4.0 * M_PI))));
    CHECK(stats.d_eq[0] == doctest::Approx(2.0 * r).epsilon(0.05));
  }
}

TEST_CASE("histogram bins are log-spaced with edge clamping") {
  metrics::HistogramSpec spec;
  auto edges = spec.edges();
  REQUIRE(edges.size() == 17);
  CHECK(edges.front() == 1.0);
  CHECK(edges.back() == 64.0);
  for (std::size_t i = 1; i + 1 < edges.size(); ++i)
    CHECK(edges[i + 1] / edges[i] == doctest::Approx(edges[1] / edges[0]).epsilon(1e-9));

  auto counts = metrics::histogram_counts({0.5, 1.0, 2.0, 63.9, 64.0, 500.0}, spec);
  REQUIRE(counts.size() == 16);
  std::int64_t total = 0;
  for (auto c : counts) total += c;
  CHECK(total == 6);            // out-of-range values land in the edge bins
  CHECK(counts.front() >= 2);   // 0.5 clamps down, 1.0 starts the first bin
  CHECK(counts.back() >= 3);    // 63.9, 64.0 and 500.0

  SUBCASE("csv emission") {
    auto csv = metrics::histogram_csv({2.0, 3.0}, {2.5}, spec);
    CHECK(csv.rfind("bin_lo,bin_hi,count_truth,count_pred\n", 0) == 0);
    std::size_t lines = 0;
    for (char c : csv) lines += (c == '\n');
    CHECK(lines == 17);
  }
  SUBCASE("invalid spec") {
    metrics::HistogramSpec bad;
    bad.lo = 10;
    bad.hi = 10;
    CHECK_THROWS_AS(bad.edges(), ConfigError);
  }
}

TEST_CASE("summarize computes Student-t confidence intervals") {
  SUBCASE("synthetic five-value sample with known mean and std") {
    const double m = 0.953, s = 0.004, d = s / std::sqrt(2.5);
    auto stats = metrics::summarize({m - 2 * d, m - d, m, m + d, m + 2 * d});
    CHECK(stats.n == 5);
    CHECK(stats.mean == doctest::Approx(m).epsilon(1e-12));
    CHECK(stats.stddev == doctest::Approx(s).epsilon(1e-12));
    // t(0.975, 4) = 2.776445...
    CHECK(stats.ci_lo == doctest::Approx(m - 2.7764451 * s / std::sqrt(5.0)).epsilon(1e-6));
    CHECK(stats.ci_hi == doctest::Approx(m + 2.7764451 * s / std::sqrt(5.0)).epsilon(1e-6));
  }
  SUBCASE("constant sample collapses to a point interval") {
    auto stats = metrics::summarize({0.7, 0.7, 0.7});
    CHECK(stats.stddev < 1e-12);
    CHECK(stats.ci_lo == doctest::Approx(0.7).epsilon(1e-12));
    CHECK(stats.ci_hi == doctest::Approx(0.7).epsilon(1e-12));
  }
  SUBCASE("fewer than two values is an error") {
    CHECK_THROWS_AS(metrics::summarize({0.5}), StatsError);
    CHECK_THROWS_AS(metrics::summarize({}), StatsError);
  }
}

TEST_CASE("evaluate scores a reconstruction function over a split") {
  fs::path dir = fs::temp_directory_path() / "mpae_test_metrics" / "ds";
  fs::remove_all(dir);
  synthgen::SynthConfig cfg;
  cfg.grid = {8, 8, 8};
  cfg.mu = 1.2;
  auto manifest = synthgen::generate_dataset(cfg, 10, 3, dir);
  auto n_test = manifest.indices_of(volume::Split::Test).size();
  REQUIRE(n_test >= 1);

  SUBCASE("identity reconstruction is perfect for every representation") {
    for (const auto& rep : {RepSpec::sdf(), RepSpec::sharp(), RepSpec::tanh(1.0 / 32)}) {
      auto report = metrics::evaluate([](const VoxelGrid& g) { return g; }, manifest, dir,
                                      volume::Split::Test, rep);
      REQUIRE(report.per_sample.size() == n_test);
      for (const auto& s : report.per_sample) {
        CHECK(s.dice == 1.0);
        CHECK(s.hausdorff_norm == 0.0);
      }
      CHECK(report.d_eq_truth.size() == report.d_eq_pred.size());
    }
  }
  SUBCASE("a constant-background prediction flags empty masks") {
    auto report = metrics::evaluate(
        [](const VoxelGrid& g) { return VoxelGrid(g.dims, 0.0); }, manifest, dir,
        volume::Split::Test, RepSpec::sharp());
    for (const auto& s : report.per_sample) {
      CHECK(s.empty_pred);
      CHECK(s.hausdorff_degenerate == !s.empty_truth);
      CHECK(metrics::flags_string(s) != "-");
    }
  }
  SUBCASE("failures are rethrown with the sample id") {
    try {
      metrics::evaluate([](const VoxelGrid&) -> VoxelGrid { throw Error("boom"); }, manifest,
                        dir, volume::Split::Test, RepSpec::sharp());
      FAIL("expected rethrow");
    } catch (const Error& e) {
      std::string msg = e.what();
      CHECK(msg.find("sample") != std::string::npos);
      CHECK(msg.find("boom") != std::string::npos);
    }
  }
  SUBCASE("eval csv schema") {
    auto report = metrics::evaluate([](const VoxelGrid& g) { return g; }, manifest, dir,
                                    volume::Split::Test, RepSpec::sdf());
    auto csv = metrics::eval_csv(report.per_sample);
    CHECK(csv.rfind("sample_id,dice,hausdorff_norm,flags\n", 0) == 0);
    std::size_t lines = 0;
    for (char c : csv) lines += (c == '\n');
    CHECK(lines == 1 + report.per_sample.size());
  }
}
