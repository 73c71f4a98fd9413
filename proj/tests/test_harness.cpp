#include <doctest.h>

#include <cstdlib>
#include <filesystem>

#include "mpae/detail/io.hpp"
#include "mpae/harness.hpp"
#include "mpae/repr.hpp"
#include "mpae/synthgen.hpp"
#include "oracles.hpp"

using namespace mpae;
namespace fs = std::filesystem;

namespace {

fs::path temp_root() {
  static fs::path root = [] {
    fs::path p = fs::temp_directory_path() / "mpae_test_harness";
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
  }();
  return root;
}

fs::path make_dataset(const std::string& name, int n, std::uint64_t seed) {
  fs::path dir = temp_root() / name;
  if (fs::exists(dir / "manifest.json")) return dir / "manifest.json";
  synthgen::SynthConfig cfg;
  cfg.grid = {8, 8, 8};
  cfg.mu = 1.2;
  synthgen::generate_dataset(cfg, n, seed, dir);
  return dir / "manifest.json";
}

model::ModelConfig tiny_model() {
  model::ModelConfig m;
  m.levels = 1;
  m.base_channels = 4;
  m.latent_channels = 2;
  m.groups = 2;
  return m;
}

harness::ExperimentConfig identity_config(const std::string& out_name) {
  harness::ExperimentConfig cfg;
  cfg.datasets = {make_dataset("shared", 12, 5).string()};
  cfg.representations = {RepSpec::sharp()};
  cfg.identity_model = true;
  cfg.model = tiny_model();
  cfg.out_dir = (temp_root() / out_name).string();
  return cfg;
}

}  // namespace

TEST_CASE("profiles carry the documented defaults") {
  auto desk = harness::profile("desk");
  CHECK(desk.model.base_channels == 8);
  CHECK(desk.grid_extent == 32);
  CHECK(desk.train.epochs == 20);
  auto paper = harness::profile("paper");
  CHECK(paper.model.base_channels == 16);
  CHECK(paper.grid_extent == 64);
  CHECK(paper.train.lr == 1e-5);
  CHECK(paper.train.epochs == 100);
  CHECK(paper.train.weight_decay == 1e-6);
  CHECK(paper.train.batch_size == 4);
  CHECK_THROWS_AS(harness::profile("workstation"), ConfigError);
}

TEST_CASE("default representation list") {
  auto reps = harness::default_representations();
  REQUIRE(reps.size() == 5);
  CHECK(reps[0] == RepSpec::sdf());
  CHECK(reps[1] == RepSpec::sharp());
  CHECK(reps[2] == RepSpec::tanh(1.0 / 128));
  CHECK(reps[3] == RepSpec::tanh(1.0 / 32));
  CHECK(reps[4] == RepSpec::tanh(1.0 / 8));
}

TEST_CASE("experiment config json round trip and partial merge") {
  auto cfg = identity_config("cfg");
  auto text = cfg.to_json();
  auto back = harness::ExperimentConfig::from_json(text);
  CHECK(back.to_json() == text);

  auto partial = harness::ExperimentConfig::from_json(R"({"train": {"lr": 0.5}})");
  CHECK(partial.train.lr == 0.5);
  CHECK(partial.train.epochs == 1);
  CHECK(partial.representations.size() == 5);
  CHECK(partial.model.base_channels == 16);

  SUBCASE("merge overwrites only present keys") {
    auto base = harness::profile("desk");
    harness::ExperimentConfig c;
    c.model = base.model;
    c.train = base.train;
    c.merge_json(R"({"model": {"latent_channels": 8}})");
    CHECK(c.model.latent_channels == 8);
    CHECK(c.model.base_channels == 8);  // desk value survives
    CHECK(c.train.lr == 1e-4);
  }
  SUBCASE("bad json") {
    CHECK_THROWS_AS(harness::ExperimentConfig::from_json("{"), FormatError);
    CHECK_THROWS_AS(harness::ExperimentConfig::from_json(R"({"representations": ["huh"]})"),
                    ConfigError);
  }
  SUBCASE("validation requires existing manifests") {
    auto bad = identity_config("cfg2");
    bad.datasets = {"/nonexistent/manifest.json"};
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad.datasets.clear();
    CHECK_THROWS_AS(bad.validate(), ConfigError);
  }
}

TEST_CASE("relative output directories resolve against the environment root") {
  harness::ExperimentConfig cfg;
  cfg.out_dir = "out";
  setenv("MPAE_OUT_ROOT", "/tmp/mpae_root", 1);
  CHECK(harness::resolve_out_dir(cfg) == fs::path("/tmp/mpae_root/out"));
  unsetenv("MPAE_OUT_ROOT");
  CHECK(harness::resolve_out_dir(cfg) == fs::path("out"));
  cfg.out_dir = "/abs/out";
  setenv("MPAE_OUT_ROOT", "/tmp/mpae_root", 1);
  CHECK(harness::resolve_out_dir(cfg) == fs::path("/abs/out"));
  unsetenv("MPAE_OUT_ROOT");
}

TEST_CASE("subset indices are nested, deterministic and capped") {
  auto manifest = volume::read_manifest(make_dataset("shared", 12, 5));
  auto all = harness::subset_indices(manifest, volume::Split::Train, 1.0);
  auto half = harness::subset_indices(manifest, volume::Split::Train, 0.5);
  auto quarter = harness::subset_indices(manifest, volume::Split::Train, 0.25);
  CHECK(all.size() == manifest.indices_of(volume::Split::Train).size());
  CHECK(half.size() == (all.size() + 1) / 2);
  for (std::size_t i = 0; i < half.size(); ++i) CHECK(half[i] == all[i]);
  for (std::size_t i = 0; i < quarter.size(); ++i) CHECK(quarter[i] == half[i]);

  SUBCASE("full fraction is a permutation of the split") {
    auto sorted = all;
    std::sort(sorted.begin(), sorted.end());
    CHECK(sorted == manifest.indices_of(volume::Split::Train));
  }
  SUBCASE("fraction bounds") {
    CHECK_THROWS_AS(harness::subset_indices(manifest, volume::Split::Train, 0.0), ConfigError);
    CHECK_THROWS_AS(harness::subset_indices(manifest, volume::Split::Train, 1.5), ConfigError);
  }
}

TEST_CASE("execute_run caches by config hash") {
  harness::RunSpec spec;
  spec.name = "idrun";
  spec.manifest_path = make_dataset("shared", 12, 5);
  spec.rep = RepSpec::sharp();
  spec.model = tiny_model();
  spec.identity_model = true;
  fs::path out = temp_root() / "exec";
  fs::remove_all(out);

  auto first = harness::execute_run(spec, out);
  CHECK(!first.from_cache);
  CHECK(!first.diverged);
  REQUIRE(!first.eval.per_sample.empty());
  for (const auto& s : first.eval.per_sample) CHECK(s.dice == 1.0);
  CHECK(fs::exists(out / "runs" / "idrun" / "result.json"));
  CHECK(fs::exists(out / "runs" / "idrun" / "eval.csv"));
  CHECK(fs::exists(out / "runs" / "idrun" / "droplets.csv"));
  CHECK(!fs::exists(out / "runs" / "idrun" / "model.ckpt"));  // identity keeps no weights

  SUBCASE("rerun hits the cache and preserves the result") {
    auto again = harness::execute_run(spec, out);
    CHECK(again.from_cache);
    CHECK(again.config_hash == first.config_hash);
    REQUIRE(again.eval.per_sample.size() == first.eval.per_sample.size());
    REQUIRE(again.eval.dice_summary.has_value());
    CHECK(again.eval.dice_summary->mean == first.eval.dice_summary->mean);
  }
  SUBCASE("config changes invalidate the cache") {
    auto changed = spec;
    changed.rep = RepSpec::sdf();
    auto r = harness::execute_run(changed, out);
    CHECK(!r.from_cache);
    CHECK(r.config_hash != first.config_hash);
  }
  SUBCASE("run names cannot escape the output root") {
    auto bad = spec;
    bad.name = "../escape";
    CHECK_THROWS_AS(harness::execute_run(bad, out), ConfigError);
  }
}

TEST_CASE("execute_run persists and resumes diverged trainings") {
  harness::RunSpec spec;
  spec.name = "diverge";
  spec.manifest_path = make_dataset("shared", 12, 5);
  spec.rep = RepSpec::sharp();
  spec.model = tiny_model();
  spec.train.lr = 1e18;
  spec.train.loss = model::LossKind::MSE;
  spec.train.batch_size = 4;
  spec.train.epochs = 30;
  fs::path out = temp_root() / "exec_div";

  auto r = harness::execute_run(spec, out);
  CHECK(r.diverged);
  CHECK(!r.divergence.empty());
  CHECK(r.eval.per_sample.empty());

  auto again = harness::execute_run(spec, out);
  CHECK(again.from_cache);
  CHECK(again.diverged);
}

TEST_CASE("repr sweep emits per-sample rows, aggregate rows and stable bytes") {
  auto cfg = identity_config("sweep");
  cfg.representations = {RepSpec::sharp(), RepSpec::tanh(1.0 / 32)};
  REQUIRE(harness::cmd_repr_sweep(cfg) == 0);

  fs::path out = cfg.out_dir;
  auto rows = detail::read_file_bytes(out / "repr_sweep.csv");
  CHECK(rows.rfind("representation,sample_id,dice,hausdorff_norm,flags\n", 0) == 0);
  auto manifest = volume::read_manifest(cfg.datasets.front());
  auto n_test = manifest.indices_of(volume::Split::Test).size();
  std::size_t lines = 0;
  for (char c : rows) lines += (c == '\n');
  CHECK(lines == 1 + 2 * (n_test + 1));  // header + per-sample + one mean row per rep

  auto agg = detail::read_file_bytes(out / "repr_sweep_aggregates.csv");
  CHECK(agg.find("sharp,dice,1,0,1,1,") != std::string::npos);
  auto failures = detail::read_file_bytes(out / "repr_sweep_failures.csv");
  CHECK(failures == "run,reason\n");

  SUBCASE("resume regenerates identical bytes") {
    REQUIRE(harness::cmd_repr_sweep(cfg) == 0);
    CHECK(detail::read_file_bytes(out / "repr_sweep.csv") == rows);
    CHECK(detail::read_file_bytes(out / "repr_sweep_aggregates.csv") == agg);
  }
}

TEST_CASE("grid search requires a validation split and ranks the product") {
  auto cfg = identity_config("grid");
  // 20 samples apportion 80/15/5 to {16, 3, 1}, so Val is nonempty.
  cfg.datasets = {make_dataset("val20", 20, 7).string()};
  harness::GridSearchSpace space;
  CHECK(space.size() == 36);

  SUBCASE("degenerate one-point space") {
    space.losses = {model::LossKind::L1};
    space.lrs = {1e-4};
    space.weight_decays = {1e-6};
    space.activations = {model::Act::SiLU};
    REQUIRE(harness::cmd_grid_search(cfg, space) == 0);
    auto csv = detail::read_file_bytes(fs::path(cfg.out_dir) / "grid_search.csv");
    CHECK(csv.rfind("rank,loss,lr,weight_decay,activation,score,diverged\n", 0) == 0);
    std::size_t lines = 0;
    for (char c : csv) lines += (c == '\n');
    CHECK(lines == 2);
    CHECK(csv.find("1,l1,0.0001,1e-06,silu,1,no") != std::string::npos);
    CHECK(fs::exists(fs::path(cfg.out_dir) / "grid_top5.csv"));
    auto coords = detail::read_file_bytes(fs::path(cfg.out_dir) / "parallel_coordinates.csv");
    CHECK(coords == "loss,lr,weight_decay,activation,score\nl1,0.0001,1e-06,silu,1\n");
    auto notes = detail::read_file_bytes(fs::path(cfg.out_dir) / "grid_search_notes.txt");
    CHECK(notes.find("weight_decay=1e-06: observed") != std::string::npos);
    CHECK(notes.find("activation=silu: observed") != std::string::npos);
  }
  SUBCASE("empty validation split is rejected") {
    // A 3-sample dataset apportions 80/15/5 to {3,0,0}.
    auto tiny = identity_config("grid_tiny");
    tiny.datasets = {make_dataset("tiny3", 3, 1).string()};
    CHECK_THROWS_AS(harness::cmd_grid_search(tiny, {}), ConfigError);
  }
}

TEST_CASE("uncertainty reports zero spread for frozen training") {
  auto cfg = identity_config("unc");
  cfg.identity_model = false;
  cfg.train.lr = 0.0;  // untrained models identical across seeds
  cfg.train.epochs = 1;
  REQUIRE(harness::cmd_uncertainty(cfg, 3, 0.5) == 0);
  auto csv = detail::read_file_bytes(fs::path(cfg.out_dir) / "uncertainty.csv");
  CHECK(csv.rfind("representation,metric,mean,stddev,ci_lo,ci_hi,n\n", 0) == 0);

  // stddev column of the dice row must be exactly zero.
  auto row = csv.find("sharp,dice,");
  REQUIRE(row != std::string::npos);
  auto c2 = csv.find(',', row + std::string("sharp,dice,").size());
  auto c3 = csv.find(',', c2 + 1);
  CHECK(csv.substr(c2 + 1, c3 - c2 - 1) == "0");

  CHECK_THROWS_AS(harness::cmd_uncertainty(cfg, 1, 0.5), ConfigError);
  CHECK_THROWS_AS(harness::cmd_uncertainty(cfg, 3, 0.0), ConfigError);
}

TEST_CASE("trainsize sweep enforces the minimum subset and fits the power law") {
  auto cfg = identity_config("ts");
  REQUIRE(harness::cmd_trainsize_sweep(cfg, {1.0, 0.5}) == 0);
  auto csv = detail::read_file_bytes(fs::path(cfg.out_dir) / "trainsize.csv");
  CHECK(csv.rfind("fraction,n_train,mean_dice,mean_hausdorff,one_minus_dice\n", 0) == 0);
  auto fit = detail::read_file_bytes(fs::path(cfg.out_dir) / "trainsize_fit.txt");
  // Identity reconstruction leaves no error to regress on.
  CHECK(fit.find("unavailable") != std::string::npos);

  CHECK_THROWS_AS(harness::cmd_trainsize_sweep(cfg, {0.1}), ConfigError);
  CHECK_THROWS_AS(harness::cmd_trainsize_sweep(cfg, {}), ConfigError);
}

TEST_CASE("power-law fit recovers exact exponents") {
  CHECK(harness::fit_power_law_exponent({16, 64, 256}, {1.0, 0.5, 0.25}) ==
        doctest::Approx(-0.5).epsilon(1e-12));
  CHECK(harness::fit_power_law_exponent({10, 100}, {0.3, 0.03}) ==
        doctest::Approx(-1.0).epsilon(1e-12));
  SUBCASE("degenerate inputs") {
    CHECK_THROWS_AS(harness::fit_power_law_exponent({10}, {0.3}), StatsError);
    CHECK_THROWS_AS(harness::fit_power_law_exponent({10, 10}, {0.3, 0.2}), StatsError);
    CHECK_THROWS_AS(harness::fit_power_law_exponent({10, 20}, {0.0, 0.1}), StatsError);
    CHECK_THROWS_AS(harness::fit_power_law_exponent({10, 20}, {0.1}), StatsError);
  }
}

TEST_CASE("cross eval emits the full train-by-eval matrix") {
  auto cfg = identity_config("cross");
  cfg.datasets = {make_dataset("shared", 12, 5).string(), make_dataset("alt", 10, 9).string()};
  REQUIRE(harness::cmd_cross_eval(cfg) == 0);
  auto csv = detail::read_file_bytes(fs::path(cfg.out_dir) / "cross_eval.csv");
  CHECK(csv.rfind("representation,train_dataset,eval_dataset,mean_dice,mean_hausdorff,n_samples\n",
                  0) == 0);
  std::size_t lines = 0;
  for (char c : csv) lines += (c == '\n');
  CHECK(lines == 1 + 4);  // 2 datasets squared, one representation
}

TEST_CASE("vtk export is exact and x-fastest") {
  PhaseMask m({2, 2, 2});
  m.data = {1, 0, 0, 1, 1, 0, 0, 1};
  auto vtk = harness::vtk_structured_points(m, "probe");
  CHECK(vtk ==
        "# vtk DataFile Version 3.0\n"
        "probe\n"
        "ASCII\n"
        "DATASET STRUCTURED_POINTS\n"
        "DIMENSIONS 2 2 2\n"
        "ORIGIN 0 0 0\n"
        "SPACING 0.5 0.5 0.5\n"
        "POINT_DATA 8\n"
        "SCALARS phase int 1\n"
        "LOOKUP_TABLE default\n"
        "1 0 0 1 1 0 0 1\n");
}

TEST_CASE("svg builders emit fixed-size deterministic documents") {
  auto bar = harness::svg_bar_chart("dice by representation", {"sdf", "sharp"}, {0.8, 0.95});
  CHECK(bar.rfind("<svg", 0) == 0);
  CHECK(bar.find("</svg>") != std::string::npos);
  CHECK(bar.find("dice by representation") != std::string::npos);
  CHECK(bar == harness::svg_bar_chart("dice by representation", {"sdf", "sharp"}, {0.8, 0.95}));
  CHECK_THROWS_AS(harness::svg_bar_chart("t", {"a"}, {0.5, 0.6}), UsageError);

  std::vector<harness::ParallelCoordsRow> rows = {
      {"l1", 1e-4, 1e-6, "silu", 0.9},
      {"mse", 1e-3, 1e-4, "relu", 0.4},
  };
  auto pc = harness::svg_parallel_coordinates(rows);
  CHECK(pc.rfind("<svg", 0) == 0);
  CHECK(pc.find("polyline") != std::string::npos);
  CHECK(pc == harness::svg_parallel_coordinates(rows));
}

TEST_CASE("report tolerates missing inputs and is deterministic") {
  fs::path results = temp_root() / "empty_results";
  fs::create_directories(results);
  REQUIRE(harness::cmd_report(results) == 0);
  auto manifest = detail::read_file_bytes(results / "report" / "manifest.txt");
  CHECK(manifest.find("missing: repr_sweep.csv") != std::string::npos);
  CHECK(manifest.find("found:") == std::string::npos);

  SUBCASE("with sweep results present") {
    auto cfg = identity_config("sweep");  // reuses the sweep run from above if present
    harness::cmd_repr_sweep(cfg);
    REQUIRE(harness::cmd_report(cfg.out_dir) == 0);
    fs::path report = fs::path(cfg.out_dir) / "report";
    CHECK(fs::exists(report / "repr_dice.svg"));
    auto first = detail::read_file_bytes(report / "manifest.txt");
    REQUIRE(harness::cmd_report(cfg.out_dir) == 0);
    CHECK(detail::read_file_bytes(report / "manifest.txt") == first);
  }
}
