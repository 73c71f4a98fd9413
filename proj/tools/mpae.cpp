#include <cstdio>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mpae/detail/io.hpp"
#include "mpae/harness.hpp"
#include "mpae/repr.hpp"
#include "mpae/synthgen.hpp"

namespace fs = std::filesystem;
using namespace mpae;

namespace {

struct ModelFlags {
  std::optional<int> levels, base_channels, latent_channels, groups;
  std::optional<std::string> activation;

  void add(CLI::App* cmd) {
    cmd->add_option("--levels", levels, "encoder/decoder resolution levels");
    cmd->add_option("--base-channels", base_channels, "channel width at full resolution");
    cmd->add_option("--latent-channels", latent_channels, "latent channels");
    cmd->add_option("--groups", groups, "group-norm groups");
    cmd->add_option("--activation", activation, "silu | relu | tanh");
  }

  void apply(model::ModelConfig& m) const {
    if (levels) m.levels = *levels;
    if (base_channels) m.base_channels = *base_channels;
    if (latent_channels) m.latent_channels = *latent_channels;
    if (groups) m.groups = *groups;
    if (activation) m.activation = tensor::act_from_string(*activation);
  }
};

struct TrainFlags {
  std::optional<double> lr, weight_decay;
  std::optional<std::string> loss;
  std::optional<int> batch_size, epochs;
  std::optional<std::uint64_t> seed;

  void add(CLI::App* cmd) {
    cmd->add_option("--lr", lr, "learning rate");
    cmd->add_option("--loss", loss, "l1 | mse");
    cmd->add_option("--weight-decay", weight_decay, "L2 weight decay");
    cmd->add_option("--batch-size", batch_size, "training batch size");
    cmd->add_option("--epochs", epochs, "training epochs");
    cmd->add_option("--seed", seed, "training seed (shuffle order)");
  }

  void apply(model::TrainConfig& t) const {
    if (lr) t.lr = *lr;
    if (loss) t.loss = tensor::loss_from_string(*loss);
    if (weight_decay) t.weight_decay = *weight_decay;
    if (batch_size) t.batch_size = *batch_size;
    if (epochs) t.epochs = *epochs;
    if (seed) t.seed = *seed;
  }
};

struct ExperimentFlags {
  std::string profile_name;
  std::string config_file;
  std::vector<std::string> datasets;
  std::vector<std::string> reps;
  std::optional<std::string> out_dir;
  std::optional<std::uint64_t> init_seed;
  bool identity = false;
  ModelFlags model;
  TrainFlags train;

  void add(CLI::App* cmd) {
    cmd->add_option("--profile", profile_name, "named defaults: desk | paper");
    cmd->add_option("--config", config_file, "experiment config JSON file")
        ->check(CLI::ExistingFile);
    cmd->add_option("--dataset", datasets, "dataset manifest path (repeatable)");
    cmd->add_option("--rep", reps, "representation tag: sdf | sharp | tanh:<eps> (repeatable)");
    cmd->add_option("--out", out_dir, "output directory");
    cmd->add_option("--init-seed", init_seed, "weight initialization seed");
    cmd->add_flag("--identity", identity, "skip training, evaluate the identity map");
    model.add(cmd);
    train.add(cmd);
  }

  harness::ExperimentConfig build() const {
    harness::ExperimentConfig cfg;
    if (!profile_name.empty()) {
      auto p = harness::profile(profile_name);
      cfg.model = p.model;
      cfg.train = p.train;
    }
    if (!config_file.empty()) cfg.merge_json(detail::read_file_bytes(config_file));
    if (!datasets.empty()) cfg.datasets = datasets;
    if (!reps.empty()) {
      cfg.representations.clear();
      for (const auto& r : reps) cfg.representations.push_back(RepSpec::parse(r));
    }
    if (out_dir) cfg.out_dir = *out_dir;
    if (init_seed) cfg.init_seed = *init_seed;
    if (identity) cfg.identity_model = true;
    model.apply(cfg.model);
    train.apply(cfg.train);
    return cfg;
  }
};

void print_eval_summary(const metrics::EvalReport& report) {
  if (report.dice_summary) {
    const auto& s = *report.dice_summary;
    std::printf("dice: mean=%s std=%s ci=[%s, %s] n=%d\n", format_double(s.mean).c_str(),
                format_double(s.stddev).c_str(), format_double(s.ci_lo).c_str(),
                format_double(s.ci_hi).c_str(), s.n);
  }
  if (report.hausdorff_summary) {
    const auto& s = *report.hausdorff_summary;
    std::printf("hausdorff_norm: mean=%s std=%s ci=[%s, %s] n=%d\n", format_double(s.mean).c_str(),
                format_double(s.stddev).c_str(), format_double(s.ci_lo).c_str(),
                format_double(s.ci_hi).c_str(), s.n);
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"volumetric two-phase interface autoencoder toolkit"};
  app.require_subcommand(1);
  int rc = 0;

  // synth-gen
  auto* synth = app.add_subcommand("synth-gen", "generate a synthetic droplet dataset");
  struct {
    std::string out, profile;
    std::optional<int> samples, extent, max_droplets;
    std::optional<double> mu, sigma;
    std::uint64_t seed = 1;
  } sg;
  synth->add_option("--out", sg.out, "dataset directory")->required();
  synth->add_option("--profile", sg.profile, "named defaults: desk | paper");
  synth->add_option("--samples", sg.samples, "number of volumes");
  synth->add_option("--extent", sg.extent, "cubic grid extent in voxels");
  synth->add_option("--mu", sg.mu, "lognormal radius location (log voxels)");
  synth->add_option("--sigma", sg.sigma, "lognormal radius scale");
  synth->add_option("--max-droplets", sg.max_droplets, "per-sample droplet budget");
  synth->add_option("--seed", sg.seed, "dataset seed");
  synth->callback([&] {
    synthgen::SynthConfig cfg;
    int samples = 200;
    if (!sg.profile.empty()) {
      auto p = harness::profile(sg.profile);
      cfg.grid = {p.grid_extent, p.grid_extent, p.grid_extent};
      cfg.mu = p.mu;
      samples = p.dataset_samples;
    }
    if (sg.extent) cfg.grid = {*sg.extent, *sg.extent, *sg.extent};
    if (sg.mu) cfg.mu = *sg.mu;
    if (sg.sigma) cfg.sigma = *sg.sigma;
    if (sg.max_droplets) cfg.max_droplets = *sg.max_droplets;
    if (sg.samples) samples = *sg.samples;
    auto manifest = synthgen::generate_dataset(cfg, samples, sg.seed, sg.out);
    std::printf("%s", detail::read_file_bytes(fs::path(sg.out) / "stats.txt").c_str());
    std::printf("wrote %zu volumes under %s\n", manifest.entries.size(), sg.out.c_str());
  });

  // ingest
  auto* ingest = app.add_subcommand("ingest", "cut interface patches from diffuse .vol fields");
  struct {
    std::string in, out;
    volume::IngestParams params;
  } ig;
  ingest->add_option("--in", ig.in, "directory of *.vol diffuse volumes")
      ->required()
      ->check(CLI::ExistingDirectory);
  ingest->add_option("--out", ig.out, "dataset directory")->required();
  ingest->add_option("--eps-sim", ig.params.eps_sim, "source interface half-thickness (recorded)");
  ingest->add_option("--patch-size", ig.params.patch_size, "cubic patch extent");
  ingest->add_option("--count-per-volume", ig.params.count_per_volume, "patches per input volume");
  ingest->add_option("--empty-threshold", ig.params.empty_threshold,
                     "minimum minority-phase fraction");
  ingest->add_option("--seed", ig.params.seed, "patch placement seed");
  ingest->callback([&] {
    auto manifest = volume::ingest_diffuse_volumes(ig.in, ig.params, ig.out);
    std::printf("ingested %zu patches under %s\n", manifest.entries.size(), ig.out.c_str());
  });

  // convert
  auto* convert = app.add_subcommand("convert", "derive a representation from a stored SDF");
  struct {
    std::string in, out, rep = "sharp";
  } cv;
  convert->add_option("--in", cv.in, "input volume (.vol with JSON sidecar)")->required();
  convert->add_option("--out", cv.out, "output volume path")->required();
  convert->add_option("--rep", cv.rep, "target: sdf | sharp | tanh:<eps>");
  convert->callback([&] {
    auto loaded = volume::read_volume(cv.in);
    repr::InterfaceField field{std::move(loaded.grid), loaded.representation};
    auto outrep = RepSpec::parse(cv.rep);
    auto out = repr::from_sdf(field, outrep);
    volume::write_volume(out.grid, cv.out, out.representation);
    std::printf("wrote %s (%s)\n", cv.out.c_str(), outrep.label().c_str());
  });

  // train
  auto* train = app.add_subcommand("train", "train one autoencoder and evaluate it");
  struct {
    ExperimentFlags exp;
    std::string name = "train", manifest, rep = "sdf", eval_split = "test";
    double subset_fraction = 1.0;
  } tr;
  tr.exp.add(train);
  train->add_option("--manifest", tr.manifest, "dataset manifest")->required();
  train->add_option("--name", tr.name, "run name under <out>/runs");
  train->add_option("--run-rep", tr.rep, "representation tag for this run");
  train->add_option("--subset-fraction", tr.subset_fraction, "training subset fraction");
  train->add_option("--eval-split", tr.eval_split, "train | test | val");
  train->callback([&] {
    auto cfg = tr.exp.build();
    harness::RunSpec spec;
    spec.name = tr.name;
    spec.manifest_path = tr.manifest;
    spec.rep = RepSpec::parse(tr.rep);
    spec.model = cfg.model;
    spec.train = cfg.train;
    spec.init_seed = cfg.init_seed;
    spec.subset_fraction = tr.subset_fraction;
    spec.eval_split = volume::split_from_string(tr.eval_split);
    spec.identity_model = cfg.identity_model;
    auto result = harness::execute_run(spec, harness::resolve_out_dir(cfg));
    if (result.diverged) {
      std::printf("training diverged:\n%s\n", result.divergence.c_str());
      rc = 1;
      return;
    }
    if (!result.epoch_loss.empty())
      std::printf("loss: first=%s last=%s epochs=%zu\n",
                  format_double(result.epoch_loss.front()).c_str(),
                  format_double(result.epoch_loss.back()).c_str(), result.epoch_loss.size());
    print_eval_summary(result.eval);
  });

  // eval
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a dataset split");
  struct {
    std::string checkpoint, manifest, rep = "sdf", split = "test", out;
    bool identity = false;
  } ev;
  eval->add_option("--checkpoint", ev.checkpoint, "model checkpoint");
  eval->add_option("--manifest", ev.manifest, "dataset manifest")->required();
  eval->add_option("--rep", ev.rep, "representation tag");
  eval->add_option("--split", ev.split, "train | test | val");
  eval->add_option("--out", ev.out, "directory for eval.csv and droplets.csv");
  eval->add_flag("--identity", ev.identity, "evaluate the identity map instead of a checkpoint");
  eval->callback([&] {
    if (!ev.identity && ev.checkpoint.empty())
      throw UsageError("eval: --checkpoint or --identity is required");
    auto manifest = volume::read_manifest(ev.manifest);
    auto rep = RepSpec::parse(ev.rep);
    auto split = volume::split_from_string(ev.split);
    fs::path dir = fs::path(ev.manifest).parent_path();
    metrics::EvalReport report;
    if (ev.identity) {
      report = metrics::evaluate([](const VoxelGrid& g) { return g; }, manifest, dir, split, rep);
    } else {
      auto net = model::load_checkpoint(ev.checkpoint);
      report = metrics::evaluate(net, manifest, dir, split, rep);
    }
    if (ev.out.empty()) {
      std::printf("%s", metrics::eval_csv(report.per_sample).c_str());
    } else {
      fs::create_directories(ev.out);
      detail::write_file_atomic(fs::path(ev.out) / "eval.csv",
                                metrics::eval_csv(report.per_sample));
      detail::write_file_atomic(
          fs::path(ev.out) / "droplets.csv",
          metrics::histogram_csv(report.d_eq_truth, report.d_eq_pred, {}));
    }
    print_eval_summary(report);
  });

  // experiment drivers
  ExperimentFlags sweep_flags;
  auto* sweep = app.add_subcommand("repr-sweep", "train and evaluate every representation");
  sweep_flags.add(sweep);
  sweep->callback([&] { rc = harness::cmd_repr_sweep(sweep_flags.build()); });

  ExperimentFlags grid_flags;
  auto* grid = app.add_subcommand("grid-search", "hyper-parameter grid search on the val split");
  grid_flags.add(grid);
  grid->callback([&] { rc = harness::cmd_grid_search(grid_flags.build(), {}); });

  ExperimentFlags unc_flags;
  int unc_seeds = 5;
  double unc_fraction = 0.5;
  auto* unc = app.add_subcommand("uncertainty", "seed-repeat study with summary statistics");
  unc_flags.add(unc);
  unc->add_option("--seeds", unc_seeds, "number of training seeds");
  unc->add_option("--subset-fraction", unc_fraction, "training subset fraction");
  unc->callback([&] { rc = harness::cmd_uncertainty(unc_flags.build(), unc_seeds, unc_fraction); });

  ExperimentFlags ts_flags;
  std::vector<double> ts_fractions{1.0, 0.5, 0.25, 0.125, 0.0625};
  auto* ts = app.add_subcommand("trainsize-sweep", "training-set-size scaling study");
  ts_flags.add(ts);
  ts->add_option("--fractions", ts_fractions, "training subset fractions");
  ts->callback([&] { rc = harness::cmd_trainsize_sweep(ts_flags.build(), ts_fractions); });

  ExperimentFlags cross_flags;
  auto* cross = app.add_subcommand("cross-eval", "train-on-one, evaluate-on-all dataset matrix");
  cross_flags.add(cross);
  cross->callback([&] { rc = harness::cmd_cross_eval(cross_flags.build()); });

  // report
  auto* report = app.add_subcommand("report", "collect results into CSV/SVG/VTK artifacts");
  std::string results_dir;
  report->add_option("--results", results_dir, "experiment output directory")
      ->required()
      ->check(CLI::ExistingDirectory);
  report->callback([&] { rc = harness::cmd_report(results_dir); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const UsageError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return rc;
}
