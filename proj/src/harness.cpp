#include "mpae/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <numeric>
#include <memory>

#include <json.hpp>

#include "mpae/detail/io.hpp"
#include "mpae/repr.hpp"

namespace mpae::harness {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::uint64_t kSubsetStream = 0x535542534554ULL;

std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

json model_to_json(const model::ModelConfig& m) { return json::parse(m.to_json()); }

json train_to_json(const model::TrainConfig& t) {
  json j;
  j["lr"] = t.lr;
  j["loss"] = tensor::to_string(t.loss);
  j["weight_decay"] = t.weight_decay;
  j["activation"] = tensor::to_string(t.activation);
  j["batch_size"] = t.batch_size;
  j["epochs"] = t.epochs;
  j["seed"] = t.seed;
  return j;
}

void merge_model(const json& j, model::ModelConfig& m) {
  if (j.contains("levels")) m.levels = j.at("levels").get<int>();
  if (j.contains("base_channels")) m.base_channels = j.at("base_channels").get<int>();
  if (j.contains("latent_channels")) m.latent_channels = j.at("latent_channels").get<int>();
  if (j.contains("groups")) m.groups = j.at("groups").get<int>();
  if (j.contains("activation"))
    m.activation = tensor::act_from_string(j.at("activation").get<std::string>());
  if (j.contains("pad_mode"))
    m.pad_mode = tensor::pad_mode_from_string(j.at("pad_mode").get<std::string>());
  if (j.contains("eps_ws")) m.eps_ws = j.at("eps_ws").get<double>();
  if (j.contains("eps_gn")) m.eps_gn = j.at("eps_gn").get<double>();
}

void merge_train(const json& j, model::TrainConfig& t) {
  if (j.contains("lr")) t.lr = j.at("lr").get<double>();
  if (j.contains("loss")) t.loss = tensor::loss_from_string(j.at("loss").get<std::string>());
  if (j.contains("weight_decay")) t.weight_decay = j.at("weight_decay").get<double>();
  if (j.contains("activation"))
    t.activation = tensor::act_from_string(j.at("activation").get<std::string>());
  if (j.contains("batch_size")) t.batch_size = j.at("batch_size").get<int>();
  if (j.contains("epochs")) t.epochs = j.at("epochs").get<int>();
  if (j.contains("seed")) t.seed = j.at("seed").get<std::uint64_t>();
}

json summary_to_json(const metrics::SummaryStats& s) {
  json j;
  j["mean"] = s.mean;
  j["stddev"] = s.stddev;
  j["ci_lo"] = s.ci_lo;
  j["ci_hi"] = s.ci_hi;
  j["n"] = s.n;
  return j;
}

metrics::SummaryStats summary_from_json(const json& j) {
  metrics::SummaryStats s;
  s.mean = j.at("mean").get<double>();
  s.stddev = j.at("stddev").get<double>();
  s.ci_lo = j.at("ci_lo").get<double>();
  s.ci_hi = j.at("ci_hi").get<double>();
  s.n = j.at("n").get<int>();
  return s;
}

std::string result_to_json(const RunResult& r) {
  json j;
  j["name"] = r.name;
  j["config_hash"] = r.config_hash;
  j["diverged"] = r.diverged;
  j["divergence"] = r.divergence;
  j["epoch_loss"] = r.epoch_loss;
  json rows = json::array();
  for (const auto& s : r.eval.per_sample) {
    json row;
    row["id"] = s.id;
    row["dice"] = s.dice;
    row["hausdorff_norm"] = s.hausdorff_norm;
    row["empty_pred"] = s.empty_pred;
    row["empty_truth"] = s.empty_truth;
    row["hausdorff_degenerate"] = s.hausdorff_degenerate;
    rows.push_back(row);
  }
  j["per_sample"] = rows;
  j["dice_summary"] = r.eval.dice_summary ? summary_to_json(*r.eval.dice_summary) : json();
  j["hausdorff_summary"] =
      r.eval.hausdorff_summary ? summary_to_json(*r.eval.hausdorff_summary) : json();
  return j.dump(2) + "\n";
}

RunResult result_from_json(const std::string& text) {
  RunResult r;
  try {
    json j = json::parse(text);
    r.name = j.at("name").get<std::string>();
    r.config_hash = j.at("config_hash").get<std::string>();
    r.diverged = j.at("diverged").get<bool>();
    r.divergence = j.at("divergence").get<std::string>();
    r.epoch_loss = j.at("epoch_loss").get<std::vector<double>>();
    for (const auto& row : j.at("per_sample")) {
      metrics::EvalResult s;
      s.id = row.at("id").get<std::string>();
      s.dice = row.at("dice").get<double>();
      s.hausdorff_norm = row.at("hausdorff_norm").get<double>();
      s.empty_pred = row.at("empty_pred").get<bool>();
      s.empty_truth = row.at("empty_truth").get<bool>();
      s.hausdorff_degenerate = row.at("hausdorff_degenerate").get<bool>();
      r.eval.per_sample.push_back(std::move(s));
    }
    if (!j.at("dice_summary").is_null())
      r.eval.dice_summary = summary_from_json(j.at("dice_summary"));
    if (!j.at("hausdorff_summary").is_null())
      r.eval.hausdorff_summary = summary_from_json(j.at("hausdorff_summary"));
  } catch (const json::exception& e) {
    throw FormatError(std::string("run result: bad json: ") + e.what());
  }
  return r;
}

double mean_of(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double mean_dice(const RunResult& r) {
  std::vector<double> d;
  for (const auto& s : r.eval.per_sample) d.push_back(s.dice);
  return mean_of(d);
}

double mean_hausdorff(const RunResult& r) {
  std::vector<double> d;
  for (const auto& s : r.eval.per_sample) d.push_back(s.hausdorff_norm);
  return mean_of(d);
}

// Aggregate row for a metric list: Student-t stats when possible, a
// degenerate point interval for a single sample.
metrics::SummaryStats aggregate(const std::vector<double>& values) {
  if (values.size() >= 2) return metrics::summarize(values);
  metrics::SummaryStats s;
  s.n = static_cast<int>(values.size());
  s.mean = s.ci_lo = s.ci_hi = values.empty() ? 0.0 : values.front();
  return s;
}

std::string summary_csv_row(const std::string& prefix, const std::string& metric,
                            const metrics::SummaryStats& s) {
  return prefix + ',' + metric + ',' + format_double(s.mean) + ',' + format_double(s.stddev) +
         ',' + format_double(s.ci_lo) + ',' + format_double(s.ci_hi) + ',' + std::to_string(s.n) +
         '\n';
}

void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  detail::write_file_atomic(path, text);
}

std::string loss_csv(const std::vector<double>& epoch_loss) {
  std::string out = "epoch,loss\n";
  for (std::size_t e = 0; e < epoch_loss.size(); ++e)
    out += std::to_string(e) + ',' + format_double(epoch_loss[e]) + '\n';
  return out;
}

}  // namespace

Profile profile(const std::string& name) {
  Profile p;
  p.name = name;
  if (name == "desk") {
    p.model = model::ModelConfig{4, 8, 4, 8, model::Act::SiLU, model::PadMode::Zero, 1e-5, 1e-5};
    p.train.lr = 1e-4;
    p.train.epochs = 20;
    p.grid_extent = 32;
    p.dataset_samples = 200;
    p.mu = 2.0;
  } else if (name == "paper") {
    p.model = model::ModelConfig{4, 16, 4, 8, model::Act::SiLU, model::PadMode::Zero, 1e-5, 1e-5};
    p.train.lr = 1e-5;
    p.train.epochs = 100;
    p.grid_extent = 64;
    p.dataset_samples = 1000;
    p.mu = 2.0;
  } else {
    throw ConfigError("profile: unknown profile '" + name + "' (expected desk or paper)");
  }
  p.train.loss = model::LossKind::L1;
  p.train.weight_decay = 1e-6;
  p.train.batch_size = 4;
  p.train.seed = 1;
  return p;
}

std::vector<RepSpec> default_representations() {
  return {RepSpec::sdf(), RepSpec::sharp(), RepSpec::tanh(1.0 / 128), RepSpec::tanh(1.0 / 32),
          RepSpec::tanh(1.0 / 8)};
}

void ExperimentConfig::validate() const {
  if (datasets.empty()) throw ConfigError("experiment: at least one dataset manifest is required");
  for (const auto& d : datasets)
    if (!fs::exists(d)) throw ConfigError("experiment: missing dataset manifest " + d);
  if (representations.empty()) throw ConfigError("experiment: representation list is empty");
  if (out_dir.empty()) throw ConfigError("experiment: out_dir is empty");
  model.validate();
  train.validate();
}

std::string ExperimentConfig::to_json() const {
  json j;
  j["datasets"] = datasets;
  std::vector<std::string> reps;
  for (const auto& r : representations) reps.push_back(r.label());
  j["representations"] = reps;
  j["model"] = model_to_json(model);
  j["train"] = train_to_json(train);
  j["init_seed"] = init_seed;
  j["out_dir"] = out_dir;
  j["identity_model"] = identity_model;
  return j.dump(2) + "\n";
}

void ExperimentConfig::merge_json(const std::string& text) {
  try {
    json j = json::parse(text);
    if (j.contains("datasets")) datasets = j.at("datasets").get<std::vector<std::string>>();
    if (j.contains("representations")) {
      representations.clear();
      for (const auto& r : j.at("representations"))
        representations.push_back(RepSpec::parse(r.get<std::string>()));
    }
    if (j.contains("model")) merge_model(j.at("model"), model);
    if (j.contains("train")) merge_train(j.at("train"), train);
    if (j.contains("init_seed")) init_seed = j.at("init_seed").get<std::uint64_t>();
    if (j.contains("out_dir")) out_dir = j.at("out_dir").get<std::string>();
    if (j.contains("identity_model")) identity_model = j.at("identity_model").get<bool>();
  } catch (const json::exception& e) {
    throw FormatError(std::string("experiment config: bad json: ") + e.what());
  }
}

ExperimentConfig ExperimentConfig::from_json(const std::string& text) {
  ExperimentConfig c;
  c.merge_json(text);
  return c;
}

ExperimentConfig ExperimentConfig::load(const fs::path& file) {
  return from_json(detail::read_file_bytes(file));
}

fs::path resolve_out_dir(const ExperimentConfig& config) {
  fs::path out = config.out_dir;
  if (out.is_relative()) {
    if (const char* root = std::getenv("MPAE_OUT_ROOT")) out = fs::path(root) / out;
  }
  return out;
}

std::string config_hash(const std::string& canonical_json) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(fnv1a64(canonical_json)));
  return buf;
}

std::string RunSpec::canonical_json() const {
  json j;
  j["name"] = name;
  j["dataset"] = manifest_path.string();
  j["rep"] = rep.label();
  j["model"] = model_to_json(model);
  j["train"] = train_to_json(train);
  j["init_seed"] = init_seed;
  j["subset_fraction"] = subset_fraction;
  j["eval_split"] = volume::to_string(eval_split);
  j["identity_model"] = identity_model;
  return j.dump(2) + "\n";
}

std::vector<std::size_t> subset_indices(const volume::DatasetManifest& manifest,
                                        volume::Split split, double fraction) {
  if (!(fraction > 0.0) || fraction > 1.0)
    throw ConfigError("subset_indices: fraction must be in (0, 1]");
  auto idx = manifest.indices_of(split);
  Rng rng(Rng::derive(manifest.seed, kSubsetStream));
  rng.shuffle(idx);
  auto keep = static_cast<std::size_t>(
      std::ceil(fraction * static_cast<double>(idx.size()) - 1e-9));
  keep = std::min(keep, idx.size());
  idx.resize(keep);
  return idx;
}

RunResult execute_run(const RunSpec& spec, const fs::path& out_root) {
  if (spec.name.empty() || spec.name.find("..") != std::string::npos)
    throw ConfigError("execute_run: bad run name '" + spec.name + "'");
  spec.model.validate();
  spec.train.validate();

  auto manifest = volume::read_manifest(spec.manifest_path);
  fs::path manifest_dir = spec.manifest_path.parent_path();
  std::string canonical = spec.canonical_json();
  std::string hash = config_hash(canonical + "dataset_seed:" + std::to_string(manifest.seed) +
                                 ",entries:" + std::to_string(manifest.entries.size()) + "\n");

  fs::path run_dir = out_root / "runs" / spec.name;
  fs::path result_path = run_dir / "result.json";
  if (fs::exists(result_path)) {
    auto cached = result_from_json(detail::read_file_bytes(result_path));
    if (cached.config_hash == hash) {
      cached.from_cache = true;
      std::printf("[run] %s: cached\n", spec.name.c_str());
      return cached;
    }
  }
  fs::create_directories(run_dir);
  detail::write_file_atomic(run_dir / "config.json", canonical);

  RunResult result;
  result.name = spec.name;
  result.config_hash = hash;

  model::Autoencoder net = model::Autoencoder::build(spec.model, spec.init_seed);
  if (!spec.identity_model) {
    auto subset = subset_indices(manifest, volume::Split::Train, spec.subset_fraction);
    std::vector<VoxelGrid> fields;
    for (std::size_t i : subset) {
      const auto& entry = manifest.entries[i];
      auto loaded = volume::read_volume(manifest_dir / entry.path);
      if (loaded.representation.kind != ReprKind::Sdf)
        throw FormatError("execute_run: volume " + entry.id + " is not a signed-distance field");
      repr::InterfaceField sdf{std::move(loaded.grid), loaded.representation};
      fields.push_back(repr::from_sdf(sdf, spec.rep).grid);
    }
    try {
      auto trained = model::train(net, fields, spec.train);
      result.epoch_loss = std::move(trained.epoch_loss);
    } catch (const model::TrainingDiverged& e) {
      result.diverged = true;
      result.divergence = e.what();
      detail::write_file_atomic(result_path, result_to_json(result));
      std::printf("[run] %s: diverged\n", spec.name.c_str());
      return result;
    }
    model::save_checkpoint(net, run_dir / "model.ckpt");
  }
  detail::write_file_atomic(run_dir / "loss.csv", loss_csv(result.epoch_loss));

  metrics::ReconstructFn fn;
  if (spec.identity_model) {
    fn = [](const VoxelGrid& g) { return g; };
  } else {
    fn = [&net](const VoxelGrid& g) { return net.reconstruct_field(g); };
  }
  result.eval = metrics::evaluate(fn, manifest, manifest_dir, spec.eval_split, spec.rep);
  detail::write_file_atomic(run_dir / "eval.csv", metrics::eval_csv(result.eval.per_sample));
  detail::write_file_atomic(
      run_dir / "droplets.csv",
      metrics::histogram_csv(result.eval.d_eq_truth, result.eval.d_eq_pred, {}));
  detail::write_file_atomic(result_path, result_to_json(result));
  std::printf("[run] %s: dice=%s (n=%zu)\n", spec.name.c_str(), format_double(mean_dice(result)).c_str(),
              result.eval.per_sample.size());
  return result;
}

namespace {

RunSpec base_spec(const ExperimentConfig& config) {
  RunSpec spec;
  spec.manifest_path = config.datasets.front();
  spec.model = config.model;
  spec.train = config.train;
  spec.init_seed = config.init_seed;
  spec.identity_model = config.identity_model;
  return spec;
}

}  // namespace

int cmd_repr_sweep(const ExperimentConfig& config) {
  config.validate();
  fs::path out = resolve_out_dir(config);

  std::string rows = "representation,sample_id,dice,hausdorff_norm,flags\n";
  std::string aggregates = "representation,metric,mean,stddev,ci_lo,ci_hi,n\n";
  std::string failures = "run,reason\n";
  bool ok = true;

  for (const auto& rep : config.representations) {
    RunSpec spec = base_spec(config);
    spec.rep = rep;
    spec.name = "repr/" + rep.file_label();
    RunResult result;
    try {
      result = execute_run(spec, out);
    } catch (const Error& e) {
      failures += spec.name + ',' + '"' + e.what() + '"' + '\n';
      ok = false;
      continue;
    }
    if (result.diverged) {
      failures += spec.name + ",diverged\n";
      ok = false;
      continue;
    }
    std::vector<double> dices, hds;
    for (const auto& s : result.eval.per_sample) {
      rows += rep.label() + ',' + s.id + ',' + format_double(s.dice) + ',' +
              format_double(s.hausdorff_norm) + ',' + metrics::flags_string(s) + '\n';
      dices.push_back(s.dice);
      hds.push_back(s.hausdorff_norm);
    }
    rows += rep.label() + ",mean," + format_double(mean_of(dices)) + ',' +
            format_double(mean_of(hds)) + ",-\n";
    aggregates += summary_csv_row(rep.label(), "dice", aggregate(dices));
    aggregates += summary_csv_row(rep.label(), "hausdorff_norm", aggregate(hds));
  }

  write_text(out / "repr_sweep.csv", rows);
  write_text(out / "repr_sweep_aggregates.csv", aggregates);
  write_text(out / "repr_sweep_failures.csv", failures);
  return ok ? 0 : 1;
}

int cmd_grid_search(const ExperimentConfig& config, const GridSearchSpace& space) {
  config.validate();
  if (space.losses.empty() || space.lrs.empty() || space.weight_decays.empty() ||
      space.activations.empty())
    throw ConfigError("grid search: every axis needs at least one value");
  fs::path out = resolve_out_dir(config);
  const RepSpec rep = config.representations.front();

  auto manifest = volume::read_manifest(config.datasets.front());
  if (manifest.indices_of(volume::Split::Val).empty())
    throw ConfigError("grid search: validation split is empty");

  struct GridRow {
    model::LossKind loss;
    double lr, wd;
    model::Act act;
    double score = 0.0;
    bool diverged = false;
  };
  std::vector<GridRow> grid;
  bool ok = true;

  for (auto loss : space.losses)
    for (double lr : space.lrs)
      for (double wd : space.weight_decays)
        for (auto act : space.activations) {
          RunSpec spec = base_spec(config);
          spec.rep = rep;
          spec.train.loss = loss;
          spec.train.lr = lr;
          spec.train.weight_decay = wd;
          spec.train.activation = act;
          spec.model.activation = act;
          spec.eval_split = volume::Split::Val;
          spec.name = "grid/" + tensor::to_string(loss) + "_lr" + format_double(lr) + "_wd" +
                      format_double(wd) + "_" + tensor::to_string(act);
          GridRow row{loss, lr, wd, act, 0.0, false};
          try {
            RunResult result = execute_run(spec, out);
            row.diverged = result.diverged;
            row.score = result.diverged ? 0.0 : mean_dice(result);
          } catch (const Error& e) {
            std::printf("[grid] %s failed: %s\n", spec.name.c_str(), e.what());
            row.diverged = true;
            ok = false;
          }
          grid.push_back(row);
        }

  std::vector<std::size_t> order(grid.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&grid](std::size_t a, std::size_t b) { return grid[a].score > grid[b].score; });

  auto row_csv = [](const GridRow& g) {
    return tensor::to_string(g.loss) + ',' + format_double(g.lr) + ',' + format_double(g.wd) +
           ',' + tensor::to_string(g.act) + ',' + format_double(g.score) + ',' +
           (g.diverged ? "yes" : "no") + '\n';
  };

  std::string ranked = "rank,loss,lr,weight_decay,activation,score,diverged\n";
  for (std::size_t r = 0; r < order.size(); ++r)
    ranked += std::to_string(r + 1) + ',' + row_csv(grid[order[r]]);
  std::string top5 = "rank,loss,lr,weight_decay,activation,score,diverged\n";
  for (std::size_t r = 0; r < std::min<std::size_t>(5, order.size()); ++r)
    top5 += std::to_string(r + 1) + ',' + row_csv(grid[order[r]]);
  std::string coords = "loss,lr,weight_decay,activation,score\n";
  for (const auto& g : grid)
    coords += tensor::to_string(g.loss) + ',' + format_double(g.lr) + ',' + format_double(g.wd) +
              ',' + tensor::to_string(g.act) + ',' + format_double(g.score) + '\n';

  std::string notes;
  if (!order.empty()) {
    const GridRow& best = grid[order.front()];
    notes += "best config: loss=" + tensor::to_string(best.loss) + " lr=" + format_double(best.lr) +
             " weight_decay=" + format_double(best.wd) +
             " activation=" + tensor::to_string(best.act) +
             " score=" + format_double(best.score) + "\n";
    notes += std::string("expected optimum weight_decay=1e-06: ") +
             (best.wd == 1e-6 ? "observed" : "not observed") + "\n";
    notes += std::string("expected optimum activation=silu: ") +
             (best.act == model::Act::SiLU ? "observed" : "not observed") + "\n";
  }

  write_text(out / "grid_search.csv", ranked);
  write_text(out / "grid_top5.csv", top5);
  write_text(out / "parallel_coordinates.csv", coords);
  write_text(out / "grid_search_notes.txt", notes);
  std::fputs(notes.c_str(), stdout);
  return ok ? 0 : 1;
}

int cmd_uncertainty(const ExperimentConfig& config, int n_seeds, double subset_fraction) {
  config.validate();
  if (n_seeds < 2) throw ConfigError("uncertainty: need at least two seeds");
  if (!(subset_fraction > 0.0) || subset_fraction > 1.0)
    throw ConfigError("uncertainty: subset_fraction must be in (0, 1]");
  fs::path out = resolve_out_dir(config);

  std::string table = "representation,metric,mean,stddev,ci_lo,ci_hi,n\n";
  std::string notes;
  bool ok = true;

  for (const auto& rep : config.representations) {
    std::vector<double> dices, hds;
    for (int s = 0; s < n_seeds; ++s) {
      RunSpec spec = base_spec(config);
      spec.rep = rep;
      spec.subset_fraction = subset_fraction;
      spec.train.seed = Rng::derive(config.train.seed, static_cast<std::uint64_t>(s));
      spec.name = "uncertainty/" + rep.file_label() + "/seed" + std::to_string(s);
      try {
        RunResult result = execute_run(spec, out);
        if (result.diverged) {
          ok = false;
          continue;
        }
        dices.push_back(mean_dice(result));
        hds.push_back(mean_hausdorff(result));
      } catch (const Error& e) {
        std::printf("[uncertainty] %s failed: %s\n", spec.name.c_str(), e.what());
        ok = false;
      }
    }
    if (dices.size() < 2) {
      ok = false;
      continue;
    }
    auto ds = metrics::summarize(dices);
    auto hs = metrics::summarize(hds);
    table += summary_csv_row(rep.label(), "dice", ds);
    table += summary_csv_row(rep.label(), "hausdorff_norm", hs);
    notes += "seed-to-seed std of mean dice for " + rep.label() + ": " +
             format_double(ds.stddev) + " (full-scale reference magnitude: 0.004)\n";
  }

  write_text(out / "uncertainty.csv", table);
  write_text(out / "uncertainty_notes.txt", notes);
  std::fputs(notes.c_str(), stdout);
  return ok ? 0 : 1;
}

int cmd_trainsize_sweep(const ExperimentConfig& config, const std::vector<double>& fractions) {
  config.validate();
  if (fractions.empty()) throw ConfigError("trainsize sweep: fraction list is empty");
  fs::path out = resolve_out_dir(config);
  const RepSpec rep = config.representations.front();

  auto manifest = volume::read_manifest(config.datasets.front());
  for (double f : fractions)
    if (subset_indices(manifest, volume::Split::Train, f).size() < 4)
      throw ConfigError("trainsize sweep: fraction " + format_double(f) +
                        " keeps fewer than 4 training samples");

  std::string table = "fraction,n_train,mean_dice,mean_hausdorff,one_minus_dice\n";
  std::vector<double> ns, errs;
  bool ok = true;

  for (double f : fractions) {
    RunSpec spec = base_spec(config);
    spec.rep = rep;
    spec.subset_fraction = f;
    spec.name = "trainsize/f" + format_double(f);
    try {
      RunResult result = execute_run(spec, out);
      if (result.diverged) {
        ok = false;
        continue;
      }
      auto n_train = subset_indices(manifest, volume::Split::Train, f).size();
      double d = mean_dice(result);
      table += format_double(f) + ',' + std::to_string(n_train) + ',' + format_double(d) + ',' +
               format_double(mean_hausdorff(result)) + ',' + format_double(1.0 - d) + '\n';
      if (1.0 - d > 0.0) {
        ns.push_back(static_cast<double>(n_train));
        errs.push_back(1.0 - d);
      }
    } catch (const Error& e) {
      std::printf("[trainsize] %s failed: %s\n", spec.name.c_str(), e.what());
      ok = false;
    }
  }

  std::string fit;
  if (ns.size() >= 2) {
    double exponent = fit_power_law_exponent(ns, errs);
    fit = "power_law_exponent = " + format_double(exponent) +
          " (least-squares fit of log(1 - dice) against log(n_train))\n";
  } else {
    fit = "power_law_exponent = unavailable (need >= 2 runs with dice < 1)\n";
  }
  write_text(out / "trainsize.csv", table);
  write_text(out / "trainsize_fit.txt", fit);
  std::fputs(fit.c_str(), stdout);
  return ok ? 0 : 1;
}

int cmd_cross_eval(const ExperimentConfig& config) {
  config.validate();
  fs::path out = resolve_out_dir(config);

  std::string table = "representation,train_dataset,eval_dataset,mean_dice,mean_hausdorff,n_samples\n";
  std::string notes;
  bool ok = true;

  for (const auto& rep : config.representations) {
    std::vector<double> diag, offdiag;
    for (std::size_t i = 0; i < config.datasets.size(); ++i) {
      RunSpec spec = base_spec(config);
      spec.rep = rep;
      spec.manifest_path = config.datasets[i];
      spec.name = "cross/" + rep.file_label() + "/ds" + std::to_string(i);
      try {
        execute_run(spec, out);
        metrics::ReconstructFn fn;
        if (config.identity_model) {
          fn = [](const VoxelGrid& g) { return g; };
        } else {
          auto net = std::make_shared<model::Autoencoder>(
              model::load_checkpoint(out / "runs" / spec.name / "model.ckpt"));
          fn = [net](const VoxelGrid& g) { return net->reconstruct_field(g); };
        }
        for (std::size_t j = 0; j < config.datasets.size(); ++j) {
          auto target = volume::read_manifest(config.datasets[j]);
          auto report = metrics::evaluate(fn, target, fs::path(config.datasets[j]).parent_path(),
                                          volume::Split::Test, rep);
          std::vector<double> dices, hds;
          for (const auto& s : report.per_sample) {
            dices.push_back(s.dice);
            hds.push_back(s.hausdorff_norm);
          }
          double d = mean_of(dices);
          table += rep.label() + ',' + config.datasets[i] + ',' + config.datasets[j] + ',' +
                   format_double(d) + ',' + format_double(mean_of(hds)) + ',' +
                   std::to_string(report.per_sample.size()) + '\n';
          (i == j ? diag : offdiag).push_back(d);
        }
      } catch (const Error& e) {
        std::printf("[cross] %s failed: %s\n", spec.name.c_str(), e.what());
        ok = false;
      }
    }
    if (!diag.empty() && !offdiag.empty())
      notes += "transfer gap for " + rep.label() + ": in-domain mean dice " +
               format_double(mean_of(diag)) + " vs cross-domain " + format_double(mean_of(offdiag)) +
               '\n';
  }

  write_text(out / "cross_eval.csv", table);
  write_text(out / "cross_eval_notes.txt", notes);
  std::fputs(notes.c_str(), stdout);
  return ok ? 0 : 1;
}

double fit_power_law_exponent(const std::vector<double>& n, const std::vector<double>& error) {
  if (n.size() != error.size()) throw StatsError("power-law fit: size mismatch");
  if (n.size() < 2) throw StatsError("power-law fit: need at least two points");
  std::vector<double> x, y;
  for (std::size_t i = 0; i < n.size(); ++i) {
    if (!(n[i] > 0) || !(error[i] > 0))
      throw StatsError("power-law fit: samples and errors must be positive");
    x.push_back(std::log(n[i]));
    y.push_back(std::log(error[i]));
  }
  double xm = mean_of(x), ym = mean_of(y);
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    num += (x[i] - xm) * (y[i] - ym);
    den += (x[i] - xm) * (x[i] - xm);
  }
  if (den == 0.0) throw StatsError("power-law fit: all sample counts identical");
  return num / den;
}

std::string vtk_structured_points(const PhaseMask& mask, const std::string& title) {
  const Dims& d = mask.dims;
  std::string out = "# vtk DataFile Version 3.0\n";
  out += title + '\n';
  out += "ASCII\nDATASET STRUCTURED_POINTS\n";
  out += "DIMENSIONS " + std::to_string(d.nx) + ' ' + std::to_string(d.ny) + ' ' +
         std::to_string(d.nz) + '\n';
  out += "ORIGIN 0 0 0\n";
  std::string h = format_double(d.spacing());
  out += "SPACING " + h + ' ' + h + ' ' + h + '\n';
  out += "POINT_DATA " + std::to_string(d.count()) + '\n';
  out += "SCALARS phase int 1\nLOOKUP_TABLE default\n";
  int col = 0;
  for (std::size_t i = 0; i < mask.data.size(); ++i) {
    out += mask.data[i] ? '1' : '0';
    if (++col == 30 || i + 1 == mask.data.size()) {
      out += '\n';
      col = 0;
    } else {
      out += ' ';
    }
  }
  return out;
}

std::string svg_bar_chart(const std::string& title, const std::vector<std::string>& labels,
                          const std::vector<double>& values) {
  if (labels.size() != values.size()) throw UsageError("svg_bar_chart: label/value size mismatch");
  const double width = 640, left = 60, bottom = 360, top = 48;
  double vmax = 1.0;
  for (double v : values) vmax = std::max(vmax, v);
  std::string svg =
      "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"640\" height=\"400\" "
      "viewBox=\"0 0 640 400\">\n";
  svg += "<rect width=\"640\" height=\"400\" fill=\"#ffffff\"/>\n";
  svg += "<text x=\"320\" y=\"24\" text-anchor=\"middle\" font-family=\"monospace\" "
         "font-size=\"16\">" + title + "</text>\n";
  svg += "<line x1=\"" + format_double(left) + "\" y1=\"" + format_double(top) + "\" x2=\"" +
         format_double(left) + "\" y2=\"" + format_double(bottom) +
         "\" stroke=\"#000000\" stroke-width=\"1\"/>\n";
  svg += "<line x1=\"" + format_double(left) + "\" y1=\"" + format_double(bottom) + "\" x2=\"" +
         format_double(width - 20) + "\" y2=\"" + format_double(bottom) +
         "\" stroke=\"#000000\" stroke-width=\"1\"/>\n";
  const std::size_t n = values.size();
  if (n > 0) {
    double slot = (width - 20 - left) / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      double h = (bottom - top) * (values[i] / vmax);
      double x = left + slot * (static_cast<double>(i) + 0.15);
      double w = slot * 0.7;
      svg += "<rect x=\"" + format_double(x) + "\" y=\"" + format_double(bottom - h) +
             "\" width=\"" + format_double(w) + "\" height=\"" + format_double(h) +
             "\" fill=\"#4878a8\"/>\n";
      svg += "<text x=\"" + format_double(x + w / 2) + "\" y=\"" + format_double(bottom - h - 6) +
             "\" text-anchor=\"middle\" font-family=\"monospace\" font-size=\"11\">" +
             format_double(values[i], 4) + "</text>\n";
      svg += "<text x=\"" + format_double(x + w / 2) + "\" y=\"" + format_double(bottom + 16) +
             "\" text-anchor=\"middle\" font-family=\"monospace\" font-size=\"11\">" + labels[i] +
             "</text>\n";
    }
  }
  svg += "</svg>\n";
  return svg;
}

namespace {

double axis_pos(double value, double lo, double hi) {
  if (hi <= lo) return 0.5;
  return (value - lo) / (hi - lo);
}

}  // namespace

std::string svg_parallel_coordinates(const std::vector<ParallelCoordsRow>& rows) {
  const double height = 400, top = 48, bottom = 360;
  const double axis_x[5] = {80, 240, 400, 560, 720};
  const char* axis_name[5] = {"loss", "lr", "weight_decay", "activation", "score"};

  std::vector<std::string> losses, acts;
  double lr_lo = 0, lr_hi = 0, wd_lo = 0, wd_hi = 0, sc_lo = 0, sc_hi = 0;
  bool first = true;
  for (const auto& r : rows) {
    if (std::find(losses.begin(), losses.end(), r.loss) == losses.end()) losses.push_back(r.loss);
    if (std::find(acts.begin(), acts.end(), r.activation) == acts.end())
      acts.push_back(r.activation);
    double llr = std::log10(r.lr), lwd = std::log10(r.weight_decay);
    if (first) {
      lr_lo = lr_hi = llr;
      wd_lo = wd_hi = lwd;
      sc_lo = sc_hi = r.score;
      first = false;
    } else {
      lr_lo = std::min(lr_lo, llr);
      lr_hi = std::max(lr_hi, llr);
      wd_lo = std::min(wd_lo, lwd);
      wd_hi = std::max(wd_hi, lwd);
      sc_lo = std::min(sc_lo, r.score);
      sc_hi = std::max(sc_hi, r.score);
    }
  }
  std::sort(losses.begin(), losses.end());
  std::sort(acts.begin(), acts.end());

  auto cat_pos = [](const std::vector<std::string>& cats, const std::string& v) {
    auto it = std::find(cats.begin(), cats.end(), v);
    std::size_t i = static_cast<std::size_t>(it - cats.begin());
    if (cats.size() <= 1) return 0.5;
    return static_cast<double>(i) / static_cast<double>(cats.size() - 1);
  };
  auto y_of = [top, bottom](double t) { return bottom - (bottom - top) * t; };

  std::string svg =
      "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"800\" height=\"400\" "
      "viewBox=\"0 0 800 400\">\n";
  svg += "<rect width=\"800\" height=\"400\" fill=\"#ffffff\"/>\n";
  svg += "<text x=\"400\" y=\"24\" text-anchor=\"middle\" font-family=\"monospace\" "
         "font-size=\"16\">hyperparameter search</text>\n";
  for (int a = 0; a < 5; ++a) {
    svg += "<line x1=\"" + format_double(axis_x[a]) + "\" y1=\"" + format_double(top) +
           "\" x2=\"" + format_double(axis_x[a]) + "\" y2=\"" + format_double(bottom) +
           "\" stroke=\"#000000\" stroke-width=\"1\"/>\n";
    svg += "<text x=\"" + format_double(axis_x[a]) + "\" y=\"" + format_double(height - 20) +
           "\" text-anchor=\"middle\" font-family=\"monospace\" font-size=\"12\">" +
           axis_name[a] + "</text>\n";
  }

  double best = sc_lo;
  for (const auto& r : rows) best = std::max(best, r.score);
  auto polyline = [&](const ParallelCoordsRow& r) {
    double t[5] = {cat_pos(losses, r.loss), axis_pos(std::log10(r.lr), lr_lo, lr_hi),
                   axis_pos(std::log10(r.weight_decay), wd_lo, wd_hi),
                   cat_pos(acts, r.activation), axis_pos(r.score, sc_lo, sc_hi)};
    std::string pts;
    for (int a = 0; a < 5; ++a) {
      if (a) pts += ' ';
      pts += format_double(axis_x[a]) + ',' + format_double(y_of(t[a]));
    }
    return pts;
  };
  for (const auto& r : rows) {
    if (r.score == best) continue;
    svg += "<polyline points=\"" + polyline(r) +
           "\" fill=\"none\" stroke=\"#999999\" stroke-width=\"1\" opacity=\"0.7\"/>\n";
  }
  for (const auto& r : rows) {
    if (r.score != best) continue;
    svg += "<polyline points=\"" + polyline(r) +
           "\" fill=\"none\" stroke=\"#c02020\" stroke-width=\"2\"/>\n";
  }
  svg += "</svg>\n";
  return svg;
}

namespace {

struct ReportInputs {
  std::vector<std::string> found;
  std::vector<std::string> missing;
};

void check_input(ReportInputs& io, const fs::path& dir, const std::string& rel) {
  if (fs::exists(dir / rel))
    io.found.push_back(rel);
  else
    io.missing.push_back(rel);
}

}  // namespace

int cmd_report(const fs::path& results_dir) {
  fs::path report = results_dir / "report";
  fs::create_directories(report);

  ReportInputs inputs;
  check_input(inputs, results_dir, "repr_sweep.csv");
  check_input(inputs, results_dir, "repr_sweep_aggregates.csv");
  check_input(inputs, results_dir, "parallel_coordinates.csv");
  check_input(inputs, results_dir, "grid_search.csv");
  check_input(inputs, results_dir, "uncertainty.csv");
  check_input(inputs, results_dir, "trainsize.csv");
  check_input(inputs, results_dir, "cross_eval.csv");

  std::string manifest;

  if (fs::exists(results_dir / "repr_sweep_aggregates.csv")) {
    std::vector<std::string> labels;
    std::vector<double> values;
    std::string csv = detail::read_file_bytes(results_dir / "repr_sweep_aggregates.csv");
    std::size_t pos = csv.find('\n');
    while (pos != std::string::npos && pos + 1 < csv.size()) {
      std::size_t end = csv.find('\n', pos + 1);
      std::string line = csv.substr(pos + 1, end - pos - 1);
      pos = end;
      std::vector<std::string> cells;
      std::size_t c = 0;
      while (true) {
        std::size_t comma = line.find(',', c);
        cells.push_back(line.substr(c, comma - c));
        if (comma == std::string::npos) break;
        c = comma + 1;
      }
      if (cells.size() >= 3 && cells[1] == "dice") {
        labels.push_back(cells[0]);
        values.push_back(std::strtod(cells[2].c_str(), nullptr));
      }
    }
    write_text(report / "repr_dice.svg", svg_bar_chart("mean test dice", labels, values));
    manifest += "artifact: report/repr_dice.svg\n";
  }

  if (fs::exists(results_dir / "parallel_coordinates.csv")) {
    std::vector<ParallelCoordsRow> rows;
    std::string csv = detail::read_file_bytes(results_dir / "parallel_coordinates.csv");
    std::size_t pos = csv.find('\n');
    while (pos != std::string::npos && pos + 1 < csv.size()) {
      std::size_t end = csv.find('\n', pos + 1);
      std::string line = csv.substr(pos + 1, end - pos - 1);
      pos = end;
      std::vector<std::string> cells;
      std::size_t c = 0;
      while (true) {
        std::size_t comma = line.find(',', c);
        cells.push_back(line.substr(c, comma - c));
        if (comma == std::string::npos) break;
        c = comma + 1;
      }
      if (cells.size() == 5) {
        ParallelCoordsRow r;
        r.loss = cells[0];
        r.lr = std::strtod(cells[1].c_str(), nullptr);
        r.weight_decay = std::strtod(cells[2].c_str(), nullptr);
        r.activation = cells[3];
        r.score = std::strtod(cells[4].c_str(), nullptr);
        rows.push_back(r);
      }
    }
    write_text(report / "parallel_coordinates.svg", svg_parallel_coordinates(rows));
    manifest += "artifact: report/parallel_coordinates.svg\n";
  }

  // Isosurface export: first eval-split sample of every completed run that
  // kept a checkpoint, as truth + prediction masks.
  std::vector<fs::path> run_dirs;
  if (fs::exists(results_dir / "runs"))
    for (const auto& entry : fs::recursive_directory_iterator(results_dir / "runs"))
      if (entry.is_regular_file() && entry.path().filename() == "model.ckpt")
        run_dirs.push_back(entry.path().parent_path());
  std::sort(run_dirs.begin(), run_dirs.end());

  for (const auto& dir : run_dirs) {
    std::string run_name = fs::relative(dir, results_dir / "runs").generic_string();
    std::string flat = run_name;
    std::replace(flat.begin(), flat.end(), '/', '_');
    try {
      json cfg = json::parse(detail::read_file_bytes(dir / "config.json"));
      fs::path manifest_path = cfg.at("dataset").get<std::string>();
      RepSpec rep = RepSpec::parse(cfg.at("rep").get<std::string>());
      auto split = volume::split_from_string(cfg.at("eval_split").get<std::string>());
      auto ds = volume::read_manifest(manifest_path);
      auto idx = ds.indices_of(split);
      if (idx.empty()) throw Error("eval split is empty");
      const auto& entry = ds.entries[idx.front()];
      auto loaded = volume::read_volume(manifest_path.parent_path() / entry.path);
      repr::InterfaceField sdf{std::move(loaded.grid), loaded.representation};
      auto input = repr::from_sdf(sdf, rep);
      auto net = model::load_checkpoint(dir / "model.ckpt");
      PhaseMask truth = repr::binarize(sdf);
      PhaseMask pred = repr::binarize({net.reconstruct_field(input.grid), rep});
      write_text(report / "isosurfaces" / (flat + "_truth.vtk"),
                 vtk_structured_points(truth, run_name + " truth " + entry.id));
      write_text(report / "isosurfaces" / (flat + "_pred.vtk"),
                 vtk_structured_points(pred, run_name + " prediction " + entry.id));
      manifest += "isosurface: " + run_name + " -> report/isosurfaces/" + flat + "_{truth,pred}.vtk\n";
    } catch (const std::exception& e) {
      inputs.missing.push_back("isosurface inputs for run " + run_name + " (" + e.what() + ")");
    }
  }

  std::string text;
  for (const auto& f : inputs.found) text += "found: " + f + '\n';
  for (const auto& m : inputs.missing) text += "missing: " + m + '\n';
  text += manifest;
  write_text(report / "manifest.txt", text);
  std::fputs(text.c_str(), stdout);
  return 0;
}

}  // namespace mpae::harness
