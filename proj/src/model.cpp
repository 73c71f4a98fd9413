#include "mpae/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <numeric>

#include <json.hpp>

#include "mpae/detail/io.hpp"
#include "mpae/repr.hpp"

namespace mpae::model {

using tensor::Tensor;

namespace {

constexpr char kCheckpointMagic[4] = {'M', 'P', 'A', 'E'};
constexpr std::uint32_t kCheckpointVersion = 1;
constexpr std::uint64_t kProbeStream = 0x70726f6265ULL;

int pow2(int n) { return 1 << n; }

Tensor<float> he_conv(std::vector<int> shape, Rng& rng) {
  std::int64_t fan_in = 1;
  for (std::size_t i = 1; i < shape.size(); ++i) fan_in *= shape[i];
  double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
  auto t = Tensor<float>::zeros(std::move(shape), true);
  for (auto& v : t.values()) v = static_cast<float>(rng.normal(0.0, stddev));
  return t;
}

}  // namespace

void ModelConfig::validate() const {
  if (levels < 1 || levels > 16) throw ConfigError("ModelConfig: levels must be in [1, 16]");
  if (base_channels < 1) throw ConfigError("ModelConfig: base_channels must be positive");
  if (latent_channels < 1) throw ConfigError("ModelConfig: latent_channels must be positive");
  if (groups < 1) throw ConfigError("ModelConfig: groups must be positive");
  for (int l = 0; l < levels; ++l) {
    if (channels(l) % groups != 0)
      throw ConfigError("ModelConfig: level " + std::to_string(l) + " width " +
                        std::to_string(channels(l)) + " is not divisible by groups=" +
                        std::to_string(groups));
  }
  if (!(eps_ws > 0) || !(eps_gn > 0))
    throw ConfigError("ModelConfig: eps_ws and eps_gn must be positive");
}

std::string ModelConfig::to_json() const {
  nlohmann::json j;
  j["levels"] = levels;
  j["base_channels"] = base_channels;
  j["latent_channels"] = latent_channels;
  j["groups"] = groups;
  j["activation"] = tensor::to_string(activation);
  j["pad_mode"] = tensor::to_string(pad_mode);
  j["eps_ws"] = eps_ws;
  j["eps_gn"] = eps_gn;
  return j.dump();
}

ModelConfig ModelConfig::from_json(const std::string& text) {
  ModelConfig c;
  try {
    auto j = nlohmann::json::parse(text);
    c.levels = j.at("levels").get<int>();
    c.base_channels = j.at("base_channels").get<int>();
    c.latent_channels = j.at("latent_channels").get<int>();
    c.groups = j.at("groups").get<int>();
    c.activation = tensor::act_from_string(j.at("activation").get<std::string>());
    c.pad_mode = tensor::pad_mode_from_string(j.at("pad_mode").get<std::string>());
    c.eps_ws = j.at("eps_ws").get<double>();
    c.eps_gn = j.at("eps_gn").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("ModelConfig: bad config text: ") + e.what());
  }
  c.validate();
  return c;
}

double compression_ratio(int levels, int latent_channels) {
  if (levels < 0 || levels > 20) throw ConfigError("compression_ratio: levels must be in [0, 20]");
  if (latent_channels < 1) throw ConfigError("compression_ratio: latent_channels must be positive");
  return static_cast<double>(std::int64_t{1} << (3 * levels)) / latent_channels;
}

double compression_ratio(const ModelConfig& config) {
  return compression_ratio(config.levels, config.latent_channels);
}

Dims latent_dims(const ModelConfig& config, const Dims& input) {
  if (!input.valid()) throw DimensionError("latent_dims: extents must be positive");
  int f = pow2(config.levels);
  if (input.nx % f != 0 || input.ny % f != 0 || input.nz % f != 0)
    throw ConfigError("latent_dims: extents " + std::to_string(input.nx) + "x" +
                      std::to_string(input.ny) + "x" + std::to_string(input.nz) +
                      " are not divisible by 2^levels = " + std::to_string(f));
  return Dims{input.nx / f, input.ny / f, input.nz / f};
}

void TrainConfig::validate() const {
  if (!(lr >= 0) || !std::isfinite(lr)) throw ConfigError("TrainConfig: lr must be finite and >= 0");
  if (!(weight_decay >= 0) || !std::isfinite(weight_decay))
    throw ConfigError("TrainConfig: weight_decay must be finite and >= 0");
  if (batch_size < 1) throw ConfigError("TrainConfig: batch_size must be >= 1");
  if (epochs < 0) throw ConfigError("TrainConfig: epochs must be >= 0");
}

std::string DivergenceReport::format() const {
  std::string s = "training diverged: non-finite loss at epoch " + std::to_string(epoch) +
                  ", batch " + std::to_string(batch) + " (loss=" + format_double(loss) + ")";
  s += "; parameter L2 norms:";
  for (const auto& [name, norm] : param_norms) s += "\n  " + name + " = " + format_double(norm);
  return s;
}

Autoencoder Autoencoder::build(const ModelConfig& config, std::uint64_t init_seed) {
  config.validate();
  Autoencoder m;
  m.cfg_ = config;
  Rng rng(init_seed);

  const int n = config.levels;
  const int z = config.latent_channels;
  auto conv = [&rng](int c_out, int c_in, int k) {
    Conv c;
    c.w = he_conv({c_out, c_in, k, k, k}, rng);
    c.b = Tensor<float>::zeros({c_out}, true);
    return c;
  };
  auto norm = [](int c) {
    Norm g;
    g.gamma = Tensor<float>::full({c}, 1.0f, true);
    g.beta = Tensor<float>::zeros({c}, true);
    return g;
  };
  auto block = [&](int c) {
    Block b;
    b.c1 = conv(c, c, 3);
    b.n1 = norm(c);
    b.c2 = conv(c, c, 3);
    b.n2 = norm(c);
    b.skip = conv(c, c, 1);
    return b;
  };

  m.stem_ = conv(config.channels(0), 1, 3);
  for (int l = 0; l < n; ++l) {
    int c = config.channels(l);
    m.enc_levels_.push_back({block(c), block(c)});
    if (l + 1 < n) m.downs_.push_back({conv(config.channels(l + 1), c, 3), norm(config.channels(l + 1))});
  }
  m.enc_latent_ = conv(z, config.channels(n - 1), 3);

  m.dec_latent_ = conv(config.channels(n - 1), z, 3);
  m.dec_levels_.resize(n);
  for (int l = n - 1; l >= 0; --l) {
    int c = config.channels(l);
    m.dec_levels_[l] = {block(c), block(c)};
    if (l > 0) m.ups_.push_back(conv(config.channels(l - 1), c, 3));
  }
  std::reverse(m.ups_.begin(), m.ups_.end());  // ups_[l] maps channels(l+1) -> channels(l)
  m.head_ = conv(1, config.channels(0), 1);

  m.register_params();
  m.probe_gradient_flow(Rng::derive(init_seed, kProbeStream));
  return m;
}

void Autoencoder::register_params() {
  auto reg = [this](const std::string& name, const Tensor<float>& t) {
    params_.push_back({name, t, true});
  };
  auto reg_conv = [&](const std::string& p, const Conv& c) {
    reg(p + ".weight", c.w);
    reg(p + ".bias", c.b);
  };
  auto reg_norm = [&](const std::string& p, const Norm& g) {
    reg(p + ".gamma", g.gamma);
    reg(p + ".beta", g.beta);
  };
  auto reg_block = [&](const std::string& p, const Block& b) {
    reg_conv(p + ".conv1", b.c1);
    reg_norm(p + ".norm1", b.n1);
    reg_conv(p + ".conv2", b.c2);
    reg_norm(p + ".norm2", b.n2);
    reg_conv(p + ".skip", b.skip);
  };

  reg_conv("encoder.stem", stem_);
  for (int l = 0; l < cfg_.levels; ++l) {
    std::string lv = "encoder.level" + std::to_string(l);
    reg_block(lv + ".block0", enc_levels_[l][0]);
    reg_block(lv + ".block1", enc_levels_[l][1]);
    if (l + 1 < cfg_.levels) {
      std::string dn = "encoder.down" + std::to_string(l);
      reg_conv(dn, downs_[l].c);
      reg_norm(dn + ".norm", downs_[l].n);
    }
  }
  reg_conv("encoder.latent", enc_latent_);
  reg_conv("decoder.latent", dec_latent_);
  for (int l = cfg_.levels - 1; l >= 0; --l) {
    std::string lv = "decoder.level" + std::to_string(l);
    reg_block(lv + ".block0", dec_levels_[l][0]);
    reg_block(lv + ".block1", dec_levels_[l][1]);
    if (l > 0) reg_conv("decoder.up" + std::to_string(l - 1), ups_[l - 1]);
  }
  reg_conv("decoder.head", head_);
}

std::int64_t Autoencoder::parameter_count() const {
  std::int64_t total = 0;
  for (const auto& p : params_)
    if (p.trainable) total += p.tensor.numel();
  return total;
}

tensor::Tensor<float> Autoencoder::run_block(const Block& blk, const Tensor<float>& x) const {
  float eps_ws = static_cast<float>(cfg_.eps_ws);
  float eps_gn = static_cast<float>(cfg_.eps_gn);
  auto h = conv3d(x, weight_standardize(blk.c1.w, eps_ws), blk.c1.b, 1, 1, cfg_.pad_mode);
  h = activation(group_norm(h, cfg_.groups, blk.n1.gamma, blk.n1.beta, eps_gn), cfg_.activation);
  h = conv3d(h, weight_standardize(blk.c2.w, eps_ws), blk.c2.b, 1, 1, cfg_.pad_mode);
  h = activation(group_norm(h, cfg_.groups, blk.n2.gamma, blk.n2.beta, eps_gn), cfg_.activation);
  return add(h, conv3d(x, blk.skip.w, blk.skip.b, 1, 0, cfg_.pad_mode));
}

tensor::Tensor<float> Autoencoder::encode(const Tensor<float>& x) const {
  const auto& s = x.shape();
  if (s.size() != 5 || s[1] != 1) throw DimensionError("encode: expected (B, 1, D, H, W) input");
  latent_dims(cfg_, Dims{s[4], s[3], s[2]});
  float eps_ws = static_cast<float>(cfg_.eps_ws);
  float eps_gn = static_cast<float>(cfg_.eps_gn);

  auto h = conv3d(x, stem_.w, stem_.b, 1, 1, cfg_.pad_mode);
  for (int l = 0; l < cfg_.levels; ++l) {
    h = run_block(enc_levels_[l][0], h);
    h = run_block(enc_levels_[l][1], h);
    if (l + 1 < cfg_.levels) {
      const auto& d = downs_[l];
      h = conv3d(h, weight_standardize(d.c.w, eps_ws), d.c.b, 2, 1, cfg_.pad_mode);
      h = activation(group_norm(h, cfg_.groups, d.n.gamma, d.n.beta, eps_gn), cfg_.activation);
    }
  }
  return conv3d(h, enc_latent_.w, enc_latent_.b, 2, 1, cfg_.pad_mode);
}

tensor::Tensor<float> Autoencoder::decode(const Tensor<float>& z) const {
  const auto& s = z.shape();
  if (s.size() != 5 || s[1] != cfg_.latent_channels)
    throw DimensionError("decode: expected (B, latent_channels, d, h, w) input");

  auto h = conv3d(upsample_nearest2x(z), dec_latent_.w, dec_latent_.b, 1, 1, cfg_.pad_mode);
  for (int l = cfg_.levels - 1; l >= 0; --l) {
    h = run_block(dec_levels_[l][0], h);
    h = run_block(dec_levels_[l][1], h);
    if (l > 0) {
      const auto& u = ups_[l - 1];
      h = activation(conv3d(upsample_nearest2x(h), u.w, u.b, 1, 1, cfg_.pad_mode),
                     cfg_.activation);
    }
  }
  return conv3d(h, head_.w, head_.b, 1, 0, cfg_.pad_mode);
}

tensor::Tensor<float> Autoencoder::reconstruct(const Tensor<float>& x) const {
  return decode(encode(x));
}

VoxelGrid Autoencoder::reconstruct_field(const VoxelGrid& field) const {
  auto out = reconstruct(field_to_tensor(field));
  return tensor_to_field(out, field.dims);
}

void Autoencoder::probe_gradient_flow(std::uint64_t probe_seed) {
  Rng rng(probe_seed);
  int e = pow2(cfg_.levels);
  auto x = Tensor<float>::zeros({1, 1, e, e, e});
  auto target = Tensor<float>::zeros({1, 1, e, e, e});
  for (auto& v : x.values()) v = static_cast<float>(rng.normal(0.0, 1.0));
  for (auto& v : target.values()) v = static_cast<float>(rng.normal(0.0, 1.0));

  auto l = tensor::loss(reconstruct(x), target, LossKind::MSE);
  tensor::zero_grads(params_);
  l.backward();
  for (const auto& p : params_) {
    bool live = false;
    if (p.tensor.has_grad())
      for (float g : p.tensor.grad()) live = live || g != 0.0f;
    if (!live)
      throw Error("Autoencoder: parameter " + p.name + " received no gradient on the probe batch");
  }
  tensor::zero_grads(params_);
}

tensor::Tensor<float> field_to_tensor(const VoxelGrid& grid) {
  auto t = Tensor<float>::zeros({1, 1, grid.dims.nz, grid.dims.ny, grid.dims.nx});
  auto out = t.values();
  for (std::size_t i = 0; i < grid.data.size(); ++i) out[i] = static_cast<float>(grid.data[i]);
  return t;
}

VoxelGrid tensor_to_field(const Tensor<float>& t, const Dims& dims, int sample) {
  const auto& s = t.shape();
  if (s.size() != 5 || s[1] != 1 || s[2] != dims.nz || s[3] != dims.ny || s[4] != dims.nx)
    throw DimensionError("tensor_to_field: tensor shape does not match (1, nz, ny, nx)");
  if (sample < 0 || sample >= s[0]) throw UsageError("tensor_to_field: sample out of range");
  VoxelGrid g(dims);
  auto in = t.values().subspan(static_cast<std::size_t>(sample) * g.data.size(), g.data.size());
  for (std::size_t i = 0; i < g.data.size(); ++i) g.data[i] = in[i];
  return g;
}

std::vector<VoxelGrid> load_split(const volume::DatasetManifest& manifest,
                                  const std::filesystem::path& manifest_dir,
                                  volume::Split split, const RepSpec& rep) {
  std::vector<VoxelGrid> out;
  for (std::size_t i : manifest.indices_of(split)) {
    const auto& entry = manifest.entries[i];
    auto loaded = volume::read_volume(manifest_dir / entry.path);
    if (loaded.representation.kind != ReprKind::Sdf)
      throw FormatError("load_split: volume " + entry.id + " is not a signed-distance field");
    repr::InterfaceField sdf{std::move(loaded.grid), loaded.representation};
    out.push_back(repr::from_sdf(sdf, rep).grid);
  }
  return out;
}

TrainResult train(Autoencoder& model, const std::vector<VoxelGrid>& fields,
                  const TrainConfig& config) {
  config.validate();
  if (fields.empty()) throw UsageError("train: empty training set");
  Dims dims = fields.front().dims;
  for (const auto& f : fields)
    if (!(f.dims == dims)) throw DimensionError("train: training fields must share extents");
  latent_dims(model.config(), dims);

  const std::size_t n = fields.size();
  const std::size_t numel = static_cast<std::size_t>(dims.count());
  std::vector<std::vector<float>> data(n);
  for (std::size_t i = 0; i < n; ++i) {
    data[i].resize(numel);
    for (std::size_t v = 0; v < numel; ++v) data[i][v] = static_cast<float>(fields[i].data[v]);
  }

  tensor::Adam<float> opt({config.lr, 0.9, 0.999, 1e-8, config.weight_decay});
  Rng rng(config.seed);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});

  TrainResult result;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    rng.shuffle(order);
    double epoch_sum = 0.0;
    int batch = 0;
    for (std::size_t start = 0; start < n; start += config.batch_size, ++batch) {
      int b = static_cast<int>(std::min<std::size_t>(config.batch_size, n - start));
      auto x = Tensor<float>::zeros({b, 1, dims.nz, dims.ny, dims.nx});
      auto xv = x.values();
      for (int s = 0; s < b; ++s)
        std::memcpy(xv.data() + static_cast<std::size_t>(s) * numel, data[order[start + s]].data(),
                    numel * sizeof(float));

      auto l = tensor::loss(model.reconstruct(x), x, config.loss);
      double lval = l.item();
      if (!std::isfinite(lval)) {
        DivergenceReport report{epoch, batch, lval, {}};
        for (const auto& p : model.parameters()) {
          double sq = 0.0;
          for (float w : p.tensor.values()) sq += static_cast<double>(w) * w;
          report.param_norms.emplace_back(p.name, std::sqrt(sq));
        }
        throw TrainingDiverged(std::move(report));
      }

      tensor::zero_grads(model.parameters());
      l.backward();
      opt.step(model.parameters());
      epoch_sum += lval * b;
      ++result.steps;
    }
    result.epoch_loss.push_back(epoch_sum / static_cast<double>(n));
  }
  return result;
}

void save_checkpoint(const Autoencoder& model, const std::filesystem::path& path) {
  std::string out;
  out.append(kCheckpointMagic, 4);
  detail::put_u32(out, kCheckpointVersion);
  std::string cfg = model.config().to_json();
  detail::put_u32(out, static_cast<std::uint32_t>(cfg.size()));
  out += cfg;
  detail::put_u32(out, static_cast<std::uint32_t>(model.parameters().size()));
  for (const auto& p : model.parameters()) {
    detail::put_u32(out, static_cast<std::uint32_t>(p.name.size()));
    out += p.name;
    const auto& shape = p.tensor.shape();
    detail::put_u32(out, static_cast<std::uint32_t>(shape.size()));
    for (int e : shape) detail::put_u32(out, static_cast<std::uint32_t>(e));
    for (float v : p.tensor.values()) detail::put_f32(out, v);
  }
  detail::write_file_atomic(path, out);
}

Autoencoder load_checkpoint(const std::filesystem::path& path) {
  std::string bytes = detail::read_file_bytes(path);
  detail::ByteReader r(bytes, "checkpoint " + path.string());
  if (r.bytes(4) != std::string(kCheckpointMagic, 4))
    throw FormatError("checkpoint " + path.string() + ": bad magic");
  std::uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    throw FormatError("checkpoint " + path.string() + ": unsupported version " +
                      std::to_string(version));
  auto config = ModelConfig::from_json(r.bytes(r.u32()));
  auto model = Autoencoder::build(config, 0);

  std::uint32_t count = r.u32();
  if (count != model.parameters().size())
    throw FormatError("checkpoint " + path.string() + ": parameter record count " +
                      std::to_string(count) + " does not match the architecture");
  for (auto& p : model.parameters()) {
    std::string name = r.bytes(r.u32());
    if (name != p.name)
      throw FormatError("checkpoint " + path.string() + ": expected parameter " + p.name +
                        ", found " + name);
    std::uint32_t rank = r.u32();
    const auto& shape = p.tensor.shape();
    if (rank != shape.size())
      throw FormatError("checkpoint " + path.string() + ": rank mismatch for " + name);
    for (int e : shape)
      if (r.u32() != static_cast<std::uint32_t>(e))
        throw FormatError("checkpoint " + path.string() + ": shape mismatch for " + name);
    for (auto& v : p.tensor.values()) v = r.f32();
  }
  if (!r.exhausted())
    throw FormatError("checkpoint " + path.string() + ": trailing bytes after last parameter");
  return model;
}

}  // namespace mpae::model
