#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "mpae/common.hpp"
#include "mpae/tensor.hpp"
#include "mpae/volume.hpp"

namespace mpae::model {

using tensor::Act;
using tensor::LossKind;
using tensor::PadMode;

// Network topology. Level l runs at channel width base_channels * 2^l; the
// encoder halves the spatial extents once per level, so the latent grid is
// the input grid divided by 2^levels.
struct ModelConfig {
  int levels = 4;
  int base_channels = 16;
  int latent_channels = 4;
  int groups = 8;
  Act activation = Act::SiLU;
  PadMode pad_mode = PadMode::Zero;
  double eps_ws = 1e-5;
  double eps_gn = 1e-5;

  int channels(int level) const { return base_channels << level; }

  // levels >= 1 and every level width divisible by groups.
  void validate() const;

  std::string to_json() const;
  static ModelConfig from_json(const std::string& text);
};

// Input scalars per latent scalar: 2^(3 levels) / latent_channels.
double compression_ratio(int levels, int latent_channels);
double compression_ratio(const ModelConfig& config);

// Latent extents for an input grid; every extent must divide by 2^levels.
Dims latent_dims(const ModelConfig& config, const Dims& input);

struct TrainConfig {
  double lr = 1e-5;
  LossKind loss = LossKind::L1;
  double weight_decay = 1e-6;
  Act activation = Act::SiLU;  // consumed when the driver builds the model
  int batch_size = 4;
  int epochs = 1;
  std::uint64_t seed = 0;

  void validate() const;
};

// State captured when training aborts on a non-finite loss.
struct DivergenceReport {
  int epoch = 0;  // zero-based indices of the offending step
  int batch = 0;
  double loss = 0.0;
  std::vector<std::pair<std::string, double>> param_norms;  // L2 per parameter

  std::string format() const;
};

class TrainingDiverged : public Error {
 public:
  explicit TrainingDiverged(DivergenceReport report)
      : Error(report.format()), report_(std::move(report)) {}

  const DivergenceReport& report() const { return report_; }

 private:
  DivergenceReport report_;
};

// Fully convolutional residual autoencoder. Copies share the underlying
// weights; build() returns a freshly initialized instance and verifies that
// every parameter receives gradient on a probe batch.
class Autoencoder {
 public:
  static Autoencoder build(const ModelConfig& config, std::uint64_t init_seed);

  const ModelConfig& config() const { return cfg_; }
  std::vector<tensor::Parameter<float>>& parameters() { return params_; }
  const std::vector<tensor::Parameter<float>>& parameters() const { return params_; }
  std::int64_t parameter_count() const;

  // x: (B, 1, D, H, W) with spatial extents divisible by 2^levels.
  tensor::Tensor<float> encode(const tensor::Tensor<float>& x) const;
  // z: (B, latent_channels, d, h, w).
  tensor::Tensor<float> decode(const tensor::Tensor<float>& z) const;
  tensor::Tensor<float> reconstruct(const tensor::Tensor<float>& x) const;

  // Single-field convenience wrapper around reconstruct().
  VoxelGrid reconstruct_field(const VoxelGrid& field) const;

 private:
  struct Conv {
    tensor::Tensor<float> w, b;
  };
  struct Norm {
    tensor::Tensor<float> gamma, beta;
  };
  struct Block {
    Conv c1, c2, skip;
    Norm n1, n2;
  };
  struct Down {
    Conv c;
    Norm n;
  };

  Autoencoder() = default;

  tensor::Tensor<float> run_block(const Block& blk, const tensor::Tensor<float>& x) const;
  void register_params();
  void probe_gradient_flow(std::uint64_t probe_seed);

  ModelConfig cfg_;
  Conv stem_, enc_latent_, dec_latent_, head_;
  std::vector<std::array<Block, 2>> enc_levels_, dec_levels_;
  std::vector<Down> downs_;
  std::vector<Conv> ups_;
  std::vector<tensor::Parameter<float>> params_;
};

// Bridge between double-precision fields and float training tensors. The
// tensor axes are (1, 1, nz, ny, nx) so the buffer order matches the
// x-fastest grid layout.
tensor::Tensor<float> field_to_tensor(const VoxelGrid& grid);
VoxelGrid tensor_to_field(const tensor::Tensor<float>& t, const Dims& dims, int sample = 0);

// Reads every volume of one split and converts the canonical signed-distance
// fields into the requested representation.
std::vector<VoxelGrid> load_split(const volume::DatasetManifest& manifest,
                                  const std::filesystem::path& manifest_dir,
                                  volume::Split split, const RepSpec& rep);

struct TrainResult {
  std::vector<double> epoch_loss;  // sample-weighted mean loss per epoch
  std::int64_t steps = 0;
};

// Minibatch training on reconstruction loss against the inputs themselves.
// The seed drives the per-epoch shuffles only. Throws TrainingDiverged when
// a batch loss stops being finite.
TrainResult train(Autoencoder& model, const std::vector<VoxelGrid>& fields,
                  const TrainConfig& config);

// Binary snapshot: magic, format version, config text, then every parameter
// as name / shape / float32 payload. Loading rebuilds the architecture from
// the stored config and restores values bitwise.
void save_checkpoint(const Autoencoder& model, const std::filesystem::path& path);
Autoencoder load_checkpoint(const std::filesystem::path& path);

}  // namespace mpae::model
