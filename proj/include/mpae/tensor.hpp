#pragma once

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "mpae/common.hpp"

namespace mpae::tensor {

enum class Act { SiLU, ReLU, Tanh };
enum class LossKind { L1, MSE };
enum class PadMode { Zero, Circular };

std::string to_string(Act a);
std::string to_string(LossKind k);
std::string to_string(PadMode m);
Act act_from_string(const std::string& s);
LossKind loss_from_string(const std::string& s);
PadMode pad_mode_from_string(const std::string& s);

namespace detail {

template <class T>
struct Node {
  std::vector<int> shape;
  std::vector<T> value;
  std::vector<T> grad;  // allocated on first backward pass through this node
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backprop;  // scatters this->grad into parents
  int backward_visits = 0;              // diagnostics: visits per backward()

  std::int64_t numel() const {
    std::int64_t n = 1;
    for (int e : shape) n *= e;
    return n;
  }
};

}  // namespace detail

// Dense n-d array holding a 32-bit (training) or 64-bit (verification) value
// buffer plus its place in the autodiff graph. Copies share the underlying
// node; ops build new nodes referencing their parents.
template <class T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<detail::Node<T>> node) : node_(std::move(node)) {}

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
  static Tensor full(std::vector<int> shape, T value, bool requires_grad = false);
  static Tensor from(std::vector<int> shape, std::vector<T> values, bool requires_grad = false);
  static Tensor scalar(T value);

  bool defined() const { return node_ != nullptr; }
  const std::vector<int>& shape() const;
  std::int64_t numel() const;
  std::span<T> values();
  std::span<const T> values() const;
  bool requires_grad() const;
  bool has_grad() const;
  std::span<const T> grad() const;
  void zero_grad();

  // Scalar extraction; the tensor must hold exactly one element.
  T item() const;

  // Reverse-mode sweep from this scalar. Gradients of leaf tensors accumulate
  // across calls; interior gradients are reset per call.
  void backward() const;

  int backward_visits() const;

  std::shared_ptr<detail::Node<T>> node() const { return node_; }

 private:
  std::shared_ptr<detail::Node<T>> node_;
};

// x: (N, C_in, D, H, W); w: (C_out, C_in, k, k, k) with k odd; b: (C_out).
// Cross-correlation with the given stride and symmetric padding (zero or
// periodic). Gradients flow to x, w and b.
template <class T>
Tensor<T> conv3d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, int stride = 1,
                 int padding = 0, PadMode pad_mode = PadMode::Zero);

// Normalizes each output channel of a conv kernel to zero mean / unit
// variance over its fan-in (population variance, stabilized by eps).
template <class T>
Tensor<T> weight_standardize(const Tensor<T>& w, T eps);

// GroupNorm over (channels-per-group x spatial) per sample, with per-channel
// affine parameters gamma and beta.
template <class T>
Tensor<T> group_norm(const Tensor<T>& x, int groups, const Tensor<T>& gamma,
                     const Tensor<T>& beta, T eps);

template <class T>
Tensor<T> activation(const Tensor<T>& x, Act kind);

// Mean-reduced elementwise loss; returns a scalar tensor.
template <class T>
Tensor<T> loss(const Tensor<T>& pred, const Tensor<T>& target, LossKind kind);

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);

template <class T>
Tensor<T> sum(const Tensor<T>& x);

// Doubles each spatial extent by nearest-neighbor replication.
template <class T>
Tensor<T> upsample_nearest2x(const Tensor<T>& x);

template <class T>
struct Parameter {
  std::string name;
  Tensor<T> tensor;
  bool trainable = true;
};

template <class T>
void zero_grads(std::vector<Parameter<T>>& params);

struct AdamConfig {
  double lr = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // L2 coupled into the gradient before the moments
};

template <class T>
class Adam {
 public:
  explicit Adam(AdamConfig cfg) : cfg_(cfg) {}

  // One update from the gradients currently accumulated on the parameters.
  // Every trainable parameter must carry a gradient.
  void step(std::vector<Parameter<T>>& params);

  std::int64_t steps() const { return t_; }
  const AdamConfig& config() const { return cfg_; }

 private:
  AdamConfig cfg_;
  std::int64_t t_ = 0;
  std::vector<std::vector<T>> m_, v_;
};

}  // namespace mpae::tensor
