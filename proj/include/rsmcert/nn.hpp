#pragma once

// Dense ReLU multilayer perceptrons: evaluation, reverse-mode gradients,
// interval bound propagation and L1 Lipschitz bounds.
//
// Batches are stored column-wise: a batch of k inputs of dimension d is a
// d x k matrix.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace rsmcert {

enum class Activation : std::uint8_t { identity = 0, relu = 1, softplus = 2 };

std::string to_string(Activation activation);
Activation activation_from_string(const std::string& name);

struct DenseLayer {
  Eigen::MatrixXd weight;  // out x in
  Eigen::VectorXd bias;    // out
};

/// Axis-aligned box [lower, upper]. Degenerate boxes (lower == upper) are allowed.
struct IntervalBox {
  Eigen::VectorXd lower;
  Eigen::VectorXd upper;

  IntervalBox() = default;
  IntervalBox(Eigen::VectorXd lo, Eigen::VectorXd hi);
  static IntervalBox point(const Eigen::VectorXd& x) { return {x, x}; }

  Eigen::Index dim() const { return lower.size(); }
  Eigen::VectorXd center() const { return 0.5 * (lower + upper); }
  Eigen::VectorXd width() const { return upper - lower; }
  bool contains(const Eigen::VectorXd& x, double slack = 0.0) const;
  bool contains(const IntervalBox& other, double slack = 0.0) const;
};

/// Feed-forward network with ReLU hidden layers and a configurable output activation.
///
/// layer_dims lists the input width, every hidden width and the output width, so a
/// network with layer_dims {2, 128, 128, 1} owns three dense layers.
class MlpNetwork {
 public:
  MlpNetwork() = default;
  /// All parameters zero.
  MlpNetwork(std::vector<int> layer_dims, Activation output_activation);

  /// Weights and biases uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)].
  static MlpNetwork random(std::vector<int> layer_dims, Activation output_activation,
                           std::uint64_t seed);

  const std::vector<int>& layer_dims() const { return dims_; }
  int input_dim() const { return dims_.front(); }
  int output_dim() const { return dims_.back(); }
  std::size_t num_layers() const { return layers_.size(); }
  Activation hidden_activation() const { return Activation::relu; }
  Activation output_activation() const { return output_; }

  const DenseLayer& layer(std::size_t i) const { return layers_.at(i); }
  DenseLayer& layer(std::size_t i) { return layers_.at(i); }
  const std::vector<DenseLayer>& layers() const { return layers_; }

  std::size_t parameter_count() const;
  bool all_finite() const;
  /// FNV-1a over the raw parameter bytes; used to audit that a network never changed.
  std::uint64_t parameter_hash() const;

  friend bool operator==(const MlpNetwork& a, const MlpNetwork& b);

 private:
  std::vector<int> dims_;
  std::vector<DenseLayer> layers_;
  Activation output_ = Activation::identity;
};

/// Gradient of a scalar loss with respect to every parameter of one network.
struct GradientSet {
  std::vector<Eigen::MatrixXd> weight;
  std::vector<Eigen::VectorXd> bias;

  static GradientSet zeros_like(const MlpNetwork& net);
  bool congruent_with(const MlpNetwork& net) const;
  bool all_finite() const;
  void set_zero();
  GradientSet& operator+=(const GradientSet& other);
  GradientSet& operator*=(double factor);
  double squared_norm() const;
};

Eigen::VectorXd forward(const MlpNetwork& net, const Eigen::VectorXd& x);
Eigen::MatrixXd forward_batch(const MlpNetwork& net, const Eigen::MatrixXd& xs);

/// Per-layer values kept from a batched forward pass for the backward pass.
struct ForwardTrace {
  std::vector<Eigen::MatrixXd> inputs;          // inputs[l]: input of layer l
  std::vector<Eigen::MatrixXd> preactivations;  // preactivations[l]: W_l x + b_l
  Eigen::MatrixXd output;
};

ForwardTrace forward_trace(const MlpNetwork& net, const Eigen::MatrixXd& xs);

/// Reverse-mode pass for a scalar loss whose derivative with respect to the batch
/// outputs is `output_grad` (same shape as trace.output). Parameter gradients are
/// added into `grads`; the derivative with respect to the batch inputs is returned.
/// The ReLU derivative at 0 is taken to be 0.
Eigen::MatrixXd backward(const MlpNetwork& net, const ForwardTrace& trace,
                         const Eigen::MatrixXd& output_grad, GradientSet& grads);

/// Sound enclosure of forward(net, x) over all x in `box`.
IntervalBox interval_forward(const MlpNetwork& net, const IntervalBox& box);

/// Batched variant: column j of the result encloses the image of the box
/// [lower.col(j), upper.col(j)].
void interval_forward_batch(const MlpNetwork& net, const Eigen::MatrixXd& lower,
                            const Eigen::MatrixXd& upper, Eigen::MatrixXd& out_lower,
                            Eigen::MatrixXd& out_upper);

/// Operator norm induced by the L1 vector norm: the largest absolute column sum.
double l1_operator_norm(const Eigen::MatrixXd& m);

/// Product of the L1-induced operator norms of all weight matrices. ReLU and softplus
/// are 1-Lipschitz, so this bounds |f(x) - f(y)|_1 <= L |x - y|_1.
double lipschitz_constant(const MlpNetwork& net);

/// Adds scale * d lipschitz_constant(net) / d parameters into `grads`. Where a norm is
/// attained by several columns the first one is used.
void accumulate_lipschitz_gradient(const MlpNetwork& net, double scale, GradientSet& grads);

// Binary checkpoint format, little-endian:
//   magic "RSMNET01", u32 layer count + 1, u32 dims..., u8 hidden tag, u8 output tag,
//   then per layer the row-major f64 weights followed by the f64 biases.
std::string serialize_network(const MlpNetwork& net);
MlpNetwork deserialize_network(const std::string& bytes);
void save_network(const MlpNetwork& net, const std::filesystem::path& path);
MlpNetwork load_network(const std::filesystem::path& path);

}  // namespace rsmcert
