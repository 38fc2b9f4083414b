#include "rsmcert/nn.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>

#include "rsmcert/error.hpp"

namespace rsmcert {

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

namespace {

double softplus(double z) { return z > 0.0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }

double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

void apply_activation(Activation act, Eigen::MatrixXd& m) {
  switch (act) {
    case Activation::identity:
      break;
    case Activation::relu:
      m = m.cwiseMax(0.0);
      break;
    case Activation::softplus:
      m = m.unaryExpr(&softplus);
      break;
  }
}

Activation layer_activation(const MlpNetwork& net, std::size_t l) {
  return l + 1 == net.num_layers() ? net.output_activation() : net.hidden_activation();
}

}  // namespace

std::string to_string(Activation activation) {
  switch (activation) {
    case Activation::identity: return "identity";
    case Activation::relu: return "relu";
    case Activation::softplus: return "softplus";
  }
  return "unknown";
}

Activation activation_from_string(const std::string& name) {
  if (name == "identity") return Activation::identity;
  if (name == "relu") return Activation::relu;
  if (name == "softplus") return Activation::softplus;
  throw ContractViolation("unknown activation '" + name + "'");
}

IntervalBox::IntervalBox(Eigen::VectorXd lo, Eigen::VectorXd hi) : lower(std::move(lo)), upper(std::move(hi)) {
  require(lower.size() == upper.size(), "interval box bounds differ in dimension");
  for (Eigen::Index i = 0; i < lower.size(); ++i)
    require(lower[i] <= upper[i], "interval box has lower > upper in dimension " + std::to_string(i));
}

bool IntervalBox::contains(const Eigen::VectorXd& x, double slack) const {
  if (x.size() != dim()) return false;
  for (Eigen::Index i = 0; i < dim(); ++i)
    if (x[i] < lower[i] - slack || x[i] > upper[i] + slack) return false;
  return true;
}

bool IntervalBox::contains(const IntervalBox& other, double slack) const {
  if (other.dim() != dim()) return false;
  for (Eigen::Index i = 0; i < dim(); ++i)
    if (other.lower[i] < lower[i] - slack || other.upper[i] > upper[i] + slack) return false;
  return true;
}

MlpNetwork::MlpNetwork(std::vector<int> layer_dims, Activation output_activation)
    : dims_(std::move(layer_dims)), output_(output_activation) {
  require(dims_.size() >= 2, "a network needs at least an input and an output width");
  for (int d : dims_) require(d > 0, "layer widths must be positive");
  require(output_ != Activation::relu, "output activation must be identity or softplus");
  layers_.reserve(dims_.size() - 1);
  for (std::size_t l = 0; l + 1 < dims_.size(); ++l)
    layers_.push_back({Eigen::MatrixXd::Zero(dims_[l + 1], dims_[l]), Eigen::VectorXd::Zero(dims_[l + 1])});
}

MlpNetwork MlpNetwork::random(std::vector<int> layer_dims, Activation output_activation, std::uint64_t seed) {
  MlpNetwork net(std::move(layer_dims), output_activation);
  std::mt19937_64 rng(seed);
  for (auto& layer : net.layers_) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(layer.weight.cols()));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (Eigen::Index r = 0; r < layer.weight.rows(); ++r)
      for (Eigen::Index c = 0; c < layer.weight.cols(); ++c) layer.weight(r, c) = dist(rng);
    for (Eigen::Index r = 0; r < layer.bias.size(); ++r) layer.bias[r] = dist(rng);
  }
  return net;
}

std::size_t MlpNetwork::parameter_count() const {
  std::size_t n = 0;
  for (const auto& l : layers_) n += static_cast<std::size_t>(l.weight.size() + l.bias.size());
  return n;
}

bool MlpNetwork::all_finite() const {
  for (const auto& l : layers_)
    if (!l.weight.allFinite() || !l.bias.allFinite()) return false;
  return true;
}

std::uint64_t MlpNetwork::parameter_hash() const {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&h](const double* data, Eigen::Index n) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < static_cast<std::size_t>(n) * sizeof(double); ++i) {
      h ^= bytes[i];
      h *= 1099511628211ULL;
    }
  };
  for (const auto& l : layers_) {
    mix(l.weight.data(), l.weight.size());
    mix(l.bias.data(), l.bias.size());
  }
  return h;
}

bool operator==(const MlpNetwork& a, const MlpNetwork& b) {
  if (a.dims_ != b.dims_ || a.output_ != b.output_) return false;
  for (std::size_t l = 0; l < a.layers_.size(); ++l) {
    const auto& x = a.layers_[l];
    const auto& y = b.layers_[l];
    if (std::memcmp(x.weight.data(), y.weight.data(), sizeof(double) * x.weight.size()) != 0) return false;
    if (std::memcmp(x.bias.data(), y.bias.data(), sizeof(double) * x.bias.size()) != 0) return false;
  }
  return true;
}

GradientSet GradientSet::zeros_like(const MlpNetwork& net) {
  GradientSet g;
  for (const auto& l : net.layers()) {
    g.weight.push_back(Eigen::MatrixXd::Zero(l.weight.rows(), l.weight.cols()));
    g.bias.push_back(Eigen::VectorXd::Zero(l.bias.size()));
  }
  return g;
}

bool GradientSet::congruent_with(const MlpNetwork& net) const {
  if (weight.size() != net.num_layers() || bias.size() != net.num_layers()) return false;
  for (std::size_t l = 0; l < net.num_layers(); ++l) {
    const auto& layer = net.layer(l);
    if (weight[l].rows() != layer.weight.rows() || weight[l].cols() != layer.weight.cols()) return false;
    if (bias[l].size() != layer.bias.size()) return false;
  }
  return true;
}

bool GradientSet::all_finite() const {
  for (std::size_t l = 0; l < weight.size(); ++l)
    if (!weight[l].allFinite() || !bias[l].allFinite()) return false;
  return true;
}

void GradientSet::set_zero() {
  for (auto& w : weight) w.setZero();
  for (auto& b : bias) b.setZero();
}

GradientSet& GradientSet::operator+=(const GradientSet& other) {
  require(other.weight.size() == weight.size(), "gradient sets differ in layer count");
  for (std::size_t l = 0; l < weight.size(); ++l) {
    weight[l] += other.weight[l];
    bias[l] += other.bias[l];
  }
  return *this;
}

GradientSet& GradientSet::operator*=(double factor) {
  for (auto& w : weight) w *= factor;
  for (auto& b : bias) b *= factor;
  return *this;
}

double GradientSet::squared_norm() const {
  double s = 0.0;
  for (std::size_t l = 0; l < weight.size(); ++l) s += weight[l].squaredNorm() + bias[l].squaredNorm();
  return s;
}

Eigen::VectorXd forward(const MlpNetwork& net, const Eigen::VectorXd& x) {
  return forward_batch(net, x);
}

Eigen::MatrixXd forward_batch(const MlpNetwork& net, const Eigen::MatrixXd& xs) {
  require(xs.rows() == net.input_dim(), "input dimension " + std::to_string(xs.rows()) +
                                            " does not match network input " + std::to_string(net.input_dim()));
  Eigen::MatrixXd h = xs;
  for (std::size_t l = 0; l < net.num_layers(); ++l) {
    const auto& layer = net.layer(l);
    Eigen::MatrixXd z = layer.weight * h;
    z.colwise() += layer.bias;
    apply_activation(layer_activation(net, l), z);
    h = std::move(z);
  }
  return h;
}

ForwardTrace forward_trace(const MlpNetwork& net, const Eigen::MatrixXd& xs) {
  require(xs.rows() == net.input_dim(), "input dimension does not match network input");
  ForwardTrace trace;
  trace.inputs.reserve(net.num_layers());
  trace.preactivations.reserve(net.num_layers());
  Eigen::MatrixXd h = xs;
  for (std::size_t l = 0; l < net.num_layers(); ++l) {
    const auto& layer = net.layer(l);
    Eigen::MatrixXd z = layer.weight * h;
    z.colwise() += layer.bias;
    trace.inputs.push_back(std::move(h));
    h = z;
    apply_activation(layer_activation(net, l), h);
    trace.preactivations.push_back(std::move(z));
  }
  trace.output = std::move(h);
  return trace;
}

Eigen::MatrixXd backward(const MlpNetwork& net, const ForwardTrace& trace, const Eigen::MatrixXd& output_grad,
                         GradientSet& grads) {
  require(output_grad.rows() == trace.output.rows() && output_grad.cols() == trace.output.cols(),
          "output gradient shape does not match the traced batch");
  require(grads.congruent_with(net), "gradient set is not shape-congruent with the network");
  require(trace.preactivations.size() == net.num_layers(), "trace was recorded for a different network");

  Eigen::MatrixXd delta = output_grad;
  for (std::size_t l = net.num_layers(); l-- > 0;) {
    const Eigen::MatrixXd& z = trace.preactivations[l];
    switch (layer_activation(net, l)) {
      case Activation::identity:
        break;
      case Activation::relu:
        delta = delta.cwiseProduct((z.array() > 0.0).cast<double>().matrix());
        break;
      case Activation::softplus:
        delta = delta.cwiseProduct(z.unaryExpr(&sigmoid));
        break;
    }
    grads.weight[l].noalias() += delta * trace.inputs[l].transpose();
    grads.bias[l] += delta.rowwise().sum();
    delta = net.layer(l).weight.transpose() * delta;
  }
  return delta;
}

void interval_forward_batch(const MlpNetwork& net, const Eigen::MatrixXd& lower, const Eigen::MatrixXd& upper,
                            Eigen::MatrixXd& out_lower, Eigen::MatrixXd& out_upper) {
  require(lower.rows() == net.input_dim() && upper.rows() == net.input_dim(),
          "box dimension does not match network input");
  require(lower.cols() == upper.cols(), "lower and upper batches differ in size");
  Eigen::MatrixXd lo = lower;
  Eigen::MatrixXd hi = upper;
  for (std::size_t l = 0; l < net.num_layers(); ++l) {
    const auto& layer = net.layer(l);
    const Eigen::MatrixXd center = 0.5 * (lo + hi);
    const Eigen::MatrixXd radius = 0.5 * (hi - lo);
    Eigen::MatrixXd c = layer.weight * center;
    c.colwise() += layer.bias;
    const Eigen::MatrixXd r = layer.weight.cwiseAbs() * radius;
    lo = c - r;
    hi = c + r;
    const Activation act = layer_activation(net, l);
    apply_activation(act, lo);
    apply_activation(act, hi);
  }
  out_lower = std::move(lo);
  out_upper = std::move(hi);
}

IntervalBox interval_forward(const MlpNetwork& net, const IntervalBox& box) {
  require(box.dim() == net.input_dim(), "box dimension does not match network input");
  Eigen::MatrixXd lo, hi;
  interval_forward_batch(net, box.lower, box.upper, lo, hi);
  return IntervalBox(lo.col(0), hi.col(0));
}

double l1_operator_norm(const Eigen::MatrixXd& m) {
  if (m.size() == 0) return 0.0;
  return m.cwiseAbs().colwise().sum().maxCoeff();
}

double lipschitz_constant(const MlpNetwork& net) {
  double product = 1.0;
  for (const auto& layer : net.layers()) product *= l1_operator_norm(layer.weight);
  return product;
}

void accumulate_lipschitz_gradient(const MlpNetwork& net, double scale, GradientSet& grads) {
  require(grads.congruent_with(net), "gradient set is not shape-congruent with the network");
  const std::size_t n = net.num_layers();
  std::vector<double> norms(n);
  std::vector<Eigen::Index> argmax(n);
  for (std::size_t l = 0; l < n; ++l) {
    const auto sums = net.layer(l).weight.cwiseAbs().colwise().sum();
    norms[l] = sums.maxCoeff(&argmax[l]);
  }
  for (std::size_t l = 0; l < n; ++l) {
    double others = 1.0;
    for (std::size_t k = 0; k < n; ++k)
      if (k != l) others *= norms[k];
    if (others == 0.0) continue;
    const auto col = net.layer(l).weight.col(argmax[l]);
    grads.weight[l].col(argmax[l]) += (scale * others) * col.array().sign().matrix();
  }
}

namespace {

constexpr char kMagic[8] = {'R', 'S', 'M', 'N', 'E', 'T', '0', '1'};

template <typename T>
void put(std::string& out, const T& v) {
  out.append(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T take(const std::string& in, std::size_t& pos) {
  if (pos + sizeof(T) > in.size()) throw ContractViolation("truncated network checkpoint");
  T v;
  std::memcpy(&v, in.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

}  // namespace

std::string serialize_network(const MlpNetwork& net) {
  std::string out(kMagic, sizeof(kMagic));
  put(out, static_cast<std::uint32_t>(net.layer_dims().size()));
  for (int d : net.layer_dims()) put(out, static_cast<std::uint32_t>(d));
  put(out, static_cast<std::uint8_t>(net.hidden_activation()));
  put(out, static_cast<std::uint8_t>(net.output_activation()));
  for (const auto& layer : net.layers()) {
    for (Eigen::Index r = 0; r < layer.weight.rows(); ++r)
      for (Eigen::Index c = 0; c < layer.weight.cols(); ++c) put(out, layer.weight(r, c));
    for (Eigen::Index r = 0; r < layer.bias.size(); ++r) put(out, layer.bias[r]);
  }
  return out;
}

MlpNetwork deserialize_network(const std::string& bytes) {
  if (bytes.size() < sizeof(kMagic) || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0)
    throw ContractViolation("not a network checkpoint (bad magic)");
  std::size_t pos = sizeof(kMagic);
  const auto count = take<std::uint32_t>(bytes, pos);
  if (count < 2 || count > 1024) throw ContractViolation("implausible layer count in checkpoint");
  std::vector<int> dims(count);
  for (auto& d : dims) d = static_cast<int>(take<std::uint32_t>(bytes, pos));
  const auto hidden = static_cast<Activation>(take<std::uint8_t>(bytes, pos));
  const auto output = static_cast<Activation>(take<std::uint8_t>(bytes, pos));
  if (hidden != Activation::relu) throw ContractViolation("unsupported hidden activation in checkpoint");
  MlpNetwork net(std::move(dims), output);
  for (std::size_t l = 0; l < net.num_layers(); ++l) {
    auto& layer = net.layer(l);
    for (Eigen::Index r = 0; r < layer.weight.rows(); ++r)
      for (Eigen::Index c = 0; c < layer.weight.cols(); ++c) layer.weight(r, c) = take<double>(bytes, pos);
    for (Eigen::Index r = 0; r < layer.bias.size(); ++r) layer.bias[r] = take<double>(bytes, pos);
  }
  if (pos != bytes.size()) throw ContractViolation("trailing bytes in network checkpoint");
  if (!net.all_finite()) throw ContractViolation("checkpoint contains non-finite parameters");
  return net;
}

void save_network(const MlpNetwork& net, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
  const std::string bytes = serialize_network(net);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

MlpNetwork load_network(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read checkpoint " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return deserialize_network(buf.str());
}

}  // namespace rsmcert
