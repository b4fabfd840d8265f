#pragma once

// Smooth MLP value approximator v(x; theta) with exact spatial derivatives.
//
// Spatial derivatives are pushed forward through the layers alongside the
// activations: d first-order tangents (the Jacobian columns along e_i) and d
// second-order directional derivatives along the columns c_j of a factor C
// with C C^T = sigma sigma^T, so that
//   tr(sigma sigma^T D^2 v) = sum_j c_j^T D^2 v c_j.
// The parameter gradient of the squared-residual loss is obtained by reverse
// accumulation through that forward graph.

#include <charconv>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "pinnpi/common.hpp"
#include "pinnpi/problems.hpp"

namespace pinnpi {

enum class Activation { kTanh };

inline std::string to_string(Activation) { return "tanh"; }

/// Feedforward tanh network R^d -> R. Parameters live in one flat vector;
/// layer l owns W_l (out x in, column-major) followed by b_l. The output
/// layer is multiplied by a fixed, non-trainable scale so that values of
/// large magnitude do not have to be reached through the weights alone.
class ValueNet {
 public:
  ValueNet() = default;

  explicit ValueNet(std::vector<int> widths) : widths_(std::move(widths)) {
    if (widths_.size() < 2) throw std::invalid_argument("ValueNet: need at least input and output widths");
    for (int w : widths_)
      if (w < 1) throw std::invalid_argument("ValueNet: widths must be >= 1");
    if (widths_.back() != 1) throw std::invalid_argument("ValueNet: output width must be 1");
    Eigen::Index offset = 0;
    for (std::size_t l = 0; l + 1 < widths_.size(); ++l) {
      offsets_.push_back(offset);
      offset += static_cast<Eigen::Index>(widths_[l + 1]) * (widths_[l] + 1);
    }
    params_ = Vec::Zero(offset);
  }

  const std::vector<int>& widths() const { return widths_; }
  int input_dim() const { return widths_.front(); }
  /// Number of affine maps (hidden layers + output layer).
  int num_layers() const { return static_cast<int>(widths_.size()) - 1; }
  Eigen::Index param_count() const { return params_.size(); }
  Activation activation() const { return Activation::kTanh; }

  double output_scale() const { return output_scale_; }
  void set_output_scale(double s) {
    if (!(s > 0.0) || !std::isfinite(s)) throw std::invalid_argument("ValueNet: output scale must be positive");
    output_scale_ = s;
  }

  Vec& params() { return params_; }
  const Vec& params() const { return params_; }

  Eigen::Map<Mat> weight(int l) { return {params_.data() + offsets_[l], widths_[l + 1], widths_[l]}; }
  Eigen::Map<const Mat> weight(int l) const {
    return {params_.data() + offsets_[l], widths_[l + 1], widths_[l]};
  }
  Eigen::Map<Vec> bias(int l) {
    return {params_.data() + offsets_[l] + Eigen::Index{widths_[l + 1]} * widths_[l], widths_[l + 1]};
  }
  Eigen::Map<const Vec> bias(int l) const {
    return {params_.data() + offsets_[l] + Eigen::Index{widths_[l + 1]} * widths_[l], widths_[l + 1]};
  }

  // Offsets into a flat gradient vector laid out like params().
  Eigen::Index weight_offset(int l) const { return offsets_[l]; }
  Eigen::Index bias_offset(int l) const {
    return offsets_[l] + Eigen::Index{widths_[l + 1]} * widths_[l];
  }

  /// Plain value v(x).
  double value(const Eigen::Ref<const Vec>& x) const {
    Vec a = x;
    for (int l = 0; l < num_layers(); ++l) {
      Vec z = weight(l) * a + bias(l);
      a = (l + 1 < num_layers()) ? Vec(z.array().tanh()) : z;
    }
    return output_scale_ * a[0];
  }

 private:
  std::vector<int> widths_;
  std::vector<Eigen::Index> offsets_;
  Vec params_;
  double output_scale_ = 1.0;
};

/// Three hidden layers of 64 units for d <= 5, 128 units above.
inline std::vector<int> default_architecture(int d) {
  const int h = d <= 5 ? 64 : 128;
  return {d, h, h, h, 1};
}

/// Xavier-uniform weights, zero biases.
inline ValueNet init_network(const std::vector<int>& widths, std::uint64_t seed) {
  ValueNet net(widths);
  Rng rng(seed);
  for (int l = 0; l < net.num_layers(); ++l) {
    const double limit = std::sqrt(6.0 / (widths[l] + widths[l + 1]));
    std::uniform_real_distribution<double> dist(-limit, limit);
    auto W = net.weight(l);
    for (Eigen::Index j = 0; j < W.cols(); ++j)
      for (Eigen::Index i = 0; i < W.rows(); ++i) W(i, j) = dist(rng);
  }
  return net;
}

/// Factor C with C C^T = sigma sigma^T; its columns are the second-order
/// directions. Zero entries are skipped when mixing tangents.
struct DiffusionFactor {
  Mat C;
  std::vector<std::tuple<int, int, double>> nonzeros;  // (i, j, C_ij)

  DiffusionFactor() = default;
  explicit DiffusionFactor(Mat factor) : C(std::move(factor)) {
    for (Eigen::Index j = 0; j < C.cols(); ++j)
      for (Eigen::Index i = 0; i < C.rows(); ++i)
        if (C(i, j) != 0.0) nonzeros.emplace_back(static_cast<int>(i), static_cast<int>(j), C(i, j));
  }

  static DiffusionFactor from_sigma(const Mat& sigma) { return DiffusionFactor(sigma); }

  /// Symmetric square root of a PSD sigma sigma^T (diagonal inputs stay diagonal).
  static DiffusionFactor from_sigma_sq(const Mat& sigma_sq) {
    Mat off = sigma_sq;
    off.diagonal().setZero();
    if (off.cwiseAbs().maxCoeff() == 0.0)
      return DiffusionFactor(Mat(sigma_sq.diagonal().cwiseMax(0.0).cwiseSqrt().asDiagonal()));
    Eigen::SelfAdjointEigenSolver<Mat> eig(0.5 * (sigma_sq + sigma_sq.transpose()));
    const Vec root = eig.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    return DiffusionFactor(eig.eigenvectors() * root.asDiagonal() * eig.eigenvectors().transpose());
  }

  int dim() const { return static_cast<int>(C.rows()); }
};

struct DerivativeBundle {
  double value = 0.0;
  Vec grad;                    // nabla_x v
  double weighted_trace = 0.0; // tr(sigma sigma^T D^2 v)
  std::optional<Mat> hessian;
};

/// Per-point derivatives for a batch; grads is d x N.
struct BatchDerivatives {
  Vec values;
  Mat grads;
  Vec traces;
};

namespace detail {

inline constexpr Eigen::Index kChunk = 64;

struct LayerCache {
  Mat Z;   // pre-activation blocks
  Mat A;   // post-activation blocks
  Mat T, T1, T2;
  Mat Uz;  // first-order derivatives of Z along the second-order directions
};

// Column blocks of width K: [value | d_e1 .. d_ed | d2_c1 .. d2_cd].
struct Tape {
  Eigen::Index K = 0;
  int d = 0;
  int S = 0;
  bool with_trace = false;
  Mat A0;
  std::vector<LayerCache> hidden;
  Mat out;  // 1 x S K
};

inline void forward(const ValueNet& net, const Eigen::Ref<const Mat>& X, const DiffusionFactor* factor,
                    Tape& tape) {
  const int d = net.input_dim();
  const Eigen::Index K = X.cols();
  const bool trace = factor != nullptr;
  const int S = trace ? 1 + 2 * d : 1 + d;
  tape.K = K;
  tape.d = d;
  tape.S = S;
  tape.with_trace = trace;
  tape.hidden.resize(net.num_layers() - 1);

  tape.A0.setZero(d, S * K);
  tape.A0.leftCols(K) = X;
  for (int i = 0; i < d; ++i) tape.A0.block(i, (1 + i) * K, 1, K).setOnes();

  const Mat* prev = &tape.A0;
  for (int l = 0; l + 1 < net.num_layers(); ++l) {
    LayerCache& c = tape.hidden[l];
    const Eigen::Index n = net.widths()[l + 1];
    c.Z.noalias() = net.weight(l) * (*prev);
    c.Z.leftCols(K).colwise() += net.bias(l);
    c.T = c.Z.leftCols(K).array().tanh().matrix();
    c.T1 = (1.0 - c.T.array().square()).matrix();
    c.T2 = (-2.0 * c.T.array() * c.T1.array()).matrix();
    c.A.resize(n, S * K);
    c.A.leftCols(K) = c.T;
    for (int i = 0; i < d; ++i)
      c.A.middleCols((1 + i) * K, K) = (c.T1.array() * c.Z.middleCols((1 + i) * K, K).array()).matrix();
    if (trace) {
      c.Uz.setZero(n, d * K);
      for (const auto& [i, j, cij] : factor->nonzeros)
        c.Uz.middleCols(j * K, K) += cij * c.Z.middleCols((1 + i) * K, K);
      for (int j = 0; j < d; ++j) {
        auto uz = c.Uz.middleCols(j * K, K).array();
        c.A.middleCols((1 + d + j) * K, K) =
            (c.T2.array() * uz.square() + c.T1.array() * c.Z.middleCols((1 + d + j) * K, K).array())
                .matrix();
      }
    }
    prev = &c.A;
  }
  const int last = net.num_layers() - 1;
  tape.out.noalias() = net.output_scale() * net.weight(last) * (*prev);
  tape.out.leftCols(K).array() += net.output_scale() * net.bias(last)[0];
}

inline void read_outputs(const Tape& tape, Eigen::Index offset, BatchDerivatives& out) {
  const Eigen::Index K = tape.K;
  const int d = tape.d;
  out.values.segment(offset, K) = tape.out.leftCols(K).transpose();
  for (int i = 0; i < d; ++i) out.grads.block(i, offset, 1, K) = tape.out.middleCols((1 + i) * K, K);
  if (tape.with_trace) {
    auto tr = out.traces.segment(offset, K);
    tr.setZero();
    for (int j = 0; j < d; ++j) tr += tape.out.middleCols((1 + d + j) * K, K).transpose();
  }
}

// Reverse pass. `seed` is 1 x S K (adjoint of tape.out); accumulates into grad.
inline void backward(const ValueNet& net, const DiffusionFactor* factor, const Tape& tape,
                     const Mat& out_seed, Vec& grad) {
  const Mat seed = net.output_scale() * out_seed;
  const Eigen::Index K = tape.K;
  const int d = tape.d;
  const int L = net.num_layers();
  const bool trace = tape.with_trace;

  const Mat& A_last = L >= 2 ? tape.hidden[L - 2].A : tape.A0;
  {
    const int l = L - 1;
    Eigen::Map<Mat> gW(grad.data() + net.weight_offset(l), 1, net.widths()[l]);
    gW.noalias() += seed * A_last.transpose();
    grad[net.bias_offset(l)] += seed.leftCols(K).sum();
  }
  if (L < 2) return;
  Mat adj = net.weight(L - 1).transpose() * seed;  // n x S K

  Mat Zbar, Uzbar;
  for (int l = L - 2; l >= 0; --l) {
    const LayerCache& c = tape.hidden[l];
    const Eigen::Index n = c.Z.rows();
    Zbar.resize(n, tape.S * K);
    auto z0 = Zbar.leftCols(K).array();
    z0 = c.T1.array() * adj.leftCols(K).array();
    if (trace) {
      const Eigen::ArrayXXd T3 = -2.0 * c.T1.array().square() - 2.0 * c.T.array() * c.T2.array();
      Uzbar.resize(n, d * K);
      for (int j = 0; j < d; ++j) {
        const auto aq = adj.middleCols((1 + d + j) * K, K).array();
        const auto uz = c.Uz.middleCols(j * K, K).array();
        Zbar.middleCols((1 + d + j) * K, K).array() = c.T1.array() * aq;
        Uzbar.middleCols(j * K, K).array() = 2.0 * c.T2.array() * uz * aq;
        z0 += (T3 * uz.square() + c.T2.array() * c.Z.middleCols((1 + d + j) * K, K).array()) * aq;
      }
    }
    for (int i = 0; i < d; ++i) {
      const auto aj = adj.middleCols((1 + i) * K, K).array();
      Zbar.middleCols((1 + i) * K, K).array() = c.T1.array() * aj;
      z0 += c.T2.array() * c.Z.middleCols((1 + i) * K, K).array() * aj;
    }
    if (trace)
      for (const auto& [i, j, cij] : factor->nonzeros)
        Zbar.middleCols((1 + i) * K, K) += cij * Uzbar.middleCols(j * K, K);

    const Mat& A_prev = l >= 1 ? tape.hidden[l - 1].A : tape.A0;
    Eigen::Map<Mat> gW(grad.data() + net.weight_offset(l), n, net.widths()[l]);
    gW.noalias() += Zbar * A_prev.transpose();
    Eigen::Map<Vec>(grad.data() + net.bias_offset(l), n) += Zbar.leftCols(K).rowwise().sum();
    if (l >= 1) adj.noalias() = net.weight(l).transpose() * Zbar;
  }
}

inline void check_input(const ValueNet& net, Eigen::Index rows) {
  if (rows != net.input_dim()) throw std::invalid_argument("ValueNet: input dimension mismatch");
}

}  // namespace detail

/// Values, gradients and (when `factor` is given) weighted Hessian traces at
/// the columns of `points`.
inline BatchDerivatives eval_batch(const ValueNet& net, const Eigen::Ref<const Mat>& points,
                                   const DiffusionFactor* factor) {
  detail::check_input(net, points.rows());
  const Eigen::Index N = points.cols();
  BatchDerivatives out;
  out.values.resize(N);
  out.grads.resize(net.input_dim(), N);
  out.traces = Vec::Zero(N);
  const Eigen::Index chunks = (N + detail::kChunk - 1) / detail::kChunk;
#pragma omp parallel
  {
    detail::Tape tape;
#pragma omp for schedule(static)
    for (Eigen::Index c = 0; c < chunks; ++c) {
      const Eigen::Index begin = c * detail::kChunk;
      const Eigen::Index len = std::min(detail::kChunk, N - begin);
      detail::forward(net, points.middleCols(begin, len), factor, tape);
      detail::read_outputs(tape, begin, out);
    }
  }
  return out;
}

namespace detail {

// Reference path: full Hessians per unit, single point.
inline Mat full_hessian(const ValueNet& net, const Vec& x) {
  const int d = net.input_dim();
  Vec a = x;
  Mat J = Mat::Identity(d, d);
  std::vector<Mat> H(d, Mat::Zero(d, d));
  for (int l = 0; l + 1 < net.num_layers(); ++l) {
    const auto W = net.weight(l);
    const Vec z = W * a + net.bias(l);
    const Mat Jz = W * J;
    std::vector<Mat> Hn(W.rows(), Mat::Zero(d, d));
    for (Eigen::Index k = 0; k < W.rows(); ++k) {
      Mat hz = Mat::Zero(d, d);
      for (Eigen::Index m = 0; m < W.cols(); ++m) hz += W(k, m) * H[m];
      const double t = std::tanh(z[k]);
      const double t1 = 1.0 - t * t;
      const double t2 = -2.0 * t * t1;
      Hn[k] = t2 * Jz.row(k).transpose() * Jz.row(k) + t1 * hz;
    }
    a = z.array().tanh();
    J = (1.0 - a.array().square()).matrix().asDiagonal() * Jz;
    H = std::move(Hn);
  }
  const auto w = net.weight(net.num_layers() - 1);
  Mat out = Mat::Zero(d, d);
  for (Eigen::Index m = 0; m < w.cols(); ++m) out += w(0, m) * H[m];
  return net.output_scale() * out;
}

}  // namespace detail

inline DerivativeBundle eval_bundle(const ValueNet& net, const Vec& x, const DiffusionFactor& factor,
                                    bool need_full_hessian = false) {
  detail::check_input(net, x.size());
  detail::Tape tape;
  detail::forward(net, x, &factor, tape);
  BatchDerivatives b;
  b.values.resize(1);
  b.grads.resize(net.input_dim(), 1);
  b.traces.resize(1);
  detail::read_outputs(tape, 0, b);
  DerivativeBundle out{b.values[0], b.grads.col(0), b.traces[0], std::nullopt};
  if (need_full_hessian) out.hessian = detail::full_hessian(net, x);
  return out;
}

/// eval_bundle with sigma sigma^T given directly.
inline DerivativeBundle eval_bundle(const ValueNet& net, const Vec& x, const Mat& sigma_sq,
                                    bool need_full_hessian = false) {
  return eval_bundle(net, x, DiffusionFactor::from_sigma_sq(sigma_sq), need_full_hessian);
}

/// lambda v - 1/2 tr(sigma sigma^T D^2 v) - b(x, a) . grad v - L(x, a).
inline double residual_at(const ValueNet& net, const ControlProblem& problem, const Vec& x, const Vec& a) {
  const auto bundle = eval_bundle(net, x, DiffusionFactor::from_sigma(problem.sigma()));
  return problem.lambda() * bundle.value - 0.5 * bundle.weighted_trace -
         drift_eval(problem, x, a).dot(bundle.grad) - cost_eval(problem, x, a);
}

/// Policy-dependent residual data for a fixed set of points: drifts (d x N)
/// and rewards (N). Independent of the network parameters.
struct ResidualData {
  Mat points;
  Mat drifts;
  Vec rewards;
};

inline ResidualData prepare_residual_data(const ControlProblem& problem, const Mat& points,
                                          const Mat& actions) {
  if (points.cols() != actions.cols() || points.rows() != problem.state_dim() ||
      actions.rows() != problem.action_dim())
    throw std::invalid_argument("prepare_residual_data: shape mismatch");
  ResidualData data{points, Mat(problem.state_dim(), points.cols()), Vec(points.cols())};
  for (Eigen::Index i = 0; i < points.cols(); ++i) {
    const Vec x = points.col(i);
    const Vec a = actions.col(i);
    data.drifts.col(i) = drift_eval(problem, x, a);
    data.rewards[i] = cost_eval(problem, x, a);
  }
  return data;
}

/// Residuals at every point of `data`.
inline Vec residuals(const ValueNet& net, const ControlProblem& problem, const ResidualData& data) {
  const DiffusionFactor factor = DiffusionFactor::from_sigma(problem.sigma());
  const BatchDerivatives bd = eval_batch(net, data.points, &factor);
  return (problem.lambda() * bd.values - 0.5 * bd.traces -
          (data.drifts.array() * bd.grads.array()).colwise().sum().transpose().matrix() - data.rewards)
      .eval();
}

struct LossAndGradient {
  double loss = 0.0;
  Vec grad;
};

/// Mean squared residual over the batch and its exact parameter gradient.
/// Chunks of fixed size are reduced in order, so the result does not depend
/// on the number of threads.
inline LossAndGradient loss_and_param_grad(const ValueNet& net, const ControlProblem& problem,
                                           const ResidualData& data) {
  const Eigen::Index N = data.points.cols();
  if (N == 0) throw std::invalid_argument("loss_and_param_grad: empty batch");
  detail::check_input(net, data.points.rows());
  const DiffusionFactor factor = DiffusionFactor::from_sigma(problem.sigma());
  const int d = net.input_dim();
  const double lambda = problem.lambda();
  const Eigen::Index chunks = (N + detail::kChunk - 1) / detail::kChunk;

  LossAndGradient result{0.0, Vec::Zero(net.param_count())};
  Eigen::Index bad_index = -1;
#pragma omp parallel
  {
    detail::Tape tape;
    Vec partial(net.param_count());
    Mat seed;
#pragma omp for ordered schedule(static, 1)
    for (Eigen::Index c = 0; c < chunks; ++c) {
      const Eigen::Index begin = c * detail::kChunk;
      const Eigen::Index K = std::min(detail::kChunk, N - begin);
      detail::forward(net, data.points.middleCols(begin, K), &factor, tape);
      const int S = tape.S;
      const auto& out = tape.out;
      Vec r = lambda * out.leftCols(K).transpose() - data.rewards.segment(begin, K);
      for (int i = 0; i < d; ++i)
        r -= (data.drifts.block(i, begin, 1, K).array() * out.middleCols((1 + i) * K, K).array())
                 .matrix()
                 .transpose();
      for (int j = 0; j < d; ++j) r -= 0.5 * out.middleCols((1 + d + j) * K, K).transpose();
      const double chunk_loss = r.squaredNorm();
      Eigen::Index local_bad = -1;
      for (Eigen::Index k = 0; k < K; ++k)
        if (!std::isfinite(r[k])) {
          local_bad = begin + k;
          break;
        }

      const Vec w = (2.0 / static_cast<double>(N)) * r;
      seed.resize(1, S * K);
      seed.leftCols(K) = lambda * w.transpose();
      for (int i = 0; i < d; ++i)
        seed.middleCols((1 + i) * K, K) =
            -(data.drifts.block(i, begin, 1, K).array() * w.transpose().array()).matrix();
      for (int j = 0; j < d; ++j) seed.middleCols((1 + d + j) * K, K) = -0.5 * w.transpose();
      partial.setZero();
      detail::backward(net, &factor, tape, seed, partial);
#pragma omp ordered
      {
        result.loss += chunk_loss;
        result.grad += partial;
        if (local_bad >= 0 && bad_index < 0) bad_index = local_bad;
      }
    }
  }
  result.loss /= static_cast<double>(N);
  if (bad_index >= 0 || !std::isfinite(result.loss))
    throw NumericalError("non-finite residual loss at batch point " + std::to_string(bad_index));
  return result;
}

/// Convenience overload taking raw points and frozen actions.
inline LossAndGradient loss_and_param_grad(const ValueNet& net, const ControlProblem& problem,
                                           const Mat& points, const Mat& actions) {
  return loss_and_param_grad(net, problem, prepare_residual_data(problem, points, actions));
}

// ---------------------------------------------------------------------------
// Checkpoints: versioned text dump, row-major weights, shortest round-trip
// decimal representation (exact on reload).

using Metadata = std::map<std::string, std::string>;

namespace detail {

inline std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline double parse_double(const std::string& tok) {
  double v = 0.0;
  auto res = std::from_chars(tok.data(), tok.data() + tok.size(), v);
  if (res.ec != std::errc() || res.ptr != tok.data() + tok.size())
    throw std::runtime_error("checkpoint: bad number '" + tok + "'");
  return v;
}

}  // namespace detail

inline void write_checkpoint(std::ostream& os, const ValueNet& net, const Metadata& meta = {}) {
  os << "pinnpi-valuenet 1\n";
  os << "activation " << to_string(net.activation()) << '\n';
  os << "widths";
  for (int w : net.widths()) os << ' ' << w;
  os << '\n';
  os << "output_scale " << detail::format_double(net.output_scale()) << '\n';
  for (const auto& [k, v] : meta) {
    if (k.find_first_of(" \n") != std::string::npos || v.find('\n') != std::string::npos)
      throw std::invalid_argument("checkpoint metadata must be single-line, key without spaces");
    os << "meta " << k << ' ' << v << '\n';
  }
  for (int l = 0; l < net.num_layers(); ++l) {
    const auto W = net.weight(l);
    os << "weight " << l << ' ' << W.rows() << ' ' << W.cols() << '\n';
    for (Eigen::Index i = 0; i < W.rows(); ++i) {
      for (Eigen::Index j = 0; j < W.cols(); ++j) os << (j ? " " : "") << detail::format_double(W(i, j));
      os << '\n';
    }
    const auto b = net.bias(l);
    os << "bias " << l << ' ' << b.size() << '\n';
    for (Eigen::Index i = 0; i < b.size(); ++i) os << (i ? " " : "") << detail::format_double(b[i]);
    os << '\n';
  }
  os << "end\n";
}

inline void save_checkpoint(const std::string& path, const ValueNet& net, const Metadata& meta = {}) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write checkpoint " + path);
  write_checkpoint(os, net, meta);
}

struct Checkpoint {
  ValueNet net;
  Metadata meta;
};

inline Checkpoint read_checkpoint(std::istream& is) {
  auto fail = [](const std::string& why) { return std::runtime_error("checkpoint: " + why); };
  std::string tag;
  int version = 0;
  if (!(is >> tag >> version) || tag != "pinnpi-valuenet" || version != 1)
    throw fail("unsupported header");
  std::string act;
  if (!(is >> tag >> act) || tag != "activation" || act != "tanh") throw fail("unsupported activation");
  if (!(is >> tag) || tag != "widths") throw fail("missing widths");
  std::string line;
  std::getline(is, line);
  std::istringstream ws(line);
  std::vector<int> widths;
  for (int w; ws >> w;) widths.push_back(w);
  Checkpoint ck{ValueNet(widths), {}};
  std::string tok;
  while (is >> tag) {
    if (tag == "meta") {
      std::string key;
      is >> key;
      std::getline(is, line);
      ck.meta[key] = line.empty() ? line : line.substr(1);
    } else if (tag == "output_scale") {
      if (!(is >> tok)) throw fail("missing output scale");
      ck.net.set_output_scale(detail::parse_double(tok));
    } else if (tag == "weight") {
      int l = 0;
      Eigen::Index rows = 0, cols = 0;
      is >> l >> rows >> cols;
      if (l < 0 || l >= ck.net.num_layers()) throw fail("bad layer index");
      auto W = ck.net.weight(l);
      if (rows != W.rows() || cols != W.cols()) throw fail("weight shape mismatch");
      for (Eigen::Index i = 0; i < rows; ++i)
        for (Eigen::Index j = 0; j < cols; ++j) {
          if (!(is >> tok)) throw fail("truncated weights");
          W(i, j) = detail::parse_double(tok);
        }
    } else if (tag == "bias") {
      int l = 0;
      Eigen::Index n = 0;
      is >> l >> n;
      if (l < 0 || l >= ck.net.num_layers()) throw fail("bad layer index");
      auto b = ck.net.bias(l);
      if (n != b.size()) throw fail("bias shape mismatch");
      for (Eigen::Index i = 0; i < n; ++i) {
        if (!(is >> tok)) throw fail("truncated biases");
        b[i] = detail::parse_double(tok);
      }
    } else if (tag == "end") {
      return ck;
    } else {
      throw fail("unexpected token '" + tag + "'");
    }
  }
  throw fail("missing end marker");
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open checkpoint " + path);
  return read_checkpoint(is);
}

}  // namespace pinnpi
