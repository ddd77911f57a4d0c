#pragma once

#include <array>
#include <functional>
#include <string>
#include <vector>

#include "deskdet/array.hpp"
#include "deskdet/geometry.hpp"

namespace deskdet::ad {

using deskdet::Array;
using deskdet::Box;
using deskdet::Parameter;
using deskdet::Shape;

/// Numerical guards, shared with every oracle that re-derives these ops.
inline constexpr double kLogEps = 1e-12;   // log(x) evaluates ln(x + kLogEps)
inline constexpr double kNormEps = 1e-12;  // row norm uses sqrt(sum x^2 + kNormEps)

class TapeError : public std::runtime_error {
 public:
  explicit TapeError(const std::string& msg) : std::runtime_error(msg) {}
};

enum class OpKind {
  kLeaf,
  kAdd,
  kSub,
  kMul,
  kDiv,
  kMatmul,
  kRelu,
  kExp,
  kLog,
  kNegate,
  kSum,       // axis = -1 (all) or last axis of a 2-D input
  kMean,      // all elements
  kMaxReduce, // all elements; subgradient to the first argmax
  kSoftmax,     // last axis, log-sum-exp stabilized
  kLogSoftmax,  // last axis
  kLogSumExp,   // last axis of a 2-D input -> length-B vector
  kL2Normalize, // rows of a 2-D input (or a 1-D vector)
  kClamp,
  kConcatRows,
  kSliceRows,
  kSliceCols,
  kReshape,
  kDetach,
  kHuber,     // elementwise smooth-L1, transition at |x| = 1
  kPowConst,
  kSigmoid,
  kAddRowVec,   // x: BxD, b: D
  kTakePerRow,  // out[b,j] = x[b, idx[b*k+j]]
  kGatherRows,  // out[i,:] = x[rows[i],:]
  kConv2d,      // x: HxWxCi, w: KxKxCixCo, optional b: Co; stride 1
  kAvgPool2d,   // kernel = stride = k
  kBatchNorm,   // x: BxD (+ optional gamma, beta); running stats in Parameters
  kRoiPool,     // nearest-cell pooling to out_size x out_size per box
};

const char* op_name(OpKind k);

class Tape;

/// Lightweight handle to a tape node.
struct Var {
  Tape* tape = nullptr;
  int id = -1;
  bool defined() const { return tape != nullptr && id >= 0; }
  Shape shape() const;  // by value: the tape's node storage may reallocate
  Array value() const;
};

/// Reverse-mode tape. Records every executed op in topological order together
/// with the forward values its backward rule needs. One backward per forward:
/// a second backward without new ops is an error.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Array value, bool requires_grad = false);
  Var constant(double v) { return leaf(Array::scalar(v), false); }
  Var constant(Array v) { return leaf(std::move(v), false); }
  /// Leaf bound to a Parameter: backward accumulates (+=) into p.grad.
  Var param(Parameter& p);

  /// Backpropagate from a scalar loss. Gradients of reachable Parameters are
  /// accumulated; the tape is then consumed until new ops are recorded.
  void backward(Var loss);

  Array value(Var v) const;
  /// Zero-copy read of a node's forward buffer.
  const std::vector<double>& raw(Var v) const { return node(v.id).value; }
  /// Gradient of a node after backward (zeros if unreached).
  Array grad(Var v) const;

  void clear();
  std::size_t size() const { return nodes_.size(); }

  // --- internal (used by the op builders) ---
  struct Attrs {
    std::vector<double> f;
    std::vector<int> i;
    std::vector<int> idx;
    Parameter* run_mean = nullptr;
    Parameter* run_var = nullptr;
  };
  struct Node {
    OpKind kind = OpKind::kLeaf;
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;   // lazily sized during backward
    std::vector<int> inputs;
    std::vector<double> saved;  // extra forward values for backward
    Attrs attrs;
    Parameter* param = nullptr;
    bool requires_grad = false;
  };
  Var emit(OpKind kind, Shape shape, std::vector<int> inputs, Attrs attrs);
  Node& node(int id) { return nodes_[static_cast<std::size_t>(id)]; }
  const Node& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }

 private:
  void run_forward(Node& n);
  void run_backward(int id);
  void check_finite(const Node& n) const;

  std::vector<Node> nodes_;
  bool consumed_ = false;
};

// --- op builders ---
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var divide(Var a, Var b);
Var matmul(Var a, Var b, bool trans_a = false, bool trans_b = false);
Var relu(Var x);
Var exp(Var x);
Var log(Var x);  // ln(x + kLogEps)
Var negate(Var x);
Var sum(Var x, int axis = -1);
Var mean(Var x);
Var max_reduce(Var x);
Var softmax(Var x);
Var log_softmax(Var x);
Var logsumexp_rows(Var x);
Var l2_normalize_rows(Var x);
Var clamp(Var x, double lo, double hi);
Var concat_rows(const std::vector<Var>& xs);
Var slice_rows(Var x, int start, int stop);
Var slice_cols(Var x, int start, int stop);
Var reshape(Var x, Shape s);
Var detach(Var x);
Var huber(Var x);
Var pow_const(Var x, double c);
Var sigmoid(Var x);
Var add_rowvec(Var x, Var b);
Var take_per_row(Var x, const std::vector<int>& idx, int k);
Var gather_rows(Var x, const std::vector<int>& rows);
Var conv2d(Var x, Var w, Var b, int pad);
Var avg_pool2d(Var x, int k);
Var batch_norm(Var x, Var gamma, Var beta, Parameter* run_mean, Parameter* run_var,
               bool training, double momentum, double eps);
Var roi_pool(Var features, const std::vector<Box>& boxes, int out_size, double cell_px,
             std::vector<char>* degenerate_flags = nullptr);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator/(Var a, Var b) { return divide(a, b); }
inline Var operator-(Var a) { return negate(a); }
Var operator*(Var a, double s);
inline Var operator*(double s, Var a) { return a * s; }

}  // namespace deskdet::ad
