#include "deskdet/tape.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace deskdet::ad {

namespace {

bool is_scalar(const Shape& s) { return shape_numel(s) == 1; }

std::string range_str(const std::vector<double>& v) {
  if (v.empty()) return "[]";
  double lo = v[0], hi = v[0];
  for (double x : v) {
    lo = std::min(lo, x);
    hi = std::max(hi, x);
  }
  std::ostringstream os;
  os << "[" << lo << ", " << hi << "]";
  return os.str();
}

}  // namespace

const char* op_name(OpKind k) {
  switch (k) {
    case OpKind::kLeaf: return "leaf";
    case OpKind::kAdd: return "add";
    case OpKind::kSub: return "sub";
    case OpKind::kMul: return "mul";
    case OpKind::kDiv: return "div";
    case OpKind::kMatmul: return "matmul";
    case OpKind::kRelu: return "relu";
    case OpKind::kExp: return "exp";
    case OpKind::kLog: return "log";
    case OpKind::kNegate: return "negate";
    case OpKind::kSum: return "sum";
    case OpKind::kMean: return "mean";
    case OpKind::kMaxReduce: return "max-reduce";
    case OpKind::kSoftmax: return "softmax";
    case OpKind::kLogSoftmax: return "log-softmax";
    case OpKind::kLogSumExp: return "logsumexp";
    case OpKind::kL2Normalize: return "l2-normalize";
    case OpKind::kClamp: return "clamp";
    case OpKind::kConcatRows: return "concat-rows";
    case OpKind::kSliceRows: return "slice-rows";
    case OpKind::kSliceCols: return "slice-cols";
    case OpKind::kReshape: return "reshape";
    case OpKind::kDetach: return "detach";
    case OpKind::kHuber: return "huber";
    case OpKind::kPowConst: return "pow-const";
    case OpKind::kSigmoid: return "sigmoid";
    case OpKind::kAddRowVec: return "add-rowvec";
    case OpKind::kTakePerRow: return "take-per-row";
    case OpKind::kGatherRows: return "gather-rows";
    case OpKind::kConv2d: return "conv2d";
    case OpKind::kAvgPool2d: return "avg-pool2d";
    case OpKind::kBatchNorm: return "batch-norm";
    case OpKind::kRoiPool: return "roi-pool";
  }
  return "?";
}

Shape Var::shape() const { return tape->node(id).shape; }
Array Var::value() const { return tape->value(*this); }

Var Tape::leaf(Array value, bool requires_grad) {
  Node n;
  n.kind = OpKind::kLeaf;
  n.shape = value.shape;
  n.value = std::move(value.data);
  n.requires_grad = requires_grad;
  check_finite(n);
  nodes_.push_back(std::move(n));
  consumed_ = false;
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::param(Parameter& p) {
  Node n;
  n.kind = OpKind::kLeaf;
  n.shape = p.value.shape;
  n.value = p.value.data;
  n.param = &p;
  n.requires_grad = true;
  check_finite(n);
  nodes_.push_back(std::move(n));
  consumed_ = false;
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::emit(OpKind kind, Shape shape, std::vector<int> inputs, Attrs attrs) {
  Node n;
  n.kind = kind;
  n.shape = std::move(shape);
  n.inputs = std::move(inputs);
  n.attrs = std::move(attrs);
  for (int in : n.inputs) {
    if (in < 0 || in >= static_cast<int>(nodes_.size())) {
      throw TapeError(std::string(op_name(kind)) + ": input node from another tape or out of range");
    }
    if (node(in).requires_grad) n.requires_grad = true;
  }
  if (kind == OpKind::kDetach) n.requires_grad = false;
  n.value.assign(static_cast<std::size_t>(shape_numel(n.shape)), 0.0);
  nodes_.push_back(std::move(n));
  Node& placed = nodes_.back();
  run_forward(placed);
  check_finite(placed);
  consumed_ = false;
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

void Tape::check_finite(const Node& n) const {
  for (double x : n.value) {
    if (!std::isfinite(x)) {
      std::ostringstream os;
      os << "non-finite output of op '" << op_name(n.kind) << "'";
      for (std::size_t k = 0; k < n.inputs.size(); ++k) {
        os << "; input " << k << " range "
           << range_str(nodes_[static_cast<std::size_t>(n.inputs[k])].value);
      }
      throw TapeError(os.str());
    }
  }
}

Array Tape::value(Var v) const {
  const Node& n = node(v.id);
  return Array(n.shape, n.value);
}

Array Tape::grad(Var v) const {
  const Node& n = node(v.id);
  if (n.grad.empty()) return Array::zeros(n.shape);
  return Array(n.shape, n.grad);
}

void Tape::clear() {
  nodes_.clear();
  consumed_ = false;
}

namespace {
void ensure_grad(Tape::Node& n) {
  if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
}
}  // namespace

void Tape::backward(Var loss) {
  if (nodes_.empty()) throw TapeError("backward: empty tape");
  if (loss.tape != this) throw TapeError("backward: loss from another tape");
  if (consumed_) throw TapeError("backward: tape already consumed; run a new forward first");
  Node& ln = node(loss.id);
  if (shape_numel(ln.shape) != 1) {
    throw TapeError("backward: loss must be scalar, got shape " + shape_str(ln.shape));
  }
  ensure_grad(ln);
  ln.grad[0] = 1.0;
  for (int id = loss.id; id >= 0; --id) {
    Node& n = node(id);
    if (!n.requires_grad || n.grad.empty()) continue;
    if (n.kind == OpKind::kLeaf) {
      if (n.param) {
        for (std::size_t i = 0; i < n.grad.size(); ++i) n.param->grad.data[i] += n.grad[i];
      }
      continue;
    }
    run_backward(id);
  }
  consumed_ = true;
}

// ---------------------------------------------------------------------------
// forward
// ---------------------------------------------------------------------------

void Tape::run_forward(Node& n) {
  auto in_val = [&](int k) -> const std::vector<double>& {
    return node(n.inputs[static_cast<std::size_t>(k)]).value;
  };
  auto in_shape = [&](int k) -> const Shape& {
    return node(n.inputs[static_cast<std::size_t>(k)]).shape;
  };

  switch (n.kind) {
    case OpKind::kLeaf:
      break;

    case OpKind::kAdd:
    case OpKind::kSub:
    case OpKind::kMul:
    case OpKind::kDiv: {
      const auto& a = in_val(0);
      const auto& b = in_val(1);
      const bool sa = a.size() == 1, sb = b.size() == 1;
      const std::size_t N = n.value.size();
      for (std::size_t i = 0; i < N; ++i) {
        const double x = sa ? a[0] : a[i];
        const double y = sb ? b[0] : b[i];
        switch (n.kind) {
          case OpKind::kAdd: n.value[i] = x + y; break;
          case OpKind::kSub: n.value[i] = x - y; break;
          case OpKind::kMul: n.value[i] = x * y; break;
          default: n.value[i] = x / y; break;
        }
      }
      break;
    }

    case OpKind::kMatmul: {
      const bool ta = n.attrs.i[0], tb = n.attrs.i[1];
      const int M = n.attrs.i[2], N2 = n.attrs.i[3], K = n.attrs.i[4];
      const auto& a = in_val(0);
      const auto& b = in_val(1);
      for (int m = 0; m < M; ++m) {
        double* out_row = &n.value[static_cast<std::size_t>(m * N2)];
        for (int k = 0; k < K; ++k) {
          const double av = ta ? a[static_cast<std::size_t>(k * M + m)]
                               : a[static_cast<std::size_t>(m * K + k)];
          if (!tb) {
            const double* b_row = &b[static_cast<std::size_t>(k * N2)];
            for (int j = 0; j < N2; ++j) out_row[j] += av * b_row[j];
          } else {
            for (int j = 0; j < N2; ++j)
              out_row[j] += av * b[static_cast<std::size_t>(j * K + k)];
          }
        }
      }
      break;
    }

    case OpKind::kRelu: {
      const auto& a = in_val(0);
      for (std::size_t i = 0; i < a.size(); ++i) n.value[i] = a[i] > 0.0 ? a[i] : 0.0;
      break;
    }
    case OpKind::kExp: {
      const auto& a = in_val(0);
      for (std::size_t i = 0; i < a.size(); ++i) n.value[i] = std::exp(a[i]);
      break;
    }
    case OpKind::kLog: {
      const auto& a = in_val(0);
      for (std::size_t i = 0; i < a.size(); ++i) n.value[i] = std::log(a[i] + kLogEps);
      break;
    }
    case OpKind::kNegate: {
      const auto& a = in_val(0);
      for (std::size_t i = 0; i < a.size(); ++i) n.value[i] = -a[i];
      break;
    }

    case OpKind::kSum: {
      const auto& a = in_val(0);
      if (n.attrs.i[0] == -1) {
        double s = 0.0;
        for (double x : a) s += x;
        n.value[0] = s;
      } else {
        const int rows = in_shape(0)[0], cols = in_shape(0)[1];
        for (int r = 0; r < rows; ++r) {
          double s = 0.0;
          const double* row = &a[static_cast<std::size_t>(r * cols)];
          for (int c = 0; c < cols; ++c) s += row[c];
          n.value[static_cast<std::size_t>(r)] = s;
        }
      }
      break;
    }
    case OpKind::kMean: {
      const auto& a = in_val(0);
      double s = 0.0;
      for (double x : a) s += x;
      n.value[0] = s / static_cast<double>(a.size());
      break;
    }
    case OpKind::kMaxReduce: {
      const auto& a = in_val(0);
      std::size_t best = 0;
      for (std::size_t i = 1; i < a.size(); ++i)
        if (a[i] > a[best]) best = i;
      n.value[0] = a[best];
      n.attrs.i.push_back(static_cast<int>(best));
      break;
    }

    case OpKind::kSoftmax:
    case OpKind::kLogSoftmax:
    case OpKind::kLogSumExp: {
      const auto& a = in_val(0);
      const Shape& s = in_shape(0);
      const int cols = s[static_cast<std::size_t>(s.size() - 1)];
      const int rows = static_cast<int>(a.size()) / cols;
      for (int r = 0; r < rows; ++r) {
        const double* row = &a[static_cast<std::size_t>(r * cols)];
        double m = row[0];
        for (int c = 1; c < cols; ++c) m = std::max(m, row[c]);
        double z = 0.0;
        for (int c = 0; c < cols; ++c) z += std::exp(row[c] - m);
        if (n.kind == OpKind::kLogSumExp) {
          n.value[static_cast<std::size_t>(r)] = m + std::log(z);
        } else if (n.kind == OpKind::kSoftmax) {
          double* out = &n.value[static_cast<std::size_t>(r * cols)];
          for (int c = 0; c < cols; ++c) out[c] = std::exp(row[c] - m) / z;
        } else {
          const double lse = m + std::log(z);
          double* out = &n.value[static_cast<std::size_t>(r * cols)];
          for (int c = 0; c < cols; ++c) out[c] = row[c] - lse;
        }
      }
      break;
    }

    case OpKind::kL2Normalize: {
      const auto& a = in_val(0);
      const Shape& s = in_shape(0);
      const int cols = s[static_cast<std::size_t>(s.size() - 1)];
      const int rows = static_cast<int>(a.size()) / cols;
      n.saved.resize(static_cast<std::size_t>(rows));
      for (int r = 0; r < rows; ++r) {
        const double* row = &a[static_cast<std::size_t>(r * cols)];
        double q = kNormEps;
        for (int c = 0; c < cols; ++c) q += row[c] * row[c];
        const double inv = 1.0 / std::sqrt(q);
        n.saved[static_cast<std::size_t>(r)] = inv;
        double* out = &n.value[static_cast<std::size_t>(r * cols)];
        for (int c = 0; c < cols; ++c) out[c] = row[c] * inv;
      }
      break;
    }

    case OpKind::kClamp: {
      const auto& a = in_val(0);
      const double lo = n.attrs.f[0], hi = n.attrs.f[1];
      for (std::size_t i = 0; i < a.size(); ++i) n.value[i] = std::clamp(a[i], lo, hi);
      break;
    }

    case OpKind::kConcatRows: {
      std::size_t off = 0;
      for (std::size_t k = 0; k < n.inputs.size(); ++k) {
        const auto& a = in_val(static_cast<int>(k));
        std::copy(a.begin(), a.end(), n.value.begin() + static_cast<std::ptrdiff_t>(off));
        off += a.size();
      }
      break;
    }
    case OpKind::kSliceRows: {
      const auto& a = in_val(0);
      const int cols = in_shape(0).size() == 1 ? 1 : in_shape(0)[1];
      const int start = n.attrs.i[0];
      std::copy(a.begin() + static_cast<std::ptrdiff_t>(start * cols),
                a.begin() + static_cast<std::ptrdiff_t>(start * cols) +
                    static_cast<std::ptrdiff_t>(n.value.size()),
                n.value.begin());
      break;
    }
    case OpKind::kSliceCols: {
      const auto& a = in_val(0);
      const int cols = in_shape(0)[1];
      const int start = n.attrs.i[0], stop = n.attrs.i[1];
      const int rows = in_shape(0)[0];
      const int w = stop - start;
      for (int r = 0; r < rows; ++r)
        for (int c = 0; c < w; ++c)
          n.value[static_cast<std::size_t>(r * w + c)] =
              a[static_cast<std::size_t>(r * cols + start + c)];
      break;
    }
    case OpKind::kReshape:
    case OpKind::kDetach: {
      const auto& a = in_val(0);
      std::copy(a.begin(), a.end(), n.value.begin());
      break;
    }

    case OpKind::kHuber: {
      const auto& a = in_val(0);
      for (std::size_t i = 0; i < a.size(); ++i) {
        const double x = a[i];
        n.value[i] = std::abs(x) < 1.0 ? 0.5 * x * x : std::abs(x) - 0.5;
      }
      break;
    }
    case OpKind::kPowConst: {
      const auto& a = in_val(0);
      const double c = n.attrs.f[0];
      for (std::size_t i = 0; i < a.size(); ++i) n.value[i] = std::pow(a[i], c);
      break;
    }
    case OpKind::kSigmoid: {
      const auto& a = in_val(0);
      for (std::size_t i = 0; i < a.size(); ++i) {
        const double x = a[i];
        if (x >= 0.0) {
          n.value[i] = 1.0 / (1.0 + std::exp(-x));
        } else {
          const double e = std::exp(x);
          n.value[i] = e / (1.0 + e);
        }
      }
      break;
    }

    case OpKind::kAddRowVec: {
      const auto& a = in_val(0);
      const auto& b = in_val(1);
      const int cols = static_cast<int>(b.size());
      const int rows = static_cast<int>(a.size()) / cols;
      for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c)
          n.value[static_cast<std::size_t>(r * cols + c)] =
              a[static_cast<std::size_t>(r * cols + c)] + b[static_cast<std::size_t>(c)];
      break;
    }

    case OpKind::kTakePerRow: {
      const auto& a = in_val(0);
      const int cols = in_shape(0)[1];
      const int k = n.attrs.i[0];
      const int rows = in_shape(0)[0];
      for (int r = 0; r < rows; ++r)
        for (int j = 0; j < k; ++j)
          n.value[static_cast<std::size_t>(r * k + j)] =
              a[static_cast<std::size_t>(r * cols + n.attrs.idx[static_cast<std::size_t>(r * k + j)])];
      break;
    }

    case OpKind::kGatherRows: {
      const auto& a = in_val(0);
      const int cols = in_shape(0)[1];
      const int rows = n.shape[0];
      for (int r = 0; r < rows; ++r) {
        const int src = n.attrs.idx[static_cast<std::size_t>(r)];
        std::copy(a.begin() + static_cast<std::ptrdiff_t>(src * cols),
                  a.begin() + static_cast<std::ptrdiff_t>((src + 1) * cols),
                  n.value.begin() + static_cast<std::ptrdiff_t>(r * cols));
      }
      break;
    }

    case OpKind::kConv2d: {
      const auto& x = in_val(0);
      const auto& w = in_val(1);
      const Shape& xs = in_shape(0);
      const Shape& ws = in_shape(1);
      const int H = xs[0], W = xs[1], Ci = xs[2];
      const int K = ws[0], Co = ws[3];
      const int pad = n.attrs.i[0];
      const int Ho = H + 2 * pad - K + 1, Wo = W + 2 * pad - K + 1;
      const bool has_bias = n.inputs.size() == 3;
      for (int y = 0; y < Ho; ++y) {
        for (int xo = 0; xo < Wo; ++xo) {
          double* out = &n.value[static_cast<std::size_t>((y * Wo + xo) * Co)];
          if (has_bias) {
            const auto& b = in_val(2);
            for (int co = 0; co < Co; ++co) out[co] = b[static_cast<std::size_t>(co)];
          }
          for (int dy = 0; dy < K; ++dy) {
            const int iy = y + dy - pad;
            if (iy < 0 || iy >= H) continue;
            for (int dx = 0; dx < K; ++dx) {
              const int ix = xo + dx - pad;
              if (ix < 0 || ix >= W) continue;
              const double* xrow = &x[static_cast<std::size_t>((iy * W + ix) * Ci)];
              const double* wrow = &w[static_cast<std::size_t>(((dy * K + dx) * Ci) * Co)];
              for (int ci = 0; ci < Ci; ++ci) {
                const double v = xrow[ci];
                const double* wk = wrow + static_cast<std::ptrdiff_t>(ci) * Co;
                for (int co = 0; co < Co; ++co) out[co] += v * wk[co];
              }
            }
          }
        }
      }
      break;
    }

    case OpKind::kAvgPool2d: {
      const auto& x = in_val(0);
      const Shape& xs = in_shape(0);
      const int H = xs[0], W = xs[1], C = xs[2];
      const int k = n.attrs.i[0];
      const int Ho = H / k, Wo = W / k;
      const double inv = 1.0 / static_cast<double>(k * k);
      for (int y = 0; y < Ho; ++y) {
        for (int xo = 0; xo < Wo; ++xo) {
          double* out = &n.value[static_cast<std::size_t>((y * Wo + xo) * C)];
          for (int dy = 0; dy < k; ++dy) {
            const double* row = &x[static_cast<std::size_t>(((y * k + dy) * W + xo * k) * C)];
            for (int dx = 0; dx < k; ++dx)
              for (int c = 0; c < C; ++c) out[c] += row[static_cast<std::size_t>(dx * C) + c];
          }
          for (int c = 0; c < C; ++c) out[c] *= inv;
        }
      }
      break;
    }

    case OpKind::kBatchNorm: {
      const auto& x = in_val(0);
      const int B = in_shape(0)[0], D = in_shape(0)[1];
      const bool training = n.attrs.i[0] != 0;
      const bool affine = n.attrs.i[1] != 0;
      const double momentum = n.attrs.f[0], eps = n.attrs.f[1];
      // saved layout: xhat (B*D) followed by inv_std (D)
      n.saved.assign(static_cast<std::size_t>(B * D + D), 0.0);
      double* xhat = n.saved.data();
      double* inv_std = n.saved.data() + static_cast<std::ptrdiff_t>(B) * D;
      for (int d = 0; d < D; ++d) {
        double mu, var;
        if (training) {
          mu = 0.0;
          for (int b = 0; b < B; ++b) mu += x[static_cast<std::size_t>(b * D + d)];
          mu /= B;
          var = 0.0;
          for (int b = 0; b < B; ++b) {
            const double c = x[static_cast<std::size_t>(b * D + d)] - mu;
            var += c * c;
          }
          var /= B;  // population variance, also used for the running buffer
          auto& rm = n.attrs.run_mean->value.data[static_cast<std::size_t>(d)];
          auto& rv = n.attrs.run_var->value.data[static_cast<std::size_t>(d)];
          rm = (1.0 - momentum) * rm + momentum * mu;
          rv = (1.0 - momentum) * rv + momentum * var;
        } else {
          mu = n.attrs.run_mean->value.data[static_cast<std::size_t>(d)];
          var = n.attrs.run_var->value.data[static_cast<std::size_t>(d)];
        }
        const double is = 1.0 / std::sqrt(var + eps);
        inv_std[d] = is;
        const double g = affine ? node(n.inputs[1]).value[static_cast<std::size_t>(d)] : 1.0;
        const double be = affine ? node(n.inputs[2]).value[static_cast<std::size_t>(d)] : 0.0;
        for (int b = 0; b < B; ++b) {
          const double xh = (x[static_cast<std::size_t>(b * D + d)] - mu) * is;
          xhat[static_cast<std::size_t>(b * D + d)] = xh;
          n.value[static_cast<std::size_t>(b * D + d)] = g * xh + be;
        }
      }
      break;
    }

    case OpKind::kRoiPool: {
      const auto& x = in_val(0);
      const Shape& xs = in_shape(0);
      const int W = xs[1], C = xs[2];
      const int S = n.attrs.i[0];
      const int nboxes = n.shape[0];
      for (int b = 0; b < nboxes; ++b) {
        for (int cell = 0; cell < S * S; ++cell) {
          const int src = n.attrs.idx[static_cast<std::size_t>(b * S * S + cell)];
          const double* in = &x[static_cast<std::size_t>(src * C)];
          double* out = &n.value[static_cast<std::size_t>((b * S * S + cell) * C)];
          std::copy(in, in + C, out);
          (void)W;
        }
      }
      break;
    }
  }
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

void Tape::run_backward(int id) {
  Node& n = node(id);
  const std::vector<double>& g = n.grad;

  auto input_node = [&](int k) -> Node& { return node(n.inputs[static_cast<std::size_t>(k)]); };
  auto want = [&](int k) -> bool { return input_node(k).requires_grad; };
  auto gbuf = [&](int k) -> std::vector<double>& {
    Node& in = input_node(k);
    ensure_grad(in);
    return in.grad;
  };

  switch (n.kind) {
    case OpKind::kLeaf:
      break;

    case OpKind::kAdd:
    case OpKind::kSub: {
      const double sign = n.kind == OpKind::kSub ? -1.0 : 1.0;
      for (int k = 0; k < 2; ++k) {
        if (!want(k)) continue;
        auto& dst = gbuf(k);
        const double s = k == 0 ? 1.0 : sign;
        if (dst.size() == 1 && g.size() > 1) {
          double acc = 0.0;
          for (double gv : g) acc += gv;
          dst[0] += s * acc;
        } else {
          for (std::size_t i = 0; i < g.size(); ++i) dst[i] += s * g[i];
        }
      }
      break;
    }
    case OpKind::kMul:
    case OpKind::kDiv: {
      const auto& a = input_node(0).value;
      const auto& b = input_node(1).value;
      const bool sa = a.size() == 1, sb = b.size() == 1;
      const std::size_t N = g.size();
      if (want(0)) {
        auto& da = gbuf(0);
        for (std::size_t i = 0; i < N; ++i) {
          const double y = sb ? b[0] : b[i];
          const double v = n.kind == OpKind::kMul ? g[i] * y : g[i] / y;
          if (sa) da[0] += v; else da[i] += v;
        }
      }
      if (want(1)) {
        auto& db = gbuf(1);
        for (std::size_t i = 0; i < N; ++i) {
          const double x = sa ? a[0] : a[i];
          const double y = sb ? b[0] : b[i];
          const double v = n.kind == OpKind::kMul ? g[i] * x : -g[i] * x / (y * y);
          if (sb) db[0] += v; else db[i] += v;
        }
      }
      break;
    }

    case OpKind::kMatmul: {
      const bool ta = n.attrs.i[0], tb = n.attrs.i[1];
      const int M = n.attrs.i[2], N2 = n.attrs.i[3], K = n.attrs.i[4];
      const auto& a = input_node(0).value;
      const auto& b = input_node(1).value;
      if (want(0)) {
        auto& da = gbuf(0);
        // dA_logical[m,k] = sum_n g[m,n] * B_logical[k,n]
        for (int m = 0; m < M; ++m) {
          const double* grow = &g[static_cast<std::size_t>(m * N2)];
          for (int k = 0; k < K; ++k) {
            double acc = 0.0;
            if (!tb) {
              const double* brow = &b[static_cast<std::size_t>(k * N2)];
              for (int j = 0; j < N2; ++j) acc += grow[j] * brow[j];
            } else {
              for (int j = 0; j < N2; ++j) acc += grow[j] * b[static_cast<std::size_t>(j * K + k)];
            }
            if (!ta) da[static_cast<std::size_t>(m * K + k)] += acc;
            else da[static_cast<std::size_t>(k * M + m)] += acc;
          }
        }
      }
      if (want(1)) {
        auto& db = gbuf(1);
        // dB_logical[k,n] = sum_m A_logical[m,k] * g[m,n]
        for (int m = 0; m < M; ++m) {
          const double* grow = &g[static_cast<std::size_t>(m * N2)];
          for (int k = 0; k < K; ++k) {
            const double av = ta ? a[static_cast<std::size_t>(k * M + m)]
                                 : a[static_cast<std::size_t>(m * K + k)];
            if (!tb) {
              double* brow = &db[static_cast<std::size_t>(k * N2)];
              for (int j = 0; j < N2; ++j) brow[j] += av * grow[j];
            } else {
              for (int j = 0; j < N2; ++j)
                db[static_cast<std::size_t>(j * K + k)] += av * grow[j];
            }
          }
        }
      }
      break;
    }

    case OpKind::kRelu: {
      if (!want(0)) break;
      const auto& a = input_node(0).value;
      auto& da = gbuf(0);
      for (std::size_t i = 0; i < g.size(); ++i)
        if (a[i] > 0.0) da[i] += g[i];
      break;
    }
    case OpKind::kExp: {
      if (!want(0)) break;
      auto& da = gbuf(0);
      for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * n.value[i];
      break;
    }
    case OpKind::kLog: {
      if (!want(0)) break;
      const auto& a = input_node(0).value;
      auto& da = gbuf(0);
      for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] / (a[i] + kLogEps);
      break;
    }
    case OpKind::kNegate: {
      if (!want(0)) break;
      auto& da = gbuf(0);
      for (std::size_t i = 0; i < g.size(); ++i) da[i] -= g[i];
      break;
    }

    case OpKind::kSum: {
      if (!want(0)) break;
      auto& da = gbuf(0);
      if (n.attrs.i[0] == -1) {
        for (std::size_t i = 0; i < da.size(); ++i) da[i] += g[0];
      } else {
        const int rows = input_node(0).shape[0], cols = input_node(0).shape[1];
        for (int r = 0; r < rows; ++r)
          for (int c = 0; c < cols; ++c)
            da[static_cast<std::size_t>(r * cols + c)] += g[static_cast<std::size_t>(r)];
      }
      break;
    }
    case OpKind::kMean: {
      if (!want(0)) break;
      auto& da = gbuf(0);
      const double s = g[0] / static_cast<double>(da.size());
      for (std::size_t i = 0; i < da.size(); ++i) da[i] += s;
      break;
    }
    case OpKind::kMaxReduce: {
      if (!want(0)) break;
      auto& da = gbuf(0);
      da[static_cast<std::size_t>(n.attrs.i.back())] += g[0];
      break;
    }

    case OpKind::kSoftmax: {
      if (!want(0)) break;
      auto& da = gbuf(0);
      const int cols = n.shape[static_cast<std::size_t>(n.shape.size() - 1)];
      const int rows = static_cast<int>(n.value.size()) / cols;
      for (int r = 0; r < rows; ++r) {
        const double* y = &n.value[static_cast<std::size_t>(r * cols)];
        const double* gr = &g[static_cast<std::size_t>(r * cols)];
        double dot = 0.0;
        for (int c = 0; c < cols; ++c) dot += gr[c] * y[c];
        double* dst = &da[static_cast<std::size_t>(r * cols)];
        for (int c = 0; c < cols; ++c) dst[c] += y[c] * (gr[c] - dot);
      }
      break;
    }
    case OpKind::kLogSoftmax: {
      if (!want(0)) break;
      auto& da = gbuf(0);
      const int cols = n.shape[static_cast<std::size_t>(n.shape.size() - 1)];
      const int rows = static_cast<int>(n.value.size()) / cols;
      for (int r = 0; r < rows; ++r) {
        const double* y = &n.value[static_cast<std::size_t>(r * cols)];
        const double* gr = &g[static_cast<std::size_t>(r * cols)];
        double gsum = 0.0;
        for (int c = 0; c < cols; ++c) gsum += gr[c];
        double* dst = &da[static_cast<std::size_t>(r * cols)];
        for (int c = 0; c < cols; ++c) dst[c] += gr[c] - std::exp(y[c]) * gsum;
      }
      break;
    }
    case OpKind::kLogSumExp: {
      if (!want(0)) break;
      const auto& a = input_node(0).value;
      auto& da = gbuf(0);
      const int cols = input_node(0).shape[1];
      const int rows = input_node(0).shape[0];
      for (int r = 0; r < rows; ++r) {
        const double lse = n.value[static_cast<std::size_t>(r)];
        const double gr = g[static_cast<std::size_t>(r)];
        const double* row = &a[static_cast<std::size_t>(r * cols)];
        double* dst = &da[static_cast<std::size_t>(r * cols)];
        for (int c = 0; c < cols; ++c) dst[c] += gr * std::exp(row[c] - lse);
      }
      break;
    }

    case OpKind::kL2Normalize: {
      if (!want(0)) break;
      const auto& a = input_node(0).value;
      auto& da = gbuf(0);
      const Shape& s = input_node(0).shape;
      const int cols = s[static_cast<std::size_t>(s.size() - 1)];
      const int rows = static_cast<int>(a.size()) / cols;
      for (int r = 0; r < rows; ++r) {
        const double inv = n.saved[static_cast<std::size_t>(r)];
        const double* row = &a[static_cast<std::size_t>(r * cols)];
        const double* gr = &g[static_cast<std::size_t>(r * cols)];
        double dot = 0.0;
        for (int c = 0; c < cols; ++c) dot += row[c] * gr[c];
        const double inv3 = inv * inv * inv;
        double* dst = &da[static_cast<std::size_t>(r * cols)];
        for (int c = 0; c < cols; ++c) dst[c] += inv * gr[c] - inv3 * dot * row[c];
      }
      break;
    }

    case OpKind::kClamp: {
      if (!want(0)) break;
      const auto& a = input_node(0).value;
      auto& da = gbuf(0);
      const double lo = n.attrs.f[0], hi = n.attrs.f[1];
      for (std::size_t i = 0; i < g.size(); ++i)
        if (a[i] >= lo && a[i] <= hi) da[i] += g[i];
      break;
    }

    case OpKind::kConcatRows: {
      std::size_t off = 0;
      for (std::size_t k = 0; k < n.inputs.size(); ++k) {
        Node& in = node(n.inputs[k]);
        const std::size_t len = in.value.size();
        if (in.requires_grad) {
          ensure_grad(in);
          for (std::size_t i = 0; i < len; ++i) in.grad[i] += g[off + i];
        }
        off += len;
      }
      break;
    }
    case OpKind::kSliceRows: {
      if (!want(0)) break;
      auto& da = gbuf(0);
      const int cols = input_node(0).shape.size() == 1 ? 1 : input_node(0).shape[1];
      const int start = n.attrs.i[0];
      for (std::size_t i = 0; i < g.size(); ++i)
        da[static_cast<std::size_t>(start * cols) + i] += g[i];
      break;
    }
    case OpKind::kSliceCols: {
      if (!want(0)) break;
      auto& da = gbuf(0);
      const int cols = input_node(0).shape[1];
      const int start = n.attrs.i[0], stop = n.attrs.i[1];
      const int rows = input_node(0).shape[0];
      const int w = stop - start;
      for (int r = 0; r < rows; ++r)
        for (int c = 0; c < w; ++c)
          da[static_cast<std::size_t>(r * cols + start + c)] +=
              g[static_cast<std::size_t>(r * w + c)];
      break;
    }
    case OpKind::kReshape: {
      if (!want(0)) break;
      auto& da = gbuf(0);
      for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i];
      break;
    }
    case OpKind::kDetach:
      break;

    case OpKind::kHuber: {
      if (!want(0)) break;
      const auto& a = input_node(0).value;
      auto& da = gbuf(0);
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double x = a[i];
        da[i] += g[i] * (std::abs(x) < 1.0 ? x : (x > 0.0 ? 1.0 : -1.0));
      }
      break;
    }
    case OpKind::kPowConst: {
      if (!want(0)) break;
      const double c = n.attrs.f[0];
      if (c == 0.0) break;
      const auto& a = input_node(0).value;
      auto& da = gbuf(0);
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (c == 1.0) da[i] += g[i];
        else if (c == 2.0) da[i] += g[i] * 2.0 * a[i];
        else da[i] += g[i] * c * std::pow(a[i], c - 1.0);
      }
      break;
    }
    case OpKind::kSigmoid: {
      if (!want(0)) break;
      auto& da = gbuf(0);
      for (std::size_t i = 0; i < g.size(); ++i)
        da[i] += g[i] * n.value[i] * (1.0 - n.value[i]);
      break;
    }

    case OpKind::kAddRowVec: {
      const int cols = static_cast<int>(input_node(1).value.size());
      const int rows = static_cast<int>(g.size()) / cols;
      if (want(0)) {
        auto& da = gbuf(0);
        for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i];
      }
      if (want(1)) {
        auto& db = gbuf(1);
        for (int r = 0; r < rows; ++r)
          for (int c = 0; c < cols; ++c)
            db[static_cast<std::size_t>(c)] += g[static_cast<std::size_t>(r * cols + c)];
      }
      break;
    }

    case OpKind::kTakePerRow: {
      if (!want(0)) break;
      auto& da = gbuf(0);
      const int cols = input_node(0).shape[1];
      const int k = n.attrs.i[0];
      const int rows = input_node(0).shape[0];
      for (int r = 0; r < rows; ++r)
        for (int j = 0; j < k; ++j)
          da[static_cast<std::size_t>(r * cols + n.attrs.idx[static_cast<std::size_t>(r * k + j)])] +=
              g[static_cast<std::size_t>(r * k + j)];
      break;
    }

    case OpKind::kGatherRows: {
      if (!want(0)) break;
      auto& da = gbuf(0);
      const int cols = input_node(0).shape[1];
      const int rows = n.shape[0];
      for (int r = 0; r < rows; ++r) {
        const int src = n.attrs.idx[static_cast<std::size_t>(r)];
        for (int c = 0; c < cols; ++c)
          da[static_cast<std::size_t>(src * cols + c)] += g[static_cast<std::size_t>(r * cols + c)];
      }
      break;
    }

    case OpKind::kConv2d: {
      const auto& x = input_node(0).value;
      const auto& w = input_node(1).value;
      const Shape& xs = input_node(0).shape;
      const Shape& ws = input_node(1).shape;
      const int H = xs[0], W = xs[1], Ci = xs[2];
      const int K = ws[0], Co = ws[3];
      const int pad = n.attrs.i[0];
      const int Ho = H + 2 * pad - K + 1, Wo = W + 2 * pad - K + 1;
      const bool wx = want(0), ww = want(1);
      const bool wb = n.inputs.size() == 3 && want(2);
      std::vector<double>* dx = wx ? &gbuf(0) : nullptr;
      std::vector<double>* dw = ww ? &gbuf(1) : nullptr;
      if (wb) {
        auto& db = gbuf(2);
        for (int y = 0; y < Ho; ++y)
          for (int xo = 0; xo < Wo; ++xo) {
            const double* gr = &g[static_cast<std::size_t>((y * Wo + xo) * Co)];
            for (int co = 0; co < Co; ++co) db[static_cast<std::size_t>(co)] += gr[co];
          }
      }
      if (!wx && !ww) break;
      for (int y = 0; y < Ho; ++y) {
        for (int xo = 0; xo < Wo; ++xo) {
          const double* gr = &g[static_cast<std::size_t>((y * Wo + xo) * Co)];
          for (int dy = 0; dy < K; ++dy) {
            const int iy = y + dy - pad;
            if (iy < 0 || iy >= H) continue;
            for (int dxk = 0; dxk < K; ++dxk) {
              const int ix = xo + dxk - pad;
              if (ix < 0 || ix >= W) continue;
              const std::size_t xoff = static_cast<std::size_t>((iy * W + ix) * Ci);
              const std::size_t woff = static_cast<std::size_t>(((dy * K + dxk) * Ci) * Co);
              for (int ci = 0; ci < Ci; ++ci) {
                const double* wk = &w[woff + static_cast<std::size_t>(ci) * Co];
                if (wx) {
                  double acc = 0.0;
                  for (int co = 0; co < Co; ++co) acc += wk[co] * gr[co];
                  (*dx)[xoff + static_cast<std::size_t>(ci)] += acc;
                }
                if (ww) {
                  const double v = x[xoff + static_cast<std::size_t>(ci)];
                  double* dwk = &(*dw)[woff + static_cast<std::size_t>(ci) * Co];
                  for (int co = 0; co < Co; ++co) dwk[co] += v * gr[co];
                }
              }
            }
          }
        }
      }
      break;
    }

    case OpKind::kAvgPool2d: {
      if (!want(0)) break;
      auto& da = gbuf(0);
      const Shape& xs = input_node(0).shape;
      const int W = xs[1], C = xs[2];
      const int k = n.attrs.i[0];
      const int Ho = n.shape[0], Wo = n.shape[1];
      const double inv = 1.0 / static_cast<double>(k * k);
      for (int y = 0; y < Ho; ++y)
        for (int xo = 0; xo < Wo; ++xo) {
          const double* gr = &g[static_cast<std::size_t>((y * Wo + xo) * C)];
          for (int dy = 0; dy < k; ++dy)
            for (int dx = 0; dx < k; ++dx) {
              double* dst = &da[static_cast<std::size_t>((((y * k + dy) * W) + xo * k + dx) * C)];
              for (int c = 0; c < C; ++c) dst[c] += gr[c] * inv;
            }
        }
      break;
    }

    case OpKind::kBatchNorm: {
      const int B = input_node(0).shape[0], D = input_node(0).shape[1];
      const bool training = n.attrs.i[0] != 0;
      const bool affine = n.attrs.i[1] != 0;
      const double* xhat = n.saved.data();
      const double* inv_std = n.saved.data() + static_cast<std::ptrdiff_t>(B) * D;
      if (affine) {
        if (want(1)) {
          auto& dg = gbuf(1);
          for (int d = 0; d < D; ++d) {
            double acc = 0.0;
            for (int b = 0; b < B; ++b)
              acc += g[static_cast<std::size_t>(b * D + d)] * xhat[static_cast<std::size_t>(b * D + d)];
            dg[static_cast<std::size_t>(d)] += acc;
          }
        }
        if (want(2)) {
          auto& db = gbuf(2);
          for (int d = 0; d < D; ++d) {
            double acc = 0.0;
            for (int b = 0; b < B; ++b) acc += g[static_cast<std::size_t>(b * D + d)];
            db[static_cast<std::size_t>(d)] += acc;
          }
        }
      }
      if (!want(0)) break;
      auto& dx = gbuf(0);
      for (int d = 0; d < D; ++d) {
        const double gam = affine ? node(n.inputs[1]).value[static_cast<std::size_t>(d)] : 1.0;
        const double is = inv_std[d];
        if (!training) {
          for (int b = 0; b < B; ++b)
            dx[static_cast<std::size_t>(b * D + d)] +=
                g[static_cast<std::size_t>(b * D + d)] * gam * is;
          continue;
        }
        double sg = 0.0, sgx = 0.0;
        for (int b = 0; b < B; ++b) {
          const double gh = g[static_cast<std::size_t>(b * D + d)] * gam;
          sg += gh;
          sgx += gh * xhat[static_cast<std::size_t>(b * D + d)];
        }
        const double invB = 1.0 / static_cast<double>(B);
        for (int b = 0; b < B; ++b) {
          const double gh = g[static_cast<std::size_t>(b * D + d)] * gam;
          dx[static_cast<std::size_t>(b * D + d)] +=
              is * (gh - sg * invB - xhat[static_cast<std::size_t>(b * D + d)] * sgx * invB);
        }
      }
      break;
    }

    case OpKind::kRoiPool: {
      if (!want(0)) break;
      auto& da = gbuf(0);
      const int C = input_node(0).shape[2];
      const int S = n.attrs.i[0];
      const int nboxes = n.shape[0];
      for (int b = 0; b < nboxes; ++b)
        for (int cell = 0; cell < S * S; ++cell) {
          const int src = n.attrs.idx[static_cast<std::size_t>(b * S * S + cell)];
          const double* gr = &g[static_cast<std::size_t>((b * S * S + cell) * C)];
          double* dst = &da[static_cast<std::size_t>(src * C)];
          for (int c = 0; c < C; ++c) dst[c] += gr[c];
        }
      break;
    }
  }
}

// ---------------------------------------------------------------------------
// op builders
// ---------------------------------------------------------------------------

namespace {

Tape* common_tape(Var a, Var b) {
  if (!a.defined() || !b.defined()) throw TapeError("op on undefined Var");
  if (a.tape != b.tape) throw TapeError("op on Vars from different tapes");
  return a.tape;
}

Shape broadcast_shape(const char* op, const Shape& a, const Shape& b) {
  if (shape_numel(a) == 1) return b;
  if (shape_numel(b) == 1) return a;
  if (!same_shape(a, b)) {
    throw TapeError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " +
                    shape_str(b) + " (only scalar-with-tensor broadcast is supported)");
  }
  return a;
}

Var elementwise2(OpKind k, Var a, Var b) {
  Tape* t = common_tape(a, b);
  Shape s = broadcast_shape(op_name(k), a.shape(), b.shape());
  return t->emit(k, std::move(s), {a.id, b.id}, {});
}

Var elementwise1(OpKind k, Var a, Tape::Attrs attrs = {}) {
  if (!a.defined()) throw TapeError("op on undefined Var");
  return a.tape->emit(k, a.shape(), {a.id}, std::move(attrs));
}

}  // namespace

Var add(Var a, Var b) { return elementwise2(OpKind::kAdd, a, b); }
Var sub(Var a, Var b) { return elementwise2(OpKind::kSub, a, b); }
Var mul(Var a, Var b) { return elementwise2(OpKind::kMul, a, b); }
Var divide(Var a, Var b) { return elementwise2(OpKind::kDiv, a, b); }

Var operator*(Var a, double s) { return mul(a, a.tape->constant(s)); }

Var matmul(Var a, Var b, bool trans_a, bool trans_b) {
  Tape* t = common_tape(a, b);
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() != 2 || sb.size() != 2) {
    throw TapeError("matmul: expects 2-D inputs, got " + shape_str(sa) + " and " + shape_str(sb));
  }
  const int M = trans_a ? sa[1] : sa[0];
  const int K = trans_a ? sa[0] : sa[1];
  const int Kb = trans_b ? sb[1] : sb[0];
  const int N = trans_b ? sb[0] : sb[1];
  if (K != Kb) {
    throw TapeError("matmul: inner dims disagree, " + shape_str(sa) + " x " + shape_str(sb));
  }
  Tape::Attrs at;
  at.i = {trans_a ? 1 : 0, trans_b ? 1 : 0, M, N, K};
  return t->emit(OpKind::kMatmul, {M, N}, {a.id, b.id}, std::move(at));
}

Var relu(Var x) { return elementwise1(OpKind::kRelu, x); }
Var exp(Var x) { return elementwise1(OpKind::kExp, x); }
Var log(Var x) { return elementwise1(OpKind::kLog, x); }
Var negate(Var x) { return elementwise1(OpKind::kNegate, x); }

Var sum(Var x, int axis) {
  if (!x.defined()) throw TapeError("sum: undefined Var");
  Tape::Attrs at;
  if (axis == -1) {
    at.i = {-1};
    return x.tape->emit(OpKind::kSum, {1}, {x.id}, std::move(at));
  }
  const Shape& s = x.shape();
  if (s.size() != 2 || axis != 1) {
    throw TapeError("sum: only full reduction or the last axis of a 2-D input");
  }
  at.i = {1};
  return x.tape->emit(OpKind::kSum, {s[0]}, {x.id}, std::move(at));
}

Var mean(Var x) { return x.tape->emit(OpKind::kMean, {1}, {x.id}, {}); }
Var max_reduce(Var x) { return x.tape->emit(OpKind::kMaxReduce, {1}, {x.id}, {}); }

Var softmax(Var x) { return elementwise1(OpKind::kSoftmax, x); }
Var log_softmax(Var x) { return elementwise1(OpKind::kLogSoftmax, x); }

Var logsumexp_rows(Var x) {
  const Shape& s = x.shape();
  if (s.size() == 1) return x.tape->emit(OpKind::kLogSumExp, {1}, {x.id}, {});
  if (s.size() != 2) throw TapeError("logsumexp: expects 1-D or 2-D input");
  return x.tape->emit(OpKind::kLogSumExp, {s[0]}, {x.id}, {});
}

Var l2_normalize_rows(Var x) { return elementwise1(OpKind::kL2Normalize, x); }

Var clamp(Var x, double lo, double hi) {
  Tape::Attrs at;
  at.f = {lo, hi};
  return elementwise1(OpKind::kClamp, x, std::move(at));
}

Var concat_rows(const std::vector<Var>& xs) {
  if (xs.empty()) throw TapeError("concat-rows: no inputs");
  if (xs.size() == 1) return xs[0];
  Tape* t = xs[0].tape;
  const int cols = xs[0].shape().size() == 2 ? xs[0].shape()[1] : -1;
  int rows = 0;
  std::vector<int> ids;
  for (Var v : xs) {
    if (v.tape != t) throw TapeError("concat-rows: inputs from different tapes");
    const Shape& s = v.shape();
    if (s.size() != 2 || s[1] != cols) {
      throw TapeError("concat-rows: expects 2-D inputs with equal column counts");
    }
    rows += s[0];
    ids.push_back(v.id);
  }
  return t->emit(OpKind::kConcatRows, {rows, cols}, std::move(ids), {});
}

Var slice_rows(Var x, int start, int stop) {
  const Shape& s = x.shape();
  const int rows = s[0];
  if (start < 0 || stop > rows || start >= stop) {
    throw TapeError("slice-rows: bad range [" + std::to_string(start) + "," +
                    std::to_string(stop) + ") for " + shape_str(s));
  }
  Tape::Attrs at;
  at.i = {start, stop};
  Shape out = s;
  out[0] = stop - start;
  return x.tape->emit(OpKind::kSliceRows, std::move(out), {x.id}, std::move(at));
}

Var slice_cols(Var x, int start, int stop) {
  const Shape& s = x.shape();
  if (s.size() != 2) throw TapeError("slice-cols: expects a 2-D input");
  if (start < 0 || stop > s[1] || start >= stop) {
    throw TapeError("slice-cols: bad range [" + std::to_string(start) + "," +
                    std::to_string(stop) + ") for " + shape_str(s));
  }
  Tape::Attrs at;
  at.i = {start, stop};
  return x.tape->emit(OpKind::kSliceCols, {s[0], stop - start}, {x.id}, std::move(at));
}

Var reshape(Var x, Shape s) {
  if (shape_numel(s) != shape_numel(x.shape())) {
    throw TapeError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(s) +
                    " changes element count");
  }
  return x.tape->emit(OpKind::kReshape, std::move(s), {x.id}, {});
}

Var detach(Var x) { return elementwise1(OpKind::kDetach, x); }
Var huber(Var x) { return elementwise1(OpKind::kHuber, x); }

Var pow_const(Var x, double c) {
  Tape::Attrs at;
  at.f = {c};
  return elementwise1(OpKind::kPowConst, x, std::move(at));
}

Var sigmoid(Var x) { return elementwise1(OpKind::kSigmoid, x); }

Var add_rowvec(Var x, Var b) {
  Tape* t = common_tape(x, b);
  const Shape& sx = x.shape();
  const Shape& sb = b.shape();
  if (sx.size() != 2 || sb.size() != 1 || sb[0] != sx[1]) {
    throw TapeError("add-rowvec: need BxD and D, got " + shape_str(sx) + " and " + shape_str(sb));
  }
  return t->emit(OpKind::kAddRowVec, sx, {x.id, b.id}, {});
}

Var take_per_row(Var x, const std::vector<int>& idx, int k) {
  const Shape& s = x.shape();
  if (s.size() != 2) throw TapeError("take-per-row: expects 2-D input");
  if (static_cast<int>(idx.size()) != s[0] * k) {
    throw TapeError("take-per-row: index count " + std::to_string(idx.size()) +
                    " != rows*k = " + std::to_string(s[0] * k));
  }
  for (int j : idx) {
    if (j < 0 || j >= s[1]) {
      throw TapeError("take-per-row: column index " + std::to_string(j) + " out of range [0," +
                      std::to_string(s[1]) + ")");
    }
  }
  Tape::Attrs at;
  at.i = {k};
  at.idx = idx;
  return x.tape->emit(OpKind::kTakePerRow, {s[0], k}, {x.id}, std::move(at));
}

Var gather_rows(Var x, const std::vector<int>& rows) {
  const Shape& s = x.shape();
  if (s.size() != 2) throw TapeError("gather-rows: expects 2-D input");
  if (rows.empty()) throw TapeError("gather-rows: empty row list");
  for (int r : rows) {
    if (r < 0 || r >= s[0]) {
      throw TapeError("gather-rows: row " + std::to_string(r) + " out of range [0," +
                      std::to_string(s[0]) + ")");
    }
  }
  Tape::Attrs at;
  at.idx = rows;
  return x.tape->emit(OpKind::kGatherRows, {static_cast<int>(rows.size()), s[1]}, {x.id},
                      std::move(at));
}

Var conv2d(Var x, Var w, Var b, int pad) {
  Tape* t = common_tape(x, w);
  const Shape& sx = x.shape();
  const Shape& sw = w.shape();
  if (sx.size() != 3 || sw.size() != 4) {
    throw TapeError("conv2d: need HxWxCi input and KxKxCixCo kernel");
  }
  if (sw[0] != sw[1]) throw TapeError("conv2d: kernel must be square");
  if (sw[2] != sx[2]) {
    throw TapeError("conv2d: channel mismatch, input " + shape_str(sx) + " kernel " +
                    shape_str(sw));
  }
  const int Ho = sx[0] + 2 * pad - sw[0] + 1;
  const int Wo = sx[1] + 2 * pad - sw[0] + 1;
  if (Ho <= 0 || Wo <= 0) throw TapeError("conv2d: kernel larger than padded input");
  std::vector<int> ids{x.id, w.id};
  if (b.defined()) {
    if (b.shape().size() != 1 || b.shape()[0] != sw[3]) {
      throw TapeError("conv2d: bias shape " + shape_str(b.shape()) + " != Co");
    }
    ids.push_back(b.id);
  }
  Tape::Attrs at;
  at.i = {pad};
  return t->emit(OpKind::kConv2d, {Ho, Wo, sw[3]}, std::move(ids), std::move(at));
}

Var avg_pool2d(Var x, int k) {
  const Shape& s = x.shape();
  if (s.size() != 3) throw TapeError("avg-pool2d: expects HxWxC input");
  if (s[0] % k != 0 || s[1] % k != 0) {
    throw TapeError("avg-pool2d: kernel " + std::to_string(k) + " does not divide " +
                    shape_str(s));
  }
  Tape::Attrs at;
  at.i = {k};
  return x.tape->emit(OpKind::kAvgPool2d, {s[0] / k, s[1] / k, s[2]}, {x.id}, std::move(at));
}

Var batch_norm(Var x, Var gamma, Var beta, Parameter* run_mean, Parameter* run_var,
               bool training, double momentum, double eps) {
  const Shape& s = x.shape();
  if (s.size() != 2) throw TapeError("batch-norm: expects BxD input");
  if (!run_mean || !run_var) throw TapeError("batch-norm: running stat buffers required");
  const bool affine = gamma.defined();
  if (affine != beta.defined()) throw TapeError("batch-norm: gamma and beta must come together");
  std::vector<int> ids{x.id};
  if (affine) {
    if (gamma.shape() != Shape{s[1]} || beta.shape() != Shape{s[1]}) {
      throw TapeError("batch-norm: affine params must have shape [D]");
    }
    ids.push_back(gamma.id);
    ids.push_back(beta.id);
  }
  Tape::Attrs at;
  at.i = {training ? 1 : 0, affine ? 1 : 0};
  at.f = {momentum, eps};
  at.run_mean = run_mean;
  at.run_var = run_var;
  return x.tape->emit(OpKind::kBatchNorm, s, std::move(ids), std::move(at));
}

Var roi_pool(Var features, const std::vector<Box>& boxes, int out_size, double cell_px,
             std::vector<char>* degenerate_flags) {
  const Shape& s = features.shape();
  if (s.size() != 3) throw TapeError("roi-pool: expects HxWxC features");
  if (boxes.empty()) throw TapeError("roi-pool: empty box list");
  const int H = s[0], W = s[1], C = s[2];
  const int nb = static_cast<int>(boxes.size());
  Tape::Attrs at;
  at.i = {out_size};
  at.idx.resize(static_cast<std::size_t>(nb * out_size * out_size));
  if (degenerate_flags) degenerate_flags->assign(static_cast<std::size_t>(nb), 0);
  for (int b = 0; b < nb; ++b) {
    const Box& bx = boxes[static_cast<std::size_t>(b)];
    if (degenerate_flags && bx.area() < cell_px * cell_px) {
      (*degenerate_flags)[static_cast<std::size_t>(b)] = 1;
    }
    for (int i = 0; i < out_size; ++i) {
      const double sy = bx.y1 + (i + 0.5) * bx.height() / out_size;
      const int iy = std::clamp(static_cast<int>(std::floor(sy / cell_px)), 0, H - 1);
      for (int j = 0; j < out_size; ++j) {
        const double sx = bx.x1 + (j + 0.5) * bx.width() / out_size;
        const int ix = std::clamp(static_cast<int>(std::floor(sx / cell_px)), 0, W - 1);
        at.idx[static_cast<std::size_t>((b * out_size + i) * out_size + j)] = iy * W + ix;
      }
    }
  }
  return features.tape->emit(OpKind::kRoiPool, {nb, out_size, out_size, C}, {features.id},
                             std::move(at));
}

}  // namespace deskdet::ad
