#include "dvt/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>

namespace dvt {

namespace {

constexpr double kGeluC0 = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluC1 = 0.044715;

std::uint64_t g_macs = 0;

Tape* g_active_tape = nullptr;

[[noreturn]] void shape_fail(const std::string& msg) { throw ShapeError(msg); }

void check_finite(const char* op, const std::vector<double>& v) {
  for (double x : v) {
    if (!std::isfinite(x)) {
      throw NumericError(std::string(op) + ": non-finite value in output");
    }
  }
}

int normalize_axis(int axis, int nd) {
  if (axis < 0) axis += nd;
  if (axis < 0 || axis >= nd) shape_fail("axis out of range");
  return axis;
}

std::int64_t prod(const Shape& s, int from, int to) {
  std::int64_t p = 1;
  for (int i = from; i < to; ++i) p *= s[i];
  return p;
}

// ---- matmul kernels ----------------------------------------------------------
// Loop orders are fixed so that each output element accumulates its k-terms in
// the same sequence regardless of how many rows the call covers; adaptive
// inference on a gathered row subset then reproduces full-batch results bit for
// bit. Keep these kernels free of row-count-dependent blocking.

// c[m,n] = a[m,k] * b[k,n]
void kernel_nn(const double* a, const double* b, double* c, int m, int k, int n) {
  g_macs += static_cast<std::uint64_t>(m) * k * n;
  std::fill(c, c + static_cast<std::size_t>(m) * n, 0.0);
#pragma omp parallel for schedule(static) if (static_cast<std::int64_t>(m) * k * n > 262144)
  for (int i = 0; i < m; ++i) {
    double* crow = c + static_cast<std::size_t>(i) * n;
    const double* arow = a + static_cast<std::size_t>(i) * k;
    for (int p = 0; p < k; ++p) {
      const double av = arow[p];
      const double* brow = b + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// c[m,n] = a[m,k] * b[n,k]^T
void kernel_nt(const double* a, const double* b, double* c, int m, int k, int n) {
  g_macs += static_cast<std::uint64_t>(m) * k * n;
#pragma omp parallel for schedule(static) if (static_cast<std::int64_t>(m) * k * n > 262144)
  for (int i = 0; i < m; ++i) {
    const double* arow = a + static_cast<std::size_t>(i) * k;
    double* crow = c + static_cast<std::size_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const double* brow = b + static_cast<std::size_t>(j) * k;
      double s = 0.0;
      for (int p = 0; p < k; ++p) s += arow[p] * brow[p];
      crow[j] = s;
    }
  }
}

// c[k,n] = a[m,k]^T * b[m,n]
void kernel_tn(const double* a, const double* b, double* c, int m, int k, int n) {
  g_macs += static_cast<std::uint64_t>(m) * k * n;
#pragma omp parallel for schedule(static) if (static_cast<std::int64_t>(m) * k * n > 262144)
  for (int i = 0; i < k; ++i) {
    double* crow = c + static_cast<std::size_t>(i) * n;
    std::fill(crow, crow + n, 0.0);
    for (int p = 0; p < m; ++p) {
      const double av = a[static_cast<std::size_t>(p) * k + i];
      const double* brow = b + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

void record(std::initializer_list<Tensor> inputs, const Tensor& out,
            std::function<void()> pull) {
  Tape* tape = Tape::active();
  if (tape == nullptr) return;
  bool needed = false;
  for (const Tensor& in : inputs) {
    if (tracked(in)) {
      needed = true;
      break;
    }
  }
  if (!needed) return;
  out.node()->producer = tape;
  Tape::Record rec;
  rec.nodes.reserve(inputs.size() + 1);
  for (const Tensor& in : inputs) rec.nodes.push_back(in.node());
  rec.nodes.push_back(out.node());
  rec.pull = std::move(pull);
  tape->push(std::move(rec));
}

void add_into(std::vector<double>& dst, const std::vector<double>& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace

// ---- shape utilities -----------------------------------------------------------

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (int d : shape) {
    if (d < 0) shape_fail("negative extent in shape " + shape_str(shape));
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ",";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

// ---- Tensor ---------------------------------------------------------------------

Tensor Tensor::zeros(Shape shape) {
  auto node = std::make_shared<TensorNode>();
  node->value.assign(static_cast<std::size_t>(shape_numel(shape)), 0.0);
  node->shape = std::move(shape);
  return Tensor(std::move(node));
}

Tensor Tensor::full(Shape shape, double fill) {
  Tensor t = zeros(std::move(shape));
  std::fill(t.data().begin(), t.data().end(), fill);
  return t;
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data) {
  if (shape_numel(shape) != static_cast<std::int64_t>(data.size())) {
    shape_fail("from_data: " + std::to_string(data.size()) +
               " values for shape " + shape_str(shape));
  }
  auto node = std::make_shared<TensorNode>();
  node->shape = std::move(shape);
  node->value = std::move(data);
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double v) { return from_data({}, {v}); }

const Shape& Tensor::shape() const {
  if (!node_) shape_fail("use of undefined tensor");
  return node_->shape;
}

int Tensor::dim(int axis) const {
  const Shape& s = shape();
  return s[static_cast<std::size_t>(normalize_axis(axis, ndim()))];
}

std::int64_t Tensor::numel() const {
  if (!node_) shape_fail("use of undefined tensor");
  return static_cast<std::int64_t>(node_->value.size());
}

std::vector<double>& Tensor::data() {
  if (!node_) shape_fail("use of undefined tensor");
  return node_->value;
}

const std::vector<double>& Tensor::data() const {
  if (!node_) shape_fail("use of undefined tensor");
  return node_->value;
}

double Tensor::item() const {
  if (numel() != 1) shape_fail("item() on tensor of shape " + shape_str(shape()));
  return data()[0];
}

Tensor& Tensor::set_requires_grad(bool on) {
  node()->requires_grad = on;
  return *this;
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

bool Tensor::has_grad() const {
  return node_ && node_->grad.size() == node_->value.size() && !node_->value.empty();
}

std::vector<double>& Tensor::grad() {
  if (!has_grad()) shape_fail("gradient not populated");
  return node_->grad;
}

const std::vector<double>& Tensor::grad() const {
  if (!has_grad()) shape_fail("gradient not populated");
  return node_->grad;
}

Tensor Tensor::clone() const {
  return Tensor::from_data(shape(), data());
}

bool tracked(const Tensor& t) {
  if (!t.defined()) return false;
  if (t.requires_grad()) return true;
  Tape* tape = Tape::active();
  return tape != nullptr && t.node()->producer == tape;
}

// ---- Tape ------------------------------------------------------------------------

Tape::Tape() {
  if (g_active_tape != nullptr) {
    throw Error("a tape is already active; nested tapes are not supported");
  }
  g_active_tape = this;
}

Tape::~Tape() {
  if (g_active_tape == this) g_active_tape = nullptr;
}

Tape* Tape::active() { return g_active_tape; }

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    shape_fail("backward: loss must be a defined scalar");
  }
  for (Record& r : records_) {
    for (auto& n : r.nodes) n->grad.assign(n->value.size(), 0.0);
  }
  auto& ln = *loss.node();
  if (ln.grad.size() != ln.value.size()) ln.grad.assign(ln.value.size(), 0.0);
  ln.grad[0] = 1.0;
  for (auto it = records_.rbegin(); it != records_.rend(); ++it) it->pull();
}

void backward(const Tensor& loss) {
  Tape* tape = Tape::active();
  if (tape == nullptr) throw Error("backward called with no active tape");
  tape->backward(loss);
}

namespace macs {
void reset() { g_macs = 0; }
std::uint64_t count() { return g_macs; }
}  // namespace macs

// ---- ops ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2) {
    shape_fail("matmul: expected 2-d operands, got " + shape_str(a.shape()) +
               " x " + shape_str(b.shape()));
  }
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    shape_fail("matmul: inner extents differ, " + shape_str(a.shape()) + " x " +
               shape_str(b.shape()));
  }
  Tensor out = Tensor::zeros({m, n});
  kernel_nn(a.data().data(), b.data().data(), out.data().data(), m, k, n);
  check_finite("matmul", out.data());
  record({a, b}, out, [an = a.node(), bn = b.node(), on = out.node(), m, k, n] {
    std::vector<double> tmp;
    tmp.resize(static_cast<std::size_t>(m) * k);
    kernel_nt(on->grad.data(), bn->value.data(), tmp.data(), m, n, k);
    add_into(an->grad, tmp);
    tmp.assign(static_cast<std::size_t>(k) * n, 0.0);
    kernel_tn(an->value.data(), on->grad.data(), tmp.data(), m, k, n);
    add_into(bn->grad, tmp);
  });
  return out;
}

Tensor bmm(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 3 || b.ndim() != 3) shape_fail("bmm: expected 3-d operands");
  const int g = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  if (b.dim(0) != g || b.dim(1) != k) {
    shape_fail("bmm: incompatible shapes " + shape_str(a.shape()) + " x " +
               shape_str(b.shape()));
  }
  Tensor out = Tensor::zeros({g, m, n});
  const std::size_t sa = static_cast<std::size_t>(m) * k;
  const std::size_t sb = static_cast<std::size_t>(k) * n;
  const std::size_t sc = static_cast<std::size_t>(m) * n;
  for (int i = 0; i < g; ++i) {
    kernel_nn(a.data().data() + i * sa, b.data().data() + i * sb,
              out.data().data() + i * sc, m, k, n);
  }
  check_finite("bmm", out.data());
  record({a, b}, out,
         [an = a.node(), bn = b.node(), on = out.node(), g, m, k, n, sa, sb, sc] {
           std::vector<double> tmp(std::max(sa, sb));
           for (int i = 0; i < g; ++i) {
             kernel_nt(on->grad.data() + i * sc, bn->value.data() + i * sb,
                       tmp.data(), m, n, k);
             for (std::size_t j = 0; j < sa; ++j) an->grad[i * sa + j] += tmp[j];
             kernel_tn(an->value.data() + i * sa, on->grad.data() + i * sc,
                       tmp.data(), m, k, n);
             for (std::size_t j = 0; j < sb; ++j) bn->grad[i * sb + j] += tmp[j];
           }
         });
  return out;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (x.ndim() < 1 || w.ndim() != 2 || b.ndim() != 1) {
    shape_fail("linear: expected x[...,in], w[in,out], b[out]");
  }
  const int in = w.dim(0), out_w = w.dim(1);
  if (x.dim(x.ndim() - 1) != in || b.dim(0) != out_w) {
    shape_fail("linear: incompatible shapes x=" + shape_str(x.shape()) +
               " w=" + shape_str(w.shape()) + " b=" + shape_str(b.shape()));
  }
  const int rows = static_cast<int>(x.numel() / in);
  Tensor flat = reshape(x, {rows, in});
  Tensor y = add(matmul(flat, w), b);
  Shape out_shape = x.shape();
  out_shape.back() = out_w;
  return reshape(y, std::move(out_shape));
}

Tensor add(const Tensor& a, const Tensor& b) {
  const std::int64_t na = a.numel(), nb = b.numel();
  const bool same = a.shape() == b.shape();
  bool suffix = false;
  if (!same) {
    const int nda = a.ndim(), ndb = b.ndim();
    suffix = ndb <= nda;
    for (int i = 0; suffix && i < ndb; ++i) {
      if (a.shape()[nda - ndb + i] != b.shape()[i]) suffix = false;
    }
    if (!suffix) {
      shape_fail("add: shape " + shape_str(b.shape()) +
                 " is not a suffix of " + shape_str(a.shape()));
    }
  }
  Tensor out = Tensor::zeros(a.shape());
  const std::int64_t lead = na / nb;
  {
    const auto& av = a.data();
    const auto& bv = b.data();
    auto& ov = out.data();
    for (std::int64_t r = 0; r < lead; ++r) {
      const std::int64_t base = r * nb;
      for (std::int64_t j = 0; j < nb; ++j) ov[base + j] = av[base + j] + bv[j];
    }
  }
  check_finite("add", out.data());
  record({a, b}, out, [an = a.node(), bn = b.node(), on = out.node(), lead, nb] {
    for (std::int64_t r = 0; r < lead; ++r) {
      const std::int64_t base = r * nb;
      for (std::int64_t j = 0; j < nb; ++j) {
        an->grad[base + j] += on->grad[base + j];
        bn->grad[j] += on->grad[base + j];
      }
    }
  });
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) shape_fail("sub: shapes differ");
  Tensor out = Tensor::zeros(a.shape());
  const std::int64_t n = a.numel();
  for (std::int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] - b.data()[i];
  check_finite("sub", out.data());
  record({a, b}, out, [an = a.node(), bn = b.node(), on = out.node(), n] {
    for (std::int64_t i = 0; i < n; ++i) {
      an->grad[i] += on->grad[i];
      bn->grad[i] -= on->grad[i];
    }
  });
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) shape_fail("mul: shapes differ");
  Tensor out = Tensor::zeros(a.shape());
  const std::int64_t n = a.numel();
  for (std::int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * b.data()[i];
  check_finite("mul", out.data());
  record({a, b}, out, [an = a.node(), bn = b.node(), on = out.node(), n] {
    for (std::int64_t i = 0; i < n; ++i) {
      an->grad[i] += on->grad[i] * bn->value[i];
      bn->grad[i] += on->grad[i] * an->value[i];
    }
  });
  return out;
}

Tensor scale(const Tensor& a, double c) {
  Tensor out = Tensor::zeros(a.shape());
  const std::int64_t n = a.numel();
  for (std::int64_t i = 0; i < n; ++i) out.data()[i] = c * a.data()[i];
  check_finite("scale", out.data());
  record({a}, out, [an = a.node(), on = out.node(), c, n] {
    for (std::int64_t i = 0; i < n; ++i) an->grad[i] += c * on->grad[i];
  });
  return out;
}

Tensor softmax(const Tensor& a, int axis) {
  axis = normalize_axis(axis, a.ndim());
  const Shape& s = a.shape();
  const std::int64_t outer = prod(s, 0, axis);
  const std::int64_t len = s[axis];
  const std::int64_t inner = prod(s, axis + 1, a.ndim());
  if (len == 0) shape_fail("softmax: empty axis");
  Tensor out = Tensor::zeros(s);
  const auto& av = a.data();
  auto& ov = out.data();
  for (std::int64_t o = 0; o < outer; ++o) {
    for (std::int64_t in = 0; in < inner; ++in) {
      const std::int64_t base = o * len * inner + in;
      double m = av[base];
      for (std::int64_t l = 1; l < len; ++l)
        m = std::max(m, av[base + l * inner]);
      double sum = 0.0;
      for (std::int64_t l = 0; l < len; ++l) {
        const double e = std::exp(av[base + l * inner] - m);
        ov[base + l * inner] = e;
        sum += e;
      }
      for (std::int64_t l = 0; l < len; ++l) ov[base + l * inner] /= sum;
    }
  }
  check_finite("softmax", ov);
  record({a}, out, [an = a.node(), on = out.node(), outer, len, inner] {
    for (std::int64_t o = 0; o < outer; ++o) {
      for (std::int64_t in = 0; in < inner; ++in) {
        const std::int64_t base = o * len * inner + in;
        double dot = 0.0;
        for (std::int64_t l = 0; l < len; ++l) {
          const std::int64_t i = base + l * inner;
          dot += on->grad[i] * on->value[i];
        }
        for (std::int64_t l = 0; l < len; ++l) {
          const std::int64_t i = base + l * inner;
          an->grad[i] += on->value[i] * (on->grad[i] - dot);
        }
      }
    }
  });
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps) {
  if (x.ndim() < 1) shape_fail("layer_norm: rank-0 input");
  const int d = x.dim(x.ndim() - 1);
  if (gain.ndim() != 1 || bias.ndim() != 1 || gain.dim(0) != d || bias.dim(0) != d) {
    shape_fail("layer_norm: gain/bias must have shape [" + std::to_string(d) + "]");
  }
  const std::int64_t rows = x.numel() / d;
  Tensor out = Tensor::zeros(x.shape());
  std::vector<double> xhat(x.numel());
  std::vector<double> inv(rows);
  const auto& xv = x.data();
  const auto& gv = gain.data();
  const auto& bv = bias.data();
  auto& ov = out.data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* row = xv.data() + r * d;
    double mean = 0.0;
    for (int j = 0; j < d; ++j) mean += row[j];
    mean /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) {
      const double c = row[j] - mean;
      var += c * c;
    }
    var /= d;
    const double iv = 1.0 / std::sqrt(var + eps);
    inv[r] = iv;
    for (int j = 0; j < d; ++j) {
      const double h = (row[j] - mean) * iv;
      xhat[r * d + j] = h;
      ov[r * d + j] = h * gv[j] + bv[j];
    }
  }
  check_finite("layer_norm", ov);
  record({x, gain, bias}, out,
         [xn = x.node(), gn = gain.node(), bn = bias.node(), on = out.node(),
          xhat = std::move(xhat), inv = std::move(inv), rows, d] {
           std::vector<double> h(d);
           for (std::int64_t r = 0; r < rows; ++r) {
             const double* g = on->grad.data() + r * d;
             const double* xh = xhat.data() + r * d;
             double m1 = 0.0, m2 = 0.0;
             for (int j = 0; j < d; ++j) {
               h[j] = g[j] * gn->value[j];
               m1 += h[j];
               m2 += h[j] * xh[j];
               gn->grad[j] += g[j] * xh[j];
               bn->grad[j] += g[j];
             }
             m1 /= d;
             m2 /= d;
             for (int j = 0; j < d; ++j) {
               xn->grad[r * d + j] += inv[r] * (h[j] - m1 - xh[j] * m2);
             }
           }
         });
  return out;
}

Tensor gelu(const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape());
  const std::int64_t n = x.numel();
  const auto& xv = x.data();
  auto& ov = out.data();
  for (std::int64_t i = 0; i < n; ++i) {
    const double v = xv[i];
    const double u = kGeluC0 * (v + kGeluC1 * v * v * v);
    ov[i] = 0.5 * v * (1.0 + std::tanh(u));
  }
  check_finite("gelu", ov);
  record({x}, out, [xn = x.node(), on = out.node(), n] {
    for (std::int64_t i = 0; i < n; ++i) {
      const double v = xn->value[i];
      const double u = kGeluC0 * (v + kGeluC1 * v * v * v);
      const double t = std::tanh(u);
      const double d =
          0.5 * (1.0 + t) +
          0.5 * v * (1.0 - t * t) * kGeluC0 * (1.0 + 3.0 * kGeluC1 * v * v);
      xn->grad[i] += on->grad[i] * d;
    }
  });
  return out;
}

Tensor concat(std::span<const Tensor> parts, int axis) {
  if (parts.empty()) shape_fail("concat: no inputs");
  const int nd = parts[0].ndim();
  axis = normalize_axis(axis, nd);
  Shape out_shape = parts[0].shape();
  out_shape[axis] = 0;
  for (const Tensor& p : parts) {
    if (p.ndim() != nd) shape_fail("concat: rank mismatch");
    for (int i = 0; i < nd; ++i) {
      if (i != axis && p.shape()[i] != parts[0].shape()[i]) {
        shape_fail("concat: extent mismatch outside axis");
      }
    }
    out_shape[axis] += p.shape()[axis];
  }
  const std::int64_t outer = prod(out_shape, 0, axis);
  const std::int64_t inner = prod(out_shape, axis + 1, nd);
  Tensor out = Tensor::zeros(out_shape);
  auto& ov = out.data();
  const std::int64_t out_stride = out_shape[axis] * inner;
  std::int64_t off = 0;
  for (const Tensor& p : parts) {
    const std::int64_t block = p.shape()[axis] * inner;
    const auto& pv = p.data();
    for (std::int64_t o = 0; o < outer; ++o) {
      std::memcpy(ov.data() + o * out_stride + off, pv.data() + o * block,
                  static_cast<std::size_t>(block) * sizeof(double));
    }
    off += block;
  }
  // no finite check: concat introduces no arithmetic
  std::vector<std::shared_ptr<TensorNode>> in_nodes;
  std::vector<std::int64_t> blocks;
  bool needed = false;
  for (const Tensor& p : parts) {
    in_nodes.push_back(p.node());
    blocks.push_back(p.shape()[axis] * inner);
    needed = needed || tracked(p);
  }
  if (Tape::active() != nullptr && needed) {
    Tape::Record rec;
    rec.nodes = in_nodes;
    rec.nodes.push_back(out.node());
    out.node()->producer = Tape::active();
    rec.pull = [in_nodes, blocks, on = out.node(), outer, out_stride] {
      std::int64_t off2 = 0;
      for (std::size_t p = 0; p < in_nodes.size(); ++p) {
        auto& g = in_nodes[p]->grad;
        for (std::int64_t o = 0; o < outer; ++o) {
          const double* src = on->grad.data() + o * out_stride + off2;
          double* dst = g.data() + o * blocks[p];
          for (std::int64_t j = 0; j < blocks[p]; ++j) dst[j] += src[j];
        }
        off2 += blocks[p];
      }
    };
    Tape::active()->push(std::move(rec));
  }
  return out;
}

Tensor concat(std::initializer_list<Tensor> parts, int axis) {
  std::vector<Tensor> v(parts);
  return concat(std::span<const Tensor>(v), axis);
}

Tensor slice(const Tensor& x, int axis, int start, int length) {
  const int nd = x.ndim();
  axis = normalize_axis(axis, nd);
  if (start < 0 || length < 0 || start + length > x.shape()[axis]) {
    shape_fail("slice: range [" + std::to_string(start) + "," +
               std::to_string(start + length) + ") outside extent " +
               std::to_string(x.shape()[axis]));
  }
  Shape out_shape = x.shape();
  out_shape[axis] = length;
  const std::int64_t outer = prod(out_shape, 0, axis);
  const std::int64_t inner = prod(out_shape, axis + 1, nd);
  const std::int64_t in_stride = x.shape()[axis] * inner;
  const std::int64_t out_stride = length * inner;
  Tensor out = Tensor::zeros(out_shape);
  for (std::int64_t o = 0; o < outer; ++o) {
    std::memcpy(out.data().data() + o * out_stride,
                x.data().data() + o * in_stride + start * inner,
                static_cast<std::size_t>(out_stride) * sizeof(double));
  }
  record({x}, out, [xn = x.node(), on = out.node(), outer, inner, in_stride,
                    out_stride, start] {
    for (std::int64_t o = 0; o < outer; ++o) {
      const double* src = on->grad.data() + o * out_stride;
      double* dst = xn->grad.data() + o * in_stride + start * inner;
      for (std::int64_t j = 0; j < out_stride; ++j) dst[j] += src[j];
    }
  });
  return out;
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    shape_fail("reshape: cannot view " + shape_str(x.shape()) + " as " +
               shape_str(shape));
  }
  Tensor out = Tensor::from_data(std::move(shape), x.data());
  record({x}, out, [xn = x.node(), on = out.node()] {
    add_into(xn->grad, on->grad);
  });
  return out;
}

namespace {

void permute_raw(const double* src, double* dst, const Shape& in_shape,
                 const std::vector<int>& perm) {
  const int nd = static_cast<int>(in_shape.size());
  std::vector<std::int64_t> in_strides(nd, 1);
  for (int i = nd - 2; i >= 0; --i) in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
  Shape out_shape(nd);
  std::vector<std::int64_t> src_stride_for_out(nd);
  for (int i = 0; i < nd; ++i) {
    out_shape[i] = in_shape[perm[i]];
    src_stride_for_out[i] = in_strides[perm[i]];
  }
  std::vector<std::int64_t> idx(nd, 0);
  const std::int64_t total = shape_numel(in_shape);
  std::int64_t src_off = 0;
  for (std::int64_t o = 0; o < total; ++o) {
    dst[o] = src[src_off];
    for (int ax = nd - 1; ax >= 0; --ax) {
      if (++idx[ax] < out_shape[ax]) {
        src_off += src_stride_for_out[ax];
        break;
      }
      src_off -= src_stride_for_out[ax] * (out_shape[ax] - 1);
      idx[ax] = 0;
    }
  }
}

}  // namespace

Tensor transpose(const Tensor& x, const std::vector<int>& perm) {
  const int nd = x.ndim();
  if (static_cast<int>(perm.size()) != nd) shape_fail("transpose: perm rank mismatch");
  std::vector<bool> seen(nd, false);
  for (int p : perm) {
    if (p < 0 || p >= nd || seen[p]) shape_fail("transpose: invalid permutation");
    seen[p] = true;
  }
  Shape out_shape(nd);
  for (int i = 0; i < nd; ++i) out_shape[i] = x.shape()[perm[i]];
  Tensor out = Tensor::zeros(out_shape);
  permute_raw(x.data().data(), out.data().data(), x.shape(), perm);
  std::vector<int> inv(nd);
  for (int i = 0; i < nd; ++i) inv[perm[i]] = i;
  record({x}, out, [xn = x.node(), on = out.node(), out_shape, inv] {
    std::vector<double> tmp(on->grad.size());
    permute_raw(on->grad.data(), tmp.data(), out_shape, inv);
    add_into(xn->grad, tmp);
  });
  return out;
}

Tensor broadcast_front(const Tensor& x, int copies) {
  if (copies < 1) shape_fail("broadcast_front: copies < 1");
  Shape out_shape;
  out_shape.reserve(x.ndim() + 1);
  out_shape.push_back(copies);
  for (int d : x.shape()) out_shape.push_back(d);
  Tensor out = Tensor::zeros(out_shape);
  const std::int64_t block = x.numel();
  for (int c = 0; c < copies; ++c) {
    std::memcpy(out.data().data() + c * block, x.data().data(),
                static_cast<std::size_t>(block) * sizeof(double));
  }
  record({x}, out, [xn = x.node(), on = out.node(), copies, block] {
    for (int c = 0; c < copies; ++c) {
      const double* src = on->grad.data() + c * block;
      for (std::int64_t j = 0; j < block; ++j) xn->grad[j] += src[j];
    }
  });
  return out;
}

Tensor sum_all(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  Tensor out = Tensor::scalar(s);
  check_finite("sum_all", out.data());
  record({x}, out, [xn = x.node(), on = out.node()] {
    const double g = on->grad[0];
    for (double& v : xn->grad) v += g;
  });
  return out;
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
  if (logits.ndim() != 2) shape_fail("cross_entropy: logits must be [batch,classes]");
  const int b = logits.dim(0), c = logits.dim(1);
  if (static_cast<int>(labels.size()) != b) {
    shape_fail("cross_entropy: " + std::to_string(labels.size()) +
               " labels for batch " + std::to_string(b));
  }
  for (int y : labels) {
    if (y < 0 || y >= c) shape_fail("cross_entropy: label out of range");
  }
  std::vector<double> prob(logits.data());
  double loss = 0.0;
  for (int r = 0; r < b; ++r) {
    double* row = prob.data() + static_cast<std::size_t>(r) * c;
    double m = row[0];
    for (int j = 1; j < c; ++j) m = std::max(m, row[j]);
    double sum = 0.0;
    for (int j = 0; j < c; ++j) sum += std::exp(row[j] - m);
    const double lse = m + std::log(sum);
    loss += lse - row[labels[r]];
    for (int j = 0; j < c; ++j) row[j] = std::exp(row[j] - lse);
  }
  Tensor out = Tensor::scalar(loss / b);
  check_finite("cross_entropy", out.data());
  record({logits}, out, [ln = logits.node(), on = out.node(),
                         prob = std::move(prob), labels, b, c] {
    const double g = on->grad[0] / b;
    for (int r = 0; r < b; ++r) {
      const std::size_t base = static_cast<std::size_t>(r) * c;
      for (int j = 0; j < c; ++j) ln->grad[base + j] += g * prob[base + j];
      ln->grad[base + labels[r]] -= g;
    }
  });
  return out;
}

std::vector<double> interp_matrix(int n, int out_n) {
  if (n < 1 || out_n < 1) shape_fail("interp_matrix: empty axis");
  std::vector<double> w(static_cast<std::size_t>(out_n) * n, 0.0);
  for (int i = 0; i < out_n; ++i) {
    double c = (out_n == 1 || n == 1)
                   ? 0.0
                   : static_cast<double>(i) * (n - 1) / (out_n - 1);
    int i0 = static_cast<int>(std::floor(c));
    if (i0 > n - 2) i0 = n - 2;
    if (i0 < 0) i0 = 0;
    const double frac = c - i0;
    if (n == 1) {
      w[static_cast<std::size_t>(i) * n] = 1.0;
    } else {
      w[static_cast<std::size_t>(i) * n + i0] = 1.0 - frac;
      w[static_cast<std::size_t>(i) * n + i0 + 1] = frac;
    }
  }
  return w;
}

Tensor bilinear_upsample_grid(const Tensor& x, int out_h, int out_w) {
  const bool batched = x.ndim() == 4;
  if (!batched && x.ndim() != 3) {
    shape_fail("bilinear_upsample_grid: expected [h,w,c] or [b,h,w,c]");
  }
  const int b = batched ? x.dim(0) : 1;
  const int h = x.dim(batched ? 1 : 0);
  const int w = x.dim(batched ? 2 : 1);
  const int c = x.dim(batched ? 3 : 2);
  if (out_h < 1 || out_w < 1) shape_fail("bilinear_upsample_grid: empty output");
  if (out_h == h && out_w == w) return x;  // exact identity

  Tensor t = batched ? x : reshape(x, {1, h, w, c});
  if (out_h != h) {
    // rows: [b,h,w,c] -> [b,w,c,h] -> (. x R^T) -> [b,w,c,out_h] -> [b,out_h,w,c]
    Tensor rt = Tensor::from_data({h, out_h}, [&] {
      std::vector<double> r = interp_matrix(h, out_h);
      std::vector<double> rT(r.size());
      for (int i = 0; i < out_h; ++i)
        for (int j = 0; j < h; ++j) rT[static_cast<std::size_t>(j) * out_h + i] = r[static_cast<std::size_t>(i) * h + j];
      return rT;
    }());
    Tensor m = transpose(t, {0, 2, 3, 1});
    m = reshape(m, {b * w * c, h});
    m = matmul(m, rt);
    m = reshape(m, {b, w, c, out_h});
    t = transpose(m, {0, 3, 1, 2});
  }
  if (out_w != w) {
    Tensor st = Tensor::from_data({w, out_w}, [&] {
      std::vector<double> s = interp_matrix(w, out_w);
      std::vector<double> sT(s.size());
      for (int i = 0; i < out_w; ++i)
        for (int j = 0; j < w; ++j) sT[static_cast<std::size_t>(j) * out_w + i] = s[static_cast<std::size_t>(i) * w + j];
      return sT;
    }());
    Tensor m = transpose(t, {0, 1, 3, 2});  // [b,out_h,c,w]
    m = reshape(m, {b * out_h * c, w});
    m = matmul(m, st);
    m = reshape(m, {b, out_h, c, out_w});
    t = transpose(m, {0, 1, 3, 2});
  }
  return batched ? t : reshape(t, {out_h, out_w, c});
}

Tensor take_rows(const Tensor& x, const std::vector<int>& idx) {
  if (x.ndim() < 1) shape_fail("take_rows: rank-0 input");
  const int rows = x.dim(0);
  const std::int64_t block = x.numel() / std::max(rows, 1);
  Shape out_shape = x.shape();
  out_shape[0] = static_cast<int>(idx.size());
  Tensor out = Tensor::zeros(out_shape);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= rows) shape_fail("take_rows: index out of range");
    std::memcpy(out.data().data() + i * block, x.data().data() + idx[i] * block,
                static_cast<std::size_t>(block) * sizeof(double));
  }
  return out;
}

// ---- optimizer --------------------------------------------------------------------

void adam_step(std::vector<Tensor>& params, AdamState& state, double lr,
               double beta1, double beta2, double eps) {
  if (state.m.empty()) {
    state.m.resize(params.size());
    state.v.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      state.m[i].assign(params[i].numel(), 0.0);
      state.v[i].assign(params[i].numel(), 0.0);
    }
  }
  if (state.m.size() != params.size()) {
    throw Error("adam_step: param list size changed across calls");
  }
  state.step += 1;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const std::vector<double>& g = params[i].grad();
    auto& m = state.m[i];
    auto& v = state.v[i];
    auto& p = params[i].data();
    if (m.size() != p.size()) throw Error("adam_step: param shape changed");
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
      v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
      p[j] -= lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + eps);
      if (!std::isfinite(p[j])) {
        throw NumericError("adam_step: non-finite parameter after update");
      }
    }
  }
}

// ---- rng ---------------------------------------------------------------------------

double Rng::normal(double mean, double stddev) {
  std::normal_distribution<double> d(mean, stddev);
  return d(engine_);
}

double Rng::uniform() {
  std::uniform_real_distribution<double> d(0.0, 1.0);
  return d(engine_);
}

std::uint64_t Rng::integer(std::uint64_t bound) {
  std::uniform_int_distribution<std::uint64_t> d(0, bound - 1);
  return d(engine_);
}

Tensor truncated_normal(Shape shape, double stddev, Rng& rng) {
  Tensor t = Tensor::zeros(std::move(shape));
  if (stddev <= 0.0) return t;
  for (double& v : t.data()) {
    double x;
    do {
      x = rng.normal(0.0, stddev);
    } while (std::abs(x) > 2.0 * stddev);
    v = x;
  }
  return t;
}

}  // namespace dvt
