#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "dvt/errors.hpp"

namespace dvt {

using Shape = std::vector<int>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Storage shared between tensor handles. Gradients live next to values so a
// parameter tensor can be handed to the optimizer after backward().
struct TensorNode {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // sized lazily by the first backward pass
  bool requires_grad = false;
  const void* producer = nullptr;  // tape that recorded the op producing this
};

// Value-semantics handle to shared storage. Copying a Tensor aliases the
// underlying buffer; use clone() for a deep copy.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double fill);
  static Tensor from_data(Shape shape, std::vector<double> data);
  static Tensor scalar(double v);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  int ndim() const { return static_cast<int>(shape().size()); }
  int dim(int axis) const;
  std::int64_t numel() const;

  std::vector<double>& data();
  const std::vector<double>& data() const;
  double item() const;  // requires numel() == 1

  Tensor& set_requires_grad(bool on = true);
  bool requires_grad() const;
  bool has_grad() const;
  std::vector<double>& grad();
  const std::vector<double>& grad() const;

  Tensor clone() const;  // deep copy of values; grad/requires_grad not copied

  const std::shared_ptr<TensorNode>& node() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<TensorNode> node) : node_(std::move(node)) {}
  std::shared_ptr<TensorNode> node_;
  friend class Tape;
};

// Reverse-mode tape. Constructing a Tape makes it active; ops executed while a
// tape is active append pull-back closures. Exactly one tape may be active.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Seeds d(loss)/d(loss) = 1 and replays recorded ops in reverse, visiting
  // each exactly once. All gradients touched by this tape are zeroed first, so
  // calling backward twice yields identical results (no double accumulation).
  void backward(const Tensor& loss);

  std::size_t size() const { return records_.size(); }

  static Tape* active();

  struct Record {
    std::vector<std::shared_ptr<TensorNode>> nodes;  // inputs then output
    std::function<void()> pull;
  };
  void push(Record rec) { records_.push_back(std::move(rec)); }

 private:
  std::vector<Record> records_;
};

// True if `t` participates in gradient tracking under the active tape.
bool tracked(const Tensor& t);

// ---- Multiply-accumulate instrumentation -----------------------------------
// Every matmul-family kernel adds m*n*k to this process-wide counter. One MAC
// is counted as two FLOPs by callers that report FLOPs.
namespace macs {
void reset();
std::uint64_t count();
}  // namespace macs

// ---- Operations -------------------------------------------------------------
// All ops allocate a fresh output, check it for non-finite values (throwing
// NumericError), and record pull-backs when a tape is active.

Tensor matmul(const Tensor& a, const Tensor& b);             // [m,k]x[k,n]
Tensor bmm(const Tensor& a, const Tensor& b);                // [g,m,k]x[g,k,n]
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);  // [...,in]
Tensor add(const Tensor& a, const Tensor& b);      // equal shapes, or b equal to a suffix of a's shape
Tensor sub(const Tensor& a, const Tensor& b);      // equal shapes
Tensor mul(const Tensor& a, const Tensor& b);      // equal shapes, elementwise
Tensor scale(const Tensor& a, double c);
Tensor softmax(const Tensor& a, int axis);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps = 1e-6);  // normalizes the last axis
Tensor gelu(const Tensor& x);          // tanh approximation
Tensor concat(std::span<const Tensor> parts, int axis);
Tensor concat(std::initializer_list<Tensor> parts, int axis);
Tensor slice(const Tensor& x, int axis, int start, int length);
Tensor reshape(const Tensor& x, Shape shape);
Tensor transpose(const Tensor& x, const std::vector<int>& perm);
Tensor broadcast_front(const Tensor& x, int copies);  // [s...] -> [copies,s...]
Tensor sum_all(const Tensor& x);                      // -> scalar
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels);

// Bilinear interpolation over the grid axes of [h,w,c] or [b,h,w,c], with
// corner alignment: source coordinate of output row i is i*(h-1)/(out_h-1).
// The equal-size case is an exact identity. Differentiable in x.
Tensor bilinear_upsample_grid(const Tensor& x, int out_h, int out_w);

// Row interpolation matrix [out_n, n] used by bilinear_upsample_grid; rows sum
// to 1 and have at most two nonzero entries.
std::vector<double> interp_matrix(int n, int out_n);

// Convenience: requires an active tape.
void backward(const Tensor& loss);

// Gathers rows `idx` of axis 0. Not differentiable (inference-side utility).
Tensor take_rows(const Tensor& x, const std::vector<int>& idx);

// ---- Optimizer ---------------------------------------------------------------
struct AdamState {
  std::vector<std::vector<double>> m, v;  // parallel to the param list
  std::int64_t step = 0;
};

// Applies one Adam update to every param from its .grad(). Params without a
// populated gradient are an error. The param list must be stable across calls.
void adam_step(std::vector<Tensor>& params, AdamState& state, double lr,
               double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

// ---- RNG and initialization ---------------------------------------------------
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}
  double normal(double mean = 0.0, double stddev = 1.0);
  double uniform();  // [0,1)
  std::uint64_t integer(std::uint64_t bound);  // [0,bound)
  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

// Normal(0, std) resampled until within [-2*std, 2*std].
Tensor truncated_normal(Shape shape, double stddev, Rng& rng);

}  // namespace dvt
