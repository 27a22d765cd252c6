#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "coat/error.hpp"
#include "coat/rng.hpp"

namespace coat {

// Numeric mode. Compute is always carried out in double; in f32 mode every op
// result is rounded through IEEE float so that stored values are exactly
// representable in 32 bits and checkpoints round-trip losslessly. f64 mode is
// the gradcheck/determinism mode.
enum class Precision { f32 = 32, f64 = 64 };

Precision precision();
void set_precision(Precision p);
// Reads COAT_PRECISION ({32,64}, default 32) and installs it.
void init_precision_from_env();

using Shape = std::vector<int64_t>;

int64_t shape_size(const Shape& s);
std::string shape_str(const Shape& s);

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // allocated on first accumulation
  bool requires_grad = false;
  const void* tape = nullptr;  // tape that produced this node, if any
  std::string name;

  int64_t size() const { return static_cast<int64_t>(data.size()); }
  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
  }
};

}  // namespace detail

// Dense row-major tensor handle. Copying a Tensor copies the handle, not the
// buffer; ops always allocate fresh outputs and never mutate inputs.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(const Shape& shape, bool requires_grad = false);
  static Tensor full(const Shape& shape, double value, bool requires_grad = false);
  static Tensor from_data(const Shape& shape, std::vector<double> data, bool requires_grad = false);
  static Tensor randn(const Shape& shape, Rng& rng, double stddev, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  int64_t ndim() const { return static_cast<int64_t>(shape().size()); }
  int64_t dim(int64_t i) const;
  int64_t size() const;

  std::span<const double> data() const;
  // Direct mutation is for leaves only (optimizer steps, OIM state). Never
  // mutate a tensor that a live tape references.
  std::span<double> mutable_data();

  bool requires_grad() const;
  void set_requires_grad(bool rg);
  bool has_grad() const;
  std::span<const double> grad() const;
  void zero_grad();

  const std::string& name() const;
  void set_name(std::string name);

  double item() const;  // scalar tensors only
  double at(std::initializer_list<int64_t> idx) const;

  // Rounds data through float when the global mode is f32; validates finiteness.
  void apply_precision();

  std::shared_ptr<detail::Node> node() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}
  std::shared_ptr<detail::Node> node_;
  friend class Tape;
  friend Tensor make_tensor(Shape shape, std::vector<double> data);
};

// Creates a tensor without the finiteness scan (internal use by ops).
Tensor make_tensor(Shape shape, std::vector<double> data);

// Reverse-mode tape. One tape at a time; ops executed while a tape is alive
// and touching a requires_grad input are recorded in execution order and
// replayed in exact reverse by backward().
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Seeds d(loss)/d(loss)=1 and accumulates gradients into every
  // requires_grad tensor that participated. loss must be a scalar produced
  // through this tape.
  void backward(const Tensor& loss);

  static bool recording();
  static Tape* current();

  size_t num_ops() const { return entries_.size(); }

  // Internal: registers an executed op.
  void record(std::function<void()> backward_fn);

 private:
  std::vector<std::function<void()>> entries_;
};

// ---- ops ------------------------------------------------------------------
// Every op validates shapes, checks output finiteness, applies the precision
// mode, and registers its backward closure when recording.

// (i,j)x(j,k), (B,i,j)x(j,k) or (B,i,j)x(B,j,k)
Tensor matmul(const Tensor& a, const Tensor& b);
// swaps the last two axes (2D or 3D)
Tensor transpose_last2(const Tensor& x);

// x: [B,h,w,cin], w: [k,k,cin,cout], optional bias [cout]; zero padding.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int64_t stride, int64_t pad);
// non-overlapping d x d mean pooling on [B,h,w,c]
Tensor avg_pool2d(const Tensor& x, int64_t d);

Tensor softmax(const Tensor& x, int64_t axis);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double s);
// bias broadcast over the last axis
Tensor add_bias(const Tensor& x, const Tensor& bias);
Tensor relu(const Tensor& x);

// Smallest |x| any relu has seen since the last reset. The gradient checker
// uses it to reject evaluation points that sit on a kink.
double relu_min_abs_input();
void reset_relu_min_abs_input();

Tensor concat(const std::vector<Tensor>& parts, int64_t axis);
Tensor slice(const Tensor& x, int64_t axis, int64_t start, int64_t len);
// rows of axis 0 by index (duplicates allowed)
Tensor index_select0(const Tensor& x, const std::vector<int64_t>& indices);
Tensor reshape(const Tensor& x, const Shape& shape);
// stacks equal-shape tensors along a new leading axis
Tensor stack0(const std::vector<Tensor>& parts);

Tensor mean_axis(const Tensor& x, int64_t axis);
Tensor mean_all(const Tensor& x);
Tensor sum_all(const Tensor& x);

// normalizes the last axis to zero mean / unit variance, then applies affine
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);
// rows (last axis) scaled to unit L2 norm
Tensor l2_normalize_rows(const Tensor& x);

// x[..,in] * W[in,out] + b
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

// Fused multi-head attention core on [P,N,c] query/key/value banks:
// per instance and head, softmax(q k^T / sqrt(c/m)) v. Attention probabilities
// are recomputed in backward instead of stored.
Tensor msa_core(const Tensor& q, const Tensor& k, const Tensor& v, int64_t heads);

// Token strip exchange on a [P,N,c] bank: positions in `positions` are taken
// from instance partner[i], the rest kept. With donor_grad=false the donor
// path is treated as constant.
Tensor exchange(const Tensor& bank, const std::vector<int64_t>& positions,
                const std::vector<int64_t>& partner, bool donor_grad = true);

// mean softmax cross-entropy; logits [B,K], labels in [0,K)
Tensor softmax_cross_entropy_mean(const Tensor& logits, const std::vector<int64_t>& labels);
// mean smooth-L1 over all elements of pred-target
Tensor smooth_l1_mean(const Tensor& pred, const Tensor& target);

// ---- serialization --------------------------------------------------------
// Blob format: u32 LE header length, JSON header {"shape","dtype","name"},
// raw little-endian payload (f32 or f64 per dtype).

void write_tensor_blob(std::ostream& out, const Tensor& t, const std::string& name);
void write_tensor_blob(std::ostream& out, const Tensor& t, const std::string& name, Precision dtype);
struct NamedTensor {
  std::string name;
  Tensor tensor;
};
NamedTensor read_tensor_blob(std::istream& in);

void save_tensor_file(const std::string& path, const Tensor& t, const std::string& name);
NamedTensor load_tensor_file(const std::string& path);

}  // namespace coat
