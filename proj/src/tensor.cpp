#include "coat/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include <json.hpp>

#include "fast_exp.hpp"

namespace coat {

namespace {

#if defined(__GLIBC__)
// Tensor buffers run to a few MB; without this glibc serves them via mmap and
// every op pays page-fault plus zeroing costs instead of reusing the heap.
struct MallocTuning {
  MallocTuning() {
    mallopt(M_MMAP_THRESHOLD, 64 * 1024 * 1024);
    mallopt(M_TRIM_THRESHOLD, 64 * 1024 * 1024);
  }
};
const MallocTuning g_malloc_tuning;
#endif

Precision g_precision = Precision::f32;

// Rounds through float in f32 mode and rejects non-finite values. The scan
// ORs the exponent-field mask so it vectorizes instead of serializing on an
// FP accumulator.
void finalize_values(std::vector<double>& data, const char* op) {
  constexpr uint64_t kExpMask = 0x7FF0000000000000ULL;
  uint64_t bad = 0;
  if (g_precision == Precision::f32) {
    for (double& v : data) {
      v = static_cast<double>(static_cast<float>(v));
      uint64_t b;
      std::memcpy(&b, &v, 8);
      bad |= static_cast<uint64_t>((b & kExpMask) == kExpMask);
    }
  } else {
    for (double v : data) {
      uint64_t b;
      std::memcpy(&b, &v, 8);
      bad |= static_cast<uint64_t>((b & kExpMask) == kExpMask);
    }
  }
  if (bad) {
    throw Error("E_NONFINITE", std::string(op) + " produced a non-finite value");
  }
}

Tape* g_tape = nullptr;

using NodePtr = std::shared_ptr<detail::Node>;



void maybe_record(const Tensor& out, std::initializer_list<Tensor> inputs, std::function<void()> fn) {
  if (!g_tape) return;
  bool any = false;
  for (const Tensor& t : inputs) {
    if (t.defined() && t.requires_grad()) {
      any = true;
      break;
    }
  }
  if (!any) return;
  out.node()->requires_grad = true;
  out.node()->tape = g_tape;
  g_tape->record(std::move(fn));
}

// ---- dense kernels ----------------------------------------------------------

// C[I,K] (+)= A[I,J] B[J,K]
void gemm_nn(const double* a, const double* b, double* c, int64_t I, int64_t J, int64_t K, bool acc) {
  if (!acc) std::fill(c, c + I * K, 0.0);
  for (int64_t i = 0; i < I; ++i) {
    const double* ai = a + i * J;
    double* ci = c + i * K;
    for (int64_t j = 0; j < J; ++j) {
      const double aij = ai[j];
      const double* bj = b + j * K;
      for (int64_t k = 0; k < K; ++k) ci[k] += aij * bj[k];
    }
  }
}

// C[I,K] (+)= A[I,J] B[K,J]^T
void gemm_nt(const double* a, const double* b, double* c, int64_t I, int64_t J, int64_t K, bool acc) {
  for (int64_t i = 0; i < I; ++i) {
    const double* ai = a + i * J;
    double* ci = c + i * K;
    for (int64_t k = 0; k < K; ++k) {
      const double* bk = b + k * J;
      double s = 0.0;
      for (int64_t j = 0; j < J; ++j) s += ai[j] * bk[j];
      if (acc)
        ci[k] += s;
      else
        ci[k] = s;
    }
  }
}

// C[J,K] (+)= A[I,J]^T B[I,K]
void gemm_tn(const double* a, const double* b, double* c, int64_t I, int64_t J, int64_t K, bool acc) {
  if (!acc) std::fill(c, c + J * K, 0.0);
  for (int64_t i = 0; i < I; ++i) {
    const double* ai = a + i * J;
    const double* bi = b + i * K;
    for (int64_t j = 0; j < J; ++j) {
      const double aij = ai[j];
      double* cj = c + j * K;
      for (int64_t k = 0; k < K; ++k) cj[k] += aij * bi[k];
    }
  }
}

int64_t axis_index(int64_t axis, int64_t ndim) {
  if (axis < 0) axis += ndim;
  check(axis >= 0 && axis < ndim, "E_SHAPE", "axis out of range");
  return axis;
}

}  // namespace

Precision precision() { return g_precision; }
void set_precision(Precision p) { g_precision = p; }

void init_precision_from_env() {
  const char* env = std::getenv("COAT_PRECISION");
  if (!env) {
    g_precision = Precision::f32;
    return;
  }
  std::string s(env);
  if (s == "32")
    g_precision = Precision::f32;
  else if (s == "64")
    g_precision = Precision::f64;
  else
    throw Error("E_CONFIG", "COAT_PRECISION must be 32 or 64, got '" + s + "'");
}

int64_t shape_size(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

// ---- Tensor -----------------------------------------------------------------

Tensor make_tensor(Shape shape, std::vector<double> data) {
  check(shape_size(shape) == static_cast<int64_t>(data.size()), "E_SHAPE",
        "data length " + std::to_string(data.size()) + " does not match shape " + shape_str(shape));
  auto n = std::make_shared<detail::Node>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  return Tensor(std::move(n));
}

Tensor Tensor::zeros(const Shape& shape, bool requires_grad) {
  Tensor t = make_tensor(shape, std::vector<double>(shape_size(shape), 0.0));
  t.node_->requires_grad = requires_grad;
  return t;
}

Tensor Tensor::full(const Shape& shape, double value, bool requires_grad) {
  Tensor t = make_tensor(shape, std::vector<double>(shape_size(shape), value));
  finalize_values(t.node_->data, "full");
  t.node_->requires_grad = requires_grad;
  return t;
}

Tensor Tensor::from_data(const Shape& shape, std::vector<double> data, bool requires_grad) {
  Tensor t = make_tensor(shape, std::move(data));
  finalize_values(t.node_->data, "from_data");
  t.node_->requires_grad = requires_grad;
  return t;
}

Tensor Tensor::randn(const Shape& shape, Rng& rng, double stddev, bool requires_grad) {
  std::vector<double> data(shape_size(shape));
  for (double& v : data) v = rng.normal(0.0, stddev);
  return from_data(shape, std::move(data), requires_grad);
}

const Shape& Tensor::shape() const {
  check(defined(), "E_STATE", "use of an undefined tensor");
  return node_->shape;
}

int64_t Tensor::dim(int64_t i) const {
  const Shape& s = shape();
  if (i < 0) i += static_cast<int64_t>(s.size());
  check(i >= 0 && i < static_cast<int64_t>(s.size()), "E_SHAPE", "dim index out of range");
  return s[i];
}

int64_t Tensor::size() const { return node_ ? node_->size() : 0; }

std::span<const double> Tensor::data() const {
  check(defined(), "E_STATE", "use of an undefined tensor");
  return {node_->data.data(), node_->data.size()};
}

std::span<double> Tensor::mutable_data() {
  check(defined(), "E_STATE", "use of an undefined tensor");
  return {node_->data.data(), node_->data.size()};
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

void Tensor::set_requires_grad(bool rg) {
  check(defined(), "E_STATE", "use of an undefined tensor");
  node_->requires_grad = rg;
}

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

std::span<const double> Tensor::grad() const {
  check(defined() && !node_->grad.empty(), "E_STATE",
        "tensor '" + (node_ ? node_->name : "") + "' has no gradient");
  return {node_->grad.data(), node_->grad.size()};
}

void Tensor::zero_grad() {
  if (node_) node_->grad.clear();
}

const std::string& Tensor::name() const {
  static const std::string empty;
  return node_ ? node_->name : empty;
}

void Tensor::set_name(std::string name) {
  check(defined(), "E_STATE", "use of an undefined tensor");
  node_->name = std::move(name);
}

double Tensor::item() const {
  check(size() == 1, "E_SHAPE", "item() requires a scalar tensor, shape is " + shape_str(shape()));
  return node_->data[0];
}

double Tensor::at(std::initializer_list<int64_t> idx) const {
  const Shape& s = shape();
  check(idx.size() == s.size(), "E_SHAPE", "index rank mismatch");
  int64_t flat = 0;
  int64_t i = 0;
  for (int64_t v : idx) {
    check(v >= 0 && v < s[i], "E_SHAPE", "index out of range");
    flat = flat * s[i] + v;
    ++i;
  }
  return node_->data[flat];
}

void Tensor::apply_precision() {
  check(defined(), "E_STATE", "use of an undefined tensor");
  finalize_values(node_->data, "apply_precision");
}

// ---- Tape -------------------------------------------------------------------

Tape::Tape() {
  check(g_tape == nullptr, "E_TAPE", "nested tapes are not supported");
  g_tape = this;
}

Tape::~Tape() { g_tape = nullptr; }

bool Tape::recording() { return g_tape != nullptr; }
Tape* Tape::current() { return g_tape; }

void Tape::record(std::function<void()> backward_fn) { entries_.push_back(std::move(backward_fn)); }

void Tape::backward(const Tensor& loss) {
  check(loss.defined() && loss.size() == 1, "E_SHAPE", "backward requires a scalar loss");
  check(loss.node()->tape == this, "E_TAPE", "loss was not produced through the active tape");
  loss.node()->ensure_grad();
  loss.node()->grad[0] = 1.0;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) (*it)();
}

// ---- op helpers -------------------------------------------------------------

namespace {

Tensor finish_op(Shape shape, std::vector<double> data, const char* op) {
  finalize_values(data, op);
  return make_tensor(std::move(shape), std::move(data));
}

bool grad_ready(const NodePtr& out) { return !out->grad.empty(); }

void accumulate(const NodePtr& n, const std::vector<double>& g) {
  n->ensure_grad();
  for (size_t i = 0; i < g.size(); ++i) n->grad[i] += g[i];
}

}  // namespace

// ---- matmul -----------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  check((sa.size() == 2 || sa.size() == 3) && (sb.size() == 2 || sb.size() == 3), "E_SHAPE",
        "matmul supports 2D/3D inputs, got " + shape_str(sa) + " x " + shape_str(sb));
  check(!(sa.size() == 2 && sb.size() == 3), "E_SHAPE", "matmul 2D x 3D is not supported");

  const int64_t B = sa.size() == 3 ? sa[0] : 1;
  const int64_t I = sa[sa.size() - 2], J = sa[sa.size() - 1];
  const int64_t Jb = sb[sb.size() - 2], K = sb[sb.size() - 1];
  check(J == Jb, "E_SHAPE", "matmul inner extents differ: " + shape_str(sa) + " x " + shape_str(sb));
  const bool batched_b = sb.size() == 3;
  if (batched_b) check(sb[0] == B, "E_SHAPE", "matmul batch extents differ");

  std::vector<double> out(B * I * K);
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  for (int64_t bi = 0; bi < B; ++bi) {
    gemm_nn(pa + bi * I * J, pb + (batched_b ? bi * J * K : 0), out.data() + bi * I * K, I, J, K, false);
  }

  Shape os = sa.size() == 3 ? Shape{B, I, K} : Shape{I, K};
  Tensor result = finish_op(std::move(os), std::move(out), "matmul");
  auto an = a.node(), bn = b.node(), on = result.node();
  maybe_record(result, {a, b}, [an, bn, on, B, I, J, K, batched_b]() {
    if (!grad_ready(on)) return;
    const double* g = on->grad.data();
    if (an->requires_grad) {
      an->ensure_grad();
      for (int64_t bi = 0; bi < B; ++bi) {
        gemm_nt(g + bi * I * K, bn->data.data() + (batched_b ? bi * J * K : 0),
                an->grad.data() + bi * I * J, I, K, J, true);
      }
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (int64_t bi = 0; bi < B; ++bi) {
        gemm_tn(an->data.data() + bi * I * J, g + bi * I * K,
                bn->grad.data() + (batched_b ? bi * J * K : 0), I, J, K, true);
      }
    }
  });
  return result;
}

Tensor transpose_last2(const Tensor& x) {
  const Shape& s = x.shape();
  check(s.size() == 2 || s.size() == 3, "E_SHAPE", "transpose_last2 supports 2D/3D");
  const int64_t B = s.size() == 3 ? s[0] : 1;
  const int64_t I = s[s.size() - 2], J = s[s.size() - 1];
  std::vector<double> out(B * I * J);
  const double* p = x.data().data();
  for (int64_t b = 0; b < B; ++b)
    for (int64_t i = 0; i < I; ++i)
      for (int64_t j = 0; j < J; ++j) out[b * I * J + j * I + i] = p[b * I * J + i * J + j];
  Shape os = s;
  std::swap(os[os.size() - 1], os[os.size() - 2]);
  Tensor result = finish_op(std::move(os), std::move(out), "transpose_last2");
  auto xn = x.node(), on = result.node();
  maybe_record(result, {x}, [xn, on, B, I, J]() {
    if (!grad_ready(on)) return;
    xn->ensure_grad();
    for (int64_t b = 0; b < B; ++b)
      for (int64_t j = 0; j < J; ++j)
        for (int64_t i = 0; i < I; ++i)
          xn->grad[b * I * J + i * J + j] += on->grad[b * I * J + j * I + i];
  });
  return result;
}

// ---- conv2d -----------------------------------------------------------------

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int64_t stride, int64_t pad) {
  const Shape& sx = x.shape();
  const Shape& sw = w.shape();
  check(sx.size() == 4, "E_SHAPE", "conv2d input must be [B,h,w,cin], got " + shape_str(sx));
  check(sw.size() == 4 && sw[0] == sw[1], "E_SHAPE", "conv2d kernel must be [k,k,cin,cout]");
  check(stride >= 1 && pad >= 0, "E_SHAPE", "conv2d requires stride>=1, pad>=0");
  const int64_t B = sx[0], H = sx[1], W = sx[2], CI = sx[3];
  const int64_t K = sw[0], CO = sw[3];
  check(sw[2] == CI, "E_SHAPE", "conv2d channel mismatch");
  check(H + 2 * pad >= K && W + 2 * pad >= K, "E_SHAPE", "conv2d kernel larger than padded input");
  if (bias.defined()) check(bias.size() == CO, "E_SHAPE", "conv2d bias length mismatch");
  const int64_t OH = (H + 2 * pad - K) / stride + 1;
  const int64_t OW = (W + 2 * pad - K) / stride + 1;

  std::vector<double> out(B * OH * OW * CO, 0.0);
  const double* px = x.data().data();
  const double* pw = w.data().data();
  for (int64_t b = 0; b < B; ++b) {
    for (int64_t oy = 0; oy < OH; ++oy) {
      for (int64_t ox = 0; ox < OW; ++ox) {
        double* orow = out.data() + ((b * OH + oy) * OW + ox) * CO;
        if (bias.defined()) {
          const double* pb = bias.data().data();
          for (int64_t co = 0; co < CO; ++co) orow[co] = pb[co];
        }
        for (int64_t ky = 0; ky < K; ++ky) {
          const int64_t iy = oy * stride + ky - pad;
          if (iy < 0 || iy >= H) continue;
          for (int64_t kx = 0; kx < K; ++kx) {
            const int64_t ix = ox * stride + kx - pad;
            if (ix < 0 || ix >= W) continue;
            const double* irow = px + ((b * H + iy) * W + ix) * CI;
            const double* wrow = pw + (ky * K + kx) * CI * CO;
            for (int64_t ci = 0; ci < CI; ++ci) {
              const double v = irow[ci];
              const double* wr = wrow + ci * CO;
              for (int64_t co = 0; co < CO; ++co) orow[co] += v * wr[co];
            }
          }
        }
      }
    }
  }

  Tensor result = finish_op({B, OH, OW, CO}, std::move(out), "conv2d");
  auto xn = x.node(), wn = w.node(), on = result.node();
  auto bn = bias.defined() ? bias.node() : nullptr;
  maybe_record(result, {x, w, bias}, [xn, wn, bn, on, B, H, W, CI, K, CO, OH, OW, stride, pad]() {
    if (!grad_ready(on)) return;
    const double* g = on->grad.data();
    const bool gx = xn->requires_grad, gw = wn->requires_grad;
    const bool gb = bn && bn->requires_grad;
    if (gx) xn->ensure_grad();
    if (gw) wn->ensure_grad();
    if (gb) bn->ensure_grad();
    for (int64_t b = 0; b < B; ++b) {
      for (int64_t oy = 0; oy < OH; ++oy) {
        for (int64_t ox = 0; ox < OW; ++ox) {
          const double* grow = g + ((b * OH + oy) * OW + ox) * CO;
          if (gb) {
            for (int64_t co = 0; co < CO; ++co) bn->grad[co] += grow[co];
          }
          for (int64_t ky = 0; ky < K; ++ky) {
            const int64_t iy = oy * stride + ky - pad;
            if (iy < 0 || iy >= H) continue;
            for (int64_t kx = 0; kx < K; ++kx) {
              const int64_t ix = ox * stride + kx - pad;
              if (ix < 0 || ix >= W) continue;
              const int64_t ioff = ((b * H + iy) * W + ix) * CI;
              const int64_t woff = (ky * K + kx) * CI * CO;
              for (int64_t ci = 0; ci < CI; ++ci) {
                if (gx) {
                  const double* wr = wn->data.data() + woff + ci * CO;
                  double s = 0.0;
                  for (int64_t co = 0; co < CO; ++co) s += grow[co] * wr[co];
                  xn->grad[ioff + ci] += s;
                }
                if (gw) {
                  const double v = xn->data[ioff + ci];
                  double* wgr = wn->grad.data() + woff + ci * CO;
                  for (int64_t co = 0; co < CO; ++co) wgr[co] += v * grow[co];
                }
              }
            }
          }
        }
      }
    }
  });
  return result;
}

Tensor avg_pool2d(const Tensor& x, int64_t d) {
  const Shape& s = x.shape();
  check(s.size() == 4, "E_SHAPE", "avg_pool2d input must be [B,h,w,c]");
  check(d >= 1, "E_SHAPE", "avg_pool2d requires d>=1");
  const int64_t B = s[0], H = s[1], W = s[2], C = s[3];
  check(H % d == 0 && W % d == 0, "E_SHAPE",
        "patch size " + std::to_string(d) + " does not divide the token map " + shape_str(s));
  const int64_t OH = H / d, OW = W / d;
  std::vector<double> out(B * OH * OW * C, 0.0);
  const double* p = x.data().data();
  const double inv = 1.0 / static_cast<double>(d * d);
  for (int64_t b = 0; b < B; ++b)
    for (int64_t oy = 0; oy < OH; ++oy)
      for (int64_t ox = 0; ox < OW; ++ox) {
        double* orow = out.data() + ((b * OH + oy) * OW + ox) * C;
        for (int64_t dy = 0; dy < d; ++dy)
          for (int64_t dx = 0; dx < d; ++dx) {
            const double* irow = p + ((b * H + oy * d + dy) * W + ox * d + dx) * C;
            for (int64_t c = 0; c < C; ++c) orow[c] += irow[c] * inv;
          }
      }
  Tensor result = finish_op({B, OH, OW, C}, std::move(out), "avg_pool2d");
  auto xn = x.node(), on = result.node();
  maybe_record(result, {x}, [xn, on, B, H, W, C, d, OH, OW, inv]() {
    if (!grad_ready(on)) return;
    xn->ensure_grad();
    for (int64_t b = 0; b < B; ++b)
      for (int64_t oy = 0; oy < OH; ++oy)
        for (int64_t ox = 0; ox < OW; ++ox) {
          const double* grow = on->grad.data() + ((b * OH + oy) * OW + ox) * C;
          for (int64_t dy = 0; dy < d; ++dy)
            for (int64_t dx = 0; dx < d; ++dx) {
              double* irow = xn->grad.data() + ((b * H + oy * d + dy) * W + ox * d + dx) * C;
              for (int64_t c = 0; c < C; ++c) irow[c] += grow[c] * inv;
            }
        }
  });
  return result;
}

// ---- softmax ----------------------------------------------------------------

Tensor softmax(const Tensor& x, int64_t axis) {
  const Shape& s = x.shape();
  axis = axis_index(axis, static_cast<int64_t>(s.size()));
  const int64_t L = s[axis];
  check(L >= 1, "E_SHAPE", "softmax axis must be non-empty");
  int64_t outer = 1, inner = 1;
  for (int64_t i = 0; i < axis; ++i) outer *= s[i];
  for (size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];

  std::vector<double> out(x.size());
  std::vector<double> row(L);
  const double* p = x.data().data();
  for (int64_t o = 0; o < outer; ++o) {
    for (int64_t in = 0; in < inner; ++in) {
      const int64_t base = o * L * inner + in;
      double mx = p[base];
      for (int64_t l = 1; l < L; ++l) mx = std::max(mx, p[base + l * inner]);
      for (int64_t l = 0; l < L; ++l) row[l] = p[base + l * inner] - mx;
      detail::exp_batch_inplace(row.data(), L);
      double sum = 0.0;
      for (int64_t l = 0; l < L; ++l) sum += row[l];
      const double invs = 1.0 / sum;
      for (int64_t l = 0; l < L; ++l) out[base + l * inner] = row[l] * invs;
    }
  }
  Tensor result = finish_op(s, std::move(out), "softmax");
  auto xn = x.node(), on = result.node();
  maybe_record(result, {x}, [xn, on, outer, inner, L]() {
    if (!grad_ready(on)) return;
    xn->ensure_grad();
    for (int64_t o = 0; o < outer; ++o)
      for (int64_t in = 0; in < inner; ++in) {
        const int64_t base = o * L * inner + in;
        double dot = 0.0;
        for (int64_t l = 0; l < L; ++l) dot += on->grad[base + l * inner] * on->data[base + l * inner];
        for (int64_t l = 0; l < L; ++l) {
          const int64_t i = base + l * inner;
          xn->grad[i] += on->data[i] * (on->grad[i] - dot);
        }
      }
  });
  return result;
}

// ---- elementwise ------------------------------------------------------------

namespace {

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  check(a.shape() == b.shape(), "E_SHAPE",
        std::string(op) + " shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  std::vector<double> out(a.size());
  for (int64_t i = 0; i < a.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  Tensor result = finish_op(a.shape(), std::move(out), "add");
  auto an = a.node(), bn = b.node(), on = result.node();
  maybe_record(result, {a, b}, [an, bn, on]() {
    if (!grad_ready(on)) return;
    if (an->requires_grad) accumulate(an, on->grad);
    if (bn->requires_grad) accumulate(bn, on->grad);
  });
  return result;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  std::vector<double> out(a.size());
  for (int64_t i = 0; i < a.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  Tensor result = finish_op(a.shape(), std::move(out), "sub");
  auto an = a.node(), bn = b.node(), on = result.node();
  maybe_record(result, {a, b}, [an, bn, on]() {
    if (!grad_ready(on)) return;
    if (an->requires_grad) accumulate(an, on->grad);
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (size_t i = 0; i < on->grad.size(); ++i) bn->grad[i] -= on->grad[i];
    }
  });
  return result;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  std::vector<double> out(a.size());
  for (int64_t i = 0; i < a.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  Tensor result = finish_op(a.shape(), std::move(out), "mul");
  auto an = a.node(), bn = b.node(), on = result.node();
  maybe_record(result, {a, b}, [an, bn, on]() {
    if (!grad_ready(on)) return;
    if (an->requires_grad) {
      an->ensure_grad();
      for (size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i] * bn->data[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (size_t i = 0; i < on->grad.size(); ++i) bn->grad[i] += on->grad[i] * an->data[i];
    }
  });
  return result;
}

Tensor scale(const Tensor& x, double s) {
  std::vector<double> out(x.size());
  for (int64_t i = 0; i < x.size(); ++i) out[i] = x.data()[i] * s;
  Tensor result = finish_op(x.shape(), std::move(out), "scale");
  auto xn = x.node(), on = result.node();
  maybe_record(result, {x}, [xn, on, s]() {
    if (!grad_ready(on)) return;
    xn->ensure_grad();
    for (size_t i = 0; i < on->grad.size(); ++i) xn->grad[i] += on->grad[i] * s;
  });
  return result;
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  const int64_t C = x.dim(-1);
  check(bias.ndim() == 1 && bias.size() == C, "E_SHAPE", "add_bias length mismatch");
  std::vector<double> out(x.size());
  const int64_t rows = x.size() / C;
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t c = 0; c < C; ++c) out[r * C + c] = x.data()[r * C + c] + bias.data()[c];
  Tensor result = finish_op(x.shape(), std::move(out), "add_bias");
  auto xn = x.node(), bn = bias.node(), on = result.node();
  maybe_record(result, {x, bias}, [xn, bn, on, rows, C]() {
    if (!grad_ready(on)) return;
    if (xn->requires_grad) accumulate(xn, on->grad);
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (int64_t r = 0; r < rows; ++r)
        for (int64_t c = 0; c < C; ++c) bn->grad[c] += on->grad[r * C + c];
    }
  });
  return result;
}

namespace {
double g_relu_min_abs = 1e300;
}

double relu_min_abs_input() { return g_relu_min_abs; }
void reset_relu_min_abs_input() { g_relu_min_abs = 1e300; }

Tensor relu(const Tensor& x) {
  std::vector<double> out(x.size());
  double local_min = g_relu_min_abs;
  for (int64_t i = 0; i < x.size(); ++i) {
    const double v = x.data()[i];
    // exact zeros come from all-zero receptive fields and stay pinned there
    const double a = std::abs(v);
    if (a != 0.0 && a < local_min) local_min = a;
    out[i] = v > 0.0 ? v : 0.0;
  }
  g_relu_min_abs = local_min;
  Tensor result = finish_op(x.shape(), std::move(out), "relu");
  auto xn = x.node(), on = result.node();
  maybe_record(result, {x}, [xn, on]() {
    if (!grad_ready(on)) return;
    xn->ensure_grad();
    for (size_t i = 0; i < on->grad.size(); ++i)
      if (xn->data[i] > 0.0) xn->grad[i] += on->grad[i];
  });
  return result;
}

// ---- layout ops -------------------------------------------------------------

Tensor concat(const std::vector<Tensor>& parts, int64_t axis) {
  check(!parts.empty(), "E_SHAPE", "concat of zero tensors");
  const Shape& s0 = parts[0].shape();
  axis = axis_index(axis, static_cast<int64_t>(s0.size()));
  int64_t total = 0;
  for (const Tensor& p : parts) {
    const Shape& s = p.shape();
    check(s.size() == s0.size(), "E_SHAPE", "concat rank mismatch");
    for (size_t i = 0; i < s.size(); ++i)
      if (static_cast<int64_t>(i) != axis)
        check(s[i] == s0[i], "E_SHAPE", "concat extent mismatch off the concat axis");
    total += s[axis];
  }
  Shape os = s0;
  os[axis] = total;
  int64_t outer = 1, inner = 1;
  for (int64_t i = 0; i < axis; ++i) outer *= s0[i];
  for (size_t i = axis + 1; i < s0.size(); ++i) inner *= s0[i];

  std::vector<double> out(shape_size(os));
  int64_t off = 0;
  for (const Tensor& p : parts) {
    const int64_t len = p.shape()[axis] * inner;
    for (int64_t o = 0; o < outer; ++o)
      std::memcpy(out.data() + o * total * inner + off, p.data().data() + o * len, len * sizeof(double));
    off += len;
  }
  Tensor result = finish_op(std::move(os), std::move(out), "concat");
  std::vector<NodePtr> ins;
  ins.reserve(parts.size());
  bool any = false;
  for (const Tensor& p : parts) {
    ins.push_back(p.node());
    any = any || p.requires_grad();
  }
  auto on = result.node();
  if (Tape::recording() && any) {
    result.node()->requires_grad = true;
    result.node()->tape = Tape::current();
    Tape::current()->record([ins, on, outer, inner, total]() {
      if (!grad_ready(on)) return;
      int64_t off = 0;
      for (const NodePtr& n : ins) {
        const int64_t len = n->size() / outer;
        if (n->requires_grad) {
          n->ensure_grad();
          for (int64_t o = 0; o < outer; ++o)
            for (int64_t i = 0; i < len; ++i) n->grad[o * len + i] += on->grad[o * total * inner + off + i];
        }
        off += len;
      }
    });
  }
  return result;
}

Tensor slice(const Tensor& x, int64_t axis, int64_t start, int64_t len) {
  const Shape& s = x.shape();
  axis = axis_index(axis, static_cast<int64_t>(s.size()));
  check(start >= 0 && len >= 1 && start + len <= s[axis], "E_SHAPE",
        "slice range [" + std::to_string(start) + "," + std::to_string(start + len) + ") out of bounds for extent " +
            std::to_string(s[axis]));
  int64_t outer = 1, inner = 1;
  for (int64_t i = 0; i < axis; ++i) outer *= s[i];
  for (size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  Shape os = s;
  os[axis] = len;
  std::vector<double> out(outer * len * inner);
  const int64_t L = s[axis];
  for (int64_t o = 0; o < outer; ++o)
    std::memcpy(out.data() + o * len * inner, x.data().data() + (o * L + start) * inner,
                len * inner * sizeof(double));
  Tensor result = finish_op(std::move(os), std::move(out), "slice");
  auto xn = x.node(), on = result.node();
  maybe_record(result, {x}, [xn, on, outer, inner, L, start, len]() {
    if (!grad_ready(on)) return;
    xn->ensure_grad();
    for (int64_t o = 0; o < outer; ++o)
      for (int64_t i = 0; i < len * inner; ++i)
        xn->grad[(o * L + start) * inner + i] += on->grad[o * len * inner + i];
  });
  return result;
}

Tensor index_select0(const Tensor& x, const std::vector<int64_t>& indices) {
  const Shape& s = x.shape();
  check(!s.empty(), "E_SHAPE", "index_select0 requires rank >= 1");
  const int64_t rows = s[0];
  const int64_t stride = x.size() / std::max<int64_t>(rows, 1);
  for (int64_t i : indices) check(i >= 0 && i < rows, "E_SHAPE", "index_select0 index out of range");
  Shape os = s;
  os[0] = static_cast<int64_t>(indices.size());
  std::vector<double> out(indices.size() * stride);
  for (size_t r = 0; r < indices.size(); ++r)
    std::memcpy(out.data() + r * stride, x.data().data() + indices[r] * stride, stride * sizeof(double));
  Tensor result = finish_op(std::move(os), std::move(out), "index_select0");
  auto xn = x.node(), on = result.node();
  maybe_record(result, {x}, [xn, on, indices, stride]() {
    if (!grad_ready(on)) return;
    xn->ensure_grad();
    for (size_t r = 0; r < indices.size(); ++r)
      for (int64_t i = 0; i < stride; ++i)
        xn->grad[indices[r] * stride + i] += on->grad[r * stride + i];
  });
  return result;
}

Tensor reshape(const Tensor& x, const Shape& shape) {
  check(shape_size(shape) == x.size(), "E_SHAPE",
        "reshape " + shape_str(x.shape()) + " -> " + shape_str(shape) + " changes element count");
  std::vector<double> out(x.data().begin(), x.data().end());
  Tensor result = finish_op(shape, std::move(out), "reshape");
  auto xn = x.node(), on = result.node();
  maybe_record(result, {x}, [xn, on]() {
    if (!grad_ready(on)) return;
    accumulate(xn, on->grad);
  });
  return result;
}

Tensor stack0(const std::vector<Tensor>& parts) {
  check(!parts.empty(), "E_SHAPE", "stack0 of zero tensors");
  Shape os = parts[0].shape();
  os.insert(os.begin(), static_cast<int64_t>(parts.size()));
  const int64_t stride = parts[0].size();
  std::vector<double> out(parts.size() * stride);
  for (size_t i = 0; i < parts.size(); ++i) {
    check(parts[i].shape() == parts[0].shape(), "E_SHAPE", "stack0 shape mismatch");
    std::memcpy(out.data() + i * stride, parts[i].data().data(), stride * sizeof(double));
  }
  Tensor result = finish_op(std::move(os), std::move(out), "stack0");
  std::vector<NodePtr> ins;
  bool any = false;
  for (const Tensor& p : parts) {
    ins.push_back(p.node());
    any = any || p.requires_grad();
  }
  auto on = result.node();
  if (Tape::recording() && any) {
    result.node()->requires_grad = true;
    result.node()->tape = Tape::current();
    Tape::current()->record([ins, on, stride]() {
      if (!grad_ready(on)) return;
      for (size_t i = 0; i < ins.size(); ++i) {
        if (!ins[i]->requires_grad) continue;
        ins[i]->ensure_grad();
        for (int64_t j = 0; j < stride; ++j) ins[i]->grad[j] += on->grad[i * stride + j];
      }
    });
  }
  return result;
}

// ---- reductions -------------------------------------------------------------

Tensor mean_axis(const Tensor& x, int64_t axis) {
  const Shape& s = x.shape();
  axis = axis_index(axis, static_cast<int64_t>(s.size()));
  const int64_t L = s[axis];
  int64_t outer = 1, inner = 1;
  for (int64_t i = 0; i < axis; ++i) outer *= s[i];
  for (size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  Shape os;
  for (size_t i = 0; i < s.size(); ++i)
    if (static_cast<int64_t>(i) != axis) os.push_back(s[i]);
  if (os.empty()) os.push_back(1);
  std::vector<double> out(outer * inner, 0.0);
  const double inv = 1.0 / static_cast<double>(L);
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t l = 0; l < L; ++l)
      for (int64_t i = 0; i < inner; ++i) out[o * inner + i] += x.data()[(o * L + l) * inner + i] * inv;
  Tensor result = finish_op(std::move(os), std::move(out), "mean_axis");
  auto xn = x.node(), on = result.node();
  maybe_record(result, {x}, [xn, on, outer, inner, L, inv]() {
    if (!grad_ready(on)) return;
    xn->ensure_grad();
    for (int64_t o = 0; o < outer; ++o)
      for (int64_t l = 0; l < L; ++l)
        for (int64_t i = 0; i < inner; ++i)
          xn->grad[(o * L + l) * inner + i] += on->grad[o * inner + i] * inv;
  });
  return result;
}

Tensor mean_all(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  const double inv = 1.0 / static_cast<double>(x.size());
  Tensor result = finish_op({1}, {s * inv}, "mean_all");
  auto xn = x.node(), on = result.node();
  maybe_record(result, {x}, [xn, on, inv]() {
    if (!grad_ready(on)) return;
    xn->ensure_grad();
    const double g = on->grad[0] * inv;
    for (double& v : xn->grad) v += g;
  });
  return result;
}

Tensor sum_all(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  Tensor result = finish_op({1}, {s}, "sum_all");
  auto xn = x.node(), on = result.node();
  maybe_record(result, {x}, [xn, on]() {
    if (!grad_ready(on)) return;
    xn->ensure_grad();
    const double g = on->grad[0];
    for (double& v : xn->grad) v += g;
  });
  return result;
}

// ---- normalization ----------------------------------------------------------

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const int64_t C = x.dim(-1);
  check(gamma.size() == C && beta.size() == C, "E_SHAPE", "layer_norm affine length mismatch");
  const int64_t rows = x.size() / C;
  std::vector<double> out(x.size());
  auto xhat = std::make_shared<std::vector<double>>(x.size());
  auto rstd = std::make_shared<std::vector<double>>(rows);
  for (int64_t r = 0; r < rows; ++r) {
    const double* px = x.data().data() + r * C;
    double mean = 0.0;
    for (int64_t c = 0; c < C; ++c) mean += px[c];
    mean /= static_cast<double>(C);
    double var = 0.0;
    for (int64_t c = 0; c < C; ++c) {
      const double d = px[c] - mean;
      var += d * d;
    }
    var /= static_cast<double>(C);
    const double rs = 1.0 / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (int64_t c = 0; c < C; ++c) {
      const double h = (px[c] - mean) * rs;
      (*xhat)[r * C + c] = h;
      out[r * C + c] = h * gamma.data()[c] + beta.data()[c];
    }
  }
  Tensor result = finish_op(x.shape(), std::move(out), "layer_norm");
  auto xn = x.node(), gn = gamma.node(), bn = beta.node(), on = result.node();
  maybe_record(result, {x, gamma, beta}, [xn, gn, bn, on, xhat, rstd, rows, C]() {
    if (!grad_ready(on)) return;
    const bool need_x = xn->requires_grad;
    if (need_x) xn->ensure_grad();
    if (gn->requires_grad) gn->ensure_grad();
    if (bn->requires_grad) bn->ensure_grad();
    for (int64_t r = 0; r < rows; ++r) {
      const double* g = on->grad.data() + r * C;
      const double* h = xhat->data() + r * C;
      if (gn->requires_grad)
        for (int64_t c = 0; c < C; ++c) gn->grad[c] += g[c] * h[c];
      if (bn->requires_grad)
        for (int64_t c = 0; c < C; ++c) bn->grad[c] += g[c];
      if (need_x) {
        double mean_dh = 0.0, mean_dhh = 0.0;
        for (int64_t c = 0; c < C; ++c) {
          const double dh = g[c] * gn->data[c];
          mean_dh += dh;
          mean_dhh += dh * h[c];
        }
        mean_dh /= static_cast<double>(C);
        mean_dhh /= static_cast<double>(C);
        const double rs = (*rstd)[r];
        for (int64_t c = 0; c < C; ++c) {
          const double dh = g[c] * gn->data[c];
          xn->grad[r * C + c] += rs * (dh - mean_dh - h[c] * mean_dhh);
        }
      }
    }
  });
  return result;
}

Tensor l2_normalize_rows(const Tensor& x) {
  const int64_t C = x.dim(-1);
  const int64_t rows = x.size() / C;
  constexpr double kMinNorm = 1e-12;
  std::vector<double> out(x.size());
  auto norms = std::make_shared<std::vector<double>>(rows);
  for (int64_t r = 0; r < rows; ++r) {
    const double* px = x.data().data() + r * C;
    double n = 0.0;
    for (int64_t c = 0; c < C; ++c) n += px[c] * px[c];
    n = std::sqrt(n);
    const bool clamped = n < kMinNorm;
    if (clamped) n = kMinNorm;
    (*norms)[r] = clamped ? -n : n;  // sign marks the clamp
    for (int64_t c = 0; c < C; ++c) out[r * C + c] = px[c] / n;
  }
  Tensor result = finish_op(x.shape(), std::move(out), "l2_normalize_rows");
  auto xn = x.node(), on = result.node();
  maybe_record(result, {x}, [xn, on, norms, rows, C]() {
    if (!grad_ready(on)) return;
    xn->ensure_grad();
    for (int64_t r = 0; r < rows; ++r) {
      const double* g = on->grad.data() + r * C;
      const double* y = on->data.data() + r * C;
      const double stored = (*norms)[r];
      const double n = std::abs(stored);
      if (stored < 0.0) {
        for (int64_t c = 0; c < C; ++c) xn->grad[r * C + c] += g[c] / n;
        continue;
      }
      double dot = 0.0;
      for (int64_t c = 0; c < C; ++c) dot += g[c] * y[c];
      for (int64_t c = 0; c < C; ++c) xn->grad[r * C + c] += (g[c] - y[c] * dot) / n;
    }
  });
  return result;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  const Shape& sx = x.shape();
  check(w.ndim() == 2, "E_SHAPE", "linear weight must be 2D");
  check(sx.back() == w.dim(0), "E_SHAPE",
        "linear input " + shape_str(sx) + " vs weight " + shape_str(w.shape()));
  Tensor x2 = sx.size() == 2 ? x : reshape(x, {x.size() / sx.back(), sx.back()});
  Tensor y = matmul(x2, w);
  if (b.defined()) y = add_bias(y, b);
  if (sx.size() != 2) {
    Shape os = sx;
    os.back() = w.dim(1);
    y = reshape(y, os);
  }
  return y;
}

// ---- fused multi-head attention ----------------------------------------------

namespace {

// Head slices in transposed [dh][N] layout so every loop runs contiguously
// over N and the working set stays cache-resident.
void pack_head_t(const double* x, int64_t N, int64_t C, int64_t h0, int64_t dh, double* out) {
  for (int64_t d = 0; d < dh; ++d)
    for (int64_t i = 0; i < N; ++i) out[d * N + i] = x[i * C + h0 + d];
}

// one softmax(q_i K^T / sqrt(dh)) row, unnormalized exp with the row sum
// returned; scores never materialize as an N x N matrix
double attention_row(const double* q_t, const double* k_t, int64_t N, int64_t dh, double scl,
                     int64_t i, double* row) {
  const double q0 = q_t[i] * scl;
  for (int64_t j = 0; j < N; ++j) row[j] = q0 * k_t[j];
  for (int64_t d = 1; d < dh; ++d) {
    const double qi = q_t[d * N + i] * scl;
    const double* kd = k_t + d * N;
    for (int64_t j = 0; j < N; ++j) row[j] += qi * kd[j];
  }
  double mx = row[0];
  for (int64_t j = 1; j < N; ++j) mx = std::max(mx, row[j]);
  for (int64_t j = 0; j < N; ++j) row[j] -= mx;
  detail::exp_batch_inplace(row, N);
  double sum = 0.0;
  for (int64_t j = 0; j < N; ++j) sum += row[j];
  return sum;
}

}  // namespace

Tensor msa_core(const Tensor& q, const Tensor& k, const Tensor& v, int64_t heads) {
  const Shape& s = q.shape();
  check(s.size() == 3, "E_SHAPE", "msa_core expects [P,N,c]");
  check(k.shape() == s && v.shape() == s, "E_SHAPE", "msa_core q/k/v shape mismatch");
  const int64_t P = s[0], N = s[1], C = s[2];
  check(heads >= 1 && C % heads == 0, "E_SHAPE",
        "channel count " + std::to_string(C) + " not divisible by " + std::to_string(heads) + " heads");
  const int64_t dh = C / heads;
  const double scl = 1.0 / std::sqrt(static_cast<double>(dh));

  std::vector<double> out(q.size(), 0.0);
  std::vector<double> q_t(dh * N), k_t(dh * N), v_t(dh * N), row(N);
  const double* pq = q.data().data();
  const double* pk = k.data().data();
  const double* pv = v.data().data();
  for (int64_t p = 0; p < P; ++p) {
    for (int64_t h = 0; h < heads; ++h) {
      const int64_t h0 = h * dh;
      pack_head_t(pq + p * N * C, N, C, h0, dh, q_t.data());
      pack_head_t(pk + p * N * C, N, C, h0, dh, k_t.data());
      pack_head_t(pv + p * N * C, N, C, h0, dh, v_t.data());
      for (int64_t i = 0; i < N; ++i) {
        const double sum = attention_row(q_t.data(), k_t.data(), N, dh, scl, i, row.data());
        const double inv = 1.0 / sum;
        double* orow = out.data() + (p * N + i) * C + h0;
        for (int64_t d = 0; d < dh; ++d) {
          const double* vd = v_t.data() + d * N;
          double acc = 0.0;
          for (int64_t j = 0; j < N; ++j) acc += row[j] * vd[j];
          orow[d] = acc * inv;
        }
      }
    }
  }

  Tensor result = finish_op(s, std::move(out), "msa_core");
  auto qn = q.node(), kn = k.node(), vn = v.node(), on = result.node();
  maybe_record(result, {q, k, v}, [qn, kn, vn, on, P, N, C, heads, dh, scl]() {
    if (!grad_ready(on)) return;
    if (qn->requires_grad) qn->ensure_grad();
    if (kn->requires_grad) kn->ensure_grad();
    if (vn->requires_grad) vn->ensure_grad();
    std::vector<double> q_t(dh * N), k_t(dh * N), v_t(dh * N), g_t(dh * N);
    std::vector<double> dq_t(dh * N), dk_t(dh * N), dv_t(dh * N);
    std::vector<double> prob(N), dp(N);
    for (int64_t p = 0; p < P; ++p) {
      for (int64_t h = 0; h < heads; ++h) {
        const int64_t h0 = h * dh;
        pack_head_t(qn->data.data() + p * N * C, N, C, h0, dh, q_t.data());
        pack_head_t(kn->data.data() + p * N * C, N, C, h0, dh, k_t.data());
        pack_head_t(vn->data.data() + p * N * C, N, C, h0, dh, v_t.data());
        pack_head_t(on->grad.data() + p * N * C, N, C, h0, dh, g_t.data());
        std::fill(dq_t.begin(), dq_t.end(), 0.0);
        std::fill(dk_t.begin(), dk_t.end(), 0.0);
        std::fill(dv_t.begin(), dv_t.end(), 0.0);
        for (int64_t i = 0; i < N; ++i) {
          const double sum = attention_row(q_t.data(), k_t.data(), N, dh, scl, i, prob.data());
          const double inv = 1.0 / sum;
          for (int64_t j = 0; j < N; ++j) prob[j] *= inv;

          // dprob = g_i V^T ; dv += prob outer g_i
          std::fill(dp.begin(), dp.end(), 0.0);
          for (int64_t d = 0; d < dh; ++d) {
            const double gd = g_t[d * N + i];
            const double* vd = v_t.data() + d * N;
            double* dvd = dv_t.data() + d * N;
            for (int64_t j = 0; j < N; ++j) {
              dp[j] += gd * vd[j];
              dvd[j] += gd * prob[j];
            }
          }
          double rowdot = 0.0;
          for (int64_t j = 0; j < N; ++j) rowdot += prob[j] * dp[j];
          // reuse dp as dscores
          for (int64_t j = 0; j < N; ++j) dp[j] = prob[j] * (dp[j] - rowdot) * scl;
          for (int64_t d = 0; d < dh; ++d) {
            const double* kd = k_t.data() + d * N;
            double* dkd = dk_t.data() + d * N;
            const double qd = q_t[d * N + i];
            double acc = 0.0;
            for (int64_t j = 0; j < N; ++j) {
              acc += dp[j] * kd[j];
              dkd[j] += qd * dp[j];
            }
            dq_t[d * N + i] = acc;
          }
        }
        if (qn->requires_grad) {
          double* qg = qn->grad.data() + p * N * C + h0;
          for (int64_t d = 0; d < dh; ++d)
            for (int64_t i = 0; i < N; ++i) qg[i * C + d] += dq_t[d * N + i];
        }
        if (kn->requires_grad) {
          double* kg = kn->grad.data() + p * N * C + h0;
          for (int64_t d = 0; d < dh; ++d)
            for (int64_t j = 0; j < N; ++j) kg[j * C + d] += dk_t[d * N + j];
        }
        if (vn->requires_grad) {
          double* vg = vn->grad.data() + p * N * C + h0;
          for (int64_t d = 0; d < dh; ++d)
            for (int64_t j = 0; j < N; ++j) vg[j * C + d] += dv_t[d * N + j];
        }
      }
    }
  });
  return result;
}

// ---- token exchange -----------------------------------------------------------

Tensor exchange(const Tensor& bank, const std::vector<int64_t>& positions,
                const std::vector<int64_t>& partner, bool donor_grad) {
  const Shape& s = bank.shape();
  check(s.size() == 3, "E_SHAPE", "exchange expects a [P,N,c] bank");
  const int64_t P = s[0], N = s[1], C = s[2];
  check(static_cast<int64_t>(partner.size()) == P, "E_SHAPE", "partner permutation length mismatch");
  for (int64_t i = 0; i < P; ++i)
    check(partner[i] >= 0 && partner[i] < P, "E_SHAPE", "partner index out of range");
  std::vector<char> in_strip(N, 0);
  for (int64_t q : positions) {
    check(q >= 0 && q < N, "E_SHAPE", "exchange position out of range");
    in_strip[q] = 1;
  }

  std::vector<double> out(bank.size());
  const double* pb = bank.data().data();
  for (int64_t i = 0; i < P; ++i) {
    for (int64_t n = 0; n < N; ++n) {
      const int64_t src = in_strip[n] ? partner[i] : i;
      std::memcpy(out.data() + (i * N + n) * C, pb + (src * N + n) * C, C * sizeof(double));
    }
  }
  Tensor result = finish_op(s, std::move(out), "exchange");
  auto bn = bank.node(), on = result.node();
  auto strip = std::make_shared<std::vector<char>>(std::move(in_strip));
  maybe_record(result, {bank}, [bn, on, strip, partner, donor_grad, P, N, C]() {
    if (!grad_ready(on)) return;
    bn->ensure_grad();
    for (int64_t i = 0; i < P; ++i) {
      for (int64_t n = 0; n < N; ++n) {
        const bool swapped = (*strip)[n];
        if (swapped && !donor_grad) continue;
        const int64_t dst = swapped ? partner[i] : i;
        const double* g = on->grad.data() + (i * N + n) * C;
        double* bg = bn->grad.data() + (dst * N + n) * C;
        for (int64_t c = 0; c < C; ++c) bg[c] += g[c];
      }
    }
  });
  return result;
}

// ---- losses as ops ------------------------------------------------------------

Tensor softmax_cross_entropy_mean(const Tensor& logits, const std::vector<int64_t>& labels) {
  const Shape& s = logits.shape();
  check(s.size() == 2, "E_SHAPE", "cross entropy expects [B,K] logits");
  const int64_t B = s[0], K = s[1];
  check(static_cast<int64_t>(labels.size()) == B, "E_SHAPE", "label count mismatch");
  for (int64_t l : labels) check(l >= 0 && l < K, "E_RANGE", "label out of range");

  auto probs = std::make_shared<std::vector<double>>(logits.size());
  double loss = 0.0;
  const double* p = logits.data().data();
  for (int64_t b = 0; b < B; ++b) {
    const double* row = p + b * K;
    double mx = row[0];
    for (int64_t k = 1; k < K; ++k) mx = std::max(mx, row[k]);
    double* prow = probs->data() + b * K;
    for (int64_t k = 0; k < K; ++k) prow[k] = row[k] - mx;
    detail::exp_batch_inplace(prow, K);
    double sum = 0.0;
    for (int64_t k = 0; k < K; ++k) sum += prow[k];
    const double inv = 1.0 / sum;
    for (int64_t k = 0; k < K; ++k) (*probs)[b * K + k] *= inv;
    loss -= std::log((*probs)[b * K + labels[b]]);
  }
  loss /= static_cast<double>(B);
  Tensor result = finish_op({1}, {loss}, "softmax_cross_entropy_mean");
  auto ln = logits.node(), on = result.node();
  maybe_record(result, {logits}, [ln, on, probs, labels, B, K]() {
    if (!grad_ready(on)) return;
    ln->ensure_grad();
    const double g = on->grad[0] / static_cast<double>(B);
    for (int64_t b = 0; b < B; ++b)
      for (int64_t k = 0; k < K; ++k)
        ln->grad[b * K + k] += g * ((*probs)[b * K + k] - (labels[b] == k ? 1.0 : 0.0));
  });
  return result;
}

Tensor smooth_l1_mean(const Tensor& pred, const Tensor& target) {
  check_same_shape(pred, target, "smooth_l1_mean");
  const int64_t n = pred.size();
  double loss = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    const double z = pred.data()[i] - target.data()[i];
    const double az = std::abs(z);
    loss += az < 1.0 ? 0.5 * z * z : az - 0.5;
  }
  loss /= static_cast<double>(n);
  Tensor result = finish_op({1}, {loss}, "smooth_l1_mean");
  auto pn = pred.node(), tn = target.node(), on = result.node();
  maybe_record(result, {pred, target}, [pn, tn, on, n]() {
    if (!grad_ready(on)) return;
    const double g = on->grad[0] / static_cast<double>(n);
    if (pn->requires_grad) pn->ensure_grad();
    if (tn->requires_grad) tn->ensure_grad();
    for (int64_t i = 0; i < n; ++i) {
      const double z = pn->data[i] - tn->data[i];
      const double d = std::abs(z) < 1.0 ? z : (z > 0.0 ? 1.0 : -1.0);
      if (pn->requires_grad) pn->grad[i] += g * d;
      if (tn->requires_grad) tn->grad[i] -= g * d;
    }
  });
  return result;
}

// ---- serialization -------------------------------------------------------------

void write_tensor_blob(std::ostream& out, const Tensor& t, const std::string& name) {
  write_tensor_blob(out, t, name, precision());
}

void write_tensor_blob(std::ostream& out, const Tensor& t, const std::string& name, Precision dtype) {
  nlohmann::json header;
  header["shape"] = t.shape();
  header["dtype"] = dtype == Precision::f32 ? "f32" : "f64";
  header["name"] = name;
  const std::string hs = header.dump();
  const uint32_t len = static_cast<uint32_t>(hs.size());
  out.write(reinterpret_cast<const char*>(&len), 4);
  out.write(hs.data(), hs.size());
  if (dtype == Precision::f32) {
    std::vector<float> buf(t.size());
    for (int64_t i = 0; i < t.size(); ++i) buf[i] = static_cast<float>(t.data()[i]);
    out.write(reinterpret_cast<const char*>(buf.data()), buf.size() * sizeof(float));
  } else {
    out.write(reinterpret_cast<const char*>(t.data().data()), t.size() * sizeof(double));
  }
  check(out.good(), "E_IO", "tensor blob write failed");
}

NamedTensor read_tensor_blob(std::istream& in) {
  uint32_t len = 0;
  in.read(reinterpret_cast<char*>(&len), 4);
  check(in.good(), "E_IO", "tensor blob header read failed");
  std::string hs(len, '\0');
  in.read(hs.data(), len);
  check(in.good(), "E_IO", "tensor blob header read failed");
  nlohmann::json header = nlohmann::json::parse(hs, nullptr, false);
  check(!header.is_discarded(), "E_FORMAT", "tensor blob header is not valid JSON");
  Shape shape = header.at("shape").get<Shape>();
  const std::string dtype = header.at("dtype").get<std::string>();
  const int64_t n = shape_size(shape);
  std::vector<double> data(n);
  if (dtype == "f32") {
    std::vector<float> buf(n);
    in.read(reinterpret_cast<char*>(buf.data()), n * sizeof(float));
    for (int64_t i = 0; i < n; ++i) data[i] = static_cast<double>(buf[i]);
  } else if (dtype == "f64") {
    in.read(reinterpret_cast<char*>(data.data()), n * sizeof(double));
  } else {
    throw Error("E_FORMAT", "unknown tensor dtype '" + dtype + "'");
  }
  check(in.good(), "E_IO", "tensor blob payload read failed");
  NamedTensor named;
  named.name = header.value("name", "");
  named.tensor = make_tensor(std::move(shape), std::move(data));
  return named;
}

void save_tensor_file(const std::string& path, const Tensor& t, const std::string& name) {
  std::ofstream out(path, std::ios::binary);
  check(out.good(), "E_IO", "cannot open '" + path + "' for writing");
  write_tensor_blob(out, t, name);
}

NamedTensor load_tensor_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  check(in.good(), "E_IO", "cannot open '" + path + "' for reading");
  return read_tensor_blob(in);
}

}  // namespace coat
