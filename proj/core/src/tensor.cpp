#include "metx/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>
#include <stdexcept>

namespace metx {

using detail::TensorNode;

namespace {

thread_local Tape* g_active_tape = nullptr;
thread_local ReluPatternProbe* g_relu_probe = nullptr;

void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

void check_finite(std::span<const float> v, const char* op) {
  int bad = 0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    const float d = v[i] - v[i];  // NaN for NaN/Inf inputs
    bad |= (d != 0.0f);
  }
  if (bad) {
    throw std::runtime_error(std::string(op) + ": non-finite value produced");
  }
}

std::vector<std::int64_t> row_major_strides(const Shape& shape) {
  std::vector<std::int64_t> strides(shape.size(), 1);
  for (std::int64_t i = static_cast<std::int64_t>(shape.size()) - 2; i >= 0; --i) {
    strides[i] = strides[i + 1] * shape[i + 1];
  }
  return strides;
}

// Broadcast plan for two operands aligned on trailing axes. Strides are 0 on
// broadcast axes so an odometer walk yields both source offsets.
struct BcastPlan {
  Shape out;
  std::vector<std::int64_t> sa;
  std::vector<std::int64_t> sb;
};

BcastPlan make_bcast_plan(const Shape& a, const Shape& b, const char* op) {
  const std::int64_t ra = static_cast<std::int64_t>(a.size());
  const std::int64_t rb = static_cast<std::int64_t>(b.size());
  const std::int64_t r = std::max(ra, rb);
  BcastPlan plan;
  plan.out.assign(r, 1);
  for (std::int64_t ax = 0; ax < r; ++ax) {
    const std::int64_t ia = ax - (r - ra);
    const std::int64_t ib = ax - (r - rb);
    const std::int64_t ea = ia >= 0 ? a[ia] : 1;
    const std::int64_t eb = ib >= 0 ? b[ib] : 1;
    if (ea == eb || ea == 1 || eb == 1) {
      plan.out[ax] = std::max(ea, eb);
    } else {
      throw std::invalid_argument(std::string(op) + ": cannot broadcast " +
                                  shape_str(a) + " with " + shape_str(b));
    }
  }
  const auto stra = row_major_strides(a);
  const auto strb = row_major_strides(b);
  plan.sa.assign(r, 0);
  plan.sb.assign(r, 0);
  for (std::int64_t ax = 0; ax < r; ++ax) {
    const std::int64_t ia = ax - (r - ra);
    const std::int64_t ib = ax - (r - rb);
    if (ia >= 0 && a[ia] > 1) plan.sa[ax] = stra[ia];
    if (ib >= 0 && b[ib] > 1) plan.sb[ax] = strb[ib];
  }
  return plan;
}

// Walks the output index space of `plan`, calling body(out_off, a_off, b_off).
template <class Body>
void for_each_bcast(const BcastPlan& plan, Body body) {
  const std::int64_t total = shape_size(plan.out);
  const std::int64_t r = static_cast<std::int64_t>(plan.out.size());
  std::vector<std::int64_t> idx(r, 0);
  std::int64_t oa = 0, ob = 0;
  for (std::int64_t i = 0; i < total; ++i) {
    body(i, oa, ob);
    for (std::int64_t ax = r - 1; ax >= 0; --ax) {
      ++idx[ax];
      oa += plan.sa[ax];
      ob += plan.sb[ax];
      if (idx[ax] < plan.out[ax]) break;
      idx[ax] = 0;
      oa -= plan.sa[ax] * plan.out[ax];
      ob -= plan.sb[ax] * plan.out[ax];
    }
  }
}

void check_positive_extents(const Shape& shape, const char* op) {
  for (std::int64_t e : shape) {
    if (e <= 0) {
      throw std::invalid_argument(std::string(op) + ": extents must be positive, got " +
                                  shape_str(shape));
    }
  }
}

std::int64_t normalize_axis(std::int64_t axis, std::int64_t rank, const char* op) {
  const std::int64_t a = axis < 0 ? axis + rank : axis;
  if (a < 0 || a >= rank) {
    throw std::invalid_argument(std::string(op) + ": axis " + std::to_string(axis) +
                                " out of range for rank " + std::to_string(rank));
  }
  return a;
}

// ---- gemm kernels (row-major, f32) ----
//
// Register-blocked with GCC vector extensions; every kernel accumulates into
// c, so backward passes can add straight into grad buffers.

#if defined(__GNUC__) || defined(__clang__)
#define METX_VEC8 1
typedef float vf8 __attribute__((vector_size(32), aligned(4)));

inline vf8 load8(const float* p) { return *reinterpret_cast<const vf8*>(p); }
inline void store8(float* p, vf8 v) { *reinterpret_cast<vf8*>(p) = v; }
inline float hsum8(vf8 v) {
  float s = 0.0f;
  for (int l = 0; l < 8; ++l) s += v[l];
  return s;
}
#endif

void dot_rows(const float* __restrict a, const float* __restrict b,
              float* __restrict c, std::int64_t m, std::int64_t k) {
  // c[i] += dot(a_row_i, b), the n == 1 case
  for (std::int64_t i = 0; i < m; ++i) {
    const float* ai = a + i * k;
    std::int64_t kk = 0;
    float acc = 0.0f;
#ifdef METX_VEC8
    if (k >= 8) {
      vf8 vacc = {};
      for (; kk + 8 <= k; kk += 8) vacc += load8(ai + kk) * load8(b + kk);
      acc = hsum8(vacc);
    }
#endif
    for (; kk < k; ++kk) acc += ai[kk] * b[kk];
    c[i] += acc;
  }
}

void gemm_nn(const float* __restrict a, const float* __restrict b,
             float* __restrict c, std::int64_t m, std::int64_t k, std::int64_t n) {
  // c (m x n) += a (m x k) * b (k x n)
  if (n == 1) {
    dot_rows(a, b, c, m, k);
    return;
  }
  for (std::int64_t i = 0; i < m; ++i) {
    const float* ai = a + i * k;
    float* ci = c + i * n;
    std::int64_t j = 0;
#ifdef METX_VEC8
    for (; j + 16 <= n; j += 16) {
      vf8 acc0 = load8(ci + j);
      vf8 acc1 = load8(ci + j + 8);
      for (std::int64_t kk = 0; kk < k; ++kk) {
        const float av = ai[kk];
        const float* bk = b + kk * n + j;
        acc0 += av * load8(bk);
        acc1 += av * load8(bk + 8);
      }
      store8(ci + j, acc0);
      store8(ci + j + 8, acc1);
    }
    for (; j + 8 <= n; j += 8) {
      vf8 acc = load8(ci + j);
      for (std::int64_t kk = 0; kk < k; ++kk) acc += ai[kk] * load8(b + kk * n + j);
      store8(ci + j, acc);
    }
#endif
    for (; j < n; ++j) {
      float acc = ci[j];
      for (std::int64_t kk = 0; kk < k; ++kk) acc += ai[kk] * b[kk * n + j];
      ci[j] = acc;
    }
  }
}

void gemm_nt(const float* __restrict a, const float* __restrict bt,
             float* __restrict c, std::int64_t m, std::int64_t k, std::int64_t n) {
  // c (m x n) += a (m x k) * bt^T, bt stored (n x k)
  for (std::int64_t i = 0; i < m; ++i) {
    const float* ai = a + i * k;
    float* ci = c + i * n;
    for (std::int64_t j = 0; j < n; ++j) {
      const float* bj = bt + j * k;
      std::int64_t kk = 0;
      float acc = 0.0f;
#ifdef METX_VEC8
      if (k >= 16) {
        vf8 v0 = {}, v1 = {};
        for (; kk + 16 <= k; kk += 16) {
          v0 += load8(ai + kk) * load8(bj + kk);
          v1 += load8(ai + kk + 8) * load8(bj + kk + 8);
        }
        acc = hsum8(v0 + v1);
      } else if (k >= 8) {
        vf8 v0 = {};
        for (; kk + 8 <= k; kk += 8) v0 += load8(ai + kk) * load8(bj + kk);
        acc = hsum8(v0);
      }
#endif
      for (; kk < k; ++kk) acc += ai[kk] * bj[kk];
      ci[j] += acc;
    }
  }
}

void gemm_tn(const float* __restrict a, const float* __restrict g,
             float* __restrict c, std::int64_t m, std::int64_t k, std::int64_t n) {
  // c (k x n) += a^T * g, with a stored (m x k) and g stored (m x n)
  for (std::int64_t i = 0; i < m; ++i) {
    const float* ai = a + i * k;
    const float* gi = g + i * n;
    for (std::int64_t kk = 0; kk < k; ++kk) {
      const float av = ai[kk];
      float* ck = c + kk * n;
      std::int64_t j = 0;
#ifdef METX_VEC8
      for (; j + 8 <= n; j += 8) store8(ck + j, load8(ck + j) + av * load8(gi + j));
#endif
      for (; j < n; ++j) ck[j] += av * gi[j];
    }
  }
}

}  // namespace

std::int64_t shape_size(const Shape& shape) {
  std::int64_t n = 1;
  for (std::int64_t e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9E3779B97F4A7C15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

// ---- Tensor ----

Tensor Tensor::from_data(Shape shape, std::vector<float> values, bool requires_grad) {
  check_positive_extents(shape, "from_data");
  if (shape_size(shape) != static_cast<std::int64_t>(values.size())) {
    throw std::invalid_argument("from_data: shape " + shape_str(shape) + " wants " +
                                std::to_string(shape_size(shape)) + " values, got " +
                                std::to_string(values.size()));
  }
  check_finite(values, "from_data");
  auto node = std::make_shared<TensorNode>();
  node->shape = std::move(shape);
  node->data = std::move(values);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const auto n = shape_size(shape);
  return from_data(std::move(shape), std::vector<float>(n, 0.0f), requires_grad);
}

Tensor Tensor::ones(Shape shape, bool requires_grad) {
  const auto n = shape_size(shape);
  return from_data(std::move(shape), std::vector<float>(n, 1.0f), requires_grad);
}

Tensor Tensor::full(Shape shape, float value, bool requires_grad) {
  const auto n = shape_size(shape);
  return from_data(std::move(shape), std::vector<float>(n, value), requires_grad);
}

Tensor Tensor::scalar(float value, bool requires_grad) {
  return from_data({}, {value}, requires_grad);
}

Tensor Tensor::randn(Shape shape, std::mt19937& rng, float stddev, bool requires_grad) {
  std::normal_distribution<float> dist(0.0f, stddev);
  std::vector<float> v(shape_size(shape));
  for (auto& x : v) x = dist(rng);
  return from_data(std::move(shape), std::move(v), requires_grad);
}

Tensor Tensor::rand_uniform(Shape shape, std::mt19937& rng, float lo, float hi,
                            bool requires_grad) {
  std::uniform_real_distribution<float> dist(lo, hi);
  std::vector<float> v(shape_size(shape));
  for (auto& x : v) x = dist(rng);
  return from_data(std::move(shape), std::move(v), requires_grad);
}

const Shape& Tensor::shape() const {
  require(defined(), "shape: undefined tensor");
  return node_->shape;
}

std::int64_t Tensor::rank() const { return static_cast<std::int64_t>(shape().size()); }

std::int64_t Tensor::size() const {
  require(defined(), "size: undefined tensor");
  return node_->size();
}

std::int64_t Tensor::extent(std::int64_t axis) const {
  const auto& s = shape();
  return s[normalize_axis(axis, rank(), "extent")];
}

std::span<const float> Tensor::values() const {
  require(defined(), "values: undefined tensor");
  return node_->data;
}

std::span<float> Tensor::values_mut() {
  require(defined(), "values_mut: undefined tensor");
  return node_->data;
}

float Tensor::item() const {
  require(defined() && size() == 1, "item: tensor is not scalar");
  return node_->data[0];
}

float Tensor::at(std::initializer_list<std::int64_t> index) const {
  const auto& s = shape();
  require(index.size() == s.size(), "at: index rank mismatch");
  const auto strides = row_major_strides(s);
  std::int64_t off = 0;
  std::int64_t ax = 0;
  for (std::int64_t i : index) {
    require(i >= 0 && i < s[ax], "at: index out of range");
    off += i * strides[ax];
    ++ax;
  }
  return node_->data[off];
}

bool Tensor::requires_grad() const { return defined() && node_->requires_grad; }

std::span<const float> Tensor::grad() const {
  require(defined(), "grad: undefined tensor");
  require(node_->requires_grad, "grad: tensor does not require gradients");
  node_->ensure_grad();
  return node_->grad;
}

void Tensor::zero_grad() {
  require(defined(), "zero_grad: undefined tensor");
  if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0f);
}

// ---- Tape ----

Tape::Tape() {
  prev_ = g_active_tape;
  g_active_tape = this;
}

Tape::~Tape() { g_active_tape = prev_; }

Tape* Tape::active() { return g_active_tape; }

std::size_t Tape::recorded_ops() const { return ops_.size(); }

void Tape::backward(const Tensor& loss) {
  require(loss.defined(), "backward: undefined loss");
  if (loss.size() != 1) {
    throw std::invalid_argument("backward: loss must be scalar, got shape " +
                                shape_str(loss.shape()));
  }
  auto ln = loss.node();
  if (ln->tape != this) {
    throw std::invalid_argument("backward: loss is not connected to the active tape");
  }
  ln->ensure_grad();
  ln->grad[0] = 1.0f;
  for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) {
    TensorNode& n = **it;
    if (!n.grad.empty() && n.backward_fn) n.backward_fn(n);
    n.grad.clear();
    n.grad.shrink_to_fit();
    n.backward_fn = nullptr;
    n.parents.clear();
    n.tape = nullptr;
  }
  ops_.clear();
}

void backward(const Tensor& loss) {
  Tape* tape = Tape::active();
  if (!tape) throw std::runtime_error("backward: no active tape on this thread");
  tape->backward(loss);
}

NoGradScope::NoGradScope() {
  saved_ = g_active_tape;
  g_active_tape = nullptr;
}

NoGradScope::~NoGradScope() { g_active_tape = saved_; }

// Central op constructor: finiteness check, requires_grad propagation and
// tape recording. `backward_fn` is dropped when nothing needs gradients or no
// tape is active (pure-forward mode).
Tensor record_op(Shape shape, std::vector<float> data, std::vector<Tensor> parents,
                 std::function<void(TensorNode&)> backward_fn, const char* name) {
  check_positive_extents(shape, name);
  check_finite(data, name);
  auto node = std::make_shared<TensorNode>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  bool any_grad = false;
  for (const auto& p : parents) any_grad = any_grad || p.requires_grad();
  Tape* tape = Tape::active();
  if (any_grad && tape) {
    node->requires_grad = true;
    node->parents.reserve(parents.size());
    for (const auto& p : parents) node->parents.push_back(p.node());
    node->backward_fn = std::move(backward_fn);
    node->tape = tape;
    tape->ops_.push_back(node);
  }
  return Tensor(std::move(node));
}

// ---- elementwise ops ----

namespace {

template <class Fwd, class Bwd>
Tensor binary_bcast_op(const Tensor& a, const Tensor& b, const char* name, Fwd fwd,
                       Bwd bwd_element) {
  require(a.defined() && b.defined(), std::string(name) + ": undefined operand");
  auto plan = std::make_shared<BcastPlan>(make_bcast_plan(a.shape(), b.shape(), name));
  const float* pa = a.values().data();
  const float* pb = b.values().data();
  std::vector<float> out(shape_size(plan->out));
  if (a.shape() == b.shape()) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(pa[i], pb[i]);
  } else {
    for_each_bcast(*plan, [&](std::int64_t i, std::int64_t oa, std::int64_t ob) {
      out[i] = fwd(pa[oa], pb[ob]);
    });
  }
  auto bw = [plan, bwd_element](TensorNode& n) {
    TensorNode& na = *n.parents[0];
    TensorNode& nb = *n.parents[1];
    const bool ga = na.requires_grad;
    const bool gb = nb.requires_grad;
    if (ga) na.ensure_grad();
    if (gb) nb.ensure_grad();
    const float* da = na.data.data();
    const float* db = nb.data.data();
    float* grad_a = ga ? na.grad.data() : nullptr;
    float* grad_b = gb ? nb.grad.data() : nullptr;
    const float* g = n.grad.data();
    for_each_bcast(*plan, [&](std::int64_t i, std::int64_t oa, std::int64_t ob) {
      bwd_element(g[i], da[oa], db[ob], grad_a ? grad_a + oa : nullptr,
                  grad_b ? grad_b + ob : nullptr);
    });
  };
  return record_op(plan->out, std::move(out), {a, b}, std::move(bw), name);
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_bcast_op(
      a, b, "add", [](float x, float y) { return x + y; },
      [](float g, float, float, float* ga, float* gb) {
        if (ga) *ga += g;
        if (gb) *gb += g;
      });
}

Tensor hadamard(const Tensor& a, const Tensor& b) {
  return binary_bcast_op(
      a, b, "hadamard", [](float x, float y) { return x * y; },
      [](float g, float x, float y, float* ga, float* gb) {
        if (ga) *ga += g * y;
        if (gb) *gb += g * x;
      });
}

Tensor bilinear_outer(const Tensor& a, const Tensor& b) {
  require(a.defined() && b.defined(), "bilinear_outer: undefined operand");
  require(a.rank() == 3 && b.rank() == 3 && a.extent(0) == b.extent(0) &&
              a.extent(2) == b.extent(2),
          "bilinear_outer: want [B, T_a, D] x [B, T_b, D], got " +
              shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const std::int64_t batch = a.extent(0);
  const std::int64_t t_a = a.extent(1);
  const std::int64_t t_b = b.extent(1);
  const std::int64_t d = a.extent(2);
  const float* pa = a.values().data();
  const float* pb = b.values().data();
  std::vector<float> out(batch * t_a * t_b * d);
  for (std::int64_t bb = 0; bb < batch; ++bb) {
    for (std::int64_t i = 0; i < t_a; ++i) {
      const float* ra = pa + (bb * t_a + i) * d;
      float* po = out.data() + ((bb * t_a + i) * t_b) * d;
      for (std::int64_t j = 0; j < t_b; ++j) {
        const float* rb = pb + (bb * t_b + j) * d;
        float* ro = po + j * d;
        std::int64_t k = 0;
#ifdef METX_VEC8
        for (; k + 8 <= d; k += 8) store8(ro + k, load8(ra + k) * load8(rb + k));
#endif
        for (; k < d; ++k) ro[k] = ra[k] * rb[k];
      }
    }
  }
  auto bw = [batch, t_a, t_b, d](TensorNode& n) {
    TensorNode& na = *n.parents[0];
    TensorNode& nb = *n.parents[1];
    const bool ga = na.requires_grad;
    const bool gb = nb.requires_grad;
    if (ga) na.ensure_grad();
    if (gb) nb.ensure_grad();
    const float* pa = na.data.data();
    const float* pb = nb.data.data();
    const float* g = n.grad.data();
    for (std::int64_t bb = 0; bb < batch; ++bb) {
      for (std::int64_t i = 0; i < t_a; ++i) {
        const float* ra = pa + (bb * t_a + i) * d;
        float* gra = ga ? na.grad.data() + (bb * t_a + i) * d : nullptr;
        const float* rg = g + ((bb * t_a + i) * t_b) * d;
        for (std::int64_t j = 0; j < t_b; ++j) {
          const float* rb = pb + (bb * t_b + j) * d;
          float* grb = gb ? nb.grad.data() + (bb * t_b + j) * d : nullptr;
          const float* gj = rg + j * d;
          std::int64_t k = 0;
#ifdef METX_VEC8
          for (; k + 8 <= d; k += 8) {
            const vf8 gv = load8(gj + k);
            if (gra) store8(gra + k, load8(gra + k) + gv * load8(rb + k));
            if (grb) store8(grb + k, load8(grb + k) + gv * load8(ra + k));
          }
#endif
          for (; k < d; ++k) {
            if (gra) gra[k] += gj[k] * rb[k];
            if (grb) grb[k] += gj[k] * ra[k];
          }
        }
      }
    }
  };
  return record_op({batch, t_a, t_b, d}, std::move(out), {a, b}, std::move(bw),
                   "bilinear_outer");
}

Tensor scale(const Tensor& x, float c) {
  require(x.defined(), "scale: undefined operand");
  const auto vx = x.values();
  std::vector<float> out(vx.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = vx[i] * c;
  auto bw = [c](TensorNode& n) {
    TensorNode& p = *n.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (std::size_t i = 0; i < n.grad.size(); ++i) p.grad[i] += c * n.grad[i];
  };
  return record_op(x.shape(), std::move(out), {x}, std::move(bw), "scale");
}

Tensor relu(const Tensor& x) {
  require(x.defined(), "relu: undefined operand");
  const auto vx = x.values();
  std::vector<float> out(vx.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = vx[i] > 0.0f ? vx[i] : 0.0f;
  if (g_relu_probe) detail_relu_probe_mix(vx);
  auto bw = [](TensorNode& n) {
    TensorNode& p = *n.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (std::size_t i = 0; i < n.grad.size(); ++i) {
      if (n.data[i] > 0.0f) p.grad[i] += n.grad[i];
    }
  };
  return record_op(x.shape(), std::move(out), {x}, std::move(bw), "relu");
}

Tensor sigmoid(const Tensor& x) {
  require(x.defined(), "sigmoid: undefined operand");
  const auto vx = x.values();
  std::vector<float> out(vx.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const float v = vx[i];
    if (v >= 0.0f) {
      out[i] = 1.0f / (1.0f + std::exp(-v));
    } else {
      const float e = std::exp(v);
      out[i] = e / (1.0f + e);
    }
  }
  auto bw = [](TensorNode& n) {
    TensorNode& p = *n.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (std::size_t i = 0; i < n.grad.size(); ++i) {
      const float s = n.data[i];
      p.grad[i] += n.grad[i] * s * (1.0f - s);
    }
  };
  return record_op(x.shape(), std::move(out), {x}, std::move(bw), "sigmoid");
}

// ---- matmul ----

Tensor matmul(const Tensor& a, const Tensor& b) {
  require(a.defined() && b.defined(), "matmul: undefined operand");
  require(a.rank() >= 2 && b.rank() >= 2,
          "matmul: operands must have rank >= 2, got " + shape_str(a.shape()) + " x " +
              shape_str(b.shape()));
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  const std::int64_t m = sa[sa.size() - 2];
  const std::int64_t k = sa[sa.size() - 1];
  const std::int64_t kb = sb[sb.size() - 2];
  const std::int64_t n = sb[sb.size() - 1];
  if (k != kb) {
    throw std::invalid_argument("matmul: inner extents differ, " + shape_str(sa) +
                                " x " + shape_str(sb));
  }
  Shape batch_a(sa.begin(), sa.end() - 2);
  Shape batch_b(sb.begin(), sb.end() - 2);
  auto plan = std::make_shared<BcastPlan>(make_bcast_plan(batch_a, batch_b, "matmul"));
  Shape out_shape = plan->out;
  out_shape.push_back(m);
  out_shape.push_back(n);

  const std::int64_t slice_a = m * k;
  const std::int64_t slice_b = k * n;
  const std::int64_t slice_c = m * n;
  std::vector<float> out(shape_size(plan->out) * slice_c, 0.0f);
  const float* pa = a.values().data();
  const float* pb = b.values().data();
  for_each_bcast(*plan, [&](std::int64_t i, std::int64_t oa, std::int64_t ob) {
    gemm_nn(pa + oa * slice_a, pb + ob * slice_b, out.data() + i * slice_c, m, k, n);
  });

  auto bw = [plan, m, k, n, slice_a, slice_b, slice_c](TensorNode& node) {
    TensorNode& na = *node.parents[0];
    TensorNode& nb = *node.parents[1];
    const bool ga = na.requires_grad;
    const bool gb = nb.requires_grad;
    if (ga) na.ensure_grad();
    if (gb) nb.ensure_grad();
    const float* pa = na.data.data();
    const float* pb = nb.data.data();
    const float* g = node.grad.data();
    for_each_bcast(*plan, [&](std::int64_t i, std::int64_t oa, std::int64_t ob) {
      const float* gi = g + i * slice_c;
      if (ga) gemm_nt(gi, pb + ob * slice_b, na.grad.data() + oa * slice_a, m, n, k);
      if (gb) gemm_tn(pa + oa * slice_a, gi, nb.grad.data() + ob * slice_b, m, k, n);
    });
  };
  return record_op(std::move(out_shape), std::move(out), {a, b}, std::move(bw),
                   "matmul");
}

// ---- softmax ----

Tensor softmax(const Tensor& x, std::int64_t axis) {
  require(x.defined(), "softmax: undefined operand");
  const std::int64_t ax = normalize_axis(axis, x.rank(), "softmax");
  const auto& s = x.shape();
  std::int64_t outer = 1, inner = 1;
  for (std::int64_t i = 0; i < ax; ++i) outer *= s[i];
  for (std::size_t i = ax + 1; i < s.size(); ++i) inner *= s[i];
  const std::int64_t nA = s[ax];
  const auto vx = x.values();
  std::vector<float> out(vx.size());
  for (std::int64_t o = 0; o < outer; ++o) {
    for (std::int64_t in = 0; in < inner; ++in) {
      const std::int64_t base = o * nA * inner + in;
      float mx = vx[base];
      for (std::int64_t j = 1; j < nA; ++j) mx = std::max(mx, vx[base + j * inner]);
      double sum = 0.0;
      for (std::int64_t j = 0; j < nA; ++j) {
        const double e = std::exp(static_cast<double>(vx[base + j * inner]) - mx);
        out[base + j * inner] = static_cast<float>(e);
        sum += e;
      }
      const double inv = 1.0 / sum;
      for (std::int64_t j = 0; j < nA; ++j) {
        out[base + j * inner] = static_cast<float>(out[base + j * inner] * inv);
      }
    }
  }
  auto bw = [outer, nA, inner](TensorNode& n) {
    TensorNode& p = *n.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    const float* sdat = n.data.data();
    const float* g = n.grad.data();
    for (std::int64_t o = 0; o < outer; ++o) {
      for (std::int64_t in = 0; in < inner; ++in) {
        const std::int64_t base = o * nA * inner + in;
        double dot = 0.0;
        for (std::int64_t j = 0; j < nA; ++j) {
          const std::int64_t off = base + j * inner;
          dot += static_cast<double>(g[off]) * sdat[off];
        }
        for (std::int64_t j = 0; j < nA; ++j) {
          const std::int64_t off = base + j * inner;
          p.grad[off] += static_cast<float>(sdat[off] * (g[off] - dot));
        }
      }
    }
  };
  return record_op(x.shape(), std::move(out), {x}, std::move(bw), "softmax");
}

// ---- layer norm (last axis) ----

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, float eps) {
  require(x.defined() && gain.defined() && bias.defined(),
          "layer_norm: undefined operand");
  require(eps > 0.0f, "layer_norm: eps must be positive");
  require(x.rank() >= 1, "layer_norm: rank-0 input");
  const std::int64_t n = x.shape().back();
  require(gain.shape() == Shape{n} && bias.shape() == Shape{n},
          "layer_norm: gain/bias must have shape [" + std::to_string(n) + "]");
  const std::int64_t rows = x.size() / n;
  const auto vx = x.values();
  const auto vg = gain.values();
  const auto vb = bias.values();
  std::vector<float> out(vx.size());
  for (std::int64_t r = 0; r < rows; ++r) {
    const float* xr = vx.data() + r * n;
    float* orow = out.data() + r * n;
    double mean = 0.0;
    for (std::int64_t j = 0; j < n; ++j) mean += xr[j];
    mean /= n;
    double var = 0.0;
    for (std::int64_t j = 0; j < n; ++j) {
      const double d = xr[j] - mean;
      var += d * d;
    }
    var /= n;
    const double inv = 1.0 / std::sqrt(var + eps);
    for (std::int64_t j = 0; j < n; ++j) {
      const double xhat = (xr[j] - mean) * inv;
      orow[j] = static_cast<float>(xhat * vg[j] + vb[j]);
    }
  }
  auto bw = [n, rows, eps](TensorNode& node) {
    TensorNode& px = *node.parents[0];
    TensorNode& pg = *node.parents[1];
    TensorNode& pb = *node.parents[2];
    if (px.requires_grad) px.ensure_grad();
    if (pg.requires_grad) pg.ensure_grad();
    if (pb.requires_grad) pb.ensure_grad();
    const float* xd = px.data.data();
    const float* gd = pg.data.data();
    const float* gout = node.grad.data();
    for (std::int64_t r = 0; r < rows; ++r) {
      const float* xr = xd + r * n;
      const float* gr = gout + r * n;
      double mean = 0.0;
      for (std::int64_t j = 0; j < n; ++j) mean += xr[j];
      mean /= n;
      double var = 0.0;
      for (std::int64_t j = 0; j < n; ++j) {
        const double d = xr[j] - mean;
        var += d * d;
      }
      var /= n;
      const double inv = 1.0 / std::sqrt(var + eps);
      double m1 = 0.0, m2 = 0.0;
      for (std::int64_t j = 0; j < n; ++j) {
        const double xhat = (xr[j] - mean) * inv;
        const double gp = static_cast<double>(gr[j]) * gd[j];
        m1 += gp;
        m2 += gp * xhat;
      }
      m1 /= n;
      m2 /= n;
      for (std::int64_t j = 0; j < n; ++j) {
        const double xhat = (xr[j] - mean) * inv;
        if (px.requires_grad) {
          const double gp = static_cast<double>(gr[j]) * gd[j];
          px.grad[r * n + j] += static_cast<float>(inv * (gp - m1 - xhat * m2));
        }
        if (pg.requires_grad) pg.grad[j] += static_cast<float>(gr[j] * xhat);
        if (pb.requires_grad) pb.grad[j] += gr[j];
      }
    }
  };
  return record_op(x.shape(), std::move(out), {x, gain, bias}, std::move(bw),
                   "layer_norm");
}

// ---- shape ops ----

Tensor concat(const Tensor& a, const Tensor& b, std::int64_t axis) {
  require(a.defined() && b.defined(), "concat: undefined operand");
  require(a.rank() == b.rank(), "concat: rank mismatch, " + shape_str(a.shape()) +
                                    " vs " + shape_str(b.shape()));
  const std::int64_t ax = normalize_axis(axis, a.rank(), "concat");
  for (std::int64_t i = 0; i < a.rank(); ++i) {
    if (i != ax && a.shape()[i] != b.shape()[i]) {
      throw std::invalid_argument("concat: extents differ off the concat axis, " +
                                  shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
  }
  Shape out_shape = a.shape();
  out_shape[ax] += b.shape()[ax];
  std::int64_t outer = 1, inner = 1;
  for (std::int64_t i = 0; i < ax; ++i) outer *= out_shape[i];
  for (std::size_t i = ax + 1; i < out_shape.size(); ++i) inner *= out_shape[i];
  const std::int64_t na = a.shape()[ax] * inner;
  const std::int64_t nb = b.shape()[ax] * inner;
  const auto va = a.values();
  const auto vb = b.values();
  std::vector<float> out(shape_size(out_shape));
  for (std::int64_t o = 0; o < outer; ++o) {
    std::memcpy(out.data() + o * (na + nb), va.data() + o * na, na * sizeof(float));
    std::memcpy(out.data() + o * (na + nb) + na, vb.data() + o * nb,
                nb * sizeof(float));
  }
  auto bw = [outer, na, nb](TensorNode& n) {
    TensorNode& pa = *n.parents[0];
    TensorNode& pb = *n.parents[1];
    if (pa.requires_grad) pa.ensure_grad();
    if (pb.requires_grad) pb.ensure_grad();
    const float* g = n.grad.data();
    for (std::int64_t o = 0; o < outer; ++o) {
      const float* go = g + o * (na + nb);
      if (pa.requires_grad) {
        for (std::int64_t i = 0; i < na; ++i) pa.grad[o * na + i] += go[i];
      }
      if (pb.requires_grad) {
        for (std::int64_t i = 0; i < nb; ++i) pb.grad[o * nb + i] += go[na + i];
      }
    }
  };
  return record_op(std::move(out_shape), std::move(out), {a, b}, std::move(bw),
                   "concat");
}

Tensor concat_last_axis(const Tensor& a, const Tensor& b) {
  return concat(a, b, a.rank() - 1);
}

Tensor slice(const Tensor& x, std::int64_t axis, std::int64_t begin, std::int64_t end) {
  require(x.defined(), "slice: undefined operand");
  const std::int64_t ax = normalize_axis(axis, x.rank(), "slice");
  const std::int64_t extent = x.shape()[ax];
  require(begin >= 0 && begin < end && end <= extent,
          "slice: range [" + std::to_string(begin) + ", " + std::to_string(end) +
              ") invalid for extent " + std::to_string(extent));
  Shape out_shape = x.shape();
  out_shape[ax] = end - begin;
  std::int64_t outer = 1, inner = 1;
  for (std::int64_t i = 0; i < ax; ++i) outer *= x.shape()[i];
  for (std::size_t i = ax + 1; i < x.shape().size(); ++i) inner *= x.shape()[i];
  const std::int64_t len = (end - begin) * inner;
  const std::int64_t src_row = extent * inner;
  const auto vx = x.values();
  std::vector<float> out(shape_size(out_shape));
  for (std::int64_t o = 0; o < outer; ++o) {
    std::memcpy(out.data() + o * len, vx.data() + o * src_row + begin * inner,
                len * sizeof(float));
  }
  auto bw = [outer, len, src_row, begin, inner](TensorNode& n) {
    TensorNode& p = *n.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    const float* g = n.grad.data();
    for (std::int64_t o = 0; o < outer; ++o) {
      float* dst = p.grad.data() + o * src_row + begin * inner;
      const float* go = g + o * len;
      for (std::int64_t i = 0; i < len; ++i) dst[i] += go[i];
    }
  };
  return record_op(std::move(out_shape), std::move(out), {x}, std::move(bw), "slice");
}

Tensor reshape(const Tensor& x, Shape shape) {
  require(x.defined(), "reshape: undefined operand");
  check_positive_extents(shape, "reshape");
  require(shape_size(shape) == x.size(), "reshape: size mismatch, " +
                                             shape_str(x.shape()) + " -> " +
                                             shape_str(shape));
  std::vector<float> out(x.values().begin(), x.values().end());
  auto bw = [](TensorNode& n) {
    TensorNode& p = *n.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (std::size_t i = 0; i < n.grad.size(); ++i) p.grad[i] += n.grad[i];
  };
  return record_op(std::move(shape), std::move(out), {x}, std::move(bw), "reshape");
}

Tensor permute(const Tensor& x, const std::vector<std::int64_t>& axes) {
  require(x.defined(), "permute: undefined operand");
  const std::int64_t r = x.rank();
  require(static_cast<std::int64_t>(axes.size()) == r, "permute: axes rank mismatch");
  std::vector<bool> seen(r, false);
  for (std::int64_t a : axes) {
    require(a >= 0 && a < r && !seen[a], "permute: invalid axes permutation");
    seen[a] = true;
  }
  Shape out_shape(r);
  for (std::int64_t i = 0; i < r; ++i) out_shape[i] = x.shape()[axes[i]];
  const auto in_strides = row_major_strides(x.shape());
  std::vector<std::int64_t> strides(r);
  for (std::int64_t i = 0; i < r; ++i) strides[i] = in_strides[axes[i]];
  auto walk = [r, out_shape, strides](const float* src, float* dst, bool accumulate) {
    const std::int64_t total = shape_size(out_shape);
    std::vector<std::int64_t> idx(r, 0);
    std::int64_t off = 0;
    for (std::int64_t i = 0; i < total; ++i) {
      if (accumulate) {
        dst[off] += src[i];
      } else {
        dst[i] = src[off];
      }
      for (std::int64_t ax = r - 1; ax >= 0; --ax) {
        ++idx[ax];
        off += strides[ax];
        if (idx[ax] < out_shape[ax]) break;
        idx[ax] = 0;
        off -= strides[ax] * out_shape[ax];
      }
    }
  };
  std::vector<float> out(x.size());
  walk(x.values().data(), out.data(), false);
  auto bw = [walk](TensorNode& n) {
    TensorNode& p = *n.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    walk(n.grad.data(), p.grad.data(), true);
  };
  return record_op(std::move(out_shape), std::move(out), {x}, std::move(bw), "permute");
}

Tensor transpose_last2(const Tensor& x) {
  std::vector<std::int64_t> axes(x.rank());
  for (std::int64_t i = 0; i < x.rank(); ++i) axes[i] = i;
  std::swap(axes[x.rank() - 1], axes[x.rank() - 2]);
  return permute(x, axes);
}

Tensor broadcast_to(const Tensor& x, Shape shape) {
  require(x.defined(), "broadcast_to: undefined operand");
  check_positive_extents(shape, "broadcast_to");
  auto plan = std::make_shared<BcastPlan>(
      make_bcast_plan(x.shape(), shape, "broadcast_to"));
  require(plan->out == shape, "broadcast_to: " + shape_str(x.shape()) +
                                  " does not broadcast to " + shape_str(shape));
  const float* px = x.values().data();
  std::vector<float> out(shape_size(shape));
  for_each_bcast(*plan, [&](std::int64_t i, std::int64_t oa, std::int64_t) {
    out[i] = px[oa];
  });
  auto bw = [plan](TensorNode& n) {
    TensorNode& p = *n.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    const float* g = n.grad.data();
    for_each_bcast(*plan, [&](std::int64_t i, std::int64_t oa, std::int64_t) {
      p.grad[oa] += g[i];
    });
  };
  return record_op(std::move(shape), std::move(out), {x}, std::move(bw),
                   "broadcast_to");
}

// ---- reductions ----

Tensor sum_over_axis(const Tensor& x, std::int64_t axis) {
  require(x.defined(), "sum_over_axis: undefined operand");
  const std::int64_t ax = normalize_axis(axis, x.rank(), "sum_over_axis");
  const auto& s = x.shape();
  std::int64_t outer = 1, inner = 1;
  for (std::int64_t i = 0; i < ax; ++i) outer *= s[i];
  for (std::size_t i = ax + 1; i < s.size(); ++i) inner *= s[i];
  const std::int64_t nA = s[ax];
  Shape out_shape;
  for (std::int64_t i = 0; i < static_cast<std::int64_t>(s.size()); ++i) {
    if (i != ax) out_shape.push_back(s[i]);
  }
  const auto vx = x.values();
  std::vector<float> out(outer * inner);
  for (std::int64_t o = 0; o < outer; ++o) {
    for (std::int64_t in = 0; in < inner; ++in) {
      double acc = 0.0;
      for (std::int64_t j = 0; j < nA; ++j) acc += vx[o * nA * inner + j * inner + in];
      out[o * inner + in] = static_cast<float>(acc);
    }
  }
  auto bw = [outer, nA, inner](TensorNode& n) {
    TensorNode& p = *n.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    const float* g = n.grad.data();
    for (std::int64_t o = 0; o < outer; ++o) {
      for (std::int64_t j = 0; j < nA; ++j) {
        for (std::int64_t in = 0; in < inner; ++in) {
          p.grad[o * nA * inner + j * inner + in] += g[o * inner + in];
        }
      }
    }
  };
  return record_op(std::move(out_shape), std::move(out), {x}, std::move(bw),
                   "sum_over_axis");
}

Tensor mean_over_axis(const Tensor& x, std::int64_t axis) {
  const std::int64_t ax = normalize_axis(axis, x.rank(), "mean_over_axis");
  const float inv = 1.0f / static_cast<float>(x.shape()[ax]);
  return scale(sum_over_axis(x, ax), inv);
}

Tensor sum_all(const Tensor& x) {
  require(x.defined(), "sum_all: undefined operand");
  double acc = 0.0;
  for (float v : x.values()) acc += v;
  std::vector<float> out{static_cast<float>(acc)};
  auto bw = [](TensorNode& n) {
    TensorNode& p = *n.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    const float g = n.grad[0];
    for (auto& gv : p.grad) gv += g;
  };
  return record_op({}, std::move(out), {x}, std::move(bw), "sum_all");
}

// ---- lookup and loss kernels ----

Tensor embedding_lookup(const Tensor& table, std::span<const std::int32_t> ids) {
  require(table.defined() && table.rank() == 2, "embedding_lookup: table must be 2-D");
  require(!ids.empty(), "embedding_lookup: empty id list");
  const std::int64_t v = table.extent(0);
  const std::int64_t d = table.extent(1);
  for (std::int32_t id : ids) {
    require(id >= 0 && id < v, "embedding_lookup: id " + std::to_string(id) +
                                   " out of range for table " +
                                   shape_str(table.shape()));
  }
  const auto vt = table.values();
  std::vector<float> out(ids.size() * d);
  for (std::size_t t = 0; t < ids.size(); ++t) {
    std::memcpy(out.data() + t * d, vt.data() + ids[t] * d, d * sizeof(float));
  }
  auto idv = std::make_shared<std::vector<std::int32_t>>(ids.begin(), ids.end());
  auto bw = [idv, d](TensorNode& n) {
    TensorNode& p = *n.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    const float* g = n.grad.data();
    for (std::size_t t = 0; t < idv->size(); ++t) {
      float* dst = p.grad.data() + (*idv)[t] * d;
      for (std::int64_t j = 0; j < d; ++j) dst[j] += g[t * d + j];
    }
  };
  return record_op({static_cast<std::int64_t>(ids.size()), d}, std::move(out), {table},
                   std::move(bw), "embedding_lookup");
}

Tensor cross_entropy_rowwise(const Tensor& logits,
                             std::span<const std::int32_t> targets) {
  require(logits.defined() && logits.rank() == 2,
          "cross_entropy_rowwise: logits must be 2-D");
  const std::int64_t rows = logits.extent(0);
  const std::int64_t v = logits.extent(1);
  require(static_cast<std::int64_t>(targets.size()) == rows,
          "cross_entropy_rowwise: expected " + std::to_string(rows) + " targets, got " +
              std::to_string(targets.size()));
  for (std::int32_t t : targets) {
    require(t >= 0 && t < v, "cross_entropy_rowwise: target id " + std::to_string(t) +
                                 " out of range for vocab " + std::to_string(v));
  }
  const auto vx = logits.values();
  std::vector<float> out(rows);
  std::vector<double> lse(rows);
  for (std::int64_t r = 0; r < rows; ++r) {
    const float* xr = vx.data() + r * v;
    float mx = xr[0];
    for (std::int64_t j = 1; j < v; ++j) mx = std::max(mx, xr[j]);
    double sum = 0.0;
    for (std::int64_t j = 0; j < v; ++j) sum += std::exp(static_cast<double>(xr[j]) - mx);
    lse[r] = mx + std::log(sum);
    out[r] = static_cast<float>(lse[r] - xr[targets[r]]);
  }
  auto tgt = std::make_shared<std::vector<std::int32_t>>(targets.begin(), targets.end());
  auto lse_cache = std::make_shared<std::vector<double>>(std::move(lse));
  auto bw = [tgt, lse_cache, v](TensorNode& n) {
    TensorNode& p = *n.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    const float* xd = p.data.data();
    const float* g = n.grad.data();
    const std::int64_t rows = static_cast<std::int64_t>(tgt->size());
    for (std::int64_t r = 0; r < rows; ++r) {
      const double l = (*lse_cache)[r];
      const float gr = g[r];
      if (gr == 0.0f) continue;
      float* dst = p.grad.data() + r * v;
      const float* xr = xd + r * v;
      for (std::int64_t j = 0; j < v; ++j) {
        const double prob = std::exp(static_cast<double>(xr[j]) - l);
        dst[j] += static_cast<float>(gr * prob);
      }
      dst[(*tgt)[r]] -= gr;
    }
  };
  return record_op({rows}, std::move(out), {logits}, std::move(bw),
                   "cross_entropy_rowwise");
}

// ---- finite differences ----

Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x,
                        float step) {
  require(x.defined(), "finite_diff_grad: undefined tensor");
  require(step > 0.0f, "finite_diff_grad: step must be positive");
  const auto base = x.values();
  std::vector<float> work(base.begin(), base.end());
  std::vector<float> g(base.size());
  for (std::size_t i = 0; i < base.size(); ++i) {
    const float v = base[i];
    const float vp = v + step;
    const float vm = v - step;
    work[i] = vp;
    const double fp = f(Tensor::from_data(x.shape(), work));
    work[i] = vm;
    const double fm = f(Tensor::from_data(x.shape(), work));
    work[i] = v;
    g[i] = static_cast<float>((fp - fm) /
                              (static_cast<double>(vp) - static_cast<double>(vm)));
  }
  return Tensor::from_data(x.shape(), std::move(g));
}

Tensor finite_diff_grad_inplace(const std::function<double()>& f, Tensor x, float step) {
  require(x.defined(), "finite_diff_grad_inplace: undefined tensor");
  require(step > 0.0f, "finite_diff_grad_inplace: step must be positive");
  auto vals = x.values_mut();
  std::vector<float> g(vals.size());
  for (std::size_t i = 0; i < vals.size(); ++i) {
    const float v = vals[i];
    const float vp = v + step;
    const float vm = v - step;
    vals[i] = vp;
    const double fp = f();
    vals[i] = vm;
    const double fm = f();
    vals[i] = v;
    g[i] = static_cast<float>((fp - fm) /
                              (static_cast<double>(vp) - static_cast<double>(vm)));
  }
  return Tensor::from_data(x.shape(), std::move(g));
}

double rel_error(double a, double b) {
  const double denom = std::max({std::abs(a), std::abs(b), 1e-6});
  return std::abs(a - b) / denom;
}

// ---- relu pattern probe ----

ReluPatternProbe::ReluPatternProbe() {
  prev_ = g_relu_probe;
  g_relu_probe = this;
}

ReluPatternProbe::~ReluPatternProbe() { g_relu_probe = prev_; }

void ReluPatternProbe::reset() { hash_ = 0; }

std::uint64_t ReluPatternProbe::hash() const { return hash_; }

void detail_relu_probe_mix(std::span<const float> values) {
  ReluPatternProbe* probe = g_relu_probe;
  if (!probe) return;
  std::uint64_t h = probe->hash_;
  for (float v : values) {
    h = (h ^ (v > 0.0f ? 0x9E3779B97F4A7C15ULL : 0x2545F4914F6CDD1DULL)) *
        1099511628211ULL;
  }
  probe->hash_ = h;
}

}  // namespace metx
