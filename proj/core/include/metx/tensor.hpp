#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace metx {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_size(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tape;

namespace detail {

struct TensorNode {
  Shape shape;
  std::vector<float> data;
  bool requires_grad = false;
  std::vector<float> grad;
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backward_fn;
  Tape* tape = nullptr;

  std::int64_t size() const { return static_cast<std::int64_t>(data.size()); }
  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0f);
  }
};

}  // namespace detail

/// Dense row-major f32 array, optionally participating in reverse-mode
/// differentiation. Values are immutable after construction; the gradient
/// buffer is the only mutable part. `values_mut()` exists solely for the
/// optimizer update and parameter initialization.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor ones(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, float value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<float> values,
                          bool requires_grad = false);
  static Tensor scalar(float value, bool requires_grad = false);
  static Tensor randn(Shape shape, std::mt19937& rng, float stddev,
                      bool requires_grad = false);
  static Tensor rand_uniform(Shape shape, std::mt19937& rng, float lo, float hi,
                             bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::int64_t rank() const;
  std::int64_t size() const;
  std::int64_t extent(std::int64_t axis) const;

  std::span<const float> values() const;
  std::span<float> values_mut();
  float item() const;  // requires size() == 1
  float at(std::initializer_list<std::int64_t> index) const;

  bool requires_grad() const;
  /// Gradient accumulated by backward(); reads as zeros when untouched.
  std::span<const float> grad() const;
  void zero_grad();

  std::shared_ptr<detail::TensorNode> node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::TensorNode> node)
      : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::TensorNode> node_;
};

/// Execution-ordered record of differentiable ops. Creating a Tape makes it
/// the active tape of the current thread; ops whose inputs require gradients
/// record themselves on it. backward() replays the record in exact reverse
/// execution order and then clears it. One tape per thread of execution;
/// independent tapes on different threads may run concurrently.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  std::size_t recorded_ops() const;
  void backward(const Tensor& loss);

  static Tape* active();

 private:
  friend Tensor record_op(Shape, std::vector<float>, std::vector<Tensor>,
                          std::function<void(detail::TensorNode&)>,
                          const char*);
  std::vector<std::shared_ptr<detail::TensorNode>> ops_;
  Tape* prev_ = nullptr;
};

/// backward on the thread's active tape; loss must be scalar and recorded.
void backward(const Tensor& loss);

/// Suspends tape recording on this thread while alive. Forward passes inside
/// (generation, evaluation) run pure.
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape* saved_ = nullptr;
};

/// Building block for ops with hand-written derivatives: checks finiteness,
/// propagates requires_grad, and records on the active tape. `backward_fn`
/// reads the node's grad and accumulates into its parents' grads.
Tensor record_op(Shape shape, std::vector<float> data, std::vector<Tensor> parents,
                 std::function<void(detail::TensorNode&)> backward_fn,
                 const char* name);

// ---- differentiable ops ----

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor softmax(const Tensor& x, std::int64_t axis);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  float eps = 1e-5f);
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor hadamard(const Tensor& a, const Tensor& b);  // broadcasting product
Tensor add(const Tensor& a, const Tensor& b);       // broadcasting sum
/// out[b, i, j, :] = a[b, i, :] * b[b, j, :], the pairwise-product expansion
/// behind low-rank bilinear pooling ([B, T_a, D] x [B, T_b, D] ->
/// [B, T_a, T_b, D]). Equivalent to a broadcast hadamard of the unsqueezed
/// operands, with contiguous forward/backward loops.
Tensor bilinear_outer(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, float c);
Tensor concat(const Tensor& a, const Tensor& b, std::int64_t axis);
Tensor concat_last_axis(const Tensor& a, const Tensor& b);
Tensor sum_over_axis(const Tensor& x, std::int64_t axis);
Tensor mean_over_axis(const Tensor& x, std::int64_t axis);
Tensor sum_all(const Tensor& x);
Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, const std::vector<std::int64_t>& axes);
Tensor transpose_last2(const Tensor& x);
Tensor slice(const Tensor& x, std::int64_t axis, std::int64_t begin,
             std::int64_t end);
Tensor broadcast_to(const Tensor& x, Shape shape);
Tensor embedding_lookup(const Tensor& table, std::span<const std::int32_t> ids);
/// Per-row negative log-likelihood of the target id under softmax(logits).
Tensor cross_entropy_rowwise(const Tensor& logits,
                             std::span<const std::int32_t> targets);

// ---- finite-difference gradient oracle ----

/// Central-difference gradient estimate of a deterministic scalar function.
/// The divisor is the actually realized f32 step, not the nominal one.
Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f,
                        const Tensor& x, float step);

/// Same oracle, perturbing a tensor in place (for parameters wired into a
/// model). The tensor is restored to its original values afterwards.
Tensor finite_diff_grad_inplace(const std::function<double()>& f, Tensor x,
                                float step);

/// relative error with floored denominator: |a-b| / max(|a|,|b|,1e-6)
double rel_error(double a, double b);

void detail_relu_probe_mix(std::span<const float> values);

/// While alive, every relu evaluated on this thread mixes its sign pattern
/// into a running hash. Finite-difference harnesses compare the hash of the
/// two probe evaluations to detect kink-straddling steps, where the
/// difference quotient stops being a derivative estimate.
class ReluPatternProbe {
 public:
  ReluPatternProbe();
  ~ReluPatternProbe();
  ReluPatternProbe(const ReluPatternProbe&) = delete;
  ReluPatternProbe& operator=(const ReluPatternProbe&) = delete;
  void reset();
  std::uint64_t hash() const;

 private:
  friend void detail_relu_probe_mix(std::span<const float> values);
  std::uint64_t hash_ = 0;
  ReluPatternProbe* prev_ = nullptr;
};

/// splitmix64-style seed derivation for independent deterministic streams.
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);

}  // namespace metx
