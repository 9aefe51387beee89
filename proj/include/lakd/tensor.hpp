#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "lakd/error.hpp"

namespace lakd {

using Shape = std::vector<std::size_t>;
using Storage = std::shared_ptr<std::vector<double>>;

std::size_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

class Tape;

namespace detail {
struct TensorData {
  Shape shape;
  Storage values;
  std::vector<double> grad;  // empty = absent
  bool requires_grad = false;
  std::weak_ptr<Tape> tape;  // graph linkage; expired or node < 0 = detached
  int node = -1;
};
}  // namespace detail

// Thread-local switch: while disabled, ops record nothing on the tape.
class GradMode {
 public:
  static bool enabled();
  static void set(bool on);
};

struct NoGradGuard {
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// Dense float64 tensor, row-major, value-semantic handle over shared storage.
// `detach` aliases the values and severs graph linkage.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double v, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double v);

  bool defined() const { return d_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t i) const { return shape().at(i); }
  std::size_t numel() const;

  const std::vector<double>& values() const;
  std::vector<double>& values_mut();
  Storage storage() const;
  double item() const;  // scalar tensors only

  bool requires_grad() const;
  void set_requires_grad(bool rg);
  // True when an op recording on the active tape must track this input.
  bool tracked() const;

  Tensor detach() const;

  // Null when no gradient has been accumulated.
  const std::vector<double>* grad() const;
  void zero_grad();

  std::shared_ptr<detail::TensorData> data() const { return d_; }
  static Tensor wrap(std::shared_ptr<detail::TensorData> d) { return Tensor(std::move(d)); }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorData> d) : d_(std::move(d)) {}
  std::shared_ptr<detail::TensorData> d_;
};

using BackwardFn = std::function<void(Tape&, const std::vector<double>& out_grad)>;

// Define-by-run tape: one per training step, nodes appended in topological
// order. Saved intermediates are counted while alive so memory behaviour is
// observable from tests.
class Tape {
 public:
  static Tape* active();

  // Number of saved intermediate tensors currently alive.
  std::size_t retained_activation_count() const { return retained_; }
  // Same, in float64 elements (footprint).
  std::size_t retained_value_count() const { return retained_values_; }
  std::size_t peak_retained() const { return peak_; }
  std::size_t peak_retained_values() const { return peak_values_; }
  void reset_peak();

  // Reverse sweep from `loss`: accumulates grads into every reachable
  // requires_grad tensor and frees the visited nodes' saved intermediates.
  void run_backward(const Tensor& loss);

  // --- recording API (used by op implementations) ---
  // Node id of t on this tape; registers a leaf for requires_grad tensors
  // without one. Returns -1 for constants.
  int node_of(const Tensor& t);
  int add_node(std::vector<int> parents, const Tensor& out, std::size_t saved_count,
               std::size_t saved_values, BackwardFn fn);
  std::vector<double>& grad_buf(int id);
  std::size_t node_count() const { return nodes_.size(); }

 private:
  friend struct TapeScope;
  Tape() = default;

  struct Node {
    std::vector<int> parents;
    BackwardFn fn;                 // released after backward consumes the node
    std::vector<double> grad;      // transient accumulator
    std::weak_ptr<detail::TensorData> owner;
    std::size_t numel = 0;
    std::size_t saved_count = 0;
    std::size_t saved_values = 0;
    bool freed = false;
    bool leaf = false;
  };

  std::vector<Node> nodes_;
  std::weak_ptr<Tape> self_;
  std::size_t retained_ = 0;
  std::size_t retained_values_ = 0;
  std::size_t peak_ = 0;
  std::size_t peak_values_ = 0;
};

// RAII activation of a fresh tape for one forward/backward step.
struct TapeScope {
  TapeScope();
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

  Tape& tape() { return *tape_; }

 private:
  std::shared_ptr<Tape> tape_;
};

// Backward entry point; `loss` must be a live scalar on some tape.
void backward(const Tensor& loss);

}  // namespace lakd
