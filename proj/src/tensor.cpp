#include "lakd/tensor.hpp"

#include <algorithm>
#include <sstream>

namespace lakd {

std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ",";
    os << s[i];
  }
  os << "]";
  return os.str();
}

// ---------------------------------------------------------------- GradMode

namespace {
thread_local bool g_grad_enabled = true;
thread_local std::vector<std::shared_ptr<Tape>> g_tape_stack;
}  // namespace

bool GradMode::enabled() { return g_grad_enabled; }
void GradMode::set(bool on) { g_grad_enabled = on; }

NoGradGuard::NoGradGuard() : prev_(GradMode::enabled()) { GradMode::set(false); }
NoGradGuard::~NoGradGuard() { GradMode::set(prev_); }

// ------------------------------------------------------------------ Tensor

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return from(std::move(shape), {}, requires_grad);
}

Tensor Tensor::full(Shape shape, double v, bool requires_grad) {
  std::size_t n = shape_numel(shape);
  return from(std::move(shape), std::vector<double>(n, v), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  for (auto d : shape) {
    if (d == 0) throw DimensionError("tensor shape has a zero dimension: " + shape_str(shape));
  }
  std::size_t n = shape_numel(shape);
  if (values.empty()) values.assign(n, 0.0);
  if (values.size() != n) {
    throw DimensionError("value count " + std::to_string(values.size()) +
                         " does not match shape " + shape_str(shape));
  }
  auto d = std::make_shared<detail::TensorData>();
  d->shape = std::move(shape);
  d->values = std::make_shared<std::vector<double>>(std::move(values));
  d->requires_grad = requires_grad;
  return Tensor(std::move(d));
}

Tensor Tensor::scalar(double v) { return from({1}, {v}); }

const Shape& Tensor::shape() const {
  if (!d_) throw ContractError("use of an undefined tensor");
  return d_->shape;
}

std::size_t Tensor::numel() const { return shape_numel(shape()); }

const std::vector<double>& Tensor::values() const {
  if (!d_) throw ContractError("use of an undefined tensor");
  return *d_->values;
}

std::vector<double>& Tensor::values_mut() {
  if (!d_) throw ContractError("use of an undefined tensor");
  return *d_->values;
}

Storage Tensor::storage() const {
  if (!d_) throw ContractError("use of an undefined tensor");
  return d_->values;
}

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on non-scalar tensor " + shape_str(shape()));
  return (*d_->values)[0];
}

bool Tensor::requires_grad() const { return d_ && d_->requires_grad; }

void Tensor::set_requires_grad(bool rg) {
  if (!d_) throw ContractError("use of an undefined tensor");
  d_->requires_grad = rg;
  if (!rg) {
    d_->node = -1;
    d_->tape.reset();
  }
}

bool Tensor::tracked() const {
  if (!d_) return false;
  if (d_->requires_grad) return true;
  if (d_->node < 0) return false;
  auto tp = d_->tape.lock();
  return tp && tp.get() == Tape::active();
}

Tensor Tensor::detach() const {
  if (!d_) throw ContractError("use of an undefined tensor");
  auto nd = std::make_shared<detail::TensorData>();
  nd->shape = d_->shape;
  nd->values = d_->values;  // aliased, never copied
  nd->requires_grad = false;
  return Tensor(std::move(nd));
}

const std::vector<double>* Tensor::grad() const {
  if (!d_ || d_->grad.empty()) return nullptr;
  return &d_->grad;
}

void Tensor::zero_grad() {
  if (d_) {
    d_->grad.clear();
    d_->grad.shrink_to_fit();
  }
}

// -------------------------------------------------------------------- Tape

Tape* Tape::active() { return g_tape_stack.empty() ? nullptr : g_tape_stack.back().get(); }

void Tape::reset_peak() {
  peak_ = retained_;
  peak_values_ = retained_values_;
}

int Tape::node_of(const Tensor& t) {
  auto d = t.data();
  if (!d) return -1;
  if (d->node >= 0) {
    auto tp = d->tape.lock();
    if (tp && tp.get() == this) return d->node;
  }
  if (!d->requires_grad) return -1;
  // Leaf registration. A tracked tensor from a dead tape also lands here and
  // becomes a boundary: its history is gone, gradients stop at its values.
  Node n;
  n.leaf = true;
  n.numel = shape_numel(d->shape);
  n.owner = d;
  int id = static_cast<int>(nodes_.size());
  nodes_.push_back(std::move(n));
  d->tape = self_;
  d->node = id;
  return id;
}

int Tape::add_node(std::vector<int> parents, const Tensor& out, std::size_t saved_count,
                   std::size_t saved_values, BackwardFn fn) {
  Node n;
  n.parents = std::move(parents);
  n.fn = std::move(fn);
  n.numel = out.numel();
  n.owner = out.data();
  n.saved_count = saved_count;
  n.saved_values = saved_values;
  int id = static_cast<int>(nodes_.size());
  nodes_.push_back(std::move(n));
  retained_ += saved_count;
  retained_values_ += saved_values;
  peak_ = std::max(peak_, retained_);
  peak_values_ = std::max(peak_values_, retained_values_);
  auto d = out.data();
  d->tape = self_;
  d->node = id;
  return id;
}

std::vector<double>& Tape::grad_buf(int id) {
  Node& n = nodes_.at(static_cast<std::size_t>(id));
  if (n.grad.empty()) n.grad.assign(n.numel, 0.0);
  return n.grad;
}

void Tape::run_backward(const Tensor& loss) {
  if (loss.numel() != 1) {
    throw ContractError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
  }
  auto d = loss.data();
  int root = d->node;
  {
    auto tp = d->tape.lock();
    if (root < 0 || !tp || tp.get() != this) {
      throw ContractError("backward: no graph to traverse");
    }
  }

  // Reachable set; node ids are already topologically ordered.
  std::vector<char> reach(nodes_.size(), 0);
  std::vector<int> stack{root};
  while (!stack.empty()) {
    int id = stack.back();
    stack.pop_back();
    if (reach[static_cast<std::size_t>(id)]) continue;
    reach[static_cast<std::size_t>(id)] = 1;
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.freed) {
      throw ContractError("backward: subgraph was already consumed by an earlier backward pass");
    }
    for (int p : n.parents) {
      if (p >= 0 && !reach[static_cast<std::size_t>(p)]) stack.push_back(p);
    }
  }

  grad_buf(root)[0] = 1.0;

  for (int id = root; id >= 0; --id) {
    if (!reach[static_cast<std::size_t>(id)]) continue;
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.empty()) continue;  // no contribution reached this node
    if (!n.leaf && n.fn) n.fn(*this, n.grad);
    // Accumulate into the owning tensor if the handle is still alive.
    if (auto owner = n.owner.lock(); owner && owner->requires_grad) {
      if (owner->grad.empty()) owner->grad.assign(n.numel, 0.0);
      for (std::size_t i = 0; i < n.numel; ++i) owner->grad[i] += n.grad[i];
    }
    if (!n.leaf) {
      n.fn = nullptr;  // releases saved intermediates
      n.freed = true;
      retained_ -= n.saved_count;
      retained_values_ -= n.saved_values;
    }
    n.grad.clear();
    n.grad.shrink_to_fit();
  }
}

TapeScope::TapeScope() : tape_(std::shared_ptr<Tape>(new Tape())) {
  tape_->self_ = tape_;
  g_tape_stack.push_back(tape_);
}

TapeScope::~TapeScope() { g_tape_stack.pop_back(); }

void backward(const Tensor& loss) {
  if (!loss.defined()) throw ContractError("backward: no graph to traverse");
  auto d = loss.data();
  auto tp = d->tape.lock();
  if (!tp || d->node < 0) throw ContractError("backward: no graph to traverse");
  tp->run_backward(loss);
}

}  // namespace lakd
