#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace bf {

// Error hierarchy. The CLI maps these onto its exit-code table.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ShapeError : Error {
    using Error::Error;
};
struct NumericError : Error {
    using Error::Error;
};
struct IndexError : Error {
    using Error::Error;
};
struct DomainError : Error {
    using Error::Error;
};
struct UsageError : Error {
    using Error::Error;
};
struct ConfigError : Error {
    using Error::Error;
};
struct IoError : Error {
    using Error::Error;
};
struct ConsistencyError : Error {
    using Error::Error;
};

using Shape = std::vector<int>;

inline int64_t numel(const Shape& s) {
    int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

std::string shape_str(const Shape& s);

class Tensor;

/// One record of the recorded computation graph. Non-leaf nodes hold links
/// to their inputs and a backward closure; leaves are parameters or inputs.
struct Node {
    Shape shape;
    std::vector<float> value;
    std::vector<float> grad;  // allocated lazily; same length as value when present
    bool requires_grad = false;
    bool is_leaf = true;
    const char* op = "leaf";
    // f64 accumulator kept by scalar reductions (losses); NaN when unset.
    double scalar64 = std::numeric_limits<double>::quiet_NaN();
    std::vector<std::shared_ptr<Node>> inputs;
    std::function<void(Node&)> backward_fn;

    void ensure_grad() {
        if (grad.empty()) grad.assign(value.size(), 0.0f);
    }
};

/// Dense row-major f32 tensor; a cheap shared handle onto a graph node.
/// Values are immutable after an op records them; only leaf tensors
/// (parameters, inputs) may be mutated in place.
class Tensor {
  public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}
    Tensor(Shape shape, std::vector<float> data, bool requires_grad = false);

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, float v, bool requires_grad = false);
    static Tensor scalar(float v);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int rank() const { return static_cast<int>(node_->shape.size()); }
    int dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
    int64_t size() const { return static_cast<int64_t>(node_->value.size()); }

    std::span<const float> data() const { return node_->value; }
    /// In-place access, valid for leaves only (optimizer updates, loaders).
    std::span<float> mutable_data();

    bool requires_grad() const { return node_->requires_grad; }
    std::span<const float> grad() const { return node_->grad; }
    std::span<float> mutable_grad();
    void zero_grad();

    /// Value of a single-element tensor.
    float item() const;

    /// f64 value of a scalar reduction when the op kept one, else item().
    double item64() const;

    std::shared_ptr<Node> node() const { return node_; }

  private:
    std::shared_ptr<Node> node_;
};

/// Thread-local autograd mode. When disabled, ops compute values only and
/// record no graph (inference path).
bool autograd_enabled();

struct NoGradGuard {
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

  private:
    bool prev_;
};

/// Reverse-mode accumulation from a scalar loss. Populates grads of all
/// reachable leaves, then releases the recorded closures (the graph is
/// consumed). Throws UsageError when loss is not a recorded scalar.
void backward(const Tensor& loss);

/// Internal helper for op implementations: wraps value + backward closure
/// into a node, recording inputs only when grad mode is on and some input
/// requires grad.
Tensor make_op(const char* op, Shape shape, std::vector<float> value,
               std::vector<Tensor> inputs, std::function<void(Node&)> backward_fn);

}  // namespace bf
