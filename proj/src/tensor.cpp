#include "bf/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

namespace bf {

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) os << "x";
        os << s[i];
    }
    os << "]";
    return os.str();
}

Tensor::Tensor(Shape shape, std::vector<float> data, bool requires_grad) {
    if (numel(shape) != static_cast<int64_t>(data.size())) {
        throw ShapeError("tensor: data length " + std::to_string(data.size()) +
                         " does not match shape " + shape_str(shape));
    }
    node_ = std::make_shared<Node>();
    node_->shape = std::move(shape);
    node_->value = std::move(data);
    node_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    const auto n = static_cast<size_t>(numel(shape));
    return Tensor(std::move(shape), std::vector<float>(n, 0.0f), requires_grad);
}

Tensor Tensor::full(Shape shape, float v, bool requires_grad) {
    const auto n = static_cast<size_t>(numel(shape));
    return Tensor(std::move(shape), std::vector<float>(n, v), requires_grad);
}

Tensor Tensor::scalar(float v) { return Tensor({1}, {v}); }

std::span<float> Tensor::mutable_data() {
    if (!node_->is_leaf) throw UsageError("mutable_data: only leaf tensors may be mutated");
    return node_->value;
}

std::span<float> Tensor::mutable_grad() {
    node_->ensure_grad();
    return node_->grad;
}

void Tensor::zero_grad() {
    std::fill(node_->grad.begin(), node_->grad.end(), 0.0f);
}

float Tensor::item() const {
    if (size() != 1) throw UsageError("item: tensor has " + std::to_string(size()) + " elements");
    return node_->value[0];
}

double Tensor::item64() const {
    if (size() != 1) throw UsageError("item64: tensor has " + std::to_string(size()) + " elements");
    if (!std::isnan(node_->scalar64)) return node_->scalar64;
    return node_->value[0];
}

namespace {
thread_local bool g_autograd_enabled = true;
}

bool autograd_enabled() { return g_autograd_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_autograd_enabled) { g_autograd_enabled = false; }
NoGradGuard::~NoGradGuard() { g_autograd_enabled = prev_; }

Tensor make_op(const char* op, Shape shape, std::vector<float> value,
               std::vector<Tensor> inputs, std::function<void(Node&)> backward_fn) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    n->is_leaf = false;
    n->op = op;
    bool rg = false;
    if (g_autograd_enabled) {
        for (const auto& in : inputs) rg = rg || (in.defined() && in.requires_grad());
    }
    n->requires_grad = rg;
    if (rg) {
        n->inputs.reserve(inputs.size());
        for (const auto& in : inputs) n->inputs.push_back(in.node());
        n->backward_fn = std::move(backward_fn);
    }
    return Tensor(std::move(n));
}

void backward(const Tensor& loss) {
    if (!loss.defined() || loss.size() != 1) {
        throw UsageError("backward: loss must be a scalar tensor");
    }
    Node* root = loss.node().get();
    if (!root->requires_grad) {
        throw UsageError("backward: no graph recorded for this tensor");
    }

    // Iterative DFS post-order; creation links give a valid topological order.
    std::vector<std::shared_ptr<Node>> order;
    std::unordered_set<Node*> visited;
    struct Frame {
        std::shared_ptr<Node> node;
        size_t next_input;
    };
    std::vector<Frame> stack;
    stack.push_back({loss.node(), 0});
    visited.insert(root);
    while (!stack.empty()) {
        Frame& f = stack.back();
        auto& ins = f.node->inputs;
        if (f.next_input < ins.size()) {
            auto child = ins[f.next_input++];
            if (child->requires_grad && visited.insert(child.get()).second) {
                stack.push_back({std::move(child), 0});
            }
        } else {
            order.push_back(f.node);
            stack.pop_back();
        }
    }

    root->ensure_grad();
    root->grad[0] = 1.0f;

    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node& n = **it;
        if (n.backward_fn) {
            n.ensure_grad();
            n.backward_fn(n);
        }
        if (!n.is_leaf) {
            n.backward_fn = nullptr;
            n.inputs.clear();
            n.grad.clear();
            n.grad.shrink_to_fit();
        }
    }
}

}  // namespace bf
