#include "akd/tensor.hpp"

#include <numeric>
#include <sstream>
#include <unordered_set>

#include "akd/errors.hpp"

namespace akd {

std::size_t shape_size(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

namespace {
thread_local bool t_grad_enabled = true;
}  // namespace

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }
bool grad_enabled() { return t_grad_enabled; }

std::vector<double>& TensorData::grad_buffer() {
    if (grad.empty()) grad.assign(values.size(), 0.0);
    return grad;
}

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad) {
    if (shape_size(shape) != values.size()) {
        throw ShapeError("tensor shape " + shape_string(shape) + " does not hold " +
                         std::to_string(values.size()) + " values");
    }
    data_ = std::make_shared<TensorData>();
    data_->shape = std::move(shape);
    data_->values = std::move(values);
    data_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    const auto n = shape_size(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return Tensor(Shape{}, {value}, requires_grad);
}

Tensor Tensor::from_op(Shape shape, std::vector<double> values, std::vector<Tensor> inputs,
                       const char* name,
                       std::function<void(std::span<const double>)> backward) {
    Tensor out(std::move(shape), std::move(values));
    bool needs = false;
    if (!t_grad_enabled) return out;
    for (const auto& in : inputs) needs = needs || in.requires_grad();
    if (!needs) return out;
    auto node = std::make_shared<Node>();
    node->inputs.reserve(inputs.size());
    for (auto& in : inputs) node->inputs.push_back(in.data_);
    node->backward = std::move(backward);
    node->name = name;
    out.data_->node = std::move(node);
    out.data_->requires_grad = true;
    return out;
}

double Tensor::item() const {
    if (size() != 1) throw ShapeError("item() on tensor of shape " + shape_string(shape()));
    return data_->values[0];
}

Tensor Tensor::clone() const {
    return Tensor(data_->shape, data_->values, data_->requires_grad);
}

namespace {

// Post-order DFS: inputs precede the tensors they feed.
std::vector<TensorData*> topo_order(TensorData* root) {
    std::vector<TensorData*> order;
    std::unordered_set<TensorData*> seen;
    std::vector<std::pair<TensorData*, std::size_t>> stack;
    stack.emplace_back(root, 0);
    seen.insert(root);
    while (!stack.empty()) {
        auto& [t, next] = stack.back();
        const auto* node = t->node.get();
        if (node && next < node->inputs.size()) {
            TensorData* child = node->inputs[next++].get();
            if (child->node && seen.insert(child).second) stack.emplace_back(child, 0);
            continue;
        }
        order.push_back(t);
        stack.pop_back();
    }
    return order;
}

}  // namespace

void backward(const Tensor& loss) {
    if (!loss.defined() || loss.size() != 1) {
        throw ContractError("backward() requires a scalar loss, got shape " +
                            (loss.defined() ? shape_string(loss.shape()) : std::string("<undefined>")));
    }
    if (!loss.requires_grad()) {
        throw ContractError("backward() on a loss that is not connected to any trainable tensor");
    }
    TensorData* root = loss.impl().get();
    const auto order = topo_order(root);
    root->grad_buffer()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorData* t = *it;
        if (!t->node || t->grad.empty()) continue;
        t->node->backward(t->grad);
    }
}

std::size_t graph_size(const Tensor& root) {
    if (!root.defined() || !root.impl()->node) return 0;
    std::size_t n = 0;
    for (auto* t : topo_order(root.impl().get())) n += t->node ? 1 : 0;
    return n;
}

}  // namespace akd
