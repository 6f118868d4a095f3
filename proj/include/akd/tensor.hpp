#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace akd {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

struct TensorData;

// One recorded operation. The node lives on the tensor it produced and keeps
// its inputs alive; the backward rule reads the output gradient and
// accumulates into the inputs that require gradients.
struct Node {
    std::vector<std::shared_ptr<TensorData>> inputs;
    std::function<void(std::span<const double> out_grad)> backward;
    const char* name = "";
};

struct TensorData {
    Shape shape;
    std::vector<double> values;
    std::vector<double> grad;  // empty until a gradient is accumulated
    bool requires_grad = false;
    std::shared_ptr<Node> node;

    // Returns the gradient buffer, allocating zeros on first use.
    std::vector<double>& grad_buffer();
};

// Dense row-major tensor of doubles with an optional gradient slot.
//
// Tensors are handles: copying a Tensor aliases the same storage. Use
// clone() for an independent leaf copy.
class Tensor {
public:
    Tensor() = default;
    Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);
    static Tensor from_op(Shape shape, std::vector<double> values,
                          std::vector<Tensor> inputs, const char* name,
                          std::function<void(std::span<const double>)> backward);

    bool defined() const { return data_ != nullptr; }
    const Shape& shape() const { return data_->shape; }
    std::size_t dim(std::size_t i) const { return data_->shape.at(i); }
    std::size_t rank() const { return data_->shape.size(); }
    std::size_t size() const { return data_->values.size(); }

    std::span<double> values() { return data_->values; }
    std::span<const double> values() const { return data_->values; }
    double item() const;
    double& at(std::size_t flat) { return data_->values.at(flat); }
    double at(std::size_t flat) const { return data_->values.at(flat); }

    bool has_grad() const { return !data_->grad.empty(); }
    std::span<const double> grad() const { return data_->grad; }
    // Handles share storage, so gradient accumulation is allowed through const handles.
    std::span<double> mutable_grad() const { return data_->grad_buffer(); }
    void zero_grad() { data_->grad.clear(); }

    bool requires_grad() const { return data_->requires_grad; }
    void set_requires_grad(bool flag) { data_->requires_grad = flag; }
    bool is_leaf() const { return data_->node == nullptr; }

    // Independent leaf with copied values and no graph linkage.
    Tensor clone() const;
    Tensor detach() const { return clone(); }

    bool same_storage(const Tensor& other) const { return data_ == other.data_; }
    const std::shared_ptr<TensorData>& impl() const { return data_; }

private:
    explicit Tensor(std::shared_ptr<TensorData> data) : data_(std::move(data)) {}
    std::shared_ptr<TensorData> data_;
};

// While alive, operations on this thread record no graph. Used for
// evaluation and teacher passes.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

bool grad_enabled();

// Reverse-mode sweep from a scalar loss. Gradients accumulate into every
// reachable tensor that requires them; repeated paths are summed.
void backward(const Tensor& loss);

// Number of recorded nodes reachable from `root`; used by tests.
std::size_t graph_size(const Tensor& root);

}  // namespace akd
