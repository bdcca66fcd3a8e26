#include "vlmo/numerics/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>

namespace vlmo {

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto extent : shape) n *= extent;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream out;
    out << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) out << 'x';
        out << shape[i];
    }
    out << ']';
    return out.str();
}

namespace {

thread_local TouchScope* g_touch = nullptr;
thread_local std::string g_corrupt_op;

void check_shape(const Shape& shape) {
    if (shape.empty()) throw DimensionError("tensor shape must have at least one extent");
    for (auto extent : shape) {
        if (extent == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
    }
}

}  // namespace

namespace detail {

std::uint64_t next_node_id() {
    static std::atomic<std::uint64_t> counter{1};
    return counter.fetch_add(1, std::memory_order_relaxed);
}

void note_read(std::uint64_t id) {
    if (g_touch) g_touch->touched_.insert(id);
}

template <typename T>
std::shared_ptr<Node<T>> make_result(const char* op, Shape shape,
                                     std::initializer_list<const Tensor<T>*> inputs) {
    auto node = std::make_shared<Node<T>>();
    node->id = next_node_id();
    node->op = op;
    node->data.resize(shape_numel(shape));
    node->shape = std::move(shape);
    node->parents.reserve(inputs.size());
    for (const auto* in : inputs) {
        note_read(in->id());
        node->requires_grad = node->requires_grad || in->requires_grad();
        node->parents.push_back(in->node_ptr());
    }
    return node;
}

template <typename T>
std::shared_ptr<Node<T>> make_result(const char* op, Shape shape, const std::vector<Tensor<T>>& inputs) {
    auto node = std::make_shared<Node<T>>();
    node->id = next_node_id();
    node->op = op;
    node->data.resize(shape_numel(shape));
    node->shape = std::move(shape);
    node->parents.reserve(inputs.size());
    for (const auto& in : inputs) {
        note_read(in.id());
        node->requires_grad = node->requires_grad || in.requires_grad();
        node->parents.push_back(in.node_ptr());
    }
    return node;
}

template std::shared_ptr<Node<float>> make_result(const char*, Shape, std::initializer_list<const Tensor<float>*>);
template std::shared_ptr<Node<double>> make_result(const char*, Shape, std::initializer_list<const Tensor<double>*>);
template std::shared_ptr<Node<float>> make_result(const char*, Shape, const std::vector<Tensor<float>>&);
template std::shared_ptr<Node<double>> make_result(const char*, Shape, const std::vector<Tensor<double>>&);

}  // namespace detail

TouchScope::TouchScope() : previous_(g_touch) { g_touch = this; }
TouchScope::~TouchScope() { g_touch = previous_; }

namespace testing {
void set_backward_corruption(std::string op) { g_corrupt_op = std::move(op); }
const std::string& backward_corruption() { return g_corrupt_op; }
}  // namespace testing

template <typename T>
std::span<T> Node<T>::ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad;
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
    return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
    check_shape(shape);
    auto node = std::make_shared<Node<T>>();
    node->id = detail::next_node_id();
    node->data.assign(shape_numel(shape), value);
    node->shape = std::move(shape);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
}

template <typename T>
Tensor<T> Tensor<T>::from(Shape shape, std::vector<T> values, bool requires_grad) {
    check_shape(shape);
    if (shape_numel(shape) != values.size()) {
        throw DimensionError("shape " + shape_str(shape) + " does not hold " + std::to_string(values.size()) +
                             " values");
    }
    auto node = std::make_shared<Node<T>>();
    node->id = detail::next_node_id();
    node->data.assign(values.begin(), values.end());
    node->shape = std::move(shape);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
    return full({1}, value, requires_grad);
}

template <typename T>
std::size_t Tensor<T>::dim(std::size_t axis) const {
    if (axis >= rank()) throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape()));
    return node_->shape[axis];
}

template <typename T>
std::size_t Tensor<T>::rows() const {
    return numel() / cols();
}

template <typename T>
std::size_t Tensor<T>::cols() const {
    return node_->shape.back();
}

template <typename T>
T Tensor<T>::item() const {
    if (numel() != 1) throw DimensionError("item() on non-scalar tensor " + shape_str(shape()));
    return node_->data[0];
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
    return from(shape(), std::vector<T>(node_->data.begin(), node_->data.end()), false);
}

template <typename T>
bool Tensor<T>::all_finite() const {
    return std::all_of(node_->data.begin(), node_->data.end(), [](T v) { return std::isfinite(v); });
}

template <typename T>
void Tensor<T>::backward() const {
    if (numel() != 1) throw ContractError("backward() requires a scalar loss, got " + shape_str(shape()));
    if (!requires_grad()) return;

    // Iterative post-order DFS gives a topological order without recursion.
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> visited;
    std::vector<std::pair<Node<T>*, std::size_t>> stack;
    stack.emplace_back(node_.get(), 0);
    visited.insert(node_.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node<T>* parent = node->parents[next++].get();
            if (parent->requires_grad && visited.insert(parent).second) stack.emplace_back(parent, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    node_->ensure_grad()[0] += T(1);
    const std::string& corrupt = testing::backward_corruption();
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* node = *it;
        if (!node->backward_fn) continue;
        if (node->grad.empty()) continue;
        if (!corrupt.empty() && corrupt == node->op) {
            for (auto& g : node->grad) g *= T(1.5);
        }
        node->backward_fn(*node);
        node->grad.clear();
        node->grad.shrink_to_fit();
    }
}

template class Tensor<float>;
template class Tensor<double>;
template struct Node<float>;
template struct Node<double>;

}  // namespace vlmo
