#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <new>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace vlmo {

using Shape = std::vector<std::size_t>;

class DimensionError : public std::invalid_argument {
  public:
    using std::invalid_argument::invalid_argument;
};

class IndexError : public std::out_of_range {
  public:
    using std::out_of_range::out_of_range;
};

// Raised when a forward op sees or produces NaN/Inf.
class NumericError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

// Caller broke a documented precondition that is not a shape problem.
class ContractError : public std::logic_error {
  public:
    using std::logic_error::logic_error;
};

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

// 64-byte aligned storage. Vectorized reductions peel differently depending
// on a buffer's alignment, so a fixed alignment keeps results bit-identical
// from run to run. resize(n) leaves values uninitialized: every op writes
// its whole output, and zero-filling large activations first is measurable.
template <typename T>
struct AlignedAllocator {
    using value_type = T;
    static constexpr std::align_val_t kAlign{64};

    AlignedAllocator() = default;
    template <typename U>
    AlignedAllocator(const AlignedAllocator<U>&) {}

    T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
    void deallocate(T* p, std::size_t) { ::operator delete(p, kAlign); }

    template <typename U>
    void construct(U* p) noexcept {
        ::new (static_cast<void*>(p)) U;
    }
    template <typename U, typename... Args>
    void construct(U* p, Args&&... args) {
        ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
    }

    template <typename U>
    bool operator==(const AlignedAllocator<U>&) const { return true; }
};

}  // namespace detail

template <typename T>
using Buffer = std::vector<T, detail::AlignedAllocator<T>>;

template <typename T>
struct Node {
    Shape shape;
    Buffer<T> data;
    Buffer<T> grad;  // empty until something flows into it
    bool requires_grad = false;
    std::uint64_t id = 0;
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> parents;
    // Reads this->grad and accumulates into the parents' grads.
    std::function<void(Node&)> backward_fn;

    std::span<T> ensure_grad();
};

template <typename T>
class Tensor {
  public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, T value, bool requires_grad = false);
    static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false);
    static Tensor scalar(T value, bool requires_grad = false);

    bool defined() const { return static_cast<bool>(node_); }
    const Shape& shape() const { return node_->shape; }
    std::size_t dim(std::size_t axis) const;
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t numel() const { return node_->data.size(); }
    // Leading extents flattened: a [.., D] tensor viewed as rows x D.
    std::size_t rows() const;
    std::size_t cols() const;

    std::span<const T> data() const { return node_->data; }
    // Direct write access, for optimizers and initializers only.
    std::span<T> mutable_data() { return node_->data; }
    T item() const;
    T at(std::size_t flat) const { return node_->data.at(flat); }

    bool has_grad() const { return !node_->grad.empty(); }
    std::span<const T> grad() const { return node_->grad; }
    std::span<T> mutable_grad() { return node_->ensure_grad(); }
    void zero_grad() { node_->grad.clear(); }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool flag) { node_->requires_grad = flag; }
    std::uint64_t id() const { return node_->id; }
    const char* op() const { return node_->op; }

    // Fresh leaf holding a copy of the values, disconnected from the graph.
    Tensor detach() const;
    bool all_finite() const;

    // Reverse-mode sweep from a scalar. Leaf grads accumulate across calls;
    // interior grads are released once consumed.
    void backward() const;

    Node<T>* node() const { return node_.get(); }
    const std::shared_ptr<Node<T>>& node_ptr() const { return node_; }

  private:
    std::shared_ptr<Node<T>> node_;
};

namespace detail {

std::uint64_t next_node_id();

// Creates an output node wired to its inputs. Every op goes through here, so
// read instrumentation and requires-grad propagation live in one place.
template <typename T>
std::shared_ptr<Node<T>> make_result(const char* op, Shape shape,
                                     std::initializer_list<const Tensor<T>*> inputs);
template <typename T>
std::shared_ptr<Node<T>> make_result(const char* op, Shape shape,
                                     const std::vector<Tensor<T>>& inputs);

void note_read(std::uint64_t id);

}  // namespace detail

// Records the ids of every tensor consumed by an op while alive.
class TouchScope {
  public:
    TouchScope();
    ~TouchScope();
    TouchScope(const TouchScope&) = delete;
    TouchScope& operator=(const TouchScope&) = delete;

    const std::unordered_set<std::uint64_t>& touched() const { return touched_; }
    bool touched(std::uint64_t id) const { return touched_.count(id) > 0; }

  private:
    std::unordered_set<std::uint64_t> touched_;
    TouchScope* previous_;
    friend void detail::note_read(std::uint64_t);
};

namespace testing {
// Gradient-check test hook: scales the upstream gradient entering every
// node produced by `op` during backward. Empty string disables.
void set_backward_corruption(std::string op);
const std::string& backward_corruption();
}  // namespace testing

extern template class Tensor<float>;
extern template class Tensor<double>;
extern template struct Node<float>;
extern template struct Node<double>;

}  // namespace vlmo
