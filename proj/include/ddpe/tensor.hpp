#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace ddpe {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// One record in the dynamic graph. Nodes reference their inputs, so the graph
// of a loss is every node reachable from it; it is acyclic by construction
// because inputs always exist before the node that consumes them.
template <typename T>
struct Node {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad; // empty until a gradient reaches this node
    bool requires_grad = false;
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> inputs;
    // Reads this node's grad and accumulates into the inputs' grads.
    std::function<void(Node&)> backward_fn;

    std::span<T> ensure_grad();
};

// Handle to a graph node. Copies share the node (reference semantics, like a
// parameter handle); use clone() or detach() for an independent value.
template <typename T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, T value, bool requires_grad = false);
    static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false);
    static Tensor scalar(T value, bool requires_grad = false);

    // Builds an op result. When any input requires grad, the result records
    // the inputs and the backward closure; otherwise it is a constant.
    // Throws NumericError if the produced values are not finite.
    static Tensor make_result(const char* op, Shape shape, std::vector<T> values,
                              std::vector<Tensor> inputs, std::function<void(Node<T>&)> backward_fn);

    bool defined() const { return static_cast<bool>(node_); }
    const Shape& shape() const;
    std::size_t rank() const { return shape().size(); }
    std::size_t dim(std::size_t axis) const;
    std::size_t numel() const;

    std::span<T> data();
    std::span<const T> data() const;
    T item() const;
    T at(std::initializer_list<std::size_t> index) const;

    bool requires_grad() const;
    void set_requires_grad(bool flag);
    bool has_grad() const;
    // Gradient values; all zeros when no gradient has been assigned.
    std::vector<T> grad() const;
    std::span<T> mutable_grad();
    void zero_grad();

    // Same values, no graph history, same requires_grad flag cleared.
    Tensor detach() const;
    // Independent leaf with copied values and the same requires_grad flag.
    Tensor clone() const;

    Node<T>* node() const { return node_.get(); }
    const std::shared_ptr<Node<T>>& node_ptr() const { return node_; }

private:
    explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

    std::shared_ptr<Node<T>> node_;
};

// Reverse-mode sweep from a scalar loss. Visits every reachable node once in
// reverse topological order; leaf gradients accumulate across calls until
// zero_grad().
template <typename T>
void backward(const Tensor<T>& loss);

// Throws NumericError naming `where` if any value is NaN or infinite.
template <typename T>
void check_finite(std::span<const T> values, const char* where);

template <typename To, typename From>
Tensor<To> cast(const Tensor<From>& t, bool requires_grad = false) {
    std::vector<To> values(t.data().begin(), t.data().end());
    return Tensor<To>::from(t.shape(), std::move(values), requires_grad);
}

} // namespace ddpe
