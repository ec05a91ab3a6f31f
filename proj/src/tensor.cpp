#include "ddpe/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

#include "ddpe/errors.hpp"

namespace ddpe {

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (const auto extent : shape) {
        n *= extent;
    }
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        os << (i ? "x" : "") << shape[i];
    }
    os << ']';
    return os.str();
}

template <typename T>
std::span<T> Node<T>::ensure_grad() {
    if (grad.size() != data.size()) {
        grad.assign(data.size(), T(0));
    }
    return grad;
}

template <typename T>
void check_finite(std::span<const T> values, const char* where) {
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (!std::isfinite(values[i])) {
            std::ostringstream os;
            os << where << ": non-finite value at flat index " << i;
            throw NumericError(os.str());
        }
    }
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
    return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
    const std::size_t n = shape_numel(shape);
    return from(std::move(shape), std::vector<T>(n, value), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::from(Shape shape, std::vector<T> values, bool requires_grad) {
    if (shape_numel(shape) != values.size()) {
        throw DimensionError("tensor: shape " + shape_str(shape) + " does not hold " +
                             std::to_string(values.size()) + " values");
    }
    auto node = std::make_shared<Node<T>>();
    node->shape = std::move(shape);
    node->data = std::move(values);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
    return from({}, {value}, requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::make_result(const char* op, Shape shape, std::vector<T> values, std::vector<Tensor> inputs,
                                 std::function<void(Node<T>&)> backward_fn) {
    check_finite<T>(values, op);
    Tensor out = from(std::move(shape), std::move(values), false);
    out.node_->op = op;
    const bool tracked = std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) {
        return t.defined() && t.requires_grad();
    });
    if (tracked) {
        out.node_->requires_grad = true;
        out.node_->backward_fn = std::move(backward_fn);
        out.node_->inputs.reserve(inputs.size());
        for (auto& t : inputs) {
            out.node_->inputs.push_back(t.node_);
        }
    }
    return out;
}

template <typename T>
const Shape& Tensor<T>::shape() const {
    return node_->shape;
}

template <typename T>
std::size_t Tensor<T>::dim(std::size_t axis) const {
    if (axis >= node_->shape.size()) {
        throw DimensionError("tensor: axis " + std::to_string(axis) + " out of range for " + shape_str(shape()));
    }
    return node_->shape[axis];
}

template <typename T>
std::size_t Tensor<T>::numel() const {
    return node_->data.size();
}

template <typename T>
std::span<T> Tensor<T>::data() {
    return node_->data;
}

template <typename T>
std::span<const T> Tensor<T>::data() const {
    return node_->data;
}

template <typename T>
T Tensor<T>::item() const {
    if (numel() != 1) {
        throw DimensionError("tensor: item() on " + shape_str(shape()));
    }
    return node_->data[0];
}

template <typename T>
T Tensor<T>::at(std::initializer_list<std::size_t> index) const {
    const auto& s = shape();
    if (index.size() != s.size()) {
        throw DimensionError("tensor: index rank mismatch for " + shape_str(s));
    }
    std::size_t flat = 0;
    std::size_t axis = 0;
    for (const auto i : index) {
        if (i >= s[axis]) {
            throw IndexError("tensor: index out of range for " + shape_str(s));
        }
        flat = flat * s[axis] + i;
        ++axis;
    }
    return node_->data[flat];
}

template <typename T>
bool Tensor<T>::requires_grad() const {
    return node_->requires_grad;
}

template <typename T>
void Tensor<T>::set_requires_grad(bool flag) {
    node_->requires_grad = flag;
}

template <typename T>
bool Tensor<T>::has_grad() const {
    return node_->grad.size() == node_->data.size();
}

template <typename T>
std::vector<T> Tensor<T>::grad() const {
    if (!has_grad()) {
        return std::vector<T>(numel(), T(0));
    }
    return node_->grad;
}

template <typename T>
std::span<T> Tensor<T>::mutable_grad() {
    return node_->ensure_grad();
}

template <typename T>
void Tensor<T>::zero_grad() {
    std::fill(node_->grad.begin(), node_->grad.end(), T(0));
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
    return from(shape(), node_->data, false);
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
    return from(shape(), node_->data, requires_grad());
}

template <typename T>
void backward(const Tensor<T>& loss) {
    if (!loss.defined() || loss.numel() != 1) {
        throw ContractError("backward: loss must be a scalar tensor");
    }
    if (!loss.requires_grad()) {
        return;
    }

    // Iterative post-order DFS gives a topological order (inputs first).
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> visited;
    std::vector<std::pair<Node<T>*, std::size_t>> stack;
    stack.emplace_back(loss.node(), 0);
    visited.insert(loss.node());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            Node<T>* child = node->inputs[next++].get();
            if (child->requires_grad && visited.insert(child).second) {
                stack.emplace_back(child, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    loss.node()->ensure_grad()[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* node = *it;
        if (node->backward_fn && !node->grad.empty()) {
            node->backward_fn(*node);
        }
    }
    // Release interior gradients; leaves keep theirs for the optimizer.
    for (Node<T>* node : order) {
        if (node->backward_fn) {
            std::vector<T>().swap(node->grad);
        }
    }
}

template struct Node<float>;
template struct Node<double>;
template class Tensor<float>;
template class Tensor<double>;
template void backward<float>(const Tensor<float>&);
template void backward<double>(const Tensor<double>&);
template void check_finite<float>(std::span<const float>, const char*);
template void check_finite<double>(std::span<const double>, const char*);

} // namespace ddpe
