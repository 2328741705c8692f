#include "partcat/tape.hpp"

#include <sstream>

namespace partcat {

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

template <typename T>
Var Tape<T>::leaf(Array<T> value, bool requires_grad) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

template <typename T>
Var Tape<T>::record(Array<T> value, std::initializer_list<Var> parents, BackwardFn fn) {
    bool needs = false;
    for (Var p : parents) needs = needs || nodes_.at(p.id).requires_grad;
    Node n;
    n.value = std::move(value);
    n.requires_grad = needs;
    if (needs) n.backward = std::move(fn);
    nodes_.push_back(std::move(n));
    return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

template <typename T>
Array<T>& Tape<T>::grad(Var v) {
    Node& n = nodes_.at(v.id);
    if (n.grad.empty()) n.grad = Array<T>(n.value.shape());
    return n.grad;
}

template <typename T>
Array<T> Tape<T>::grad_or_zero(Var v) const {
    const Node& n = nodes_.at(v.id);
    if (n.grad.empty()) return Array<T>(n.value.shape());
    return n.grad;
}

template <typename T>
void Tape<T>::backward(Var root) {
    if (value(root).size() != 1) {
        throw ShapeError("backward root must be a single element, got " +
                         shape_string(shape(root)));
    }
    grad(root)[0] += T{1};
    for (std::size_t i = root.id + 1; i-- > 0;) {
        Node& n = nodes_[i];
        if (!n.backward || n.grad.empty()) continue;
        // Closures only touch parent gradients; nodes_ is never resized during replay.
        n.backward(*this, n.grad);
    }
}

template class Tape<float>;
template class Tape<double>;

}  // namespace partcat
