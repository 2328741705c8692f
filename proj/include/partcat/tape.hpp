#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "partcat/array.hpp"

namespace partcat {

/// Handle to a value recorded on a Tape.
struct Var {
    std::uint32_t id = 0;
};

/// Operation tape for reverse-mode differentiation.
///
/// Every recorded node holds its forward value. A node created from at least
/// one differentiable parent carries a backward closure that reads the node's
/// output gradient and accumulates into its parents' gradients. `backward`
/// replays closures in reverse recording order. One tape per forward pass;
/// tapes are not thread-safe.
template <typename T>
class Tape {
public:
    using BackwardFn = std::function<void(Tape&, const Array<T>& out_grad)>;

    Var leaf(Array<T> value, bool requires_grad = true);
    Var constant(Array<T> value) { return leaf(std::move(value), false); }

    /// Records a derived value. `fn` is kept only if some parent requires a gradient.
    Var record(Array<T> value, std::initializer_list<Var> parents, BackwardFn fn);

    const Array<T>& value(Var v) const { return nodes_.at(v.id).value; }
    const Shape& shape(Var v) const { return nodes_.at(v.id).value.shape(); }
    bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }

    /// Gradient buffer of `v`, zero-allocated on first access.
    Array<T>& grad(Var v);

    /// Gradient of `v` after backward; zeros when nothing flowed into it.
    Array<T> grad_or_zero(Var v) const;

    bool has_grad(Var v) const { return !nodes_.at(v.id).grad.empty(); }

    /// Seeds d(root)/d(root) = 1 and replays the tape. Root must hold one element.
    void backward(Var root);

    std::size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Array<T> value;
        Array<T> grad;
        BackwardFn backward;
        bool requires_grad = false;
    };
    std::vector<Node> nodes_;
};

extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace partcat
