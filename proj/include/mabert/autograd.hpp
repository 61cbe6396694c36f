#pragma once

#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "mabert/tensor.hpp"

namespace mabert {

template <typename T>
struct Node {
    Tensor<T> value;
    std::optional<Tensor<T>> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> inputs;
    // Reads `grad` of this node and accumulates into the inputs.
    std::function<void(Node&)> backward_fn;

    void accumulate(const Tensor<T>& g);
    void accumulate(Tensor<T>&& g);
    // Gradient buffer, created as zeros on first use.
    Tensor<T>& grad_buffer();
};

// Disables graph recording on this thread for the guard's lifetime.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

    static bool grad_enabled() noexcept;

private:
    bool previous_;
};

// Handle to a value in the computation graph. Copies share the node.
template <typename T>
class Var {
public:
    Var() = default;
    explicit Var(Tensor<T> value, bool requires_grad = false);

    const Tensor<T>& value() const { return node_->value; }
    // In-place access for optimizers and finite-difference perturbation.
    Tensor<T>& mutable_value() { return node_->value; }
    const Shape& shape() const { return node_->value.shape(); }
    std::size_t numel() const { return node_->value.numel(); }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    bool defined() const noexcept { return static_cast<bool>(node_); }

    const std::optional<Tensor<T>>& grad() const { return node_->grad; }
    void zero_grad() { node_->grad.reset(); }

    const std::shared_ptr<Node<T>>& node() const { return node_; }

    // Result of an op: attaches inputs and the backward closure only when
    // recording is enabled and some input requires a gradient.
    static Var from_op(Tensor<T> value, std::vector<Var> inputs, std::function<void(Node<T>&)> backward_fn);

private:
    std::shared_ptr<Node<T>> node_;
};

// Reverse-mode accumulation from a 0-d loss. Visits nodes in a fixed
// topological order, so accumulation is deterministic for a fixed graph.
// Intermediate gradients and closures are released once consumed.
template <typename T>
void backward(const Var<T>& loss);

template <typename T>
using Gradients = std::map<std::string, Tensor<T>>;

// Named learnable leaves in registration order.
template <typename T>
class ParamStore {
public:
    struct Entry {
        std::string name;
        Var<T> var;
        bool decay;  // subject to weight decay (false for LN params and biases)
    };

    Var<T> add(const std::string& name, Tensor<T> init, bool decay);
    const Var<T>& get(const std::string& name) const;
    Var<T>& get(const std::string& name);
    bool contains(const std::string& name) const { return index_.count(name) > 0; }

    std::vector<Entry>& entries() { return entries_; }
    const std::vector<Entry>& entries() const { return entries_; }
    std::size_t size() const { return entries_.size(); }
    std::size_t scalar_count() const;

    void zero_grad();
    // Every parameter appears once; unreached ones map to zeros.
    Gradients<T> gradients() const;

private:
    std::vector<Entry> entries_;
    std::unordered_map<std::string, std::size_t> index_;
};

// backward() followed by collection of named gradients.
template <typename T>
Gradients<T> backward(const Var<T>& loss, const ParamStore<T>& params);

extern template struct Node<float>;
extern template struct Node<double>;
extern template class Var<float>;
extern template class Var<double>;
extern template class ParamStore<float>;
extern template class ParamStore<double>;

}  // namespace mabert
