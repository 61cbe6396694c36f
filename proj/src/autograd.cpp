#include "mabert/autograd.hpp"

#include <unordered_set>

namespace mabert {

namespace {
thread_local bool g_grad_enabled = true;
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool NoGradGuard::grad_enabled() noexcept { return g_grad_enabled; }

template <typename T>
Tensor<T>& Node<T>::grad_buffer() {
    if (!grad) grad.emplace(value.shape());
    return *grad;
}

template <typename T>
void Node<T>::accumulate(const Tensor<T>& g) {
    if (g.shape() != value.shape()) {
        throw DimensionError("gradient shape " + shape_str(g.shape()) + " does not match value " +
                             shape_str(value.shape()));
    }
    if (!grad) {
        grad = g;
        return;
    }
    T* dst = grad->data();
    const T* src = g.data();
    for (std::size_t i = 0, n = g.numel(); i < n; ++i) dst[i] += src[i];
}

template <typename T>
void Node<T>::accumulate(Tensor<T>&& g) {
    if (!grad && g.shape() == value.shape()) {
        grad = std::move(g);
        return;
    }
    accumulate(static_cast<const Tensor<T>&>(g));
}

template <typename T>
Var<T>::Var(Tensor<T> value, bool requires_grad) : node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
}

template <typename T>
Var<T> Var<T>::from_op(Tensor<T> value, std::vector<Var> inputs, std::function<void(Node<T>&)> backward_fn) {
#ifndef NDEBUG
    if (!value.all_finite()) {
        bool inputs_finite = true;
        for (const auto& in : inputs) inputs_finite = inputs_finite && in.value().all_finite();
        if (inputs_finite) throw ContractError("non-finite result from finite inputs, shape " + shape_str(value.shape()));
    }
#endif
    Var out(std::move(value), false);
    if (!NoGradGuard::grad_enabled()) return out;
    bool any = false;
    for (const auto& in : inputs) any = any || in.requires_grad();
    if (!any) return out;
    out.node_->requires_grad = true;
    out.node_->inputs.reserve(inputs.size());
    for (auto& in : inputs) out.node_->inputs.push_back(in.node_);
    out.node_->backward_fn = std::move(backward_fn);
    return out;
}

template <typename T>
void backward(const Var<T>& loss) {
    if (!loss.defined() || loss.value().ndim() != 0) {
        throw ContractError("backward() needs a 0-d scalar loss, got shape " +
                            (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
    }
    if (!loss.requires_grad()) return;

    // Iterative post-order DFS; inputs visited in declaration order.
    // Owning handles keep every node alive while upstream edges are cleared.
    std::vector<std::shared_ptr<Node<T>>> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<std::shared_ptr<Node<T>>, std::size_t>> stack;
    stack.emplace_back(loss.node(), 0);
    seen.insert(loss.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            std::shared_ptr<Node<T>> child = node->inputs[next++];
            if (child->requires_grad && seen.insert(child.get()).second) stack.emplace_back(std::move(child), 0);
        } else {
            order.push_back(std::move(node));
            stack.pop_back();
        }
    }

    loss.node()->grad = Tensor<T>::scalar(T(1));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* node = it->get();
        if (!node->backward_fn) continue;  // leaf
        if (node->grad) node->backward_fn(*node);
        node->grad.reset();
        node->backward_fn = nullptr;
        node->inputs.clear();
    }
}

template <typename T>
Var<T> ParamStore<T>::add(const std::string& name, Tensor<T> init, bool decay) {
    if (index_.count(name)) throw ConfigError("duplicate parameter name '" + name + "'");
    Var<T> v(std::move(init), true);
    index_[name] = entries_.size();
    entries_.push_back({name, v, decay});
    return v;
}

template <typename T>
const Var<T>& ParamStore<T>::get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("no parameter named '" + name + "'");
    return entries_[it->second].var;
}

template <typename T>
Var<T>& ParamStore<T>::get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("no parameter named '" + name + "'");
    return entries_[it->second].var;
}

template <typename T>
std::size_t ParamStore<T>::scalar_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.var.numel();
    return n;
}

template <typename T>
void ParamStore<T>::zero_grad() {
    for (auto& e : entries_) e.var.zero_grad();
}

template <typename T>
Gradients<T> ParamStore<T>::gradients() const {
    Gradients<T> out;
    for (const auto& e : entries_) {
        const auto& g = e.var.grad();
        out.emplace(e.name, g ? *g : Tensor<T>(e.var.shape()));
    }
    return out;
}

template <typename T>
Gradients<T> backward(const Var<T>& loss, const ParamStore<T>& params) {
    backward(loss);
    return params.gradients();
}

template struct Node<float>;
template struct Node<double>;
template class Var<float>;
template class Var<double>;
template class ParamStore<float>;
template class ParamStore<double>;
template void backward(const Var<float>&);
template void backward(const Var<double>&);
template Gradients<float> backward(const Var<float>&, const ParamStore<float>&);
template Gradients<double> backward(const Var<double>&, const ParamStore<double>&);
template struct Node<long double>;
template class Var<long double>;
template class ParamStore<long double>;
template void backward(const Var<long double>&);
template Gradients<long double> backward(const Var<long double>&, const ParamStore<long double>&);

}  // namespace mabert
