#pragma once

#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

#include "xworld/tensor.hpp"

namespace xworld::ag {

// Minimal dynamic-tape reverse-mode autodiff over Tensor<T>. Nodes own their
// forward value; gradients are allocated lazily during backward(). Parameters
// are long-lived nodes held by a registry; dropping the loss root frees the
// rest of the graph.
template <typename T>
struct Node {
    Tensor<T> val;
    Tensor<T> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node<T>>> parents;
    std::function<void(Node<T>&)> backward_fn;

    void ensure_grad() {
        if (grad.shape != val.shape) {
            grad = Tensor<T>(val.shape);
        }
    }
};

template <typename T>
using Var = std::shared_ptr<Node<T>>;

// Graph recording can be switched off for inference so no parents/closures
// are retained.
inline bool& grad_mode() {
    thread_local bool enabled = true;
    return enabled;
}

struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(grad_mode()) { grad_mode() = false; }
    ~NoGradGuard() { grad_mode() = prev; }
};

template <typename T>
Var<T> constant(Tensor<T> v) {
    auto n = std::make_shared<Node<T>>();
    n->val = std::move(v);
    return n;
}

template <typename T>
Var<T> param(Tensor<T> v) {
    auto n = std::make_shared<Node<T>>();
    n->val = std::move(v);
    n->requires_grad = true;
    return n;
}

template <typename T>
bool track(const std::vector<Var<T>>& parents) {
    if (!grad_mode()) return false;
    for (const auto& p : parents)
        if (p->requires_grad) return true;
    return false;
}

// Reverse-mode sweep from a scalar (or pre-seeded) root.
template <typename T>
void backward(const Var<T>& root) {
    if (root->grad.shape != root->val.shape) {
        root->ensure_grad();
        if (root->val.numel() == 1) {
            root->grad[0] = T(1);
        } else {
            throw std::invalid_argument("backward: non-scalar root needs a seeded grad");
        }
    }
    // Iterative topo sort (graphs get deep during rollouts).
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> visited;
    std::vector<std::pair<Node<T>*, size_t>> stack;
    stack.push_back({root.get(), 0});
    while (!stack.empty()) {
        Node<T>* node = stack.back().first;
        size_t& idx = stack.back().second;
        if (idx < node->parents.size()) {
            Node<T>* next = node->parents[idx].get();
            ++idx;
            if (next->requires_grad && !visited.count(next)) stack.push_back({next, 0});
        } else {
            stack.pop_back();
            if (!visited.count(node)) {
                visited.insert(node);
                order.push_back(node);
            }
        }
    }
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* n = *it;
        if (n->backward_fn && n->grad.shape == n->val.shape) n->backward_fn(*n);
    }
}

}  // namespace xworld::ag
