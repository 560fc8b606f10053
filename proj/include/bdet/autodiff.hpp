#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "bdet/kernels.hpp"
#include "bdet/tensor.hpp"

namespace bdet {

// A named, possibly trainable tensor. The trained weights of the network are
// exactly these; running statistics ride along as non-trainable entries so
// checkpoints capture them.
struct Parameter {
    enum class Kind { Weight, Bias, Gamma, Beta, RunningStat };

    std::string name;
    Tensor tensor;
    bool trainable = true;
    Kind kind = Kind::Weight;
};

class ParameterStore {
public:
    int add(Parameter p);
    bool contains(const std::string& name) const { return index_.count(name) != 0; }
    Parameter& at(const std::string& name);
    const Parameter& at(const std::string& name) const;
    Parameter& operator[](int i) { return params_[static_cast<std::size_t>(i)]; }
    const Parameter& operator[](int i) const { return params_[static_cast<std::size_t>(i)]; }
    int size() const { return static_cast<int>(params_.size()); }
    auto begin() { return params_.begin(); }
    auto end() { return params_.end(); }
    auto begin() const { return params_.begin(); }
    auto end() const { return params_.end(); }
    std::size_t total_elements() const;

private:
    std::vector<Parameter> params_;
    std::map<std::string, int> index_;
};

class Tape;

// Handle to one tape node.
struct Var {
    Tape* tape = nullptr;
    int id = -1;
    const Tensor& value() const;
    bool valid() const { return tape != nullptr && id >= 0; }
};

// Reverse-mode tape. Nodes are appended in evaluation order, which is also a
// topological order, so backward() is a single reverse sweep. A tape is
// confined to one execution context; independent tapes may run concurrently.
class Tape {
public:
    Var leaf(Tensor value, bool requires_grad);
    Var constant(Tensor value) { return leaf(std::move(value), false); }
    // Leaf bound to a parameter name; gradients are collected per name.
    Var parameter(const Parameter& p);

    void backward(const Var& loss);

    const Tensor& value(const Var& v) const;
    // Zero tensor if the node never received a gradient.
    Tensor gradient(const Var& v) const;
    // One entry per registered parameter; zeros for parameters the loss does
    // not depend on.
    std::map<std::string, Tensor> parameter_gradients() const;

    std::size_t node_count() const { return nodes_.size(); }

    // --- internals shared with the op builders ---
    using BackwardFn = std::function<void(Tape&, int self)>;
    int emit(const char* op, std::vector<int> parents, Tensor value, BackwardFn fn);
    const Tensor& value_of(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
    const Tensor& grad_of(int id) const { return nodes_[static_cast<std::size_t>(id)].grad; }
    Tensor& grad_accum(int id);  // allocates zeros on first touch
    bool requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }

private:
    struct Node {
        const char* op;
        std::vector<int> parents;
        Tensor value;
        Tensor grad;
        bool requires_grad = false;
        BackwardFn backward_fn;
    };
    std::vector<Node> nodes_;
    std::vector<std::pair<std::string, int>> named_leaves_;
};

// ---- differentiable operations ----

Var conv2d(const Var& input, const Var& kernel, const Var& bias, int stride, Padding pad);
Var batch_norm(const Var& input, const Var& gamma, const Var& beta, const Tensor& running_mean,
               const Tensor& running_var, bool training, Tensor* batch_mean_out = nullptr,
               Tensor* batch_var_out = nullptr);
Var leaky_relu(const Var& x, double alpha);
Var vsigmoid(const Var& x);
Var vexp(const Var& x);
Var vlog(const Var& x);
Var vclip(const Var& x, double lo, double hi);
Var vadd(const Var& a, const Var& b);
Var vsub(const Var& a, const Var& b);
Var vmul(const Var& a, const Var& b);
Var vscale(const Var& a, double c);
Var vshift(const Var& a, double c);
Var vsum(const Var& a);
Var vmean(const Var& a);
Var softmax_lastdim(const Var& logits);
Var dropout(const Var& input, double rate, std::uint64_t seed);
Var upsample_nearest(const Var& input, int factor);
Var concat_channels(const Var& a, const Var& b);
Var gather(const Var& input, std::vector<int> flat_indices);
// sum_i w_i * (max(z_i,0) - z_i*y_i + log1p(exp(-|z_i|))), the stable form of
// binary cross-entropy on logits.
Var bce_with_logits_sum(const Var& logits, Tensor targets, Tensor weights);
// logsumexp(z) - z[true_index]
Var cross_entropy_logits(const Var& logits, int true_index);
// 0.5 * lambda * sum over given leaves of ||w||^2
Var weight_decay_term(Tape& tape, const std::vector<Var>& weights, double lambda);

constexpr double kBatchNormEps = 1e-5;

}  // namespace bdet
