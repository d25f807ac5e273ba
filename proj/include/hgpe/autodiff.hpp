#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "hgpe/ops.hpp"
#include "hgpe/tensor.hpp"

// Reverse-mode differentiation over the primitive op set. Every op records
// one node on a GradTape; nodes are created in topological order, so the
// backward pass is a single reverse sweep that visits each node once.

namespace hgpe::ad {

class Tape;

// Lightweight handle to a tape node.
struct Var {
    Tape* tape = nullptr;
    int id = -1;

    const Tensor& val() const;
    const std::vector<int64_t>& dims() const;
    int64_t dim(int i) const { return dims().at(static_cast<size_t>(i)); }
};

class Tape {
  public:
    using BackwardFn = std::function<void(Tape&, int)>;

    Var leaf(Tensor value, std::string name = {}, bool learnable = true);
    Var constant(Tensor value) { return leaf(std::move(value), {}, false); }

    // Seeds d(loss)/d(loss) = 1 and sweeps the tape once in reverse
    // topological order. The loss must be scalar.
    void backward(const Var& loss);

    // Gradient of a node; zeros of the node's shape when it was unreached.
    Tensor grad_of(const Var& v) const;

    // name -> gradient for every named learnable leaf (zeros when unreached).
    std::map<std::string, Tensor> named_grads() const;

    const Tensor& value(int id) const { return nodes_[static_cast<size_t>(id)].value; }
    size_t size() const { return nodes_.size(); }
    void clear();

    // Node construction (used by the op overloads).
    int push(Tensor value, std::vector<int> inputs, BackwardFn bw);
    Tensor& gbuf(int id);  // gradient accumulator, allocated as zeros on demand
    bool has_grad(int id) const {
        return static_cast<size_t>(id) < grads_.size() && !grads_[static_cast<size_t>(id)].empty();
    }

  private:
    struct Node {
        Tensor value;
        std::vector<int> inputs;
        BackwardFn backward;
    };
    std::vector<Node> nodes_;
    std::vector<Tensor> grads_;
    std::vector<std::pair<std::string, int>> named_leaves_;
};

template <typename V>
struct is_var : std::false_type {};
template <>
struct is_var<Var> : std::true_type {};

// --- op overloads (see ops.hpp for the forward semantics) ------------------

Var conv2d(const Var& x, const Var& w, const Var* bias, int stride_h, int stride_w, int pad_h,
           int pad_w, int groups);
Var conv2d(const Var& x, const Var& w, int stride = 1, int padding = 0, int groups = 1);
Var conv2d(const Var& x, const Var& w, const Var& bias, int stride = 1, int padding = 0,
           int groups = 1);

Var strip_pool(const Var& x, StripAxis axis);
Var pool_global_avg(const Var& x);
Var softmax_lastdim(const Var& x);
Var activation(const Var& x, Act kind);

Var batch_norm(const Var& x, const Var& scale, const Var& shift, Tensor& running_mean,
               Tensor& running_var, bool training, double momentum = 0.1, double eps = 1e-5);
Var layer_norm(const Var& x, const Var& scale, const Var& shift, double eps = 1e-5);
Var group_norm(const Var& x, const Var& scale, const Var& shift, int groups, double eps = 1e-5);

std::pair<Var, PadRecord> window_partition(const Var& x, int win_h, int win_w);
Var window_merge(const Var& windows, const PadRecord& rec);

std::vector<Var> split_axis(const Var& x, const std::vector<int64_t>& sizes, int axis);
Var concat_axis(const std::vector<Var>& parts, int axis);
std::vector<Var> split_channels(const Var& x, const std::vector<int64_t>& sizes);
Var concat_channels(const std::vector<Var>& parts);

Var matmul_batched(const Var& a, const Var& b);
Var transpose_last2(const Var& x);
Var reshape(const Var& x, std::vector<int64_t> dims);
Var nchw_to_tokens(const Var& x);
Var tokens_to_nchw(const Var& x, int64_t h, int64_t w);
Var split_heads(const Var& x, int heads);
Var merge_heads(const Var& x, int heads);

Var add(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var mul_bcast(const Var& x, const Var& g);
Var scale_by(const Var& x, double s);
Var conv_channels1d(const Var& x, const Var& kernel);
Var linear(const Var& x, const Var& w, const Var& b);
Var reduce_sum(const Var& x);
Var reduce_mean(const Var& x);

// Label-smoothing cross entropy, mean over the batch. logits: [N, K].
Var cross_entropy(const Var& logits, const std::vector<int>& labels, double smoothing);

}  // namespace hgpe::ad

namespace hgpe {
// Buffer tensor type carried alongside a value type V (batch-norm running
// statistics): TensorT<T> for TensorT<T>, plain f64 Tensor for ad::Var.
template <typename V>
struct tensor_of {
    using type = V;
};
template <>
struct tensor_of<ad::Var> {
    using type = Tensor;
};
template <typename V>
using tensor_of_t = typename tensor_of<V>::type;
}  // namespace hgpe
