#pragma once

#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "mvit/tensor.hpp"

namespace mvit {

// Reverse-mode autodiff over a dynamically built DAG. Gradients never live
// on the nodes themselves: backward() fills a caller-owned GradMap, so
// forward graphs built concurrently against shared (read-only) parameter
// leaves are thread safe.
struct Node;
using Var = std::shared_ptr<Node>;
using GradMap = std::unordered_map<const Node*, Tensor>;

struct Node {
    Tensor value;
    bool requires_grad = false;
    bool is_leaf = false;
    std::string name;
    std::vector<Var> parents;
    // Pushes this node's gradient g to its parents via sink(parent, contrib).
    std::function<void(const Tensor& g,
                       const std::function<void(const Node*, const Tensor&)>& sink)>
        backward;
};

Var constant(Tensor v);
Var leaf(Tensor v, std::string name);

// Accumulates d(loss)/d(node) for every reachable node with requires_grad
// into `grads`. `loss` must be scalar (numel == 1).
void backward(const Var& loss, GradMap& grads);

namespace ops {

// elementwise
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var add_scalar(const Var& a, double c);
Var mul_scalar(const Var& a, double c);
Var exp(const Var& a);
Var log(const Var& a);
Var sigmoid(const Var& a);
Var gelu(const Var& a);

// shape
Var reshape(const Var& a, std::vector<int64_t> shape);
Var concat_channels(const Var& a, const Var& b);            // 4D along dim 0
Var slice_channels(const Var& a, int64_t off, int64_t len); // 4D along dim 0
Var broadcast_depth(const Var& zp, int64_t depth);          // [C,H,W] -> [C,D,H,W]
Var crop3d(const Var& a, int64_t d, int64_t h, int64_t w);  // leading-corner crop
Var upsample_nearest2(const Var& a);                        // [C,D,H,W] -> x2 spatial

// linear algebra (2D)
Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);
Var linear(const Var& x, const Var& w, const Var& b);  // [N,i]x[i,o]+[o]
Var row_softmax(const Var& a);
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);
Var mean_rows(const Var& x);                       // [N,E] -> [E]
Var slice_cols(const Var& x, int64_t off, int64_t len);
Var concat_cols(const std::vector<Var>& xs);

// reductions
Var mean_all(const Var& a);  // -> scalar
Var sum_all(const Var& a);   // -> scalar

// conv / volumetric
Var conv3d(const Var& x, const Var& w, const Var& b, int stride, int pad);
Var add_channel_bias(const Var& x, const Var& v);  // [C,D,H,W] + [C]

// tokenization
// [C,D,H,W] -> [N, C*pd*ph*pw], blocks ordered z-major; within a patch the
// layout is (channel, dz, dy, dx).
Var patchify3d(const Var& x, int64_t pd, int64_t ph, int64_t pw);
// [C,H,W] -> [H, C*W]: one token per spatial row.
Var fnc_rows(const Var& zp);

// losses
Var mse(const Var& a, const Var& b);
Var cross_entropy_logits(const Var& logits, int label);  // logits: [K]

}  // namespace ops

// Named, ordered parameter collection. Iteration order is insertion order
// and defines the flat serialization layout.
class ParamStore {
   public:
    Var add(const std::string& name, Tensor init);
    const Var& get(const std::string& name) const;
    bool has(const std::string& name) const;
    const std::vector<Var>& all() const { return order_; }
    size_t count() const { return order_.size(); }
    int64_t total_scalars() const;

    std::vector<double> flatten() const;
    void load_flat(const std::vector<double>& flat);
    // float32 round trip used by the checkpoint container
    std::vector<float> flatten_f32() const;
    void load_flat_f32(const std::vector<float>& flat);

    void set_requires_grad(bool on);

   private:
    std::vector<Var> order_;
    std::unordered_map<std::string, Var> by_name_;
};

// Collects grads for `store` params from a GradMap in store order; missing
// entries come back as zero tensors.
std::vector<Tensor> gather_grads(const ParamStore& store, const GradMap& gm);

// init helpers (deterministic given rng state)
class Rng;
Tensor glorot_uniform(std::vector<int64_t> shape, int64_t fan_in, int64_t fan_out, Rng& rng);
Tensor normal_init(std::vector<int64_t> shape, double stddev, Rng& rng);

}  // namespace mvit
