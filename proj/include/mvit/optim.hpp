#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "mvit/autodiff.hpp"
#include "mvit/tensor.hpp"

namespace mvit {

struct AdamWHyper {
    double lr = 3e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-4;
};

// Decoupled-weight-decay Adam. m/v mirror the parameter tensors in store
// order; `step` counts completed updates.
struct OptimizerState {
    AdamWHyper hyper;
    std::vector<Tensor> m;
    std::vector<Tensor> v;
    int64_t step = 0;
};

OptimizerState make_optimizer(const ParamStore& params, const AdamWHyper& hyper);

// theta <- theta - lr * ( mhat/(sqrt(vhat)+eps) + wd*theta )
void adamw_step(ParamStore& params, const std::vector<Tensor>& grads, OptimizerState& state);

// Linear warm-up for W epochs, then multiplicative reduction whenever the
// monitored validation metric (lower is better) fails to improve by at
// least `threshold` for `patience` consecutive epochs.
struct LRState {
    double base_lr = 3e-4;
    int warmup_epochs = 20;
    double factor = 0.5;
    int patience = 10;
    double threshold = 1e-4;
    double best_metric = 1e300;
    int epochs_since_improvement = 0;
    double current_lr = 3e-4;  // post-warm-up level
};

LRState make_lr_state(double base_lr, int warmup_epochs, double factor = 0.5,
                      int patience = 10, double threshold = 1e-4);

// Returns the learning rate for `epoch` and updates plateau tracking.
// During warm-up (epoch < W) the metric is ignored.
double lr_at(int epoch, double val_metric, LRState& state);

// -- metrics ---------------------------------------------------------------

// Fraction of argmax-correct predictions; ties predict class 0.
double compute_accuracy(const std::vector<std::array<double, 2>>& probs,
                        const std::vector<int>& labels);

// Mann-Whitney AUC: (wins + 0.5*ties) / (n_pos*n_neg), computed via midranks.
double compute_auc(const std::vector<double>& scores, const std::vector<int>& labels);

}  // namespace mvit
