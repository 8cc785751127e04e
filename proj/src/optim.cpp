#include "mvit/optim.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>

#include "mvit/common.hpp"

namespace mvit {

OptimizerState make_optimizer(const ParamStore& params, const AdamWHyper& hyper) {
    OptimizerState st;
    st.hyper = hyper;
    for (const auto& p : params.all()) {
        st.m.push_back(Tensor::zeros(p->value.shape()));
        st.v.push_back(Tensor::zeros(p->value.shape()));
    }
    return st;
}

void adamw_step(ParamStore& params, const std::vector<Tensor>& grads, OptimizerState& state) {
    if (grads.size() != params.count() || state.m.size() != params.count())
        throw ShapeError("adamw_step: parameter/gradient count mismatch");
    const auto& h = state.hyper;
    state.step += 1;
    double bc1 = 1.0 - std::pow(h.beta1, static_cast<double>(state.step));
    double bc2 = 1.0 - std::pow(h.beta2, static_cast<double>(state.step));
    for (size_t k = 0; k < params.count(); ++k) {
        Var p = params.all()[k];
        const Tensor& g = grads[k];
        if (!g.same_shape(p->value)) throw ShapeError("adamw_step: gradient shape mismatch");
        if (!g.all_finite())
            throw NumericError("adamw_step: non-finite gradient for " + p->name);
        Tensor& m = state.m[k];
        Tensor& v = state.v[k];
        for (int64_t i = 0; i < g.numel(); ++i) {
            m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g[i];
            v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g[i] * g[i];
            double mhat = m[i] / bc1;
            double vhat = v[i] / bc2;
            p->value[i] -= h.lr * (mhat / (std::sqrt(vhat) + h.eps) +
                                   h.weight_decay * p->value[i]);
        }
    }
}

LRState make_lr_state(double base_lr, int warmup_epochs, double factor, int patience,
                      double threshold) {
    LRState st;
    st.base_lr = base_lr;
    st.warmup_epochs = warmup_epochs;
    st.factor = factor;
    st.patience = patience;
    st.threshold = threshold;
    st.current_lr = base_lr;
    return st;
}

double lr_at(int epoch, double val_metric, LRState& state) {
    if (epoch < 0) throw ConfigError("lr_at: negative epoch");
    if (state.warmup_epochs > 0 && epoch < state.warmup_epochs)
        return state.base_lr * static_cast<double>(epoch + 1) /
               static_cast<double>(state.warmup_epochs);
    if (state.best_metric - val_metric >= state.threshold) {
        state.best_metric = val_metric;
        state.epochs_since_improvement = 0;
    } else {
        state.epochs_since_improvement += 1;
        if (state.epochs_since_improvement >= state.patience) {
            state.current_lr *= state.factor;
            state.epochs_since_improvement = 0;
        }
    }
    return state.current_lr;
}

double compute_accuracy(const std::vector<std::array<double, 2>>& probs,
                        const std::vector<int>& labels) {
    if (probs.size() != labels.size())
        throw ShapeError("compute_accuracy: length mismatch");
    if (probs.empty()) throw DataError("compute_accuracy: empty input");
    int64_t correct = 0;
    for (size_t i = 0; i < probs.size(); ++i) {
        int pred = probs[i][1] > probs[i][0] ? 1 : 0;  // tie -> class 0
        if (pred == labels[i]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(probs.size());
}

double compute_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
    if (scores.size() != labels.size()) throw ShapeError("compute_auc: length mismatch");
    int64_t n_pos = 0, n_neg = 0;
    for (int l : labels) (l == 1 ? n_pos : n_neg) += 1;
    if (n_pos == 0 || n_neg == 0)
        throw DataError("compute_auc: both classes must be present");

    std::vector<size_t> order(scores.size());
    std::iota(order.begin(), order.end(), size_t{0});
    std::sort(order.begin(), order.end(),
              [&](size_t a, size_t b) { return scores[a] < scores[b]; });

    // midranks over tie groups; rank sums of positives give the U statistic
    double rank_sum_pos = 0.0;
    size_t i = 0;
    while (i < order.size()) {
        size_t j = i;
        while (j + 1 < order.size() && scores[order[j + 1]] == scores[order[i]]) ++j;
        double midrank = (static_cast<double>(i + 1) + static_cast<double>(j + 1)) / 2.0;
        for (size_t k = i; k <= j; ++k)
            if (labels[order[k]] == 1) rank_sum_pos += midrank;
        i = j + 1;
    }
    double u = rank_sum_pos -
               static_cast<double>(n_pos) * (static_cast<double>(n_pos) + 1.0) / 2.0;
    return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

}  // namespace mvit
