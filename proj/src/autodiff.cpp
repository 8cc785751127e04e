#include "mvit/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "mvit/rng.hpp"

namespace mvit {

Var constant(Tensor v) {
    auto n = std::make_shared<Node>();
    n->value = std::move(v);
    n->requires_grad = false;
    n->is_leaf = true;
    return n;
}

Var leaf(Tensor v, std::string name) {
    auto n = std::make_shared<Node>();
    n->value = std::move(v);
    n->requires_grad = true;
    n->is_leaf = true;
    n->name = std::move(name);
    return n;
}

namespace {

Var make_node(Tensor value, std::vector<Var> parents,
              std::function<void(const Tensor&,
                                 const std::function<void(const Node*, const Tensor&)>&)>
                  bw) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->parents = std::move(parents);
    for (const auto& p : n->parents)
        if (p->requires_grad) n->requires_grad = true;
    if (n->requires_grad) n->backward = std::move(bw);
    return n;
}

void check_same_shape(const Var& a, const Var& b, const char* op) {
    if (!a->value.same_shape(b->value))
        throw ShapeError(std::string(op) + ": shape mismatch " + a->value.shape_str() +
                         " vs " + b->value.shape_str());
}

}  // namespace

void backward(const Var& loss, GradMap& grads) {
    if (loss->value.numel() != 1) throw ShapeError("backward: loss must be scalar");
    if (!loss->requires_grad) return;

    // post-order DFS -> topological order (parents before children)
    std::vector<const Node*> topo;
    std::unordered_set<const Node*> seen;
    std::vector<std::pair<const Node*, size_t>> stack;
    stack.emplace_back(loss.get(), 0);
    seen.insert(loss.get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            const Node* p = node->parents[idx].get();
            ++idx;
            if (p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            topo.push_back(node);
            stack.pop_back();
        }
    }

    grads[loss.get()] = Tensor::full(loss->value.shape(), 1.0);
    auto sink = [&grads](const Node* p, const Tensor& contrib) {
        if (!p->requires_grad) return;
        auto it = grads.find(p);
        if (it == grads.end())
            grads.emplace(p, contrib);
        else
            it->second.add_(contrib);
    };
    for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
        const Node* n = *it;
        if (!n->backward) continue;
        auto git = grads.find(n);
        if (git == grads.end()) continue;
        n->backward(git->second, sink);
    }
}

namespace ops {

Var add(const Var& a, const Var& b) {
    check_same_shape(a, b, "add");
    Tensor out = a->value;
    out.add_(b->value);
    return make_node(std::move(out), {a, b},
                     [ap = a.get(), bp = b.get()](const Tensor& g, const auto& sink) {
                         sink(ap, g);
                         sink(bp, g);
                     });
}

Var sub(const Var& a, const Var& b) {
    check_same_shape(a, b, "sub");
    Tensor out = a->value;
    const double* bd = b->value.data();
    for (int64_t i = 0; i < out.numel(); ++i) out[i] -= bd[i];
    return make_node(std::move(out), {a, b},
                     [ap = a.get(), bp = b.get()](const Tensor& g, const auto& sink) {
                         sink(ap, g);
                         Tensor gb = g;
                         gb.scale_(-1.0);
                         sink(bp, gb);
                     });
}

Var mul(const Var& a, const Var& b) {
    check_same_shape(a, b, "mul");
    Tensor out = a->value;
    const double* bd = b->value.data();
    for (int64_t i = 0; i < out.numel(); ++i) out[i] *= bd[i];
    return make_node(std::move(out), {a, b},
                     [a, b](const Tensor& g, const auto& sink) {
                         Tensor ga(g.shape()), gb(g.shape());
                         for (int64_t i = 0; i < g.numel(); ++i) {
                             ga[i] = g[i] * b->value[i];
                             gb[i] = g[i] * a->value[i];
                         }
                         sink(a.get(), ga);
                         sink(b.get(), gb);
                     });
}

Var add_scalar(const Var& a, double c) {
    Tensor out = a->value;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] += c;
    return make_node(std::move(out), {a},
                     [ap = a.get()](const Tensor& g, const auto& sink) { sink(ap, g); });
}

Var mul_scalar(const Var& a, double c) {
    Tensor out = a->value;
    out.scale_(c);
    return make_node(std::move(out), {a},
                     [ap = a.get(), c](const Tensor& g, const auto& sink) {
                         Tensor ga = g;
                         ga.scale_(c);
                         sink(ap, ga);
                     });
}

Var exp(const Var& a) {
    Tensor out(a->value.shape());
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::exp(a->value[i]);
    Tensor saved = out;
    return make_node(std::move(out), {a},
                     [ap = a.get(), saved](const Tensor& g, const auto& sink) {
                         Tensor ga(g.shape());
                         for (int64_t i = 0; i < g.numel(); ++i) ga[i] = g[i] * saved[i];
                         sink(ap, ga);
                     });
}

Var log(const Var& a) {
    Tensor out(a->value.shape());
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::log(a->value[i]);
    return make_node(std::move(out), {a},
                     [a](const Tensor& g, const auto& sink) {
                         Tensor ga(g.shape());
                         for (int64_t i = 0; i < g.numel(); ++i) ga[i] = g[i] / a->value[i];
                         sink(a.get(), ga);
                     });
}

Var sigmoid(const Var& a) {
    Tensor out(a->value.shape());
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = 1.0 / (1.0 + std::exp(-a->value[i]));
    Tensor saved = out;
    return make_node(std::move(out), {a},
                     [ap = a.get(), saved](const Tensor& g, const auto& sink) {
                         Tensor ga(g.shape());
                         for (int64_t i = 0; i < g.numel(); ++i)
                             ga[i] = g[i] * saved[i] * (1.0 - saved[i]);
                         sink(ap, ga);
                     });
}

Var gelu(const Var& a) {
    // exact (erf) form; derivative Phi(x) + x*phi(x)
    Tensor out(a->value.shape());
    for (int64_t i = 0; i < out.numel(); ++i) {
        double x = a->value[i];
        out[i] = 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2));
    }
    return make_node(std::move(out), {a},
                     [a](const Tensor& g, const auto& sink) {
                         Tensor ga(g.shape());
                         constexpr double inv_sqrt2pi = 0.3989422804014327;
                         for (int64_t i = 0; i < g.numel(); ++i) {
                             double x = a->value[i];
                             double cdf = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
                             double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
                             ga[i] = g[i] * (cdf + x * pdf);
                         }
                         sink(a.get(), ga);
                     });
}

Var reshape(const Var& a, std::vector<int64_t> shape) {
    Tensor out = Tensor::from(shape, std::vector<double>(a->value.data(),
                                                         a->value.data() + a->value.numel()));
    auto old_shape = a->value.shape();
    return make_node(std::move(out), {a},
                     [ap = a.get(), old_shape](const Tensor& g, const auto& sink) {
                         Tensor ga = Tensor::from(
                             old_shape, std::vector<double>(g.data(), g.data() + g.numel()));
                         sink(ap, ga);
                     });
}

Var concat_channels(const Var& a, const Var& b) {
    const auto& sa = a->value.shape();
    const auto& sb = b->value.shape();
    if (sa.size() != 4 || sb.size() != 4 || sa[1] != sb[1] || sa[2] != sb[2] || sa[3] != sb[3])
        throw ShapeError("concat_channels: incompatible shapes");
    Tensor out({sa[0] + sb[0], sa[1], sa[2], sa[3]});
    std::copy(a->value.data(), a->value.data() + a->value.numel(), out.data());
    std::copy(b->value.data(), b->value.data() + b->value.numel(),
              out.data() + a->value.numel());
    int64_t na = a->value.numel(), nb = b->value.numel();
    auto sha = sa, shb = sb;
    return make_node(std::move(out), {a, b},
                     [ap = a.get(), bp = b.get(), na, nb, sha, shb](const Tensor& g,
                                                                    const auto& sink) {
                         Tensor ga = Tensor::from(
                             sha, std::vector<double>(g.data(), g.data() + na));
                         Tensor gb = Tensor::from(
                             shb, std::vector<double>(g.data() + na, g.data() + na + nb));
                         sink(ap, ga);
                         sink(bp, gb);
                     });
}

Var slice_channels(const Var& a, int64_t off, int64_t len) {
    const auto& s = a->value.shape();
    if (s.size() != 4 || off < 0 || off + len > s[0])
        throw ShapeError("slice_channels: bad range");
    int64_t spatial = s[1] * s[2] * s[3];
    Tensor out({len, s[1], s[2], s[3]});
    std::copy(a->value.data() + off * spatial, a->value.data() + (off + len) * spatial,
              out.data());
    return make_node(std::move(out), {a},
                     [ap = a.get(), s, off, len, spatial](const Tensor& g, const auto& sink) {
                         Tensor ga(s);
                         std::copy(g.data(), g.data() + len * spatial,
                                   ga.data() + off * spatial);
                         sink(ap, ga);
                     });
}

Var broadcast_depth(const Var& zp, int64_t depth) {
    const auto& s = zp->value.shape();
    if (s.size() != 3) throw ShapeError("broadcast_depth: expected rank-3 input");
    Tensor out({s[0], depth, s[1], s[2]});
    for (int64_t c = 0; c < s[0]; ++c)
        for (int64_t d = 0; d < depth; ++d)
            for (int64_t y = 0; y < s[1]; ++y)
                for (int64_t x = 0; x < s[2]; ++x) out.at(c, d, y, x) = zp->value.at(c, y, x);
    return make_node(std::move(out), {zp},
                     [zpp = zp.get(), s, depth](const Tensor& g, const auto& sink) {
                         Tensor gz(s);
                         for (int64_t c = 0; c < s[0]; ++c)
                             for (int64_t d = 0; d < depth; ++d)
                                 for (int64_t y = 0; y < s[1]; ++y)
                                     for (int64_t x = 0; x < s[2]; ++x)
                                         gz.at(c, y, x) += g.at(c, d, y, x);
                         sink(zpp, gz);
                     });
}

Var crop3d(const Var& a, int64_t d, int64_t h, int64_t w) {
    const auto& s = a->value.shape();
    if (s.size() != 4) throw ShapeError("crop3d: expected rank-4 input");
    if (d > s[1] || h > s[2] || w > s[3]) throw ShapeError("crop3d: target exceeds input");
    Tensor out({s[0], d, h, w});
    for (int64_t c = 0; c < s[0]; ++c)
        for (int64_t z = 0; z < d; ++z)
            for (int64_t y = 0; y < h; ++y)
                for (int64_t x = 0; x < w; ++x) out.at(c, z, y, x) = a->value.at(c, z, y, x);
    return make_node(std::move(out), {a},
                     [ap = a.get(), s, d, h, w](const Tensor& g, const auto& sink) {
                         Tensor ga(s);
                         for (int64_t c = 0; c < s[0]; ++c)
                             for (int64_t z = 0; z < d; ++z)
                                 for (int64_t y = 0; y < h; ++y)
                                     for (int64_t x = 0; x < w; ++x)
                                         ga.at(c, z, y, x) = g.at(c, z, y, x);
                         sink(ap, ga);
                     });
}

Var upsample_nearest2(const Var& a) {
    const auto& s = a->value.shape();
    if (s.size() != 4) throw ShapeError("upsample_nearest2: expected rank-4 input");
    Tensor out({s[0], s[1] * 2, s[2] * 2, s[3] * 2});
    for (int64_t c = 0; c < s[0]; ++c)
        for (int64_t z = 0; z < s[1] * 2; ++z)
            for (int64_t y = 0; y < s[2] * 2; ++y)
                for (int64_t x = 0; x < s[3] * 2; ++x)
                    out.at(c, z, y, x) = a->value.at(c, z / 2, y / 2, x / 2);
    return make_node(std::move(out), {a},
                     [ap = a.get(), s](const Tensor& g, const auto& sink) {
                         Tensor ga(s);
                         for (int64_t c = 0; c < s[0]; ++c)
                             for (int64_t z = 0; z < s[1] * 2; ++z)
                                 for (int64_t y = 0; y < s[2] * 2; ++y)
                                     for (int64_t x = 0; x < s[3] * 2; ++x)
                                         ga.at(c, z / 2, y / 2, x / 2) += g.at(c, z, y, x);
                         sink(ap, ga);
                     });
}

Var matmul(const Var& a, const Var& b) {
    const auto& sa = a->value.shape();
    const auto& sb = b->value.shape();
    if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0])
        throw ShapeError("matmul: incompatible shapes " + a->value.shape_str() + " x " +
                         b->value.shape_str());
    int64_t m = sa[0], k = sa[1], n = sb[1];
    Tensor out({m, n});
    for (int64_t i = 0; i < m; ++i)
        for (int64_t p = 0; p < k; ++p) {
            double av = a->value.at(i, p);
            if (av == 0.0) continue;
            for (int64_t j = 0; j < n; ++j) out.at(i, j) += av * b->value.at(p, j);
        }
    return make_node(std::move(out), {a, b},
                     [a, b, m, k, n](const Tensor& g, const auto& sink) {
                         Tensor ga({m, k});
                         for (int64_t i = 0; i < m; ++i)
                             for (int64_t j = 0; j < n; ++j) {
                                 double gv = g.at(i, j);
                                 for (int64_t p = 0; p < k; ++p)
                                     ga.at(i, p) += gv * b->value.at(p, j);
                             }
                         Tensor gb({k, n});
                         for (int64_t i = 0; i < m; ++i)
                             for (int64_t p = 0; p < k; ++p) {
                                 double av = a->value.at(i, p);
                                 if (av == 0.0) continue;
                                 for (int64_t j = 0; j < n; ++j)
                                     gb.at(p, j) += av * g.at(i, j);
                             }
                         sink(a.get(), ga);
                         sink(b.get(), gb);
                     });
}

Var transpose(const Var& a) {
    const auto& s = a->value.shape();
    if (s.size() != 2) throw ShapeError("transpose: expected rank-2 input");
    Tensor out({s[1], s[0]});
    for (int64_t i = 0; i < s[0]; ++i)
        for (int64_t j = 0; j < s[1]; ++j) out.at(j, i) = a->value.at(i, j);
    return make_node(std::move(out), {a},
                     [ap = a.get(), s](const Tensor& g, const auto& sink) {
                         Tensor ga(s);
                         for (int64_t i = 0; i < s[0]; ++i)
                             for (int64_t j = 0; j < s[1]; ++j) ga.at(i, j) = g.at(j, i);
                         sink(ap, ga);
                     });
}

Var linear(const Var& x, const Var& w, const Var& b) {
    const auto& sx = x->value.shape();
    const auto& sw = w->value.shape();
    const auto& sb = b->value.shape();
    if (sx.size() != 2 || sw.size() != 2 || sb.size() != 1 || sx[1] != sw[0] || sw[1] != sb[0])
        throw ShapeError("linear: incompatible shapes");
    int64_t n = sx[0], in = sx[1], out_dim = sw[1];
    Tensor out({n, out_dim});
    for (int64_t i = 0; i < n; ++i) {
        for (int64_t j = 0; j < out_dim; ++j) out.at(i, j) = b->value[j];
        for (int64_t p = 0; p < in; ++p) {
            double xv = x->value.at(i, p);
            if (xv == 0.0) continue;
            for (int64_t j = 0; j < out_dim; ++j) out.at(i, j) += xv * w->value.at(p, j);
        }
    }
    return make_node(std::move(out), {x, w, b},
                     [x, w, bp = b.get(), n, in, out_dim](const Tensor& g, const auto& sink) {
                         Tensor gx({n, in});
                         for (int64_t i = 0; i < n; ++i)
                             for (int64_t j = 0; j < out_dim; ++j) {
                                 double gv = g.at(i, j);
                                 for (int64_t p = 0; p < in; ++p)
                                     gx.at(i, p) += gv * w->value.at(p, j);
                             }
                         Tensor gw({in, out_dim});
                         for (int64_t i = 0; i < n; ++i)
                             for (int64_t p = 0; p < in; ++p) {
                                 double xv = x->value.at(i, p);
                                 if (xv == 0.0) continue;
                                 for (int64_t j = 0; j < out_dim; ++j)
                                     gw.at(p, j) += xv * g.at(i, j);
                             }
                         Tensor gb({out_dim});
                         for (int64_t i = 0; i < n; ++i)
                             for (int64_t j = 0; j < out_dim; ++j) gb[j] += g.at(i, j);
                         sink(x.get(), gx);
                         sink(w.get(), gw);
                         sink(bp, gb);
                     });
}

Var row_softmax(const Var& a) {
    const auto& s = a->value.shape();
    if (s.size() != 2) throw ShapeError("row_softmax: expected rank-2 input");
    Tensor out(s);
    for (int64_t i = 0; i < s[0]; ++i) {
        double mx = -1e300;
        for (int64_t j = 0; j < s[1]; ++j) mx = std::max(mx, a->value.at(i, j));
        double z = 0.0;
        for (int64_t j = 0; j < s[1]; ++j) {
            out.at(i, j) = std::exp(a->value.at(i, j) - mx);
            z += out.at(i, j);
        }
        for (int64_t j = 0; j < s[1]; ++j) out.at(i, j) /= z;
    }
    Tensor saved = out;
    return make_node(std::move(out), {a},
                     [ap = a.get(), saved, s](const Tensor& g, const auto& sink) {
                         Tensor ga(s);
                         for (int64_t i = 0; i < s[0]; ++i) {
                             double dot = 0.0;
                             for (int64_t j = 0; j < s[1]; ++j)
                                 dot += g.at(i, j) * saved.at(i, j);
                             for (int64_t j = 0; j < s[1]; ++j)
                                 ga.at(i, j) = saved.at(i, j) * (g.at(i, j) - dot);
                         }
                         sink(ap, ga);
                     });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
    const auto& s = x->value.shape();
    if (s.size() != 2) throw ShapeError("layer_norm: expected rank-2 input");
    int64_t n = s[0], e = s[1];
    if (gamma->value.numel() != e || beta->value.numel() != e)
        throw ShapeError("layer_norm: gamma/beta size mismatch");
    Tensor out(s), xhat(s), inv_std({n});
    for (int64_t i = 0; i < n; ++i) {
        double mean = 0.0;
        for (int64_t j = 0; j < e; ++j) mean += x->value.at(i, j);
        mean /= static_cast<double>(e);
        double var = 0.0;
        for (int64_t j = 0; j < e; ++j) {
            double d = x->value.at(i, j) - mean;
            var += d * d;
        }
        var /= static_cast<double>(e);
        double istd = 1.0 / std::sqrt(var + eps);
        inv_std[i] = istd;
        for (int64_t j = 0; j < e; ++j) {
            xhat.at(i, j) = (x->value.at(i, j) - mean) * istd;
            out.at(i, j) = xhat.at(i, j) * gamma->value[j] + beta->value[j];
        }
    }
    return make_node(
        std::move(out), {x, gamma, beta},
        [xp = x.get(), gp = gamma.get(), bp = beta.get(), gamma, xhat, inv_std, n,
         e](const Tensor& g, const auto& sink) {
            Tensor gx({n, e}), gg({e}), gb({e});
            for (int64_t i = 0; i < n; ++i) {
                double mean_gy = 0.0, mean_gy_xhat = 0.0;
                for (int64_t j = 0; j < e; ++j) {
                    double gy = g.at(i, j) * gamma->value[j];
                    mean_gy += gy;
                    mean_gy_xhat += gy * xhat.at(i, j);
                }
                mean_gy /= static_cast<double>(e);
                mean_gy_xhat /= static_cast<double>(e);
                for (int64_t j = 0; j < e; ++j) {
                    double gy = g.at(i, j) * gamma->value[j];
                    gx.at(i, j) = (gy - mean_gy - xhat.at(i, j) * mean_gy_xhat) * inv_std[i];
                    gg[j] += g.at(i, j) * xhat.at(i, j);
                    gb[j] += g.at(i, j);
                }
            }
            sink(xp, gx);
            sink(gp, gg);
            sink(bp, gb);
        });
}

Var mean_rows(const Var& x) {
    const auto& s = x->value.shape();
    if (s.size() != 2) throw ShapeError("mean_rows: expected rank-2 input");
    int64_t n = s[0], e = s[1];
    Tensor out({e});
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < e; ++j) out[j] += x->value.at(i, j);
    out.scale_(1.0 / static_cast<double>(n));
    return make_node(std::move(out), {x},
                     [xp = x.get(), n, e](const Tensor& g, const auto& sink) {
                         Tensor gx({n, e});
                         double inv = 1.0 / static_cast<double>(n);
                         for (int64_t i = 0; i < n; ++i)
                             for (int64_t j = 0; j < e; ++j) gx.at(i, j) = g[j] * inv;
                         sink(xp, gx);
                     });
}

Var slice_cols(const Var& x, int64_t off, int64_t len) {
    const auto& s = x->value.shape();
    if (s.size() != 2 || off < 0 || off + len > s[1])
        throw ShapeError("slice_cols: bad range");
    int64_t n = s[0];
    Tensor out({n, len});
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < len; ++j) out.at(i, j) = x->value.at(i, off + j);
    return make_node(std::move(out), {x},
                     [xp = x.get(), s, off, len, n](const Tensor& g, const auto& sink) {
                         Tensor gx(s);
                         for (int64_t i = 0; i < n; ++i)
                             for (int64_t j = 0; j < len; ++j) gx.at(i, off + j) = g.at(i, j);
                         sink(xp, gx);
                     });
}

Var concat_cols(const std::vector<Var>& xs) {
    if (xs.empty()) throw ShapeError("concat_cols: empty input");
    int64_t n = xs[0]->value.dim(0), total = 0;
    for (const auto& v : xs) {
        if (v->value.rank() != 2 || v->value.dim(0) != n)
            throw ShapeError("concat_cols: incompatible shapes");
        total += v->value.dim(1);
    }
    Tensor out({n, total});
    int64_t off = 0;
    for (const auto& v : xs) {
        int64_t w = v->value.dim(1);
        for (int64_t i = 0; i < n; ++i)
            for (int64_t j = 0; j < w; ++j) out.at(i, off + j) = v->value.at(i, j);
        off += w;
    }
    std::vector<int64_t> widths;
    for (const auto& v : xs) widths.push_back(v->value.dim(1));
    return make_node(std::move(out), xs,
                     [xs, widths, n](const Tensor& g, const auto& sink) {
                         int64_t off = 0;
                         for (size_t k = 0; k < xs.size(); ++k) {
                             int64_t w = widths[k];
                             Tensor gx({n, w});
                             for (int64_t i = 0; i < n; ++i)
                                 for (int64_t j = 0; j < w; ++j)
                                     gx.at(i, j) = g.at(i, off + j);
                             sink(xs[k].get(), gx);
                             off += w;
                         }
                     });
}

Var mean_all(const Var& a) {
    double m = 0.0;
    for (int64_t i = 0; i < a->value.numel(); ++i) m += a->value[i];
    int64_t n = a->value.numel();
    m /= static_cast<double>(n);
    auto shape = a->value.shape();
    return make_node(Tensor::scalar(m), {a},
                     [ap = a.get(), shape, n](const Tensor& g, const auto& sink) {
                         Tensor ga = Tensor::full(shape, g[0] / static_cast<double>(n));
                         sink(ap, ga);
                     });
}

Var sum_all(const Var& a) {
    double m = 0.0;
    for (int64_t i = 0; i < a->value.numel(); ++i) m += a->value[i];
    auto shape = a->value.shape();
    return make_node(Tensor::scalar(m), {a},
                     [ap = a.get(), shape](const Tensor& g, const auto& sink) {
                         Tensor ga = Tensor::full(shape, g[0]);
                         sink(ap, ga);
                     });
}

namespace {
inline int64_t conv_out_dim(int64_t in, int64_t k, int stride, int pad) {
    return (in + 2 * pad - k) / stride + 1;
}
}  // namespace

Var conv3d(const Var& x, const Var& w, const Var& b, int stride, int pad) {
    const auto& sx = x->value.shape();
    const auto& sw = w->value.shape();
    if (sx.size() != 4) throw ShapeError("conv3d: input must be [C,D,H,W]");
    if (sw.size() != 4 || b->value.rank() != 1)
        throw ShapeError("conv3d: weight must be [Cout, Cin*kd*kh*kw grouped]");
    // weights are stored [Cout, Cin, k, k*k] flattened as [Cout, Cin, kd, kh*kw]
    // -- we instead require an explicit 5D layout packed into 4 dims:
    // shape = {Cout, Cin, kd, kh*kw} with cubic kernels only.
    int64_t cout = sw[0], cin = sw[1], kd = sw[2];
    int64_t khw = sw[3];
    int64_t kh = static_cast<int64_t>(std::llround(std::sqrt(static_cast<double>(khw))));
    if (kh * kh != khw) throw ShapeError("conv3d: kernel must be cubic");
    int64_t kw = kh;
    if (cin != sx[0]) throw ShapeError("conv3d: channel mismatch");
    if (b->value.numel() != cout) throw ShapeError("conv3d: bias size mismatch");
    int64_t od = conv_out_dim(sx[1], kd, stride, pad);
    int64_t oh = conv_out_dim(sx[2], kh, stride, pad);
    int64_t ow = conv_out_dim(sx[3], kw, stride, pad);
    if (od <= 0 || oh <= 0 || ow <= 0) throw ShapeError("conv3d: empty output");

    const double* xd = x->value.data();
    const double* wd = w->value.data();
    auto xin = [&](int64_t c, int64_t z, int64_t y, int64_t xx) {
        return xd[((c * sx[1] + z) * sx[2] + y) * sx[3] + xx];
    };
    auto wat = [&](int64_t co, int64_t ci, int64_t z, int64_t y, int64_t xx) {
        return wd[((co * cin + ci) * kd + z) * khw + y * kw + xx];
    };

    Tensor out({cout, od, oh, ow});
    for (int64_t co = 0; co < cout; ++co) {
        double bias = b->value[co];
        for (int64_t z = 0; z < od; ++z)
            for (int64_t y = 0; y < oh; ++y)
                for (int64_t xx = 0; xx < ow; ++xx) {
                    double acc = bias;
                    for (int64_t ci = 0; ci < cin; ++ci)
                        for (int64_t dz = 0; dz < kd; ++dz) {
                            int64_t iz = z * stride + dz - pad;
                            if (iz < 0 || iz >= sx[1]) continue;
                            for (int64_t dy = 0; dy < kh; ++dy) {
                                int64_t iy = y * stride + dy - pad;
                                if (iy < 0 || iy >= sx[2]) continue;
                                for (int64_t dx = 0; dx < kw; ++dx) {
                                    int64_t ix = xx * stride + dx - pad;
                                    if (ix < 0 || ix >= sx[3]) continue;
                                    acc += wat(co, ci, dz, dy, dx) * xin(ci, iz, iy, ix);
                                }
                            }
                        }
                    out.at(co, z, y, xx) = acc;
                }
    }

    return make_node(
        std::move(out), {x, w, b},
        [x, w, bp = b.get(), sx, cout, cin, kd, kh, kw, khw, od, oh, ow, stride,
         pad](const Tensor& g, const auto& sink) {
            Tensor gx(sx);
            Tensor gw({cout, cin, kd, khw});
            Tensor gb({cout});
            const double* xd = x->value.data();
            const double* wd = w->value.data();
            for (int64_t co = 0; co < cout; ++co)
                for (int64_t z = 0; z < od; ++z)
                    for (int64_t y = 0; y < oh; ++y)
                        for (int64_t xx = 0; xx < ow; ++xx) {
                            double gv = g.at(co, z, y, xx);
                            if (gv == 0.0) continue;
                            gb[co] += gv;
                            for (int64_t ci = 0; ci < cin; ++ci)
                                for (int64_t dz = 0; dz < kd; ++dz) {
                                    int64_t iz = z * stride + dz - pad;
                                    if (iz < 0 || iz >= sx[1]) continue;
                                    for (int64_t dy = 0; dy < kh; ++dy) {
                                        int64_t iy = y * stride + dy - pad;
                                        if (iy < 0 || iy >= sx[2]) continue;
                                        for (int64_t dx = 0; dx < kw; ++dx) {
                                            int64_t ix = xx * stride + dx - pad;
                                            if (ix < 0 || ix >= sx[3]) continue;
                                            int64_t xoff =
                                                ((ci * sx[1] + iz) * sx[2] + iy) * sx[3] + ix;
                                            int64_t woff =
                                                ((co * cin + ci) * kd + dz) * khw + dy * kw +
                                                dx;
                                            gw[woff] += gv * xd[xoff];
                                            gx[xoff] += gv * wd[woff];
                                        }
                                    }
                                }
                        }
            sink(x.get(), gx);
            sink(w.get(), gw);
            sink(bp, gb);
        });
}

Var add_channel_bias(const Var& x, const Var& v) {
    const auto& s = x->value.shape();
    if (s.size() != 4 || v->value.numel() != s[0])
        throw ShapeError("add_channel_bias: shape mismatch");
    Tensor out = x->value;
    int64_t spatial = s[1] * s[2] * s[3];
    for (int64_t c = 0; c < s[0]; ++c) {
        double bias = v->value[c];
        for (int64_t i = 0; i < spatial; ++i) out[c * spatial + i] += bias;
    }
    return make_node(std::move(out), {x, v},
                     [xp = x.get(), vp = v.get(), s, spatial](const Tensor& g,
                                                              const auto& sink) {
                         sink(xp, g);
                         Tensor gv({s[0]});
                         for (int64_t c = 0; c < s[0]; ++c)
                             for (int64_t i = 0; i < spatial; ++i)
                                 gv[c] += g[c * spatial + i];
                         sink(vp, gv);
                     });
}

Var patchify3d(const Var& x, int64_t pd, int64_t ph, int64_t pw) {
    const auto& s = x->value.shape();
    if (s.size() != 4) throw ShapeError("patchify3d: expected rank-4 input");
    if (s[1] % pd || s[2] % ph || s[3] % pw)
        throw ShapeError("patchify3d: dims " + x->value.shape_str() +
                         " not divisible by patch size");
    int64_t nd = s[1] / pd, nh = s[2] / ph, nw = s[3] / pw;
    int64_t n_tok = nd * nh * nw, tok_dim = s[0] * pd * ph * pw;
    Tensor out({n_tok, tok_dim});
    for (int64_t bz = 0; bz < nd; ++bz)
        for (int64_t by = 0; by < nh; ++by)
            for (int64_t bx = 0; bx < nw; ++bx) {
                int64_t tok = (bz * nh + by) * nw + bx;
                int64_t k = 0;
                for (int64_t c = 0; c < s[0]; ++c)
                    for (int64_t dz = 0; dz < pd; ++dz)
                        for (int64_t dy = 0; dy < ph; ++dy)
                            for (int64_t dx = 0; dx < pw; ++dx)
                                out.at(tok, k++) = x->value.at(c, bz * pd + dz, by * ph + dy,
                                                               bx * pw + dx);
            }
    return make_node(std::move(out), {x},
                     [xp = x.get(), s, pd, ph, pw, nd, nh, nw](const Tensor& g,
                                                               const auto& sink) {
                         Tensor gx(s);
                         for (int64_t bz = 0; bz < nd; ++bz)
                             for (int64_t by = 0; by < nh; ++by)
                                 for (int64_t bx = 0; bx < nw; ++bx) {
                                     int64_t tok = (bz * nh + by) * nw + bx;
                                     int64_t k = 0;
                                     for (int64_t c = 0; c < s[0]; ++c)
                                         for (int64_t dz = 0; dz < pd; ++dz)
                                             for (int64_t dy = 0; dy < ph; ++dy)
                                                 for (int64_t dx = 0; dx < pw; ++dx)
                                                     gx.at(c, bz * pd + dz, by * ph + dy,
                                                           bx * pw + dx) = g.at(tok, k++);
                                 }
                         sink(xp, gx);
                     });
}

Var fnc_rows(const Var& zp) {
    const auto& s = zp->value.shape();
    if (s.size() != 3) throw ShapeError("fnc_rows: expected rank-3 input");
    int64_t c = s[0], h = s[1], w = s[2];
    Tensor out({h, c * w});
    for (int64_t y = 0; y < h; ++y)
        for (int64_t ci = 0; ci < c; ++ci)
            for (int64_t x = 0; x < w; ++x) out.at(y, ci * w + x) = zp->value.at(ci, y, x);
    return make_node(std::move(out), {zp},
                     [zpp = zp.get(), s, c, h, w](const Tensor& g, const auto& sink) {
                         Tensor gz(s);
                         for (int64_t y = 0; y < h; ++y)
                             for (int64_t ci = 0; ci < c; ++ci)
                                 for (int64_t x = 0; x < w; ++x)
                                     gz.at(ci, y, x) = g.at(y, ci * w + x);
                         sink(zpp, gz);
                     });
}

Var mse(const Var& a, const Var& b) {
    check_same_shape(a, b, "mse");
    auto d = sub(a, b);
    return mean_all(mul(d, d));
}

Var cross_entropy_logits(const Var& logits, int label) {
    const auto& s = logits->value.shape();
    if (s.size() != 1) throw ShapeError("cross_entropy_logits: expected rank-1 logits");
    int64_t k = s[0];
    if (label < 0 || label >= k) throw ShapeError("cross_entropy_logits: label out of range");
    double mx = -1e300;
    for (int64_t j = 0; j < k; ++j) mx = std::max(mx, logits->value[j]);
    double z = 0.0;
    for (int64_t j = 0; j < k; ++j) z += std::exp(logits->value[j] - mx);
    double loss = std::log(z) + mx - logits->value[label];
    Tensor probs({k});
    for (int64_t j = 0; j < k; ++j) probs[j] = std::exp(logits->value[j] - mx) / z;
    return make_node(Tensor::scalar(loss), {logits},
                     [lp = logits.get(), probs, label, k](const Tensor& g, const auto& sink) {
                         Tensor gl({k});
                         for (int64_t j = 0; j < k; ++j)
                             gl[j] = g[0] * (probs[j] - (j == label ? 1.0 : 0.0));
                         sink(lp, gl);
                     });
}

}  // namespace ops

Var ParamStore::add(const std::string& name, Tensor init) {
    if (by_name_.count(name)) throw ConfigError("ParamStore: duplicate parameter " + name);
    Var v = leaf(std::move(init), name);
    order_.push_back(v);
    by_name_[name] = v;
    return v;
}

const Var& ParamStore::get(const std::string& name) const {
    auto it = by_name_.find(name);
    if (it == by_name_.end()) throw ConfigError("ParamStore: unknown parameter " + name);
    return it->second;
}

bool ParamStore::has(const std::string& name) const { return by_name_.count(name) > 0; }

int64_t ParamStore::total_scalars() const {
    int64_t n = 0;
    for (const auto& v : order_) n += v->value.numel();
    return n;
}

std::vector<double> ParamStore::flatten() const {
    std::vector<double> flat;
    flat.reserve(static_cast<size_t>(total_scalars()));
    for (const auto& v : order_)
        flat.insert(flat.end(), v->value.data(), v->value.data() + v->value.numel());
    return flat;
}

void ParamStore::load_flat(const std::vector<double>& flat) {
    if (static_cast<int64_t>(flat.size()) != total_scalars())
        throw ShapeError("ParamStore::load_flat: size mismatch");
    size_t off = 0;
    for (auto& v : order_) {
        std::copy(flat.begin() + static_cast<long>(off),
                  flat.begin() + static_cast<long>(off + v->value.numel()), v->value.data());
        off += static_cast<size_t>(v->value.numel());
    }
}

std::vector<float> ParamStore::flatten_f32() const {
    std::vector<float> flat;
    flat.reserve(static_cast<size_t>(total_scalars()));
    for (const auto& v : order_)
        for (int64_t i = 0; i < v->value.numel(); ++i)
            flat.push_back(static_cast<float>(v->value[i]));
    return flat;
}

void ParamStore::load_flat_f32(const std::vector<float>& flat) {
    if (static_cast<int64_t>(flat.size()) != total_scalars())
        throw ShapeError("ParamStore::load_flat_f32: size mismatch");
    size_t off = 0;
    for (auto& v : order_) {
        for (int64_t i = 0; i < v->value.numel(); ++i)
            v->value[i] = static_cast<double>(flat[off + static_cast<size_t>(i)]);
        off += static_cast<size_t>(v->value.numel());
    }
}

void ParamStore::set_requires_grad(bool on) {
    for (auto& v : order_) v->requires_grad = on;
}

std::vector<Tensor> gather_grads(const ParamStore& store, const GradMap& gm) {
    std::vector<Tensor> out;
    out.reserve(store.count());
    for (const auto& v : store.all()) {
        auto it = gm.find(v.get());
        if (it == gm.end())
            out.push_back(Tensor::zeros(v->value.shape()));
        else
            out.push_back(it->second);
    }
    return out;
}

Tensor glorot_uniform(std::vector<int64_t> shape, int64_t fan_in, int64_t fan_out, Rng& rng) {
    Tensor t(std::move(shape));
    double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(-limit, limit);
    return t;
}

Tensor normal_init(std::vector<int64_t> shape, double stddev, Rng& rng) {
    Tensor t(std::move(shape));
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.normal(0.0, stddev);
    return t;
}

}  // namespace mvit
