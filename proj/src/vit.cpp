#include "mvit/vit.hpp"

#include <cmath>

#include "mvit/io.hpp"
#include "mvit/lffm.hpp"
#include "mvit/rng.hpp"

namespace mvit {

std::string arch_mode_name(ArchMode m) {
    switch (m) {
        case ArchMode::VitMri: return "vit-mri";
        case ArchMode::VitFnc: return "vit-fnc";
        case ArchMode::MultiVit1: return "multivit1";
        case ArchMode::Hybrid: return "hybrid";
    }
    return "unknown";
}

ArchMode arch_mode_from(const std::string& s) {
    if (s == "vit-mri") return ArchMode::VitMri;
    if (s == "vit-fnc") return ArchMode::VitFnc;
    if (s == "multivit1") return ArchMode::MultiVit1;
    if (s == "hybrid") return ArchMode::Hybrid;
    throw ConfigError("unknown architecture mode: " + s);
}

std::array<int64_t, 3> VitDescriptor::primary_grid() const {
    if (mode == ArchMode::Hybrid) {
        if (latent_shape.size() != 4) throw ConfigError("hybrid mode needs latent_shape");
        return {latent_shape[1], latent_shape[2], latent_shape[3]};
    }
    return ambient_dims;
}

std::array<int64_t, 3> VitDescriptor::primary_patch() const {
    return mode == ArchMode::Hybrid ? latent_patch : vol_patch;
}

int64_t VitDescriptor::primary_tokens() const {
    auto g = primary_grid();
    auto p = primary_patch();
    for (int i = 0; i < 3; ++i)
        if (g[static_cast<size_t>(i)] % p[static_cast<size_t>(i)])
            throw ConfigError("token grid " + std::to_string(g[static_cast<size_t>(i)]) +
                              " not divisible by patch " +
                              std::to_string(p[static_cast<size_t>(i)]));
    return (g[0] / p[0]) * (g[1] / p[1]) * (g[2] / p[2]);
}

int64_t VitDescriptor::primary_token_dim() const {
    auto p = primary_patch();
    int64_t ch = mode == ArchMode::Hybrid ? latent_shape[0] : 1;
    return ch * p[0] * p[1] * p[2];
}

int64_t VitDescriptor::fnc_tokens() const {
    if (mode == ArchMode::Hybrid && use_lffm) return latent_shape[2];  // h_z rows
    return fnc_c;
}

int64_t VitDescriptor::fnc_token_dim() const {
    if (mode == ArchMode::Hybrid && use_lffm) return latent_shape[0] * latent_shape[3];
    return fnc_c;
}

namespace {

void add_stream_params(ParamStore& p, const std::string& prefix, int64_t n_tokens,
                       int64_t token_dim, int64_t e, int64_t layers, int64_t mlp_hidden,
                       Rng& rng) {
    p.add(prefix + ".proj.w", glorot_uniform({token_dim, e}, token_dim, e, rng));
    p.add(prefix + ".proj.b", Tensor::zeros({e}));
    p.add(prefix + ".pos", normal_init({n_tokens, e}, 0.02, rng));
    for (int64_t l = 0; l < layers; ++l) {
        std::string lp = prefix + ".l" + std::to_string(l);
        p.add(lp + ".ln1.g", Tensor::full({e}, 1.0));
        p.add(lp + ".ln1.b", Tensor::zeros({e}));
        for (const char* nm : {"q", "k", "v", "o"}) {
            p.add(lp + "." + nm + ".w", glorot_uniform({e, e}, e, e, rng));
            p.add(lp + "." + nm + ".b", Tensor::zeros({e}));
        }
        p.add(lp + ".ln2.g", Tensor::full({e}, 1.0));
        p.add(lp + ".ln2.b", Tensor::zeros({e}));
        p.add(lp + ".ff1.w", glorot_uniform({e, mlp_hidden}, e, mlp_hidden, rng));
        p.add(lp + ".ff1.b", Tensor::zeros({mlp_hidden}));
        p.add(lp + ".ff2.w", glorot_uniform({mlp_hidden, e}, mlp_hidden, e, rng));
        p.add(lp + ".ff2.b", Tensor::zeros({e}));
    }
}

}  // namespace

ClassifierModel make_classifier(const VitDescriptor& desc, uint64_t seed) {
    if (desc.embed_dim % desc.heads)
        throw ConfigError("embed_dim must be divisible by heads");
    ClassifierModel model;
    model.desc = desc;
    Rng rng(derive_seed(seed, "classifier-init"));
    auto& p = model.params;
    int64_t e = desc.embed_dim;

    if (desc.mode == ArchMode::Hybrid && desc.use_lffm)
        add_lffm_params(p, desc.latent_shape[0], derive_seed(seed, "lffm"));

    if (desc.uses_volume())
        add_stream_params(p, "p", desc.primary_tokens(), desc.primary_token_dim(), e,
                          desc.layers, desc.mlp_hidden, rng);
    if (desc.uses_fnc())
        add_stream_params(p, "f", desc.fnc_tokens(), desc.fnc_token_dim(), e, desc.layers,
                          desc.mlp_hidden, rng);
    if (desc.has_cross()) {
        p.add("x.lnq.g", Tensor::full({e}, 1.0));
        p.add("x.lnq.b", Tensor::zeros({e}));
        p.add("x.lnkv.g", Tensor::full({e}, 1.0));
        p.add("x.lnkv.b", Tensor::zeros({e}));
        for (const char* nm : {"q", "k", "v", "o"}) {
            p.add(std::string("x.") + nm + ".w", glorot_uniform({e, e}, e, e, rng));
            p.add(std::string("x.") + nm + ".b", Tensor::zeros({e}));
        }
    }
    p.add("head.fc1.w", glorot_uniform({e, desc.mlp_hidden}, e, desc.mlp_hidden, rng));
    p.add("head.fc1.b", Tensor::zeros({desc.mlp_hidden}));
    p.add("head.fc2.w", glorot_uniform({desc.mlp_hidden, 2}, desc.mlp_hidden, 2, rng));
    p.add("head.fc2.b", Tensor::zeros({2}));
    return model;
}

TokenSequence tokenize_latent(const Var& z, const std::array<int64_t, 3>& patch,
                              const ParamStore& store, const std::string& prefix) {
    const auto& s = z->value.shape();
    if (s.size() != 4) throw ShapeError("tokenize_latent: expected rank-4 input");
    for (int i = 0; i < 3; ++i)
        if (s[static_cast<size_t>(i + 1)] % patch[static_cast<size_t>(i)])
            throw ShapeError("tokenize_latent: dims " + z->value.shape_str() +
                             " not divisible by patch size");
    Var flat = ops::patchify3d(z, patch[0], patch[1], patch[2]);
    Var tokens = ops::linear(flat, store.get(prefix + ".proj.w"), store.get(prefix + ".proj.b"));
    tokens = ops::add(tokens, store.get(prefix + ".pos"));

    TokenSequence seq;
    seq.tokens = tokens;
    int64_t nd = s[1] / patch[0], nh = s[2] / patch[1], nw = s[3] / patch[2];
    for (int64_t bz = 0; bz < nd; ++bz)
        for (int64_t by = 0; by < nh; ++by)
            for (int64_t bx = 0; bx < nw; ++bx)
                seq.patch_map.push_back({bz * patch[0], (bz + 1) * patch[0], by * patch[1],
                                         (by + 1) * patch[1], bx * patch[2],
                                         (bx + 1) * patch[2]});
    return seq;
}

TokenSequence tokenize_fnc_latent(const Var& zp, const ParamStore& store) {
    Var rows = ops::fnc_rows(zp);  // [h_z, C*w]
    Var tokens = ops::linear(rows, store.get("f.proj.w"), store.get("f.proj.b"));
    tokens = ops::add(tokens, store.get("f.pos"));
    return {tokens, {}};
}

TokenSequence tokenize_fnc_raw(const Tensor& fnc, const ParamStore& store) {
    if (fnc.rank() != 2 || fnc.dim(0) != fnc.dim(1))
        throw ShapeError("tokenize_fnc_raw: FNC matrix must be square");
    Var rows = constant(fnc);  // each matrix row is one token
    Var tokens = ops::linear(rows, store.get("f.proj.w"), store.get("f.proj.b"));
    tokens = ops::add(tokens, store.get("f.pos"));
    return {tokens, {}};
}

namespace {

// multi-head attention core; records one row-stochastic matrix per head
Var attention(const Var& q_in, const Var& kv_in, const ParamStore& store,
              const std::string& prefix, int64_t heads, AttentionRecord* record,
              const std::string& stream, int layer, bool kv_is_primary) {
    int64_t e = q_in->value.dim(1);
    int64_t dh = e / heads;
    Var q = ops::linear(q_in, store.get(prefix + ".q.w"), store.get(prefix + ".q.b"));
    Var k = ops::linear(kv_in, store.get(prefix + ".k.w"), store.get(prefix + ".k.b"));
    Var v = ops::linear(kv_in, store.get(prefix + ".v.w"), store.get(prefix + ".v.b"));
    double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<Var> ctx;
    ctx.reserve(static_cast<size_t>(heads));
    for (int64_t h = 0; h < heads; ++h) {
        Var qh = ops::slice_cols(q, h * dh, dh);
        Var kh = ops::slice_cols(k, h * dh, dh);
        Var vh = ops::slice_cols(v, h * dh, dh);
        Var att = ops::row_softmax(
            ops::mul_scalar(ops::matmul(qh, ops::transpose(kh)), scale));
        if (record)
            record->entries.push_back({stream, layer, static_cast<int>(h), att->value,
                                       kv_is_primary});
        ctx.push_back(ops::matmul(att, vh));
    }
    Var merged = ops::concat_cols(ctx);
    return ops::linear(merged, store.get(prefix + ".o.w"), store.get(prefix + ".o.b"));
}

Var feed_forward(const Var& x, const ParamStore& store, const std::string& prefix) {
    Var h = ops::gelu(ops::linear(x, store.get(prefix + ".ff1.w"), store.get(prefix + ".ff1.b")));
    return ops::linear(h, store.get(prefix + ".ff2.w"), store.get(prefix + ".ff2.b"));
}

}  // namespace

Var self_attention_block(const Var& seq, const ParamStore& store, const std::string& prefix,
                         int layer, int64_t heads, AttentionRecord* record,
                         const std::string& stream, bool kv_is_primary) {
    std::string lp = prefix + ".l" + std::to_string(layer);
    Var normed = ops::layer_norm(seq, store.get(lp + ".ln1.g"), store.get(lp + ".ln1.b"));
    Var att = attention(normed, normed, store, lp, heads, record, stream, layer,
                        kv_is_primary);
    Var x = ops::add(seq, att);
    Var normed2 = ops::layer_norm(x, store.get(lp + ".ln2.g"), store.get(lp + ".ln2.b"));
    Var out = ops::add(x, feed_forward(normed2, store, lp));
    if (!out->value.all_finite())
        throw NumericError("self_attention_block: non-finite activation in " + lp);
    return out;
}

Var transformer_stack(const Var& seq, const ParamStore& store, const std::string& prefix,
                      int64_t layers, int64_t heads, AttentionRecord* record,
                      const std::string& stream, bool kv_is_primary) {
    Var x = seq;
    for (int64_t l = 0; l < layers; ++l)
        x = self_attention_block(x, store, prefix, static_cast<int>(l), heads, record,
                                 stream, kv_is_primary);
    return x;
}

Var cross_attention(const Var& q_seq, const Var& kv_seq, const ParamStore& store,
                    int64_t heads, AttentionRecord* record, bool kv_is_primary) {
    if (q_seq->value.dim(1) != kv_seq->value.dim(1))
        throw ShapeError("cross_attention: embed dims differ");
    Var qn = ops::layer_norm(q_seq, store.get("x.lnq.g"), store.get("x.lnq.b"));
    Var kn = ops::layer_norm(kv_seq, store.get("x.lnkv.g"), store.get("x.lnkv.b"));
    Var att = attention(qn, kn, store, "x", heads, record, "cross", 0, kv_is_primary);
    return ops::add(q_seq, att);
}

Var classify_logits(const Var& seq, const ParamStore& store) {
    int64_t e = seq->value.dim(1);
    Var pooled = ops::reshape(ops::mean_rows(seq), {1, e});
    Var h = ops::gelu(ops::linear(pooled, store.get("head.fc1.w"), store.get("head.fc1.b")));
    Var logits = ops::linear(h, store.get("head.fc2.w"), store.get("head.fc2.b"));
    return ops::reshape(logits, {2});
}

Var softmax_probs(const Var& logits) {
    Var row = ops::reshape(logits, {1, logits->value.numel()});
    return ops::reshape(ops::row_softmax(row), {logits->value.numel()});
}

ForwardResult classifier_forward(const Tensor& volume, const Tensor& fnc,
                                 const ClassifierModel& model, const AutoencoderModel* ae,
                                 const Tensor* cached_latent, bool want_attention) {
    const auto& desc = model.desc;
    const auto& store = model.params;
    ForwardResult res;
    AttentionRecord* rec = want_attention ? &res.record : nullptr;

    TokenSequence primary, fncseq;
    bool have_primary = false, have_fnc = false;

    if (desc.mode == ArchMode::Hybrid) {
        Tensor latent;
        if (cached_latent)
            latent = *cached_latent;
        else if (ae)
            latent = extract_latent(volume, *ae);
        else
            throw ConfigError("hybrid classifier requires the pretrained extractor");
        if (latent.shape() != desc.latent_shape)
            throw ShapeError("classifier_forward: latent shape mismatch");
        Var z = constant(latent);
        if (desc.use_lffm) {
            Var zp = project_fnc_var(
                fnc, {desc.latent_shape[0], desc.latent_shape[2], desc.latent_shape[3]},
                store);
            Var zf = fuse_var(z, zp, store);
            primary = tokenize_latent(zf, desc.latent_patch, store, "p");
            fncseq = tokenize_fnc_latent(zp, store);
        } else {
            primary = tokenize_latent(z, desc.latent_patch, store, "p");
            fncseq = tokenize_fnc_raw(fnc, store);
        }
        have_primary = have_fnc = true;
    } else if (desc.mode == ArchMode::MultiVit1) {
        primary = tokenize_latent(constant(volume), desc.vol_patch, store, "p");
        fncseq = tokenize_fnc_raw(fnc, store);
        have_primary = have_fnc = true;
    } else if (desc.mode == ArchMode::VitMri) {
        primary = tokenize_latent(constant(volume), desc.vol_patch, store, "p");
        have_primary = true;
    } else {  // VitFnc
        fncseq = tokenize_fnc_raw(fnc, store);
        have_fnc = true;
    }

    Var readout;
    if (have_primary) {
        Var pstack = transformer_stack(primary.tokens, store, "p", desc.layers, desc.heads,
                                       rec, "fused", /*kv_is_primary=*/true);
        if (have_fnc) {
            Var fstack = transformer_stack(fncseq.tokens, store, "f", desc.layers,
                                           desc.heads, rec, "fnc", false);
            readout = cross_attention(pstack, fstack, store, desc.heads, rec,
                                      /*kv_is_primary=*/false);
        } else {
            readout = pstack;
        }
    } else {
        readout = transformer_stack(fncseq.tokens, store, "f", desc.layers, desc.heads, rec,
                                    "fnc", false);
    }

    res.logits = classify_logits(readout, store);
    Var probs = softmax_probs(res.logits);
    res.probs = {probs->value[0], probs->value[1]};
    if (rec) {
        if (have_primary) {
            res.record.primary_tokens = desc.primary_tokens();
            res.record.patch_map = primary.patch_map;
            res.record.grid_dims = desc.primary_grid();
        } else {
            res.record.primary_tokens = 0;
        }
    }
    return res;
}

ForwardResult classifier_forward(const StructuralVolume& volume, const FNCMatrix& fnc,
                                 const ClassifierModel& model, const AutoencoderModel* ae,
                                 const Tensor* cached_latent, bool want_attention) {
    Tensor vol = model.desc.uses_volume() || model.desc.needs_extractor()
                     ? volume.as_tensor()
                     : Tensor({1, 1, 1, 1});
    Tensor f = model.desc.uses_fnc() ? fnc.as_tensor() : Tensor({1, 1});
    return classifier_forward(vol, f, model, ae, cached_latent, want_attention);
}

void save_classifier(const std::string& path, const ClassifierModel& model,
                     const std::string& config_hash, const std::string& extractor_hash,
                     int fold_index) {
    Checkpoint ckpt;
    ckpt.header["kind"] = "classifier";
    ckpt.header["config_hash"] = config_hash;
    ckpt.header["extractor_hash"] = extractor_hash;
    ckpt.header["fold"] = fold_index;
    nlohmann::json d;
    d["mode"] = arch_mode_name(model.desc.mode);
    d["use_lffm"] = model.desc.use_lffm;
    d["embed_dim"] = model.desc.embed_dim;
    d["layers"] = model.desc.layers;
    d["heads"] = model.desc.heads;
    d["mlp_hidden"] = model.desc.mlp_hidden;
    d["latent_patch"] = model.desc.latent_patch;
    d["vol_patch"] = model.desc.vol_patch;
    d["ambient_dims"] = model.desc.ambient_dims;
    d["fnc_c"] = model.desc.fnc_c;
    d["latent_shape"] = model.desc.latent_shape;
    ckpt.header["descriptor"] = d;
    nlohmann::json params = nlohmann::json::array();
    for (const auto& p : model.params.all())
        params.push_back({{"name", p->name}, {"shape", p->value.shape()}});
    ckpt.header["params"] = params;
    ckpt.payload = model.params.flatten_f32();
    write_checkpoint(path, ckpt);
}

ClassifierModel load_classifier(const std::string& path, std::string* config_hash,
                                std::string* extractor_hash, int* fold_index) {
    Checkpoint ckpt = read_checkpoint(path);
    if (ckpt.header.value("kind", "") != "classifier")
        throw DataError("checkpoint is not a classifier: " + path);
    const auto& d = ckpt.header.at("descriptor");
    VitDescriptor desc;
    desc.mode = arch_mode_from(d.at("mode").get<std::string>());
    desc.use_lffm = d.at("use_lffm").get<bool>();
    desc.embed_dim = d.at("embed_dim").get<int64_t>();
    desc.layers = d.at("layers").get<int64_t>();
    desc.heads = d.at("heads").get<int64_t>();
    desc.mlp_hidden = d.at("mlp_hidden").get<int64_t>();
    auto lp = d.at("latent_patch").get<std::vector<int64_t>>();
    desc.latent_patch = {lp[0], lp[1], lp[2]};
    auto vp = d.at("vol_patch").get<std::vector<int64_t>>();
    desc.vol_patch = {vp[0], vp[1], vp[2]};
    auto ad = d.at("ambient_dims").get<std::vector<int64_t>>();
    desc.ambient_dims = {ad[0], ad[1], ad[2]};
    desc.fnc_c = d.at("fnc_c").get<int64_t>();
    desc.latent_shape = d.at("latent_shape").get<std::vector<int64_t>>();
    ClassifierModel model = make_classifier(desc, 0);
    model.params.load_flat_f32(ckpt.payload);
    if (config_hash) *config_hash = ckpt.header.value("config_hash", "");
    if (extractor_hash) *extractor_hash = ckpt.header.value("extractor_hash", "");
    if (fold_index) *fold_index = ckpt.header.value("fold", -1);
    return model;
}

}  // namespace mvit
