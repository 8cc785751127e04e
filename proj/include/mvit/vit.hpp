#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mvit/autodiff.hpp"
#include "mvit/autoencoder.hpp"
#include "mvit/data.hpp"

namespace mvit {

// Architecture rows of the experiment grid.
//   VitMri    - plain ViT over raw volume patches (MRI only)
//   VitFnc    - plain ViT over FNC matrix rows (FNC only)
//   MultiVit1 - both modalities tokenized directly, cross-attention fusion,
//               no pretrained extractor (first-generation stand-in)
//   Hybrid    - pretrained encoder latent (+ optional LFFM early fusion),
//               cross-attention late fusion
enum class ArchMode { VitMri, VitFnc, MultiVit1, Hybrid };
std::string arch_mode_name(ArchMode m);
ArchMode arch_mode_from(const std::string& s);

struct VitDescriptor {
    ArchMode mode = ArchMode::Hybrid;
    bool use_lffm = true;
    int64_t embed_dim = 32;
    int64_t layers = 2;
    int64_t heads = 4;
    int64_t mlp_hidden = 64;
    std::array<int64_t, 3> latent_patch{1, 2, 1};  // over the latent grid
    std::array<int64_t, 3> vol_patch{6, 7, 6};     // over the ambient grid
    std::array<int64_t, 3> ambient_dims{24, 28, 24};
    int64_t fnc_c = 16;
    std::vector<int64_t> latent_shape;  // {C_z,d_z,h_z,w_z}; hybrid mode only

    bool needs_extractor() const { return mode == ArchMode::Hybrid; }
    bool uses_fnc() const { return mode != ArchMode::VitMri; }
    bool uses_volume() const { return mode != ArchMode::VitFnc; }
    bool has_cross() const { return mode == ArchMode::MultiVit1 || mode == ArchMode::Hybrid; }

    // primary-stream tokenization grid and patch (volume-mapped tokens)
    std::array<int64_t, 3> primary_grid() const;
    std::array<int64_t, 3> primary_patch() const;
    int64_t primary_tokens() const;
    int64_t primary_token_dim() const;
    int64_t fnc_tokens() const;
    int64_t fnc_token_dim() const;
};

struct PatchBlock {
    int64_t z0, z1, y0, y1, x0, x1;  // half-open block in grid coordinates
};

// One attention matrix. `kv_is_primary` marks matrices whose key side
// indexes primary-stream (volume-mapped) tokens.
struct AttentionEntry {
    std::string stream;  // "fused" | "fnc" | "cross"
    int layer = 0;
    int head = 0;
    Tensor matrix;       // row-stochastic [N_q, N_kv]
    bool kv_is_primary = false;
};

struct AttentionRecord {
    std::vector<AttentionEntry> entries;
    int64_t primary_tokens = 0;
    std::vector<PatchBlock> patch_map;       // primary tokens -> grid blocks
    std::array<int64_t, 3> grid_dims{0, 0, 0};
};

struct ClassifierModel {
    VitDescriptor desc;
    ParamStore params;
};

ClassifierModel make_classifier(const VitDescriptor& desc, uint64_t seed);

struct TokenSequence {
    Var tokens;                        // [N, E]
    std::vector<PatchBlock> patch_map; // empty for non-volume streams
};

// -- pipeline pieces (graph-building) ---------------------------------------

TokenSequence tokenize_latent(const Var& z, const std::array<int64_t, 3>& patch,
                              const ParamStore& store, const std::string& prefix);
TokenSequence tokenize_fnc_latent(const Var& zp, const ParamStore& store);
TokenSequence tokenize_fnc_raw(const Tensor& fnc, const ParamStore& store);

// pre-norm block: x + MHSA(LN(x)), then x + FF(LN(x)); appends one
// AttentionEntry per head when record != nullptr
Var self_attention_block(const Var& seq, const ParamStore& store, const std::string& prefix,
                         int layer, int64_t heads, AttentionRecord* record,
                         const std::string& stream, bool kv_is_primary);
Var transformer_stack(const Var& seq, const ParamStore& store, const std::string& prefix,
                      int64_t layers, int64_t heads, AttentionRecord* record,
                      const std::string& stream, bool kv_is_primary);
// queries from q_seq, keys/values from kv_seq, residual on q_seq
Var cross_attention(const Var& q_seq, const Var& kv_seq, const ParamStore& store,
                    int64_t heads, AttentionRecord* record, bool kv_is_primary);
// mean-pool -> MLP -> logits [2]
Var classify_logits(const Var& seq, const ParamStore& store);
Var softmax_probs(const Var& logits);

struct ForwardResult {
    Var logits;                    // [2]
    std::array<double, 2> probs;   // softmax of logits
    AttentionRecord record;
};

// Full pipeline for the configured mode. `ae` is required in Hybrid mode;
// `cached_latent` (the frozen extractor output) skips re-encoding.
ForwardResult classifier_forward(const Tensor& volume, const Tensor& fnc,
                                 const ClassifierModel& model, const AutoencoderModel* ae,
                                 const Tensor* cached_latent = nullptr,
                                 bool want_attention = true);
ForwardResult classifier_forward(const StructuralVolume& volume, const FNCMatrix& fnc,
                                 const ClassifierModel& model, const AutoencoderModel* ae,
                                 const Tensor* cached_latent = nullptr,
                                 bool want_attention = true);

void save_classifier(const std::string& path, const ClassifierModel& model,
                     const std::string& config_hash, const std::string& extractor_hash,
                     int fold_index);
ClassifierModel load_classifier(const std::string& path, std::string* config_hash = nullptr,
                                std::string* extractor_hash = nullptr,
                                int* fold_index = nullptr);

}  // namespace mvit
