// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "craft/codebook.hpp"
#include "craft/synth.hpp"
#include "craft/tensor.hpp"
#include "craft/text.hpp"

namespace craft {

// --- patch encoder ------------------------------------------------------------

struct EncoderConfig {
    size_t input_dim = 12;
    size_t hidden = 32;
    size_t dim = 16;     // codebook dimension
    size_t lm_dim = 32;  // width of the contrastive text space
    uint32_t grid_width = 8;
    uint32_t grid_height = 8;

    std::string id() const;
    static EncoderConfig from_id(const std::string& id);
};

// Trainable encoder: linear patch embedding, residual MLP, one token-mixing
// self-attention layer, output projection. A learnable [CLS] row is prepended
// in input space; its penultimate-layer state (after attention, before the
// output layer and quantization) feeds the contrastive head.
class PatchEncoder {
  public:
    PatchEncoder(EncoderConfig cfg, uint64_t seed);

    struct Encoded {
        Tensor features;         // [N, dim], pre-quantization
        Tensor cls_penultimate;  // [1, dim]
        Tensor cls_embed;        // [1, lm_dim], contrastive head output
    };
    Encoded encode(Tape& tape, const FeatureGrid& input, bool trainable);

    // Convenience for inference paths: runs on a local tape, returns values.
    FeatureGrid encode_to_grid(const FeatureGrid& input);

    std::vector<Parameter*> parameters();
    std::vector<const Parameter*> parameters() const;
    const EncoderConfig& config() const { return cfg_; }
    std::string architecture_id() const { return cfg_.id(); }

  private:
    EncoderConfig cfg_;
    Parameter w_embed_, b_embed_;
    Parameter w1_, b1_, w2_, b2_;
    Parameter ln_g_, ln_b_;
    Parameter wq_, wk_, wv_, wo_;
    Parameter w_out_, b_out_;
    Parameter cls_row_;
    Parameter cls_proj_w_, cls_proj_b_;
};

// --- surrogate language model ---------------------------------------------------

struct LmConfig {
    size_t vocab = 0;
    size_t width = 32;
    size_t heads = 2;
    size_t blocks = 2;
    size_t context = 128;
    size_t mlp_ratio = 4;
    bool tied_head = true;

    std::string id(const std::string& name, size_t visual_dim) const;
    static std::pair<LmConfig, std::string> from_id(const std::string& id, size_t* visual_dim);
};

// Decoder-only transformer over [projected visual tokens; text tokens] with
// learned positions over the concatenated sequence and a causal mask.
class SurrogateLM {
  public:
    SurrogateLM(LmConfig cfg, uint64_t seed);

    // visual: optional pre-projected rows [Nv, width] already on the tape.
    Tensor logits(Tape& tape, const Tensor* visual, const std::vector<int32_t>& text,
                  bool trainable);

    std::vector<Parameter*> parameters();
    const LmConfig& config() const { return cfg_; }
    const Parameter& token_embedding() const { return tok_embed_; }

  private:
    struct Block {
        Parameter ln1_g, ln1_b;
        std::vector<Parameter> wq, wk, wv;  // per head [width, head_dim]
        Parameter wo, bo;
        Parameter ln2_g, ln2_b;
        Parameter m1, mb1, m2, mb2;
    };
    LmConfig cfg_;
    Parameter tok_embed_, pos_embed_;
    std::vector<Block> blocks_;
    Parameter lnf_g_, lnf_b_;
    Parameter head_w_, head_b_;  // unused when tied
};

// Linear map from codebook space into the LM embedding space.
struct Projector {
    Parameter w, b;
    size_t in_dim = 0, out_dim = 0;

    Projector(size_t in, size_t out, uint64_t seed);
    Tensor apply(Tape& tape, const Tensor& rows, bool trainable);
    std::vector<Parameter*> parameters();
};

// A surrogate/backbone bundle: LM + projector + the codebook identity it was
// aligned to. Interchangeable at inference with any encoder sharing the CRC.
struct Backbone {
    std::string name;
    size_t visual_dim = 0;
    LmConfig lm_config;
    SurrogateLM lm;
    Projector projector;
    uint32_t codebook_crc = 0;

    Backbone(std::string name, LmConfig cfg, size_t visual_dim, uint64_t seed);
    std::string architecture_id() const { return lm_config.id(name, visual_dim); }
    std::vector<Parameter*> parameters();
};

// --- losses / decoding over the backbone ---------------------------------------

// Autoregressive loss of the target continuation: sum over target positions of
// -log p(y_i | y_<i, prompt, visual). Gradients reach the visual rows (and the
// LM/projector only when the corresponding trainable flags are set).
Tensor sal_loss(Tape& tape, Backbone& bb, const Tensor& visual_rows,
                const std::vector<int32_t>& prompt, const std::vector<int32_t>& target,
                bool lm_trainable = false, bool projector_trainable = false);

// Pruned or full visual token sequence for decoding.
struct VisualTokens {
    size_t count = 0;
    size_t dim = 0;
    std::vector<double> data;  // count * dim
};

VisualTokens visual_tokens_from_grid(const QuantizedGrid& q);

// Greedy decoding, capped at max_tokens, stopping at the end marker (which is
// not included in the result). Ties break to the smaller token id.
std::vector<int32_t> generate(Backbone& bb, const VisualTokens& visual,
                              const std::vector<int32_t>& prompt, size_t max_tokens = 5);

// --- backbone pretraining -------------------------------------------------------

struct PretrainConfig {
    size_t stage1_steps = 150;  // projector only
    size_t stage2_steps = 450;  // projector + LM
    size_t batch = 16;
    double peak_lr = 3e-3;
    double warmup_ratio = 0.03;
    uint64_t seed = 1;
};

struct PretrainResult {
    std::vector<double> stage1_losses;  // per step
    std::vector<double> stage2_losses;
    double first_loss = 0.0;
    double final_loss = 0.0;
};

// Two-stage alignment on a caption/QA corpus quantized through the frozen
// encoder + codebook. Stamps the backbone with the codebook CRC; refuses to
// run if the backbone already carries a different one.
PretrainResult pretrain_backbone(Backbone& bb, const Codebook& cb, PatchEncoder& encoder,
                                 const std::vector<Sample>& corpus, const Vocabulary& vocab,
                                 const PretrainConfig& cfg);

// --- checkpoint container -------------------------------------------------------
// Binary layout: magic "CRFTCP01", architecture-id (u32 length + UTF-8),
// u32 codebook CRC, u64 step, u64 seed, u64 config hash, u32 blob count,
// then blobs (u32 name length, name, u64 byte length, payload), trailing
// CRC-32 of everything after the magic. Blob payloads are binary32 unless the
// name ends in ".f64" (binary64 optimizer/master state).

struct Checkpoint {
    std::string architecture_id;
    uint32_t codebook_crc = 0;
    uint64_t step = 0;
    uint64_t seed = 0;
    uint64_t config_hash = 0;
    std::vector<std::pair<std::string, std::vector<uint8_t>>> blobs;

    const std::vector<uint8_t>* find(const std::string& name) const;
};

void save_checkpoint(const Checkpoint& ck, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

std::vector<uint8_t> f32_blob(const std::vector<double>& values);
std::vector<double> f32_blob_values(const std::vector<uint8_t>& bytes);
std::vector<uint8_t> f64_blob(const std::vector<double>& values);
std::vector<double> f64_blob_values(const std::vector<uint8_t>& bytes);

// Parameter blobs named by Parameter::name (binary32).
void add_parameter_blobs(Checkpoint& ck, const std::vector<const Parameter*>& params);
void restore_parameter_blobs(const Checkpoint& ck, const std::vector<Parameter*>& params);

// Whole-model convenience wrappers.
Checkpoint encoder_checkpoint(const PatchEncoder& enc, uint32_t codebook_crc, uint64_t seed,
                              uint64_t config_hash);
PatchEncoder encoder_from_checkpoint(const Checkpoint& ck, uint32_t* codebook_crc = nullptr);
Checkpoint backbone_checkpoint(const Backbone& bb, uint64_t seed, uint64_t config_hash);
Backbone backbone_from_checkpoint(const Checkpoint& ck);

}  // namespace craft
