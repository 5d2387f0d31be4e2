// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "craft/codebook.hpp"
#include "craft/losses.hpp"
#include "craft/model.hpp"
#include "craft/synth.hpp"
#include "craft/tensor.hpp"

namespace craft {

struct TrainConfig {
    double peak_lr = 1e-3;
    double warmup_ratio = 0.03;  // warmup steps = ceil(ratio * total)
    double weight_decay = 0.0;
    size_t batch = 24;
    size_t total_steps = 400;
    uint64_t seed = 1;
    LossWeights weights;
    bool disable_sal = false;
    bool disable_con = false;
    bool disable_commit = false;
    // Diagnostics only; 0 disables clipping.
    double max_grad_norm = 0.0;

    size_t warmup_steps() const;
    uint64_t config_hash() const;
};

// Linear warmup to peak over ceil(warmup_ratio*total) steps, then cosine decay
// to zero at step == total.
double cosine_lr(size_t step, const TrainConfig& cfg);

// Adam with decoupled weight decay (decay 0 reduces to plain Adam).
class AdamW {
  public:
    explicit AdamW(double lr_placeholder = 0.0, double beta1 = 0.9, double beta2 = 0.999,
                   double eps = 1e-8, double weight_decay = 0.0);

    // One update over the given parameters at learning rate lr. Moments are
    // keyed by parameter name; step count is shared (bias correction).
    void step(const std::vector<Parameter*>& params, double lr);

    struct Moments {
        std::vector<double> m;
        std::vector<double> v;
    };
    const std::map<std::string, Moments>& moments() const { return moments_; }
    std::map<std::string, Moments>& moments() { return moments_; }
    uint64_t step_count() const { return t_; }
    void set_step_count(uint64_t t) { t_ = t; }

    double beta1, beta2, eps, weight_decay;

  private:
    std::map<std::string, Moments> moments_;
    uint64_t t_ = 0;
};

struct StepLog {
    size_t step = 0;
    double lr = 0.0;
    double sal = 0.0;
    double con = 0.0;
    double commit = 0.0;
    double total = 0.0;
};

struct TrainResult {
    std::vector<StepLog> log;
    uint64_t config_hash = 0;
};

// CSV with header "step,lr,sal,con,commit,total".
std::string loss_log_csv(const std::vector<StepLog>& log);

// Adapts the encoder (and the contrastive temperature) against a frozen
// backbone and frozen codebook. Batches follow a seed-derived fixed order per
// epoch. Respects the ablation flags; everything outside the trainable set is
// enforced frozen structurally (frozen leaves, no optimizer state).
// stop_step = 0 means run through cfg.total_steps; a smaller value stops early
// (for mid-run checkpointing) while keeping the full-run LR schedule.
TrainResult train_encoder(PatchEncoder& encoder, Backbone& backbone, const Codebook& cb,
                          const std::vector<Sample>& train_set, const Vocabulary& vocab,
                          const TrainConfig& cfg, Parameter* log_tau /* may be null */,
                          AdamW* optimizer_state = nullptr, size_t start_step = 0,
                          size_t stop_step = 0);

// Trainer checkpoint: encoder blobs (binary32) plus binary64 master copies and
// optimizer moments, so a resumed run reproduces the trajectory bit-for-bit.
Checkpoint trainer_checkpoint(const PatchEncoder& encoder, const Parameter& log_tau,
                              const AdamW& opt, uint32_t codebook_crc, uint64_t step,
                              uint64_t seed, uint64_t config_hash);
void restore_trainer_checkpoint(const Checkpoint& ck, PatchEncoder& encoder, Parameter& log_tau,
                                AdamW& opt);

}  // namespace craft
