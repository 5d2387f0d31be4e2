// SPDX-License-Identifier: Apache-2.0
#include "craft/trainer.hpp"

#include <cmath>
#include <sstream>

#include "craft/error.hpp"
#include "craft/losses.hpp"
#include "craft/util.hpp"

namespace craft {

size_t TrainConfig::warmup_steps() const {
    return static_cast<size_t>(std::ceil(warmup_ratio * double(total_steps)));
}

uint64_t TrainConfig::config_hash() const {
    std::ostringstream os;
    os << "peak_lr=" << fmt_double(peak_lr) << ";warmup=" << fmt_double(warmup_ratio)
       << ";wd=" << fmt_double(weight_decay) << ";batch=" << batch << ";steps=" << total_steps
       << ";seed=" << seed << ";lcon=" << fmt_double(weights.con)
       << ";lcommit=" << fmt_double(weights.commit) << ";no_sal=" << disable_sal
       << ";no_con=" << disable_con << ";no_commit=" << disable_commit
       << ";clip=" << fmt_double(max_grad_norm);
    return fnv1a64(os.str());
}

double cosine_lr(size_t step, const TrainConfig& cfg) {
    if (step > cfg.total_steps) throw ArgumentError("cosine_lr: step out of range");
    size_t warmup = cfg.warmup_steps();
    if (step <= warmup) {
        if (warmup == 0) return cfg.peak_lr;
        return cfg.peak_lr * double(step) / double(warmup);
    }
    double denom = double(cfg.total_steps - warmup);
    double progress = denom > 0.0 ? double(step - warmup) / denom : 1.0;
    return cfg.peak_lr * 0.5 * (1.0 + std::cos(M_PI * progress));
}

AdamW::AdamW(double, double b1, double b2, double e, double wd)
    : beta1(b1), beta2(b2), eps(e), weight_decay(wd) {}

void AdamW::step(const std::vector<Parameter*>& params, double lr) {
    ++t_;
    double bc1 = 1.0 - std::pow(beta1, double(t_));
    double bc2 = 1.0 - std::pow(beta2, double(t_));
    for (Parameter* p : params) {
        for (double g : p->grad) {
            if (!std::isfinite(g)) {
                throw NumericError("adamw: non-finite gradient in parameter '" + p->name +
                                   "' at step " + std::to_string(t_));
            }
        }
        Moments& mo = moments_[p->name];
        if (mo.m.empty()) {
            mo.m.assign(p->value.size(), 0.0);
            mo.v.assign(p->value.size(), 0.0);
        }
        for (size_t i = 0; i < p->value.size(); ++i) {
            double g = p->grad[i];
            mo.m[i] = beta1 * mo.m[i] + (1.0 - beta1) * g;
            mo.v[i] = beta2 * mo.v[i] + (1.0 - beta2) * g * g;
            double mhat = mo.m[i] / bc1;
            double vhat = mo.v[i] / bc2;
            p->value[i] -= lr * (mhat / (std::sqrt(vhat) + eps) + weight_decay * p->value[i]);
        }
    }
}

std::string loss_log_csv(const std::vector<StepLog>& log) {
    std::string out = "step,lr,sal,con,commit,total\n";
    for (const auto& row : log) {
        out += std::to_string(row.step) + "," + fmt_double(row.lr) + "," + fmt_double(row.sal) +
               "," + fmt_double(row.con) + "," + fmt_double(row.commit) + "," +
               fmt_double(row.total) + "\n";
    }
    return out;
}

TrainResult train_encoder(PatchEncoder& encoder, Backbone& backbone, const Codebook& cb,
                          const std::vector<Sample>& train_set, const Vocabulary& vocab,
                          const TrainConfig& cfg, Parameter* log_tau, AdamW* optimizer_state,
                          size_t start_step, size_t stop_step) {
    if (train_set.empty()) throw ArgumentError("train_encoder: empty train set");
    if (backbone.codebook_crc != cb.crc32()) {
        throw CrcMismatchError("train_encoder: backbone codebook CRC (" +
                               std::to_string(backbone.codebook_crc) +
                               ") does not match the supplied codebook (" +
                               std::to_string(cb.crc32()) + ")");
    }

    std::vector<Parameter*> trainable = encoder.parameters();
    if (log_tau) trainable.push_back(log_tau);

    AdamW local_opt;
    AdamW& opt = optimizer_state ? *optimizer_state : local_opt;

    const size_t w = encoder.config().grid_width;
    const size_t h = encoder.config().grid_height;
    const size_t n = train_set.size();
    Rng root(cfg.seed);

    // Tokenizations are invariant across steps.
    std::vector<std::vector<int32_t>> prompts(n), targets(n);
    std::vector<TextSet> captions(n);
    for (size_t i = 0; i < n; ++i) {
        prompts[i] = vocab.encode(train_set[i].prompt);
        targets[i] = vocab.encode_target(train_set[i].target);
        captions[i] = caption_set(train_set[i]);
    }

    // Fixed per-epoch order derived from the seed; replayable from any step.
    auto epoch_order = [&](size_t epoch) {
        return root.substream("epoch-" + std::to_string(epoch)).permutation(n);
    };

    TrainResult result;
    result.config_hash = cfg.config_hash();

    size_t end_step = stop_step == 0 ? cfg.total_steps : std::min(stop_step, cfg.total_steps);
    size_t epoch = (start_step * cfg.batch) / n;
    size_t cursor = (start_step * cfg.batch) % n;
    std::vector<size_t> order = epoch_order(epoch);

    for (size_t step = start_step; step < end_step; ++step) {
        for (Parameter* p : trainable) p->zero_grad();
        Rng step_rng = root.substream("step-" + std::to_string(step));

        Tape tape;
        Tensor tau;
        if (!cfg.disable_con) {
            if (!log_tau) throw ArgumentError("train_encoder: contrastive loss needs log_tau");
            tau = craft::exp(tape.param(*log_tau));
        }

        Tensor sal_sum, commit_sum;
        ContrastiveBatch con_batch;
        con_batch.temperature = tau;

        for (size_t bi = 0; bi < cfg.batch; ++bi) {
            if (cursor == n) {
                ++epoch;
                order = epoch_order(epoch);
                cursor = 0;
            }
            size_t si = order[cursor++];
            const Sample& sample = train_set[si];

            auto enc = encoder.encode(tape, sample.features, /*trainable=*/true);

            if (!cfg.disable_sal) {
                Tensor zq = ste_quantize(enc.features, w, h, cb);
                Tensor sal_i = sal_loss(tape, backbone, zq, prompts[si], targets[si]);
                sal_sum = sal_sum.valid() ? add(sal_sum, sal_i) : sal_i;
            }
            if (!cfg.disable_commit) {
                Tensor c_i = commitment_loss(enc.features, w, h, cb);
                commit_sum = commit_sum.valid() ? add(commit_sum, c_i) : c_i;
            }
            if (!cfg.disable_con) {
                const std::string& text = sample_caption(captions[si], step_rng);
                con_batch.image_embeds.push_back(enc.cls_embed);
                con_batch.text_embeds.push_back(encode_text(text, backbone.lm, vocab));
                con_batch.labels.push_back(sample.label);
            }
        }

        Tensor zero = tape.constant({}, {0.0});
        Tensor sal = cfg.disable_sal ? zero : scale(sal_sum, 1.0 / double(cfg.batch));
        Tensor commit = cfg.disable_commit ? zero : scale(commit_sum, 1.0 / double(cfg.batch));
        Tensor con = cfg.disable_con ? zero : sigmoid_contrastive(tape, con_batch);
        Tensor total = composite_loss(sal, con, commit, cfg.weights);

        tape.backward(total);

        if (cfg.max_grad_norm > 0.0) {
            double norm2 = 0.0;
            for (Parameter* p : trainable) {
                for (double g : p->grad) norm2 += g * g;
            }
            double norm = std::sqrt(norm2);
            if (norm > cfg.max_grad_norm) {
                double f = cfg.max_grad_norm / norm;
                for (Parameter* p : trainable) {
                    for (double& g : p->grad) g *= f;
                }
            }
        }

        double lr = cosine_lr(step, cfg);
        opt.step(trainable, lr);

        StepLog row;
        row.step = step;
        row.lr = lr;
        row.sal = sal.scalar();
        row.con = con.scalar();
        row.commit = commit.scalar();
        row.total = total.scalar();
        result.log.push_back(row);
    }
    return result;
}

Checkpoint trainer_checkpoint(const PatchEncoder& encoder, const Parameter& log_tau,
                              const AdamW& opt, uint32_t codebook_crc, uint64_t step,
                              uint64_t seed, uint64_t config_hash) {
    Checkpoint ck = encoder_checkpoint(encoder, codebook_crc, seed, config_hash);
    ck.step = step;
    ck.blobs.emplace_back(log_tau.name, f32_blob(log_tau.value));

    // Binary64 master copies + optimizer moments for bit-exact resume.
    auto masters = encoder.parameters();
    for (const Parameter* p : masters) {
        ck.blobs.emplace_back("opt.master." + p->name + ".f64", f64_blob(p->value));
    }
    ck.blobs.emplace_back("opt.master." + log_tau.name + ".f64", f64_blob(log_tau.value));
    for (const auto& [name, mo] : opt.moments()) {
        ck.blobs.emplace_back("opt.m." + name + ".f64", f64_blob(mo.m));
        ck.blobs.emplace_back("opt.v." + name + ".f64", f64_blob(mo.v));
    }
    return ck;
}

void restore_trainer_checkpoint(const Checkpoint& ck, PatchEncoder& encoder, Parameter& log_tau,
                                AdamW& opt) {
    restore_parameter_blobs(ck, encoder.parameters());
    auto restore_master = [&](Parameter& p) {
        if (const auto* blob = ck.find("opt.master." + p.name + ".f64")) {
            auto values = f64_blob_values(*blob);
            if (values.size() != p.value.size()) {
                throw FormatError("checkpoint: master size mismatch for '" + p.name + "'");
            }
            p.value = std::move(values);
        }
    };
    for (Parameter* p : encoder.parameters()) restore_master(*p);
    if (const auto* blob = ck.find(log_tau.name)) {
        auto v32 = f32_blob_values(*blob);
        if (v32.size() != log_tau.value.size()) {
            throw FormatError("checkpoint: size mismatch for '" + log_tau.name + "'");
        }
        log_tau.value = v32;
    }
    restore_master(log_tau);
    log_tau.zero_grad();

    opt.moments().clear();
    for (const auto& [name, blob] : ck.blobs) {
        const std::string m_pre = "opt.m.";
        const std::string v_pre = "opt.v.";
        const std::string f64_suf = ".f64";
        if (name.size() <= f64_suf.size() ||
            name.compare(name.size() - f64_suf.size(), f64_suf.size(), f64_suf) != 0) {
            continue;
        }
        std::string stem = name.substr(0, name.size() - f64_suf.size());
        if (stem.rfind(m_pre, 0) == 0) {
            opt.moments()[stem.substr(m_pre.size())].m = f64_blob_values(blob);
        } else if (stem.rfind(v_pre, 0) == 0) {
            opt.moments()[stem.substr(v_pre.size())].v = f64_blob_values(blob);
        }
    }
    opt.set_step_count(ck.step);
}

}  // namespace craft
