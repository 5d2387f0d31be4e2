// SPDX-License-Identifier: Apache-2.0
#include "craft/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

#include "craft/error.hpp"
#include "craft/losses.hpp"
#include "craft/trainer.hpp"
#include "craft/util.hpp"

namespace craft {

namespace {

constexpr char kCheckpointMagic[8] = {'C', 'R', 'F', 'T', 'C', 'P', '0', '1'};

Tensor enter(Tape& tape, Parameter& p, bool trainable) {
    return trainable ? tape.param(p) : tape.frozen(p);
}

void fill_normal(Parameter& p, Rng rng, double sd) {
    for (double& v : p.value) v = rng.normal(0.0, sd);
}

void fill_const(Parameter& p, double v) {
    std::fill(p.value.begin(), p.value.end(), v);
}

std::map<std::string, std::string> parse_kv(const std::string& body) {
    std::map<std::string, std::string> kv;
    std::stringstream ss(body);
    std::string item;
    while (std::getline(ss, item, ',')) {
        auto eq = item.find('=');
        if (eq == std::string::npos) throw FormatError("architecture id: bad field '" + item + "'");
        kv[item.substr(0, eq)] = item.substr(eq + 1);
    }
    return kv;
}

size_t kv_num(const std::map<std::string, std::string>& kv, const std::string& key) {
    auto it = kv.find(key);
    if (it == kv.end()) throw FormatError("architecture id: missing field '" + key + "'");
    return static_cast<size_t>(std::stoull(it->second));
}

}  // namespace

// --- encoder -------------------------------------------------------------------

std::string EncoderConfig::id() const {
    std::ostringstream os;
    os << "enc:din=" << input_dim << ",hid=" << hidden << ",d=" << dim << ",dlm=" << lm_dim
       << ",gw=" << grid_width << ",gh=" << grid_height;
    return os.str();
}

EncoderConfig EncoderConfig::from_id(const std::string& id) {
    if (id.rfind("enc:", 0) != 0) throw FormatError("not an encoder architecture id: " + id);
    auto kv = parse_kv(id.substr(4));
    EncoderConfig c;
    c.input_dim = kv_num(kv, "din");
    c.hidden = kv_num(kv, "hid");
    c.dim = kv_num(kv, "d");
    c.lm_dim = kv_num(kv, "dlm");
    c.grid_width = static_cast<uint32_t>(kv_num(kv, "gw"));
    c.grid_height = static_cast<uint32_t>(kv_num(kv, "gh"));
    return c;
}

PatchEncoder::PatchEncoder(EncoderConfig cfg, uint64_t seed)
    : cfg_(cfg),
      w_embed_("enc.w_embed", {cfg.input_dim, cfg.dim}),
      b_embed_("enc.b_embed", {cfg.dim}),
      w1_("enc.w1", {cfg.dim, cfg.hidden}),
      b1_("enc.b1", {cfg.hidden}),
      w2_("enc.w2", {cfg.hidden, cfg.dim}),
      b2_("enc.b2", {cfg.dim}),
      ln_g_("enc.ln_g", {cfg.dim}),
      ln_b_("enc.ln_b", {cfg.dim}),
      wq_("enc.wq", {cfg.dim, cfg.dim}),
      wk_("enc.wk", {cfg.dim, cfg.dim}),
      wv_("enc.wv", {cfg.dim, cfg.dim}),
      wo_("enc.wo", {cfg.dim, cfg.dim}),
      w_out_("enc.w_out", {cfg.dim, cfg.dim}),
      b_out_("enc.b_out", {cfg.dim}),
      cls_row_("enc.cls_row", {1, cfg.input_dim}),
      cls_proj_w_("enc.cls_proj_w", {cfg.dim, cfg.lm_dim}),
      cls_proj_b_("enc.cls_proj_b", {cfg.lm_dim}) {
    Rng root(seed);
    fill_normal(w_embed_, root.substream(w_embed_.name), 1.0 / std::sqrt(double(cfg.input_dim)));
    fill_normal(w1_, root.substream(w1_.name), 1.0 / std::sqrt(double(cfg.dim)));
    fill_normal(w2_, root.substream(w2_.name), 1.0 / std::sqrt(double(cfg.hidden)));
    fill_const(ln_g_, 1.0);
    double attn_sd = 1.0 / std::sqrt(double(cfg.dim));
    fill_normal(wq_, root.substream(wq_.name), attn_sd);
    fill_normal(wk_, root.substream(wk_.name), attn_sd);
    fill_normal(wv_, root.substream(wv_.name), attn_sd);
    fill_normal(wo_, root.substream(wo_.name), 0.5 * attn_sd);
    // Output layer starts near identity so fresh encoders expose the patch
    // embedding structure to codebook fitting.
    fill_normal(w_out_, root.substream(w_out_.name), 0.02);
    for (size_t i = 0; i < cfg.dim; ++i) w_out_.value[i * cfg.dim + i] += 1.0;
    fill_normal(cls_row_, root.substream(cls_row_.name), 1.0);
    fill_normal(cls_proj_w_, root.substream(cls_proj_w_.name), attn_sd);
}

PatchEncoder::Encoded PatchEncoder::encode(Tape& tape, const FeatureGrid& input, bool trainable) {
    if (input.width != cfg_.grid_width || input.height != cfg_.grid_height ||
        input.dim != cfg_.input_dim) {
        throw DimensionError("encode: input grid does not match encoder configuration");
    }
    size_t n = input.patches();

    Tensor cls = enter(tape, cls_row_, trainable);
    Tensor patches = tape.constant({n, cfg_.input_dim}, input.data);
    Tensor x0 = concat_rows({cls, patches});  // [N+1, d_in]

    Tensor x = add(matmul(x0, enter(tape, w_embed_, trainable)), enter(tape, b_embed_, trainable));
    Tensor hidden = gelu(add(matmul(x, enter(tape, w1_, trainable)), enter(tape, b1_, trainable)));
    Tensor mlp_out =
        add(matmul(hidden, enter(tape, w2_, trainable)), enter(tape, b2_, trainable));
    x = add(x, mlp_out);

    Tensor normed = layer_norm(x, enter(tape, ln_g_, trainable), enter(tape, ln_b_, trainable));
    Tensor q = matmul(normed, enter(tape, wq_, trainable));
    Tensor k = matmul(normed, enter(tape, wk_, trainable));
    Tensor v = matmul(normed, enter(tape, wv_, trainable));
    Tensor scores = scale(matmul(q, transpose(k)), 1.0 / std::sqrt(double(cfg_.dim)));
    Tensor attn = matmul(softmax_rows(scores, /*causal=*/false), v);
    Tensor h = add(x, matmul(attn, enter(tape, wo_, trainable)));  // penultimate

    Encoded out;
    out.cls_penultimate = slice_rows(h, 0, 1);
    out.features = add(matmul(slice_rows(h, 1, n + 1), enter(tape, w_out_, trainable)),
                       enter(tape, b_out_, trainable));
    out.cls_embed = add(matmul(out.cls_penultimate, enter(tape, cls_proj_w_, trainable)),
                        enter(tape, cls_proj_b_, trainable));
    return out;
}

FeatureGrid PatchEncoder::encode_to_grid(const FeatureGrid& input) {
    Tape tape;
    Encoded e = encode(tape, input, /*trainable=*/false);
    FeatureGrid g(cfg_.grid_width, cfg_.grid_height, cfg_.dim);
    g.data = e.features.value();
    return g;
}

std::vector<Parameter*> PatchEncoder::parameters() {
    return {&w_embed_, &b_embed_, &w1_,    &b1_,      &w2_,      &b2_,
            &ln_g_,    &ln_b_,    &wq_,    &wk_,      &wv_,      &wo_,
            &w_out_,   &b_out_,   &cls_row_, &cls_proj_w_, &cls_proj_b_};
}

std::vector<const Parameter*> PatchEncoder::parameters() const {
    auto mut = const_cast<PatchEncoder*>(this)->parameters();
    return std::vector<const Parameter*>(mut.begin(), mut.end());
}

// --- surrogate LM ----------------------------------------------------------------

std::string LmConfig::id(const std::string& name, size_t visual_dim) const {
    std::ostringstream os;
    os << "lm:name=" << name << ",v=" << vocab << ",w=" << width << ",h=" << heads
       << ",b=" << blocks << ",ctx=" << context << ",r=" << mlp_ratio
       << ",tied=" << (tied_head ? 1 : 0) << ",vd=" << visual_dim;
    return os.str();
}

std::pair<LmConfig, std::string> LmConfig::from_id(const std::string& id, size_t* visual_dim) {
    if (id.rfind("lm:", 0) != 0) throw FormatError("not a backbone architecture id: " + id);
    auto kv = parse_kv(id.substr(3));
    LmConfig c;
    c.vocab = kv_num(kv, "v");
    c.width = kv_num(kv, "w");
    c.heads = kv_num(kv, "h");
    c.blocks = kv_num(kv, "b");
    c.context = kv_num(kv, "ctx");
    c.mlp_ratio = kv_num(kv, "r");
    c.tied_head = kv_num(kv, "tied") != 0;
    if (visual_dim) *visual_dim = kv_num(kv, "vd");
    auto it = kv.find("name");
    if (it == kv.end()) throw FormatError("architecture id: missing field 'name'");
    return {c, it->second};
}

SurrogateLM::SurrogateLM(LmConfig cfg, uint64_t seed)
    : cfg_(cfg),
      tok_embed_("lm.tok", {cfg.vocab, cfg.width}),
      pos_embed_("lm.pos", {cfg.context, cfg.width}),
      lnf_g_("lm.lnf_g", {cfg.width}),
      lnf_b_("lm.lnf_b", {cfg.width}),
      head_w_("lm.head_w", cfg.tied_head ? std::vector<size_t>{1} : std::vector<size_t>{cfg.width, cfg.vocab}),
      head_b_("lm.head_b", cfg.tied_head ? std::vector<size_t>{1} : std::vector<size_t>{cfg.vocab}) {
    if (cfg.vocab == 0) throw ArgumentError("surrogate lm: vocab must be positive");
    if (cfg.width % cfg.heads != 0) throw ArgumentError("surrogate lm: heads must divide width");
    if (cfg.blocks == 0 || cfg.blocks > 2) throw ArgumentError("surrogate lm: blocks must be 1 or 2");

    Rng root(seed);
    fill_normal(tok_embed_, root.substream("lm.tok"), 0.5);
    fill_normal(pos_embed_, root.substream("lm.pos"), 0.1);
    fill_const(lnf_g_, 1.0);
    if (!cfg.tied_head) {
        fill_normal(head_w_, root.substream("lm.head_w"), 1.0 / std::sqrt(double(cfg.width)));
    }

    size_t hd = cfg.width / cfg.heads;
    double w_sd = 1.0 / std::sqrt(double(cfg.width));
    double o_sd = w_sd / std::sqrt(2.0 * double(cfg.blocks));
    for (size_t b = 0; b < cfg.blocks; ++b) {
        std::string pre = "lm.b" + std::to_string(b) + ".";
        Block blk{Parameter(pre + "ln1_g", {cfg.width}), Parameter(pre + "ln1_b", {cfg.width}),
                  {},
                  {},
                  {},
                  Parameter(pre + "wo", {cfg.width, cfg.width}),
                  Parameter(pre + "bo", {cfg.width}),
                  Parameter(pre + "ln2_g", {cfg.width}),
                  Parameter(pre + "ln2_b", {cfg.width}),
                  Parameter(pre + "m1", {cfg.width, cfg.mlp_ratio * cfg.width}),
                  Parameter(pre + "mb1", {cfg.mlp_ratio * cfg.width}),
                  Parameter(pre + "m2", {cfg.mlp_ratio * cfg.width, cfg.width}),
                  Parameter(pre + "mb2", {cfg.width})};
        fill_const(blk.ln1_g, 1.0);
        fill_const(blk.ln2_g, 1.0);
        for (size_t h = 0; h < cfg.heads; ++h) {
            std::string hp = pre + "h" + std::to_string(h) + ".";
            blk.wq.emplace_back(hp + "wq", std::vector<size_t>{cfg.width, hd});
            blk.wk.emplace_back(hp + "wk", std::vector<size_t>{cfg.width, hd});
            blk.wv.emplace_back(hp + "wv", std::vector<size_t>{cfg.width, hd});
            fill_normal(blk.wq.back(), root.substream(hp + "wq"), w_sd);
            fill_normal(blk.wk.back(), root.substream(hp + "wk"), w_sd);
            fill_normal(blk.wv.back(), root.substream(hp + "wv"), w_sd);
        }
        fill_normal(blk.wo, root.substream(pre + "wo"), o_sd);
        fill_normal(blk.m1, root.substream(pre + "m1"), w_sd);
        fill_normal(blk.m2, root.substream(pre + "m2"),
                    1.0 / std::sqrt(double(cfg.mlp_ratio * cfg.width)) /
                        std::sqrt(2.0 * double(cfg.blocks)));
        blocks_.push_back(std::move(blk));
    }
}

Tensor SurrogateLM::logits(Tape& tape, const Tensor* visual, const std::vector<int32_t>& text,
                           bool trainable) {
    if (text.empty() && !visual) throw ContractError("lm: empty input sequence");
    size_t nv = visual ? visual->rows() : 0;
    if (visual && visual->cols() != cfg_.width) {
        throw DimensionError("lm: visual rows do not match model width");
    }
    size_t s = nv + text.size();
    if (s > cfg_.context) {
        throw ContractError("lm: context overflow (" + std::to_string(s) + " > " +
                            std::to_string(cfg_.context) + ")");
    }

    Tensor tok = enter(tape, tok_embed_, trainable);
    std::vector<Tensor> parts;
    if (visual) parts.push_back(*visual);
    if (!text.empty()) parts.push_back(embedding(tok, text));
    Tensor x = parts.size() == 1 ? parts[0] : concat_rows(parts);

    Tensor pos = slice_rows(enter(tape, pos_embed_, trainable), 0, s);
    x = add(x, pos);

    size_t hd = cfg_.width / cfg_.heads;
    double inv_sqrt_hd = 1.0 / std::sqrt(double(hd));
    for (auto& blk : blocks_) {
        Tensor n1 = layer_norm(x, enter(tape, blk.ln1_g, trainable),
                               enter(tape, blk.ln1_b, trainable));
        std::vector<Tensor> head_outs;
        for (size_t h = 0; h < cfg_.heads; ++h) {
            Tensor q = matmul(n1, enter(tape, blk.wq[h], trainable));
            Tensor k = matmul(n1, enter(tape, blk.wk[h], trainable));
            Tensor v = matmul(n1, enter(tape, blk.wv[h], trainable));
            Tensor att = softmax_rows(scale(matmul(q, transpose(k)), inv_sqrt_hd),
                                      /*causal=*/true);
            head_outs.push_back(matmul(att, v));
        }
        Tensor attn_out = cfg_.heads == 1 ? head_outs[0] : concat_cols(head_outs);
        x = add(x, add(matmul(attn_out, enter(tape, blk.wo, trainable)),
                       enter(tape, blk.bo, trainable)));

        Tensor n2 = layer_norm(x, enter(tape, blk.ln2_g, trainable),
                               enter(tape, blk.ln2_b, trainable));
        Tensor m = add(matmul(gelu(add(matmul(n2, enter(tape, blk.m1, trainable)),
                                       enter(tape, blk.mb1, trainable))),
                              enter(tape, blk.m2, trainable)),
                       enter(tape, blk.mb2, trainable));
        x = add(x, m);
    }

    Tensor hf = layer_norm(x, enter(tape, lnf_g_, trainable), enter(tape, lnf_b_, trainable));
    if (cfg_.tied_head) {
        return matmul(hf, transpose(tok));
    }
    return add(matmul(hf, enter(tape, head_w_, trainable)), enter(tape, head_b_, trainable));
}

std::vector<Parameter*> SurrogateLM::parameters() {
    std::vector<Parameter*> out = {&tok_embed_, &pos_embed_, &lnf_g_, &lnf_b_};
    if (!cfg_.tied_head) {
        out.push_back(&head_w_);
        out.push_back(&head_b_);
    }
    for (auto& blk : blocks_) {
        out.push_back(&blk.ln1_g);
        out.push_back(&blk.ln1_b);
        for (auto& p : blk.wq) out.push_back(&p);
        for (auto& p : blk.wk) out.push_back(&p);
        for (auto& p : blk.wv) out.push_back(&p);
        out.push_back(&blk.wo);
        out.push_back(&blk.bo);
        out.push_back(&blk.ln2_g);
        out.push_back(&blk.ln2_b);
        out.push_back(&blk.m1);
        out.push_back(&blk.mb1);
        out.push_back(&blk.m2);
        out.push_back(&blk.mb2);
    }
    return out;
}

// --- projector -------------------------------------------------------------------

Projector::Projector(size_t in, size_t out, uint64_t seed)
    : w("proj.w", {in, out}), b("proj.b", {out}), in_dim(in), out_dim(out) {
    fill_normal(w, Rng(seed).substream("proj.w"), 1.0 / std::sqrt(double(in)));
}

Tensor Projector::apply(Tape& tape, const Tensor& rows, bool trainable) {
    if (rows.cols() != in_dim) throw DimensionError("projector: input dim mismatch");
    return add(matmul(rows, enter(tape, w, trainable)), enter(tape, b, trainable));
}

std::vector<Parameter*> Projector::parameters() {
    return {&w, &b};
}

// --- backbone ---------------------------------------------------------------------

Backbone::Backbone(std::string name_in, LmConfig cfg, size_t vdim, uint64_t seed)
    : name(std::move(name_in)),
      visual_dim(vdim),
      lm_config(cfg),
      lm(cfg, Rng(seed).substream("lm:" + name).next_u64()),
      projector(vdim, cfg.width, Rng(seed).substream("proj:" + name).next_u64()) {}

std::vector<Parameter*> Backbone::parameters() {
    auto out = lm.parameters();
    for (Parameter* p : projector.parameters()) out.push_back(p);
    return out;
}

// --- SAL and decoding ---------------------------------------------------------------

Tensor sal_loss(Tape& tape, Backbone& bb, const Tensor& visual_rows,
                const std::vector<int32_t>& prompt, const std::vector<int32_t>& target,
                bool lm_trainable, bool projector_trainable) {
    if (target.empty()) throw ArgumentError("sal_loss: empty target");
    Tensor vis = bb.projector.apply(tape, visual_rows, projector_trainable);
    std::vector<int32_t> text = prompt;
    text.insert(text.end(), target.begin(), target.end());
    Tensor lg = bb.lm.logits(tape, &vis, text, lm_trainable);

    size_t nv = visual_rows.rows();
    size_t start = nv + prompt.size() - 1;  // row predicting target[0]
    Tensor rows = slice_rows(lg, start, start + target.size());
    return cross_entropy_sum(rows, target);
}

VisualTokens visual_tokens_from_grid(const QuantizedGrid& q) {
    VisualTokens v;
    v.count = q.patches();
    v.dim = q.dim;
    v.data = q.dequantized;
    return v;
}

std::vector<int32_t> generate(Backbone& bb, const VisualTokens& visual,
                              const std::vector<int32_t>& prompt, size_t max_tokens) {
    if (visual.dim != bb.visual_dim) throw DimensionError("generate: visual dim mismatch");
    std::vector<int32_t> out;
    std::vector<int32_t> text = prompt;
    for (size_t step = 0; step < max_tokens; ++step) {
        if (visual.count + text.size() + 1 > bb.lm_config.context) break;
        Tape tape;
        Tensor vis_in = tape.constant({visual.count, visual.dim}, visual.data);
        Tensor vis = bb.projector.apply(tape, vis_in, false);
        Tensor lg = bb.lm.logits(tape, &vis, text, false);
        const auto& v = lg.value();
        size_t rows = lg.rows(), vsz = lg.cols();
        const double* last = v.data() + (rows - 1) * vsz;
        int32_t best = 0;
        for (size_t j = 1; j < vsz; ++j) {
            if (last[j] > last[best]) best = int32_t(j);  // ties keep the smaller id
        }
        if (best == Vocabulary::kEnd) break;
        out.push_back(best);
        text.push_back(best);
    }
    return out;
}

// --- pretraining -----------------------------------------------------------------

namespace {

struct PretrainView {
    std::vector<double> visual;  // quantized rows, N x d
    size_t rows = 0;
    std::vector<int32_t> prompt;
    std::vector<int32_t> target;
};

}  // namespace

PretrainResult pretrain_backbone(Backbone& bb, const Codebook& cb, PatchEncoder& encoder,
                                 const std::vector<Sample>& corpus, const Vocabulary& vocab,
                                 const PretrainConfig& cfg) {
    if (corpus.empty()) throw ArgumentError("pretrain: empty corpus");
    uint32_t crc = cb.crc32();
    if (bb.codebook_crc != 0 && bb.codebook_crc != crc) {
        throw CrcMismatchError("pretrain: backbone is tagged with a different codebook CRC");
    }
    bb.codebook_crc = crc;

    // The encoder and codebook are frozen here, so per-sample quantized rows
    // are constants; compute them once.
    std::vector<PretrainView> views;
    for (const Sample& s : corpus) {
        FeatureGrid enc = encoder.encode_to_grid(s.features);
        QuantizedGrid q = rq_encode(enc, cb);

        PretrainView caption;
        caption.visual = q.dequantized;
        caption.rows = q.patches();
        caption.target = vocab.encode_target(augment_caption(s.scene.domain_word(), s.label));
        views.push_back(caption);

        PretrainView qa;
        qa.visual = q.dequantized;
        qa.rows = q.patches();
        qa.prompt = vocab.encode(s.prompt);
        qa.target = vocab.encode_target(s.target);
        views.push_back(std::move(qa));
    }

    PretrainResult result;
    Rng order_rng = Rng(cfg.seed).substream("pretrain-order");

    auto run_stage = [&](size_t steps, bool lm_trainable, std::vector<double>& losses,
                         const char* stage_label) {
        if (steps == 0) return;
        TrainConfig sched;
        sched.peak_lr = cfg.peak_lr;
        sched.warmup_ratio = cfg.warmup_ratio;
        sched.total_steps = steps;

        std::vector<Parameter*> trainable = bb.projector.parameters();
        if (lm_trainable) {
            for (Parameter* p : bb.lm.parameters()) trainable.push_back(p);
        }
        AdamW opt;
        Rng stage_rng = order_rng.substream(stage_label);
        std::vector<size_t> order = stage_rng.permutation(views.size());
        size_t cursor = 0;

        for (size_t step = 0; step < steps; ++step) {
            for (Parameter* p : trainable) p->zero_grad();
            Tape tape;
            Tensor total;
            for (size_t bi = 0; bi < cfg.batch; ++bi) {
                if (cursor == order.size()) {
                    order = stage_rng.permutation(views.size());
                    cursor = 0;
                }
                const PretrainView& view = views[order[cursor++]];
                Tensor vis_in = tape.constant({view.rows, size_t(bb.visual_dim)}, view.visual);
                Tensor vis = bb.projector.apply(tape, vis_in, true);
                Tensor lg = bb.lm.logits(tape, &vis, [&] {
                    std::vector<int32_t> text = view.prompt;
                    text.insert(text.end(), view.target.begin(), view.target.end());
                    return text;
                }(), lm_trainable);
                size_t start = view.rows + view.prompt.size() - 1;
                Tensor loss = cross_entropy_sum(
                    slice_rows(lg, start, start + view.target.size()), view.target);
                loss = scale(loss, 1.0 / double(view.target.size()));
                total = total.valid() ? add(total, loss) : loss;
            }
            total = scale(total, 1.0 / double(cfg.batch));
            tape.backward(total);
            opt.step(trainable, cosine_lr(step, sched));
            losses.push_back(total.scalar());
        }
    };

    run_stage(cfg.stage1_steps, /*lm_trainable=*/false, result.stage1_losses, "stage1");
    run_stage(cfg.stage2_steps, /*lm_trainable=*/true, result.stage2_losses, "stage2");

    if (!result.stage1_losses.empty()) result.first_loss = result.stage1_losses.front();
    if (!result.stage2_losses.empty()) {
        result.final_loss = result.stage2_losses.back();
    } else if (!result.stage1_losses.empty()) {
        result.final_loss = result.stage1_losses.back();
    }
    return result;
}

// --- checkpoint container -----------------------------------------------------------

const std::vector<uint8_t>* Checkpoint::find(const std::string& name) const {
    for (const auto& [n, b] : blobs) {
        if (n == name) return &b;
    }
    return nullptr;
}

void save_checkpoint(const Checkpoint& ck, const std::string& path) {
    ByteWriter body;
    body.str_u32(ck.architecture_id);
    body.u32(ck.codebook_crc);
    body.u64(ck.step);
    body.u64(ck.seed);
    body.u64(ck.config_hash);
    body.u32(static_cast<uint32_t>(ck.blobs.size()));
    for (const auto& [name, bytes] : ck.blobs) {
        body.str_u32(name);
        body.u64(bytes.size());
        body.bytes(bytes.data(), bytes.size());
    }

    ByteWriter w;
    w.bytes(kCheckpointMagic, 8);
    w.bytes(body.data().data(), body.size());
    w.u32(crc32(body.data()));
    write_file_atomic(path, w.data());
}

Checkpoint load_checkpoint(const std::string& path) {
    std::vector<uint8_t> bytes = read_file(path);
    if (bytes.size() < 12 || std::memcmp(bytes.data(), kCheckpointMagic, 6) != 0) {
        throw FormatError("checkpoint: bad magic (expected CRFTCP01): " + path);
    }
    if (std::memcmp(bytes.data() + 6, kCheckpointMagic + 6, 2) != 0) {
        throw FormatError("checkpoint: unsupported version (expected CRFTCP01): " + path);
    }
    uint32_t stored = 0;
    for (int i = 0; i < 4; ++i) {
        stored |= uint32_t(bytes[bytes.size() - 4 + size_t(i)]) << (8 * i);
    }
    if (crc32(bytes.data() + 8, bytes.size() - 12) != stored) {
        throw FormatError("checkpoint: payload CRC mismatch: " + path);
    }

    std::vector<uint8_t> body(bytes.begin() + 8, bytes.end() - 4);
    ByteReader r(body);
    Checkpoint ck;
    ck.architecture_id = r.str_u32();
    ck.codebook_crc = r.u32();
    ck.step = r.u64();
    ck.seed = r.u64();
    ck.config_hash = r.u64();
    uint32_t n = r.u32();
    for (uint32_t i = 0; i < n; ++i) {
        std::string name = r.str_u32();
        uint64_t len = r.u64();
        std::vector<uint8_t> blob(len);
        r.bytes(blob.data(), len);
        ck.blobs.emplace_back(std::move(name), std::move(blob));
    }
    if (!r.eof()) throw FormatError("checkpoint: trailing bytes: " + path);
    return ck;
}

std::vector<uint8_t> f32_blob(const std::vector<double>& values) {
    ByteWriter w;
    for (double v : values) w.f32(static_cast<float>(v));
    return w.data();
}

std::vector<double> f32_blob_values(const std::vector<uint8_t>& bytes) {
    if (bytes.size() % 4 != 0) throw FormatError("f32 blob: byte length not a multiple of 4");
    ByteReader r(bytes);
    std::vector<double> out(bytes.size() / 4);
    for (double& v : out) v = double(r.f32());
    return out;
}

std::vector<uint8_t> f64_blob(const std::vector<double>& values) {
    ByteWriter w;
    for (double v : values) w.f64(v);
    return w.data();
}

std::vector<double> f64_blob_values(const std::vector<uint8_t>& bytes) {
    if (bytes.size() % 8 != 0) throw FormatError("f64 blob: byte length not a multiple of 8");
    ByteReader r(bytes);
    std::vector<double> out(bytes.size() / 8);
    for (double& v : out) v = r.f64();
    return out;
}

void add_parameter_blobs(Checkpoint& ck, const std::vector<const Parameter*>& params) {
    for (const Parameter* p : params) ck.blobs.emplace_back(p->name, f32_blob(p->value));
}

void restore_parameter_blobs(const Checkpoint& ck, const std::vector<Parameter*>& params) {
    for (Parameter* p : params) {
        const auto* blob = ck.find(p->name);
        if (!blob) throw FormatError("checkpoint: missing parameter blob '" + p->name + "'");
        auto values = f32_blob_values(*blob);
        if (values.size() != p->value.size()) {
            throw FormatError("checkpoint: size mismatch for parameter '" + p->name + "'");
        }
        p->value = std::move(values);
        p->zero_grad();
    }
}

Checkpoint encoder_checkpoint(const PatchEncoder& enc, uint32_t codebook_crc, uint64_t seed,
                              uint64_t config_hash) {
    Checkpoint ck;
    ck.architecture_id = enc.architecture_id();
    ck.codebook_crc = codebook_crc;
    ck.seed = seed;
    ck.config_hash = config_hash;
    add_parameter_blobs(ck, enc.parameters());
    return ck;
}

PatchEncoder encoder_from_checkpoint(const Checkpoint& ck, uint32_t* codebook_crc) {
    EncoderConfig cfg = EncoderConfig::from_id(ck.architecture_id);
    PatchEncoder enc(cfg, /*seed=*/0);
    restore_parameter_blobs(ck, enc.parameters());
    if (codebook_crc) *codebook_crc = ck.codebook_crc;
    return enc;
}

Checkpoint backbone_checkpoint(const Backbone& bb, uint64_t seed, uint64_t config_hash) {
    Checkpoint ck;
    ck.architecture_id = bb.architecture_id();
    ck.codebook_crc = bb.codebook_crc;
    ck.seed = seed;
    ck.config_hash = config_hash;
    auto params = const_cast<Backbone&>(bb).parameters();
    add_parameter_blobs(ck, std::vector<const Parameter*>(params.begin(), params.end()));
    return ck;
}

Backbone backbone_from_checkpoint(const Checkpoint& ck) {
    size_t vdim = 0;
    auto [cfg, name] = LmConfig::from_id(ck.architecture_id, &vdim);
    Backbone bb(name, cfg, vdim, /*seed=*/0);
    restore_parameter_blobs(ck, bb.parameters());
    bb.codebook_crc = ck.codebook_crc;
    return bb;
}

}  // namespace craft
