// SPDX-License-Identifier: Apache-2.0
#include "craft/tensor.hpp"

#include <cmath>
#include <cstring>
#include <string>
#include <utility>

#include "craft/error.hpp"

namespace craft {

namespace {

constexpr double kLayerNormEps = 1e-5;

size_t shape_size(const std::vector<size_t>& shape) {
    size_t n = 1;
    for (size_t d : shape) n *= d;
    return n;
}

void check_finite(const char* op, const std::vector<double>& v) {
    for (double x : v) {
        if (!std::isfinite(x)) {
            throw NumericError(std::string(op) + ": non-finite value in result");
        }
    }
}

std::string shape_str(const std::vector<size_t>& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

[[noreturn]] void dim_error(const char* op, const std::vector<size_t>& a,
                            const std::vector<size_t>& b) {
    throw DimensionError(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " +
                         shape_str(b));
}

// C[m,n] += A[m,k] * B[k,n]
void gemm_acc(const double* a, const double* b, double* c, size_t m, size_t k, size_t n) {
    for (size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * n;
        for (size_t l = 0; l < k; ++l) {
            double av = arow[l];
            const double* brow = b + l * n;
            for (size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C[m,k] += A[m,n] * B[k,n]^T  (rows of A dotted with rows of B)
void gemm_nt_acc(const double* a, const double* b, double* c, size_t m, size_t n, size_t k) {
    for (size_t i = 0; i < m; ++i) {
        const double* arow = a + i * n;
        double* crow = c + i * k;
        for (size_t j = 0; j < k; ++j) {
            const double* brow = b + j * n;
            double acc = 0.0;
            for (size_t l = 0; l < n; ++l) acc += arow[l] * brow[l];
            crow[j] += acc;
        }
    }
}

// C[k,n] += A[m,k]^T * B[m,n]
void gemm_tn_acc(const double* a, const double* b, double* c, size_t m, size_t k, size_t n) {
    for (size_t l = 0; l < m; ++l) {
        const double* arow = a + l * k;
        const double* brow = b + l * n;
        for (size_t i = 0; i < k; ++i) {
            double av = arow[i];
            double* crow = c + i * n;
            for (size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

double stable_softplus(double x) {
    // log(1 + e^x) without overflow.
    if (x > 35.0) return x;
    if (x < -35.0) return std::exp(x);
    return std::log1p(std::exp(x));
}

bool wants_grad(Tape& t, uint32_t id) {
    return t.node(id).requires_grad;
}

}  // namespace

Parameter::Parameter(std::string n, std::vector<size_t> s)
    : name(std::move(n)), shape(std::move(s)) {
    value.assign(shape_size(shape), 0.0);
    grad.assign(value.size(), 0.0);
}

void Parameter::zero_grad() {
    grad.assign(value.size(), 0.0);
}

const std::vector<size_t>& Tensor::shape() const {
    return tape_->node(id_).shape;
}

size_t Tensor::size() const {
    return tape_->node(id_).value.size();
}

size_t Tensor::rows() const {
    const auto& s = shape();
    if (s.size() != 2) throw DimensionError("rows(): tensor is not rank-2");
    return s[0];
}

size_t Tensor::cols() const {
    const auto& s = shape();
    if (s.size() != 2) throw DimensionError("cols(): tensor is not rank-2");
    return s[1];
}

const std::vector<double>& Tensor::value() const {
    return tape_->node(id_).value;
}

const std::vector<double>& Tensor::grad() const {
    return tape_->node(id_).grad;
}

double Tensor::scalar() const {
    const auto& v = value();
    if (v.size() != 1) throw ContractError("scalar(): tensor has more than one element");
    return v[0];
}

bool Tensor::requires_grad() const {
    return tape_->node(id_).requires_grad;
}

Tensor Tape::make_node(std::vector<size_t> shape, std::vector<double> value,
                       const std::vector<Tensor>& parents,
                       std::function<void(Tape&, uint32_t)> backward_fn, const char* op_name) {
    if (value.size() != shape_size(shape)) {
        throw DimensionError(std::string(op_name) + ": value size does not match shape");
    }
    check_finite(op_name, value);
    Node n;
    n.shape = std::move(shape);
    n.value = std::move(value);
    for (const Tensor& p : parents) {
        if (p.tape() != this) throw ContractError("op inputs must live on the same tape");
        n.requires_grad = n.requires_grad || nodes_[p.id()].requires_grad;
    }
    if (n.requires_grad) n.backward_fn = std::move(backward_fn);
    nodes_.push_back(std::move(n));
    return Tensor(this, static_cast<uint32_t>(nodes_.size() - 1));
}

std::vector<double>& Tape::grad_buf(uint32_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
    return n.grad;
}

Tensor Tape::param(Parameter& p) {
    Node n;
    n.shape = p.shape;
    n.value = p.value;
    n.requires_grad = true;
    Parameter* pp = &p;
    nodes_.push_back(std::move(n));
    uint32_t id = static_cast<uint32_t>(nodes_.size() - 1);
    nodes_[id].backward_fn = [pp](Tape& t, uint32_t self) {
        const auto& g = t.node(self).grad;
        if (pp->grad.size() != g.size()) pp->grad.assign(g.size(), 0.0);
        for (size_t i = 0; i < g.size(); ++i) pp->grad[i] += g[i];
    };
    return Tensor(this, id);
}

Tensor Tape::frozen(const Parameter& p) {
    return constant(p.shape, p.value);
}

Tensor Tape::constant(std::vector<size_t> shape, std::vector<double> data) {
    return make_node(std::move(shape), std::move(data), {}, nullptr, "constant");
}

Tensor Tape::input(std::vector<size_t> shape, std::vector<double> data) {
    if (data.size() != shape_size(shape)) {
        throw DimensionError("input: value size does not match shape");
    }
    check_finite("input", data);
    Node n;
    n.shape = std::move(shape);
    n.value = std::move(data);
    n.requires_grad = true;
    nodes_.push_back(std::move(n));
    return Tensor(this, static_cast<uint32_t>(nodes_.size() - 1));
}

void Tape::backward(const Tensor& loss) {
    if (loss.tape() != this) throw ContractError("backward: loss lives on a different tape");
    if (nodes_[loss.id()].value.size() != 1) {
        throw ContractError("backward: loss must be a scalar");
    }
    // Node grads are transient per pass; Parameter grads accumulate across passes.
    for (Node& n : nodes_) n.grad.clear();
    grad_buf(loss.id())[0] = 1.0;

    last_visits_ = 0;
    last_closure_calls_ = 0;
    for (uint32_t id = loss.id() + 1; id-- > 0;) {
        ++last_visits_;
        Node& n = nodes_[id];
        if (n.grad.empty() || !n.backward_fn) continue;
        ++last_closure_calls_;
        n.backward_fn(*this, id);
    }
}

// --- ops ---------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    const auto& sa = a.shape();
    const auto& sb = b.shape();
    if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0]) dim_error("matmul", sa, sb);
    size_t m = sa[0], k = sa[1], n = sb[1];
    std::vector<double> out(m * n, 0.0);
    gemm_acc(a.value().data(), b.value().data(), out.data(), m, k, n);

    uint32_t aid = a.id(), bid = b.id();
    auto bw = [aid, bid, m, k, n](Tape& t, uint32_t self) {
        const auto& g = t.node(self).grad;
        if (wants_grad(t, aid)) {
            gemm_nt_acc(g.data(), t.node(bid).value.data(), t.grad_buf(aid).data(), m, n, k);
        }
        if (wants_grad(t, bid)) {
            gemm_tn_acc(t.node(aid).value.data(), g.data(), t.grad_buf(bid).data(), m, k, n);
        }
    };
    return a.tape()->make_node({m, n}, std::move(out), {a, b}, bw, "matmul");
}

Tensor transpose(const Tensor& a) {
    const auto& sa = a.shape();
    if (sa.size() != 2) throw DimensionError("transpose: tensor is not rank-2");
    size_t m = sa[0], n = sa[1];
    const auto& v = a.value();
    std::vector<double> out(m * n);
    for (size_t i = 0; i < m; ++i) {
        for (size_t j = 0; j < n; ++j) out[j * m + i] = v[i * n + j];
    }
    uint32_t aid = a.id();
    auto bw = [aid, m, n](Tape& t, uint32_t self) {
        if (!wants_grad(t, aid)) return;
        const auto& g = t.node(self).grad;
        auto& ga = t.grad_buf(aid);
        for (size_t i = 0; i < m; ++i) {
            for (size_t j = 0; j < n; ++j) ga[i * n + j] += g[j * m + i];
        }
    };
    return a.tape()->make_node({n, m}, std::move(out), {a}, bw, "transpose");
}

Tensor add(const Tensor& a, const Tensor& b) {
    const auto& sa = a.shape();
    const auto& sb = b.shape();
    const auto& va = a.value();
    const auto& vb = b.value();

    bool same = (sa == sb);
    bool bias_row = !same && sa.size() == 2 &&
                    ((sb.size() == 1 && sb[0] == sa[1]) ||
                     (sb.size() == 2 && sb[0] == 1 && sb[1] == sa[1]));
    if (!same && !bias_row) dim_error("add", sa, sb);

    std::vector<double> out(va.size());
    if (same) {
        for (size_t i = 0; i < va.size(); ++i) out[i] = va[i] + vb[i];
    } else {
        size_t m = sa[0], n = sa[1];
        for (size_t i = 0; i < m; ++i) {
            for (size_t j = 0; j < n; ++j) out[i * n + j] = va[i * n + j] + vb[j];
        }
    }

    uint32_t aid = a.id(), bid = b.id();
    std::function<void(Tape&, uint32_t)> bw;
    if (same) {
        bw = [aid, bid](Tape& t, uint32_t self) {
            const auto& g = t.node(self).grad;
            if (wants_grad(t, aid)) {
                auto& ga = t.grad_buf(aid);
                for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (wants_grad(t, bid)) {
                auto& gb = t.grad_buf(bid);
                for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
            }
        };
    } else {
        size_t m = sa[0], n = sa[1];
        bw = [aid, bid, m, n](Tape& t, uint32_t self) {
            const auto& g = t.node(self).grad;
            if (wants_grad(t, aid)) {
                auto& ga = t.grad_buf(aid);
                for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (wants_grad(t, bid)) {
                auto& gb = t.grad_buf(bid);
                for (size_t i = 0; i < m; ++i) {
                    for (size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
                }
            }
        };
    }
    return a.tape()->make_node(sa, std::move(out), {a, b}, bw, "add");
}

Tensor sub(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) dim_error("sub", a.shape(), b.shape());
    const auto& va = a.value();
    const auto& vb = b.value();
    std::vector<double> out(va.size());
    for (size_t i = 0; i < va.size(); ++i) out[i] = va[i] - vb[i];
    uint32_t aid = a.id(), bid = b.id();
    auto bw = [aid, bid](Tape& t, uint32_t self) {
        const auto& g = t.node(self).grad;
        if (wants_grad(t, aid)) {
            auto& ga = t.grad_buf(aid);
            for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (wants_grad(t, bid)) {
            auto& gb = t.grad_buf(bid);
            for (size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
        }
    };
    return a.tape()->make_node(a.shape(), std::move(out), {a, b}, bw, "sub");
}

Tensor mul(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) dim_error("mul", a.shape(), b.shape());
    const auto& va = a.value();
    const auto& vb = b.value();
    std::vector<double> out(va.size());
    for (size_t i = 0; i < va.size(); ++i) out[i] = va[i] * vb[i];
    uint32_t aid = a.id(), bid = b.id();
    auto bw = [aid, bid](Tape& t, uint32_t self) {
        const auto& g = t.node(self).grad;
        const auto& va2 = t.node(aid).value;
        const auto& vb2 = t.node(bid).value;
        if (wants_grad(t, aid)) {
            auto& ga = t.grad_buf(aid);
            for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * vb2[i];
        }
        if (wants_grad(t, bid)) {
            auto& gb = t.grad_buf(bid);
            for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * va2[i];
        }
    };
    return a.tape()->make_node(a.shape(), std::move(out), {a, b}, bw, "mul");
}

Tensor scale(const Tensor& a, double s) {
    const auto& va = a.value();
    std::vector<double> out(va.size());
    for (size_t i = 0; i < va.size(); ++i) out[i] = va[i] * s;
    uint32_t aid = a.id();
    auto bw = [aid, s](Tape& t, uint32_t self) {
        if (!wants_grad(t, aid)) return;
        const auto& g = t.node(self).grad;
        auto& ga = t.grad_buf(aid);
        for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
    };
    return a.tape()->make_node(a.shape(), std::move(out), {a}, bw, "scale");
}

Tensor gelu(const Tensor& a) {
    const auto& va = a.value();
    std::vector<double> out(va.size());
    for (size_t i = 0; i < va.size(); ++i) {
        double x = va[i];
        out[i] = 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2));
    }
    uint32_t aid = a.id();
    auto bw = [aid](Tape& t, uint32_t self) {
        if (!wants_grad(t, aid)) return;
        const auto& g = t.node(self).grad;
        const auto& x = t.node(aid).value;
        auto& ga = t.grad_buf(aid);
        constexpr double inv_sqrt2pi = 0.3989422804014327;
        for (size_t i = 0; i < g.size(); ++i) {
            double phi_cdf = 0.5 * (1.0 + std::erf(x[i] * M_SQRT1_2));
            double phi_pdf = inv_sqrt2pi * std::exp(-0.5 * x[i] * x[i]);
            ga[i] += g[i] * (phi_cdf + x[i] * phi_pdf);
        }
    };
    return a.tape()->make_node(a.shape(), std::move(out), {a}, bw, "gelu");
}

Tensor sigmoid(const Tensor& a) {
    const auto& va = a.value();
    std::vector<double> out(va.size());
    for (size_t i = 0; i < va.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-va[i]));
    uint32_t aid = a.id();
    auto bw = [aid](Tape& t, uint32_t self) {
        if (!wants_grad(t, aid)) return;
        const auto& g = t.node(self).grad;
        const auto& y = t.node(self).value;
        auto& ga = t.grad_buf(aid);
        for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i] * (1.0 - y[i]);
    };
    return a.tape()->make_node(a.shape(), std::move(out), {a}, bw, "sigmoid");
}

Tensor exp(const Tensor& a) {
    const auto& va = a.value();
    std::vector<double> out(va.size());
    for (size_t i = 0; i < va.size(); ++i) out[i] = std::exp(va[i]);
    uint32_t aid = a.id();
    auto bw = [aid](Tape& t, uint32_t self) {
        if (!wants_grad(t, aid)) return;
        const auto& g = t.node(self).grad;
        const auto& y = t.node(self).value;
        auto& ga = t.grad_buf(aid);
        for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i];
    };
    return a.tape()->make_node(a.shape(), std::move(out), {a}, bw, "exp");
}

Tensor log(const Tensor& a) {
    const auto& va = a.value();
    std::vector<double> out(va.size());
    for (size_t i = 0; i < va.size(); ++i) out[i] = std::log(va[i]);
    uint32_t aid = a.id();
    auto bw = [aid](Tape& t, uint32_t self) {
        if (!wants_grad(t, aid)) return;
        const auto& g = t.node(self).grad;
        const auto& x = t.node(aid).value;
        auto& ga = t.grad_buf(aid);
        for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / x[i];
    };
    return a.tape()->make_node(a.shape(), std::move(out), {a}, bw, "log");
}

Tensor log_sigmoid(const Tensor& a) {
    const auto& va = a.value();
    std::vector<double> out(va.size());
    for (size_t i = 0; i < va.size(); ++i) out[i] = -stable_softplus(-va[i]);
    uint32_t aid = a.id();
    auto bw = [aid](Tape& t, uint32_t self) {
        if (!wants_grad(t, aid)) return;
        const auto& g = t.node(self).grad;
        const auto& x = t.node(aid).value;
        auto& ga = t.grad_buf(aid);
        for (size_t i = 0; i < g.size(); ++i) {
            ga[i] += g[i] / (1.0 + std::exp(x[i]));  // sigmoid(-x)
        }
    };
    return a.tape()->make_node(a.shape(), std::move(out), {a}, bw, "log_sigmoid");
}

Tensor log1m_sigmoid(const Tensor& a) {
    const auto& va = a.value();
    std::vector<double> out(va.size());
    for (size_t i = 0; i < va.size(); ++i) out[i] = -stable_softplus(va[i]);
    uint32_t aid = a.id();
    auto bw = [aid](Tape& t, uint32_t self) {
        if (!wants_grad(t, aid)) return;
        const auto& g = t.node(self).grad;
        const auto& x = t.node(aid).value;
        auto& ga = t.grad_buf(aid);
        for (size_t i = 0; i < g.size(); ++i) {
            ga[i] -= g[i] / (1.0 + std::exp(-x[i]));  // -sigmoid(x)
        }
    };
    return a.tape()->make_node(a.shape(), std::move(out), {a}, bw, "log1m_sigmoid");
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias) {
    const auto& sx = x.shape();
    if (sx.size() != 2) throw DimensionError("layer_norm: input is not rank-2");
    size_t m = sx[0], w = sx[1];
    if (gain.shape() != std::vector<size_t>{w} || bias.shape() != std::vector<size_t>{w}) {
        dim_error("layer_norm", sx, gain.shape());
    }
    const auto& vx = x.value();
    const auto& vg = gain.value();
    const auto& vb = bias.value();

    std::vector<double> out(m * w);
    std::vector<double> xhat(m * w);
    std::vector<double> inv(m);
    for (size_t i = 0; i < m; ++i) {
        const double* row = vx.data() + i * w;
        double mean = 0.0;
        for (size_t j = 0; j < w; ++j) mean += row[j];
        mean /= static_cast<double>(w);
        double var = 0.0;
        for (size_t j = 0; j < w; ++j) {
            double d = row[j] - mean;
            var += d * d;
        }
        var /= static_cast<double>(w);
        double iv = 1.0 / std::sqrt(var + kLayerNormEps);
        inv[i] = iv;
        for (size_t j = 0; j < w; ++j) {
            double h = (row[j] - mean) * iv;
            xhat[i * w + j] = h;
            out[i * w + j] = vg[j] * h + vb[j];
        }
    }

    uint32_t xid = x.id(), gid = gain.id(), bid = bias.id();
    auto bw = [xid, gid, bid, m, w, xhat = std::move(xhat), inv = std::move(inv)](Tape& t,
                                                                                 uint32_t self) {
        const auto& g = t.node(self).grad;
        const auto& vg2 = t.node(gid).value;
        if (wants_grad(t, gid)) {
            auto& gg = t.grad_buf(gid);
            for (size_t i = 0; i < m; ++i) {
                for (size_t j = 0; j < w; ++j) gg[j] += g[i * w + j] * xhat[i * w + j];
            }
        }
        if (wants_grad(t, bid)) {
            auto& gb = t.grad_buf(bid);
            for (size_t i = 0; i < m; ++i) {
                for (size_t j = 0; j < w; ++j) gb[j] += g[i * w + j];
            }
        }
        if (wants_grad(t, xid)) {
            auto& gx = t.grad_buf(xid);
            std::vector<double> dxh(w);
            for (size_t i = 0; i < m; ++i) {
                double mean_dxh = 0.0, mean_dxh_xh = 0.0;
                for (size_t j = 0; j < w; ++j) {
                    dxh[j] = g[i * w + j] * vg2[j];
                    mean_dxh += dxh[j];
                    mean_dxh_xh += dxh[j] * xhat[i * w + j];
                }
                mean_dxh /= static_cast<double>(w);
                mean_dxh_xh /= static_cast<double>(w);
                for (size_t j = 0; j < w; ++j) {
                    gx[i * w + j] +=
                        inv[i] * (dxh[j] - mean_dxh - xhat[i * w + j] * mean_dxh_xh);
                }
            }
        }
    };
    return x.tape()->make_node(sx, std::move(out), {x, gain, bias}, bw, "layer_norm");
}

Tensor embedding(const Tensor& table, const std::vector<int32_t>& ids) {
    const auto& st = table.shape();
    if (st.size() != 2) throw DimensionError("embedding: table is not rank-2");
    size_t v = st[0], d = st[1];
    const auto& vt = table.value();
    std::vector<double> out(ids.size() * d);
    for (size_t i = 0; i < ids.size(); ++i) {
        int32_t id = ids[i];
        if (id < 0 || static_cast<size_t>(id) >= v) {
            throw ArgumentError("embedding: token id out of range");
        }
        std::memcpy(out.data() + i * d, vt.data() + static_cast<size_t>(id) * d,
                    d * sizeof(double));
    }
    uint32_t tid = table.id();
    auto bw = [tid, ids, d](Tape& t, uint32_t self) {
        if (!wants_grad(t, tid)) return;
        const auto& g = t.node(self).grad;
        auto& gt = t.grad_buf(tid);
        for (size_t i = 0; i < ids.size(); ++i) {
            double* dst = gt.data() + static_cast<size_t>(ids[i]) * d;
            const double* src = g.data() + i * d;
            for (size_t j = 0; j < d; ++j) dst[j] += src[j];
        }
    };
    return table.tape()->make_node({ids.size(), d}, std::move(out), {table}, bw, "embedding");
}

Tensor softmax_rows(const Tensor& s, bool causal) {
    const auto& ss = s.shape();
    if (ss.size() != 2) throw DimensionError("softmax_rows: input is not rank-2");
    size_t m = ss[0], n = ss[1];
    if (causal && m != n) throw DimensionError("softmax_rows: causal mask requires square input");
    const auto& v = s.value();
    std::vector<double> out(m * n, 0.0);
    for (size_t i = 0; i < m; ++i) {
        size_t lim = causal ? i + 1 : n;
        const double* row = v.data() + i * n;
        double mx = row[0];
        for (size_t j = 1; j < lim; ++j) mx = std::max(mx, row[j]);
        double z = 0.0;
        for (size_t j = 0; j < lim; ++j) z += std::exp(row[j] - mx);
        for (size_t j = 0; j < lim; ++j) out[i * n + j] = std::exp(row[j] - mx) / z;
    }
    uint32_t sid = s.id();
    auto bw = [sid, m, n, causal](Tape& t, uint32_t self) {
        if (!wants_grad(t, sid)) return;
        const auto& g = t.node(self).grad;
        const auto& y = t.node(self).value;
        auto& gs = t.grad_buf(sid);
        for (size_t i = 0; i < m; ++i) {
            size_t lim = causal ? i + 1 : n;
            double dot = 0.0;
            for (size_t j = 0; j < lim; ++j) dot += g[i * n + j] * y[i * n + j];
            for (size_t j = 0; j < lim; ++j) {
                gs[i * n + j] += y[i * n + j] * (g[i * n + j] - dot);
            }
        }
    };
    return s.tape()->make_node(ss, std::move(out), {s}, bw, "softmax_rows");
}

Tensor cross_entropy_sum(const Tensor& logits, const std::vector<int32_t>& targets) {
    const auto& sl = logits.shape();
    if (sl.size() != 2) throw DimensionError("cross_entropy_sum: logits are not rank-2");
    size_t n = sl[0], v = sl[1];
    if (targets.size() != n) {
        throw DimensionError("cross_entropy_sum: target count does not match logit rows");
    }
    const auto& lv = logits.value();
    std::vector<double> probs(n * v);
    double loss = 0.0;
    for (size_t i = 0; i < n; ++i) {
        int32_t tgt = targets[i];
        if (tgt < 0 || static_cast<size_t>(tgt) >= v) {
            throw ArgumentError("cross_entropy_sum: target id out of range");
        }
        const double* row = lv.data() + i * v;
        double mx = row[0];
        for (size_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
        double z = 0.0;
        for (size_t j = 0; j < v; ++j) z += std::exp(row[j] - mx);
        for (size_t j = 0; j < v; ++j) probs[i * v + j] = std::exp(row[j] - mx) / z;
        loss += (std::log(z) + mx) - row[tgt];
    }
    uint32_t lid = logits.id();
    auto bw = [lid, targets, n, v, probs = std::move(probs)](Tape& t, uint32_t self) {
        if (!wants_grad(t, lid)) return;
        double g = t.node(self).grad[0];
        auto& gl = t.grad_buf(lid);
        for (size_t i = 0; i < n; ++i) {
            for (size_t j = 0; j < v; ++j) gl[i * v + j] += g * probs[i * v + j];
            gl[i * v + static_cast<size_t>(targets[i])] -= g;
        }
    };
    return logits.tape()->make_node({}, {loss}, {logits}, bw, "cross_entropy_sum");
}

Tensor cosine(const Tensor& u, const Tensor& v) {
    if (u.size() != v.size()) dim_error("cosine", u.shape(), v.shape());
    const auto& a = u.value();
    const auto& b = v.value();
    double dot = 0.0, na2 = 0.0, nb2 = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na2 += a[i] * a[i];
        nb2 += b[i] * b[i];
    }
    if (na2 == 0.0 || nb2 == 0.0) {
        throw NumericError("cosine: undefined for a zero-norm vector");
    }
    double na = std::sqrt(na2), nb = std::sqrt(nb2);
    double c = dot / (na * nb);
    uint32_t uid = u.id(), vid = v.id();
    auto bw = [uid, vid, na, nb, na2, nb2, c](Tape& t, uint32_t self) {
        double g = t.node(self).grad[0];
        const auto& a2 = t.node(uid).value;
        const auto& b2 = t.node(vid).value;
        if (wants_grad(t, uid)) {
            auto& gu = t.grad_buf(uid);
            for (size_t i = 0; i < a2.size(); ++i) {
                gu[i] += g * (b2[i] / (na * nb) - c * a2[i] / na2);
            }
        }
        if (wants_grad(t, vid)) {
            auto& gv = t.grad_buf(vid);
            for (size_t i = 0; i < b2.size(); ++i) {
                gv[i] += g * (a2[i] / (na * nb) - c * b2[i] / nb2);
            }
        }
    };
    return u.tape()->make_node({}, {c}, {u, v}, bw, "cosine");
}

Tensor sum_all(const Tensor& a) {
    const auto& v = a.value();
    double s = 0.0;
    for (double x : v) s += x;
    uint32_t aid = a.id();
    auto bw = [aid](Tape& t, uint32_t self) {
        if (!wants_grad(t, aid)) return;
        double g = t.node(self).grad[0];
        auto& ga = t.grad_buf(aid);
        for (double& x : ga) x += g;
    };
    return a.tape()->make_node({}, {s}, {a}, bw, "sum_all");
}

Tensor mean_all(const Tensor& a) {
    const auto& v = a.value();
    double s = 0.0;
    for (double x : v) s += x;
    double n = static_cast<double>(v.size());
    uint32_t aid = a.id();
    auto bw = [aid, n](Tape& t, uint32_t self) {
        if (!wants_grad(t, aid)) return;
        double g = t.node(self).grad[0] / n;
        auto& ga = t.grad_buf(aid);
        for (double& x : ga) x += g;
    };
    return a.tape()->make_node({}, {s / n}, {a}, bw, "mean_all");
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ArgumentError("concat_rows: no inputs");
    size_t cols = parts[0].cols();
    size_t rows = 0;
    for (const Tensor& p : parts) {
        if (p.cols() != cols) dim_error("concat_rows", parts[0].shape(), p.shape());
        rows += p.rows();
    }
    std::vector<double> out;
    out.reserve(rows * cols);
    std::vector<uint32_t> ids;
    std::vector<size_t> row_counts;
    for (const Tensor& p : parts) {
        const auto& v = p.value();
        out.insert(out.end(), v.begin(), v.end());
        ids.push_back(p.id());
        row_counts.push_back(p.rows());
    }
    auto bw = [ids, row_counts, cols](Tape& t, uint32_t self) {
        const auto& g = t.node(self).grad;
        size_t off = 0;
        for (size_t p = 0; p < ids.size(); ++p) {
            size_t n = row_counts[p] * cols;
            if (wants_grad(t, ids[p])) {
                auto& gp = t.grad_buf(ids[p]);
                for (size_t i = 0; i < n; ++i) gp[i] += g[off + i];
            }
            off += n;
        }
    };
    return parts[0].tape()->make_node({rows, cols}, std::move(out), parts, bw, "concat_rows");
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ArgumentError("concat_cols: no inputs");
    size_t rows = parts[0].rows();
    size_t cols = 0;
    for (const Tensor& p : parts) {
        if (p.rows() != rows) dim_error("concat_cols", parts[0].shape(), p.shape());
        cols += p.cols();
    }
    std::vector<double> out(rows * cols);
    std::vector<uint32_t> ids;
    std::vector<size_t> col_counts;
    size_t coff = 0;
    for (const Tensor& p : parts) {
        const auto& v = p.value();
        size_t pc = p.cols();
        for (size_t i = 0; i < rows; ++i) {
            std::memcpy(out.data() + i * cols + coff, v.data() + i * pc, pc * sizeof(double));
        }
        ids.push_back(p.id());
        col_counts.push_back(pc);
        coff += pc;
    }
    auto bw = [ids, col_counts, rows, cols](Tape& t, uint32_t self) {
        const auto& g = t.node(self).grad;
        size_t off = 0;
        for (size_t p = 0; p < ids.size(); ++p) {
            size_t pc = col_counts[p];
            if (wants_grad(t, ids[p])) {
                auto& gp = t.grad_buf(ids[p]);
                for (size_t i = 0; i < rows; ++i) {
                    for (size_t j = 0; j < pc; ++j) gp[i * pc + j] += g[i * cols + off + j];
                }
            }
            off += pc;
        }
    };
    return parts[0].tape()->make_node({rows, cols}, std::move(out), parts, bw, "concat_cols");
}

Tensor slice_rows(const Tensor& a, size_t from, size_t to) {
    size_t m = a.rows(), n = a.cols();
    if (from >= to || to > m) throw DimensionError("slice_rows: row range out of bounds");
    const auto& v = a.value();
    std::vector<double> out(v.begin() + static_cast<ptrdiff_t>(from * n),
                            v.begin() + static_cast<ptrdiff_t>(to * n));
    uint32_t aid = a.id();
    auto bw = [aid, from, n](Tape& t, uint32_t self) {
        if (!wants_grad(t, aid)) return;
        const auto& g = t.node(self).grad;
        auto& ga = t.grad_buf(aid);
        for (size_t i = 0; i < g.size(); ++i) ga[from * n + i] += g[i];
    };
    return a.tape()->make_node({to - from, n}, std::move(out), {a}, bw, "slice_rows");
}

Tensor stop_gradient(const Tensor& a) {
    // No parent edge: forward is a bit-exact copy, backward contributes nothing.
    return a.tape()->make_node(a.shape(), a.value(), {}, nullptr, "stop_gradient");
}

Tensor squared_l2(const Tensor& a, const Tensor& b) {
    Tensor d = sub(a, b);
    return sum_all(mul(d, d));
}

}  // namespace craft
