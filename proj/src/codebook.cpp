// SPDX-License-Identifier: Apache-2.0
#include "craft/codebook.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <numeric>

#include "craft/error.hpp"

namespace craft {

namespace {

constexpr char kMagic[8] = {'C', 'R', 'F', 'T', 'C', 'B', '0', '1'};

double sq_dist(const double* a, const double* b, size_t d) {
    double s = 0.0;
    for (size_t i = 0; i < d; ++i) {
        double diff = a[i] - b[i];
        s += diff * diff;
    }
    return s;
}

double sq_dist_f32(const double* a, const float* b, size_t d) {
    double s = 0.0;
    for (size_t i = 0; i < d; ++i) {
        double diff = a[i] - static_cast<double>(b[i]);
        s += diff * diff;
    }
    return s;
}

}  // namespace

Codebook::Codebook(size_t levels, size_t entries, size_t dim)
    : levels_(levels), entries_(entries), dim_(dim), codewords_(levels * entries * dim, 0.0f) {
    if (levels == 0 || levels > kMaxLevels) {
        throw ArgumentError("codebook: level count must be in [1, 4]");
    }
    if (entries == 0 || dim == 0) throw ArgumentError("codebook: entries and dim must be positive");
}

float* Codebook::codeword(size_t level, size_t k) {
    return codewords_.data() + (level * entries_ + k) * dim_;
}

const float* Codebook::codeword(size_t level, size_t k) const {
    return codewords_.data() + (level * entries_ + k) * dim_;
}

std::vector<uint8_t> Codebook::payload_bytes() const {
    ByteWriter w;
    w.u32(static_cast<uint32_t>(levels_));
    w.u32(static_cast<uint32_t>(entries_));
    w.u32(static_cast<uint32_t>(dim_));
    for (float f : codewords_) w.f32(f);
    return w.data();
}

uint32_t Codebook::crc32() const {
    return craft::crc32(payload_bytes());
}

std::pair<uint32_t, double> nearest_entry(const double* v, size_t dim, size_t level,
                                          const Codebook& cb) {
    if (level >= cb.levels()) throw ArgumentError("nearest_entry: level out of range");
    if (dim != cb.dim()) throw DimensionError("nearest_entry: vector dim does not match codebook");
    uint32_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (size_t k = 0; k < cb.entries(); ++k) {
        double d = sq_dist_f32(v, cb.codeword(level, k), dim);
        if (d < best_d) {  // strict < keeps the smallest index on ties
            best_d = d;
            best = static_cast<uint32_t>(k);
        }
    }
    return {best, best_d};
}

QuantizedGrid rq_encode(const FeatureGrid& z, const Codebook& cb) {
    if (z.dim != cb.dim()) throw DimensionError("rq_encode: feature dim does not match codebook");
    const size_t n = z.patches();
    const size_t d = z.dim;
    const size_t levels = cb.levels();

    QuantizedGrid q;
    q.width = z.width;
    q.height = z.height;
    q.dim = d;
    q.levels = levels;
    q.indices.resize(n * levels);
    q.dequantized.assign(n * d, 0.0);
    q.residual_energy.resize(n);

    std::vector<double> residual(d);
    for (size_t p = 0; p < n; ++p) {
        std::memcpy(residual.data(), z.patch(p), d * sizeof(double));
        for (size_t level = 0; level < levels; ++level) {
            auto [idx, dist] = nearest_entry(residual.data(), d, level, cb);
            q.indices[p * levels + level] = idx;
            if (level == 0) q.residual_energy[p] = dist;
            const float* c = cb.codeword(level, idx);
            for (size_t i = 0; i < d; ++i) residual[i] -= static_cast<double>(c[i]);
        }
        // Codeword sum accumulated in level order, identically to dequantize().
        double* out = q.dequantized.data() + p * d;
        for (size_t level = 0; level < levels; ++level) {
            const float* c = cb.codeword(level, q.indices[p * levels + level]);
            for (size_t i = 0; i < d; ++i) out[i] += static_cast<double>(c[i]);
        }
    }
    return q;
}

std::vector<double> dequantize(const QuantizedGrid& q, const Codebook& cb) {
    if (q.dim != cb.dim() || q.levels != cb.levels()) {
        throw DimensionError("dequantize: grid does not match codebook geometry");
    }
    std::vector<double> out(q.patches() * q.dim, 0.0);
    for (size_t p = 0; p < q.patches(); ++p) {
        double* dst = out.data() + p * q.dim;
        for (size_t level = 0; level < q.levels; ++level) {
            const float* c = cb.codeword(level, q.index(p, level));
            for (size_t i = 0; i < q.dim; ++i) dst[i] += static_cast<double>(c[i]);
        }
    }
    return out;
}

namespace {

FeatureGrid grid_from_tensor(const Tensor& z, size_t width, size_t height) {
    const auto& shape = z.shape();
    if (shape.size() != 2 || shape[0] != width * height) {
        throw DimensionError("quantize: tensor shape does not match the W*H grid");
    }
    FeatureGrid g(width, height, shape[1]);
    g.data = z.value();
    return g;
}

}  // namespace

Tensor ste_quantize(const Tensor& z, size_t width, size_t height, const Codebook& cb,
                    QuantizedGrid* out_grid) {
    FeatureGrid g = grid_from_tensor(z, width, height);
    QuantizedGrid q = rq_encode(g, cb);
    if (out_grid) *out_grid = q;

    uint32_t zid = z.id();
    auto bw = [zid](Tape& t, uint32_t self) {
        if (!t.node(zid).requires_grad) return;
        const auto& grad = t.node(self).grad;
        auto& gz = t.grad_buf(zid);
        for (size_t i = 0; i < grad.size(); ++i) gz[i] += grad[i];
    };
    return z.tape()->make_node(z.shape(), std::move(q.dequantized), {z}, bw, "ste_quantize");
}

Tensor commitment_loss(const Tensor& z, size_t width, size_t height, const Codebook& cb) {
    FeatureGrid g = grid_from_tensor(z, width, height);
    QuantizedGrid q = rq_encode(g, cb);
    // The quantized branch enters as a constant: stop-gradient by construction.
    Tensor target = z.tape()->constant(z.shape(), std::move(q.dequantized));
    return scale(squared_l2(z, target), 1.0 / static_cast<double>(z.size()));
}

namespace {

// Lloyd iterations with k-means++ init on rows of `points` (m x d, f64).
// Deterministic given rng; ties break to the smaller index everywhere.
std::vector<double> kmeans(const std::vector<double>& points, size_t m, size_t d, size_t k,
                           Rng& rng, const FitOptions& opts) {
    std::vector<double> centers(k * d);
    std::vector<double> min_d2(m, std::numeric_limits<double>::infinity());

    // k-means++ seeding.
    size_t first = static_cast<size_t>(rng.randint(m));
    std::memcpy(centers.data(), points.data() + first * d, d * sizeof(double));
    for (size_t c = 1; c < k; ++c) {
        const double* prev = centers.data() + (c - 1) * d;
        double total = 0.0;
        for (size_t i = 0; i < m; ++i) {
            double dist = sq_dist(points.data() + i * d, prev, d);
            if (dist < min_d2[i]) min_d2[i] = dist;
            total += min_d2[i];
        }
        size_t chosen = 0;
        if (total > 0.0) {
            double target = rng.uniform() * total;
            double acc = 0.0;
            for (size_t i = 0; i < m; ++i) {
                acc += min_d2[i];
                if (acc >= target) {
                    chosen = i;
                    break;
                }
            }
        } else {
            chosen = static_cast<size_t>(rng.randint(m));
        }
        std::memcpy(centers.data() + c * d, points.data() + chosen * d, d * sizeof(double));
    }

    std::vector<size_t> assign(m, 0);
    std::vector<size_t> counts(k, 0);
    std::vector<double> sums(k * d, 0.0);
    for (size_t iter = 0; iter < opts.max_iterations; ++iter) {
        for (size_t i = 0; i < m; ++i) {
            const double* x = points.data() + i * d;
            size_t best = 0;
            double best_d = std::numeric_limits<double>::infinity();
            for (size_t c = 0; c < k; ++c) {
                double dist = sq_dist(x, centers.data() + c * d, d);
                if (dist < best_d) {
                    best_d = dist;
                    best = c;
                }
            }
            assign[i] = best;
        }

        std::fill(counts.begin(), counts.end(), 0);
        std::fill(sums.begin(), sums.end(), 0.0);
        for (size_t i = 0; i < m; ++i) {
            counts[assign[i]]++;
            const double* x = points.data() + i * d;
            double* s = sums.data() + assign[i] * d;
            for (size_t j = 0; j < d; ++j) s[j] += x[j];
        }

        // Empty clusters steal the point farthest from its current center.
        for (size_t c = 0; c < k; ++c) {
            if (counts[c] > 0) continue;
            size_t far_i = 0;
            double far_d = -1.0;
            for (size_t i = 0; i < m; ++i) {
                if (counts[assign[i]] <= 1) continue;
                double dist = sq_dist(points.data() + i * d, centers.data() + assign[i] * d, d);
                if (dist > far_d) {
                    far_d = dist;
                    far_i = i;
                }
            }
            size_t old = assign[far_i];
            counts[old]--;
            const double* x = points.data() + far_i * d;
            double* so = sums.data() + old * d;
            double* sc = sums.data() + c * d;
            for (size_t j = 0; j < d; ++j) {
                so[j] -= x[j];
                sc[j] += x[j];
            }
            assign[far_i] = c;
            counts[c] = 1;
        }

        double max_shift2 = 0.0;
        for (size_t c = 0; c < k; ++c) {
            double* ctr = centers.data() + c * d;
            double shift2 = 0.0;
            for (size_t j = 0; j < d; ++j) {
                double next = sums[c * d + j] / static_cast<double>(counts[c]);
                double diff = next - ctr[j];
                shift2 += diff * diff;
                ctr[j] = next;
            }
            max_shift2 = std::max(max_shift2, shift2);
        }
        if (std::sqrt(max_shift2) < opts.shift_tolerance) break;
    }
    return centers;
}

size_t distinct_rows(const std::vector<double>& points, size_t m, size_t d) {
    std::vector<size_t> order(m);
    std::iota(order.begin(), order.end(), 0);
    auto cmp = [&](size_t a, size_t b) {
        return std::lexicographical_compare(points.data() + a * d, points.data() + (a + 1) * d,
                                            points.data() + b * d, points.data() + (b + 1) * d);
    };
    std::sort(order.begin(), order.end(), cmp);
    size_t distinct = m == 0 ? 0 : 1;
    for (size_t i = 1; i < m; ++i) {
        if (std::memcmp(points.data() + order[i - 1] * d, points.data() + order[i] * d,
                        d * sizeof(double)) != 0) {
            ++distinct;
        }
    }
    return distinct;
}

}  // namespace

Codebook fit_codebook(const std::vector<FeatureGrid>& corpus, size_t levels, size_t entries,
                      uint64_t seed, const FitOptions& opts) {
    if (corpus.empty()) throw ArgumentError("fit_codebook: empty corpus");
    const size_t d = corpus[0].dim;
    size_t m = 0;
    for (const auto& g : corpus) {
        if (g.dim != d) throw DimensionError("fit_codebook: mixed feature dims in corpus");
        m += g.patches();
    }
    std::vector<double> residuals;
    residuals.reserve(m * d);
    for (const auto& g : corpus) {
        residuals.insert(residuals.end(), g.data.begin(), g.data.end());
    }

    Codebook cb(levels, entries, d);
    Rng rng = Rng(seed).substream("fit-codebook");
    for (size_t level = 0; level < levels; ++level) {
        if (distinct_rows(residuals, m, d) < entries) {
            throw ArgumentError("fit_codebook: K exceeds distinct vectors at level " +
                                std::to_string(level + 1));
        }
        Rng level_rng = rng.substream("level" + std::to_string(level));
        std::vector<double> centers = kmeans(residuals, m, d, entries, level_rng, opts);
        for (size_t k = 0; k < entries; ++k) {
            float* cw = cb.codeword(level, k);
            for (size_t j = 0; j < d; ++j) cw[j] = static_cast<float>(centers[k * d + j]);
        }
        // Residuals against the stored (binary32) codewords, matching encode-time behavior.
        for (size_t i = 0; i < m; ++i) {
            double* r = residuals.data() + i * d;
            auto [idx, dist] = nearest_entry(r, d, level, cb);
            (void)dist;
            const float* c = cb.codeword(level, idx);
            for (size_t j = 0; j < d; ++j) r[j] -= static_cast<double>(c[j]);
        }
    }
    return cb;
}

Codebook subsample_codebook(const Codebook& cb, double fraction, uint64_t seed) {
    if (!(fraction > 0.0) || fraction > 1.0) {
        throw ArgumentError("subsample_codebook: fraction must be in (0, 1]");
    }
    size_t keep = static_cast<size_t>(std::llround(fraction * static_cast<double>(cb.entries())));
    if (keep < 2) throw ArgumentError("subsample_codebook: fraction yields fewer than 2 entries");
    if (keep >= cb.entries()) return cb;

    Codebook out(cb.levels(), keep, cb.dim());
    Rng rng = Rng(seed).substream("subsample-codebook");
    for (size_t level = 0; level < cb.levels(); ++level) {
        Rng lr = rng.substream("level" + std::to_string(level));
        std::vector<size_t> ids(cb.entries());
        std::iota(ids.begin(), ids.end(), 0);
        lr.shuffle(ids);
        ids.resize(keep);
        std::sort(ids.begin(), ids.end());
        for (size_t k = 0; k < keep; ++k) {
            std::memcpy(out.codeword(level, k), cb.codeword(level, ids[k]),
                        cb.dim() * sizeof(float));
        }
    }
    return out;
}

void save_codebook(const Codebook& cb, const std::string& path) {
    ByteWriter w;
    w.bytes(kMagic, 8);
    std::vector<uint8_t> payload = cb.payload_bytes();
    w.bytes(payload.data(), payload.size());
    w.u32(craft::crc32(payload));
    write_file_atomic(path, w.data());
}

Codebook load_codebook(const std::string& path) {
    std::vector<uint8_t> bytes = read_file(path);
    if (bytes.size() < 8 || std::memcmp(bytes.data(), kMagic, 6) != 0) {
        throw FormatError("codebook file: bad magic (expected CRFTCB01): " + path);
    }
    if (std::memcmp(bytes.data() + 6, kMagic + 6, 2) != 0) {
        throw FormatError("codebook file: unsupported version (expected CRFTCB01): " + path);
    }
    if (bytes.size() < 8 + 12 + 4) throw FormatError("codebook file: truncated: " + path);

    ByteReader r(bytes);
    uint8_t magic[8];
    r.bytes(magic, 8);
    uint32_t levels = r.u32();
    uint32_t entries = r.u32();
    uint32_t dim = r.u32();
    if (levels == 0 || levels > Codebook::kMaxLevels || entries == 0 || dim == 0) {
        throw FormatError("codebook file: invalid geometry: " + path);
    }
    size_t n = static_cast<size_t>(levels) * entries * dim;
    if (r.remaining() != n * 4 + 4) throw FormatError("codebook file: truncated: " + path);

    Codebook cb(levels, entries, dim);
    for (size_t level = 0; level < levels; ++level) {
        for (size_t k = 0; k < entries; ++k) {
            float* cw = cb.codeword(level, k);
            for (size_t j = 0; j < dim; ++j) cw[j] = r.f32();
        }
    }
    uint32_t stored_crc = r.u32();
    uint32_t actual = craft::crc32(bytes.data() + 8, bytes.size() - 12);
    if (stored_crc != actual) throw FormatError("codebook file: payload CRC mismatch: " + path);
    return cb;
}

}  // namespace craft
