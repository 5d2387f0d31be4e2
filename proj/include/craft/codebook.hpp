// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "craft/tensor.hpp"
#include "craft/util.hpp"

namespace craft {

// Grid of continuous patch features (row-major raster order: n = row*W + col).
struct FeatureGrid {
    size_t width = 0;
    size_t height = 0;
    size_t dim = 0;
    std::vector<double> data;  // patches * dim

    FeatureGrid() = default;
    FeatureGrid(size_t w, size_t h, size_t d)
        : width(w), height(h), dim(d), data(w * h * d, 0.0) {}

    size_t patches() const { return width * height; }
    double* patch(size_t n) { return data.data() + n * dim; }
    const double* patch(size_t n) const { return data.data() + n * dim; }
};

// Frozen multi-level residual quantizer codebook. Codewords are binary32 at
// rest (file format and in memory); arithmetic promotes to binary64.
class Codebook {
  public:
    Codebook() = default;
    Codebook(size_t levels, size_t entries, size_t dim);

    size_t levels() const { return levels_; }
    size_t entries() const { return entries_; }
    size_t dim() const { return dim_; }

    float* codeword(size_t level, size_t k);
    const float* codeword(size_t level, size_t k) const;

    // CRC-32 of the serialized payload (header fields + codewords); doubles
    // as the codebook identity carried by checkpoints and stats files.
    uint32_t crc32() const;

    // Serialized payload bytes (everything between magic and trailing CRC).
    std::vector<uint8_t> payload_bytes() const;

    static constexpr size_t kMaxLevels = 4;

  private:
    size_t levels_ = 0;
    size_t entries_ = 0;
    size_t dim_ = 0;
    std::vector<float> codewords_;  // level-major, entry-major, dim-minor
};

// Per-patch quantization result for one image.
struct QuantizedGrid {
    size_t width = 0;
    size_t height = 0;
    size_t dim = 0;
    size_t levels = 0;
    std::vector<uint32_t> indices;    // patches * levels, level-minor per patch
    std::vector<double> dequantized;  // patches * dim, sum of chosen codewords
    std::vector<double> residual_energy;  // patches, vs the level-1 codeword only

    size_t patches() const { return width * height; }
    uint32_t index(size_t patch, size_t level) const { return indices[patch * levels + level]; }
    // First-level codebook ID; the unit pruning and frequency stats operate on.
    uint32_t first_level_id(size_t patch) const { return indices[patch * levels]; }
};

// Exhaustive nearest-entry search at one level; ties break to the smaller
// index. Returns (index, squared L2 distance).
std::pair<uint32_t, double> nearest_entry(const double* v, size_t dim, size_t level,
                                          const Codebook& cb);

// Multi-level residual encoding: level 1 quantizes the feature, each later
// level quantizes the remaining residual; dequantized = sum of codewords.
QuantizedGrid rq_encode(const FeatureGrid& z, const Codebook& cb);

// Recompute the codeword sum from stored indices (bit-exact vs rq_encode).
std::vector<double> dequantize(const QuantizedGrid& q, const Codebook& cb);

// Straight-through quantization: forward equals rq_encode's codeword sums,
// backward passes gradients to z unchanged (identity Jacobian).
Tensor ste_quantize(const Tensor& z, size_t width, size_t height, const Codebook& cb,
                    QuantizedGrid* out_grid = nullptr);

// Mean over patches and dims of ||z - sg[q(z)]||^2; gradient reaches only z.
Tensor commitment_loss(const Tensor& z, size_t width, size_t height, const Codebook& cb);

struct FitOptions {
    size_t max_iterations = 50;
    double shift_tolerance = 1e-6;
};

// Per-level k-means (k-means++ init, seeded) on the residuals left by the
// previous levels. The result is frozen by construction: nothing in the
// training path ever mutates a Codebook.
Codebook fit_codebook(const std::vector<FeatureGrid>& corpus, size_t levels, size_t entries,
                      uint64_t seed, const FitOptions& opts = {});

// Uniformly subsample entries per level (seeded, without replacement),
// keeping max(2, round(fraction*K)) entries. Returns the derived codebook;
// parent identity is the source codebook's crc32().
Codebook subsample_codebook(const Codebook& cb, double fraction, uint64_t seed);

// Little-endian binary file: magic "CRFTCB01", u32 L, u32 K, u32 d,
// L*K*d binary32 codewords, trailing CRC-32 of the payload.
void save_codebook(const Codebook& cb, const std::string& path);
Codebook load_codebook(const std::string& path);

}  // namespace craft
