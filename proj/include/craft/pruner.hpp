// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "craft/codebook.hpp"

namespace craft {

// Corpus frequencies of first-level codebook IDs and the derived rarity
// weights that drive pruning quotas.
struct TokenStats {
    size_t entries = 0;               // codebook K
    std::vector<uint64_t> counts;     // per ID, size K
    uint64_t total = 0;               // sum of counts
    std::vector<double> p_dom;        // add-one smoothed, sums to 1
    std::vector<double> rho;          // 1 / p_dom
    std::vector<double> rho_hat;      // rho / max rho, in (0, 1]
    std::string source;               // dataset tag or "reference-corpus"

    // Recompute p_dom / rho / rho_hat from counts.
    void derive();
};

// Count first-level assignments over a corpus; add-one smoothing keeps unseen
// IDs finite and maximally rare.
TokenStats estimate_frequencies(const std::vector<QuantizedGrid>& corpus, size_t entries,
                                const std::string& source_tag);

// Text format: header "#CRFTFREQ01 total=<u64> K=<u32> source=<tag>" then one
// "id<TAB>count" line per nonzero ID; loader re-derives the weights.
void save_token_stats(const TokenStats& stats, const std::string& path);
TokenStats load_token_stats(const std::string& path);

// m_k = min(n_k, ceil(n_k * rho_hat_k^gamma)) for n_k > 0, else 0.
std::vector<uint64_t> allocate_quotas(const std::vector<uint64_t>& n,
                                      const std::vector<double>& rho_hat, double gamma);

struct GammaResult {
    double gamma = 0.0;
    uint64_t kept = 0;
    bool capped = false;  // budget unreachable even at the gamma cap
};

// Smallest gamma >= 0 (tolerance 1e-6) with total kept <= budget, found by
// doubling the bracket then bisecting; the kept total is nonincreasing in
// gamma because rho_hat <= 1. Cap at gamma = 64 (then capped = true if still
// over budget).
GammaResult solve_gamma(const std::vector<uint64_t>& n, const std::vector<double>& rho_hat,
                        uint64_t budget);

// Keep quota positions for one ID: rank by 0.5*rankfrac(residual energy, desc)
// + 0.5*rankfrac(isolation, desc); ties keep the smaller raster position.
// Isolation is the mean grid distance to the min(3, n_k-1) nearest same-ID
// tokens (+inf when the ID appears once).
std::vector<size_t> within_id_select(const std::vector<size_t>& positions,
                                     const std::vector<double>& energies, size_t quota,
                                     size_t grid_width, size_t grid_height);

struct PruneRequest {
    double keep_ratio = 1.0;   // used when budget == 0
    uint64_t budget = 0;       // explicit M; 0 means derive from keep_ratio
};

struct PruneResult {
    std::vector<size_t> kept;        // raster positions, strictly increasing
    double gamma = 0.0;
    bool clamped = false;            // budget raised to cover present IDs, or gamma capped
    uint64_t budget = 0;             // effective M after clamping
    std::map<uint32_t, uint64_t> id_counts;  // n_k for present IDs
    std::map<uint32_t, uint64_t> id_quotas;  // m_k for present IDs
};

// Full pipeline: budget from the request, gamma search, per-ID quotas,
// within-ID selection, raster-order emission.
PruneResult prune(const QuantizedGrid& grid, const TokenStats& stats, const PruneRequest& req);

// The kept rows of the dequantized grid, in raster order, re-indexed
// contiguously for the LM.
std::vector<double> gather_kept_rows(const QuantizedGrid& grid, const std::vector<size_t>& kept);

}  // namespace craft
