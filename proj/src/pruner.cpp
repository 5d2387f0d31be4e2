// SPDX-License-Identifier: Apache-2.0
#include "craft/pruner.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "craft/error.hpp"
#include "craft/util.hpp"

namespace craft {

void TokenStats::derive() {
    if (entries == 0) throw ArgumentError("token stats: entries must be positive");
    if (counts.size() != entries) throw ArgumentError("token stats: counts size mismatch");
    total = 0;
    for (uint64_t c : counts) total += c;
    p_dom.resize(entries);
    rho.resize(entries);
    rho_hat.resize(entries);
    double denom = double(total) + double(entries);
    double max_rho = 0.0;
    for (size_t k = 0; k < entries; ++k) {
        p_dom[k] = (double(counts[k]) + 1.0) / denom;  // add-one smoothing
        rho[k] = 1.0 / p_dom[k];
        max_rho = std::max(max_rho, rho[k]);
    }
    for (size_t k = 0; k < entries; ++k) rho_hat[k] = rho[k] / max_rho;
}

TokenStats estimate_frequencies(const std::vector<QuantizedGrid>& corpus, size_t entries,
                                const std::string& source_tag) {
    if (corpus.empty()) throw ArgumentError("estimate_frequencies: empty corpus");
    TokenStats stats;
    stats.entries = entries;
    stats.counts.assign(entries, 0);
    stats.source = source_tag;
    for (const auto& grid : corpus) {
        for (size_t p = 0; p < grid.patches(); ++p) {
            uint32_t id = grid.first_level_id(p);
            if (id >= entries) {
                throw ArgumentError("estimate_frequencies: token ID exceeds codebook size");
            }
            stats.counts[id]++;
        }
    }
    stats.derive();
    return stats;
}

void save_token_stats(const TokenStats& stats, const std::string& path) {
    std::ostringstream out;
    out << "#CRFTFREQ01 total=" << stats.total << " K=" << stats.entries
        << " source=" << stats.source << "\n";
    for (size_t k = 0; k < stats.entries; ++k) {
        if (stats.counts[k] > 0) out << k << "\t" << stats.counts[k] << "\n";
    }
    write_file_atomic(path, out.str());
}

TokenStats load_token_stats(const std::string& path) {
    auto bytes = read_file(path);
    std::string text(bytes.begin(), bytes.end());
    std::istringstream in(text);
    std::string header;
    if (!std::getline(in, header) || header.rfind("#CRFTFREQ01 ", 0) != 0) {
        throw FormatError("token stats: bad header (expected #CRFTFREQ01): " + path);
    }
    TokenStats stats;
    uint64_t declared_total = 0;
    bool have_total = false, have_k = false;
    std::istringstream hs(header.substr(12));
    std::string field;
    while (hs >> field) {
        auto eq = field.find('=');
        if (eq == std::string::npos) throw FormatError("token stats: bad header field: " + field);
        std::string key = field.substr(0, eq), value = field.substr(eq + 1);
        if (key == "total") {
            declared_total = std::stoull(value);
            have_total = true;
        } else if (key == "K") {
            stats.entries = std::stoul(value);
            have_k = true;
        } else if (key == "source") {
            stats.source = value;
        }
    }
    if (!have_total || !have_k || stats.entries == 0) {
        throw FormatError("token stats: header missing total/K: " + path);
    }
    stats.counts.assign(stats.entries, 0);
    std::string line;
    size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        auto tab = line.find('\t');
        if (tab == std::string::npos) {
            throw FormatError("token stats: line " + std::to_string(line_no) + " missing tab");
        }
        uint64_t id = std::stoull(line.substr(0, tab));
        uint64_t count = std::stoull(line.substr(tab + 1));
        if (id >= stats.entries) {
            throw FormatError("token stats: id out of range on line " + std::to_string(line_no));
        }
        stats.counts[id] = count;
    }
    stats.derive();
    if (stats.total != declared_total) {
        throw FormatError("token stats: counts do not sum to the declared total: " + path);
    }
    return stats;
}

std::vector<uint64_t> allocate_quotas(const std::vector<uint64_t>& n,
                                      const std::vector<double>& rho_hat, double gamma) {
    if (gamma < 0.0 || !std::isfinite(gamma)) {
        throw ArgumentError("allocate_quotas: gamma must be nonnegative");
    }
    if (n.size() != rho_hat.size()) {
        throw ArgumentError("allocate_quotas: counts/weights size mismatch");
    }
    std::vector<uint64_t> m(n.size(), 0);
    for (size_t k = 0; k < n.size(); ++k) {
        if (n[k] == 0) continue;
        double x = double(n[k]) * std::pow(rho_hat[k], gamma);
        // ceil with a small slack so 90 * 0.1 etc. lands on the intended
        // integer; the positive-count floor keeps every present ID alive.
        uint64_t q = uint64_t(std::ceil(x - 1e-9));
        q = std::max<uint64_t>(q, 1);
        m[k] = std::min<uint64_t>(q, n[k]);
    }
    return m;
}

namespace {

uint64_t kept_total(const std::vector<uint64_t>& n, const std::vector<double>& rho_hat,
                    double gamma) {
    auto m = allocate_quotas(n, rho_hat, gamma);
    uint64_t total = 0;
    for (uint64_t q : m) total += q;
    return total;
}

}  // namespace

GammaResult solve_gamma(const std::vector<uint64_t>& n, const std::vector<double>& rho_hat,
                        uint64_t budget) {
    constexpr double kGammaCap = 64.0;
    constexpr double kTol = 1e-6;

    size_t present = 0;
    for (uint64_t c : n) present += (c > 0);
    if (budget < present) {
        throw ContractError("solve_gamma: budget below the number of present IDs");
    }

    uint64_t at_zero = kept_total(n, rho_hat, 0.0);
    if (at_zero <= budget) return {0.0, at_zero, false};

    double lo = 0.0, hi = 1.0;
    while (kept_total(n, rho_hat, hi) > budget && hi < kGammaCap) {
        lo = hi;
        hi = std::min(hi * 2.0, kGammaCap);
    }
    uint64_t at_hi = kept_total(n, rho_hat, hi);
    if (at_hi > budget) {
        // Unreachable budget (e.g. every weight is 1): clamp at the cap.
        return {kGammaCap, at_hi, true};
    }
    while (hi - lo > kTol) {
        double mid = 0.5 * (lo + hi);
        if (kept_total(n, rho_hat, mid) <= budget) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    return {hi, kept_total(n, rho_hat, hi), false};
}

namespace {

// Fraction of strictly smaller values; descending ranks map the largest value
// to 1. Equal values share a rank fraction.
std::vector<double> rankfrac_desc(const std::vector<double>& values) {
    size_t n = values.size();
    std::vector<double> rf(n, 1.0);
    if (n <= 1) return rf;
    for (size_t i = 0; i < n; ++i) {
        size_t below = 0;
        for (size_t j = 0; j < n; ++j) {
            if (values[j] < values[i]) ++below;
        }
        rf[i] = double(below) / double(n - 1);
    }
    return rf;
}

}  // namespace

std::vector<size_t> within_id_select(const std::vector<size_t>& positions,
                                     const std::vector<double>& energies, size_t quota,
                                     size_t grid_width, size_t grid_height) {
    size_t n = positions.size();
    if (energies.size() != n) throw ArgumentError("within_id_select: positions/energies mismatch");
    if (quota < 1 || quota > n) throw ArgumentError("within_id_select: quota out of range");
    for (size_t p : positions) {
        if (p >= grid_width * grid_height) {
            throw ArgumentError("within_id_select: position outside the grid");
        }
    }
    if (quota == n) {
        std::vector<size_t> all = positions;
        std::sort(all.begin(), all.end());
        return all;
    }

    // Isolation: mean distance to the min(3, n-1) nearest same-ID tokens.
    std::vector<double> iso(n, std::numeric_limits<double>::infinity());
    if (n > 1) {
        size_t neighbors = std::min<size_t>(3, n - 1);
        for (size_t i = 0; i < n; ++i) {
            std::vector<double> dists;
            dists.reserve(n - 1);
            double ri = double(positions[i] / grid_width);
            double ci = double(positions[i] % grid_width);
            for (size_t j = 0; j < n; ++j) {
                if (j == i) continue;
                double dr = ri - double(positions[j] / grid_width);
                double dc = ci - double(positions[j] % grid_width);
                dists.push_back(std::sqrt(dr * dr + dc * dc));
            }
            std::sort(dists.begin(), dists.end());
            double sum = 0.0;
            for (size_t k = 0; k < neighbors; ++k) sum += dists[k];
            iso[i] = sum / double(neighbors);
        }
    }

    std::vector<double> rf_e = rankfrac_desc(energies);
    std::vector<double> rf_iso = rankfrac_desc(iso);
    std::vector<size_t> order(n);
    for (size_t i = 0; i < n; ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
        double sa = 0.5 * rf_e[a] + 0.5 * rf_iso[a];
        double sb = 0.5 * rf_e[b] + 0.5 * rf_iso[b];
        if (sa != sb) return sa > sb;
        return positions[a] < positions[b];
    });
    std::vector<size_t> kept;
    for (size_t i = 0; i < quota; ++i) kept.push_back(positions[order[i]]);
    std::sort(kept.begin(), kept.end());
    return kept;
}

PruneResult prune(const QuantizedGrid& grid, const TokenStats& stats, const PruneRequest& req) {
    size_t n_tokens = grid.patches();
    if (n_tokens == 0) throw ArgumentError("prune: empty grid");

    std::vector<uint64_t> counts(stats.entries, 0);
    for (size_t p = 0; p < n_tokens; ++p) {
        uint32_t id = grid.first_level_id(p);
        if (id >= stats.entries) throw ArgumentError("prune: stats do not cover this codebook");
        counts[id]++;
    }
    size_t present = 0;
    for (uint64_t c : counts) present += (c > 0);

    uint64_t budget;
    if (req.budget > 0) {
        budget = std::min<uint64_t>(req.budget, n_tokens);
    } else {
        if (!(req.keep_ratio > 0.0) || req.keep_ratio > 1.0) {
            throw ArgumentError("prune: keep ratio must be in (0, 1]");
        }
        budget = uint64_t(std::llround(req.keep_ratio * double(n_tokens)));
    }

    PruneResult result;
    if (budget < present) {
        budget = present;
        result.clamped = true;
    }
    result.budget = budget;

    GammaResult gr = solve_gamma(counts, stats.rho_hat, budget);
    result.gamma = gr.gamma;
    if (gr.capped) result.clamped = true;

    auto quotas = allocate_quotas(counts, stats.rho_hat, gr.gamma);
    for (size_t k = 0; k < stats.entries; ++k) {
        if (counts[k] == 0) continue;
        result.id_counts[uint32_t(k)] = counts[k];
        result.id_quotas[uint32_t(k)] = quotas[k];

        std::vector<size_t> positions;
        std::vector<double> energies;
        for (size_t p = 0; p < n_tokens; ++p) {
            if (grid.first_level_id(p) == k) {
                positions.push_back(p);
                energies.push_back(grid.residual_energy[p]);
            }
        }
        auto kept = within_id_select(positions, energies, quotas[k], grid.width, grid.height);
        result.kept.insert(result.kept.end(), kept.begin(), kept.end());
    }
    std::sort(result.kept.begin(), result.kept.end());
    return result;
}

std::vector<double> gather_kept_rows(const QuantizedGrid& grid, const std::vector<size_t>& kept) {
    std::vector<double> out;
    out.reserve(kept.size() * grid.dim);
    for (size_t p : kept) {
        const double* row = grid.dequantized.data() + p * grid.dim;
        out.insert(out.end(), row, row + grid.dim);
    }
    return out;
}

}  // namespace craft
