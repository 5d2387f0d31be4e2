// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>

#include "craft/error.hpp"
#include "craft/pruner.hpp"
#include "craft/util.hpp"

using namespace craft;

namespace {

// Grid with chosen first-level IDs and residual energies (levels = 1).
QuantizedGrid make_grid(size_t w, size_t h, const std::vector<uint32_t>& ids,
                        const std::vector<double>& energies, size_t dim = 2) {
    QuantizedGrid g;
    g.width = w;
    g.height = h;
    g.dim = dim;
    g.levels = 1;
    g.indices = ids;
    g.residual_energy = energies;
    g.dequantized.resize(w * h * dim);
    for (size_t p = 0; p < w * h; ++p) {
        for (size_t j = 0; j < dim; ++j) g.dequantized[p * dim + j] = double(ids[p]) + 0.1 * double(j);
    }
    return g;
}

TokenStats stats_from_counts(std::vector<uint64_t> counts, const std::string& tag = "test") {
    TokenStats s;
    s.entries = counts.size();
    s.counts = std::move(counts);
    s.source = tag;
    s.derive();
    return s;
}

uint64_t total_quota(const std::vector<uint64_t>& n, const std::vector<double>& rho_hat,
                     double gamma) {
    auto m = allocate_quotas(n, rho_hat, gamma);
    uint64_t t = 0;
    for (uint64_t q : m) t += q;
    return t;
}

}  // namespace

TEST_CASE("estimate_frequencies: hand arithmetic with add-one smoothing") {
    // Single image, all N=16 tokens ID 0, K=2.
    QuantizedGrid g = make_grid(4, 4, std::vector<uint32_t>(16, 0), std::vector<double>(16, 0.5));
    TokenStats s = estimate_frequencies({g}, 2, "single");
    double n = 16.0;
    CHECK(s.p_dom[0] == doctest::Approx((n + 1.0) / (n + 2.0)).epsilon(1e-15));
    CHECK(s.p_dom[1] == doctest::Approx(1.0 / (n + 2.0)).epsilon(1e-15));
    CHECK(s.rho_hat[1] == 1.0);  // unseen ID is the rarest
    CHECK(s.rho_hat[0] == doctest::Approx(s.p_dom[1] / s.p_dom[0]).epsilon(1e-12));
    CHECK(s.p_dom[0] + s.p_dom[1] == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("estimate_frequencies: uniform corpus gives rho_hat = 1 everywhere") {
    std::vector<uint32_t> ids(16);
    for (size_t i = 0; i < 16; ++i) ids[i] = uint32_t(i % 4);
    QuantizedGrid g = make_grid(4, 4, ids, std::vector<double>(16, 1.0));
    TokenStats s = estimate_frequencies({g, g}, 4, "uniform");
    for (double r : s.rho_hat) CHECK(r == 1.0);
    double sum = 0.0;
    for (double p : s.p_dom) sum += p;
    CHECK(std::abs(sum - 1.0) < 1e-9);
    CHECK_THROWS_AS(estimate_frequencies({}, 4, "x"), ArgumentError);
}

TEST_CASE("token stats file round trip and format errors") {
    TokenStats s = stats_from_counts({120, 0, 7, 3}, "leaf/general");
    auto path = (std::filesystem::temp_directory_path() / "craft_freq.txt").string();
    save_token_stats(s, path);

    TokenStats back = load_token_stats(path);
    CHECK(back.counts == s.counts);
    CHECK(back.total == s.total);
    CHECK(back.entries == s.entries);
    CHECK(back.source == "leaf/general");
    CHECK(back.rho_hat == s.rho_hat);

    write_file_atomic(path, std::string("#WRONG total=1 K=2 source=x\n"));
    CHECK_THROWS_AS(load_token_stats(path), FormatError);
    write_file_atomic(path, std::string("#CRFTFREQ01 total=5 K=2 source=x\n0\t4\n"));
    CHECK_THROWS_AS(load_token_stats(path), FormatError);  // counts don't sum to total
    std::filesystem::remove(path);
}

TEST_CASE("allocate_quotas: gamma=0 keeps all tokens") {
    std::vector<uint64_t> n = {5, 0, 17, 1};
    std::vector<double> rho = {0.2, 1.0, 0.01, 0.5};
    auto m = allocate_quotas(n, rho, 0.0);
    CHECK(m == n);
}

TEST_CASE("allocate_quotas: rho_hat=1 IDs are never pruned") {
    std::vector<uint64_t> n = {9, 30};
    std::vector<double> rho = {1.0, 0.3};
    for (double gamma : {0.0, 0.5, 1.0, 7.0, 64.0}) {
        auto m = allocate_quotas(n, rho, gamma);
        CHECK(m[0] == 9);
    }
}

TEST_CASE("allocate_quotas: hand value (90,10) x (0.1,1.0) at gamma=1") {
    auto m = allocate_quotas({90, 10}, {0.1, 1.0}, 1.0);
    CHECK(m[0] == 9);  // ceil(90 * 0.1)
    CHECK(m[1] == 10);
    CHECK_THROWS_AS(allocate_quotas({1}, {1.0}, -0.1), ArgumentError);
}

TEST_CASE("solve_gamma: no pruning needed when the budget covers everything") {
    std::vector<uint64_t> n = {40, 20, 4};
    std::vector<double> rho = {0.01, 0.2, 1.0};
    auto r = solve_gamma(n, rho, 64);
    CHECK(r.gamma == 0.0);
    CHECK(r.kept == 64);
    CHECK_FALSE(r.capped);
}

TEST_CASE("solve_gamma: all-ones weights clamp to keep-all at the cap") {
    std::vector<uint64_t> n = {30, 30, 4};
    std::vector<double> rho = {1.0, 1.0, 1.0};
    auto r = solve_gamma(n, rho, 32);
    CHECK(r.capped);
    CHECK(r.gamma == 64.0);
    CHECK(r.kept == 64);  // quotas constant in gamma
}

TEST_CASE("solve_gamma: budget below present IDs violates the contract") {
    CHECK_THROWS_AS(solve_gamma({5, 5, 5}, {1.0, 0.5, 0.2}, 2), ContractError);
}

TEST_CASE("solve_gamma matches a grid-search oracle on randomized instances") {
    Rng rng(55);
    const double grid_step = 0.001;
    for (int trial = 0; trial < 200; ++trial) {
        size_t k = 5;
        std::vector<uint64_t> n(k);
        std::vector<double> rho(k);
        uint64_t total = 0;
        for (size_t i = 0; i < k; ++i) {
            n[i] = rng.randint(30);
            rho[i] = rng.uniform(0.02, 0.999);
            total += n[i];
        }
        rho[rng.randint(k)] = 1.0;
        size_t present = 0;
        for (uint64_t c : n) present += (c > 0);
        if (total == 0) continue;
        uint64_t budget = present + rng.randint(total - present + 1);

        auto r = solve_gamma(n, rho, budget);
        CHECK(r.kept == total_quota(n, rho, r.gamma));

        if (r.capped) {
            // Even the cap cannot reach the budget.
            CHECK(total_quota(n, rho, 64.0) > budget);
            continue;
        }
        CHECK(r.kept <= budget);
        // Minimality within tolerance: just below gamma* is infeasible.
        if (r.gamma > 0.0) {
            CHECK(total_quota(n, rho, std::max(0.0, r.gamma - 1e-6)) > budget);
        }
        // Grid-search oracle: first feasible grid point.
        double grid_gamma = -1.0;
        for (double g = 0.0; g <= 64.0 + 1e-12; g += grid_step) {
            if (total_quota(n, rho, g) <= budget) {
                grid_gamma = g;
                break;
            }
        }
        REQUIRE(grid_gamma >= 0.0);
        CHECK(r.gamma <= grid_gamma + 1e-9);
        CHECK(r.gamma >= grid_gamma - grid_step - 1e-9);
        // The bisection total is the largest feasible total.
        CHECK(r.kept >= total_quota(n, rho, grid_gamma));
    }
}

TEST_CASE("within_id_select: quota == count keeps everything") {
    auto kept = within_id_select({5, 2, 9}, {1.0, 2.0, 3.0}, 3, 8, 8);
    CHECK(kept == std::vector<size_t>{2, 5, 9});
    CHECK_THROWS_AS(within_id_select({1, 2}, {1.0, 2.0}, 0, 8, 8), ArgumentError);
    CHECK_THROWS_AS(within_id_select({1, 2}, {1.0, 2.0}, 3, 8, 8), ArgumentError);
}

TEST_CASE("within_id_select: residual cue dominates when isolation ties") {
    // Two tokens: each one's isolation is the distance to the other -> equal.
    auto kept = within_id_select({10, 20}, {5.0, 1.0}, 1, 8, 8);
    CHECK(kept == std::vector<size_t>{10});
    auto kept2 = within_id_select({10, 20}, {1.0, 5.0}, 1, 8, 8);
    CHECK(kept2 == std::vector<size_t>{20});
}

namespace {

// Independent subset oracle: enumerate all quota-sized subsets, maximize the
// stated score (recomputed here from scratch), tie-break to the
// lexicographically smallest sorted position list.
std::vector<size_t> subset_oracle(const std::vector<size_t>& positions,
                                  const std::vector<double>& energies, size_t quota, size_t w) {
    size_t n = positions.size();
    auto rank_desc = [&](const std::vector<double>& vals) {
        std::vector<double> rf(n, 1.0);
        if (n <= 1) return rf;
        for (size_t i = 0; i < n; ++i) {
            size_t below = 0;
            for (size_t j = 0; j < n; ++j) below += (vals[j] < vals[i]);
            rf[i] = double(below) / double(n - 1);
        }
        return rf;
    };
    std::vector<double> iso(n, std::numeric_limits<double>::infinity());
    if (n > 1) {
        size_t neigh = std::min<size_t>(3, n - 1);
        for (size_t i = 0; i < n; ++i) {
            std::vector<double> d;
            for (size_t j = 0; j < n; ++j) {
                if (i == j) continue;
                double dr = double(positions[i] / w) - double(positions[j] / w);
                double dc = double(positions[i] % w) - double(positions[j] % w);
                d.push_back(std::sqrt(dr * dr + dc * dc));
            }
            std::sort(d.begin(), d.end());
            double s = 0.0;
            for (size_t k = 0; k < neigh; ++k) s += d[k];
            iso[i] = s / double(neigh);
        }
    }
    auto rf_e = rank_desc(energies);
    auto rf_i = rank_desc(iso);

    std::vector<size_t> best;
    double best_score = -1.0;
    std::vector<bool> mask(n, false);
    std::fill(mask.begin(), mask.begin() + ptrdiff_t(quota), true);
    // Enumerate via permutations of the mask.
    std::sort(mask.begin(), mask.end());
    do {
        double score = 0.0;
        std::vector<size_t> subset;
        for (size_t i = 0; i < n; ++i) {
            if (mask[i]) {
                score += 0.5 * rf_e[i] + 0.5 * rf_i[i];
                subset.push_back(positions[i]);
            }
        }
        std::sort(subset.begin(), subset.end());
        if (score > best_score + 1e-12 ||
            (std::abs(score - best_score) <= 1e-12 && subset < best)) {
            best_score = score;
            best = subset;
        }
    } while (std::next_permutation(mask.begin(), mask.end()));
    return best;
}

}  // namespace

TEST_CASE("within_id_select matches exhaustive subset enumeration") {
    Rng rng(77);
    for (int trial = 0; trial < 300; ++trial) {
        size_t n = 2 + rng.randint(4);  // 2..5 tokens
        std::vector<size_t> positions;
        while (positions.size() < n) {
            size_t p = rng.randint(64);
            if (std::find(positions.begin(), positions.end(), p) == positions.end()) {
                positions.push_back(p);
            }
        }
        std::vector<double> energies(n);
        for (double& e : energies) e = rng.uniform(0.0, 4.0);
        if (trial % 3 == 0 && n >= 2) energies[1] = energies[0];  // exercise ties
        size_t quota = 1 + rng.randint(n);

        auto got = within_id_select(positions, energies, quota, 8, 8);
        auto expect = subset_oracle(positions, energies, quota, 8);
        CHECK(got == expect);
    }
}

TEST_CASE("prune: keep ratio 1.0 keeps all tokens in raster order with gamma 0") {
    Rng rng(99);
    std::vector<uint32_t> ids(64);
    std::vector<double> energies(64);
    for (size_t i = 0; i < 64; ++i) {
        ids[i] = uint32_t(rng.randint(6));
        energies[i] = rng.uniform(0.0, 2.0);
    }
    QuantizedGrid g = make_grid(8, 8, ids, energies);
    TokenStats s = stats_from_counts({100, 50, 25, 12, 6, 3});

    PruneResult r = prune(g, s, {1.0, 0});
    CHECK(r.gamma == 0.0);
    CHECK_FALSE(r.clamped);
    REQUIRE(r.kept.size() == 64);
    for (size_t i = 0; i < 64; ++i) CHECK(r.kept[i] == i);

    // Downstream rows bit-identical to the unpruned grid.
    auto rows = gather_kept_rows(g, r.kept);
    CHECK(rows == g.dequantized);
}

TEST_CASE("prune: background/object hand trace (rarity protects the object)") {
    // 60 background tokens (ID 0) + 4 object tokens (ID 1, the rarest).
    std::vector<uint32_t> ids(64, 0);
    std::vector<size_t> object_pos = {18, 19, 26, 27};
    for (size_t p : object_pos) ids[p] = 1;
    std::vector<double> energies(64);
    Rng rng(7);
    for (double& e : energies) e = rng.uniform(0.0, 1.0);
    QuantizedGrid g = make_grid(8, 8, ids, energies);

    TokenStats s = stats_from_counts({10000, 40});
    CHECK(s.rho_hat[1] == 1.0);

    PruneResult r = prune(g, s, {0.5, 0});
    CHECK(r.budget == 32);
    CHECK(r.kept.size() <= 32);
    // All four object tokens kept (rho_hat = 1 quota never shrinks)...
    CHECK(r.id_quotas.at(1) == 4);
    for (size_t p : object_pos) {
        CHECK(std::find(r.kept.begin(), r.kept.end(), p) != r.kept.end());
    }
    // ...while the background is reduced to its quota: ceil(60 * rho0^gamma).
    CHECK(r.id_quotas.at(0) == r.kept.size() - 4);
    CHECK(r.id_quotas.at(0) < 60);
    double rho0 = s.rho_hat[0];
    uint64_t expect_bg = uint64_t(std::ceil(60.0 * std::pow(rho0, r.gamma) - 1e-9));
    CHECK(r.id_quotas.at(0) == expect_bg);
}

TEST_CASE("prune: fuzz invariants (budget, coverage, ordering, level-1 only)") {
    Rng rng(123);
    for (int trial = 0; trial < 200; ++trial) {
        size_t k = 2 + rng.randint(7);
        std::vector<uint32_t> ids(64);
        std::vector<double> energies(64);
        for (size_t i = 0; i < 64; ++i) {
            ids[i] = uint32_t(rng.randint(k));
            energies[i] = rng.uniform(0.0, 3.0);
        }
        QuantizedGrid g = make_grid(8, 8, ids, energies);
        std::vector<uint64_t> counts(k);
        for (uint64_t& c : counts) c = 1 + rng.randint(500);
        TokenStats s = stats_from_counts(counts);

        double ratio = rng.uniform(0.2, 1.0);
        PruneResult r = prune(g, s, {ratio, 0});

        if (!r.clamped) CHECK(r.kept.size() <= r.budget);
        // Every present ID keeps at least one token.
        for (const auto& [id, n] : r.id_counts) {
            CHECK(r.id_quotas.at(id) >= 1);
            CHECK(r.id_quotas.at(id) <= n);
        }
        // Strictly increasing raster order.
        for (size_t i = 1; i < r.kept.size(); ++i) CHECK(r.kept[i] > r.kept[i - 1]);
        // Sum of quotas equals kept size.
        uint64_t qsum = 0;
        for (const auto& [id, q] : r.id_quotas) qsum += q;
        CHECK(qsum == r.kept.size());

        // Pruning reads only first-level data: scrambling deeper levels of a
        // two-level grid must not change the result.
        QuantizedGrid g2 = g;
        g2.levels = 2;
        g2.indices.resize(64 * 2);
        for (size_t p = 0; p < 64; ++p) {
            g2.indices[p * 2] = ids[p];
            g2.indices[p * 2 + 1] = uint32_t(rng.randint(k));
        }
        PruneResult r2 = prune(g2, s, {ratio, 0});
        CHECK(r2.kept == r.kept);
        CHECK(r2.gamma == r.gamma);
    }
}

TEST_CASE("quota totals are nonincreasing in gamma; rarer IDs keep more") {
    Rng rng(321);
    for (int trial = 0; trial < 100; ++trial) {
        size_t k = 2 + rng.randint(6);
        std::vector<uint64_t> n(k);
        std::vector<double> rho(k);
        for (size_t i = 0; i < k; ++i) {
            n[i] = rng.randint(40);
            rho[i] = rng.uniform(0.01, 1.0);
        }
        rho[rng.randint(k)] = 1.0;

        uint64_t prev = total_quota(n, rho, 0.0);
        for (double gamma = 0.25; gamma <= 8.0; gamma += 0.25) {
            uint64_t cur = total_quota(n, rho, gamma);
            CHECK(cur <= prev);
            prev = cur;
        }

        // Rarity dominance at equal counts.
        std::vector<uint64_t> eq = {17, 17};
        std::vector<double> w = {rng.uniform(0.01, 1.0), rng.uniform(0.01, 1.0)};
        size_t rarer = w[0] >= w[1] ? 0 : 1;
        for (double gamma : {0.1, 0.7, 2.0, 11.0}) {
            auto m = allocate_quotas(eq, w, gamma);
            CHECK(m[rarer] >= m[1 - rarer]);
        }
    }
}
