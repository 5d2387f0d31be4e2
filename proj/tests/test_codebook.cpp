// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "craft/codebook.hpp"
#include "craft/error.hpp"
#include "craft/util.hpp"
#include "gradcheck.hpp"

using namespace craft;

namespace {

// Independent exhaustive reference: scans every entry per level on the
// running residual. Kept deliberately separate from the library path.
struct OracleResult {
    std::vector<uint32_t> indices;
    std::vector<double> sum;
};

OracleResult rq_oracle(const double* v, size_t d, const Codebook& cb) {
    OracleResult res;
    res.sum.assign(d, 0.0);
    std::vector<double> r(v, v + d);
    for (size_t level = 0; level < cb.levels(); ++level) {
        uint32_t best = 0;
        double best_d = 1e300;
        for (size_t k = 0; k < cb.entries(); ++k) {
            const float* c = cb.codeword(level, k);
            double dist = 0.0;
            for (size_t j = 0; j < d; ++j) {
                double diff = r[j] - double(c[j]);
                dist += diff * diff;
            }
            if (dist < best_d) {
                best_d = dist;
                best = uint32_t(k);
            }
        }
        res.indices.push_back(best);
        const float* c = cb.codeword(level, best);
        for (size_t j = 0; j < d; ++j) {
            r[j] -= double(c[j]);
            res.sum[j] += double(c[j]);
        }
    }
    return res;
}

Codebook random_codebook(size_t levels, size_t entries, size_t dim, uint64_t seed) {
    Codebook cb(levels, entries, dim);
    Rng rng(seed);
    for (size_t l = 0; l < levels; ++l) {
        double scl = std::pow(0.35, double(l));  // later levels finer
        for (size_t k = 0; k < entries; ++k) {
            float* c = cb.codeword(l, k);
            for (size_t j = 0; j < dim; ++j) c[j] = float(rng.normal(0.0, scl));
        }
    }
    return cb;
}

std::string temp_path(const char* name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_CASE("nearest_entry: codeword maps to itself") {
    Codebook cb = random_codebook(1, 16, 4, 3);
    std::vector<double> v(4);
    for (size_t j = 0; j < 4; ++j) v[j] = double(cb.codeword(0, 7)[j]);
    auto [idx, d2] = nearest_entry(v.data(), 4, 0, cb);
    CHECK(idx == 7);
    CHECK(d2 == 0.0);
}

TEST_CASE("nearest_entry: equidistant tie breaks to index 0") {
    Codebook cb(1, 2, 1);
    cb.codeword(0, 0)[0] = -1.0f;
    cb.codeword(0, 1)[0] = 1.0f;
    double v = 0.0;
    auto [idx, d2] = nearest_entry(&v, 1, 0, cb);
    CHECK(idx == 0);
    CHECK(d2 == 1.0);
}

TEST_CASE("nearest_entry: level out of range") {
    Codebook cb = random_codebook(2, 4, 3, 5);
    std::vector<double> v(3, 0.0);
    CHECK_THROWS_AS(nearest_entry(v.data(), 3, 2, cb), ArgumentError);
    CHECK_THROWS_AS(nearest_entry(v.data(), 2, 0, cb), DimensionError);
}

TEST_CASE("nearest_entry matches exhaustive scan, K=64 d=8") {
    Codebook cb = random_codebook(1, 64, 8, 11);
    Rng rng(12);
    for (int t = 0; t < 500; ++t) {
        std::vector<double> v(8);
        for (double& x : v) x = rng.normal();
        auto [idx, d2] = nearest_entry(v.data(), 8, 0, cb);
        OracleResult o = rq_oracle(v.data(), 8, cb);
        CHECK(idx == o.indices[0]);
        (void)d2;
    }
}

TEST_CASE("rq_encode with L=1 degenerates to per-patch nearest_entry") {
    Codebook cb = random_codebook(1, 32, 6, 21);
    Rng rng(22);
    FeatureGrid g(3, 2, 6);
    for (double& x : g.data) x = rng.normal();
    QuantizedGrid q = rq_encode(g, cb);
    for (size_t p = 0; p < g.patches(); ++p) {
        auto [idx, d2] = nearest_entry(g.patch(p), 6, 0, cb);
        CHECK(q.first_level_id(p) == idx);
        CHECK(q.residual_energy[p] == d2);
        for (size_t j = 0; j < 6; ++j) {
            CHECK(q.dequantized[p * 6 + j] == double(cb.codeword(0, idx)[j]));
        }
    }
}

TEST_CASE("rq_encode hand-built two-level example, oracle-recomputed") {
    // Levels {-1,+1} then {-0.25,+0.25}; z = 0.8.
    // Two-stage oracle: level 1 picks +1 (index 1), residual -0.2, level 2
    // picks -0.25 (index 0), codeword sum 0.75.
    Codebook cb(2, 2, 1);
    cb.codeword(0, 0)[0] = -1.0f;
    cb.codeword(0, 1)[0] = 1.0f;
    cb.codeword(1, 0)[0] = -0.25f;
    cb.codeword(1, 1)[0] = 0.25f;

    FeatureGrid g(1, 1, 1);
    g.data = {0.8};
    QuantizedGrid q = rq_encode(g, cb);

    OracleResult o = rq_oracle(g.data.data(), 1, cb);
    REQUIRE(o.indices == std::vector<uint32_t>{1, 0});
    CHECK(o.sum[0] == 0.75);

    CHECK(q.index(0, 0) == o.indices[0]);
    CHECK(q.index(0, 1) == o.indices[1]);
    CHECK(q.dequantized[0] == o.sum[0]);
    CHECK(q.residual_energy[0] == doctest::Approx(0.04).epsilon(1e-12));
}

TEST_CASE("rq_encode: exactly representable input leaves zero residual") {
    Codebook cb = random_codebook(2, 8, 4, 31);
    // Build z = c1_a + c2_b where c2_b is the nearest second-level entry to
    // z - c1_a by construction (residual equals c2_b exactly).
    size_t a = 3, b = 5;
    FeatureGrid g(1, 1, 4);
    for (size_t j = 0; j < 4; ++j) {
        g.data[j] = double(cb.codeword(0, a)[j]) + double(cb.codeword(1, b)[j]);
    }
    // Only valid if level 1 indeed picks `a`; enforce by moving other level-1
    // entries far away.
    for (size_t k = 0; k < 8; ++k) {
        if (k == a) continue;
        for (size_t j = 0; j < 4; ++j) cb.codeword(0, k)[j] += (k % 2 ? 50.0f : -50.0f);
    }
    QuantizedGrid q = rq_encode(g, cb);
    REQUIRE(q.index(0, 0) == a);
    REQUIRE(q.index(0, 1) == b);
    double final_res = 0.0;
    for (size_t j = 0; j < 4; ++j) {
        double diff = g.data[j] - q.dequantized[j];
        final_res += diff * diff;
    }
    CHECK(final_res == 0.0);
}

TEST_CASE("randomized rq_encode equals exhaustive two-stage oracle") {
    Rng rng(41);
    for (int t = 0; t < 200; ++t) {
        size_t levels = 1 + rng.randint(4);
        size_t entries = 2 + rng.randint(31);
        size_t dim = 1 + rng.randint(8);
        Codebook cb = random_codebook(levels, entries, dim, rng.next_u64());
        FeatureGrid g(2, 2, dim);
        for (double& x : g.data) x = rng.normal();
        QuantizedGrid q = rq_encode(g, cb);
        for (size_t p = 0; p < g.patches(); ++p) {
            OracleResult o = rq_oracle(g.patch(p), dim, cb);
            for (size_t l = 0; l < levels; ++l) CHECK(q.index(p, l) == o.indices[l]);
            for (size_t j = 0; j < dim; ++j) CHECK(q.dequantized[p * dim + j] == o.sum[j]);
        }
    }
}

TEST_CASE("dequantize reproduces stored codeword sums bit-exactly") {
    Codebook cb = random_codebook(3, 16, 5, 51);
    Rng rng(52);
    FeatureGrid g(4, 4, 5);
    for (double& x : g.data) x = rng.normal();
    QuantizedGrid q = rq_encode(g, cb);
    auto again = dequantize(q, cb);
    REQUIRE(again.size() == q.dequantized.size());
    for (size_t i = 0; i < again.size(); ++i) CHECK(again[i] == q.dequantized[i]);
}

TEST_CASE("ste_quantize: gradient of sum is all-ones; elementwise identity") {
    Codebook cb = random_codebook(2, 8, 3, 61);
    Rng rng(62);
    std::vector<double> zdata(6);
    for (double& x : zdata) x = rng.normal();

    Tape tape;
    Tensor z = tape.input({2, 3}, zdata);
    Tensor zq = ste_quantize(z, 2, 1, cb);
    tape.backward(sum_all(zq));
    for (double gv : z.grad()) CHECK(gv == 1.0);

    // grad w.r.t. z equals grad w.r.t. zq elementwise for any downstream scalar.
    Tape t2;
    Tensor z2 = t2.input({2, 3}, zdata);
    Tensor zq2 = ste_quantize(z2, 2, 1, cb);
    std::vector<double> w = {0.3, -1.2, 2.0, 0.7, -0.1, 0.9};
    Tensor loss = sum_all(mul(zq2, t2.constant({2, 3}, w)));
    t2.backward(loss);
    const auto& gz = z2.grad();
    const auto& gq = t2.node(zq2.id()).grad;
    REQUIRE(gq.size() == gz.size());
    for (size_t i = 0; i < gz.size(); ++i) CHECK(gz[i] == gq[i]);
}

TEST_CASE("ste_quantize: constant forward within a cell, nonzero STE gradient") {
    Codebook cb = random_codebook(1, 4, 2, 71);
    std::vector<double> zdata = {double(cb.codeword(0, 2)[0]) + 0.01,
                                 double(cb.codeword(0, 2)[1]) - 0.01};

    auto forward = [&](const std::vector<double>& zd) {
        Tape t;
        Tensor z = t.input({1, 2}, zd);
        return ste_quantize(z, 1, 1, cb).value();
    };
    auto base = forward(zdata);
    // Perturbations small enough not to flip the index: forward is constant.
    for (size_t i = 0; i < 2; ++i) {
        auto zp = zdata;
        zp[i] += 1e-6;
        auto out = forward(zp);
        CHECK(out == base);
    }
    // STE gradient is nonzero nonetheless.
    Tape t;
    Tensor z = t.input({1, 2}, zdata);
    t.backward(sum_all(ste_quantize(z, 1, 1, cb)));
    CHECK(z.grad()[0] == 1.0);
    CHECK(z.grad()[1] == 1.0);
}

TEST_CASE("commitment loss zero at codeword sums; hand value for z=0.8") {
    Codebook cb(2, 2, 1);
    cb.codeword(0, 0)[0] = -1.0f;
    cb.codeword(0, 1)[0] = 1.0f;
    cb.codeword(1, 0)[0] = -0.25f;
    cb.codeword(1, 1)[0] = 0.25f;

    {
        // q(0.8) = 0.75 per the two-stage oracle; loss = (0.8-0.75)^2 = 0.0025.
        Tape tape;
        Tensor z = tape.input({1, 1}, {0.8});
        Tensor loss = commitment_loss(z, 1, 1, cb);
        CHECK(loss.scalar() == doctest::Approx(0.0025).epsilon(1e-12));
    }
    {
        // Exactly a codeword sum -> zero.
        Tape tape;
        Tensor z = tape.input({1, 1}, {0.75});
        CHECK(commitment_loss(z, 1, 1, cb).scalar() == 0.0);
    }
}

TEST_CASE("commitment gradient is 2(z - q)/(N*d), matches finite differences") {
    Codebook cb = random_codebook(2, 8, 3, 81);
    Rng rng(82);
    Parameter z("z", {4, 3});
    for (double& x : z.value) x = rng.normal();

    auto build = [&](Tape& t) { return commitment_loss(t.param(z), 2, 2, cb); };
    auto res = craft::testing::gradcheck({&z}, build, 1e-7, 1e-4);
    INFO("worst ", res.worst_where, " err ", res.worst_rel_err);
    CHECK(res.ok);

    // Analytic form.
    z.zero_grad();
    Tape t;
    Tensor zt = t.param(z);
    FeatureGrid g(2, 2, 3);
    g.data = z.value;
    QuantizedGrid q = rq_encode(g, cb);
    t.backward(commitment_loss(zt, 2, 2, cb));
    for (size_t i = 0; i < z.value.size(); ++i) {
        double expect = 2.0 * (z.value[i] - q.dequantized[i]) / 12.0;
        CHECK(z.grad[i] == doctest::Approx(expect).epsilon(1e-12));
    }
}

TEST_CASE("fit_codebook: corpus of exactly K distinct vectors recovers them") {
    // Values exactly representable in binary32.
    std::vector<std::vector<double>> vecs = {
        {1.0, -2.0}, {0.5, 0.25}, {-4.0, 8.0}, {3.5, -0.125}};
    std::vector<FeatureGrid> corpus;
    Rng rng(91);
    for (int copy = 0; copy < 6; ++copy) {
        FeatureGrid g(2, 2, 2);
        for (size_t p = 0; p < 4; ++p) {
            size_t which = (copy + p) % 4;
            g.patch(p)[0] = vecs[which][0];
            g.patch(p)[1] = vecs[which][1];
        }
        corpus.push_back(g);
    }
    Codebook cb = fit_codebook(corpus, 1, 4, 7);
    // Set equality within 1e-9.
    for (const auto& v : vecs) {
        bool found = false;
        for (size_t k = 0; k < 4; ++k) {
            double d0 = double(cb.codeword(0, k)[0]) - v[0];
            double d1 = double(cb.codeword(0, k)[1]) - v[1];
            if (std::sqrt(d0 * d0 + d1 * d1) < 1e-9) found = true;
        }
        CHECK(found);
    }
}

TEST_CASE("fit_codebook: deterministic per seed, error paths") {
    Rng rng(101);
    std::vector<FeatureGrid> corpus;
    for (int i = 0; i < 8; ++i) {
        FeatureGrid g(3, 3, 4);
        for (double& x : g.data) x = rng.normal();
        corpus.push_back(g);
    }
    Codebook a = fit_codebook(corpus, 2, 8, 123);
    Codebook b = fit_codebook(corpus, 2, 8, 123);
    CHECK(a.crc32() == b.crc32());
    Codebook c = fit_codebook(corpus, 2, 8, 124);
    CHECK(a.crc32() != c.crc32());

    CHECK_THROWS_AS(fit_codebook({}, 1, 4, 1), ArgumentError);
    CHECK_THROWS_AS(fit_codebook(corpus, 1, 100, 1), ArgumentError);  // K > distinct
}

TEST_CASE("fit_codebook: residual norms shrink against inputs and across levels") {
    Rng rng(111);
    std::vector<FeatureGrid> corpus;
    for (int i = 0; i < 20; ++i) {
        FeatureGrid g(4, 4, 6);
        for (double& x : g.data) x = rng.normal(0.0, 1.0);
        corpus.push_back(g);
    }
    Codebook cb = fit_codebook(corpus, 3, 16, 5);

    double input_norm = 0.0;
    std::vector<double> level_norm(3, 0.0);
    size_t count = 0;
    for (const auto& g : corpus) {
        for (size_t p = 0; p < g.patches(); ++p) {
            std::vector<double> r(g.patch(p), g.patch(p) + 6);
            double n0 = 0.0;
            for (double x : r) n0 += x * x;
            input_norm += std::sqrt(n0);
            for (size_t level = 0; level < 3; ++level) {
                auto [idx, d2] = nearest_entry(r.data(), 6, level, cb);
                (void)d2;
                const float* c = cb.codeword(level, idx);
                double nr = 0.0;
                for (size_t j = 0; j < 6; ++j) {
                    r[j] -= double(c[j]);
                    nr += r[j] * r[j];
                }
                level_norm[level] += std::sqrt(nr);
            }
            ++count;
        }
    }
    input_norm /= double(count);
    for (double& x : level_norm) x /= double(count);
    CHECK(level_norm[0] <= input_norm);
    CHECK(level_norm[1] < level_norm[0]);
    CHECK(level_norm[2] < level_norm[1]);
}

TEST_CASE("codebook save/load round trip is bit-exact") {
    Codebook cb = random_codebook(2, 16, 8, 121);
    std::string path = temp_path("craft_test_cb.bin");
    save_codebook(cb, path);
    Codebook back = load_codebook(path);
    CHECK(back.levels() == cb.levels());
    CHECK(back.entries() == cb.entries());
    CHECK(back.dim() == cb.dim());
    CHECK(back.crc32() == cb.crc32());
    for (size_t l = 0; l < 2; ++l) {
        for (size_t k = 0; k < 16; ++k) {
            for (size_t j = 0; j < 8; ++j) {
                CHECK(back.codeword(l, k)[j] == cb.codeword(l, k)[j]);
            }
        }
    }
    std::filesystem::remove(path);
}

TEST_CASE("codebook load: truncation and bad magic are format errors") {
    Codebook cb = random_codebook(1, 4, 2, 131);
    std::string path = temp_path("craft_test_cb2.bin");
    save_codebook(cb, path);

    auto bytes = read_file(path);
    {
        std::vector<uint8_t> cut(bytes.begin(), bytes.end() - 7);
        write_file_atomic(path, cut);
        CHECK_THROWS_AS(load_codebook(path), FormatError);
    }
    {
        auto bad = bytes;
        bad[0] = 'X';
        write_file_atomic(path, bad);
        CHECK_THROWS_WITH_AS(load_codebook(path),
                             doctest::Contains("CRFTCB01"), FormatError);
    }
    {
        auto bad = bytes;
        bad[7] = '9';  // version byte
        write_file_atomic(path, bad);
        CHECK_THROWS_AS(load_codebook(path), FormatError);
    }
    {
        auto bad = bytes;
        bad[bytes.size() - 1] ^= 0xFF;  // corrupt CRC
        write_file_atomic(path, bad);
        CHECK_THROWS_AS(load_codebook(path), FormatError);
    }
    std::filesystem::remove(path);
}

TEST_CASE("subsample_codebook: identity at 1.0, deterministic, K floor") {
    Codebook cb = random_codebook(2, 16, 4, 141);
    Codebook full = subsample_codebook(cb, 1.0, 99);
    CHECK(full.crc32() == cb.crc32());

    Codebook half1 = subsample_codebook(cb, 0.5, 99);
    Codebook half2 = subsample_codebook(cb, 0.5, 99);
    CHECK(half1.entries() == 8);
    CHECK(half1.crc32() == half2.crc32());
    CHECK(subsample_codebook(cb, 0.5, 100).crc32() != half1.crc32());

    CHECK_THROWS_AS(subsample_codebook(cb, 0.05, 1), ArgumentError);
}
