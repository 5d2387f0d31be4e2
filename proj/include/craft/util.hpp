// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace craft {

// FNV-1a 64-bit hash; used for RNG substream labels and config hashes.
uint64_t fnv1a64(std::string_view s);

// CRC-32 (IEEE, reflected, poly 0xEDB88320).
uint32_t crc32(const void* data, size_t len);
uint32_t crc32(const std::vector<uint8_t>& bytes);

// Deterministic counter-free PRNG (splitmix64 core). All randomness in the
// project flows from one seed expanded into labeled substreams, so every
// artifact is replayable from (seed, label path).
class Rng {
  public:
    explicit Rng(uint64_t seed) : state_(seed) {}

    // Independent stream derived from this seed and a label.
    Rng substream(std::string_view label) const;

    uint64_t next_u64();

    // Uniform in [0, 1) with 53 random bits.
    double uniform();
    double uniform(double lo, double hi);

    // Standard normal via Box-Muller (deterministic, caches the pair).
    double normal();
    double normal(double mean, double sd);

    // Uniform integer in [0, n). n must be > 0.
    uint64_t randint(uint64_t n);

    template <typename T>
    void shuffle(std::vector<T>& v) {
        if (v.size() < 2) return;
        for (size_t i = v.size() - 1; i > 0; --i) {
            size_t j = static_cast<size_t>(randint(i + 1));
            std::swap(v[i], v[j]);
        }
    }

    std::vector<size_t> permutation(size_t n);

  private:
    uint64_t state_;
    bool has_gauss_ = false;
    double gauss_ = 0.0;
};

// Shortest round-trippable decimal form of a double ("%.17g"), shared by all
// CSV/JSON emitters so identical runs produce identical bytes.
std::string fmt_double(double v);

// Lowercase ASCII copy.
std::string to_lower(std::string_view s);

// Lowercase, collapse whitespace runs to single spaces, trim ends.
std::string normalize_ws(std::string_view s);

// Little-endian byte packing into a growable buffer.
class ByteWriter {
  public:
    void u8(uint8_t v) { buf_.push_back(v); }
    void u32(uint32_t v);
    void u64(uint64_t v);
    void f32(float v);
    void f64(double v);
    void bytes(const void* data, size_t len);
    void str_u32(std::string_view s);  // u32 length prefix + UTF-8 bytes

    const std::vector<uint8_t>& data() const { return buf_; }
    size_t size() const { return buf_.size(); }

  private:
    std::vector<uint8_t> buf_;
};

// Little-endian reader over a byte buffer; throws FormatError on truncation.
class ByteReader {
  public:
    explicit ByteReader(const std::vector<uint8_t>& buf) : buf_(buf) {}

    uint8_t u8();
    uint32_t u32();
    uint64_t u64();
    float f32();
    double f64();
    void bytes(void* out, size_t len);
    std::string str_u32();

    size_t pos() const { return pos_; }
    size_t remaining() const { return buf_.size() - pos_; }
    bool eof() const { return pos_ >= buf_.size(); }

  private:
    void need(size_t n) const;
    const std::vector<uint8_t>& buf_;
    size_t pos_ = 0;
};

// Whole-file helpers. write_file_atomic writes to a temp sibling and renames,
// so a failed run never leaves a partial artifact behind.
std::vector<uint8_t> read_file(const std::string& path);
void write_file_atomic(const std::string& path, const std::vector<uint8_t>& bytes);
void write_file_atomic(const std::string& path, const std::string& text);

// Hex codec for binary32 payloads embedded in JSONL (little-endian bytes).
std::string floats_to_hex(const std::vector<float>& v);
std::vector<float> hex_to_floats(std::string_view hex);

}  // namespace craft
