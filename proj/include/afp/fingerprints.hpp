#pragma once

#include "afp/attacks.hpp"
#include "afp/dataset.hpp"
#include "afp/tensor.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace afp {

// ---------------------------------------------------------------------------
// DCT
// ---------------------------------------------------------------------------

using Block8 = std::array<double, 64>;

// Orthonormal type-II DCT of a row-major 8x8 block and its inverse.
Block8 dct2_block(const Block8& block);
Block8 idct2_block(const Block8& coeffs);

// Orthonormal DCT-II matrix of size n: row k is the k-th basis vector.
const std::vector<double>& dct_matrix(int n);

// Orthonormal 2-D DCT of a row-major rows x cols plane and its inverse.
std::vector<double> dct2(std::span<const double> plane, int rows, int cols);
std::vector<double> idct2(std::span<const double> coeffs, int rows, int cols);

// ---------------------------------------------------------------------------
// JPEG-style codec round trip
// ---------------------------------------------------------------------------

using QuantTable = std::array<int, 64>;

const QuantTable& jpeg_base_luma();
const QuantTable& jpeg_base_chroma();
// scale = q < 50 ? 5000 / q : 200 - 2q; Q' = clamp((Q * scale + 50) / 100, 1, 255).
QuantTable jpeg_scaled_table(const QuantTable& base, int quality);

struct JpegConfig {
    int quality = 75;
    bool chroma_subsampling = true;  // 4:2:0; only meaningful for C = 3

    void validate() const;
};

// Image H x W x C (C = 1 or 3) in [0, 1] through 8-bit quantization, block
// DCT quantization and back. The output holds multiples of 1/255.
Tensor jpeg_roundtrip(const Tensor& x, const JpegConfig& cfg);

// ---------------------------------------------------------------------------
// Compressed-sensing reconstruction
// ---------------------------------------------------------------------------

std::vector<double> soft_threshold(std::span<const double> v, double t);

enum class CsDictionary { WholeDct, BlockDct };

struct CsConfig {
    double k_over_n = 0.5;
    double lambda = 0.01;
    int max_iters = 200;
    double tol = 1e-6;
    std::uint64_t seed = 0;
    CsDictionary dictionary = CsDictionary::WholeDct;

    void validate() const;
};

struct CsTrace {
    // Objective F(chi) per channel: entry 0 is the starting point chi = 0,
    // then one entry per iteration.
    std::vector<std::vector<double>> objective;
    std::vector<int> iterations;
    std::vector<std::vector<double>> chi;  // final coefficients per channel
};

// Per channel: keep floor(k/n * n) pixels chosen by `cfg.seed`, solve
// min 0.5 ||b - S D chi||^2 + lambda ||chi||_1 with monotone FISTA (L = 1)
// and return D chi clipped to [0, 1].
Tensor cs_reconstruct(const Tensor& x, const CsConfig& cfg, CsTrace* trace = nullptr);

// ---------------------------------------------------------------------------
// Fingerprints
// ---------------------------------------------------------------------------

enum class FingerprintMethod { TrueDelta, RawImage, Jpeg, Cs };

std::string to_string(FingerprintMethod m);
FingerprintMethod parse_method(const std::string& s);

struct FingerprintParams {
    JpegConfig jpeg;
    CsConfig cs;  // cs.seed is the base seed; each record derives its own
};

// Method parameters as "key=value;..." for manifests.
std::string describe(FingerprintMethod m, const FingerprintParams& p);

struct Fingerprint {
    Tensor delta_hat;
    FingerprintMethod method = FingerprintMethod::TrueDelta;
    std::string params;
    std::uint64_t source_id = 0;
    Split split = Split::Train;
    int class_index = 0;
};

Fingerprint jpeg_fingerprint(const Tensor& x_adv, const JpegConfig& cfg);
Fingerprint cs_fingerprint(const Tensor& x_adv, const CsConfig& cfg);

// Per-record CS seed: derive_seed(base, {class_index, source_id}).
std::uint64_t cs_record_seed(std::uint64_t base, const AdversarialRecord& r);

// One fingerprint per record, in record order.
std::vector<Fingerprint> extract(std::span<const AdversarialRecord> records, FingerprintMethod method,
                                 const FingerprintParams& params, int jobs = 1);

// Stacked storage: <dir>/fingerprints.bin (N x H x W x C blob) plus
// <dir>/fingerprints.json with method, params and per-row metadata.
void save_fingerprints(std::span<const Fingerprint> fps, const std::string& taxonomy_version,
                       const std::filesystem::path& dir);

struct FingerprintSet {
    FingerprintMethod method = FingerprintMethod::TrueDelta;
    std::string params;
    std::string taxonomy_version;
    std::vector<Fingerprint> items;
};

FingerprintSet load_fingerprints(const std::filesystem::path& dir);

}  // namespace afp
