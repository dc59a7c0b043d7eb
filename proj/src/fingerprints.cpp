#include "afp/fingerprints.hpp"

#include "afp/errors.hpp"
#include "afp/parallel.hpp"
#include "afp/rng.hpp"
#include "afp/serialize.hpp"

#include <Eigen/Dense>
#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <map>
#include <mutex>
#include <numbers>

namespace afp {

namespace {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<Mat>;
using ConstMapMat = Eigen::Map<const Mat>;

ConstMapMat dct_map(int n) { return {dct_matrix(n).data(), n, n}; }

}  // namespace

// ---------------------------------------------------------------------------
// DCT
// ---------------------------------------------------------------------------

const std::vector<double>& dct_matrix(int n) {
    if (n < 1) throw InvalidInput("dct size must be positive");
    static std::mutex mu;
    static std::map<int, std::vector<double>> cache;
    std::lock_guard lock(mu);
    auto [it, fresh] = cache.try_emplace(n);
    if (fresh) {
        auto& m = it->second;
        m.resize(static_cast<std::size_t>(n) * n);
        for (int k = 0; k < n; ++k) {
            const double a = std::sqrt((k == 0 ? 1.0 : 2.0) / n);
            for (int i = 0; i < n; ++i)
                m[static_cast<std::size_t>(k) * n + i] = a * std::cos(std::numbers::pi * (2 * i + 1) * k / (2.0 * n));
        }
    }
    return it->second;
}

std::vector<double> dct2(std::span<const double> plane, int rows, int cols) {
    if (plane.size() != static_cast<std::size_t>(rows) * cols) throw InvalidInput("dct2: plane size mismatch");
    std::vector<double> out(plane.size());
    MapMat(out.data(), rows, cols) = dct_map(rows) * ConstMapMat(plane.data(), rows, cols) * dct_map(cols).transpose();
    return out;
}

std::vector<double> idct2(std::span<const double> coeffs, int rows, int cols) {
    if (coeffs.size() != static_cast<std::size_t>(rows) * cols) throw InvalidInput("idct2: plane size mismatch");
    std::vector<double> out(coeffs.size());
    MapMat(out.data(), rows, cols) = dct_map(rows).transpose() * ConstMapMat(coeffs.data(), rows, cols) * dct_map(cols);
    return out;
}

Block8 dct2_block(const Block8& block) {
    Block8 out;
    const auto v = dct2(block, 8, 8);
    std::copy(v.begin(), v.end(), out.begin());
    return out;
}

Block8 idct2_block(const Block8& coeffs) {
    Block8 out;
    const auto v = idct2(coeffs, 8, 8);
    std::copy(v.begin(), v.end(), out.begin());
    return out;
}

// ---------------------------------------------------------------------------
// JPEG
// ---------------------------------------------------------------------------

const QuantTable& jpeg_base_luma() {
    static const QuantTable t = {16, 11, 10, 16, 24,  40,  51,  61,  12, 12, 14, 19, 26,  58,  60,  55,
                                 14, 13, 16, 24, 40,  57,  69,  56,  14, 17, 22, 29, 51,  87,  80,  62,
                                 18, 22, 37, 56, 68,  109, 103, 77,  24, 35, 55, 64, 81,  104, 113, 92,
                                 49, 64, 78, 87, 103, 121, 120, 101, 72, 92, 95, 98, 112, 100, 103, 99};
    return t;
}

const QuantTable& jpeg_base_chroma() {
    static const QuantTable t = {17, 18, 24, 47, 99, 99, 99, 99, 18, 21, 26, 66, 99, 99, 99, 99,
                                 24, 26, 56, 99, 99, 99, 99, 99, 47, 66, 99, 99, 99, 99, 99, 99,
                                 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99,
                                 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99};
    return t;
}

QuantTable jpeg_scaled_table(const QuantTable& base, int quality) {
    if (quality < 1 || quality > 100) throw InvalidInput("jpeg quality must lie in [1, 100]");
    const long scale = quality < 50 ? 5000 / quality : 200 - 2 * quality;
    QuantTable out;
    for (std::size_t i = 0; i < 64; ++i) out[i] = static_cast<int>(std::clamp((base[i] * scale + 50) / 100, 1L, 255L));
    return out;
}

void JpegConfig::validate() const {
    if (quality < 1 || quality > 100) throw InvalidInput("jpeg quality must lie in [1, 100]");
}

namespace {

struct Plane {
    int h = 0;
    int w = 0;
    std::vector<double> v;

    double at(int r, int c) const { return v[static_cast<std::size_t>(r) * w + c]; }
};

// Edge replication up to (ph, pw).
Plane pad_plane(const Plane& p, int ph, int pw) {
    Plane out{ph, pw, std::vector<double>(static_cast<std::size_t>(ph) * pw)};
    for (int r = 0; r < ph; ++r)
        for (int c = 0; c < pw; ++c) out.v[static_cast<std::size_t>(r) * pw + c] = p.at(std::min(r, p.h - 1), std::min(c, p.w - 1));
    return out;
}

Plane crop_plane(const Plane& p, int h, int w) {
    Plane out{h, w, std::vector<double>(static_cast<std::size_t>(h) * w)};
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c) out.v[static_cast<std::size_t>(r) * w + c] = p.at(r, c);
    return out;
}

int round_up(int v, int m) { return (v + m - 1) / m * m; }

// Level shift, block DCT, quantize/dequantize, inverse, unshift.
Plane code_plane(const Plane& in, const QuantTable& q) {
    Plane p = pad_plane(in, round_up(in.h, 8), round_up(in.w, 8));
    Block8 block;
    for (int br = 0; br < p.h; br += 8) {
        for (int bc = 0; bc < p.w; bc += 8) {
            for (int r = 0; r < 8; ++r)
                for (int c = 0; c < 8; ++c) block[r * 8 + c] = p.at(br + r, bc + c) - 128.0;
            Block8 coeffs = dct2_block(block);
            for (std::size_t i = 0; i < 64; ++i) coeffs[i] = std::round(coeffs[i] / q[i]) * q[i];
            block = idct2_block(coeffs);
            for (int r = 0; r < 8; ++r)
                for (int c = 0; c < 8; ++c) p.v[static_cast<std::size_t>(br + r) * p.w + bc + c] = block[r * 8 + c] + 128.0;
        }
    }
    return crop_plane(p, in.h, in.w);
}

Plane downsample2(const Plane& in) {
    const Plane p = pad_plane(in, round_up(in.h, 2), round_up(in.w, 2));
    Plane out{p.h / 2, p.w / 2, std::vector<double>(static_cast<std::size_t>(p.h / 2) * (p.w / 2))};
    for (int r = 0; r < out.h; ++r)
        for (int c = 0; c < out.w; ++c)
            out.v[static_cast<std::size_t>(r) * out.w + c] =
                0.25 * (p.at(2 * r, 2 * c) + p.at(2 * r, 2 * c + 1) + p.at(2 * r + 1, 2 * c) + p.at(2 * r + 1, 2 * c + 1));
    return out;
}

Plane upsample2(const Plane& in, int h, int w) {
    Plane out{h, w, std::vector<double>(static_cast<std::size_t>(h) * w)};
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c) out.v[static_cast<std::size_t>(r) * w + c] = in.at(r / 2, c / 2);
    return out;
}

}  // namespace

Tensor jpeg_roundtrip(const Tensor& x, const JpegConfig& cfg) {
    cfg.validate();
    if (x.rank() != 3 || (x.dim(2) != 1 && x.dim(2) != 3))
        throw InvalidInput("jpeg expects an H x W x 1 or H x W x 3 image, got " + x.shape_string());
    const int h = x.dim(0), w = x.dim(1), ch = x.dim(2);
    const std::size_t n = static_cast<std::size_t>(h) * w;
    std::vector<Plane> planes(static_cast<std::size_t>(ch), Plane{h, w, std::vector<double>(n)});
    for (std::size_t i = 0; i < n; ++i)
        for (int c = 0; c < ch; ++c) planes[c].v[i] = std::round(std::clamp(x[i * ch + c], 0.0f, 1.0f) * 255.0);

    const QuantTable luma = jpeg_scaled_table(jpeg_base_luma(), cfg.quality);
    if (ch == 1) {
        planes[0] = code_plane(planes[0], luma);
    } else {
        const QuantTable chroma = jpeg_scaled_table(jpeg_base_chroma(), cfg.quality);
        Plane y{h, w, std::vector<double>(n)}, cb = y, cr = y;
        for (std::size_t i = 0; i < n; ++i) {
            const double r = planes[0].v[i], g = planes[1].v[i], b = planes[2].v[i];
            y.v[i] = 0.299 * r + 0.587 * g + 0.114 * b;
            cb.v[i] = -0.168736 * r - 0.331264 * g + 0.5 * b + 128.0;
            cr.v[i] = 0.5 * r - 0.418688 * g - 0.081312 * b + 128.0;
        }
        y = code_plane(y, luma);
        if (cfg.chroma_subsampling) {
            cb = upsample2(code_plane(downsample2(cb), chroma), h, w);
            cr = upsample2(code_plane(downsample2(cr), chroma), h, w);
        } else {
            cb = code_plane(cb, chroma);
            cr = code_plane(cr, chroma);
        }
        for (std::size_t i = 0; i < n; ++i) {
            planes[0].v[i] = y.v[i] + 1.402 * (cr.v[i] - 128.0);
            planes[1].v[i] = y.v[i] - 0.344136 * (cb.v[i] - 128.0) - 0.714136 * (cr.v[i] - 128.0);
            planes[2].v[i] = y.v[i] + 1.772 * (cb.v[i] - 128.0);
        }
    }

    Tensor out(x.shape());
    for (std::size_t i = 0; i < n; ++i)
        for (int c = 0; c < ch; ++c)
            out[i * ch + c] = static_cast<float>(std::clamp(std::round(planes[c].v[i]), 0.0, 255.0) / 255.0);
    return out;
}

// ---------------------------------------------------------------------------
// Compressed sensing
// ---------------------------------------------------------------------------

std::vector<double> soft_threshold(std::span<const double> v, double t) {
    if (!(t >= 0.0)) throw InvalidInput("soft threshold needs t >= 0");
    std::vector<double> out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
        const double m = std::max(std::abs(v[i]) - t, 0.0);
        out[i] = v[i] < 0.0 ? -m : m;
    }
    return out;
}

void CsConfig::validate() const {
    if (!(k_over_n > 0.0 && k_over_n <= 1.0)) throw InvalidInput("cs k/n must lie in (0, 1]");
    if (!(lambda >= 0.0)) throw InvalidInput("cs lambda must be >= 0");
    if (max_iters < 1) throw InvalidInput("cs max_iters must be >= 1");
    if (!(tol >= 0.0)) throw InvalidInput("cs tol must be >= 0");
}

namespace {

// Synthesis D (coefficients -> pixels) and analysis D^T for one channel.
class Dictionary {
public:
    Dictionary(CsDictionary kind, int h, int w) : kind_(kind), h_(h), w_(w) {}

    std::vector<double> synth(std::span<const double> chi) const { return apply(chi, false); }
    std::vector<double> analyze(std::span<const double> img) const { return apply(img, true); }

private:
    std::vector<double> apply(std::span<const double> in, bool forward) const {
        if (kind_ == CsDictionary::WholeDct) return forward ? dct2(in, h_, w_) : idct2(in, h_, w_);
        // Tiles of 8 with a smaller orthonormal DCT on ragged edges.
        std::vector<double> out(in.size());
        for (int r0 = 0; r0 < h_; r0 += 8) {
            const int th = std::min(8, h_ - r0);
            for (int c0 = 0; c0 < w_; c0 += 8) {
                const int tw = std::min(8, w_ - c0);
                std::vector<double> tile(static_cast<std::size_t>(th) * tw);
                for (int r = 0; r < th; ++r)
                    for (int c = 0; c < tw; ++c) tile[r * tw + c] = in[static_cast<std::size_t>(r0 + r) * w_ + c0 + c];
                const auto t = forward ? dct2(tile, th, tw) : idct2(tile, th, tw);
                for (int r = 0; r < th; ++r)
                    for (int c = 0; c < tw; ++c) out[static_cast<std::size_t>(r0 + r) * w_ + c0 + c] = t[r * tw + c];
            }
        }
        return out;
    }

    CsDictionary kind_;
    int h_;
    int w_;
};

double l1(std::span<const double> v) {
    double s = 0.0;
    for (double a : v) s += std::abs(a);
    return s;
}

struct Objective {
    const Dictionary& dict;
    const std::vector<double>& target;  // x on sampled pixels, 0 elsewhere
    const std::vector<char>& mask;
    double lambda;

    // Masked residual S^T (S D chi - b).
    std::vector<double> residual(std::span<const double> chi) const {
        auto r = dict.synth(chi);
        for (std::size_t i = 0; i < r.size(); ++i) r[i] = mask[i] ? r[i] - target[i] : 0.0;
        return r;
    }

    double value(std::span<const double> chi) const {
        const auto r = residual(chi);
        double s = 0.0;
        for (double v : r) s += v * v;
        return 0.5 * s + lambda * l1(chi);
    }
};

}  // namespace

Tensor cs_reconstruct(const Tensor& x, const CsConfig& cfg, CsTrace* trace) {
    cfg.validate();
    if (x.rank() != 3) throw InvalidInput("cs expects an H x W x C image, got " + x.shape_string());
    const int h = x.dim(0), w = x.dim(1), ch = x.dim(2);
    const std::size_t n = static_cast<std::size_t>(h) * w;
    const auto m = static_cast<std::size_t>(std::floor(cfg.k_over_n * static_cast<double>(n) + 1e-9));
    if (m < 1) throw InvalidInput("cs keeps no samples: k/n * n < 1");

    const Dictionary dict(cfg.dictionary, h, w);
    Rng rng(cfg.seed);
    Tensor out(x.shape());
    if (trace) *trace = CsTrace{};
    std::vector<std::size_t> order(n);

    for (int c = 0; c < ch; ++c) {
        // Exactly m distinct pixels: first m entries of a seeded shuffle.
        for (std::size_t i = 0; i < n; ++i) order[i] = i;
        for (std::size_t i = 0; i < m; ++i) std::swap(order[i], order[i + uniform_index(rng, n - i)]);
        std::vector<char> mask(n, 0);
        std::vector<double> target(n, 0.0);
        for (std::size_t i = 0; i < m; ++i) {
            mask[order[i]] = 1;
            target[order[i]] = x[order[i] * ch + c];
        }
        const Objective obj{dict, target, mask, cfg.lambda};

        // Monotone FISTA with L = 1: z_k = prox(y_k - grad(y_k)), keep the
        // better of z_k and x_{k-1}, extrapolate from both.
        std::vector<double> xk(n, 0.0), yk(n, 0.0), z(n);
        double fx = obj.value(xk);
        double t = 1.0;
        std::vector<double> history{fx};
        int iters = 0;
        for (int k = 0; k < cfg.max_iters; ++k) {
            const auto g = dict.analyze(obj.residual(yk));
            std::vector<double> step(n);
            for (std::size_t i = 0; i < n; ++i) step[i] = yk[i] - g[i];
            z = soft_threshold(step, cfg.lambda);
            const double fz = obj.value(z);
            const double prev = fx;
            std::vector<double> x_prev = xk;
            if (fz <= fx) {
                xk = z;
                fx = fz;
            }
            const double t_next = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * t * t));
            for (std::size_t i = 0; i < n; ++i)
                yk[i] = xk[i] + (t / t_next) * (z[i] - xk[i]) + ((t - 1.0) / t_next) * (xk[i] - x_prev[i]);
            t = t_next;
            history.push_back(fx);
            iters = k + 1;
            if (prev <= 0.0 || std::abs(fz - prev) < cfg.tol * prev) break;
        }

        const auto img = dict.synth(xk);
        for (std::size_t i = 0; i < n; ++i) out[i * ch + c] = static_cast<float>(std::clamp(img[i], 0.0, 1.0));
        if (trace) {
            trace->objective.push_back(std::move(history));
            trace->iterations.push_back(iters);
            trace->chi.push_back(std::move(xk));
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Fingerprints
// ---------------------------------------------------------------------------

std::string to_string(FingerprintMethod m) {
    switch (m) {
        case FingerprintMethod::TrueDelta: return "true-delta";
        case FingerprintMethod::RawImage: return "raw-image";
        case FingerprintMethod::Jpeg: return "jpeg";
        case FingerprintMethod::Cs: return "cs";
    }
    return "?";
}

FingerprintMethod parse_method(const std::string& s) {
    for (auto m : {FingerprintMethod::TrueDelta, FingerprintMethod::RawImage, FingerprintMethod::Jpeg, FingerprintMethod::Cs})
        if (to_string(m) == s) return m;
    throw InvalidInput("unknown fingerprint method '" + s + "' (expected true-delta, raw-image, jpeg or cs)");
}

namespace {

// Shortest round-tripping decimal form.
std::string shortest(double v) { return nlohmann::json(v).dump(); }

}  // namespace

std::string describe(FingerprintMethod m, const FingerprintParams& p) {
    switch (m) {
        case FingerprintMethod::Jpeg:
            return "quality=" + std::to_string(p.jpeg.quality) + ";subsampling=" + (p.jpeg.chroma_subsampling ? "420" : "444");
        case FingerprintMethod::Cs:
            return "k_over_n=" + shortest(p.cs.k_over_n) + ";lambda=" + shortest(p.cs.lambda) +
                   ";max_iters=" + std::to_string(p.cs.max_iters) + ";tol=" + shortest(p.cs.tol) +
                   ";seed=" + std::to_string(p.cs.seed) +
                   ";dictionary=" + (p.cs.dictionary == CsDictionary::WholeDct ? "dct" : "block-dct");
        default: return "";
    }
}

Fingerprint jpeg_fingerprint(const Tensor& x_adv, const JpegConfig& cfg) {
    Fingerprint f;
    f.method = FingerprintMethod::Jpeg;
    f.delta_hat = x_adv - jpeg_roundtrip(x_adv, cfg);
    f.params = describe(f.method, FingerprintParams{.jpeg = cfg, .cs = {}});
    return f;
}

Fingerprint cs_fingerprint(const Tensor& x_adv, const CsConfig& cfg) {
    Fingerprint f;
    f.method = FingerprintMethod::Cs;
    f.delta_hat = x_adv - cs_reconstruct(x_adv, cfg);
    f.params = describe(f.method, FingerprintParams{.jpeg = {}, .cs = cfg});
    return f;
}

std::uint64_t cs_record_seed(std::uint64_t base, const AdversarialRecord& r) {
    return derive_seed(base, {static_cast<std::uint64_t>(r.attack.index), r.source_id});
}

std::vector<Fingerprint> extract(std::span<const AdversarialRecord> records, FingerprintMethod method,
                                 const FingerprintParams& params, int jobs) {
    if (records.empty()) throw InvalidInput("extract needs at least one record");
    if (method == FingerprintMethod::Jpeg) params.jpeg.validate();
    if (method == FingerprintMethod::Cs) params.cs.validate();
    std::vector<Fingerprint> out(records.size());
    const std::string desc = describe(method, params);
    parallel_for(static_cast<int>(records.size()), jobs, [&](int i) {
        const auto& r = records[static_cast<std::size_t>(i)];
        Fingerprint& f = out[static_cast<std::size_t>(i)];
        switch (method) {
            case FingerprintMethod::TrueDelta:
                if (r.delta.empty() || r.delta.shape() != r.attacked.shape())
                    throw InvalidInput("true-delta fingerprints need records with a stored delta");
                f.delta_hat = r.delta;
                break;
            case FingerprintMethod::RawImage: f.delta_hat = r.attacked; break;
            case FingerprintMethod::Jpeg: f.delta_hat = jpeg_fingerprint(r.attacked, params.jpeg).delta_hat; break;
            case FingerprintMethod::Cs: {
                CsConfig cfg = params.cs;
                cfg.seed = cs_record_seed(params.cs.seed, r);
                f.delta_hat = cs_fingerprint(r.attacked, cfg).delta_hat;
                break;
            }
        }
        f.method = method;
        f.params = desc;
        f.source_id = r.source_id;
        f.split = r.split;
        f.class_index = r.attack.index;
    });
    return out;
}

void save_fingerprints(std::span<const Fingerprint> fps, const std::string& taxonomy_version,
                       const std::filesystem::path& dir) {
    if (fps.empty()) throw InvalidInput("no fingerprints to save");
    std::vector<Tensor> images;
    images.reserve(fps.size());
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& f : fps) {
        if (f.method != fps[0].method || f.params != fps[0].params) throw InvalidInput("mixed fingerprint methods");
        images.push_back(f.delta_hat);
        rows.push_back({f.source_id, to_string(f.split), f.class_index});
    }
    const std::string blob = encode_blob(stack(images));
    write_file(dir / "fingerprints.bin", blob);
    nlohmann::json j = {{"format", "afp-fingerprints"},
                        {"version", 1},
                        {"method", to_string(fps[0].method)},
                        {"params", fps[0].params},
                        {"taxonomy_version", taxonomy_version},
                        {"count", fps.size()},
                        {"blob", "fingerprints.bin"},
                        {"sha256", sha256_bytes(blob)},
                        {"rows", std::move(rows)}};
    write_file(dir / "fingerprints.json", j.dump(1) + "\n");
}

FingerprintSet load_fingerprints(const std::filesystem::path& dir) {
    FingerprintSet set;
    try {
        const auto j = nlohmann::json::parse(read_file(dir / "fingerprints.json"));
        if (j.at("format").get<std::string>() != "afp-fingerprints") throw FormatError("not a fingerprint set");
        set.method = parse_method(j.at("method").get<std::string>());
        set.params = j.at("params").get<std::string>();
        set.taxonomy_version = j.at("taxonomy_version").get<std::string>();
        const std::string blob = read_file(dir / j.at("blob").get<std::string>());
        if (sha256_bytes(blob) != j.at("sha256").get<std::string>())
            throw IntegrityError((dir / "fingerprints.bin").string() + ": hash mismatch");
        const Tensor all = decode_blob(blob, (dir / "fingerprints.bin").string());
        const auto& rows = j.at("rows");
        if (all.rank() != 4 || static_cast<std::size_t>(all.dim(0)) != rows.size())
            throw FormatError("fingerprint blob does not match its row table");
        for (std::size_t i = 0; i < rows.size(); ++i) {
            Fingerprint f;
            f.delta_hat = all.sample(static_cast<int>(i));
            f.method = set.method;
            f.params = set.params;
            f.source_id = rows[i].at(0).get<std::uint64_t>();
            f.split = parse_split(rows[i].at(1).get<std::string>());
            f.class_index = rows[i].at(2).get<int>();
            set.items.push_back(std::move(f));
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError((dir / "fingerprints.json").string() + ": " + e.what());
    }
    return set;
}

}  // namespace afp
