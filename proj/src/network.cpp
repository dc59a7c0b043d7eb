#include "afp/network.hpp"

#include "afp/errors.hpp"
#include "afp/rng.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <limits>
#include <sstream>

namespace afp {

template <class T>
using RowMatT = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapMatT = Eigen::Map<RowMatT<T>>;
template <class T>
using ConstMapMatT = Eigen::Map<const RowMatT<T>>;
using MapMat = MapMatT<double>;
using ConstMapMat = ConstMapMatT<double>;

// ---------------------------------------------------------------------------
// Spec
// ---------------------------------------------------------------------------

LayerSpec LayerSpec::conv2d(int out_ch, int k, int stride, int pad) {
    LayerSpec l;
    l.kind = LayerKind::Conv2d;
    l.out_channels = out_ch;
    l.kernel = k;
    l.stride = stride;
    l.pad = pad < 0 ? k / 2 : pad;
    return l;
}

LayerSpec LayerSpec::maxpool2d(int k) {
    LayerSpec l;
    l.kind = LayerKind::MaxPool2d;
    l.kernel = k;
    return l;
}

LayerSpec LayerSpec::flatten() {
    LayerSpec l;
    l.kind = LayerKind::Flatten;
    return l;
}

LayerSpec LayerSpec::dense(int out) {
    LayerSpec l;
    l.kind = LayerKind::Dense;
    l.units = out;
    return l;
}

LayerSpec LayerSpec::residual(int ch) {
    LayerSpec l;
    l.kind = LayerKind::Residual;
    l.out_channels = ch;
    l.kernel = 3;
    l.pad = 1;
    return l;
}

namespace {

std::size_t layer_param_count(const LayerSpec& l, const Shape3& in) {
    switch (l.kind) {
        case LayerKind::Conv2d:
            return static_cast<std::size_t>(l.out_channels) * l.kernel * l.kernel * in.c + l.out_channels;
        case LayerKind::Dense:
            return static_cast<std::size_t>(l.units) * in.size() + l.units;
        case LayerKind::Residual:
            return 2 * (static_cast<std::size_t>(l.out_channels) * 9 * l.out_channels + l.out_channels);
        default:
            return 0;
    }
}

std::string dims(const Shape3& s) {
    return std::to_string(s.h) + "x" + std::to_string(s.w) + "x" + std::to_string(s.c);
}

}  // namespace

std::vector<Shape3> NetworkSpec::layer_shapes() const {
    if (input.h <= 0 || input.w <= 0 || input.c <= 0) throw InvalidInput("network input shape must be positive");
    std::vector<Shape3> shapes;
    Shape3 s = input;
    for (const auto& l : layers) {
        switch (l.kind) {
            case LayerKind::Conv2d: {
                if (l.out_channels <= 0 || l.kernel <= 0 || l.stride <= 0 || l.pad < 0) {
                    throw InvalidInput("conv2d parameters must be positive");
                }
                const int ho = (s.h + 2 * l.pad - l.kernel) / l.stride + 1;
                const int wo = (s.w + 2 * l.pad - l.kernel) / l.stride + 1;
                if (ho <= 0 || wo <= 0) throw InvalidInput("conv2d kernel larger than input " + dims(s));
                s = {ho, wo, l.out_channels};
                break;
            }
            case LayerKind::Relu:
                break;
            case LayerKind::MaxPool2d:
                if (l.kernel <= 0 || s.h < l.kernel || s.w < l.kernel) {
                    throw InvalidInput("maxpool2d window does not fit input " + dims(s));
                }
                s = {s.h / l.kernel, s.w / l.kernel, s.c};
                break;
            case LayerKind::Flatten:
                s = {1, 1, s.size()};
                break;
            case LayerKind::Dense:
                if (l.units <= 0) throw InvalidInput("dense units must be positive");
                s = {1, 1, l.units};
                break;
            case LayerKind::Residual:
                if (l.out_channels != s.c) {
                    throw InvalidInput("residual block width " + std::to_string(l.out_channels) +
                                       " does not match input channels " + std::to_string(s.c));
                }
                break;
        }
        shapes.push_back(s);
    }
    return shapes;
}

void NetworkSpec::validate() const {
    const auto shapes = layer_shapes();
    const Shape3 out = shapes.empty() ? input : shapes.back();
    if (out.size() != classes) {
        throw InvalidInput("network emits " + std::to_string(out.size()) + " values but classes = " +
                           std::to_string(classes));
    }
}

std::size_t NetworkSpec::param_count() const {
    const auto shapes = layer_shapes();
    std::size_t n = 0;
    Shape3 in = input;
    for (std::size_t i = 0; i < layers.size(); ++i) {
        n += layer_param_count(layers[i], in);
        in = shapes[i];
    }
    return n;
}

std::string NetworkSpec::descriptor() const {
    std::ostringstream os;
    os << "input=" << dims(input) << ";classes=" << classes;
    for (const auto& l : layers) {
        os << ';';
        switch (l.kind) {
            case LayerKind::Conv2d:
                os << "conv2d(" << l.out_channels << ',' << l.kernel << ',' << l.stride << ',' << l.pad << ')';
                break;
            case LayerKind::Relu: os << "relu"; break;
            case LayerKind::MaxPool2d: os << "maxpool2d(" << l.kernel << ')'; break;
            case LayerKind::Flatten: os << "flatten"; break;
            case LayerKind::Dense: os << "dense(" << l.units << ')'; break;
            case LayerKind::Residual: os << "residual(" << l.out_channels << ')'; break;
        }
    }
    return os.str();
}

namespace {

std::vector<int> parse_ints(std::string_view s, char sep) {
    std::vector<int> out;
    while (!s.empty()) {
        const auto pos = s.find(sep);
        const auto tok = s.substr(0, pos);
        int v = 0;
        const auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
        if (ec != std::errc{} || ptr != tok.data() + tok.size()) {
            throw FormatError("bad integer '" + std::string(tok) + "' in network descriptor");
        }
        out.push_back(v);
        if (pos == std::string_view::npos) break;
        s.remove_prefix(pos + 1);
    }
    return out;
}

}  // namespace

NetworkSpec NetworkSpec::parse(std::string_view text) {
    NetworkSpec spec;
    bool have_input = false;
    bool have_classes = false;
    while (!text.empty()) {
        const auto pos = text.find(';');
        const std::string_view tok = text.substr(0, pos);
        const auto paren = tok.find('(');
        const std::string_view name = tok.substr(0, paren);
        std::vector<int> args;
        if (paren != std::string_view::npos) {
            if (tok.back() != ')') throw FormatError("unterminated layer arguments: " + std::string(tok));
            args = parse_ints(tok.substr(paren + 1, tok.size() - paren - 2), ',');
        }
        auto need = [&](std::size_t n) {
            if (args.size() != n) throw FormatError("wrong argument count for " + std::string(tok));
        };
        if (name.starts_with("input=")) {
            const auto d = parse_ints(name.substr(6), 'x');
            if (d.size() != 3) throw FormatError("input shape must be HxWxC");
            spec.input = {d[0], d[1], d[2]};
            have_input = true;
        } else if (name.starts_with("classes=")) {
            const auto d = parse_ints(name.substr(8), ',');
            if (d.size() != 1) throw FormatError("bad classes entry");
            spec.classes = d[0];
            have_classes = true;
        } else if (name == "conv2d") {
            need(4);
            spec.layers.push_back(LayerSpec::conv2d(args[0], args[1], args[2], args[3]));
        } else if (name == "relu") {
            spec.layers.push_back(LayerSpec::relu());
        } else if (name == "maxpool2d") {
            need(1);
            spec.layers.push_back(LayerSpec::maxpool2d(args[0]));
        } else if (name == "flatten") {
            spec.layers.push_back(LayerSpec::flatten());
        } else if (name == "dense") {
            need(1);
            spec.layers.push_back(LayerSpec::dense(args[0]));
        } else if (name == "residual") {
            need(1);
            spec.layers.push_back(LayerSpec::residual(args[0]));
        } else {
            throw FormatError("unknown layer '" + std::string(tok) + "' in network descriptor");
        }
        if (pos == std::string_view::npos) break;
        text.remove_prefix(pos + 1);
    }
    if (!have_input || !have_classes) throw FormatError("network descriptor needs input= and classes=");
    spec.validate();
    return spec;
}

NetworkSpec NetworkSpec::victim(Shape3 input, int classes) {
    NetworkSpec s;
    s.input = input;
    s.classes = classes;
    s.layers = {LayerSpec::conv2d(16, 3), LayerSpec::relu(), LayerSpec::maxpool2d(2),
                LayerSpec::conv2d(32, 3), LayerSpec::relu(), LayerSpec::maxpool2d(2),
                LayerSpec::flatten(),     LayerSpec::dense(classes)};
    s.validate();
    return s;
}

NetworkSpec NetworkSpec::attributor(Shape3 input, int classes) {
    NetworkSpec s;
    s.input = input;
    s.classes = classes;
    s.layers = {LayerSpec::conv2d(16, 3), LayerSpec::relu(),     LayerSpec::maxpool2d(2),
                LayerSpec::conv2d(32, 3), LayerSpec::relu(),     LayerSpec::maxpool2d(2),
                LayerSpec::residual(32),  LayerSpec::residual(32), LayerSpec::flatten(),
                LayerSpec::dense(classes)};
    s.validate();
    return s;
}

void ModelCheckpoint::validate() const {
    spec.validate();
    const auto n = spec.param_count();
    if (params.size() != n) {
        throw InvalidInput("checkpoint has " + std::to_string(params.size()) + " params, spec needs " +
                           std::to_string(n));
    }
    if (adam.m.size() != n || adam.v.size() != n) throw InvalidInput("adam state length mismatch");
}

ModelCheckpoint init_model(const NetworkSpec& spec, std::uint64_t seed) {
    spec.validate();
    ModelCheckpoint m;
    m.spec = spec;
    m.seed = seed;
    m.params.reserve(spec.param_count());
    Rng rng(seed);
    auto push_weights = [&](std::size_t count, int fan_in, double scale) {
        const double std = scale * std::sqrt(2.0 / fan_in);
        for (std::size_t i = 0; i < count; ++i) m.params.push_back(static_cast<float>(std * normal01(rng)));
    };
    auto push_zeros = [&](std::size_t count) { m.params.insert(m.params.end(), count, 0.0f); };

    const auto shapes = spec.layer_shapes();
    Shape3 in = spec.input;
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
        const auto& l = spec.layers[i];
        switch (l.kind) {
            case LayerKind::Conv2d: {
                const int fan_in = l.kernel * l.kernel * in.c;
                push_weights(static_cast<std::size_t>(l.out_channels) * fan_in, fan_in, 1.0);
                push_zeros(static_cast<std::size_t>(l.out_channels));
                break;
            }
            case LayerKind::Dense: {
                // Output head: no ReLU follows, so use Xavier-like scaling.
                push_weights(static_cast<std::size_t>(l.units) * in.size(), in.size(), std::sqrt(0.5));
                push_zeros(static_cast<std::size_t>(l.units));
                break;
            }
            case LayerKind::Residual: {
                const int fan_in = 9 * l.out_channels;
                const auto count = static_cast<std::size_t>(l.out_channels) * fan_in;
                push_weights(count, fan_in, 1.0);
                push_zeros(static_cast<std::size_t>(l.out_channels));
                push_weights(count, fan_in, 0.1);
                push_zeros(static_cast<std::size_t>(l.out_channels));
                break;
            }
            default:
                break;
        }
        in = shapes[i];
    }
    m.adam.m.assign(m.params.size(), 0.0f);
    m.adam.v.assign(m.params.size(), 0.0f);
    return m;
}

// ---------------------------------------------------------------------------
// Engine
// ---------------------------------------------------------------------------

namespace {

struct ConvGeom {
    int n, h, w, cin, cout, k, stride, pad, ho, wo;

    int rows() const { return n * ho * wo; }
    int cols() const { return k * k * cin; }
};

// For a fixed kernel row, the k * cin patch values are contiguous in NHWC
// layout whenever the whole window row lies inside the image.
template <class T>
void im2col(const T* in, const ConvGeom& g, T* cols) {
    const int K = g.cols();
    const int span = g.k * g.cin;
    for (int n = 0; n < g.n; ++n) {
        for (int oy = 0; oy < g.ho; ++oy) {
            for (int ox = 0; ox < g.wo; ++ox) {
                T* row = cols + (static_cast<std::size_t>(n * g.ho + oy) * g.wo + ox) * K;
                const int x0 = ox * g.stride - g.pad;
                const bool inside_x = x0 >= 0 && x0 + g.k <= g.w;
                for (int ky = 0; ky < g.k; ++ky) {
                    const int iy = oy * g.stride - g.pad + ky;
                    T* dst = row + ky * span;
                    if (iy < 0 || iy >= g.h) {
                        std::fill(dst, dst + span, T(0));
                        continue;
                    }
                    const T* src_row = in + static_cast<std::size_t>(n * g.h + iy) * g.w * g.cin;
                    if (inside_x) {
                        std::copy(src_row + x0 * g.cin, src_row + x0 * g.cin + span, dst);
                        continue;
                    }
                    for (int kx = 0; kx < g.k; ++kx) {
                        const int ix = x0 + kx;
                        T* d = dst + kx * g.cin;
                        if (ix < 0 || ix >= g.w) {
                            std::fill(d, d + g.cin, T(0));
                        } else {
                            std::copy(src_row + ix * g.cin, src_row + (ix + 1) * g.cin, d);
                        }
                    }
                }
            }
        }
    }
}

void col2im(const double* cols, const ConvGeom& g, double* din) {
    const int K = g.cols();
    const int span = g.k * g.cin;
    for (int n = 0; n < g.n; ++n) {
        for (int oy = 0; oy < g.ho; ++oy) {
            for (int ox = 0; ox < g.wo; ++ox) {
                const double* row = cols + (static_cast<std::size_t>(n * g.ho + oy) * g.wo + ox) * K;
                const int x0 = ox * g.stride - g.pad;
                const int kx_begin = std::max(0, -x0);
                const int kx_end = std::min(g.k, g.w - x0);
                for (int ky = 0; ky < g.k; ++ky) {
                    const int iy = oy * g.stride - g.pad + ky;
                    if (iy < 0 || iy >= g.h) continue;
                    const double* src = row + ky * span + kx_begin * g.cin;
                    double* dst = din + (static_cast<std::size_t>(n * g.h + iy) * g.w + x0 + kx_begin) * g.cin;
                    const int len = (kx_end - kx_begin) * g.cin;
                    for (int j = 0; j < len; ++j) dst[j] += src[j];
                }
            }
        }
    }
}

// Convolutions are processed a few images at a time so the patch matrix
// stays cache resident.
template <class T>
int images_per_chunk(const ConvGeom& g) {
    const std::size_t per_image = static_cast<std::size_t>(g.ho) * g.wo * g.cols() * sizeof(T);
    return static_cast<int>(std::max<std::size_t>(1, (std::size_t{1} << 20) / per_image));
}

ConvGeom chunk_geom(const ConvGeom& g, int n) {
    ConvGeom c = g;
    c.n = n;
    return c;
}

template <class T>
void conv_forward(const T* in, const T* weights, const T* bias, const ConvGeom& g, std::vector<T>& scratch,
                  T* out) {
    const int step = images_per_chunk<T>(g);
    const std::size_t in_stride = static_cast<std::size_t>(g.h) * g.w * g.cin;
    const std::size_t out_stride = static_cast<std::size_t>(g.ho) * g.wo * g.cout;
    ConstMapMatT<T> w(weights, g.cout, g.cols());
    const Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> b(bias, g.cout);
    for (int n0 = 0; n0 < g.n; n0 += step) {
        const auto cg = chunk_geom(g, std::min(step, g.n - n0));
        scratch.resize(static_cast<std::size_t>(cg.rows()) * cg.cols());
        im2col(in + n0 * in_stride, cg, scratch.data());
        ConstMapMatT<T> cols(scratch.data(), cg.rows(), cg.cols());
        MapMatT<T> o(out + n0 * out_stride, cg.rows(), cg.cout);
        o.noalias() = cols * w.transpose();
        o.rowwise() += b;
    }
}

// Accumulates into grad_w / grad_b when non-null; writes (not accumulates) din.
void conv_backward(const double* in, const double* weights, const ConvGeom& g, const double* dout,
                   std::vector<double>& scratch, double* grad_w, double* grad_b, double* din) {
    const int step = images_per_chunk<double>(g);
    const std::size_t in_stride = static_cast<std::size_t>(g.h) * g.w * g.cin;
    const std::size_t out_stride = static_cast<std::size_t>(g.ho) * g.wo * g.cout;
    ConstMapMat w(weights, g.cout, g.cols());
    if (din) std::fill(din, din + static_cast<std::size_t>(g.n) * in_stride, 0.0);
    for (int n0 = 0; n0 < g.n; n0 += step) {
        const auto cg = chunk_geom(g, std::min(step, g.n - n0));
        ConstMapMat d(dout + n0 * out_stride, cg.rows(), cg.cout);
        scratch.resize(static_cast<std::size_t>(cg.rows()) * cg.cols());
        if (grad_w) {
            im2col(in + n0 * in_stride, cg, scratch.data());
            ConstMapMat cols(scratch.data(), cg.rows(), cg.cols());
            MapMat gw(grad_w, cg.cout, cg.cols());
            gw.noalias() += d.transpose() * cols;
            Eigen::Map<Eigen::RowVectorXd>(grad_b, cg.cout) += d.colwise().sum();
        }
        if (din) {
            MapMat dcols(scratch.data(), cg.rows(), cg.cols());
            dcols.noalias() = d * w;
            col2im(scratch.data(), cg, din + n0 * in_stride);
        }
    }
}

struct LayerPlan {
    LayerSpec spec;
    Shape3 in;
    Shape3 out;
    std::size_t offset = 0;  // into the parameter vector
};

std::vector<LayerPlan> plan(const NetworkSpec& spec) {
    const auto shapes = spec.layer_shapes();
    std::vector<LayerPlan> p;
    Shape3 in = spec.input;
    std::size_t off = 0;
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
        p.push_back({spec.layers[i], in, shapes[i], off});
        off += layer_param_count(spec.layers[i], in);
        in = shapes[i];
    }
    return p;
}

ConvGeom geom(int n, const Shape3& in, const Shape3& out, int k, int stride, int pad) {
    return {n, in.h, in.w, in.c, out.c, k, stride, pad, out.h, out.w};
}

template <class T>
struct WorkspaceT {
    int n = 0;
    std::vector<LayerPlan> layers;
    std::vector<std::vector<T>> acts;      // acts[i] = input of layer i; acts.back() = logits
    std::vector<std::vector<int>> pool_index;   // per maxpool layer
    std::vector<std::vector<T>> res_mid;   // relu(conv1(x)) per residual layer
    std::vector<T> scratch;
};

// Training and gradients run in double; plain inference runs in float.
using Workspace = WorkspaceT<double>;

// Max-pool without winner bookkeeping; optionally applies relu to the result.
template <class T>
void max_pool_plain(const T* in, int n, const Shape3& s, int k, T* out, bool relu) {
    const int ho = s.h / k;
    const int wo = s.w / k;
    const int c = s.c;
    for (int b = 0; b < n; ++b) {
        for (int oy = 0; oy < ho; ++oy) {
            for (int ox = 0; ox < wo; ++ox) {
                T* o = out + ((static_cast<std::size_t>(b) * ho + oy) * wo + ox) * c;
                const T* first = in + ((static_cast<std::size_t>(b) * s.h + oy * k) * s.w + ox * k) * c;
                std::copy(first, first + c, o);
                for (int ky = 0; ky < k; ++ky) {
                    for (int kx = 0; kx < k; ++kx) {
                        const T* src = in + ((static_cast<std::size_t>(b) * s.h + oy * k + ky) * s.w + ox * k + kx) * c;
                        for (int ch = 0; ch < c; ++ch) o[ch] = std::max(o[ch], src[ch]);
                    }
                }
                if (relu) {
                    for (int ch = 0; ch < c; ++ch) o[ch] = std::max(o[ch], T(0));
                }
            }
        }
    }
}

template <class T>
void run_forward(const NetworkSpec& spec, std::span<const T> params, const Tensor& batch, WorkspaceT<T>& ws,
                 bool keep_state = true) {
    if (batch.rank() != 4 || batch.dim(1) != spec.input.h || batch.dim(2) != spec.input.w ||
        batch.dim(3) != spec.input.c) {
        throw InvalidInput("batch shape " + batch.shape_string() + " does not match network input " +
                           dims(spec.input));
    }
    if (params.size() != spec.param_count()) throw InvalidInput("parameter count mismatch");
    ws.n = batch.dim(0);
    ws.layers = plan(spec);
    const std::size_t L = ws.layers.size();
    ws.acts.resize(L + 1);
    ws.pool_index.resize(L);
    ws.res_mid.resize(L);
    for (auto& m : ws.res_mid) m.clear();
    ws.acts[0].assign(batch.values().begin(), batch.values().end());
    const int n = ws.n;
    bool relu_after_pool = false;

    for (std::size_t i = 0; i < L; ++i) {
        const auto& lp = ws.layers[i];
        const auto& in = ws.acts[i];
        auto& out = ws.acts[i + 1];
        out.resize(static_cast<std::size_t>(n) * lp.out.size());
        const T* p = params.data() + lp.offset;
        switch (lp.spec.kind) {
            case LayerKind::Conv2d: {
                const auto g = geom(n, lp.in, lp.out, lp.spec.kernel, lp.spec.stride, lp.spec.pad);
                conv_forward(in.data(), p, p + static_cast<std::size_t>(g.cout) * g.cols(), g, ws.scratch, out.data());
                break;
            }
            case LayerKind::Relu:
                // Without backward state, relu then max-pool is computed as
                // max-pool then relu (they commute) on a quarter of the values.
                if (!keep_state && i + 1 < L && ws.layers[i + 1].spec.kind == LayerKind::MaxPool2d) {
                    std::swap(ws.acts[i], ws.acts[i + 1]);
                    relu_after_pool = true;
                    break;
                }
                for (std::size_t j = 0; j < in.size(); ++j) out[j] = std::max(in[j], T(0));
                break;
            case LayerKind::MaxPool2d: {
                const int k = lp.spec.kernel;
                const int c = lp.out.c;
                if (!keep_state) {
                    max_pool_plain(in.data(), n, lp.in, k, out.data(), relu_after_pool);
                    relu_after_pool = false;
                    break;
                }
                auto& idx = ws.pool_index[i];
                idx.resize(out.size());
                std::size_t o = 0;
                for (int b = 0; b < n; ++b) {
                    for (int oy = 0; oy < lp.out.h; ++oy) {
                        for (int ox = 0; ox < lp.out.w; ++ox, o += static_cast<std::size_t>(c)) {
                            T* best = out.data() + o;
                            int* best_i = idx.data() + o;
                            for (int ky = 0; ky < k; ++ky) {
                                for (int kx = 0; kx < k; ++kx) {
                                    const int base = ((b * lp.in.h + oy * k + ky) * lp.in.w + ox * k + kx) * c;
                                    const T* src = in.data() + base;
                                    if (ky == 0 && kx == 0) {
                                        for (int ch = 0; ch < c; ++ch) {
                                            best[ch] = src[ch];
                                            best_i[ch] = base + ch;
                                        }
                                        continue;
                                    }
                                    for (int ch = 0; ch < c; ++ch) {
                                        if (src[ch] > best[ch]) {
                                            best[ch] = src[ch];
                                            best_i[ch] = base + ch;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                break;
            }
            case LayerKind::Flatten:
                out = in;
                break;
            case LayerKind::Dense: {
                const int din = lp.in.size();
                const int dout = lp.spec.units;
                ConstMapMatT<T> x(in.data(), n, din);
                ConstMapMatT<T> w(p, dout, din);
                MapMatT<T> o(out.data(), n, dout);
                o.noalias() = x * w.transpose();
                o.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(p + static_cast<std::size_t>(dout) * din, dout);
                break;
            }
            case LayerKind::Residual: {
                const auto g = geom(n, lp.in, lp.out, 3, 1, 1);
                const std::size_t wsz = static_cast<std::size_t>(g.cout) * g.cols();
                auto& mid = ws.res_mid[i];
                mid.resize(out.size());
                conv_forward(in.data(), p, p + wsz, g, ws.scratch, mid.data());
                for (T& v : mid) v = v > T(0) ? v : T(0);
                const T* p2 = p + wsz + g.cout;
                conv_forward(mid.data(), p2, p2 + wsz, g, ws.scratch, out.data());
                for (std::size_t j = 0; j < out.size(); ++j) {
                    const T s = out[j] + in[j];
                    out[j] = s > T(0) ? s : T(0);
                }
                break;
            }
        }
    }
}

// Backpropagate d loss / d logits. grad_params (accumulated) and grad_input
// (overwritten) are optional.
void run_backward(Workspace& ws, std::span<const double> params, std::vector<double> dout,
                  double* grad_params, std::vector<double>* grad_input) {
    const int n = ws.n;
    for (std::size_t ii = ws.layers.size(); ii-- > 0;) {
        const auto& lp = ws.layers[ii];
        const auto& in = ws.acts[ii];
        const auto& out = ws.acts[ii + 1];
        const bool need_din = ii > 0 || grad_input != nullptr;
        std::vector<double> din(need_din ? in.size() : 0, 0.0);
        const double* p = params.data() + lp.offset;
        double* gp = grad_params ? grad_params + lp.offset : nullptr;
        switch (lp.spec.kind) {
            case LayerKind::Conv2d: {
                const auto g = geom(n, lp.in, lp.out, lp.spec.kernel, lp.spec.stride, lp.spec.pad);
                const std::size_t wsz = static_cast<std::size_t>(g.cout) * g.cols();
                conv_backward(in.data(), p, g, dout.data(), ws.scratch, gp, gp ? gp + wsz : nullptr,
                              need_din ? din.data() : nullptr);
                break;
            }
            case LayerKind::Relu:
                if (need_din) {
                    for (std::size_t j = 0; j < din.size(); ++j) din[j] = out[j] > 0.0 ? dout[j] : 0.0;
                }
                break;
            case LayerKind::MaxPool2d:
                if (need_din) {
                    const auto& idx = ws.pool_index[ii];
                    for (std::size_t j = 0; j < dout.size(); ++j) din[static_cast<std::size_t>(idx[j])] += dout[j];
                }
                break;
            case LayerKind::Flatten:
                if (need_din) din = dout;
                break;
            case LayerKind::Dense: {
                const int dn = lp.in.size();
                const int units = lp.spec.units;
                ConstMapMat d(dout.data(), n, units);
                if (gp) {
                    ConstMapMat x(in.data(), n, dn);
                    MapMat gw(gp, units, dn);
                    gw.noalias() += d.transpose() * x;
                    Eigen::Map<Eigen::RowVectorXd>(gp + static_cast<std::size_t>(units) * dn, units) += d.colwise().sum();
                }
                if (need_din) {
                    ConstMapMat w(p, units, dn);
                    MapMat dx(din.data(), n, dn);
                    dx.noalias() = d * w;
                }
                break;
            }
            case LayerKind::Residual: {
                const auto g = geom(n, lp.in, lp.out, 3, 1, 1);
                const std::size_t wsz = static_cast<std::size_t>(g.cout) * g.cols();
                const auto& mid = ws.res_mid[ii];
                std::vector<double> gsum(dout.size());
                for (std::size_t j = 0; j < dout.size(); ++j) gsum[j] = out[j] > 0.0 ? dout[j] : 0.0;
                std::vector<double> dmid(mid.size());
                const double* p2 = p + wsz + g.cout;
                double* gp2 = gp ? gp + wsz + g.cout : nullptr;
                conv_backward(mid.data(), p2, g, gsum.data(), ws.scratch, gp2, gp2 ? gp2 + wsz : nullptr, dmid.data());
                for (std::size_t j = 0; j < dmid.size(); ++j) {
                    if (mid[j] <= 0.0) dmid[j] = 0.0;
                }
                conv_backward(in.data(), p, g, dmid.data(), ws.scratch, gp, gp ? gp + wsz : nullptr,
                              need_din ? din.data() : nullptr);
                if (need_din) {
                    for (std::size_t j = 0; j < din.size(); ++j) din[j] += gsum[j];
                }
                break;
            }
        }
        dout = std::move(din);
    }
    if (grad_input) *grad_input = std::move(dout);
}

std::uint64_t pattern_hash(const Workspace& ws) {
    std::uint64_t h = 0x243f6a8885a308d3ULL;
    auto mix = [&h](std::uint64_t v) { h = splitmix64(h ^ v); };
    for (std::size_t i = 0; i < ws.layers.size(); ++i) {
        switch (ws.layers[i].spec.kind) {
            case LayerKind::Relu:
            case LayerKind::Residual: {
                std::uint64_t bits = 0;
                int nbits = 0;
                auto push = [&](bool b) {
                    bits = (bits << 1) | static_cast<std::uint64_t>(b);
                    if (++nbits == 64) {
                        mix(bits);
                        bits = 0;
                        nbits = 0;
                    }
                };
                for (double v : ws.acts[i + 1]) push(v > 0.0);
                for (double v : ws.res_mid[i]) push(v > 0.0);
                mix(bits);
                break;
            }
            case LayerKind::MaxPool2d:
                for (int idx : ws.pool_index[i]) mix(static_cast<std::uint64_t>(idx));
                break;
            default:
                break;
        }
    }
    return h;
}

std::vector<double> to_double(std::span<const float> v) { return {v.begin(), v.end()}; }

void check_labels(std::span<const int> labels, int n, int classes) {
    if (static_cast<int>(labels.size()) != n) throw InvalidInput("label count does not match batch size");
    for (int y : labels) {
        if (y < 0 || y >= classes) {
            throw InvalidInput("label " + std::to_string(y) + " outside [0, " + std::to_string(classes) + ")");
        }
    }
}

// Row-wise log-softmax cross-entropy; fills dlogits with (softmax - onehot) * scale.
std::vector<double> cross_entropy(const std::vector<double>& logits, int n, int c, std::span<const int> labels,
                                  double scale, std::vector<double>* dlogits) {
    std::vector<double> losses(static_cast<std::size_t>(n));
    if (dlogits) dlogits->assign(logits.size(), 0.0);
    for (int i = 0; i < n; ++i) {
        const double* row = logits.data() + static_cast<std::size_t>(i) * c;
        const double mx = *std::max_element(row, row + c);
        double sum = 0.0;
        for (int j = 0; j < c; ++j) sum += std::exp(row[j] - mx);
        const double lse = mx + std::log(sum);
        losses[static_cast<std::size_t>(i)] = lse - row[labels[static_cast<std::size_t>(i)]];
        if (dlogits) {
            double* d = dlogits->data() + static_cast<std::size_t>(i) * c;
            for (int j = 0; j < c; ++j) d[j] = std::exp(row[j] - lse) * scale;
            d[labels[static_cast<std::size_t>(i)]] -= scale;
        }
    }
    return losses;
}

// Whole-network activations of a few images fit in cache; larger batches are
// processed in slices of this many samples.
constexpr int kCacheBatch = 16;

}  // namespace

Tensor forward(const ModelCheckpoint& model, const Tensor& batch) {
    thread_local WorkspaceT<float> ws;
    if (batch.rank() != 4) throw InvalidInput("forward expects an N x H x W x C batch");
    const int n = batch.dim(0);
    std::vector<float> out;
    out.reserve(static_cast<std::size_t>(n) * model.spec.classes);
    for (int b = 0; b == 0 || b < n; b += kCacheBatch) {
        run_forward<float>(model.spec, model.params,
                           n <= kCacheBatch ? batch : batch.slice(b, std::min(n, b + kCacheBatch)), ws, false);
        out.insert(out.end(), ws.acts.back().begin(), ws.acts.back().end());
    }
    return Tensor({n, model.spec.classes}, std::move(out));
}

Tensor forward_chunked(const ModelCheckpoint& model, const Tensor& images, int chunk) {
    if (images.rank() != 4) throw InvalidInput("forward_chunked expects an N x H x W x C tensor");
    const int n = images.dim(0);
    std::vector<float> out;
    out.reserve(static_cast<std::size_t>(n) * model.spec.classes);
    for (int b = 0; b < n; b += chunk) {
        const auto logits = forward(model, images.slice(b, std::min(n, b + chunk)));
        out.insert(out.end(), logits.values().begin(), logits.values().end());
    }
    return Tensor({n, model.spec.classes}, std::move(out));
}

double mean_loss(const NetworkSpec& spec, std::span<const double> params, const Tensor& batch,
                 std::span<const int> labels, std::uint64_t* activation_pattern) {
    thread_local Workspace ws;
    run_forward<double>(spec, params, batch, ws);
    check_labels(labels, ws.n, spec.classes);
    if (activation_pattern) *activation_pattern = pattern_hash(ws);
    const auto losses = cross_entropy(ws.acts.back(), ws.n, spec.classes, labels, 0.0, nullptr);
    double s = 0.0;
    for (double l : losses) s += l;
    return s / ws.n;
}

LossAndGrad loss_and_param_gradients(const NetworkSpec& spec, std::span<const double> params,
                                     const Tensor& batch, std::span<const int> labels) {
    thread_local Workspace ws;
    if (batch.rank() != 4) throw InvalidInput("batch must be N x H x W x C");
    const int n = batch.dim(0);
    check_labels(labels, n, spec.classes);
    LossAndGrad r;
    r.grads.assign(params.size(), 0.0);
    for (int b = 0; b == 0 || b < n; b += kCacheBatch) {
        const int e = std::min(n, b + kCacheBatch);
        run_forward<double>(spec, params, n <= kCacheBatch ? batch : batch.slice(b, e), ws);
        const auto lab = labels.subspan(static_cast<std::size_t>(b), static_cast<std::size_t>(e - b));
        std::vector<double> dlogits;
        const auto losses = cross_entropy(ws.acts.back(), ws.n, spec.classes, lab, 1.0 / n, &dlogits);
        for (double l : losses) r.loss += l;
        run_backward(ws, params, std::move(dlogits), r.grads.data(), nullptr);
    }
    r.loss /= n;
    return r;
}

LossAndGrad loss_and_param_gradients(const ModelCheckpoint& model, const Tensor& batch,
                                     std::span<const int> labels) {
    const auto params = to_double(model.params);
    return loss_and_param_gradients(model.spec, params, batch, labels);
}

std::vector<double> per_sample_loss(const ModelCheckpoint& model, const Tensor& batch,
                                    std::span<const int> labels) {
    const auto params = to_double(model.params);
    thread_local Workspace ws;
    run_forward<double>(model.spec, params, batch, ws);
    check_labels(labels, ws.n, model.spec.classes);
    return cross_entropy(ws.acts.back(), ws.n, model.spec.classes, labels, 0.0, nullptr);
}

Tensor input_gradients(const ModelCheckpoint& model, const Tensor& batch, std::span<const int> labels,
                       std::vector<double>* losses) {
    const auto params = to_double(model.params);
    thread_local Workspace ws;
    if (batch.rank() != 4) throw InvalidInput("input_gradients expects an N x H x W x C batch");
    const int n = batch.dim(0);
    check_labels(labels, n, model.spec.classes);
    std::vector<float> grads;
    grads.reserve(batch.size());
    if (losses) losses->clear();
    for (int b = 0; b == 0 || b < n; b += kCacheBatch) {
        const int e = std::min(n, b + kCacheBatch);
        run_forward<double>(model.spec, params, n <= kCacheBatch ? batch : batch.slice(b, e), ws);
        const auto lab = labels.subspan(static_cast<std::size_t>(b), static_cast<std::size_t>(e - b));
        std::vector<double> dlogits;
        auto l = cross_entropy(ws.acts.back(), ws.n, model.spec.classes, lab, 1.0, &dlogits);
        if (losses) losses->insert(losses->end(), l.begin(), l.end());
        std::vector<double> gin;
        run_backward(ws, params, std::move(dlogits), nullptr, &gin);
        grads.insert(grads.end(), gin.begin(), gin.end());
    }
    return Tensor(batch.shape(), std::move(grads));
}

Tensor input_gradient(const ModelCheckpoint& model, const Tensor& x, int label) {
    if (x.rank() != 3) throw InvalidInput("input_gradient expects an H x W x C image");
    const int labels[] = {label};
    const auto g = input_gradients(model, x.reshaped({1, x.dim(0), x.dim(1), x.dim(2)}), labels);
    return g.reshaped(x.shape());
}

std::vector<double> softmax(std::span<const float> logits) {
    std::vector<double> p(logits.begin(), logits.end());
    if (p.empty()) return p;
    const double mx = *std::max_element(p.begin(), p.end());
    double sum = 0.0;
    for (double& v : p) sum += (v = std::exp(v - mx));
    for (double& v : p) v /= sum;
    return p;
}

std::vector<int> argmax_rows(const Tensor& logits) {
    if (logits.rank() != 2) throw InvalidInput("argmax_rows expects an N x c tensor");
    const int n = logits.dim(0);
    const int c = logits.dim(1);
    std::vector<int> out(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        int best = 0;
        for (int j = 1; j < c; ++j) {
            if (logits[static_cast<std::size_t>(i) * c + j] > logits[static_cast<std::size_t>(i) * c + best]) best = j;
        }
        out[static_cast<std::size_t>(i)] = best;
    }
    return out;
}

}  // namespace afp
