#include "afp/attacks.hpp"

#include "afp/adam.hpp"
#include "afp/errors.hpp"
#include "afp/rng.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace afp {

namespace {

float sign_of(float g) { return g > 0.0f ? 1.0f : (g < 0.0f ? -1.0f : 0.0f); }

float clamp01(float v) { return std::clamp(v, 0.0f, 1.0f); }

void check_batch(const Tensor& images, std::span<const int> labels) {
    if (images.rank() != 4) throw InvalidInput("attack expects an N x H x W x C batch, got " + images.shape_string());
    if (static_cast<int>(labels.size()) != images.dim(0)) throw InvalidInput("label count does not match batch size");
}

void check_image(const Tensor& x) {
    if (x.rank() != 3) throw InvalidInput("attack expects an H x W x C image, got " + x.shape_string());
    for (float v : x.values()) {
        if (!(v >= 0.0f && v <= 1.0f)) throw InvalidInput("image values must lie in [0, 1]");
    }
}

Tensor as_batch(const Tensor& x) { return x.reshaped({1, x.dim(0), x.dim(1), x.dim(2)}); }

std::size_t sample_size(const Tensor& batch) {
    return batch.dim(0) == 0 ? 0 : batch.size() / static_cast<std::size_t>(batch.dim(0));
}

// Shared tail of the single-image entry points: canonical delta plus the
// victim's clean and attacked predictions.
AdversarialRecord make_record(const ModelCheckpoint& victim, const Tensor& x, const Tensor& x_adv, int label,
                              const AttackClass& cls, int patch_target) {
    AdversarialRecord r;
    r.true_label = label;
    r.attack = cls;
    r.benign = x;
    canonicalize(x, x_adv, r.attacked, r.delta);
    const Tensor pair[] = {x, r.attacked};
    const auto preds = argmax_rows(forward(victim, stack(pair)));
    r.label_before = preds[0];
    r.label_after = preds[1];
    r.success = attack_succeeded(cls, label, r.label_before, r.label_after, patch_target);
    return r;
}

}  // namespace

void canonicalize(const Tensor& x, const Tensor& x_adv, Tensor& attacked, Tensor& delta) {
    if (x.shape() != x_adv.shape()) throw InvalidInput("benign and attacked shapes differ");
    delta = Tensor(x.shape());
    attacked = Tensor(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
        delta[i] = x_adv[i] - x[i];
        attacked[i] = clamp01(x[i] + delta[i]);
    }
}

bool attack_succeeded(const AttackClass& c, int true_label, int before, int after, int patch_target) {
    if (c.algorithm == Algorithm::Patch) return after == patch_target;
    return before == true_label && after != true_label;
}

// ---------------------------------------------------------------------------
// FGSM / PGD
// ---------------------------------------------------------------------------

Tensor fgsm_batch(const ModelCheckpoint& victim, const Tensor& images, std::span<const int> labels, double eps) {
    check_batch(images, labels);
    if (!(eps >= 0.0)) throw InvalidInput("fgsm needs eps >= 0");
    Tensor out = images;
    if (eps == 0.0) return out;
    const auto g = input_gradients(victim, images, labels);
    const auto e = static_cast<float>(eps);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = clamp01(images[i] + e * sign_of(g[i]));
    return out;
}

void project_linf(std::span<const float> x, std::span<float> x_adv, double eps) {
    const auto e = static_cast<float>(eps);
    for (std::size_t i = 0; i < x.size(); ++i) {
        x_adv[i] = clamp01(std::clamp(x_adv[i], x[i] - e, x[i] + e));
    }
}

void project_l2(std::span<const float> x, std::span<float> x_adv, double eps) {
    double n2 = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double d = static_cast<double>(x_adv[i]) - x[i];
        n2 += d * d;
    }
    const double norm = std::sqrt(n2);
    if (norm > eps) {
        const double scale = eps / norm;
        for (std::size_t i = 0; i < x.size(); ++i) {
            const double d = static_cast<double>(x_adv[i]) - x[i];
            x_adv[i] = static_cast<float>(x[i] + d * scale);
        }
    }
    for (float& v : x_adv) v = clamp01(v);
}

void PgdConfig::validate() const {
    if (norm != Norm::Linf && norm != Norm::L2) throw InvalidInput("pgd norm must be linf or l2");
    if (!(eps >= 0.0)) throw InvalidInput("pgd needs eps >= 0");
    if (steps < 1) throw InvalidInput("pgd needs steps >= 1");
}

Tensor pgd_batch(const ModelCheckpoint& victim, const Tensor& images, std::span<const int> labels,
                 const PgdConfig& cfg) {
    check_batch(images, labels);
    cfg.validate();
    const double alpha = cfg.resolved_step_size();
    const auto a = static_cast<float>(alpha);
    const std::size_t d = sample_size(images);
    Tensor adv = images;
    for (int t = 0; t < cfg.steps; ++t) {
        const auto g = input_gradients(victim, adv, labels);
        for (int n = 0; n < images.dim(0); ++n) {
            const std::size_t off = static_cast<std::size_t>(n) * d;
            const auto x = images.data().subspan(off, d);
            auto xa = adv.data().subspan(off, d);
            const auto gi = g.data().subspan(off, d);
            if (cfg.norm == Norm::Linf) {
                for (std::size_t i = 0; i < d; ++i) xa[i] = xa[i] + a * sign_of(gi[i]);
                project_linf(x, xa, cfg.eps);
            } else {
                const double gn = l2_norm(gi);
                if (gn == 0.0) continue;
                for (std::size_t i = 0; i < d; ++i) xa[i] = static_cast<float>(xa[i] + alpha * gi[i] / gn);
                project_l2(x, xa, cfg.eps);
            }
        }
    }
    return adv;
}

AdversarialRecord fgsm(const ModelCheckpoint& victim, const Tensor& x, int label, double eps) {
    check_image(x);
    const int labels[] = {label};
    const auto adv = fgsm_batch(victim, as_batch(x), labels, eps).reshaped(x.shape());
    auto r = make_record(victim, x, adv, label, {Algorithm::Fgsm, Norm::Linf, eps, -1}, -1);
    r.work = 1;
    return r;
}

AdversarialRecord pgd(const ModelCheckpoint& victim, const Tensor& x, int label, const PgdConfig& cfg) {
    check_image(x);
    const int labels[] = {label};
    const auto adv = pgd_batch(victim, as_batch(x), labels, cfg).reshaped(x.shape());
    auto r = make_record(victim, x, adv, label, {Algorithm::Pgd, cfg.norm, cfg.eps, -1}, -1);
    r.work = cfg.steps;
    return r;
}

// ---------------------------------------------------------------------------
// Square attack
// ---------------------------------------------------------------------------

Tensor ScoreOracle::query(const Tensor& batch) {
    queries_ += batch.rank() == 4 ? batch.dim(0) : 1;
    return scores(batch);
}

Tensor VictimOracle::scores(const Tensor& batch) { return forward(victim_, batch); }

void SquareConfig::validate() const {
    if (query_budget < 1) throw InvalidInput("square attack needs a query budget >= 1");
    if (!(eps >= 0.0)) throw InvalidInput("square attack needs eps >= 0");
    if (!(p_init > 0.0 && p_init <= 1.0)) throw InvalidInput("square attack p_init must lie in (0, 1]");
}

double square_p(int i, int budget, double p_init) {
    static constexpr double kHalvings[] = {0.02, 0.1, 0.25, 0.5};
    const double frac = static_cast<double>(i) / budget;
    double p = p_init;
    for (double h : kHalvings) {
        if (frac >= h) p *= 0.5;
    }
    return p;
}

int square_side(double p, int h, int w) {
    const int s = static_cast<int>(std::ceil(std::sqrt(p * h * w)));
    return std::clamp(s, 1, std::min(h, w));
}

namespace {

// logit_y - max_{j != y} logit_j; negative once the prediction has flipped.
double margin(std::span<const float> logits, int y) {
    double other = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < logits.size(); ++j) {
        if (static_cast<int>(j) != y) other = std::max(other, static_cast<double>(logits[j]));
    }
    return logits[static_cast<std::size_t>(y)] - other;
}

struct SquareState {
    Rng rng;
    Tensor best;  // H x W x C
    double best_margin = 0.0;
    long queries = 0;
    bool done = false;
    std::vector<double> accepted;
};

}  // namespace

std::vector<SquareResult> square_attack_batch(ScoreOracle& oracle, const Tensor& images, std::span<const int> labels,
                                              const SquareConfig& cfg, std::span<const std::uint64_t> seeds) {
    check_batch(images, labels);
    cfg.validate();
    if (seeds.size() != labels.size()) throw InvalidInput("one seed per image required");
    const int n = images.dim(0);
    const int H = images.dim(1);
    const int W = images.dim(2);
    const int C = images.dim(3);
    const auto e = static_cast<float>(cfg.eps);

    std::vector<SquareState> st(static_cast<std::size_t>(n));
    std::vector<Tensor> xs;
    for (int i = 0; i < n; ++i) {
        auto& s = st[static_cast<std::size_t>(i)];
        s.rng.seed(seeds[static_cast<std::size_t>(i)]);
        xs.push_back(images.sample(i));
        s.best = xs.back();
        // vertical stripes: one random sign per (column, channel)
        std::vector<float> stripe(static_cast<std::size_t>(W * C));
        for (float& v : stripe) v = uniform01(s.rng) < 0.5 ? -1.0f : 1.0f;
        for (int y = 0; y < H; ++y) {
            for (int x = 0; x < W; ++x) {
                for (int c = 0; c < C; ++c) {
                    const std::size_t k = (static_cast<std::size_t>(y) * W + x) * C + c;
                    s.best[k] = clamp01(xs.back()[k] + e * stripe[static_cast<std::size_t>(x * C + c)]);
                }
            }
        }
    }
    {
        std::vector<Tensor> init;
        for (const auto& s : st) init.push_back(s.best);
        const auto logits = oracle.query(stack(init));
        for (int i = 0; i < n; ++i) {
            auto& s = st[static_cast<std::size_t>(i)];
            s.best_margin = margin(logits.data().subspan(static_cast<std::size_t>(i) * logits.dim(1),
                                                         static_cast<std::size_t>(logits.dim(1))),
                                   labels[static_cast<std::size_t>(i)]);
            s.queries = 1;
            s.accepted.push_back(s.best_margin);
            s.done = s.best_margin < 0.0 || s.queries >= cfg.query_budget;
        }
    }

    std::vector<int> active;
    std::vector<Tensor> proposals;
    for (;;) {
        active.clear();
        proposals.clear();
        for (int i = 0; i < n; ++i) {
            auto& s = st[static_cast<std::size_t>(i)];
            if (s.done) continue;
            const Tensor& x = xs[static_cast<std::size_t>(i)];
            const int side = square_side(square_p(static_cast<int>(s.queries - 1), cfg.query_budget, cfg.p_init), H, W);
            const int r0 = static_cast<int>(uniform_index(s.rng, static_cast<std::uint64_t>(H - side + 1)));
            const int c0 = static_cast<int>(uniform_index(s.rng, static_cast<std::uint64_t>(W - side + 1)));
            Tensor cand = s.best;
            std::vector<float> signs(static_cast<std::size_t>(C));
            // Redraw signs a few times if the proposal would not change the window.
            for (int attempt = 0; attempt < 10; ++attempt) {
                for (float& v : signs) v = uniform01(s.rng) < 0.5 ? -1.0f : 1.0f;
                bool changed = false;
                for (int y = r0; y < r0 + side; ++y) {
                    for (int xx = c0; xx < c0 + side; ++xx) {
                        for (int c = 0; c < C; ++c) {
                            const std::size_t k = (static_cast<std::size_t>(y) * W + xx) * C + c;
                            cand[k] = clamp01(x[k] + e * signs[static_cast<std::size_t>(c)]);
                            changed = changed || cand[k] != s.best[k];
                        }
                    }
                }
                if (changed) break;
            }
            active.push_back(i);
            proposals.push_back(std::move(cand));
        }
        if (active.empty()) break;
        const auto logits = oracle.query(stack(proposals));
        const auto c = static_cast<std::size_t>(logits.dim(1));
        for (std::size_t a = 0; a < active.size(); ++a) {
            auto& s = st[static_cast<std::size_t>(active[a])];
            const double m = margin(logits.data().subspan(a * c, c), labels[static_cast<std::size_t>(active[a])]);
            ++s.queries;
            if (m < s.best_margin) {
                s.best_margin = m;
                s.best = std::move(proposals[a]);
                s.accepted.push_back(m);
            }
            s.done = s.best_margin < 0.0 || s.queries >= cfg.query_budget;
        }
    }

    std::vector<SquareResult> out;
    out.reserve(st.size());
    for (auto& s : st) out.push_back({std::move(s.best), s.queries, s.best_margin < 0.0, std::move(s.accepted)});
    return out;
}

AdversarialRecord square_attack(const ModelCheckpoint& victim, const Tensor& x, int label, const SquareConfig& cfg,
                                std::uint64_t seed) {
    check_image(x);
    VictimOracle oracle(victim);
    const int labels[] = {label};
    const std::uint64_t seeds[] = {seed};
    auto res = square_attack_batch(oracle, as_batch(x), labels, cfg, seeds);
    auto r = make_record(victim, x, res[0].attacked, label, {Algorithm::Square, Norm::Linf, cfg.eps, -1}, -1);
    r.work = res[0].queries;
    r.seed = seed;
    return r;
}

// ---------------------------------------------------------------------------
// Universal patch
// ---------------------------------------------------------------------------

int PatchConfig::resolved_side(int h, int w) const {
    return side > 0 ? side : static_cast<int>(std::ceil(0.3 * std::min(h, w)));
}

PatchLocation patch_location(int h, int w, int side, std::uint64_t location_seed) {
    if (side > h || side > w) throw InvalidInput("patch larger than image");
    Rng rng(location_seed);
    PatchLocation at;
    at.row = static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(h - side + 1)));
    at.col = static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(w - side + 1)));
    return at;
}

Tensor paste_patch(const Tensor& x, const Tensor& patch, PatchLocation at) {
    if (x.rank() != 3 || patch.rank() != 3) throw InvalidInput("paste_patch expects rank-3 image and patch");
    const int H = x.dim(0);
    const int W = x.dim(1);
    const int C = x.dim(2);
    const int ph = patch.dim(0);
    const int pw = patch.dim(1);
    if (patch.dim(2) != C) throw InvalidInput("patch channel count does not match image");
    if (ph > H || pw > W) throw InvalidInput("patch larger than image");
    if (at.row < 0 || at.col < 0 || at.row + ph > H || at.col + pw > W) throw InvalidInput("patch outside image");
    Tensor out = x;
    for (int y = 0; y < ph; ++y) {
        std::copy_n(patch.values().begin() + static_cast<std::ptrdiff_t>(y * pw * C), pw * C,
                    out.data().begin() + static_cast<std::ptrdiff_t>(((at.row + y) * W + at.col) * C));
    }
    return out;
}

namespace {

// Pastes the patch into every image at the given locations.
Tensor paste_all(const Tensor& images, std::span<const int> rows, const Tensor& patch,
                 std::span<const PatchLocation> at) {
    std::vector<Tensor> out;
    out.reserve(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) out.push_back(paste_patch(images.sample(rows[i]), patch, at[i]));
    return stack(out);
}

double mean_log_prob(const ModelCheckpoint& victim, const Tensor& batch, int target) {
    const std::vector<int> labels(static_cast<std::size_t>(batch.dim(0)), target);
    const auto losses = per_sample_loss(victim, batch, labels);
    double s = 0.0;
    for (double l : losses) s -= l;
    return s / static_cast<double>(losses.size());
}

}  // namespace

PatchTraining patch_attack_train(const ModelCheckpoint& victim, const Tensor& train_images, const PatchConfig& cfg) {
    if (train_images.rank() != 4 || train_images.dim(0) < 1) throw InvalidInput("patch training needs a nonempty batch");
    const int H = train_images.dim(1);
    const int W = train_images.dim(2);
    const int C = train_images.dim(3);
    const int side = cfg.resolved_side(H, W);
    if (side >= std::min(H, W)) throw InvalidInput("patch side must be smaller than the image");
    if (cfg.target < 0 || cfg.target >= victim.spec.classes) throw InvalidInput("patch target outside class range");
    if (cfg.iters < 0 || cfg.batch_size < 1) throw InvalidInput("patch iters must be >= 0 and batch size >= 1");
    AdamConfig adam;
    adam.learning_rate = cfg.learning_rate;
    adam.validate();

    Rng rng(cfg.seed);
    PatchTraining out;
    out.patch = Tensor({side, side, C});
    for (float& v : out.patch.data()) v = static_cast<float>(uniform01(rng));

    const int n = train_images.dim(0);
    auto draw = [&](Rng& r, int count, std::vector<int>& rows, std::vector<PatchLocation>& at) {
        rows.resize(static_cast<std::size_t>(count));
        at.resize(static_cast<std::size_t>(count));
        for (int i = 0; i < count; ++i) {
            rows[static_cast<std::size_t>(i)] = static_cast<int>(uniform_index(r, static_cast<std::uint64_t>(n)));
            at[static_cast<std::size_t>(i)] = {static_cast<int>(uniform_index(r, static_cast<std::uint64_t>(H - side + 1))),
                                               static_cast<int>(uniform_index(r, static_cast<std::uint64_t>(W - side + 1)))};
        }
    };

    // Fixed evaluation placements, independent of the training stream.
    Rng eval_rng(derive_seed(cfg.seed, {0xe7a1}));
    std::vector<int> eval_rows;
    std::vector<PatchLocation> eval_at;
    draw(eval_rng, std::min(256, std::max(n, 64)), eval_rows, eval_at);
    out.initial_objective = mean_log_prob(victim, paste_all(train_images, eval_rows, out.patch, eval_at), cfg.target);

    AdamState state;
    state.m.assign(out.patch.size(), 0.0f);
    state.v.assign(out.patch.size(), 0.0f);
    const std::vector<int> targets(static_cast<std::size_t>(cfg.batch_size), cfg.target);
    std::vector<int> rows;
    std::vector<PatchLocation> at;
    std::vector<double> grad(out.patch.size());
    for (int it = 0; it < cfg.iters; ++it) {
        draw(rng, cfg.batch_size, rows, at);
        const Tensor batch = paste_all(train_images, rows, out.patch, at);
        std::vector<double> losses;
        const Tensor g = input_gradients(victim, batch, targets, &losses);
        double obj = 0.0;
        for (double l : losses) obj -= l;
        out.objective.push_back(obj / cfg.batch_size);
        // d mean CE / d patch: footprint gradients averaged over the batch
        std::fill(grad.begin(), grad.end(), 0.0);
        for (int b = 0; b < cfg.batch_size; ++b) {
            const auto& p = at[static_cast<std::size_t>(b)];
            for (int y = 0; y < side; ++y) {
                for (int x = 0; x < side * C; ++x) {
                    grad[static_cast<std::size_t>(y * side * C + x)] +=
                        g.at(b, p.row + y, p.col + x / C, x % C) / cfg.batch_size;
                }
            }
        }
        adam_update(out.patch.data(), state, grad, adam);
        for (float& v : out.patch.data()) v = clamp01(v);
    }
    out.final_objective = mean_log_prob(victim, paste_all(train_images, eval_rows, out.patch, eval_at), cfg.target);
    return out;
}

AdversarialRecord patch_apply_at(const ModelCheckpoint& victim, const Tensor& x, int label, const Tensor& patch,
                                 int target, PatchLocation at) {
    check_image(x);
    const Tensor adv = paste_patch(x, patch, at);
    return make_record(victim, x, adv, label, {Algorithm::Patch, Norm::None, std::nullopt, -1}, target);
}

AdversarialRecord patch_apply(const ModelCheckpoint& victim, const Tensor& x, int label, const Tensor& patch,
                              int target, std::uint64_t location_seed) {
    check_image(x);
    if (patch.rank() != 3) throw InvalidInput("patch must be rank 3");
    const auto at = patch_location(x.dim(0), x.dim(1), std::max(patch.dim(0), patch.dim(1)), location_seed);
    auto r = patch_apply_at(victim, x, label, patch, target, at);
    r.seed = location_seed;
    return r;
}

}  // namespace afp
