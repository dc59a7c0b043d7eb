#pragma once

#include "afp/dataset.hpp"
#include "afp/network.hpp"
#include "afp/taxonomy.hpp"
#include "afp/tensor.hpp"

#include <cstdint>
#include <span>
#include <vector>

namespace afp {

struct AdversarialRecord {
    std::uint64_t source_id = 0;
    Split split = Split::Train;
    int true_label = 0;
    AttackClass attack;
    Tensor benign;    // x, H x W x C
    Tensor attacked;  // x' = clamp(x + delta, 0, 1)
    Tensor delta;     // x' - x
    bool success = false;
    int label_before = -1;
    int label_after = -1;
    long work = 0;  // gradient steps (FGSM/PGD/patch) or victim queries (Square)
    std::uint64_t seed = 0;
};

// Builds delta = fl(x' - x) and re-derives x' = clamp(fl(x + delta)) so the
// stored triple satisfies x' = clamp(x + delta) exactly.
void canonicalize(const Tensor& x, const Tensor& x_adv, Tensor& attacked, Tensor& delta);

// Success rule: untargeted classes need a correct clean prediction that
// flips; the patch class needs the victim to output `patch_target`.
bool attack_succeeded(const AttackClass& c, int true_label, int before, int after, int patch_target);

// ---------------------------------------------------------------------------
// White-box attacks. Batch forms take N x H x W x C images and return the
// N x H x W x C attacked batch; single-image forms return a full record.
// ---------------------------------------------------------------------------

Tensor fgsm_batch(const ModelCheckpoint& victim, const Tensor& images, std::span<const int> labels, double eps);

// Projection of x_adv onto the eps ball around x (L-inf box or L2 radial
// scaling), followed by clamping to [0, 1]. Operates in place on x_adv.
void project_linf(std::span<const float> x, std::span<float> x_adv, double eps);
void project_l2(std::span<const float> x, std::span<float> x_adv, double eps);

struct PgdConfig {
    Norm norm = Norm::Linf;
    double eps = 0.0;
    int steps = 100;
    double step_size = -1.0;  // < 0: 2.5 * eps / steps

    double resolved_step_size() const { return step_size < 0 ? 2.5 * eps / steps : step_size; }
    void validate() const;
};

Tensor pgd_batch(const ModelCheckpoint& victim, const Tensor& images, std::span<const int> labels,
                 const PgdConfig& cfg);

AdversarialRecord fgsm(const ModelCheckpoint& victim, const Tensor& x, int label, double eps);
AdversarialRecord pgd(const ModelCheckpoint& victim, const Tensor& x, int label, const PgdConfig& cfg);

// ---------------------------------------------------------------------------
// Square attack (score-based black box)
// ---------------------------------------------------------------------------

// Score access only: a batch in, logits out. Every image evaluated counts as
// one query.
class ScoreOracle {
public:
    virtual ~ScoreOracle() = default;
    Tensor query(const Tensor& batch);
    long queries() const { return queries_; }

protected:
    virtual Tensor scores(const Tensor& batch) = 0;

private:
    long queries_ = 0;
};

class VictimOracle final : public ScoreOracle {
public:
    explicit VictimOracle(const ModelCheckpoint& victim) : victim_(victim) {}

protected:
    Tensor scores(const Tensor& batch) override;

private:
    const ModelCheckpoint& victim_;
};

struct SquareConfig {
    double eps = 0.0;
    int query_budget = 2000;
    double p_init = 0.8;
    void validate() const;
};

// Fraction of pixels covered by the square at iteration `i`.
double square_p(int i, int budget, double p_init);
int square_side(double p, int h, int w);

struct SquareResult {
    Tensor attacked;
    long queries = 0;
    bool fooled = false;                    // final margin < 0
    std::vector<double> accepted_margins;   // initial margin, then every accepted proposal
};

// Attacks every image of the batch in lockstep (one oracle call per
// iteration for all unfinished images); image i draws from its own seeds[i].
std::vector<SquareResult> square_attack_batch(ScoreOracle& oracle, const Tensor& images, std::span<const int> labels,
                                              const SquareConfig& cfg, std::span<const std::uint64_t> seeds);

AdversarialRecord square_attack(const ModelCheckpoint& victim, const Tensor& x, int label, const SquareConfig& cfg,
                                std::uint64_t seed);

// ---------------------------------------------------------------------------
// Universal patch
// ---------------------------------------------------------------------------

struct PatchConfig {
    int target = 8;
    int side = 0;  // <= 0: ceil(0.3 * min(H, W))
    int iters = 1000;
    double learning_rate = 0.05;
    int batch_size = 32;
    std::uint64_t seed = 0;

    int resolved_side(int h, int w) const;
};

struct PatchTraining {
    Tensor patch;                          // side x side x C in [0, 1]
    std::vector<double> objective;         // mean target log-prob of each training batch
    double initial_objective = 0.0;        // on a fixed evaluation set, before training
    double final_objective = 0.0;          // same set, after training
};

PatchTraining patch_attack_train(const ModelCheckpoint& victim, const Tensor& train_images, const PatchConfig& cfg);

struct PatchLocation {
    int row = 0;
    int col = 0;
};

PatchLocation patch_location(int h, int w, int side, std::uint64_t location_seed);
// x with the patch pasted at (row, col).
Tensor paste_patch(const Tensor& x, const Tensor& patch, PatchLocation at);

AdversarialRecord patch_apply(const ModelCheckpoint& victim, const Tensor& x, int label, const Tensor& patch,
                              int target, std::uint64_t location_seed);
AdversarialRecord patch_apply_at(const ModelCheckpoint& victim, const Tensor& x, int label, const Tensor& patch,
                                 int target, PatchLocation at);

}  // namespace afp
