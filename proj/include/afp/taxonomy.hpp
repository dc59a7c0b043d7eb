#pragma once

#include <optional>
#include <string>
#include <vector>

namespace afp {

enum class Algorithm { Fgsm, Pgd, Square, Patch };
enum class Norm { Linf, L2, None };

std::string to_string(Algorithm a);
std::string to_string(Norm n);

struct AttackClass {
    Algorithm algorithm = Algorithm::Fgsm;
    Norm norm = Norm::Linf;
    std::optional<double> eps;
    int index = 0;

    bool untargeted() const { return algorithm != Algorithm::Patch; }
    // e.g. "pgd-l2-eps0.5", "patch"
    std::string name() const;
};

// Epsilon grids and per-attack budgets for one experiment scale.
struct AttackPreset {
    std::string name;
    std::vector<double> linf_eps;      // FGSM, PGD-Linf, Square-Linf
    std::vector<double> l2_eps;        // PGD-L2
    std::vector<double> l2_extra_eps;  // appended by the expanded taxonomy
    int pgd_steps = 0;
    int square_budget = 0;

    static AttackPreset paper_imagenette();
    static AttackPreset desk();
    static AttackPreset by_name(const std::string& name);
};

// Versioned, append-only mapping (algorithm, norm, eps) -> class index.
// Base: FGSM-Linf x4, PGD-Linf x4, PGD-L2 x4, Square-Linf x4, patch = 17.
// Expanded appends PGD-L2 x4 (indices 17..20) = 21.
class Taxonomy {
public:
    static Taxonomy base(const AttackPreset& preset);
    static Taxonomy expanded(const AttackPreset& preset);

    const std::string& version() const { return version_; }
    int size() const { return static_cast<int>(classes_.size()); }
    const AttackClass& at(int index) const { return classes_.at(static_cast<std::size_t>(index)); }
    const std::vector<AttackClass>& classes() const { return classes_; }
    // -1 when absent.
    int index_of(Algorithm a, Norm n, std::optional<double> eps) const;

private:
    std::string version_;
    std::vector<AttackClass> classes_;
};

}  // namespace afp
