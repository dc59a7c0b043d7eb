#include "afp/taxonomy.hpp"

#include "afp/errors.hpp"

#include <cmath>
#include <sstream>

namespace afp {

std::string to_string(Algorithm a) {
    switch (a) {
        case Algorithm::Fgsm: return "fgsm";
        case Algorithm::Pgd: return "pgd";
        case Algorithm::Square: return "square";
        case Algorithm::Patch: return "patch";
    }
    return "?";
}

std::string to_string(Norm n) {
    switch (n) {
        case Norm::Linf: return "linf";
        case Norm::L2: return "l2";
        case Norm::None: return "none";
    }
    return "?";
}

std::string AttackClass::name() const {
    if (algorithm == Algorithm::Patch) return "patch";
    std::ostringstream os;
    os << to_string(algorithm) << '-' << to_string(norm) << "-eps" << *eps;
    return os.str();
}

AttackPreset AttackPreset::paper_imagenette() {
    return {"paper-imagenette", {1 / 255.0, 2 / 255.0, 4 / 255.0, 8 / 255.0}, {0.25, 0.5, 1.0, 2.0},
            {0.1, 0.2, 0.3, 0.4}, 250, 10000};
}

AttackPreset AttackPreset::desk() {
    return {"desk", {0.02, 0.05, 0.1, 0.2}, {0.5, 1.0, 1.5, 2.0}, {0.2, 0.4, 0.6, 0.8}, 100, 2000};
}

AttackPreset AttackPreset::by_name(const std::string& name) {
    if (name == "desk") return desk();
    if (name == "paper-imagenette") return paper_imagenette();
    throw ConfigError("unknown preset '" + name + "' (expected desk or paper-imagenette)");
}

namespace {

void add(std::vector<AttackClass>& out, Algorithm a, Norm n, const std::vector<double>& eps) {
    for (double e : eps) out.push_back({a, n, e, static_cast<int>(out.size())});
}

}  // namespace

Taxonomy Taxonomy::base(const AttackPreset& preset) {
    if (preset.linf_eps.size() != 4 || preset.l2_eps.size() != 4) {
        throw ConfigError("preset must provide four Linf and four L2 epsilons");
    }
    Taxonomy t;
    t.version_ = preset.name + "/base-17";
    add(t.classes_, Algorithm::Fgsm, Norm::Linf, preset.linf_eps);
    add(t.classes_, Algorithm::Pgd, Norm::Linf, preset.linf_eps);
    add(t.classes_, Algorithm::Pgd, Norm::L2, preset.l2_eps);
    add(t.classes_, Algorithm::Square, Norm::Linf, preset.linf_eps);
    t.classes_.push_back({Algorithm::Patch, Norm::None, std::nullopt, static_cast<int>(t.classes_.size())});
    return t;
}

Taxonomy Taxonomy::expanded(const AttackPreset& preset) {
    if (preset.l2_extra_eps.size() != 4) throw ConfigError("expanded taxonomy needs four extra L2 epsilons");
    Taxonomy t = base(preset);
    t.version_ = preset.name + "/expanded-21";
    add(t.classes_, Algorithm::Pgd, Norm::L2, preset.l2_extra_eps);
    return t;
}

int Taxonomy::index_of(Algorithm a, Norm n, std::optional<double> eps) const {
    for (const auto& c : classes_) {
        if (c.algorithm != a || c.norm != n || c.eps.has_value() != eps.has_value()) continue;
        if (!eps || std::fabs(*c.eps - *eps) < 1e-12) return c.index;
    }
    return -1;
}

}  // namespace afp
