#pragma once

#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "carrygpt/common.hpp"

namespace carrygpt {

enum class AlphaMode { fixed, neighborhood, grid, balance };

inline std::string alpha_mode_name(AlphaMode m) {
    switch (m) {
        case AlphaMode::fixed: return "fixed";
        case AlphaMode::neighborhood: return "neighborhood";
        case AlphaMode::grid: return "grid";
        default: return "balance";
    }
}

inline AlphaMode alpha_mode_from_name(const std::string& s) {
    if (s == "fixed") return AlphaMode::fixed;
    if (s == "neighborhood") return AlphaMode::neighborhood;
    if (s == "grid") return AlphaMode::grid;
    if (s == "balance") return AlphaMode::balance;
    throw ConfigError("unknown alpha mode: " + s);
}

struct AlphaCandidate {
    double alpha = 0;
    double j_val = 0;
};

struct AlphaEpochRecord {
    int epoch = 0;
    std::vector<AlphaCandidate> candidates;
    double chosen = 0;
};

// Rescale-factor state: current value, selection mode, last candidate set
// and the per-epoch selection history.
struct AlphaState {
    double alpha = 0.1;
    AlphaMode mode = AlphaMode::grid;
    std::vector<double> candidates;
    std::vector<AlphaEpochRecord> history;
};

using AlphaEvaluator = std::function<double(double)>;

struct AlphaSelection {
    double alpha = 0;
    std::vector<AlphaCandidate> evaluated;
};

namespace detail {

// argmin over candidates; ties prefer `preferred` if among the minima,
// otherwise the smallest alpha.
inline double argmin_alpha(const std::vector<AlphaCandidate>& cands, std::optional<double> preferred) {
    double best_j = cands.front().j_val;
    for (const auto& c : cands) best_j = std::min(best_j, c.j_val);
    if (preferred)
        for (const auto& c : cands)
            if (c.j_val == best_j && c.alpha == *preferred) return c.alpha;
    double best_alpha = 0;
    bool found = false;
    for (const auto& c : cands)
        if (c.j_val == best_j && (!found || c.alpha < best_alpha)) {
            best_alpha = c.alpha;
            found = true;
        }
    return best_alpha;
}

} // namespace detail

// Candidates {0.5a, a, 2a}; argmin of validation loss; ties keep a, then
// prefer the smaller candidate.
inline AlphaSelection select_alpha_neighborhood(double alpha_t, const AlphaEvaluator& j_val) {
    if (alpha_t <= 0) throw ConfigError("select_alpha_neighborhood: alpha_t must be positive");
    AlphaSelection sel;
    for (double a : {0.5 * alpha_t, alpha_t, 2.0 * alpha_t}) sel.evaluated.push_back({a, j_val(a)});
    sel.alpha = detail::argmin_alpha(sel.evaluated, alpha_t);
    return sel;
}

inline const std::vector<double>& alpha_grid_values() {
    static const std::vector<double> grid{0.3, 0.5, 1.0, 2.0, 3.0};
    return grid;
}

// Fixed grid; when 1.0 wins, narrow to the square roots of the grid and
// return that argmin. Ties prefer 1.0, then the smaller candidate.
inline AlphaSelection select_alpha_grid(const AlphaEvaluator& j_val) {
    AlphaSelection sel;
    for (double a : alpha_grid_values()) sel.evaluated.push_back({a, j_val(a)});
    const double coarse = detail::argmin_alpha(sel.evaluated, 1.0);
    if (coarse != 1.0) {
        sel.alpha = coarse;
        return sel;
    }
    double j_at_one = 0;
    for (const auto& c : sel.evaluated)
        if (c.alpha == 1.0) j_at_one = c.j_val;
    std::vector<AlphaCandidate> narrowed;
    for (double g : alpha_grid_values()) {
        const double a = std::sqrt(g);
        if (a == 1.0)
            narrowed.push_back({1.0, j_at_one});
        else
            narrowed.push_back({a, j_val(a)});
    }
    sel.evaluated.insert(sel.evaluated.end(), narrowed.begin(), narrowed.end());
    sel.alpha = detail::argmin_alpha(narrowed, 1.0);
    return sel;
}

struct QuasiConvexReport {
    bool quasi_convex = true;
    // first violating bracket: J(samples[mid]) > max(J(samples[lo]), J(samples[hi])) + tol
    int lo = -1, mid = -1, hi = -1;
};

// Discrete quasi-convexity check over (alpha, J) samples sorted by alpha.
inline QuasiConvexReport check_quasiconvex(const std::vector<AlphaCandidate>& samples, double tol = 1e-9) {
    if (samples.size() < 3) throw ConfigError("check_quasiconvex: need at least 3 samples");
    for (std::size_t i = 1; i < samples.size(); ++i)
        if (samples[i].alpha <= samples[i - 1].alpha)
            throw ConfigError("check_quasiconvex: alphas must be strictly increasing");
    const int n = static_cast<int>(samples.size());
    for (int mid = 1; mid + 1 < n; ++mid)
        for (int lo = 0; lo < mid; ++lo)
            for (int hi = mid + 1; hi < n; ++hi) {
                const double bound =
                    std::max(samples[static_cast<std::size_t>(lo)].j_val, samples[static_cast<std::size_t>(hi)].j_val);
                if (samples[static_cast<std::size_t>(mid)].j_val > bound + tol)
                    return QuasiConvexReport{false, lo, mid, hi};
            }
    return QuasiConvexReport{};
}

struct BalanceProbe {
    double alpha = 0;
    double j_custom = 0;
    double j_general = 0;
};

struct BalanceReport {
    double alpha = 0;
    bool stopped_by_rule = false; // false: ran to the floor
    std::vector<BalanceProbe> probes;
};

// Shrinks alpha from alpha_start; stops when the next step would improve
// the general loss but worsen the custom loss, or when alpha would drop
// below the floor.
inline BalanceReport balance_point_search(const AlphaEvaluator& j_custom, const AlphaEvaluator& j_general,
                                          double alpha_start = 1.0, double shrink = 0.5, double floor = 1e-3) {
    if (shrink <= 0 || shrink >= 1) throw ConfigError("balance_point_search: shrink must be in (0, 1)");
    if (alpha_start <= 0) throw ConfigError("balance_point_search: alpha_start must be positive");
    BalanceReport report;
    double alpha = alpha_start;
    BalanceProbe cur{alpha, j_custom(alpha), j_general(alpha)};
    report.probes.push_back(cur);
    while (true) {
        const double next = shrink * alpha;
        if (next < floor) {
            report.alpha = alpha;
            report.stopped_by_rule = false;
            return report;
        }
        BalanceProbe probe{next, j_custom(next), j_general(next)};
        report.probes.push_back(probe);
        if (probe.j_general < cur.j_general && probe.j_custom > cur.j_custom) {
            report.alpha = alpha;
            report.stopped_by_rule = true;
            return report;
        }
        alpha = next;
        cur = probe;
    }
}

} // namespace carrygpt
