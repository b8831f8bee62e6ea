#pragma once

// Layer plans for selective fine-tuning / freezing, and the substitution
// loss-change statistics that validate them.

#include <algorithm>
#include <cmath>
#include <set>
#include <string>
#include <vector>

#include "error.hpp"
#include "similarity.hpp"
#include "stats.hpp"

namespace critlayers {

struct LossEntry {
    std::size_t layer = 0;
    double loss = 0.0;
};

// Substituted-window losses of a fine-tuned model: entries[i].loss is the
// test loss after replacing the 2k+1 layers around entries[i].layer with
// their pre-fine-tuning counterparts. base_loss is the unmodified tuned loss.
struct LossTable {
    std::string dataset_id;
    double base_loss = 0.0;
    int k = kDefaultWindow;
    std::vector<LossEntry> entries;
};

inline void validate(const LossTable & t) {
    require(std::isfinite(t.base_loss) && t.base_loss >= 0.0, ErrorCode::invariant_violation,
            "base_loss must be finite and >= 0");
    std::set<std::size_t> seen;
    for (const auto & e : t.entries) {
        require(seen.insert(e.layer).second, ErrorCode::invariant_violation,
                "loss table repeats layer " + std::to_string(e.layer));
        require(std::isfinite(e.loss) && e.loss >= 0.0, ErrorCode::invariant_violation,
                "loss for layer " + std::to_string(e.layer) + " must be finite and >= 0");
    }
}

enum class PlanMode { finetune_subset, freeze_subset };
enum class PlanCriterion { delta_lowest, delta_highest, loss_change_highest };

inline std::string to_string(PlanMode m) {
    return m == PlanMode::finetune_subset ? "finetune_subset" : "freeze_subset";
}

inline std::string to_string(PlanCriterion c) {
    switch (c) {
        case PlanCriterion::delta_lowest: return "delta_lowest";
        case PlanCriterion::delta_highest: return "delta_highest";
        case PlanCriterion::loss_change_highest: return "loss_change_highest";
    }
    return "unknown";
}

inline PlanMode parse_plan_mode(const std::string & s) {
    if (s == "finetune_subset" || s == "finetune") return PlanMode::finetune_subset;
    if (s == "freeze_subset" || s == "freeze") return PlanMode::freeze_subset;
    throw Error(ErrorCode::invalid_argument, "unknown plan mode '" + s + "'");
}

inline PlanCriterion parse_plan_criterion(const std::string & s) {
    if (s == "delta_lowest") return PlanCriterion::delta_lowest;
    if (s == "delta_highest") return PlanCriterion::delta_highest;
    if (s == "loss_change_highest") return PlanCriterion::loss_change_highest;
    throw Error(ErrorCode::invalid_argument, "unknown plan criterion '" + s + "'");
}

struct LayerPlan {
    PlanMode mode = PlanMode::finetune_subset;
    PlanCriterion criterion = PlanCriterion::delta_lowest;
    std::vector<std::size_t> layers;
    int k = kDefaultWindow;
    std::size_t m = 0;
    std::string source;
    // set when the curve has fewer than 2m entries, so selections may overlap their complement
    bool short_curve = false;
};

/// Delta-L per layer (substituted minus base loss).
inline RankedSeries loss_change(const LossTable & table) {
    validate(table);
    RankedSeries s;
    s.name = table.dataset_id.empty() ? "loss_change" : table.dataset_id + ":loss_change";
    for (const auto & e : table.entries) {
        s.labels.push_back(e.layer);
        s.values.push_back(e.loss - table.base_loss);
    }
    return s;
}

// Raw substituted losses. Ranks identically to loss_change since the offset is shared.
inline RankedSeries substituted_losses(const LossTable & table) {
    validate(table);
    RankedSeries s;
    s.name = table.dataset_id.empty() ? "substituted_loss" : table.dataset_id;
    for (const auto & e : table.entries) {
        s.labels.push_back(e.layer);
        s.values.push_back(e.loss);
    }
    return s;
}

/// Selects m layers from the curve. Both modes default to the smallest-delta
/// layers; delta_highest gives the non-critical comparison plan.
inline LayerPlan make_plan(const DeltaCurve & curve, PlanMode mode, std::size_t m,
                           PlanCriterion criterion = PlanCriterion::delta_lowest, std::string source = {}) {
    LayerPlan plan;
    plan.mode = mode;
    plan.criterion = criterion;
    plan.k = curve.k;
    plan.m = m;
    plan.source = std::move(source);
    switch (criterion) {
        case PlanCriterion::delta_lowest: plan.layers = rank_critical_layers(curve, m); break;
        case PlanCriterion::delta_highest: plan.layers = rank_noncritical_layers(curve, m); break;
        case PlanCriterion::loss_change_highest:
            throw Error(ErrorCode::invalid_argument, "loss_change_highest plans are built from a loss table");
    }
    plan.short_curve = curve.entries.size() < 2 * m;
    return plan;
}

// Plan from a loss table: the m layers whose substitution raises the loss most.
inline LayerPlan make_plan(const LossTable & table, PlanMode mode, std::size_t m, std::string source = {}) {
    const RankedSeries dl = loss_change(table);
    std::vector<CurveEntry> entries;
    for (std::size_t i = 0; i < dl.size(); ++i) {
        entries.push_back({dl.labels[i], dl.values[i]});
    }
    LayerPlan plan;
    plan.mode = mode;
    plan.criterion = PlanCriterion::loss_change_highest;
    plan.k = table.k;
    plan.m = m;
    plan.source = std::move(source);
    plan.layers = detail::select_layers(entries, m, std::greater<double>{});
    plan.short_curve = entries.size() < 2 * m;
    return plan;
}

struct OverlapAt {
    std::size_t m = 0;
    std::size_t overlap = 0;
};

struct CriticalityReport {
    CorrelationEntry correlation;
    std::size_t m = 0;
    std::vector<std::size_t> critical_by_delta;
    std::vector<std::size_t> critical_by_loss;
    std::vector<OverlapAt> overlaps;
};

inline std::size_t overlap_size(std::vector<std::size_t> a, std::vector<std::size_t> b) {
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    std::vector<std::size_t> common;
    std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(common));
    return common.size();
}

/// Compares delta-based and loss-based criticality on their shared layers.
/// Top-m lists use m = min(5, shared); overlaps are reported for m in {3, 5}
/// wherever enough shared layers exist.
inline CriticalityReport criticality_report(const DeltaCurve & curve, const LossTable & table) {
    const RankedSeries delta = to_series(curve.entries, "delta");
    const RankedSeries loss = substituted_losses(table);
    const AlignedPair p = align(delta, loss);
    require(p.labels.size() >= 3, ErrorCode::invalid_argument,
            "delta curve and loss table share only " + std::to_string(p.labels.size()) + " layers (need >= 3)");

    CriticalityReport report;
    report.correlation = correlate_curves(delta, loss);

    std::vector<CurveEntry> by_delta;
    std::vector<CurveEntry> by_loss;
    for (std::size_t i = 0; i < p.labels.size(); ++i) {
        by_delta.push_back({p.labels[i], p.x[i]});
        by_loss.push_back({p.labels[i], p.y[i]});
    }
    report.m = std::min<std::size_t>(5, p.labels.size());
    report.critical_by_delta = detail::select_layers(by_delta, report.m, std::less<double>{});
    report.critical_by_loss = detail::select_layers(by_loss, report.m, std::greater<double>{});
    for (std::size_t m : {std::size_t{3}, std::size_t{5}}) {
        if (m <= p.labels.size()) {
            report.overlaps.push_back({m, overlap_size(detail::select_layers(by_delta, m, std::less<double>{}),
                                                       detail::select_layers(by_loss, m, std::greater<double>{}))});
        }
    }
    return report;
}

} // namespace critlayers
