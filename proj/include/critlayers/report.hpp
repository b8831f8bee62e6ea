#pragma once

// CSV / JSON serialisation for matrices, curves, loss tables, plans and
// correlation reports. CSV numbers use 9 significant digits; JSON keeps
// full double precision.

#include <cstdio>
#include <string>
#include <vector>

#include <json.hpp>

#include "error.hpp"
#include "fsutil.hpp"
#include "planner.hpp"
#include "similarity.hpp"
#include "spectral.hpp"
#include "stats.hpp"

namespace critlayers::report {

using json = nlohmann::ordered_json;

inline constexpr int kReportSchemaVersion = 1;

inline std::string fmt9(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return buf;
}

// ---- CKA matrix

inline std::string cka_to_csv(const CkaMatrix & m) {
    std::string out = "layer";
    for (std::size_t j = 0; j < m.num_layers; ++j) out += "," + std::to_string(j);
    out += "\n";
    for (std::size_t i = 0; i < m.num_layers; ++i) {
        out += std::to_string(i);
        for (std::size_t j = 0; j < m.num_layers; ++j) out += "," + fmt9(m(i, j));
        out += "\n";
    }
    return out;
}

inline json cka_to_json(const CkaMatrix & m, const std::string & bundle_hash) {
    json j;
    j["schema_version"] = kReportSchemaVersion;
    j["kind"] = "cka_matrix";
    j["num_layers"] = m.num_layers;
    j["source"] = {{"bundle_hash", bundle_hash}};
    json rows = json::array();
    for (std::size_t i = 0; i < m.num_layers; ++i) {
        std::vector<double> row;
        for (std::size_t jx = 0; jx < m.num_layers; ++jx) row.push_back(m(i, jx));
        rows.push_back(row);
    }
    j["values"] = rows;
    return j;
}

// ---- curves

inline std::string curve_to_csv(const std::vector<CurveEntry> & entries, const std::string & value_name) {
    std::string out = "layer," + value_name + "\n";
    for (const auto & e : entries) out += std::to_string(e.layer) + "," + fmt9(e.value) + "\n";
    return out;
}

inline json entries_to_json(const std::vector<CurveEntry> & entries) {
    json arr = json::array();
    for (const auto & e : entries) arr.push_back({{"layer", e.layer}, {"value", e.value}});
    return arr;
}

inline json delta_to_json(const DeltaCurve & c, const std::string & bundle_hash) {
    json j;
    j["schema_version"] = kReportSchemaVersion;
    j["kind"] = "delta";
    j["name"] = "delta";
    j["k"] = c.k;
    j["valid_range"] = {c.range_low, c.range_high};
    j["source"] = {{"bundle_hash", bundle_hash}};
    j["entries"] = entries_to_json(c.entries);
    return j;
}

inline json cca_to_json(const CcaCurve & c, const std::string & bundle_hash) {
    json j;
    j["schema_version"] = kReportSchemaVersion;
    j["kind"] = "cca";
    j["name"] = "cca_top" + std::to_string(c.K);
    j["K"] = c.K;
    j["k"] = c.k;
    j["aggregate"] = "mean";
    j["valid_range"] = {c.range_low, c.range_high};
    j["source"] = {{"bundle_hash", bundle_hash}};
    j["entries"] = entries_to_json(c.entries);
    return j;
}

inline std::vector<CurveEntry> entries_from_json(const nlohmann::json & arr) {
    std::vector<CurveEntry> out;
    for (const auto & e : arr) out.push_back({e.at("layer").get<std::size_t>(), e.at("value").get<double>()});
    return out;
}

inline DeltaCurve delta_from_json(const nlohmann::json & j) {
    try {
        const auto kind = j.at("kind").get<std::string>();
        require(kind == "delta" || kind == "cca", ErrorCode::parse, "expected a curve document, got kind '" + kind + "'");
        DeltaCurve c;
        c.k = j.at("k").get<int>();
        c.entries = entries_from_json(j.at("entries"));
        const auto range = j.at("valid_range").get<std::vector<std::size_t>>();
        require(range.size() == 2, ErrorCode::parse, "valid_range must have two entries");
        c.range_low = range[0];
        c.range_high = range[1];
        return c;
    } catch (const nlohmann::json::exception & e) {
        throw Error(ErrorCode::parse, std::string("curve document: ") + e.what());
    }
}

inline std::string source_hash(const nlohmann::json & j) {
    if (j.contains("source") && j["source"].is_object() && j["source"].contains("bundle_hash")) {
        return j["source"]["bundle_hash"].get<std::string>();
    }
    return {};
}

// ---- loss tables (losses.json, shared with external evaluators)

inline json loss_table_to_json(const LossTable & t) {
    json j;
    j["dataset_id"] = t.dataset_id;
    j["base_loss"] = t.base_loss;
    j["k"] = t.k;
    json arr = json::array();
    for (const auto & e : t.entries) arr.push_back({{"layer", e.layer}, {"loss", e.loss}});
    j["entries"] = arr;
    return j;
}

inline LossTable loss_table_from_json(const nlohmann::json & j) {
    LossTable t;
    try {
        t.dataset_id = j.at("dataset_id").get<std::string>();
        t.base_loss = j.at("base_loss").get<double>();
        t.k = j.at("k").get<int>();
        for (const auto & e : j.at("entries")) {
            t.entries.push_back({e.at("layer").get<std::size_t>(), e.at("loss").get<double>()});
        }
    } catch (const nlohmann::json::exception & e) {
        throw Error(ErrorCode::parse, std::string("losses.json: ") + e.what());
    }
    validate(t);
    return t;
}

/// Any supported per-layer document as a named series: curves give their
/// values, loss tables give raw substituted losses.
inline RankedSeries series_from_json(const nlohmann::json & j, const std::string & name) {
    if (j.contains("kind")) {
        const auto c = delta_from_json(j);
        return to_series(c.entries, name);
    }
    if (j.contains("base_loss")) {
        auto s = substituted_losses(loss_table_from_json(j));
        s.name = name;
        return s;
    }
    throw Error(ErrorCode::parse, "'" + name + "' is neither a curve nor a loss table");
}

// ---- plans

inline json plan_to_json(const LayerPlan & p) {
    json j;
    j["schema_version"] = kReportSchemaVersion;
    j["mode"] = to_string(p.mode);
    j["criterion"] = to_string(p.criterion);
    j["k"] = p.k;
    j["m"] = p.m;
    j["layers"] = p.layers;
    j["source"] = {{"bundle_hash", p.source}, {"curve_params", {{"k", p.k}}}};
    j["short_curve_warning"] = p.short_curve;
    return j;
}

inline LayerPlan plan_from_json(const nlohmann::json & j) {
    LayerPlan p;
    try {
        p.mode = parse_plan_mode(j.at("mode").get<std::string>());
        p.criterion = parse_plan_criterion(j.at("criterion").get<std::string>());
        p.k = j.at("k").get<int>();
        p.m = j.at("m").get<std::size_t>();
        p.layers = j.at("layers").get<std::vector<std::size_t>>();
        p.source = j.at("source").value("bundle_hash", std::string{});
        p.short_curve = j.value("short_curve_warning", false);
    } catch (const nlohmann::json::exception & e) {
        throw Error(ErrorCode::parse, std::string("plan.json: ") + e.what());
    }
    return p;
}

// ---- correlations

inline json correlation_to_json(const CorrelationEntry & e) {
    return {{"x_name", e.x_name},
            {"y_name", e.y_name},
            {"rho", e.rho},
            {"n", e.n},
            {"aligned_range", {e.range_low, e.range_high}},
            {"alignment", "label_intersection"}};
}

inline json criticality_to_json(const CriticalityReport & r) {
    json j;
    j["schema_version"] = kReportSchemaVersion;
    j["correlation"] = correlation_to_json(r.correlation);
    j["m"] = r.m;
    j["critical_by_delta"] = r.critical_by_delta;
    j["critical_by_loss"] = r.critical_by_loss;
    json ov = json::object();
    for (const auto & o : r.overlaps) ov["overlap@" + std::to_string(o.m)] = o.overlap;
    j["overlaps"] = ov;
    return j;
}

// Spearman matrix over named series, rows and columns in input order.
inline std::string correlation_matrix_csv(const std::vector<RankedSeries> & series) {
    std::string out = "series";
    for (const auto & s : series) out += "," + s.name;
    out += "\n";
    for (const auto & a : series) {
        out += a.name;
        for (const auto & b : series) out += "," + fmt9(spearman(a, b));
        out += "\n";
    }
    return out;
}

} // namespace critlayers::report
