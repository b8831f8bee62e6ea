#pragma once

// Subcommand implementations behind the critlayers CLI. Every command writes
// its outputs into an output directory (each file atomically) and finishes
// with run.json describing inputs, outputs, parameters and timing.

#include <chrono>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "error.hpp"
#include "fsutil.hpp"
#include "intervention.hpp"
#include "planner.hpp"
#include "report.hpp"
#include "repr_store.hpp"
#include "similarity.hpp"
#include "spectral.hpp"
#include "stats.hpp"
#include "svg.hpp"
#include "toymodel.hpp"

namespace critlayers::cli {

using json = nlohmann::ordered_json;

struct InputRecord {
    std::string path;
    std::string hash;
};

struct RunReport {
    std::string command;
    std::vector<InputRecord> inputs;
    std::vector<std::string> outputs; // relative to the output directory
    json parameters = json::object();
    double timing_ms = 0.0;
};

inline json to_json(const RunReport & r) {
    json j;
    j["command"] = r.command;
    json in = json::array();
    for (const auto & i : r.inputs) in.push_back({{"path", i.path}, {"hash", i.hash}});
    j["inputs"] = in;
    j["outputs"] = r.outputs;
    j["parameters"] = r.parameters;
    j["timing_ms"] = r.timing_ms;
    return j;
}

namespace detail {

class Run {
public:
    Run(std::string command, fs::path out_dir) : out_dir_(std::move(out_dir)), start_(std::chrono::steady_clock::now()) {
        report_.command = std::move(command);
    }

    void input(const fs::path & p) {
        require(fs::exists(p), ErrorCode::io, "input not found: " + p.string());
        report_.inputs.push_back({p.string(), fsutil::file_hash(p)});
    }

    void param(const std::string & key, json value) { report_.parameters[key] = std::move(value); }

    void write(const std::string & name, const std::string & bytes) {
        fsutil::atomic_write(out_dir_ / name, bytes);
        report_.outputs.push_back(name);
    }

    void write_json(const std::string & name, const json & j) { write(name, j.dump(2) + "\n"); }

    void write_bundle_dir(const std::string & name, const ReprBundle & b) {
        critlayers::write_bundle(b, out_dir_ / name);
        record_tree(name);
    }

    void write_checkpoint_dir(const std::string & name, const toy::Checkpoint & ck) {
        toy::write_checkpoint(ck, out_dir_ / name);
        record_tree(name);
    }

    const fs::path & out_dir() const { return out_dir_; }

    RunReport finish() {
        report_.timing_ms =
            std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start_).count();
        for (const auto & o : report_.outputs) {
            require(fs::exists(out_dir_ / o), ErrorCode::io, "declared output missing: " + o);
        }
        fsutil::atomic_write(out_dir_ / "run.json", to_json(report_).dump(2) + "\n");
        return report_;
    }

private:
    void record_tree(const std::string & name) {
        std::vector<std::string> files;
        for (const auto & e : fs::recursive_directory_iterator(out_dir_ / name)) {
            if (e.is_regular_file()) files.push_back(fs::relative(e.path(), out_dir_).generic_string());
        }
        std::sort(files.begin(), files.end());
        report_.outputs.insert(report_.outputs.end(), files.begin(), files.end());
    }

    fs::path out_dir_;
    std::chrono::steady_clock::time_point start_;
    RunReport report_;
};

inline nlohmann::json read_json(const fs::path & p) {
    try {
        return nlohmann::json::parse(fsutil::read_file(p));
    } catch (const nlohmann::json::parse_error & e) {
        throw Error(ErrorCode::parse, p.string() + ": " + e.what());
    }
}

} // namespace detail

inline RunReport cmd_cka(const fs::path & bundle_path, const fs::path & out_dir) {
    detail::Run run("cka", out_dir);
    run.input(bundle_path);
    const ReprBundle bundle = read_bundle(bundle_path);
    const std::string hash = bundle_hash(bundle);
    const CkaMatrix cka = pairwise_cka(bundle);
    run.write("cka.csv", report::cka_to_csv(cka));
    run.write_json("cka.json", report::cka_to_json(cka, hash));
    run.write("cka.svg", svg::heatmap(cka, "Pairwise linear CKA: " + bundle.manifest.model_id));
    return run.finish();
}

inline RunReport cmd_delta(const fs::path & bundle_path, int k, const fs::path & out_dir) {
    detail::Run run("delta", out_dir);
    run.input(bundle_path);
    run.param("k", k);
    const ReprBundle bundle = read_bundle(bundle_path);
    const std::string hash = bundle_hash(bundle);
    const DeltaCurve curve = delta_curve(pairwise_cka(bundle), k);
    run.write("delta.csv", report::curve_to_csv(curve.entries, "delta"));
    run.write_json("delta.json", report::delta_to_json(curve, hash));
    run.write("delta.svg", svg::line_plot({{"delta (k=" + std::to_string(k) + ")", curve.entries}},
                                          "Average CKA similarity to neighbouring layers", "average CKA"));
    return run.finish();
}

inline RunReport cmd_spectral(const fs::path & bundle_path, std::vector<std::size_t> topk, int k,
                              const fs::path & out_dir) {
    detail::Run run("spectral", out_dir);
    run.input(bundle_path);
    if (topk.empty()) topk = {1, 3, 10};
    run.param("topk", topk);
    run.param("k", k);
    const ReprBundle bundle = read_bundle(bundle_path);
    const std::string hash = bundle_hash(bundle);
    const auto decomps = decompose_all(bundle);
    const std::size_t max_k = min_rank(decomps);
    for (std::size_t K : topk) {
        require(K >= 1 && K <= max_k, ErrorCode::out_of_range,
                "--topk " + std::to_string(K) + " exceeds the smallest layer rank " + std::to_string(max_k));
    }

    std::vector<svg::Line> lines;
    json index = json::array();
    for (std::size_t K : topk) {
        const CcaCurve curve = cca_curve(decomps, K, k);
        const std::string stem = "cca_top" + std::to_string(K);
        run.write(stem + ".csv", report::curve_to_csv(curve.entries, "mean_cca"));
        run.write_json(stem + ".json", report::cca_to_json(curve, hash));
        lines.push_back({"Top" + std::to_string(K) + " CCA", curve.entries});
        index.push_back(stem + ".json");
    }
    const DeltaCurve delta = delta_curve(pairwise_cka(bundle), k);
    lines.push_back({"average CKA", delta.entries});
    run.write("cca.svg", svg::line_plot(lines, "Average CCA of TopK principal components", "mean CCA / CKA"));

    std::string spectra = "layer,rank";
    std::size_t width = 0;
    for (const auto & d : decomps) width = std::max(width, d.rank());
    for (std::size_t i = 1; i <= width; ++i) spectra += ",s" + std::to_string(i);
    spectra += "\n";
    json spectra_json = json::array();
    for (const auto & d : decomps) {
        spectra += std::to_string(d.layer_index) + "," + std::to_string(d.rank());
        std::vector<double> sv(d.singular_values.data(), d.singular_values.data() + d.singular_values.size());
        for (std::size_t i = 0; i < width; ++i) spectra += "," + (i < sv.size() ? report::fmt9(sv[i]) : std::string{});
        spectra += "\n";
        spectra_json.push_back({{"layer", d.layer_index}, {"rank", d.rank()}, {"singular_values", sv}});
    }
    run.write("spectra.csv", spectra);
    json sj;
    sj["schema_version"] = report::kReportSchemaVersion;
    sj["kind"] = "spectra";
    sj["source"] = {{"bundle_hash", hash}};
    sj["layers"] = spectra_json;
    sj["cca_curves"] = index;
    run.write_json("spectra.json", sj);
    return run.finish();
}

inline RunReport cmd_remove(const fs::path & bundle_path, std::size_t layer, std::size_t K, const fs::path & out_dir) {
    detail::Run run("remove", out_dir);
    run.input(bundle_path);
    run.param("layer", layer);
    run.param("topk", K);
    const ReprBundle bundle = read_bundle(bundle_path);
    const ReprBundle cleaned = clean_layer(bundle, CleanSpec{layer, K, CleanMode::remove_topk});
    run.write_bundle_dir("bundle", cleaned);
    return run.finish();
}

struct NamedPath {
    std::string name;
    fs::path path;
};

// "name=path", or a bare path named after its file stem
inline NamedPath parse_named_path(const std::string & arg) {
    const auto eq = arg.find('=');
    if (eq != std::string::npos && eq > 0) return {arg.substr(0, eq), arg.substr(eq + 1)};
    return {fs::path(arg).stem().string(), arg};
}

inline RunReport cmd_corr(const std::vector<NamedPath> & series_paths, const fs::path & out_dir) {
    detail::Run run("corr", out_dir);
    require(series_paths.size() >= 2, ErrorCode::invalid_argument, "corr needs at least two --series");
    std::vector<RankedSeries> series;
    json names = json::array();
    for (const auto & sp : series_paths) {
        run.input(sp.path);
        series.push_back(report::series_from_json(detail::read_json(sp.path), sp.name));
        names.push_back(sp.name);
    }
    run.param("series", names);

    json rows = json::array();
    for (std::size_t i = 0; i < series.size(); ++i) {
        for (std::size_t j = i + 1; j < series.size(); ++j) {
            rows.push_back(report::correlation_to_json(correlate_curves(series[i], series[j])));
        }
    }
    json doc;
    doc["schema_version"] = report::kReportSchemaVersion;
    doc["method"] = "spearman_average_ranks";
    doc["alignment"] = "label_intersection";
    doc["rows"] = rows;
    doc["mean_pairwise_rho"] = pairwise_mean_correlation(series);
    run.write_json("corr.json", doc);
    run.write("corr.csv", report::correlation_matrix_csv(series));
    return run.finish();
}

struct PlanArgs {
    fs::path curve_path;
    fs::path losses_path; // optional; switches the criterion to loss_change_highest
    PlanMode mode = PlanMode::finetune_subset;
    PlanCriterion criterion = PlanCriterion::delta_lowest;
    std::size_t m = 5;
};

inline RunReport cmd_plan(const PlanArgs & args, const fs::path & out_dir) {
    detail::Run run("plan", out_dir);
    run.param("mode", to_string(args.mode));
    run.param("m", args.m);
    LayerPlan plan;
    if (!args.losses_path.empty()) {
        run.input(args.losses_path);
        run.param("criterion", to_string(PlanCriterion::loss_change_highest));
        const LossTable table = report::loss_table_from_json(detail::read_json(args.losses_path));
        plan = make_plan(table, args.mode, args.m, table.dataset_id);
    } else {
        run.input(args.curve_path);
        run.param("criterion", to_string(args.criterion));
        const auto doc = detail::read_json(args.curve_path);
        const DeltaCurve curve = report::delta_from_json(doc);
        plan = make_plan(curve, args.mode, args.m, args.criterion, report::source_hash(doc));
    }
    run.write_json("plan.json", report::plan_to_json(plan));
    return run.finish();
}

inline RunReport cmd_criticality(const fs::path & curve_path, const fs::path & losses_path, const fs::path & out_dir) {
    detail::Run run("criticality", out_dir);
    run.input(curve_path);
    run.input(losses_path);
    const DeltaCurve curve = report::delta_from_json(detail::read_json(curve_path));
    const LossTable table = report::loss_table_from_json(detail::read_json(losses_path));
    run.write_json("criticality.json", report::criticality_to_json(criticality_report(curve, table)));
    return run.finish();
}

inline RunReport cmd_toygen(const toy::ExperimentConfig & cfg, const fs::path & out_dir) {
    detail::Run run("toygen", out_dir);
    run.param("model", toy::config_to_json(cfg.model));
    run.param("train_samples", cfg.train_samples);
    run.param("probe_samples", cfg.probe_samples);
    run.param("pretrain_steps", cfg.pretrain_steps);
    run.param("finetune_steps", cfg.finetune_steps);
    run.param("pretrain_lr", cfg.pretrain_lr);
    run.param("finetune_lr", cfg.finetune_lr);
    run.param("batch_size", cfg.batch_size);
    run.param("k", cfg.k);
    const toy::Experiment ex = toy::run_experiment(cfg);
    run.write_bundle_dir("bundle", ex.bundle);
    run.write_checkpoint_dir("base", ex.base);
    run.write_checkpoint_dir("tuned", ex.tuned);
    run.write_json("losses.json", report::loss_table_to_json(ex.losses));
    return run.finish();
}

/// Exit code for an error: 2 for numeric failures, 1 for everything else.
inline int exit_code(const Error & e) {
    return (e.code() == ErrorCode::numeric_failure || e.code() == ErrorCode::divergence) ? 2 : 1;
}

inline std::string error_record(const std::string & command, const std::string & code, const std::string & message) {
    json j;
    j["error"] = code;
    j["command"] = command;
    j["message"] = message;
    return j.dump();
}

} // namespace critlayers::cli
