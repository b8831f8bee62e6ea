#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include <critlayers/critlayers.hpp>

using namespace critlayers;

int main(int argc, char ** argv) {
    CLI::App app{"critlayers: layer-criticality analysis over per-layer representation bundles"};
    app.require_subcommand(1);

    std::string bundle;
    std::string out;
    int k = kDefaultWindow;
    std::vector<std::size_t> topk;
    std::size_t layer = 0;
    std::string mode = "finetune";
    std::string criterion = "delta_lowest";
    std::size_t m = 5;
    std::string curve;
    std::string losses;
    std::vector<std::string> series;
    toy::ExperimentConfig toycfg;

    auto * cka = app.add_subcommand("cka", "pairwise CKA matrix (CSV, JSON, SVG heatmap)");
    cka->add_option("--bundle", bundle, "bundle directory")->required();
    cka->add_option("--out", out, "output directory")->required();

    auto * delta = app.add_subcommand("delta", "windowed average-CKA curve");
    delta->add_option("--bundle", bundle, "bundle directory")->required();
    delta->add_option("--k", k, "window half-width")->capture_default_str();
    delta->add_option("--out", out, "output directory")->required();

    auto * spectral = app.add_subcommand("spectral", "singular spectra and TopK CCA curves");
    spectral->add_option("--bundle", bundle, "bundle directory")->required();
    spectral->add_option("--topk", topk, "subspace size K (repeatable; default 1 3 10)");
    spectral->add_option("--k", k, "window half-width")->capture_default_str();
    spectral->add_option("--out", out, "output directory")->required();

    auto * remove = app.add_subcommand("remove", "remove TopK principal components at one layer");
    remove->add_option("--bundle", bundle, "bundle directory")->required();
    remove->add_option("--layer", layer, "layer index")->required();
    remove->add_option("--topk", topk, "number of components K")->required()->expected(1);
    remove->add_option("--out", out, "output directory")->required();

    auto * corr = app.add_subcommand("corr", "Spearman correlations between per-layer series");
    corr->add_option("--series", series, "name=path to a curve or losses.json (repeatable)")->required();
    corr->add_option("--out", out, "output directory")->required();

    auto * plan = app.add_subcommand("plan", "emit a layer plan (plan.json)");
    plan->add_option("--curve", curve, "delta.json");
    plan->add_option("--losses", losses, "losses.json (selects by loss change instead)");
    plan->add_option("--mode", mode, "finetune | freeze")->capture_default_str();
    plan->add_option("--criterion", criterion, "delta_lowest | delta_highest")->capture_default_str();
    plan->add_option("--m", m, "number of layers")->capture_default_str();
    plan->add_option("--out", out, "output directory")->required();

    auto * crit = app.add_subcommand("criticality", "compare a delta curve with a substitution loss table");
    crit->add_option("--curve", curve, "delta.json")->required();
    crit->add_option("--losses", losses, "losses.json")->required();
    crit->add_option("--out", out, "output directory")->required();

    auto * toygen = app.add_subcommand("toygen", "train the toy model and emit a bundle, checkpoints and losses.json");
    toygen->add_option("--seed", toycfg.model.seed)->capture_default_str();
    toygen->add_option("--layers", toycfg.model.num_layers)->capture_default_str();
    toygen->add_option("--hidden", toycfg.model.hidden_size)->capture_default_str();
    toygen->add_option("--heads", toycfg.model.num_heads)->capture_default_str();
    toygen->add_option("--vocab", toycfg.model.vocab_size)->capture_default_str();
    toygen->add_option("--seq-len", toycfg.model.seq_len)->capture_default_str();
    toygen->add_option("--samples", toycfg.train_samples, "training examples per dataset")->capture_default_str();
    toygen->add_option("--probe-samples", toycfg.probe_samples, "test prompts in the bundle")->capture_default_str();
    toygen->add_option("--pretrain-steps", toycfg.pretrain_steps)->capture_default_str();
    toygen->add_option("--finetune-steps", toycfg.finetune_steps)->capture_default_str();
    toygen->add_option("--pretrain-lr", toycfg.pretrain_lr)->capture_default_str();
    toygen->add_option("--finetune-lr", toycfg.finetune_lr)->capture_default_str();
    toygen->add_option("--batch", toycfg.batch_size)->capture_default_str();
    toygen->add_option("--k", toycfg.k, "window half-width for the loss table")->capture_default_str();
    toygen->add_option("--out", out, "output directory")->required();

    std::string command = "critlayers";
    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp & e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp & e) {
        return app.exit(e);
    } catch (const CLI::ParseError & e) {
        std::cerr << cli::error_record(command, "usage", e.what()) << "\n";
        return 1;
    }

    try {
        cli::RunReport report;
        if (cka->parsed()) {
            command = "cka";
            report = cli::cmd_cka(bundle, out);
        } else if (delta->parsed()) {
            command = "delta";
            report = cli::cmd_delta(bundle, k, out);
        } else if (spectral->parsed()) {
            command = "spectral";
            report = cli::cmd_spectral(bundle, topk, k, out);
        } else if (remove->parsed()) {
            command = "remove";
            report = cli::cmd_remove(bundle, layer, topk.front(), out);
        } else if (corr->parsed()) {
            command = "corr";
            std::vector<cli::NamedPath> paths;
            for (const auto & s : series) paths.push_back(cli::parse_named_path(s));
            report = cli::cmd_corr(paths, out);
        } else if (plan->parsed()) {
            command = "plan";
            require(!curve.empty() || !losses.empty(), ErrorCode::invalid_argument, "plan needs --curve or --losses");
            cli::PlanArgs args;
            args.curve_path = curve;
            args.losses_path = losses;
            args.mode = parse_plan_mode(mode);
            args.criterion = parse_plan_criterion(criterion);
            args.m = m;
            report = cli::cmd_plan(args, out);
        } else if (crit->parsed()) {
            command = "criticality";
            report = cli::cmd_criticality(curve, losses, out);
        } else if (toygen->parsed()) {
            command = "toygen";
            report = cli::cmd_toygen(toycfg, out);
        }
        std::cout << cli::to_json(report).dump(2) << "\n";
        return 0;
    } catch (const Error & e) {
        std::cerr << cli::error_record(command, std::string(to_string(e.code())), e.detail()) << "\n";
        return cli::exit_code(e);
    } catch (const std::exception & e) {
        std::cerr << cli::error_record(command, "io", e.what()) << "\n";
        return 1;
    }
}
