// latent-unlearn: data generation, pretraining, unlearning runs, evaluation,
// contact sheets and ablation sweeps over one experiment directory.

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>

#include "latent_unlearn/pipeline.hpp"
#include "png_sheet.hpp"

namespace fs = std::filesystem;
using namespace latent_unlearn;

namespace {

struct Flags {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
    std::string scenario = "random";
    std::string mode;
    std::string preset;
    int index = 0;
    std::optional<std::string> axis;
    std::vector<double> values;
    std::optional<int> identities;
};

void apply_preset(UnlearnConfig& u, const std::string& name) {
    const UnlearnConfig p = UnlearnConfig::preset(name);  // validates the name
    if (name == "no-id") {
        u.local.id = p.local.id;
        if (u.adjacency) u.adjacency->id = p.local.id;
    }
}

// defaults <- config file <- flags
ExperimentConfig resolve(const Flags& f) {
    ExperimentConfig cfg = f.config.empty() ? ExperimentConfig{} : load_experiment(f.config);
    if (f.seed) {
        cfg.seed = *f.seed;
        cfg.pretrain.seed = cfg.pretrain_seed();
    }
    if (!f.out.empty()) cfg.out = f.out;
    if (cfg.out.empty()) {
        if (const char* env = std::getenv("LATENT_UNLEARN_OUT"); env && *env) cfg.out = env;
    }
    if (cfg.out.empty()) {
        throw std::invalid_argument("no output directory: pass --out, set \"out\" in the config, or set LATENT_UNLEARN_OUT");
    }
    if (!f.mode.empty()) cfg.unlearn.mode = parse_unlearn_mode(f.mode);
    if (!f.preset.empty()) apply_preset(cfg.unlearn, f.preset);
    if (f.axis) cfg.ablate.axis = *f.axis;
    if (!f.values.empty()) cfg.ablate.values = f.values;
    if (f.identities) cfg.ablate.identities = *f.identities;
    if (!known_axis(cfg.ablate.axis)) throw std::invalid_argument("unknown ablation axis '" + cfg.ablate.axis + "'");
    cfg.unlearn.validate();
    return cfg;
}

void check_corpus(const Corpus& c, const ExperimentConfig& cfg, const Layout& layout) {
    if (!(c == make_data(cfg))) {
        throw std::runtime_error("corpus at " + layout.corpus().string() +
                                 " was made with a different data config or seed; re-run `latent-unlearn make-data`");
    }
}

void log_line(const std::string& s) { std::cerr << s << std::endl; }

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

int cmd_make_data(const ExperimentConfig& cfg) {
    const Layout layout{cfg.out};
    fs::create_directories(layout.data_dir());
    const Corpus c = make_data(cfg);
    save_corpus(c, layout.corpus());
    write_dir_metadata(layout.data_dir(), cfg, "make-data");
    std::cout << "wrote " << layout.corpus().string() << " (" << c.identities.size() << " identities, "
              << c.image_count() << " images)\n";
    return 0;
}

int cmd_pretrain(const ExperimentConfig& cfg) {
    const Layout layout{cfg.out};
    if (!fs::exists(layout.corpus())) {
        throw MissingArtifact("missing " + layout.corpus().string() + "; run `latent-unlearn make-data --out " +
                              cfg.out + "` first");
    }
    const Corpus c = load_corpus(layout.corpus());
    check_corpus(c, cfg, layout);
    const auto t0 = std::chrono::steady_clock::now();
    const PretrainOutcome r = run_pretrain(cfg, c, layout);
    write_dir_metadata(layout.pretrain_dir(), cfg, "pretrain");
    std::cout << "pretraining took " << seconds_since(t0) << " s\n" << to_json(r.quality).dump(2) << "\n";
    return 0;
}

SourceModel load_model(const ExperimentConfig& cfg, const Layout& layout) {
    SourceModel m = load_source_model(layout);
    check_corpus(m.corpus, cfg, layout);
    if (!(m.g_s.arch == cfg.arch)) {
        throw std::runtime_error("checkpoint " + layout.checkpoint().string() +
                                 " has a different architecture than the config; re-run `latent-unlearn pretrain`");
    }
    return m;
}

int cmd_unlearn(const ExperimentConfig& cfg, Scenario s, int k) {
    const Layout layout{cfg.out};
    const SourceModel m = load_model(cfg, layout);
    const UnlearnSource src = select_source(m, cfg, s, k);
    UnlearnResult r = unlearn_source(m, cfg, cfg.unlearn, src);
    const fs::path dir = layout.run_dir(s, cfg.unlearn.mode, k);
    // a stale report from an earlier config would no longer describe this run
    fs::remove(dir / "report.json");
    write_run(dir, m, src, r);
    write_dir_metadata(dir, cfg, "unlearn");
    const auto& last = r.record.rows.empty() ? LossRow{} : r.record.rows.back();
    std::cout << "wrote " << dir.string() << " (" << r.record.rows.size() << " iterations, final L_total "
              << last.l_total << ", " << r.record.wall_time_sec << " s)\n";
    return 0;
}

int cmd_evaluate(const ExperimentConfig& cfg, Scenario s, int k) {
    const Layout layout{cfg.out};
    const SourceModel m = load_model(cfg, layout);
    const fs::path dir = layout.run_dir(s, cfg.unlearn.mode, k);
    const StoredRun run = load_run(dir, cfg.arch);
    const UnlearnSource src = select_source(m, cfg, run.scenario, run.index);
    const FrechetReference ref = make_reference(m, cfg);
    const EvalReport rep = evaluate_source(m, ref, cfg, run.config, src, run.g_u);
    save_report(rep, dir / "report.json");
    write_dir_metadata(dir, cfg, "evaluate");
    std::cout << to_json(rep).dump(2) << "\n";
    return 0;
}

int cmd_grid(const ExperimentConfig& cfg, Scenario s) {
    const Layout layout{cfg.out};
    const SourceModel m = load_model(cfg, layout);
    // every finished run of this scenario and mode, by index
    const std::string prefix = to_string(s) + "_" + to_string(cfg.unlearn.mode) + "_";
    std::vector<int> indices;
    if (fs::is_directory(layout.root / "runs")) {
        for (const auto& e : fs::directory_iterator(layout.root / "runs")) {
            const std::string name = e.path().filename().string();
            if (!name.starts_with(prefix) || !fs::exists(e.path() / "run.json")) continue;
            const std::string k = name.substr(prefix.size());
            if (!k.empty() && k.find_first_not_of("0123456789") == std::string::npos) indices.push_back(std::stoi(k));
        }
    }
    if (indices.empty()) {
        throw MissingArtifact("no runs under " + (layout.root / "runs").string() + " for scenario " + to_string(s) +
                              ", mode " + to_string(cfg.unlearn.mode) + "; run `latent-unlearn unlearn` first");
    }
    std::sort(indices.begin(), indices.end());
    std::vector<std::vector<Image>> rows;
    for (int k : indices) {
        const StoredRun run = load_run(layout.run_dir(s, cfg.unlearn.mode, k), cfg.arch);
        rows.push_back(grid_row(m, cfg, select_source(m, cfg, run.scenario, run.index), run.g_u, run.w_t));
    }
    const fs::path gdir = layout.root / "grids";
    fs::create_directories(gdir);
    const fs::path png = gdir / (to_string(s) + "_" + to_string(cfg.unlearn.mode) + ".png");
    write_png(contact_sheet(rows), png);
    write_dir_metadata(gdir, cfg, "grid");
    std::cout << "wrote " << png.string() << " (" << rows.size()
              << " rows: source, target, unlearned, then source/unlearned pairs on fixed prior latents)\n";
    return 0;
}

int cmd_ablate(const ExperimentConfig& cfg) {
    const Layout layout{cfg.out};
    const SourceModel m = load_model(cfg, layout);
    const auto rows = run_ablation(m, cfg, layout, log_line);
    const fs::path dir = layout.ablate_dir(cfg.ablate.axis);
    write_dir_metadata(dir, cfg, "ablate");
    std::cout << "wrote " << (dir / "summary.csv").string() << " (" << rows.size() << " rows x "
              << cfg.ablate.identities << " identities)\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Latent-target identity unlearning for a desk-scale generator"};
    app.set_version_flag("--version", kSoftwareVersion);
    app.require_subcommand(1);
    Flags f;

    auto common = [&](CLI::App* sub) {
        sub->add_option("--config", f.config, "Experiment config (JSON)")->check(CLI::ExistingFile);
        sub->add_option("--seed", f.seed, "Master seed");
        sub->add_option("--out", f.out, "Experiment directory (default: $LATENT_UNLEARN_OUT)");
    };
    auto run_flags = [&](CLI::App* sub) {
        sub->add_option("--scenario", f.scenario, "Source scenario")->check(CLI::IsMember({"random", "ind", "ood"}));
        sub->add_option("--mode", f.mode, "Unlearning mode")->check(CLI::IsMember({"guide", "baseline"}));
        sub->add_option("--preset", f.preset, "Loss preset")->check(CLI::IsMember({"default", "no-id"}));
        sub->add_option("--index", f.index, "Source index within the scenario")->check(CLI::NonNegativeNumber);
    };

    auto* make_data_cmd = app.add_subcommand("make-data", "Generate the synthetic identity corpus");
    auto* pretrain_cmd = app.add_subcommand("pretrain", "Train generator, encoder and identity embedder");
    auto* unlearn_cmd = app.add_subcommand("unlearn", "Unlearn one source identity");
    auto* evaluate_cmd = app.add_subcommand("evaluate", "Evaluate an unlearning run");
    auto* grid_cmd = app.add_subcommand("grid", "Write a PNG contact sheet of the runs of one scenario");
    auto* ablate_cmd = app.add_subcommand("ablate", "Sweep one unlearning hyperparameter over many identities");
    for (auto* sub : {make_data_cmd, pretrain_cmd, unlearn_cmd, evaluate_cmd, grid_cmd, ablate_cmd}) common(sub);
    for (auto* sub : {unlearn_cmd, evaluate_cmd, grid_cmd}) run_flags(sub);
    ablate_cmd->add_option("--scenario", f.scenario, "Source scenario (overrides ablate.scenario)")
        ->check(CLI::IsMember({"random", "ind", "ood"}));
    ablate_cmd->add_option("--mode", f.mode, "Unlearning mode")->check(CLI::IsMember({"guide", "baseline"}));
    ablate_cmd->add_option("--preset", f.preset, "Loss preset")->check(CLI::IsMember({"default", "no-id"}));
    ablate_cmd->add_option("--axis", f.axis, "Hyperparameter to sweep");
    ablate_cmd->add_option("--values", f.values, "Axis values")->delimiter(',');
    ablate_cmd->add_option("--identities", f.identities, "Sources per value")->check(CLI::PositiveNumber);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        // help and version exit 0; bad flags are config errors like bad keys
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        ExperimentConfig cfg = resolve(f);
        const Scenario s = parse_scenario(f.scenario);
        if (*make_data_cmd) return cmd_make_data(cfg);
        if (*pretrain_cmd) return cmd_pretrain(cfg);
        if (*unlearn_cmd) return cmd_unlearn(cfg, s, f.index);
        if (*evaluate_cmd) return cmd_evaluate(cfg, s, f.index);
        if (*grid_cmd) return cmd_grid(cfg, s);
        if (*ablate_cmd) {
            if (ablate_cmd->count("--scenario")) cfg.ablate.scenario = s;
            return cmd_ablate(cfg);
        }
    } catch (const MissingArtifact& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const std::invalid_argument& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
