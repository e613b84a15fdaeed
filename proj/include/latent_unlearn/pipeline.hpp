#pragma once

// Experiment plumbing shared by the command-line tool and the acceptance
// runner: resolved configuration, on-disk layout, source selection per
// scenario, single runs and ablation sweeps.

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "latent_unlearn/metrics.hpp"
#include "latent_unlearn/pretrain.hpp"
#include "latent_unlearn/unlearn.hpp"

namespace latent_unlearn {

inline constexpr const char* kSoftwareVersion = "0.1.0";

struct DataConfig {
    int n_train = 200;
    int n_heldout_ind = 20;
    int n_heldout_ood = 20;
    int images_per_identity = 10;
};

struct EvalConfig {
    int n_latents = 2000;
};

struct AblateConfig {
    std::string axis = "d";
    std::vector<double> values{-10, 0, 10, 30, 50};
    int identities = 20;
    Scenario scenario = Scenario::ood;
};

/// Every section seed is derived from the master seed; sections may not set
/// their own.
struct ExperimentConfig {
    std::uint64_t seed = 0;
    std::string out;
    DataConfig data;
    ArchConfig arch;
    PretrainConfig pretrain;
    UnlearnConfig unlearn;
    EvalConfig eval;
    AblateConfig ablate;

    std::uint64_t data_seed() const { return derive_seed(seed, "data"); }
    std::uint64_t pretrain_seed() const { return derive_seed(seed, "pretrain"); }
    std::uint64_t frechet_seed() const { return derive_seed(seed, "frechet"); }
    std::uint64_t mean_latent_seed() const { return derive_seed(seed, "mean_latent"); }
    /// Run seed of the k-th source of a scenario; independent of any ablation value.
    std::uint64_t run_seed(Scenario s, int k) const;
};

nlohmann::json to_json(const ExperimentConfig& c);
/// Unknown keys are rejected with their dotted path.
ExperimentConfig experiment_from_json(const nlohmann::json& j);
ExperimentConfig load_experiment(const std::filesystem::path& path);

/// Sets one ablation axis (d, alpha_max, n_a, n_g, lambda_l2, lambda_per,
/// lambda_id, lambda_adj, lambda_global) on an unlearning config.
void apply_axis(UnlearnConfig& cfg, const std::string& axis, double value);
bool known_axis(const std::string& axis);

/// Output layout under the experiment root.
struct Layout {
    std::filesystem::path root;
    std::filesystem::path data_dir() const { return root / "data"; }
    std::filesystem::path corpus() const { return data_dir() / "corpus.json"; }
    std::filesystem::path pretrain_dir() const { return root / "pretrain"; }
    std::filesystem::path checkpoint() const { return pretrain_dir() / "checkpoint"; }
    std::filesystem::path run_dir(Scenario s, UnlearnMode m, int k) const;
    std::filesystem::path ablate_dir(const std::string& axis) const { return root / "ablate" / axis; }
};

/// Missing prerequisite artifact; the message names the file and the command that makes it.
struct MissingArtifact : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Writes config.resolved.json and manifest.json (files with sizes, command,
/// software version) into `dir`.
void write_dir_metadata(const std::filesystem::path& dir, const ExperimentConfig& cfg, const std::string& command);

Corpus make_data(const ExperimentConfig& cfg);

/// Everything fixed for a source model.
struct SourceModel {
    Corpus corpus;
    GeneratorBundle g_s;
    EncoderNet encoder;
    EmbedderNet embedder;
    LatentCode w_bar;
    std::filesystem::path checkpoint;  // where it was loaded from or saved to
};

struct PretrainOutcome {
    SourceModel model;
    std::vector<HistoryRow> history;
    PretrainQuality quality;
};

/// Trains backbone and embedder, estimates the mean latent and writes the
/// checkpoint, history.csv and quality.json under layout.pretrain_dir().
PretrainOutcome run_pretrain(const ExperimentConfig& cfg, const Corpus& corpus, const Layout& layout);
SourceModel load_source_model(const Layout& layout);

/// A resolved unlearning source.
struct UnlearnSource {
    Scenario scenario = Scenario::random;
    int index = 0;
    std::string identity_id;  // empty for random
    LatentCode w_u;
    std::optional<Image> x_u;
    std::vector<Image> others;  // same identity, excluding x_u; empty for random
};

/// random: w_u = Map(z); ind: held-out variation of train identity k;
/// ood: image 0 of heldout_ood identity k.
UnlearnSource select_source(const SourceModel& m, const ExperimentConfig& cfg, Scenario s, int k);

/// The unlearning config a source actually runs with: `ucfg` with the
/// source's run seed.
UnlearnConfig run_config(const ExperimentConfig& cfg, const UnlearnConfig& ucfg, const UnlearnSource& src);

UnlearnResult unlearn_source(const SourceModel& m, const ExperimentConfig& cfg, const UnlearnConfig& ucfg,
                             const UnlearnSource& src);
EvalReport evaluate_source(const SourceModel& m, const FrechetReference& ref, const ExperimentConfig& cfg,
                           const UnlearnConfig& ucfg, const UnlearnSource& src, const GeneratorBundle& g_u);

/// Run directory contents: generator/ (G_u checkpoint), losses.csv, run.json, source.json.
void write_run(const std::filesystem::path& dir, const SourceModel& m, const UnlearnSource& src,
               UnlearnResult& result);

struct StoredRun {
    UnlearnConfig config;
    Scenario scenario = Scenario::random;
    int index = 0;
    LatentCode w_t;
    GeneratorBundle g_u;
};

StoredRun load_run(const std::filesystem::path& dir, const ArchConfig& arch);

struct RunOutcome {
    UnlearnResult result;
    EvalReport report;
};

/// Unlearn one source and evaluate it. Writes the run directory and its
/// report.json when `dir` is given.
RunOutcome run_source(const SourceModel& m, const FrechetReference& ref, const ExperimentConfig& cfg,
                      const UnlearnConfig& ucfg, const UnlearnSource& src,
                      const std::optional<std::filesystem::path>& dir = std::nullopt);

FrechetReference make_reference(const SourceModel& m, const ExperimentConfig& cfg);

struct SummaryRow {
    double axis_value = 0.0;
    int n = 0;
    double id_mean = 0, id_std = 0;
    std::optional<double> id_others_mean, id_others_std;
    double frechet_pre_mean = 0, frechet_pre_std = 0;
    double delta_mean = 0, delta_std = 0;
};

/// Mean and sample standard deviation over per-identity reports.
SummaryRow summarize(double axis_value, const std::vector<EvalReport>& reports);

/// Cross product of axis values and the first `identities` sources of the
/// scenario; per-run reports plus summary.csv under layout.ablate_dir(axis).
std::vector<SummaryRow> run_ablation(const SourceModel& m, const ExperimentConfig& cfg, const Layout& layout,
                                     const std::function<void(const std::string&)>& log = {});

/// Rows of the contact sheet for one run: source image (or its render for
/// random sources), target render G_s(w_t), unlearned render G_u(w_u), then
/// G_s / G_u pairs on `n_pairs` fixed prior latents.
std::vector<Image> grid_row(const SourceModel& m, const ExperimentConfig& cfg, const UnlearnSource& src,
                            const GeneratorBundle& g_u, const LatentCode& w_t, int n_pairs = 3);

/// Tiles (1, 3, h, w) images into one (1, 3, H, W) sheet; rows may differ in length.
Image contact_sheet(const std::vector<std::vector<Image>>& rows, int pad = 2);

void write_summary_csv(const std::string& axis, const std::vector<SummaryRow>& rows, const std::filesystem::path& path);

}  // namespace latent_unlearn
