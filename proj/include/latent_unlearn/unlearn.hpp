#pragma once

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "latent_unlearn/latentops.hpp"

namespace latent_unlearn {

/// Weights of the three local terms: feature L2, perceptual, identity.
struct LossWeights {
    double l2 = 1e-2;
    double per = 1.0;
    double id = 1e-1;
    bool operator==(const LossWeights&) const = default;
};

enum class UnlearnMode { guide, baseline };
std::string to_string(UnlearnMode m);
UnlearnMode parse_unlearn_mode(const std::string& s);

struct UnlearnConfig {
    double d = 30.0;
    double alpha_max = 15.0;  // 0 disables the adjacency term
    int n_a = 2;
    int n_g = 2;
    LossWeights local;
    std::optional<LossWeights> adjacency;  // unset: shares `local`
    double lambda_adj = 1.0;
    double lambda_global = 1.0;
    double learning_rate = 1e-4;
    int iterations = 1000;
    std::uint64_t seed = 0;
    UnlearnMode mode = UnlearnMode::guide;
    int mean_latent_samples = 10000;
    double global_margin = 1.0;

    const LossWeights& adjacency_weights() const { return adjacency ? *adjacency : local; }
    bool adjacency_enabled() const { return mode == UnlearnMode::guide && alpha_max > 0.0 && lambda_adj != 0.0; }
    bool global_enabled() const { return mode == UnlearnMode::guide && lambda_global != 0.0; }
    void validate() const;

    /// Named presets; "no-id" drops the identity term (lambda_id = 0).
    static UnlearnConfig preset(const std::string& name);
};

nlohmann::json to_json(const UnlearnConfig& c);
/// Unknown keys are rejected with the key name.
UnlearnConfig unlearn_config_from_json(const nlohmann::json& j, UnlearnConfig base = {});

/// The networks a loss evaluation reads. Only g_u's synthesis stage ever
/// receives gradients; everything else is a constant.
struct LossContext {
    const GeneratorBundle& g_u;
    const GeneratorBundle& g_s;
    const PerceptualNet& percep;
    const EmbedderNet& embedder;
};

/// Mean over perceptual layers of the per-layer mean squared difference.
double perceptual_distance(const PerceptualNet& p, const Image& a, const Image& b);

/// lambda_L2 mse(G_u(w_u), G_s(w_t)) + lambda_per percdist + lambda_id (1 - cos) on the renders.
/// Adds d/d(synthesis params of g_u) into `grads` when given.
double local_unlearn_loss(const LossContext& ctx, const LatentCode& w_u, const LatentCode& w_t,
                          const LossWeights& weights, Gradients* grads = nullptr);

/// Mean over offsets of the local loss at (w_u + delta_i, w_t + delta_i).
double adjacency_unlearn_loss(const LossContext& ctx, const LatentCode& w_u, const LatentCode& w_t,
                              const AdjacencyOffsets& offsets, const LossWeights& weights,
                              Gradients* grads = nullptr);

/// Mean perceptual distance between G_u and G_s renders of the given latents.
double global_preservation_loss(const LossContext& ctx, const std::vector<LatentCode>& globals,
                                Gradients* grads = nullptr);

struct LossBreakdown {
    double local = 0.0;
    double adj = 0.0;
    double global = 0.0;
    double total = 0.0;
};

/// local + lambda_adj * adj + lambda_global * global, evaluated in one batch.
/// Disabled terms (per `cfg`) contribute 0 and are not evaluated.
LossBreakdown total_loss(const LossContext& ctx, const LatentCode& w_u, const LatentCode& w_t,
                         const AdjacencyOffsets& offsets, const std::vector<LatentCode>& globals,
                         const UnlearnConfig& cfg, Gradients* grads = nullptr);

struct LossRow {
    int iteration = 0;
    double l_local = 0.0, l_adj = 0.0, l_global = 0.0, l_total = 0.0;
};

struct UnlearnRunRecord {
    UnlearnConfig config;
    std::vector<LossRow> rows;
    LatentCode w_u, w_t, w_bar;
    double wall_time_sec = 0.0;
    std::string source_checkpoint;
    std::string unlearned_checkpoint;
};

struct UnlearnResult {
    GeneratorBundle g_u;
    UnlearnRunRecord record;
};

struct NonFiniteLoss : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Clones G_s, picks the target (extrapolated in guide mode, the mean latent
/// in baseline mode) and runs `cfg.iterations` Adam steps on the synthesis
/// parameters only. Adjacency offsets and global latents are redrawn every
/// iteration from iteration-labelled substreams of `cfg.seed`.
UnlearnResult run_unlearning(const GeneratorBundle& g_s, const LatentCode& w_u, const EmbedderNet& embedder,
                             const PerceptualNet& percep, const UnlearnConfig& cfg,
                             const std::optional<LatentCode>& mean_latent = std::nullopt);

void write_losses_csv(const UnlearnRunRecord& rec, const std::filesystem::path& path);
std::vector<LossRow> read_losses_csv(const std::filesystem::path& path);
nlohmann::json run_json(const UnlearnRunRecord& rec);

}  // namespace latent_unlearn
