#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <json.hpp>

#include "latent_unlearn/nets.hpp"

namespace latent_unlearn {

/// Rows are samples, columns feature dimensions.
using FeatureMatrix = Eigen::MatrixXd;

/// Cosine of the two unit identity embeddings.
double id_similarity(const EmbedderNet& embedder, const Image& a, const Image& b);

/// id_similarity of the G_s and G_u renders of w_u.
double id_metric(const GeneratorBundle& g_s, const GeneratorBundle& g_u, const LatentCode& w_u,
                 const EmbedderNet& embedder);

/// Mean ID over the inversions of `others` (unseen images of the same identity).
double id_others_metric(const GeneratorBundle& g_s, const GeneratorBundle& g_u, const EncoderNet& encoder,
                        const EmbedderNet& embedder, const std::vector<Image>& others);

/// |mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)) with 1e-6 jitter on both
/// covariances; clamped to >= 0.
double frechet_distance(const FeatureMatrix& a, const FeatureMatrix& b);

/// The fixed prior latents behind frechet_pre: Map(z_i), z_i from `seed`.
std::vector<LatentCode> fixed_prior_latents(const GeneratorBundle& g, int n, std::uint64_t seed);

/// Penultimate embedder features of generate(g, w) for each latent.
FeatureMatrix generated_features(const GeneratorBundle& g, const EmbedderNet& embedder,
                                 const std::vector<LatentCode>& latents);
FeatureMatrix image_features(const EmbedderNet& embedder, const std::vector<Image>& images);

/// Everything on the source side of the Fréchet metrics that does not depend
/// on G_u, computed once per source generator.
struct FrechetReference {
    std::vector<LatentCode> latents;
    FeatureMatrix source_features;
    FeatureMatrix real_features;
    double source_vs_real = 0.0;
    std::uint64_t seed = 0;
};

FrechetReference make_frechet_reference(const GeneratorBundle& g_s, const EmbedderNet& embedder,
                                        const std::vector<Image>& real_images, int n_latents, std::uint64_t seed);

double frechet_pre(const GeneratorBundle& g_s, const GeneratorBundle& g_u, const EmbedderNet& embedder, int n_latents,
                   std::uint64_t seed);
double frechet_pre(const FrechetReference& ref, const GeneratorBundle& g_u, const EmbedderNet& embedder);

/// frechet(G_u samples, real) - frechet(G_s samples, real). Signed.
double delta_frechet_real(const GeneratorBundle& g_s, const GeneratorBundle& g_u, const EmbedderNet& embedder,
                          const std::vector<Image>& real_images, int n_latents, std::uint64_t seed);
double delta_frechet_real(const FrechetReference& ref, const GeneratorBundle& g_u, const EmbedderNet& embedder);

enum class Scenario { random, ind, ood };
std::string to_string(Scenario s);
Scenario parse_scenario(const std::string& s);

inline constexpr int kReportVersion = 1;

struct EvalReport {
    int version = kReportVersion;
    Scenario scenario = Scenario::random;
    std::string config_hash;
    nlohmann::json seeds = nlohmann::json::object();
    double id = 0.0;
    std::optional<double> id_others;
    double frechet_pre = 0.0;
    double delta_frechet_real = 0.0;
    int n_eval_latents = 0;
    double runtime_sec = 0.0;
    std::string feature_space = "embedder.penultimate";

    void validate() const;
};

nlohmann::json to_json(const EvalReport& r);
EvalReport report_from_json(const nlohmann::json& j);
/// Writes to a temporary file first so a partial report never appears.
void save_report(const EvalReport& r, const std::filesystem::path& path);
EvalReport load_report(const std::filesystem::path& path);

/// Stable short hash of a JSON document (its compact dump).
std::string config_hash(const nlohmann::json& j);

struct EvalInputs {
    Scenario scenario = Scenario::random;
    const GeneratorBundle* g_s = nullptr;
    const GeneratorBundle* g_u = nullptr;
    const EncoderNet* encoder = nullptr;  // needed only with `others`
    const EmbedderNet* embedder = nullptr;
    const FrechetReference* reference = nullptr;
    LatentCode w_u;
    std::vector<Image> others;  // empty: no ID_others
    nlohmann::json config = nlohmann::json::object();
    nlohmann::json seeds = nlohmann::json::object();
};

EvalReport evaluate(const EvalInputs& in);

}  // namespace latent_unlearn
