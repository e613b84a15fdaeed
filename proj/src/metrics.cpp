#include "latent_unlearn/metrics.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>

#include <Eigen/Eigenvalues>

namespace latent_unlearn {

namespace {

constexpr int kBatch = 100;

double cosine_rows(const Tensor& a, const Tensor& b, int i) {
    auto x = a.sample(i), y = b.sample(i);
    double s = 0.0, xx = 0.0, yy = 0.0;
    for (std::size_t k = 0; k < x.size(); ++k) {
        s += x[k] * y[k];
        xx += x[k] * x[k];
        yy += y[k] * y[k];
    }
    // the embeddings are unit only up to rounding; dividing the norms back
    // out makes equal inputs give exactly 1 (sqrt(s * s) == s in IEEE doubles)
    if (xx == 0.0 || yy == 0.0) return 0.0;
    return std::clamp(s / std::sqrt(xx * yy), -1.0, 1.0);
}

void require_same_arch(const GeneratorBundle& a, const GeneratorBundle& b) {
    if (!(a.arch == b.arch)) throw std::invalid_argument("generators have different architectures");
}

// Symmetric PSD square root with eigenvalues clamped at zero.
Eigen::MatrixXd sqrt_psd(const Eigen::MatrixXd& m) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
    const Eigen::VectorXd ev = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

Eigen::MatrixXd covariance(const FeatureMatrix& x, const Eigen::RowVectorXd& mu) {
    const Eigen::MatrixXd c = x.rowwise() - mu;
    return (c.transpose() * c) / static_cast<double>(x.rows() - 1);
}

void copy_rows(const Tensor& t, FeatureMatrix& out, int offset) {
    const int k = static_cast<int>(t.sample_size());
    for (int i = 0; i < t.n(); ++i) {
        auto s = t.sample(i);
        for (int j = 0; j < k; ++j) out(offset + i, j) = s[j];
    }
}

}  // namespace

double id_similarity(const EmbedderNet& embedder, const Image& a, const Image& b) {
    return cosine_rows(embed_identity(embedder, a), embed_identity(embedder, b), 0);
}

double id_metric(const GeneratorBundle& g_s, const GeneratorBundle& g_u, const LatentCode& w_u,
                 const EmbedderNet& embedder) {
    require_same_arch(g_s, g_u);
    return id_similarity(embedder, generate(g_s, w_u), generate(g_u, w_u));
}

double id_others_metric(const GeneratorBundle& g_s, const GeneratorBundle& g_u, const EncoderNet& encoder,
                        const EmbedderNet& embedder, const std::vector<Image>& others) {
    if (others.empty()) throw std::invalid_argument("id_others_metric: no other images given");
    require_same_arch(g_s, g_u);
    const Tensor w = encode(encoder, concat(std::span<const Image>(others)));
    const Tensor a = embed_identity(embedder, generate(g_s, w));
    const Tensor b = embed_identity(embedder, generate(g_u, w));
    double s = 0.0;
    for (int i = 0; i < a.n(); ++i) s += cosine_rows(a, b, i);
    return s / static_cast<double>(a.n());
}

double frechet_distance(const FeatureMatrix& a, const FeatureMatrix& b) {
    if (a.cols() != b.cols()) {
        throw std::invalid_argument("frechet_distance: feature dimension mismatch " + std::to_string(a.cols()) +
                                    " vs " + std::to_string(b.cols()));
    }
    if (a.rows() < 2 || b.rows() < 2) throw std::invalid_argument("frechet_distance: need at least 2 samples per set");
    const Eigen::RowVectorXd mu_a = a.colwise().mean(), mu_b = b.colwise().mean();
    const auto I = Eigen::MatrixXd::Identity(a.cols(), a.cols());
    const Eigen::MatrixXd sa = covariance(a, mu_a) + 1e-6 * I;
    const Eigen::MatrixXd sb = covariance(b, mu_b) + 1e-6 * I;
    const Eigen::MatrixXd ra = sqrt_psd(sa);
    Eigen::MatrixXd m = ra * sb * ra;
    m = 0.5 * (m + m.transpose());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m, Eigen::EigenvaluesOnly);
    const double tr_sqrt = es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
    const double d = (mu_a - mu_b).squaredNorm() + sa.trace() + sb.trace() - 2.0 * tr_sqrt;
    return std::max(d, 0.0);
}

std::vector<LatentCode> fixed_prior_latents(const GeneratorBundle& g, int n, std::uint64_t seed) {
    Rng rng = Rng(seed).substream("frechet_latents");
    std::vector<LatentCode> out;
    out.reserve(n);
    for (int i = 0; i < n; ++i) {
        NoiseVector z(g.arch.z_dim);
        for (int k = 0; k < z.size(); ++k) z[k] = rng.normal();
        out.push_back(map_forward(g, z));
    }
    return out;
}

FeatureMatrix generated_features(const GeneratorBundle& g, const EmbedderNet& embedder,
                                 const std::vector<LatentCode>& latents) {
    FeatureMatrix out(static_cast<Eigen::Index>(latents.size()), embedder.arch.embed_hidden);
    for (std::size_t b = 0; b < latents.size(); b += kBatch) {
        const std::size_t n = std::min<std::size_t>(kBatch, latents.size() - b);
        const Tensor w = latent_batch(std::span<const LatentCode>(latents.data() + b, n));
        copy_rows(embed_features(embedder, generate(g, w)), out, static_cast<int>(b));
    }
    return out;
}

FeatureMatrix image_features(const EmbedderNet& embedder, const std::vector<Image>& images) {
    FeatureMatrix out(static_cast<Eigen::Index>(images.size()), embedder.arch.embed_hidden);
    for (std::size_t b = 0; b < images.size(); b += kBatch) {
        const std::size_t n = std::min<std::size_t>(kBatch, images.size() - b);
        const Tensor x = concat(std::span<const Image>(images.data() + b, n));
        copy_rows(embed_features(embedder, x), out, static_cast<int>(b));
    }
    return out;
}

FrechetReference make_frechet_reference(const GeneratorBundle& g_s, const EmbedderNet& embedder,
                                        const std::vector<Image>& real_images, int n_latents, std::uint64_t seed) {
    if (n_latents < 100) throw std::invalid_argument("Fréchet metrics need at least 100 latents");
    FrechetReference ref;
    ref.seed = seed;
    ref.latents = fixed_prior_latents(g_s, n_latents, seed);
    ref.source_features = generated_features(g_s, embedder, ref.latents);
    if (!real_images.empty()) {
        ref.real_features = image_features(embedder, real_images);
        ref.source_vs_real = frechet_distance(ref.source_features, ref.real_features);
    }
    return ref;
}

double frechet_pre(const FrechetReference& ref, const GeneratorBundle& g_u, const EmbedderNet& embedder) {
    return frechet_distance(ref.source_features, generated_features(g_u, embedder, ref.latents));
}

double frechet_pre(const GeneratorBundle& g_s, const GeneratorBundle& g_u, const EmbedderNet& embedder, int n_latents,
                   std::uint64_t seed) {
    require_same_arch(g_s, g_u);
    return frechet_pre(make_frechet_reference(g_s, embedder, {}, n_latents, seed), g_u, embedder);
}

double delta_frechet_real(const FrechetReference& ref, const GeneratorBundle& g_u, const EmbedderNet& embedder) {
    if (ref.real_features.rows() == 0) throw std::invalid_argument("delta_frechet_real: reference has no real images");
    const FeatureMatrix fu = generated_features(g_u, embedder, ref.latents);
    return frechet_distance(fu, ref.real_features) - ref.source_vs_real;
}

double delta_frechet_real(const GeneratorBundle& g_s, const GeneratorBundle& g_u, const EmbedderNet& embedder,
                          const std::vector<Image>& real_images, int n_latents, std::uint64_t seed) {
    require_same_arch(g_s, g_u);
    if (real_images.size() < 2) throw std::invalid_argument("delta_frechet_real: need at least 2 real images");
    return delta_frechet_real(make_frechet_reference(g_s, embedder, real_images, n_latents, seed), g_u, embedder);
}

std::string to_string(Scenario s) {
    switch (s) {
        case Scenario::random: return "random";
        case Scenario::ind: return "ind";
        case Scenario::ood: return "ood";
    }
    return "?";
}

Scenario parse_scenario(const std::string& s) {
    if (s == "random") return Scenario::random;
    if (s == "ind") return Scenario::ind;
    if (s == "ood") return Scenario::ood;
    throw std::invalid_argument("unknown scenario '" + s + "' (expected random|ind|ood)");
}

void EvalReport::validate() const {
    auto in_range = [](double v) { return std::isfinite(v) && v >= -1.0 && v <= 1.0; };
    if (!in_range(id)) throw std::invalid_argument("report: ID outside [-1, 1]");
    if (id_others && !in_range(*id_others)) throw std::invalid_argument("report: ID_others outside [-1, 1]");
    if (scenario == Scenario::random && id_others) throw std::invalid_argument("report: random scenario has no ID_others");
    if (!std::isfinite(frechet_pre) || frechet_pre < 0.0) throw std::invalid_argument("report: bad frechet_pre");
    if (!std::isfinite(delta_frechet_real)) throw std::invalid_argument("report: bad delta_frechet_real");
}

nlohmann::json to_json(const EvalReport& r) {
    nlohmann::json metrics{{"id", r.id}, {"frechet_pre", r.frechet_pre}, {"delta_frechet_real", r.delta_frechet_real}};
    if (r.id_others) metrics["id_others"] = *r.id_others;
    return {{"version", r.version},     {"scenario", to_string(r.scenario)},
            {"config_hash", r.config_hash}, {"seeds", r.seeds},
            {"metrics", metrics},       {"n_eval_latents", r.n_eval_latents},
            {"runtime_sec", r.runtime_sec}, {"feature_space", r.feature_space}};
}

EvalReport report_from_json(const nlohmann::json& j) {
    EvalReport r;
    r.version = j.at("version").get<int>();
    if (r.version != kReportVersion) throw std::runtime_error("unsupported report version " + std::to_string(r.version));
    r.scenario = parse_scenario(j.at("scenario").get<std::string>());
    r.config_hash = j.at("config_hash").get<std::string>();
    r.seeds = j.at("seeds");
    const auto& m = j.at("metrics");
    r.id = m.at("id").get<double>();
    if (m.contains("id_others")) r.id_others = m.at("id_others").get<double>();
    r.frechet_pre = m.at("frechet_pre").get<double>();
    r.delta_frechet_real = m.at("delta_frechet_real").get<double>();
    r.n_eval_latents = j.at("n_eval_latents").get<int>();
    r.runtime_sec = j.at("runtime_sec").get<double>();
    r.feature_space = j.value("feature_space", r.feature_space);
    r.validate();
    return r;
}

void save_report(const EvalReport& r, const std::filesystem::path& path) {
    r.validate();
    const auto tmp = std::filesystem::path(path.string() + ".tmp");
    {
        std::ofstream out(tmp);
        if (!out) throw std::runtime_error("cannot write " + tmp.string());
        out << to_json(r).dump(2) << '\n';
        if (!out) throw std::runtime_error("write failed for " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

EvalReport load_report(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read report " + path.string());
    return report_from_json(nlohmann::json::parse(in));
}

std::string config_hash(const nlohmann::json& j) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(hash_label(j.dump())));
    return buf;
}

EvalReport evaluate(const EvalInputs& in) {
    if (!in.g_s || !in.g_u || !in.embedder || !in.reference) throw std::invalid_argument("evaluate: missing inputs");
    if (in.reference->real_features.rows() < 2) throw std::invalid_argument("evaluate: reference lacks real features");
    const auto start = std::chrono::steady_clock::now();
    EvalReport r;
    r.scenario = in.scenario;
    r.config_hash = config_hash(in.config);
    r.seeds = in.seeds;
    r.seeds["frechet_latents"] = in.reference->seed;
    r.id = id_metric(*in.g_s, *in.g_u, in.w_u, *in.embedder);
    if (!in.others.empty() && in.scenario != Scenario::random) {
        if (!in.encoder) throw std::invalid_argument("evaluate: ID_others needs the encoder");
        r.id_others = id_others_metric(*in.g_s, *in.g_u, *in.encoder, *in.embedder, in.others);
    }
    const FeatureMatrix fu = generated_features(*in.g_u, *in.embedder, in.reference->latents);
    r.frechet_pre = frechet_distance(in.reference->source_features, fu);
    r.delta_frechet_real = frechet_distance(fu, in.reference->real_features) - in.reference->source_vs_real;
    r.n_eval_latents = static_cast<int>(in.reference->latents.size());
    r.runtime_sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    r.validate();
    return r;
}

}  // namespace latent_unlearn
