#include <doctest.h>

#include <cmath>
#include <filesystem>

#include <Eigen/LU>

#include "latent_unlearn/metrics.hpp"

using namespace latent_unlearn;

namespace {

FeatureMatrix gaussian_1d(int n, double mu, double sigma, Rng& rng) {
    FeatureMatrix m(n, 1);
    for (int i = 0; i < n; ++i) m(i, 0) = mu + sigma * rng.normal();
    return m;
}

struct Models {
    ArchConfig arch = ArchConfig::miniature();
    GeneratorBundle g_s;
    EncoderNet encoder;
    EmbedderNet embedder;
    Models() {
        Rng rng(21);
        g_s = make_generator(arch, rng);
        encoder = make_encoder(arch, rng);
        embedder = make_embedder(arch, rng);
    }
    GeneratorBundle noisy(double scale, std::uint64_t seed = 5) const {
        GeneratorBundle g = clone_generator(g_s);
        Rng rng(seed);
        for (auto* p : g.synthesis.parameters())
            for (auto& v : p->value) v += scale * rng.normal();
        return g;
    }
    std::vector<Image> random_images(int n, Rng& rng) const {
        std::vector<Image> out;
        for (int i = 0; i < n; ++i) {
            Image x(Shape{1, 3, arch.image_size(), arch.image_size()});
            for (auto& v : x.values()) v = rng.uniform(-1.0, 1.0);
            out.push_back(x);
        }
        return out;
    }
};

// 2x2 closed form: Tr sqrt(A B) = sqrt(tr(AB) + 2 sqrt(det(AB))).
double frechet_2d_oracle(const FeatureMatrix& a, const FeatureMatrix& b) {
    auto stats = [](const FeatureMatrix& x, Eigen::Vector2d& mu, Eigen::Matrix2d& cov) {
        mu = x.colwise().mean().transpose();
        cov.setZero();
        for (int i = 0; i < x.rows(); ++i) {
            const Eigen::Vector2d d = x.row(i).transpose() - mu;
            cov += d * d.transpose();
        }
        cov /= static_cast<double>(x.rows() - 1);
        cov += 1e-6 * Eigen::Matrix2d::Identity();
    };
    Eigen::Vector2d ma, mb;
    Eigen::Matrix2d ca, cb;
    stats(a, ma, ca);
    stats(b, mb, cb);
    const Eigen::Matrix2d p = ca * cb;
    const double tr_sqrt = std::sqrt(p.trace() + 2.0 * std::sqrt(p.determinant()));
    return (ma - mb).squaredNorm() + ca.trace() + cb.trace() - 2.0 * tr_sqrt;
}

}  // namespace

TEST_CASE("frechet distance on identical sets is zero") {
    Rng rng(1);
    FeatureMatrix a = FeatureMatrix::NullaryExpr(500, 8, [&] { return rng.normal(); });
    CHECK(frechet_distance(a, a) <= 1e-6);
}

TEST_CASE("1-D Gaussian frechet converges to the analytic value") {
    // N(0,1) vs N(1,1): (mu1 - mu2)^2 + (s1 - s2)^2 = 1.
    struct Step {
        int n;
        double tol;
    };
    for (auto [n, tol] : {Step{1000, 0.3}, Step{10000, 0.1}, Step{100000, 0.05}}) {
        Rng rng(100 + n);
        const double d = frechet_distance(gaussian_1d(n, 0.0, 1.0, rng), gaussian_1d(n, 1.0, 1.0, rng));
        INFO("n = " << n << " d = " << d);
        CHECK(std::abs(d - 1.0) <= tol);
    }
    // scale difference alone: (2 - 0.5)^2
    Rng rng(7);
    const double d = frechet_distance(gaussian_1d(100000, 0.0, 2.0, rng), gaussian_1d(100000, 0.0, 0.5, rng));
    CHECK(d == doctest::Approx(2.25).epsilon(0.03));
}

TEST_CASE("frechet distance is symmetric and matches the 2-D closed form") {
    Rng rng(2);
    Eigen::Matrix2d la, lb;
    la << 1.0, 0.0, 0.8, 0.5;
    lb << 0.4, 0.0, -1.1, 1.3;
    FeatureMatrix a(3000, 2), b(2000, 2);
    for (int i = 0; i < a.rows(); ++i) a.row(i) = (la * Eigen::Vector2d(rng.normal(), rng.normal())).transpose();
    for (int i = 0; i < b.rows(); ++i)
        b.row(i) = (lb * Eigen::Vector2d(rng.normal(), rng.normal()) + Eigen::Vector2d(0.3, -2.0)).transpose();
    const double ab = frechet_distance(a, b), ba = frechet_distance(b, a);
    CHECK(std::abs(ab - ba) <= 1e-6);
    CHECK(ab == doctest::Approx(frechet_2d_oracle(a, b)).epsilon(1e-9));
    CHECK(ab >= 0.0);
}

TEST_CASE("frechet distance argument errors") {
    FeatureMatrix a = FeatureMatrix::Zero(10, 3), b = FeatureMatrix::Zero(10, 4), one = FeatureMatrix::Zero(1, 3);
    CHECK_THROWS_AS(frechet_distance(a, b), std::invalid_argument);
    CHECK_THROWS_AS(frechet_distance(a, one), std::invalid_argument);
}

TEST_CASE("id similarity basics") {
    Models m;
    Rng rng(3);
    auto imgs = m.random_images(2, rng);
    CHECK(id_similarity(m.embedder, imgs[0], imgs[0]) == 1.0);
    CHECK(id_similarity(m.embedder, imgs[0], imgs[1]) == id_similarity(m.embedder, imgs[1], imgs[0]));

    // Embedder that is just a normalized flatten: disjoint supports give orthogonal embeddings.
    EmbedderNet flat;
    flat.arch = m.arch;
    const int s = m.arch.image_size();
    flat.net.add(make_reshape(3 * s * s, 1, 1)).add(make_l2_normalize());
    Image a(Shape{1, 3, s, s}), b(Shape{1, 3, s, s});
    a.at(0, 0, 1, 1) = 0.7;
    b.at(0, 2, 3, 5) = -0.2;
    CHECK(id_similarity(flat, a, b) == 0.0);
}

TEST_CASE("id metric and id_others") {
    Models m;
    Rng rng(4);
    LatentCode w(m.arch.w_dim);
    for (int i = 0; i < w.size(); ++i) w[i] = 2.0 * rng.normal();
    CHECK(id_metric(m.g_s, m.g_s, w, m.embedder) == 1.0);
    const GeneratorBundle g_u = m.noisy(0.3);
    const double id = id_metric(m.g_s, g_u, w, m.embedder);
    CHECK(id >= -1.0);
    CHECK(id < 1.0);

    auto others = m.random_images(4, rng);
    CHECK(id_others_metric(m.g_s, m.g_s, m.encoder, m.embedder, others) == doctest::Approx(1.0).epsilon(1e-12));
    double hand = 0.0;
    for (const auto& x : others) hand += id_metric(m.g_s, g_u, encode_one(m.encoder, x), m.embedder) / 4.0;
    CHECK(id_others_metric(m.g_s, g_u, m.encoder, m.embedder, others) == doctest::Approx(hand).epsilon(1e-12));
    CHECK(id_others_metric(m.g_s, g_u, m.encoder, m.embedder, {others[2]}) ==
          doctest::Approx(id_metric(m.g_s, g_u, encode_one(m.encoder, others[2]), m.embedder)).epsilon(1e-12));
    CHECK_THROWS_AS(id_others_metric(m.g_s, g_u, m.encoder, m.embedder, {}), std::invalid_argument);

    ArchConfig other = m.arch;
    other.feat_channels = 5;
    Rng r2(1);
    CHECK_THROWS_AS(id_metric(m.g_s, make_generator(other, r2), w, m.embedder), std::invalid_argument);
}

TEST_CASE("frechet_pre is zero for an unchanged generator and grows with noise") {
    Models m;
    CHECK(frechet_pre(m.g_s, m.g_s, m.embedder, 200, 9) <= 1e-6);
    const double small = frechet_pre(m.g_s, m.noisy(1e-3), m.embedder, 200, 9);
    const double large = frechet_pre(m.g_s, m.noisy(1e-2), m.embedder, 200, 9);
    CHECK(small >= 0.0);
    CHECK(small < large);
    CHECK_THROWS_AS(frechet_pre(m.g_s, m.g_s, m.embedder, 99, 9), std::invalid_argument);
}

TEST_CASE("delta frechet real is a signed difference of absolute distances") {
    Models m;
    Rng rng(6);
    auto real = m.random_images(150, rng);
    CHECK(std::abs(delta_frechet_real(m.g_s, m.g_s, m.embedder, real, 150, 3)) <= 1e-6);
    const GeneratorBundle g_u = m.noisy(0.05);
    const auto latents = fixed_prior_latents(m.g_s, 150, 3);
    const FeatureMatrix fr = image_features(m.embedder, real);
    const double oracle = frechet_distance(generated_features(g_u, m.embedder, latents), fr) -
                          frechet_distance(generated_features(m.g_s, m.embedder, latents), fr);
    CHECK(delta_frechet_real(m.g_s, g_u, m.embedder, real, 150, 3) == doctest::Approx(oracle).epsilon(1e-12));
}

TEST_CASE("evaluate assembles reports by scenario") {
    Models m;
    Rng rng(7);
    auto real = m.random_images(120, rng);
    const auto ref = make_frechet_reference(m.g_s, m.embedder, real, 120, 11);
    EvalInputs in;
    in.g_s = &m.g_s;
    in.g_u = &m.g_s;
    in.encoder = &m.encoder;
    in.embedder = &m.embedder;
    in.reference = &ref;
    in.w_u = LatentCode::Ones(m.arch.w_dim);
    in.others = m.random_images(3, rng);
    in.config = {{"d", 30}};

    in.scenario = Scenario::random;
    auto r = evaluate(in);
    CHECK_FALSE(r.id_others.has_value());
    CHECK(r.id == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(r.frechet_pre <= 1e-6);
    CHECK(std::abs(r.delta_frechet_real) <= 1e-6);
    CHECK(r.n_eval_latents == 120);
    CHECK(r.seeds["frechet_latents"] == 11);

    in.scenario = Scenario::ood;
    GeneratorBundle g_u = m.noisy(0.05);
    in.g_u = &g_u;
    r = evaluate(in);
    REQUIRE(r.id_others.has_value());
    CHECK(*r.id_others == doctest::Approx(id_others_metric(m.g_s, g_u, m.encoder, m.embedder, in.others)));
    CHECK(r.config_hash == config_hash(nlohmann::json{{"d", 30}}));
}

TEST_CASE("reports round-trip and reject invalid content") {
    EvalReport r;
    r.scenario = Scenario::ood;
    r.config_hash = "abc";
    r.seeds = {{"run", 4}};
    r.id = 0.123456789012345;
    r.id_others = -0.25;
    r.frechet_pre = 3.5;
    r.delta_frechet_real = -0.75;
    r.n_eval_latents = 2000;
    r.runtime_sec = 1.5;
    auto dir = std::filesystem::temp_directory_path() / "lu_metrics_report";
    std::filesystem::create_directories(dir);
    save_report(r, dir / "report.json");
    CHECK_FALSE(std::filesystem::exists(dir / "report.json.tmp"));
    auto back = load_report(dir / "report.json");
    CHECK(to_json(back) == to_json(r));
    CHECK(back.id == r.id);

    r.scenario = Scenario::random;
    CHECK_THROWS_AS(r.validate(), std::invalid_argument);
    r.id_others.reset();
    r.id = 1.5;
    CHECK_THROWS_AS(save_report(r, dir / "bad.json"), std::invalid_argument);
    CHECK_FALSE(std::filesystem::exists(dir / "bad.json"));
    CHECK_THROWS_AS(parse_scenario("celeb"), std::invalid_argument);
}
