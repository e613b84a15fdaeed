#include <doctest.h>

#include <filesystem>

#include "grad_check.hpp"
#include "latent_unlearn/unlearn.hpp"

using namespace latent_unlearn;

namespace {

struct Fixture {
    ArchConfig arch = ArchConfig::miniature();
    GeneratorBundle g_s;
    GeneratorBundle g_u;
    EmbedderNet embedder;
    PerceptualNet percep{arch};

    explicit Fixture(std::uint64_t seed = 1) {
        Rng rng(seed);
        g_s = make_generator(arch, rng);
        g_u = clone_generator(g_s);
        embedder = make_embedder(arch, rng);
    }
    LossContext ctx() const { return {g_u, g_s, percep, embedder}; }

    void perturb_synthesis(Rng& rng, double scale) {
        for (auto* p : g_u.synthesis.parameters())
            for (auto& v : p->value) v += scale * rng.normal();
    }
};

LatentCode random_latent(int d, Rng& rng, double scale = 1.0) {
    LatentCode v(d);
    for (int i = 0; i < d; ++i) v[i] = scale * rng.normal();
    return v;
}

// Straight-line recomputation from the public forward functions.
double oracle_local(const Fixture& f, const LatentCode& w_u, const LatentCode& w_t, const LossWeights& w) {
    const Tensor F_u = synth_forward(f.g_u, latent_batch(w_u));
    const Tensor F_t = synth_forward(f.g_s, latent_batch(w_t));
    double mse = 0.0;
    for (std::size_t i = 0; i < F_u.size(); ++i) mse += (F_u[i] - F_t[i]) * (F_u[i] - F_t[i]);
    mse /= static_cast<double>(F_u.size());
    const Image x_u = render_forward(f.g_u, F_u), x_t = render_forward(f.g_s, F_t);
    const Tensor e_u = embed_identity(f.embedder, x_u), e_t = embed_identity(f.embedder, x_t);
    double cos = 0.0;
    for (std::size_t i = 0; i < e_u.size(); ++i) cos += e_u[i] * e_t[i];
    return w.l2 * mse + w.per * perceptual_distance(f.percep, x_u, x_t) + w.id * (1.0 - cos);
}

std::vector<std::vector<double>> snapshot(const Network& n) {
    std::vector<std::vector<double>> out;
    for (const auto* p : n.parameters()) out.push_back(p->value);
    return out;
}

UnlearnConfig small_config() {
    UnlearnConfig c;
    c.iterations = 5;
    c.mean_latent_samples = 500;
    c.d = 3.0;
    c.alpha_max = 1.0;
    c.global_margin = 0.5;
    c.learning_rate = 1e-2;
    c.seed = 77;
    return c;
}

std::filesystem::path scratch_dir(const std::string& name) {
    auto p = std::filesystem::temp_directory_path() / ("lu_unlearn_" + name);
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p;
}

constexpr double kStep = 1e-5;

}  // namespace

TEST_CASE("losses vanish when the generators and latents agree") {
    Fixture f;
    Rng rng(2);
    auto w = random_latent(f.arch.w_dim, rng, 2.0);
    CHECK(local_unlearn_loss(f.ctx(), w, w, {}) == doctest::Approx(0.0).epsilon(1e-12));
    std::vector<LatentCode> globals{random_latent(6, rng, 2.0), random_latent(6, rng, 2.0)};
    CHECK(global_preservation_loss(f.ctx(), globals) == 0.0);
    AdjacencyOffsets offs;
    offs.offsets = {random_latent(6, rng), random_latent(6, rng)};
    CHECK(adjacency_unlearn_loss(f.ctx(), w, w, offs, {}) == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("local loss matches a direct recomputation") {
    Fixture f;
    Rng rng(3);
    f.perturb_synthesis(rng, 0.05);
    for (int k = 0; k < 5; ++k) {
        auto w_u = random_latent(6, rng, 2.0), w_t = random_latent(6, rng, 2.0);
        LossWeights w{rng.uniform(0, 1), rng.uniform(0, 1), rng.uniform(0, 1)};
        CHECK(local_unlearn_loss(f.ctx(), w_u, w_t, w) == doctest::Approx(oracle_local(f, w_u, w_t, w)).epsilon(1e-12));
    }
}

TEST_CASE("adjacency reduces to the local loss at shifted points") {
    Fixture f;
    Rng rng(4);
    f.perturb_synthesis(rng, 0.05);
    auto w_u = random_latent(6, rng, 2.0), w_t = random_latent(6, rng, 2.0);
    AdjacencyOffsets zero;
    zero.offsets = {LatentCode::Zero(6)};
    const LossWeights w{};
    CHECK(adjacency_unlearn_loss(f.ctx(), w_u, w_t, zero, w) ==
          doctest::Approx(local_unlearn_loss(f.ctx(), w_u, w_t, w)).epsilon(1e-12));

    AdjacencyOffsets offs;
    offs.offsets = {random_latent(6, rng), random_latent(6, rng), random_latent(6, rng)};
    double mean = 0.0;
    for (const auto& o : offs.offsets) mean += oracle_local(f, w_u + o, w_t + o, w) / 3.0;
    CHECK(adjacency_unlearn_loss(f.ctx(), w_u, w_t, offs, w) == doctest::Approx(mean).epsilon(1e-12));
}

TEST_CASE("global loss is the mean perceptual distance and grows with drift") {
    Fixture f;
    Rng rng(5);
    std::vector<LatentCode> globals{random_latent(6, rng, 2.0), random_latent(6, rng, 2.0)};
    Rng dir_rng(6);
    const auto base = snapshot(f.g_u.synthesis);
    std::vector<std::vector<double>> dir;
    for (const auto& v : base) {
        std::vector<double> d(v.size());
        for (auto& x : d) x = dir_rng.normal();
        dir.push_back(d);
    }
    double prev = 0.0;
    for (double t : {0.01, 0.02, 0.04, 0.08}) {
        auto params = f.g_u.synthesis.parameters();
        for (std::size_t k = 0; k < params.size(); ++k)
            for (std::size_t i = 0; i < base[k].size(); ++i) params[k]->value[i] = base[k][i] + t * dir[k][i];
        const double l = global_preservation_loss(f.ctx(), globals);
        double oracle = 0.0;
        for (const auto& g : globals) oracle += perceptual_distance(f.percep, generate(f.g_u, g), generate(f.g_s, g)) / 2.0;
        CHECK(l == doctest::Approx(oracle).epsilon(1e-12));
        CHECK(l > prev);
        prev = l;
    }
}

TEST_CASE("total loss is the exact weighted sum of its terms") {
    Fixture f;
    Rng rng(7);
    f.perturb_synthesis(rng, 0.05);
    auto w_u = random_latent(6, rng, 2.0), w_t = random_latent(6, rng, 2.0);
    AdjacencyOffsets offs;
    offs.offsets = {random_latent(6, rng), random_latent(6, rng)};
    std::vector<LatentCode> globals{random_latent(6, rng, 2.0), random_latent(6, rng, 2.0)};
    UnlearnConfig cfg;
    cfg.lambda_adj = 0.7;
    cfg.lambda_global = 2.5;
    cfg.adjacency = LossWeights{0.3, 0.6, 0.2};
    const auto b = total_loss(f.ctx(), w_u, w_t, offs, globals, cfg);
    CHECK(b.local == doctest::Approx(local_unlearn_loss(f.ctx(), w_u, w_t, cfg.local)).epsilon(1e-12));
    CHECK(b.adj == doctest::Approx(adjacency_unlearn_loss(f.ctx(), w_u, w_t, offs, *cfg.adjacency)).epsilon(1e-12));
    CHECK(b.global == doctest::Approx(global_preservation_loss(f.ctx(), globals)).epsilon(1e-12));
    CHECK(b.total == doctest::Approx(b.local + 0.7 * b.adj + 2.5 * b.global).epsilon(1e-12));

    cfg.alpha_max = 0.0;
    const auto no_adj = total_loss(f.ctx(), w_u, w_t, offs, globals, cfg);
    CHECK(no_adj.adj == 0.0);
    CHECK(no_adj.total == doctest::Approx(b.local + 2.5 * b.global).epsilon(1e-12));
}

TEST_CASE("total loss gradient matches finite differences") {
    Fixture f;
    Rng rng(8);
    f.perturb_synthesis(rng, 0.05);
    auto w_u = random_latent(6, rng, 2.0), w_t = random_latent(6, rng, 2.0);
    AdjacencyOffsets offs;
    offs.offsets = {random_latent(6, rng), random_latent(6, rng)};
    std::vector<LatentCode> globals{random_latent(6, rng, 2.0), random_latent(6, rng, 2.0)};
    UnlearnConfig cfg;
    cfg.lambda_global = 1.5;

    Gradients grads = f.g_u.synthesis.zero_gradients();
    total_loss(f.ctx(), w_u, w_t, offs, globals, cfg, &grads);
    auto params = f.g_u.synthesis.parameters();
    for (int k = 0; k < 8; ++k) {
        auto dir = grad_check::random_direction(params, rng);
        const double analytic = grad_check::dot(grads, dir);
        const double fd = grad_check::directional_fd(
            params, dir, [&] { return total_loss(f.ctx(), w_u, w_t, offs, globals, cfg).total; }, kStep);
        INFO("direction " << k << ": analytic " << analytic << " fd " << fd);
        CHECK(grad_check::rel_err(analytic, fd) < 1e-5);
    }
}

TEST_CASE("identity term gradient matches finite differences in isolation") {
    Fixture f;
    Rng rng(9);
    f.perturb_synthesis(rng, 0.05);
    auto w_u = random_latent(6, rng, 2.0), w_t = random_latent(6, rng, 2.0);
    const LossWeights id_only{0.0, 0.0, 1.0};
    Gradients grads = f.g_u.synthesis.zero_gradients();
    local_unlearn_loss(f.ctx(), w_u, w_t, id_only, &grads);
    auto params = f.g_u.synthesis.parameters();
    for (int k = 0; k < 5; ++k) {
        auto dir = grad_check::random_direction(params, rng);
        const double analytic = grad_check::dot(grads, dir);
        const double fd =
            grad_check::directional_fd(params, dir, [&] { return local_unlearn_loss(f.ctx(), w_u, w_t, id_only); }, kStep);
        CHECK(grad_check::rel_err(analytic, fd) < 1e-5);
    }
}

TEST_CASE("without the identity term the embedder is irrelevant") {
    Fixture f;
    Rng rng(10);
    f.perturb_synthesis(rng, 0.05);
    auto w_u = random_latent(6, rng, 2.0), w_t = random_latent(6, rng, 2.0);
    const LossWeights no_id{1e-2, 1.0, 0.0};
    Gradients g1 = f.g_u.synthesis.zero_gradients();
    const double l1 = local_unlearn_loss(f.ctx(), w_u, w_t, no_id, &g1);
    Rng other(999);
    f.embedder.net.initialize(other);
    Gradients g2 = f.g_u.synthesis.zero_gradients();
    const double l2 = local_unlearn_loss(f.ctx(), w_u, w_t, no_id, &g2);
    CHECK(l1 == l2);
    CHECK(g1 == g2);
    CHECK(UnlearnConfig::preset("no-id").local.id == 0.0);
}

TEST_CASE("unlearning trains synthesis only and leaves the source untouched") {
    Fixture f;
    Rng rng(11);
    auto w_u = map_forward(f.g_s, random_latent(6, rng));
    const auto syn0 = snapshot(f.g_s.synthesis), map0 = snapshot(f.g_s.mapping), ren0 = snapshot(f.g_s.renderer);
    const auto emb0 = snapshot(f.embedder.net);
    auto res = run_unlearning(f.g_s, w_u, f.embedder, f.percep, small_config());
    CHECK(snapshot(f.g_s.synthesis) == syn0);
    CHECK(snapshot(res.g_u.mapping) == map0);
    CHECK(snapshot(res.g_u.renderer) == ren0);
    CHECK(snapshot(f.embedder.net) == emb0);
    CHECK(snapshot(res.g_u.synthesis) != syn0);
    CHECK(res.g_u.provenance == Provenance::unlearned);
    CHECK(res.g_u.frozen_mapping);
    CHECK(res.g_u.frozen_renderer);
    REQUIRE(res.record.rows.size() == 5);
    for (const auto& r : res.record.rows) {
        CHECK(r.l_adj > 0.0);
        CHECK(r.l_global >= 0.0);
        CHECK(r.l_total == doctest::Approx(r.l_local + r.l_adj + r.l_global).epsilon(1e-12));
    }
}

TEST_CASE("zero iterations returns an exact copy") {
    Fixture f;
    Rng rng(12);
    auto cfg = small_config();
    cfg.iterations = 0;
    auto res = run_unlearning(f.g_s, map_forward(f.g_s, random_latent(6, rng)), f.embedder, f.percep, cfg);
    CHECK(snapshot(res.g_u.synthesis) == snapshot(f.g_s.synthesis));
    CHECK(res.record.rows.empty());
}

TEST_CASE("runs are bitwise reproducible and seed-sensitive") {
    Fixture f;
    Rng rng(13);
    auto w_u = map_forward(f.g_s, random_latent(6, rng));
    auto cfg = small_config();
    auto a = run_unlearning(f.g_s, w_u, f.embedder, f.percep, cfg);
    auto b = run_unlearning(f.g_s, w_u, f.embedder, f.percep, cfg);
    CHECK(snapshot(a.g_u.synthesis) == snapshot(b.g_u.synthesis));
    cfg.seed += 1;
    auto c = run_unlearning(f.g_s, w_u, f.embedder, f.percep, cfg);
    CHECK(snapshot(a.g_u.synthesis) != snapshot(c.g_u.synthesis));
}

TEST_CASE("target selection follows the mode") {
    Fixture f;
    Rng rng(14);
    auto w_u = map_forward(f.g_s, random_latent(6, rng));
    auto cfg = small_config();
    cfg.iterations = 2;
    const LatentCode w_bar = LatentCode::Constant(6, 0.1);
    auto guide = run_unlearning(f.g_s, w_u, f.embedder, f.percep, cfg, w_bar);
    CHECK((guide.record.w_t - w_bar).norm() == doctest::Approx(3.0));
    CHECK((guide.record.w_t - compute_target_latent(w_u, w_bar, 3.0)).norm() == 0.0);

    cfg.mode = UnlearnMode::baseline;
    auto base = run_unlearning(f.g_s, w_u, f.embedder, f.percep, cfg, w_bar);
    CHECK(base.record.w_t == w_bar);
    for (const auto& r : base.record.rows) {
        CHECK(r.l_adj == 0.0);
        CHECK(r.l_global == 0.0);
        CHECK(r.l_total == r.l_local);
    }
}

TEST_CASE("config json round-trips and rejects unknown keys") {
    UnlearnConfig c = small_config();
    c.adjacency = LossWeights{0.5, 0.25, 0.0};
    c.mode = UnlearnMode::baseline;
    auto back = unlearn_config_from_json(to_json(c));
    CHECK(to_json(back) == to_json(c));
    CHECK_THROWS_WITH_AS(unlearn_config_from_json({{"alpha", 3}}), doctest::Contains("alpha"), std::invalid_argument);
    CHECK_THROWS_AS(unlearn_config_from_json({{"n_a", 0}}), std::invalid_argument);
    CHECK_THROWS_AS(unlearn_config_from_json({{"mode", "other"}}), std::invalid_argument);
    CHECK_THROWS_AS(UnlearnConfig::preset("nope"), std::invalid_argument);
}

TEST_CASE("loss csv round-trips") {
    UnlearnRunRecord rec;
    rec.rows = {{0, 1.5, 0.25, 1e-9, 1.75}, {1, 0.1, 0.2, 0.3, 0.6000000000000001}};
    auto dir = scratch_dir("csv");
    write_losses_csv(rec, dir / "losses.csv");
    auto rows = read_losses_csv(dir / "losses.csv");
    REQUIRE(rows.size() == 2);
    CHECK(rows[1].iteration == 1);
    CHECK(rows[0].l_global == 1e-9);
    CHECK(rows[1].l_total == 0.6000000000000001);
}
