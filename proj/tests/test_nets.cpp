#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>

#include "grad_check.hpp"
#include "latent_unlearn/nets.hpp"

using namespace latent_unlearn;

namespace {

std::filesystem::path scratch_dir(const std::string& name) {
    auto p = std::filesystem::temp_directory_path() / ("lu_nets_" + name);
    std::filesystem::remove_all(p);
    return p;
}

NoiseVector random_vec(int d, Rng& rng, double scale = 1.0) {
    NoiseVector v(d);
    for (int i = 0; i < d; ++i) v[i] = scale * rng.normal();
    return v;
}

Tensor random_tensor(Shape s, Rng& rng, double scale = 1.0) {
    Tensor t(s);
    for (auto& v : t.values()) v = scale * rng.normal();
    return t;
}

Tensor unit_direction(Shape s, Rng& rng) {
    Tensor t = random_tensor(s, rng);
    double sq = 0.0;
    for (double v : t.values()) sq += v * v;
    for (auto& v : t.values()) v /= std::sqrt(sq);
    return t;
}

double weighted_sum(const Tensor& y, const Tensor& r) {
    double s = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) s += y[i] * r[i];
    return s;
}

/// Checks d/dtheta and d/dinput of <r, net(x)> against central differences
/// along `directions` random directions.
void check_network_gradients(Network& net, const Tensor& x, Rng& rng, int directions = 10) {
    const Tensor r = random_tensor(net.output_shape(x.shape()), rng);
    Trace trace;
    net.forward(x, trace);
    Gradients grads = net.zero_gradients();
    Tensor dx = net.backward(trace, r, &grads);

    auto params = net.parameters();
    for (int k = 0; k < directions; ++k) {
        if (!params.empty()) {
            auto dir = grad_check::random_direction(params, rng);
            const double analytic = grad_check::dot(grads, dir);
            const double fd = grad_check::directional_fd(params, dir, [&] { return weighted_sum(net.forward(x), r); });
            INFO(net.name() << " parameter direction " << k << ": analytic " << analytic << " fd " << fd);
            CHECK(grad_check::rel_err(analytic, fd) < 1e-4);
        }
        Tensor v = unit_direction(x.shape(), rng);
        const double h = 1e-5;
        Tensor xp = x, xm = x;
        for (std::size_t i = 0; i < x.size(); ++i) {
            xp[i] += h * v[i];
            xm[i] -= h * v[i];
        }
        const double fd_in = (weighted_sum(net.forward(xp), r) - weighted_sum(net.forward(xm), r)) / (2 * h);
        const double an_in = weighted_sum(dx, v);
        INFO(net.name() << " input direction " << k << ": analytic " << an_in << " fd " << fd_in);
        CHECK(grad_check::rel_err(an_in, fd_in) < 1e-4);
    }
}

}  // namespace

TEST_CASE("identity mapping returns its input") {
    ArchConfig a;
    a.latent_scale = 1.0;
    Rng rng(1);
    auto g = make_generator(a, rng);
    auto z = random_vec(a.z_dim, rng);
    CHECK(map_forward(g, z) == z);
    CHECK_THROWS_AS(map_forward(g, random_vec(a.z_dim + 1, rng)), std::invalid_argument);
}

TEST_CASE("default generator emits 32x32x3 images in [-1, 1], deterministically") {
    ArchConfig a;
    Rng rng(2);
    auto g = make_generator(a, rng);
    std::vector<LatentCode> ws;
    for (int i = 0; i < 4; ++i) ws.push_back(map_forward(g, random_vec(a.z_dim, rng)));
    auto img = generate(g, latent_batch(ws));
    CHECK(img.shape() == Shape{4, 3, 32, 32});
    for (double v : img.values()) {
        REQUIRE(v >= -1.0);
        REQUIRE(v <= 1.0);
    }
    CHECK(generate(g, latent_batch(ws)).values() == img.values());
    auto f = synth_forward(g, latent_batch(ws));
    CHECK(f.shape() == Shape{4, 32, 8, 8});
    Image raw = render_forward(g, f);
    for (auto& v : raw.values()) v = std::clamp(v, -1.0, 1.0);
    CHECK(raw.values() == img.values());
    CHECK_THROWS_AS(render_forward(g, Tensor(Shape{1, 31, 8, 8})), std::invalid_argument);
}

TEST_CASE("mean-pixel gradient w.r.t. w matches finite differences") {
    ArchConfig a;
    Rng rng(3);
    auto g = make_generator(a, rng);
    const LatentCode w = map_forward(g, random_vec(a.z_dim, rng));
    auto mean_pixel = [&](const LatentCode& code) {
        auto img = render_forward(g, synth_forward(g, latent_batch(code)));
        double s = 0.0;
        for (double v : img.values()) s += v;
        return s / static_cast<double>(img.size());
    };
    Trace ts, tr;
    auto f = g.synthesis.forward(latent_batch(w), ts);
    auto img = g.renderer.forward(f, tr);
    Tensor seed(img.shape(), 1.0 / static_cast<double>(img.size()));
    auto df = g.renderer.backward(tr, seed, nullptr);
    auto dw = g.synthesis.backward(ts, df, nullptr);
    for (int k = 0; k < 10; ++k) {
        LatentCode v = random_vec(a.w_dim, rng).normalized();
        const double h = 1e-5;
        const double fd = (mean_pixel(w + h * v) - mean_pixel(w - h * v)) / (2 * h);
        const double an = latent_at(dw, 0).dot(v);
        CHECK(grad_check::rel_err(an, fd) < 1e-4);
    }
}

TEST_CASE("every network's gradients match central finite differences") {
    ArchConfig a = ArchConfig::miniature();
    a.map_kind = MapKind::mlp;
    Rng rng(4);
    auto g = make_generator(a, rng);
    auto enc = make_encoder(a, rng);
    auto emb = make_embedder(a, rng);

    SUBCASE("mapping") { check_network_gradients(g.mapping, random_tensor({3, a.z_dim, 1, 1}, rng), rng); }
    SUBCASE("synthesis") {
        check_network_gradients(g.synthesis, random_tensor({3, a.w_dim, 1, 1}, rng, a.latent_scale), rng);
    }
    SUBCASE("renderer") {
        check_network_gradients(g.renderer, random_tensor({2, a.feat_channels, a.feat_size, a.feat_size}, rng), rng);
    }
    SUBCASE("encoder") { check_network_gradients(enc.net, random_tensor({2, 3, 8, 8}, rng, 0.5), rng); }
    SUBCASE("embedder") { check_network_gradients(emb.net, random_tensor({2, 3, 8, 8}, rng, 0.5), rng); }
}

TEST_CASE("affine mapping is differentiable in z (JVP vs finite differences)") {
    ArchConfig a = ArchConfig::miniature();
    a.map_kind = MapKind::affine;
    Rng rng(5);
    auto g = make_generator(a, rng);
    NoiseVector z = random_vec(a.z_dim, rng);
    Trace t;
    g.mapping.forward(latent_batch(z), t);
    for (int k = 0; k < 10; ++k) {
        NoiseVector v = random_vec(a.z_dim, rng).normalized();
        NoiseVector r = random_vec(a.w_dim, rng);
        auto dz = latent_at(g.mapping.backward(t, latent_batch(r), nullptr), 0);
        const double h = 1e-5;
        const double fd = (r.dot(map_forward(g, NoiseVector(z + h * v))) - r.dot(map_forward(g, NoiseVector(z - h * v)))) / (2 * h);
        CHECK(grad_check::rel_err(dz.dot(v), fd) < 1e-4);
    }
}

TEST_CASE("encoder and embedder contracts") {
    ArchConfig a;
    Rng rng(6);
    auto enc = make_encoder(a, rng);
    auto emb = make_embedder(a, rng);
    auto corpus = build_corpus(2, 1, 1, 2, 3);
    auto x = render_corpus_image(corpus, 0, 1);
    auto w1 = encode_one(enc, x);
    CHECK(w1.size() == a.w_dim);
    CHECK(encode_one(enc, x) == w1);

    auto e = embed_identity(emb, x);
    CHECK(e.shape() == Shape{1, 32, 1, 1});
    double norm = 0.0;
    for (double v : e.values()) norm += v * v;
    CHECK(std::sqrt(norm) == doctest::Approx(1.0).epsilon(1e-5));
    CHECK(embed_identity(emb, x).values() == e.values());
    double cos = 0.0;
    for (double v : e.values()) cos += v * v;
    CHECK(cos == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(embed_features(emb, x).sample_size() == static_cast<std::size_t>(a.embed_hidden));
    CHECK_THROWS_AS(encode(enc, Tensor(Shape{1, 3, 16, 16})), std::invalid_argument);
}

TEST_CASE("perceptual extractor is fixed by its seed") {
    ArchConfig a;
    PerceptualNet p1(a), p2(a);
    CHECK(p1.seed() == 1234);
    auto params1 = p1.network().parameters();
    auto params2 = p2.network().parameters();
    REQUIRE(params1.size() == params2.size());
    for (std::size_t k = 0; k < params1.size(); ++k) CHECK(params1[k]->value == params2[k]->value);
    auto corpus = build_corpus(1, 1, 1, 1, 0);
    auto feats = p1.features(render_corpus_image(corpus, 0, 0));
    CHECK(feats.size() == 3);
    CHECK(feats[0].shape() == Shape{1, 16, 32, 32});
    CHECK(feats[2].shape() == Shape{1, 32, 8, 8});
}

TEST_CASE("clone_generator makes an independent unlearned copy") {
    ArchConfig a;
    Rng rng(7);
    auto src = make_generator(a, rng);
    auto clone = clone_generator(src);
    CHECK(clone.provenance == Provenance::unlearned);
    CHECK(clone.frozen_mapping);
    CHECK(clone.frozen_renderer);
    LatentCode w = map_forward(src, random_vec(a.z_dim, rng));
    const auto before = generate(src, w).values();
    CHECK(generate(clone, w).values() == before);
    for (auto* p : clone.synthesis.parameters())
        for (auto& v : p->value) v += 1e-2 * rng.normal();
    CHECK(generate(src, w).values() == before);
    CHECK(generate(clone, w).values() != before);
}

TEST_CASE("checkpoint round trip restores bitwise parameters") {
    ArchConfig a;
    Rng rng(8);
    Checkpoint ck;
    ck.arch = a;
    ck.seed = 42;
    ck.generator = make_generator(a, rng);
    ck.encoder = make_encoder(a, rng);
    ck.embedder = make_embedder(a, rng);
    ck.mean_latent = LatentCode::Constant(a.w_dim, 0.25);
    ck.metadata = {{"note", "unit"}};
    auto dir = scratch_dir("roundtrip");
    save_checkpoint(ck, dir);
    validate_checkpoint(dir);

    auto back = load_checkpoint(dir);
    CHECK(back.arch == a);
    CHECK(back.seed == 42);
    CHECK(back.metadata["note"] == "unit");
    REQUIRE(back.mean_latent);
    CHECK(*back.mean_latent == *ck.mean_latent);
    auto same = [](const Network& x, const Network& y) {
        auto px = x.parameters(), py = y.parameters();
        if (px.size() != py.size()) return false;
        for (std::size_t k = 0; k < px.size(); ++k)
            if (px[k]->value != py[k]->value || px[k]->name != py[k]->name) return false;
        return true;
    };
    CHECK(same(back.generator->synthesis, ck.generator->synthesis));
    CHECK(same(back.generator->renderer, ck.generator->renderer));
    CHECK(same(back.encoder->net, ck.encoder->net));
    CHECK(same(back.embedder->net, ck.embedder->net));
    LatentCode w = LatentCode::Constant(a.w_dim, 0.5);
    CHECK(generate(*back.generator, w).values() == generate(*ck.generator, w).values());

    // manifest shape product * 4 == byte length for every array
    std::ifstream in(dir / "manifest.json");
    auto doc = nlohmann::json::parse(in);
    for (const auto& [name, shape] : doc["arrays"].items()) {
        std::size_t n = 1;
        for (int d : shape.get<std::vector<int>>()) n *= d;
        CHECK(std::filesystem::file_size(dir / (name + ".bin")) == n * 4);
    }
}

TEST_CASE("checkpoint errors are distinct") {
    ArchConfig a;
    Rng rng(9);
    Checkpoint ck;
    ck.arch = a;
    ck.generator = make_generator(a, rng);
    auto dir = scratch_dir("errors");
    save_checkpoint(ck, dir);

    ArchConfig wrong = a;
    wrong.w_dim = 48;
    wrong.z_dim = 48;
    try {
        load_checkpoint(dir, wrong);
        FAIL("expected shape mismatch");
    } catch (const CheckpointShapeError& e) {
        CHECK(std::string(e.what()).find("synthesis.1.weight") != std::string::npos);
    }

    auto corrupt = scratch_dir("corrupt");
    std::filesystem::copy(dir, corrupt);
    std::filesystem::resize_file(corrupt / "synthesis.1.weight.bin", 12);
    CHECK_THROWS_AS(load_checkpoint(corrupt), CheckpointCorruptError);
    CHECK_THROWS_AS(validate_checkpoint(corrupt), CheckpointCorruptError);

    auto versioned = scratch_dir("version");
    std::filesystem::copy(dir, versioned);
    {
        std::ifstream in(versioned / "manifest.json");
        auto doc = nlohmann::json::parse(in);
        doc["version"] = 99;
        std::ofstream out(versioned / "manifest.json");
        out << doc.dump();
    }
    CHECK_THROWS_AS(load_checkpoint(versioned), CheckpointVersionError);
    CHECK_THROWS_AS(load_checkpoint(scratch_dir("nothing")), CheckpointCorruptError);
}
