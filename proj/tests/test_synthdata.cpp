#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>

#include "latent_unlearn/synthdata.hpp"

using namespace latent_unlearn;

namespace {
std::filesystem::path scratch_dir(const std::string& name) {
    auto p = std::filesystem::temp_directory_path() / ("lu_synth_" + name);
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p;
}
}  // namespace

TEST_CASE("sample_identity is deterministic under a fixed seed") {
    Rng a(7), b(7);
    CHECK(sample_identity(a, Regime::in_domain) == sample_identity(b, Regime::in_domain));
}

TEST_CASE("regime fixes the blob count and sigma range") {
    Rng rng(3);
    CHECK(sample_identity(rng, Regime::in_domain).blobs.size() == 3);
    auto ood = sample_identity(rng, Regime::out_of_domain);
    CHECK(ood.blobs.size() == 4);
    for (const auto& b : ood.blobs) {
        CHECK(b.sigma >= 0.05);
        CHECK(b.sigma <= 0.09);
    }
    CHECK_THROWS_AS(parse_regime("sideways"), std::invalid_argument);
}

TEST_CASE("in-domain parameters stay within declared ranges over 1000 draws") {
    Rng rng(11);
    for (int i = 0; i < 1000; ++i) {
        auto spec = sample_identity(rng, Regime::in_domain);
        for (const auto& b : spec.blobs) {
            for (double m : b.mu) {
                REQUIRE(m >= -0.6);
                REQUIRE(m <= 0.6);
            }
            REQUIRE(b.sigma >= 0.08);
            REQUIRE(b.sigma <= 0.2);
            for (double c : b.color) {
                REQUIRE(c >= 0.0);
                REQUIRE(c <= 1.0);
            }
        }
        auto v = sample_variation(rng);
        REQUIRE(std::abs(v.t[0]) <= 0.1);
        REQUIRE(std::abs(v.t[1]) <= 0.1);
        REQUIRE(std::abs(v.theta) <= 15.0);
        REQUIRE(v.b >= 0.9);
        REQUIRE(v.b <= 1.1);
    }
}

TEST_CASE("single centered blob peaks at the center pixel") {
    IdentitySpec spec{"one", {Blob{{0.0, 0.0}, 0.15, {1.0, 1.0, 1.0}}}};
    const int res = 33;  // odd, so the grid contains the origin
    auto img = render_identity(spec, VariationParams::zero(), res);
    const double center = img.at(0, 0, res / 2, res / 2);
    for (std::size_t i = 0; i < img.size(); ++i) CHECK(img[i] <= center);
    CHECK(center == doctest::Approx(1.0));
}

TEST_CASE("rendering is bitwise reproducible") {
    Rng rng(5);
    auto spec = sample_identity(rng, Regime::in_domain);
    auto var = sample_variation(rng);
    auto a = render_identity(spec, var, 32);
    auto b = render_identity(spec, var, 32);
    CHECK(a.values() == b.values());
}

TEST_CASE("brightness scales pre-clamp intensities linearly") {
    // Dim colors keep 1.1 * intensity below 1, so nothing clamps.
    IdentitySpec spec{"dim",
                      {Blob{{0.2, -0.1}, 0.12, {0.2, 0.3, 0.1}}, Blob{{-0.3, 0.3}, 0.1, {0.1, 0.25, 0.3}}}};
    VariationParams lo{{0.05, -0.02}, 7.0, 0.9};
    VariationParams hi = lo;
    hi.b = 1.1;
    auto a = render_intensity(spec, lo, 24);
    auto b = render_intensity(spec, hi, 24);
    auto img_lo = render_identity(spec, lo, 24);

    // Independent recomputation of the formula at every grid point.
    const double rad = lo.theta * std::numbers::pi / 180.0;
    for (int y = 0; y < 24; ++y) {
        for (int x = 0; x < 24; ++x) {
            const double px = -1.0 + 2.0 * x / 23.0 - lo.t[0], py = -1.0 + 2.0 * y / 23.0 - lo.t[1];
            const double qx = std::cos(rad) * px - std::sin(rad) * py;
            const double qy = std::sin(rad) * px + std::cos(rad) * py;
            for (int c = 0; c < 3; ++c) {
                double s = 0.0;
                for (const auto& bl : spec.blobs) {
                    const double d2 = (qx - bl.mu[0]) * (qx - bl.mu[0]) + (qy - bl.mu[1]) * (qy - bl.mu[1]);
                    s += bl.color[c] * std::exp(-d2 / (2 * bl.sigma * bl.sigma));
                }
                REQUIRE(a.at(0, c, y, x) == doctest::Approx(0.9 * s).epsilon(1e-12));
                REQUIRE(b.at(0, c, y, x) == doctest::Approx(1.1 * s).epsilon(1e-12));
                REQUIRE(b.at(0, c, y, x) < 1.0);
                REQUIRE(img_lo.at(0, c, y, x) == doctest::Approx(2.0 * 0.9 * s - 1.0).epsilon(1e-12));
                if (s > 1e-9) REQUIRE(a.at(0, c, y, x) / b.at(0, c, y, x) == doctest::Approx(0.9 / 1.1).epsilon(1e-12));
            }
        }
    }
}

TEST_CASE("rendered values always lie in [-1, 1]") {
    Rng rng(21);
    for (int i = 0; i < 50; ++i) {
        auto spec = sample_identity(rng, i % 2 ? Regime::out_of_domain : Regime::in_domain);
        auto img = render_identity(spec, sample_variation(rng), 16);
        for (double v : img.values()) {
            REQUIRE(v >= -1.0);
            REQUIRE(v <= 1.0);
        }
    }
    CHECK_THROWS_AS(render_identity(IdentitySpec{}, VariationParams::zero(), 4), std::invalid_argument);
}

TEST_CASE("build_corpus honours split sizes and is deterministic") {
    auto c = build_corpus(200, 20, 20, 10, 0);
    CHECK(c.identities.size() == 240);
    CHECK(c.image_count() == 2400);
    CHECK(c.indices_of(Split::train).size() == 200);
    CHECK(c.indices_of(Split::heldout_ind).size() == 20);
    CHECK(c.indices_of(Split::heldout_ood).size() == 20);
    for (const auto& e : c.identities) {
        REQUIRE(e.variations.size() == 10);
        CHECK(e.variations[0] == VariationParams::zero());
        CHECK(e.spec.blobs.size() == (e.split == Split::heldout_ood ? 4u : 3u));
    }
    CHECK(c == build_corpus(200, 20, 20, 10, 0));
    CHECK_FALSE(c == build_corpus(200, 20, 20, 10, 1));
    CHECK_THROWS_AS(build_corpus(0, 1, 1, 1, 0), std::invalid_argument);
}

TEST_CASE("corpus manifest round-trips and re-renders bit for bit") {
    auto dir = scratch_dir("roundtrip");
    auto c = build_corpus(3, 1, 1, 4, 99);
    save_corpus(c, dir / "corpus.json");
    auto back = load_corpus(dir / "corpus.json");
    CHECK(back == c);
    for (std::size_t i = 0; i < c.identities.size(); ++i)
        for (std::size_t v = 0; v < 4; ++v)
            REQUIRE(render_corpus_image(c, i, v).values() == render_corpus_image(back, i, v).values());
}

TEST_CASE("truncated or missing manifest fails loudly") {
    auto dir = scratch_dir("truncated");
    auto c = build_corpus(2, 1, 1, 3, 4);
    save_corpus(c, dir / "corpus.json");
    std::string text;
    {
        std::ifstream in(dir / "corpus.json");
        text.assign(std::istreambuf_iterator<char>(in), {});
    }
    {
        std::ofstream out(dir / "cut.json");
        out << text.substr(0, text.size() / 2);
    }
    CHECK_THROWS_AS(load_corpus(dir / "cut.json"), CorpusError);
    CHECK_THROWS_AS(load_corpus(dir / "absent.json"), CorpusError);
    try {
        load_corpus(dir / "cut.json");
    } catch (const CorpusError& e) {
        CHECK(std::string(e.what()).find("cut.json") != std::string::npos);
    }
}

TEST_CASE("identities are separable by a raw-pixel nearest-centroid classifier") {
    // Centroids: zero-variation renders. Queries: every other variation.
    auto corpus = build_corpus(200, 1, 1, 10, 0);
    auto train = corpus.indices_of(Split::train);
    std::vector<Image> centroids;
    for (auto i : train) centroids.push_back(render_corpus_image(corpus, i, 0));
    int correct = 0, total = 0;
    for (std::size_t k = 0; k < train.size(); ++k) {
        for (std::size_t v = 1; v < 10; ++v) {
            auto q = render_corpus_image(corpus, train[k], v);
            std::size_t best = 0;
            double best_d = 1e300;
            for (std::size_t j = 0; j < centroids.size(); ++j) {
                double d = 0.0;
                for (std::size_t p = 0; p < q.size(); ++p) d += (q[p] - centroids[j][p]) * (q[p] - centroids[j][p]);
                if (d < best_d) {
                    best_d = d;
                    best = j;
                }
            }
            correct += best == k;
            ++total;
        }
    }
    const double acc = static_cast<double>(correct) / total;
    MESSAGE("nearest-centroid accuracy " << acc);
    CHECK(acc >= 0.95);
}
