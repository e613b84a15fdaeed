#include "latent_unlearn/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include <json.hpp>

namespace latent_unlearn {

using nlohmann::json;

Regime parse_regime(const std::string& s) {
    if (s == "in_domain") return Regime::in_domain;
    if (s == "out_of_domain") return Regime::out_of_domain;
    throw std::invalid_argument("unknown regime '" + s + "' (expected in_domain or out_of_domain)");
}

std::string to_string(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::heldout_ind: return "heldout_ind";
        case Split::heldout_ood: return "heldout_ood";
    }
    return "train";
}

Split parse_split(const std::string& s) {
    if (s == "train") return Split::train;
    if (s == "heldout_ind") return Split::heldout_ind;
    if (s == "heldout_ood") return Split::heldout_ood;
    throw std::invalid_argument("unknown split '" + s + "'");
}

std::vector<std::size_t> Corpus::indices_of(Split s) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < identities.size(); ++i)
        if (identities[i].split == s) out.push_back(i);
    return out;
}

IdentitySpec sample_identity(Rng& rng, Regime regime) {
    int count = 3;
    double sigma_lo = 0.08, sigma_hi = 0.2;
    switch (regime) {
        case Regime::in_domain: break;
        case Regime::out_of_domain:
            count = 4;
            sigma_lo = 0.05;
            sigma_hi = 0.09;
            break;
        default: throw std::invalid_argument("unknown regime");
    }
    IdentitySpec spec;
    spec.blobs.resize(count);
    for (auto& b : spec.blobs) {
        b.mu = {rng.uniform(-0.6, 0.6), rng.uniform(-0.6, 0.6)};
        b.sigma = rng.uniform(sigma_lo, sigma_hi);
        b.color = {rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0)};
    }
    return spec;
}

VariationParams sample_variation(Rng& rng) {
    VariationParams v;
    v.t = {rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1)};
    v.theta = rng.uniform(-15.0, 15.0);
    v.b = rng.uniform(0.9, 1.1);
    return v;
}

Tensor render_intensity(const IdentitySpec& spec, const VariationParams& var, int resolution) {
    if (resolution < 8) throw std::invalid_argument("render resolution must be >= 8");
    Tensor out(Shape{1, 3, resolution, resolution});
    const double rad = var.theta * std::numbers::pi / 180.0;
    const double cs = std::cos(rad), sn = std::sin(rad);
    const double step = 2.0 / (resolution - 1);
    for (int iy = 0; iy < resolution; ++iy) {
        for (int ix = 0; ix < resolution; ++ix) {
            const double px = -1.0 + step * ix - var.t[0];
            const double py = -1.0 + step * iy - var.t[1];
            const double qx = cs * px - sn * py;
            const double qy = sn * px + cs * py;
            double acc[3] = {0.0, 0.0, 0.0};
            for (const auto& b : spec.blobs) {
                const double dx = qx - b.mu[0], dy = qy - b.mu[1];
                const double g = std::exp(-(dx * dx + dy * dy) / (2.0 * b.sigma * b.sigma));
                for (int c = 0; c < 3; ++c) acc[c] += b.color[c] * g;
            }
            for (int c = 0; c < 3; ++c) out.at(0, c, iy, ix) = var.b * acc[c];
        }
    }
    return out;
}

Image render_identity(const IdentitySpec& spec, const VariationParams& var, int resolution) {
    Tensor raw = render_intensity(spec, var, resolution);
    std::vector<double> px(raw.values());
    for (auto& v : px) v = 2.0 * std::clamp(v, 0.0, 1.0) - 1.0;
    return Tensor(Shape{1, 3, resolution, resolution}, std::move(px));
}

Corpus build_corpus(int n_train, int n_ind, int n_ood, int images_per_identity, std::uint64_t seed) {
    if (n_train < 1 || n_ind < 1 || n_ood < 1 || images_per_identity < 1) {
        throw std::invalid_argument("build_corpus: all counts must be >= 1");
    }
    Corpus corpus;
    corpus.images_per_identity = images_per_identity;
    corpus.generation_seed = seed;
    Rng root(seed);
    auto add = [&](Split split, int count, const char* prefix) {
        const Regime regime = split == Split::heldout_ood ? Regime::out_of_domain : Regime::in_domain;
        for (int i = 0; i < count; ++i) {
            const std::size_t global = corpus.identities.size();
            Rng spec_rng = root.substream("identity", global);
            Rng var_rng = root.substream("variation", global);
            CorpusEntry e;
            e.spec = sample_identity(spec_rng, regime);
            std::ostringstream id;
            id << prefix << "_" << i;
            e.spec.identity_id = id.str();
            e.split = split;
            e.variations.push_back(VariationParams::zero());
            for (int v = 1; v < images_per_identity; ++v) e.variations.push_back(sample_variation(var_rng));
            corpus.identities.push_back(std::move(e));
        }
    };
    add(Split::train, n_train, "train");
    add(Split::heldout_ind, n_ind, "ind");
    add(Split::heldout_ood, n_ood, "ood");
    return corpus;
}

Image render_corpus_image(const Corpus& corpus, std::size_t identity, std::size_t variation, int resolution) {
    const auto& e = corpus.identities.at(identity);
    return render_identity(e.spec, e.variations.at(variation), resolution);
}

void save_corpus(const Corpus& corpus, const std::filesystem::path& path) {
    json doc;
    doc["version"] = kCorpusVersion;
    doc["generation_seed"] = corpus.generation_seed;
    doc["images_per_identity"] = corpus.images_per_identity;
    json ids = json::array();
    for (const auto& e : corpus.identities) {
        json blobs = json::array();
        for (const auto& b : e.spec.blobs) blobs.push_back({{"mu", b.mu}, {"sigma", b.sigma}, {"color", b.color}});
        json vars = json::array();
        for (const auto& v : e.variations) vars.push_back({{"t", v.t}, {"theta", v.theta}, {"b", v.b}});
        ids.push_back({{"identity_id", e.spec.identity_id},
                       {"split", to_string(e.split)},
                       {"blobs", std::move(blobs)},
                       {"variations", std::move(vars)}});
    }
    doc["identities"] = std::move(ids);
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw CorpusError("cannot write corpus manifest " + path.string());
    out << doc.dump(1) << "\n";
    if (!out) throw CorpusError("failed writing corpus manifest " + path.string());
}

Corpus load_corpus(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw CorpusError("cannot open corpus manifest " + path.string());
    try {
        json doc = json::parse(in);
        if (doc.at("version").get<int>() != kCorpusVersion) {
            throw CorpusError("corpus manifest " + path.string() + ": unsupported version " +
                              doc.at("version").dump());
        }
        Corpus corpus;
        corpus.generation_seed = doc.at("generation_seed").get<std::uint64_t>();
        corpus.images_per_identity = doc.value("images_per_identity", 10);
        for (const auto& j : doc.at("identities")) {
            CorpusEntry e;
            e.spec.identity_id = j.at("identity_id").get<std::string>();
            e.split = parse_split(j.at("split").get<std::string>());
            for (const auto& b : j.at("blobs")) {
                Blob blob;
                blob.mu = b.at("mu").get<std::array<double, 2>>();
                blob.sigma = b.at("sigma").get<double>();
                blob.color = b.at("color").get<std::array<double, 3>>();
                e.spec.blobs.push_back(blob);
            }
            for (const auto& v : j.at("variations")) {
                VariationParams p;
                p.t = v.at("t").get<std::array<double, 2>>();
                p.theta = v.at("theta").get<double>();
                p.b = v.at("b").get<double>();
                e.variations.push_back(p);
            }
            if (static_cast<int>(e.variations.size()) != corpus.images_per_identity) {
                throw CorpusError("identity " + e.spec.identity_id + " has " +
                                  std::to_string(e.variations.size()) + " variations, expected " +
                                  std::to_string(corpus.images_per_identity));
            }
            corpus.identities.push_back(std::move(e));
        }
        return corpus;
    } catch (const CorpusError& e) {
        throw;
    } catch (const std::exception& e) {
        throw CorpusError("corrupt corpus manifest " + path.string() + ": " + e.what());
    }
}

}  // namespace latent_unlearn
