#include "latent_unlearn/latentops.hpp"

#include <cmath>
#include <string>

namespace latent_unlearn {

NoiseVector sample_noise(int dim, Rng& rng) {
    NoiseVector z(dim);
    for (int i = 0; i < dim; ++i) z[i] = rng.normal();
    return z;
}

LatentCode estimate_mean_latent(const GeneratorBundle& g, int n_samples, Rng& rng) {
    if (n_samples < 1) throw std::invalid_argument("estimate_mean_latent: n_samples must be >= 1");
    LatentCode acc = LatentCode::Zero(g.arch.w_dim);
    constexpr int kChunk = 1000;
    for (int done = 0; done < n_samples; done += kChunk) {
        const int n = std::min(kChunk, n_samples - done);
        Tensor z(Shape{n, g.arch.z_dim, 1, 1});
        for (auto& v : z.values()) v = rng.normal();
        const Tensor w = map_forward(g, z);
        for (int i = 0; i < n; ++i) acc += latent_at(w, i);
    }
    return acc / static_cast<double>(n_samples);
}

LatentCode compute_identity_latent(const LatentCode& w_u, const LatentCode& w_bar) {
    if (w_u.size() != w_bar.size()) {
        throw std::invalid_argument("identity latent: dimension mismatch " + std::to_string(w_u.size()) + " vs " +
                                    std::to_string(w_bar.size()));
    }
    return w_u - w_bar;
}

LatentCode compute_target_latent(const LatentCode& w_u, const LatentCode& w_bar, double d, double eps) {
    const LatentCode w_id = compute_identity_latent(w_u, w_bar);
    const double norm = w_id.norm();
    if (!(norm >= eps)) {
        throw DegenerateSource("source latent is within " + std::to_string(norm) +
                               " of the mean latent; no identity direction to extrapolate");
    }
    return w_bar - d * (w_id / norm);
}

AdjacencyOffsets sample_adjacency_offsets(const LatentCode& w_u, double alpha_max, int n_a, const GeneratorBundle& g,
                                          Rng& rng, int max_retries) {
    if (!(alpha_max > 0.0)) throw std::invalid_argument("adjacency offsets: alpha_max must be > 0");
    if (n_a < 1) throw std::invalid_argument("adjacency offsets: N_a must be >= 1");
    if (w_u.size() != g.arch.w_dim) throw std::invalid_argument("adjacency offsets: w_u dimension mismatch");
    AdjacencyOffsets out;
    out.seed = rng.seed();
    for (int i = 0; i < n_a; ++i) {
        LatentCode dir;
        for (int attempt = 0;; ++attempt) {
            const LatentCode w_r = map_forward(g, sample_noise(g.arch.z_dim, rng));
            dir = w_r - w_u;
            if (dir.norm() >= kIdentityEpsilon) break;
            if (attempt + 1 >= max_retries) {
                throw SamplingError("adjacency offsets: prior samples keep landing on w_u");
            }
        }
        const double alpha = rng.uniform(0.0, alpha_max);
        out.offsets.push_back(alpha * dir / dir.norm());
        out.scales.push_back(alpha);
    }
    return out;
}

bool GlobalExclusion::accepts(const LatentCode& w) const {
    const double r = radius();
    return (w - w_u).norm() > r && (w - w_t).norm() > r;
}

GlobalSample sample_global_latents(int n_g, const GeneratorBundle& g, Rng& rng, const GlobalExclusion& exclusion,
                                   int max_consecutive_rejections) {
    if (n_g < 1) throw std::invalid_argument("global latents: N_g must be >= 1");
    GlobalSample out;
    int misses = 0;
    while (static_cast<int>(out.latents.size()) < n_g) {
        LatentCode w = map_forward(g, sample_noise(g.arch.z_dim, rng));
        ++out.draws;
        if (exclusion.accepts(w)) {
            out.latents.push_back(std::move(w));
            misses = 0;
        } else if (++misses >= max_consecutive_rejections) {
            throw SamplingError("global latents: " + std::to_string(misses) +
                                " consecutive prior samples fell inside the exclusion radius " +
                                std::to_string(exclusion.radius()) + "; check alpha_max/margin against the latent scale");
        }
    }
    return out;
}

}  // namespace latent_unlearn
