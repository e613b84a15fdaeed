#pragma once

#include <stdexcept>
#include <vector>

#include "latent_unlearn/nets.hpp"

namespace latent_unlearn {

/// The source latent coincides with the mean latent, so no identity
/// direction exists to extrapolate along.
struct DegenerateSource : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct SamplingError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline constexpr double kIdentityEpsilon = 1e-6;

/// w_bar = (1/n) sum_i Map(z_i), z_i ~ N(0, I).
LatentCode estimate_mean_latent(const GeneratorBundle& g, int n_samples, Rng& rng);

/// w_id = w_u - w_bar.
LatentCode compute_identity_latent(const LatentCode& w_u, const LatentCode& w_bar);

/// w_t = w_bar - d * w_id / |w_id|. Throws DegenerateSource when |w_id| < eps.
/// d = 0 gives the mean latent; negative d interpolates toward w_u.
LatentCode compute_target_latent(const LatentCode& w_u, const LatentCode& w_bar, double d,
                                 double eps = kIdentityEpsilon);

/// Shared offsets for the adjacency loss: |offsets[i]| = scales[i] with
/// scales[i] ~ U(0, alpha_max), pointing from w_u toward a prior sample.
struct AdjacencyOffsets {
    std::vector<LatentCode> offsets;
    std::vector<double> scales;
    std::uint64_t seed = 0;
};

AdjacencyOffsets sample_adjacency_offsets(const LatentCode& w_u, double alpha_max, int n_a, const GeneratorBundle& g,
                                          Rng& rng, int max_retries = 100);

/// Exclusion balls of radius alpha_max + margin around the source and target.
struct GlobalExclusion {
    LatentCode w_u;
    LatentCode w_t;
    double alpha_max = 15.0;
    double margin = 1.0;

    double radius() const { return alpha_max + margin; }
    bool accepts(const LatentCode& w) const;
};

struct GlobalSample {
    std::vector<LatentCode> latents;
    long draws = 0;  // prior draws consumed, accepted or not
};

/// Rejection-samples n_g prior latents outside both exclusion balls.
/// Throws SamplingError after `max_consecutive_rejections` misses in a row.
GlobalSample sample_global_latents(int n_g, const GeneratorBundle& g, Rng& rng, const GlobalExclusion& exclusion,
                                   int max_consecutive_rejections = 1000);

NoiseVector sample_noise(int dim, Rng& rng);

}  // namespace latent_unlearn
