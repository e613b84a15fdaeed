#pragma once

#include <array>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "latent_unlearn/rng.hpp"
#include "latent_unlearn/tensor.hpp"

namespace latent_unlearn {

/// Images are (n, 3, H, W) tensors with values in [-1, 1].
using Image = Tensor;

enum class Regime { in_domain, out_of_domain };
enum class Split { train, heldout_ind, heldout_ood };

Regime parse_regime(const std::string& s);
std::string to_string(Split s);
Split parse_split(const std::string& s);

struct Blob {
    std::array<double, 2> mu{};
    double sigma = 0.1;
    std::array<double, 3> color{};
    bool operator==(const Blob&) const = default;
};

/// Procedural identity: a few colored Gaussian blobs.
struct IdentitySpec {
    std::string identity_id;
    std::vector<Blob> blobs;
    bool operator==(const IdentitySpec&) const = default;
};

/// Per-image nuisance (the pose analog): shift, rotation in degrees, brightness.
struct VariationParams {
    std::array<double, 2> t{0.0, 0.0};
    double theta = 0.0;
    double b = 1.0;
    bool operator==(const VariationParams&) const = default;

    static VariationParams zero() { return {}; }
};

struct CorpusEntry {
    IdentitySpec spec;
    Split split = Split::train;
    std::vector<VariationParams> variations;
    bool operator==(const CorpusEntry&) const = default;
};

struct Corpus {
    std::vector<CorpusEntry> identities;
    int images_per_identity = 10;
    std::uint64_t generation_seed = 0;
    bool operator==(const Corpus&) const = default;

    std::vector<std::size_t> indices_of(Split s) const;
    std::size_t image_count() const { return identities.size() * static_cast<std::size_t>(images_per_identity); }
};

struct CorpusError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline constexpr int kCorpusVersion = 1;

/// Draws blob parameters uniformly over the regime's ranges: 3 blobs with
/// sigma in [0.08, 0.2] in-domain, 4 blobs with sigma in [0.05, 0.09] out of domain.
IdentitySpec sample_identity(Rng& rng, Regime regime);

/// Uniform over translation [-0.1, 0.1]^2, rotation [-15, 15] deg, brightness [0.9, 1.1].
VariationParams sample_variation(Rng& rng);

/// Pre-clamp channel intensities b * sum_k c_k exp(-|Rot(p - t) - mu_k|^2 / (2 sigma_k^2))
/// on a res x res grid spanning [-1, 1]^2, as (1, 3, res, res).
Tensor render_intensity(const IdentitySpec& spec, const VariationParams& var, int resolution);

/// Clamps intensities to [0, 1] and maps them affinely to [-1, 1]; shape (1, 3, res, res).
Image render_identity(const IdentitySpec& spec, const VariationParams& var, int resolution = 32);

/// Variation 0 of every identity is the zero variation; the rest are sampled.
Corpus build_corpus(int n_train_identities = 200, int n_heldout_ind = 20, int n_heldout_ood = 20,
                    int images_per_identity = 10, std::uint64_t seed = 0);

/// Renders image `v` of identity `i`.
Image render_corpus_image(const Corpus& corpus, std::size_t identity, std::size_t variation, int resolution = 32);

void save_corpus(const Corpus& corpus, const std::filesystem::path& path);
Corpus load_corpus(const std::filesystem::path& path);

}  // namespace latent_unlearn
