#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <json.hpp>

#include "latent_unlearn/network.hpp"
#include "latent_unlearn/synthdata.hpp"

namespace latent_unlearn {

/// A point in the generator's style space (w) or in the noise prior (z).
using LatentCode = Eigen::VectorXd;
using NoiseVector = Eigen::VectorXd;

/// Style-space feature map produced by the synthesis stage, shape (n, C, S, S).
using SynthFeature = Tensor;

enum class MapKind { identity, affine, mlp };
enum class Provenance { source, unlearned };

std::string to_string(MapKind k);
MapKind parse_map_kind(const std::string& s);
std::string to_string(Provenance p);

/// Shapes and widths of every network. `latent_scale` is the isotropic scale
/// of the identity mapping (w = latent_scale * z); 1 gives the plain identity.
struct ArchConfig {
    int z_dim = 64;
    int w_dim = 64;
    MapKind map_kind = MapKind::identity;
    double latent_scale = 4.0;
    int map_width = 128;
    int feat_channels = 32;
    int feat_size = 8;
    int render_channels = 16;
    std::array<int, 4> encoder_channels{16, 32, 32, 64};
    std::array<int, 3> embedder_channels{16, 32, 64};
    int embed_hidden = 64;
    int embed_dim = 32;
    std::array<int, 3> perceptual_channels{16, 32, 32};
    std::uint64_t perceptual_seed = 1234;

    int image_size() const { return feat_size * 4; }
    void validate() const;

    /// Tiny widths for finite-difference checks (8x8 images).
    static ArchConfig miniature();

    bool operator==(const ArchConfig&) const = default;
};

nlohmann::json to_json(const ArchConfig& a);
ArchConfig arch_from_json(const nlohmann::json& j);

/// Mapping, synthesis and renderer stages. Only synthesis is ever trained
/// during unlearning.
struct GeneratorBundle {
    ArchConfig arch;
    Network mapping{"mapping"};
    Network synthesis{"synthesis"};
    Network renderer{"renderer"};
    bool frozen_mapping = false;
    bool frozen_synthesis = false;
    bool frozen_renderer = false;
    Provenance provenance = Provenance::source;
};

GeneratorBundle make_generator(const ArchConfig& arch, Rng& rng);

/// Deep copy tagged `unlearned`, with mapping and renderer frozen.
GeneratorBundle clone_generator(const GeneratorBundle& source);

/// Row-stacks latents into an (n, D, 1, 1) batch.
Tensor latent_batch(std::span<const LatentCode> codes);
Tensor latent_batch(const LatentCode& code);
LatentCode latent_at(const Tensor& batch, int i);

Tensor map_forward(const GeneratorBundle& g, const Tensor& z);
LatentCode map_forward(const GeneratorBundle& g, const NoiseVector& z);
SynthFeature synth_forward(const GeneratorBundle& g, const Tensor& w);
/// Raw renderer output; losses differentiate through this.
Image render_forward(const GeneratorBundle& g, const SynthFeature& f);
/// Images clamped to [-1, 1].
Image generate(const GeneratorBundle& g, const Tensor& w);
Image generate(const GeneratorBundle& g, const LatentCode& w);

/// Image -> latent inverter.
struct EncoderNet {
    ArchConfig arch;
    Network net{"encoder"};
};

EncoderNet make_encoder(const ArchConfig& arch, Rng& rng);
Tensor encode(const EncoderNet& e, const Image& x);
LatentCode encode_one(const EncoderNet& e, const Image& x);

/// Identity embedder: unit-norm embedding plus the pooled penultimate
/// activations used as distribution features.
struct EmbedderNet {
    ArchConfig arch;
    Network net{"embedder"};
    std::size_t feature_index = 0;  // activation index of the penultimate features
};

EmbedderNet make_embedder(const ArchConfig& arch, Rng& rng);
Tensor embed_identity(const EmbedderNet& e, const Image& x);
Tensor embed_features(const EmbedderNet& e, const Image& x);

/// Fixed random-feature extractor; weights are drawn once from the
/// configured seed and never change.
class PerceptualNet {
public:
    explicit PerceptualNet(const ArchConfig& arch);

    const Network& network() const { return net_; }
    std::span<const std::size_t> taps() const { return taps_; }
    std::uint64_t seed() const { return seed_; }

    std::vector<Tensor> features(const Image& x) const;

private:
    Network net_{"perceptual"};
    std::vector<std::size_t> taps_;
    std::uint64_t seed_;
};

inline std::vector<Tensor> perceptual_features(const PerceptualNet& p, const Image& x) { return p.features(x); }

// ---------------------------------------------------------------------------
// Checkpoints: a directory holding manifest.json plus one raw little-endian
// float32 file per parameter array.

inline constexpr int kCheckpointVersion = 1;

struct CheckpointError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct CheckpointVersionError : CheckpointError {
    using CheckpointError::CheckpointError;
};
struct CheckpointShapeError : CheckpointError {
    using CheckpointError::CheckpointError;
};
struct CheckpointCorruptError : CheckpointError {
    using CheckpointError::CheckpointError;
};

struct Checkpoint {
    ArchConfig arch;
    std::uint64_t seed = 0;
    std::optional<GeneratorBundle> generator;
    std::optional<EncoderNet> encoder;
    std::optional<EmbedderNet> embedder;
    std::optional<LatentCode> mean_latent;
    nlohmann::json metadata = nlohmann::json::object();
};

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& dir);
/// Builds networks from the manifest's architecture.
Checkpoint load_checkpoint(const std::filesystem::path& dir);
/// Builds networks from `expected`; any array whose stored shape differs is
/// reported by name.
Checkpoint load_checkpoint(const std::filesystem::path& dir, const ArchConfig& expected);

/// Checks that every array file holds exactly product(shape) floats.
void validate_checkpoint(const std::filesystem::path& dir);

}  // namespace latent_unlearn
