#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "latent_unlearn/metrics.hpp"
#include "latent_unlearn/nets.hpp"
#include "latent_unlearn/synthdata.hpp"

namespace latent_unlearn {

enum class PretrainMode { latent_autoencoder, adversarial };
std::string to_string(PretrainMode m);
PretrainMode parse_pretrain_mode(const std::string& s);

struct PretrainConfig {
    int epochs = 50;
    int batch_size = 32;
    double learning_rate = 1e-3;     // backbone, cosine-decayed per epoch
    std::uint64_t seed = 0;
    double beta = 0.05;              // moment penalty weight
    double perceptual_weight = 1.0;
    int train_variations = 8;        // per train identity; the rest are held out
    int augment_per_epoch = 1600;    // freshly rendered random variations per epoch
    PretrainMode mode = PretrainMode::latent_autoencoder;

    int embedder_epochs = 20;
    double embedder_lr = 1e-3;
    double cos_scale = 32.0;         // cosine-softmax logit scale
    double cos_margin = 0.2;         // additive cosine margin on the true class

    void validate() const;
};

nlohmann::json to_json(const PretrainConfig& c);
PretrainConfig pretrain_config_from_json(const nlohmann::json& j, PretrainConfig base = {});

struct NonFiniteTraining : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct BackboneLoss {
    double recon = 0.0;
    double percep = 0.0;
    double moment = 0.0;
    double total = 0.0;
};

/// Gradient buffers for the three trained backbone networks.
struct BackboneGrads {
    Gradients encoder, synthesis, renderer;
};

/// mean((generate(E(x)) - x)^2) + perceptual_weight * percdist + beta * moment(E(x) / latent_scale)
/// with moment(u) = |mean u|^2 + |cov u - I|_F^2 over the batch.
BackboneLoss backbone_loss(const GeneratorBundle& g, const EncoderNet& e, const PerceptualNet& percep,
                           const Image& x, const PretrainConfig& cfg, BackboneGrads* grads = nullptr);

/// Unnormalized class weights of the cosine-softmax head, (classes x embed_dim) row-major.
struct CosineHead {
    int classes = 0;
    Parameter weight;
};

CosineHead make_cosine_head(int classes, int embed_dim, Rng& rng);

struct EmbedderLoss {
    double loss = 0.0;
    int correct = 0;  // argmax of the unmargined cosines
};

/// Mean cross-entropy of s * (cos - m * onehot). Gradients go to the
/// embedder network and the head when given.
EmbedderLoss embedder_loss(const EmbedderNet& emb, const CosineHead& head, const Image& x, const std::vector<int>& labels,
                           const PretrainConfig& cfg, Gradients* net_grads = nullptr,
                           std::vector<double>* head_grad = nullptr);

struct HistoryRow {
    std::string stage;
    int epoch = 0;
    double recon = 0.0, percep = 0.0, moment = 0.0, total = 0.0;
    double accuracy = 0.0;  // embedder stage only
};

struct BackboneResult {
    GeneratorBundle generator;
    EncoderNet encoder;
    std::vector<HistoryRow> history;
};

struct EmbedderResult {
    EmbedderNet embedder;
    std::vector<HistoryRow> history;
};

/// Images (and identity labels) used for training: the first
/// `train_variations` images of every train identity.
struct TrainingSet {
    std::vector<Image> images;
    std::vector<int> labels;
    std::vector<std::size_t> identities;  // corpus index per label
};

TrainingSet training_set(const Corpus& corpus, int train_variations, int resolution);

/// Folds an affine whitening of the encoded training latents into the
/// encoder's last linear layer and its inverse into the synthesis input layer,
/// so reconstructions are unchanged while E(x) / latent_scale has zero mean and
/// identity covariance over `images`. Returns the pre-whitening covariance
/// eigenvalues (ascending).
Eigen::VectorXd whiten_latents(GeneratorBundle& g, EncoderNet& e, const std::vector<Image>& images,
                               double eps = 1e-4);

BackboneResult train_backbone(const Corpus& corpus, const ArchConfig& arch, const PretrainConfig& cfg);
EmbedderResult train_embedder(const Corpus& corpus, const ArchConfig& arch, const PretrainConfig& cfg);

Image reconstruct(const GeneratorBundle& g, const EncoderNet& e, const Image& x);

/// Held-out quality measurements used as pretraining gates.
struct PretrainQuality {
    double recon_id_cos = 0.0;        // embedder cosine of x vs reconstruct(x), heldout_ind images
    double train_recon_id_cos = 0.0;  // the same on training images
    double same_id_cos = 0.0;         // heldout_ind pairs of one identity
    double cross_id_cos = 0.0;        // heldout_ind pairs of different identities
    double frechet_prior = 0.0;       // prior samples vs train images
    double frechet_noise = 0.0;       // uniform noise vs train images
};

PretrainQuality measure_quality(const Corpus& corpus, const GeneratorBundle& g, const EncoderNet& e,
                                const EmbedderNet& emb, const PretrainConfig& cfg, std::uint64_t seed = 0);
nlohmann::json to_json(const PretrainQuality& q);

void write_history_csv(const std::vector<HistoryRow>& rows, const std::filesystem::path& path);

}  // namespace latent_unlearn
