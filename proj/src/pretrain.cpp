#include "latent_unlearn/pretrain.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <fstream>
#include <numeric>
#include <sstream>

#include <Eigen/Eigenvalues>

namespace latent_unlearn {

std::string to_string(PretrainMode m) {
    return m == PretrainMode::latent_autoencoder ? "latent_autoencoder" : "adversarial";
}

PretrainMode parse_pretrain_mode(const std::string& s) {
    if (s == "latent_autoencoder") return PretrainMode::latent_autoencoder;
    if (s == "adversarial") return PretrainMode::adversarial;
    throw std::invalid_argument("unknown pretrain mode '" + s + "'");
}

void PretrainConfig::validate() const {
    auto fail = [](const std::string& m) { throw std::invalid_argument("pretrain config: " + m); };
    if (epochs < 1 || embedder_epochs < 1) fail("epochs must be positive");
    if (batch_size < 2) fail("batch_size must be >= 2");
    if (!(learning_rate > 0.0) || !(embedder_lr > 0.0)) fail("learning rates must be positive");
    if (beta < 0.0 || perceptual_weight < 0.0) fail("loss weights must be >= 0");
    if (train_variations < 1) fail("train_variations must be >= 1");
    if (augment_per_epoch < 0) fail("augment_per_epoch must be >= 0");
    if (!(cos_scale > 0.0) || cos_margin < 0.0) fail("cosine head: scale > 0, margin >= 0");
    if (mode == PretrainMode::adversarial) fail("adversarial mode is not available in this build; use latent_autoencoder");
}

nlohmann::json to_json(const PretrainConfig& c) {
    return {{"epochs", c.epochs},
            {"batch_size", c.batch_size},
            {"learning_rate", c.learning_rate},
            {"seed", c.seed},
            {"beta", c.beta},
            {"perceptual_weight", c.perceptual_weight},
            {"train_variations", c.train_variations},
            {"augment_per_epoch", c.augment_per_epoch},
            {"mode", to_string(c.mode)},
            {"embedder_epochs", c.embedder_epochs},
            {"embedder_lr", c.embedder_lr},
            {"cos_scale", c.cos_scale},
            {"cos_margin", c.cos_margin}};
}

PretrainConfig pretrain_config_from_json(const nlohmann::json& j, PretrainConfig c) {
    if (!j.is_object()) throw std::invalid_argument("pretrain config must be a JSON object");
    for (const auto& [k, v] : j.items()) {
        if (k == "epochs") c.epochs = v.get<int>();
        else if (k == "batch_size") c.batch_size = v.get<int>();
        else if (k == "learning_rate") c.learning_rate = v.get<double>();
        else if (k == "seed") c.seed = v.get<std::uint64_t>();
        else if (k == "beta") c.beta = v.get<double>();
        else if (k == "perceptual_weight") c.perceptual_weight = v.get<double>();
        else if (k == "train_variations") c.train_variations = v.get<int>();
        else if (k == "augment_per_epoch") c.augment_per_epoch = v.get<int>();
        else if (k == "mode") c.mode = parse_pretrain_mode(v.get<std::string>());
        else if (k == "embedder_epochs") c.embedder_epochs = v.get<int>();
        else if (k == "embedder_lr") c.embedder_lr = v.get<double>();
        else if (k == "cos_scale") c.cos_scale = v.get<double>();
        else if (k == "cos_margin") c.cos_margin = v.get<double>();
        else throw std::invalid_argument("unknown pretrain config key '" + k + "'");
    }
    c.validate();
    return c;
}

BackboneLoss backbone_loss(const GeneratorBundle& g, const EncoderNet& e, const PerceptualNet& percep, const Image& x,
                           const PretrainConfig& cfg, BackboneGrads* grads) {
    const int B = x.n();
    Trace t_enc, t_syn, t_ren, t_per;
    e.net.forward(x, t_enc);
    const Tensor& w = t_enc.output();
    g.synthesis.forward(w, t_syn);
    g.renderer.forward(t_syn.output(), t_ren);
    const Tensor& xh = t_ren.output();

    BackboneLoss L;
    Tensor dxh(xh.shape());
    const double N = static_cast<double>(xh.size());
    for (std::size_t i = 0; i < xh.size(); ++i) {
        const double d = xh[i] - x[i];
        L.recon += d * d / N;
        dxh[i] = 2.0 * d / N;
    }

    if (cfg.perceptual_weight > 0.0) {
        const Network& pn = percep.network();
        pn.forward(xh, t_per);
        const auto ft = percep.features(x);
        const auto taps = percep.taps();
        const double nl = static_cast<double>(taps.size());
        std::vector<GradSeed> seeds;
        for (std::size_t l = 0; l < taps.size(); ++l) {
            const Tensor& fu = t_per.activations[taps[l]];
            const double m = static_cast<double>(fu.size());
            Tensor gl(fu.shape());
            double s = 0.0;
            for (std::size_t i = 0; i < fu.size(); ++i) {
                const double d = fu[i] - ft[l][i];
                s += d * d;
                gl[i] = cfg.perceptual_weight * 2.0 * d / (nl * m);
            }
            L.percep += s / (nl * m);
            seeds.push_back({taps[l], std::move(gl)});
        }
        if (grads) {
            const Tensor gx = pn.backward(t_per, std::move(seeds), nullptr);
            for (std::size_t i = 0; i < dxh.size(); ++i) dxh[i] += gx[i];
        }
    }

    // Moment penalty on u = w / s, rows are samples.
    const int D = static_cast<int>(w.sample_size());
    const double s = g.arch.latent_scale;
    Eigen::MatrixXd u(B, D);
    for (int i = 0; i < B; ++i)
        for (int k = 0; k < D; ++k) u(i, k) = w.sample(i)[k] / s;
    const Eigen::RowVectorXd mean = u.colwise().mean();
    const Eigen::MatrixXd c = u.rowwise() - mean;
    const Eigen::MatrixXd cov = c.transpose() * c / static_cast<double>(B - 1);
    const Eigen::MatrixXd dev = cov - Eigen::MatrixXd::Identity(D, D);
    L.moment = mean.squaredNorm() + dev.squaredNorm();

    L.total = L.recon + cfg.perceptual_weight * L.percep + cfg.beta * L.moment;
    if (!grads) return L;

    grads->renderer = g.renderer.zero_gradients();
    grads->synthesis = g.synthesis.zero_gradients();
    grads->encoder = e.net.zero_gradients();
    const Tensor dF = g.renderer.backward(t_ren, dxh, &grads->renderer);
    Tensor dw = g.synthesis.backward(t_syn, dF, &grads->synthesis);
    if (cfg.beta > 0.0) {
        // d|m|^2/du_i = 2m/B ; d|C - I|^2/du_i = 4 (C - I)(u_i - m) / (B - 1)
        const Eigen::MatrixXd du =
            (2.0 / B) * mean.replicate(B, 1) + (4.0 / (B - 1)) * (c * dev);  // dev symmetric
        for (int i = 0; i < B; ++i)
            for (int k = 0; k < D; ++k) dw.sample(i)[k] += cfg.beta * du(i, k) / s;
    }
    e.net.backward(t_enc, dw, &grads->encoder);
    return L;
}

CosineHead make_cosine_head(int classes, int embed_dim, Rng& rng) {
    CosineHead h;
    h.classes = classes;
    h.weight.name = "cosine_head.weight";
    h.weight.shape = {classes, embed_dim};
    h.weight.value.resize(static_cast<std::size_t>(classes) * embed_dim);
    Rng r = rng.substream("cosine_head");
    for (auto& v : h.weight.value) v = r.normal();
    quantize_f32(h.weight.value);
    return h;
}

EmbedderLoss embedder_loss(const EmbedderNet& emb, const CosineHead& head, const Image& x, const std::vector<int>& labels,
                           const PretrainConfig& cfg, Gradients* net_grads, std::vector<double>* head_grad) {
    const int B = x.n();
    if (static_cast<int>(labels.size()) != B) throw std::invalid_argument("embedder_loss: label count mismatch");
    Trace t;
    emb.net.forward(x, t);
    const Tensor& e = t.output();
    const int K = head.classes, D = static_cast<int>(e.sample_size());
    Eigen::Map<const Eigen::Matrix<double, -1, -1, Eigen::RowMajor>> W(head.weight.value.data(), K, D);
    const Eigen::VectorXd norms = W.rowwise().norm();
    const Eigen::MatrixXd Wn = norms.cwiseInverse().asDiagonal() * W;
    Eigen::Map<const Eigen::Matrix<double, -1, -1, Eigen::RowMajor>> E(e.data(), B, D);
    const Eigen::MatrixXd cos = E * Wn.transpose();  // B x K

    EmbedderLoss out;
    Eigen::MatrixXd dcos(B, K);
    for (int i = 0; i < B; ++i) {
        const int y = labels[i];
        if (y < 0 || y >= K) throw std::invalid_argument("embedder_loss: label out of range");
        Eigen::RowVectorXd logits = cfg.cos_scale * cos.row(i);
        logits[y] -= cfg.cos_scale * cfg.cos_margin;
        const double mx = logits.maxCoeff();
        const Eigen::RowVectorXd p = (logits.array() - mx).exp().matrix();
        const double z = p.sum();
        out.loss += (std::log(z) + mx - logits[y]) / B;
        Eigen::Index arg;
        cos.row(i).maxCoeff(&arg);
        out.correct += arg == y;
        dcos.row(i) = cfg.cos_scale * p / z / B;
        dcos(i, y) -= cfg.cos_scale / B;
    }
    if (head_grad) {
        // d cos_ik / d W_k = (e_i - cos_ik wn_k) / |W_k|
        Eigen::MatrixXd gW = dcos.transpose() * E;  // K x D, sum_i dcos_ik e_i
        const Eigen::VectorXd colsum = (dcos.array() * cos.array()).colwise().sum().transpose();
        gW -= colsum.asDiagonal() * Wn;
        gW = norms.cwiseInverse().asDiagonal() * gW;
        head_grad->assign(static_cast<std::size_t>(K) * D, 0.0);
        Eigen::Map<Eigen::Matrix<double, -1, -1, Eigen::RowMajor>>(head_grad->data(), K, D) = gW;
    }
    if (net_grads) {
        const Eigen::MatrixXd dE = dcos * Wn;  // B x D
        Tensor de(e.shape());
        Eigen::Map<Eigen::Matrix<double, -1, -1, Eigen::RowMajor>>(de.data(), B, D) = dE;
        emb.net.backward(t, de, net_grads);
    }
    return out;
}

TrainingSet training_set(const Corpus& corpus, int train_variations, int resolution) {
    if (train_variations > corpus.images_per_identity) {
        throw std::invalid_argument("train_variations exceeds images per identity");
    }
    TrainingSet ts;
    for (std::size_t idx : corpus.indices_of(Split::train)) {
        const int label = static_cast<int>(ts.identities.size());
        ts.identities.push_back(idx);
        for (int v = 0; v < train_variations; ++v) {
            ts.images.push_back(render_corpus_image(corpus, idx, v, resolution));
            ts.labels.push_back(label);
        }
    }
    if (ts.identities.empty()) throw std::invalid_argument("corpus has no train identities");
    return ts;
}

namespace {

// One epoch's worth of (image, label) pairs: the fixed training images plus
// freshly rendered random variations.
void epoch_pool(const Corpus& corpus, const TrainingSet& ts, int augment, int resolution, Rng& rng,
                std::vector<Image>& images, std::vector<int>& labels) {
    images = ts.images;
    labels = ts.labels;
    for (int a = 0; a < augment; ++a) {
        const int label = static_cast<int>(rng.index(ts.identities.size()));
        const auto& spec = corpus.identities[ts.identities[label]].spec;
        images.push_back(render_identity(spec, sample_variation(rng), resolution));
        labels.push_back(label);
    }
}

std::vector<std::size_t> shuffled(std::size_t n, Rng& rng) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng.engine());
    return order;
}

Image gather_images(const std::vector<Image>& pool, const std::vector<std::size_t>& order, std::size_t begin,
                    std::size_t count) {
    std::vector<Image> parts;
    parts.reserve(count);
    for (std::size_t k = 0; k < count; ++k) parts.push_back(pool[order[begin + k]]);
    return concat(std::span<const Image>(parts));
}

void abort_non_finite(const std::string& stage, int epoch, long step, double value) {
    std::ostringstream m;
    m << stage << ": non-finite loss " << value << " at epoch " << epoch << ", step " << step;
    throw NonFiniteTraining(m.str());
}

}  // namespace

Eigen::VectorXd whiten_latents(GeneratorBundle& g, EncoderNet& e, const std::vector<Image>& images, double eps) {
    if (images.size() < 2) throw std::invalid_argument("whiten_latents: need at least 2 images");
    const double s = g.arch.latent_scale;
    const int D = g.arch.w_dim;
    Eigen::MatrixXd u(static_cast<Eigen::Index>(images.size()), D);
    for (std::size_t b = 0; b < images.size(); b += 100) {
        const std::size_t n = std::min<std::size_t>(100, images.size() - b);
        const Tensor w = encode(e, concat(std::span<const Image>(images.data() + b, n)));
        for (std::size_t i = 0; i < n; ++i)
            for (int k = 0; k < D; ++k) u(static_cast<Eigen::Index>(b + i), k) = w.sample(static_cast<int>(i))[k] / s;
    }
    const Eigen::VectorXd mu = u.colwise().mean().transpose();
    const Eigen::MatrixXd c = u.rowwise() - mu.transpose();
    const Eigen::MatrixXd cov = c.transpose() * c / static_cast<double>(u.rows() - 1);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
    const Eigen::VectorXd lam = es.eigenvalues().cwiseMax(0.0).array() + eps;
    const Eigen::MatrixXd& V = es.eigenvectors();
    const Eigen::MatrixXd W = V * lam.cwiseSqrt().cwiseInverse().asDiagonal() * V.transpose();
    const Eigen::MatrixXd W_inv = V * lam.cwiseSqrt().asDiagonal() * V.transpose();

    using RowMat = Eigen::Matrix<double, -1, -1, Eigen::RowMajor>;
    auto ep = e.net.parameters();
    Parameter& A = *ep[ep.size() - 2];
    Parameter& bias = *ep.back();
    const int H = A.shape[1];
    Eigen::Map<RowMat> Am(A.value.data(), D, H);
    Eigen::Map<Eigen::VectorXd> bm(bias.value.data(), D);
    Am = (W * Am).eval();
    bm = (W * (bm - mu)).eval();

    auto sp = g.synthesis.parameters();
    Parameter& M = *sp[0];
    Parameter& cb = *sp[1];
    const int O = M.shape[0];
    Eigen::Map<RowMat> Mm(M.value.data(), O, D);
    Eigen::Map<Eigen::VectorXd> cm(cb.value.data(), O);
    cm += Mm * mu;
    Mm = (Mm * W_inv).eval();
    for (Parameter* p : {&A, &bias, &M, &cb}) quantize_f32(p->value);
    return es.eigenvalues();
}

BackboneResult train_backbone(const Corpus& corpus, const ArchConfig& arch, const PretrainConfig& cfg) {
    cfg.validate();
    if (arch.map_kind != MapKind::identity) {
        throw std::invalid_argument("latent autoencoder pretraining needs the identity mapping");
    }
    const Rng root(cfg.seed);
    Rng init = root.substream("backbone_init");
    BackboneResult res{make_generator(arch, init), make_encoder(arch, init), {}};
    const PerceptualNet percep(arch);
    const TrainingSet ts = training_set(corpus, cfg.train_variations, arch.image_size());

    auto enc_p = res.encoder.net.parameters();
    auto syn_p = res.generator.synthesis.parameters();
    auto ren_p = res.generator.renderer.parameters();
    Adam a_enc(cfg.learning_rate), a_syn(cfg.learning_rate), a_ren(cfg.learning_rate);

    long step = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        // cosine decay over the epochs
        const double lr = 0.5 * cfg.learning_rate * (1.0 + std::cos(std::numbers::pi * epoch / cfg.epochs));
        for (Adam* a : {&a_enc, &a_syn, &a_ren}) a->set_learning_rate(lr);
        Rng rng = root.substream("backbone_epoch", static_cast<std::uint64_t>(epoch));
        std::vector<Image> pool;
        std::vector<int> labels;
        epoch_pool(corpus, ts, cfg.augment_per_epoch, arch.image_size(), rng, pool, labels);
        const auto order = shuffled(pool.size(), rng);
        HistoryRow row{"backbone", epoch};
        int batches = 0;
        for (std::size_t b = 0; b + cfg.batch_size <= order.size(); b += cfg.batch_size, ++step) {
            const Image x = gather_images(pool, order, b, cfg.batch_size);
            BackboneGrads g;
            const BackboneLoss L = backbone_loss(res.generator, res.encoder, percep, x, cfg, &g);
            if (!std::isfinite(L.total)) abort_non_finite("backbone", epoch, step, L.total);
            a_enc.step(enc_p, g.encoder);
            a_syn.step(syn_p, g.synthesis);
            a_ren.step(ren_p, g.renderer);
            row.recon += L.recon;
            row.percep += L.percep;
            row.moment += L.moment;
            row.total += L.total;
            ++batches;
        }
        row.recon /= batches;
        row.percep /= batches;
        row.moment /= batches;
        row.total /= batches;
        res.history.push_back(row);
    }
    whiten_latents(res.generator, res.encoder, ts.images);
    return res;
}

EmbedderResult train_embedder(const Corpus& corpus, const ArchConfig& arch, const PretrainConfig& cfg) {
    cfg.validate();
    const Rng root(cfg.seed);
    Rng init = root.substream("embedder_init");
    EmbedderResult res{make_embedder(arch, init), {}};
    const TrainingSet ts = training_set(corpus, cfg.train_variations, arch.image_size());
    CosineHead head = make_cosine_head(static_cast<int>(ts.identities.size()), arch.embed_dim, init);

    auto params = res.embedder.net.parameters();
    Adam a_net(cfg.embedder_lr), a_head(cfg.embedder_lr);
    std::vector<Parameter*> head_p{&head.weight};

    long step = 0;
    for (int epoch = 0; epoch < cfg.embedder_epochs; ++epoch) {
        Rng rng = root.substream("embedder_epoch", static_cast<std::uint64_t>(epoch));
        std::vector<Image> pool;
        std::vector<int> labels;
        epoch_pool(corpus, ts, cfg.augment_per_epoch, arch.image_size(), rng, pool, labels);
        const auto order = shuffled(pool.size(), rng);
        HistoryRow row{"embedder", epoch};
        int batches = 0, seen = 0, correct = 0;
        for (std::size_t b = 0; b + cfg.batch_size <= order.size(); b += cfg.batch_size, ++step) {
            const Image x = gather_images(pool, order, b, cfg.batch_size);
            std::vector<int> y;
            for (int k = 0; k < cfg.batch_size; ++k) y.push_back(labels[order[b + k]]);
            Gradients g = res.embedder.net.zero_gradients();
            Gradients hg(1);
            const EmbedderLoss L = embedder_loss(res.embedder, head, x, y, cfg, &g, &hg[0]);
            if (!std::isfinite(L.loss)) abort_non_finite("embedder", epoch, step, L.loss);
            a_net.step(params, g);
            a_head.step(head_p, hg);
            row.total += L.loss;
            correct += L.correct;
            seen += cfg.batch_size;
            ++batches;
        }
        row.total /= batches;
        row.accuracy = static_cast<double>(correct) / seen;
        res.history.push_back(row);
    }
    return res;
}

Image reconstruct(const GeneratorBundle& g, const EncoderNet& e, const Image& x) { return generate(g, encode(e, x)); }

namespace {

double mean_cos(const Tensor& a, const Tensor& b) {
    double s = 0.0;
    for (int i = 0; i < a.n(); ++i) {
        auto x = a.sample(i), y = b.sample(i);
        for (std::size_t k = 0; k < x.size(); ++k) s += x[k] * y[k];
    }
    return s / a.n();
}

}  // namespace

PretrainQuality measure_quality(const Corpus& corpus, const GeneratorBundle& g, const EncoderNet& e,
                                const EmbedderNet& emb, const PretrainConfig& cfg, std::uint64_t seed) {
    const int res = g.arch.image_size();
    PretrainQuality q;

    // heldout_ind identities: all their images are unseen
    std::vector<Image> held;
    std::vector<int> held_id;
    for (std::size_t idx : corpus.indices_of(Split::heldout_ind)) {
        for (int v = 0; v < corpus.images_per_identity; ++v) {
            held.push_back(render_corpus_image(corpus, idx, v, res));
            held_id.push_back(static_cast<int>(idx));
        }
    }
    if (held.empty()) throw std::invalid_argument("corpus has no heldout_ind identities");
    const Image xh = concat(std::span<const Image>(held));
    const Tensor emb_h = embed_identity(emb, xh);
    q.recon_id_cos = mean_cos(emb_h, embed_identity(emb, reconstruct(g, e, xh)));

    double same = 0.0, cross = 0.0;
    long n_same = 0, n_cross = 0;
    for (int i = 0; i < emb_h.n(); ++i) {
        for (int j = i + 1; j < emb_h.n(); ++j) {
            double c = 0.0;
            auto a = emb_h.sample(i), b = emb_h.sample(j);
            for (std::size_t k = 0; k < a.size(); ++k) c += a[k] * b[k];
            if (held_id[i] == held_id[j]) {
                same += c;
                ++n_same;
            } else {
                cross += c;
                ++n_cross;
            }
        }
    }
    q.same_id_cos = n_same ? same / n_same : 0.0;
    q.cross_id_cos = n_cross ? cross / n_cross : 0.0;

    const TrainingSet ts = training_set(corpus, cfg.train_variations, res);
    const Image xt = concat(std::span<const Image>(ts.images));
    q.train_recon_id_cos = mean_cos(embed_identity(emb, xt), embed_identity(emb, reconstruct(g, e, xt)));

    const FeatureMatrix real = image_features(emb, ts.images);
    const auto latents = fixed_prior_latents(g, static_cast<int>(ts.images.size()), seed);
    q.frechet_prior = frechet_distance(generated_features(g, emb, latents), real);
    Rng rng = Rng(seed).substream("noise_images");
    std::vector<Image> noise;
    for (std::size_t i = 0; i < ts.images.size(); ++i) {
        Image x(Shape{1, 3, res, res});
        for (auto& v : x.values()) v = rng.uniform(-1.0, 1.0);
        noise.push_back(std::move(x));
    }
    q.frechet_noise = frechet_distance(image_features(emb, noise), real);
    return q;
}

nlohmann::json to_json(const PretrainQuality& q) {
    return {{"recon_id_cos", q.recon_id_cos},   {"train_recon_id_cos", q.train_recon_id_cos},
            {"same_id_cos", q.same_id_cos},     {"cross_id_cos", q.cross_id_cos},
            {"frechet_prior", q.frechet_prior}, {"frechet_noise", q.frechet_noise}};
}

void write_history_csv(const std::vector<HistoryRow>& rows, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << "stage,epoch,recon,percep,moment,total,accuracy\n";
    out.precision(10);
    for (const auto& r : rows) {
        out << r.stage << ',' << r.epoch << ',' << r.recon << ',' << r.percep << ',' << r.moment << ',' << r.total
            << ',' << r.accuracy << '\n';
    }
}

}  // namespace latent_unlearn
