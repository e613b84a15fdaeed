#include "latent_unlearn/unlearn.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <sstream>

namespace latent_unlearn {

std::string to_string(UnlearnMode m) { return m == UnlearnMode::guide ? "guide" : "baseline"; }

UnlearnMode parse_unlearn_mode(const std::string& s) {
    if (s == "guide") return UnlearnMode::guide;
    if (s == "baseline") return UnlearnMode::baseline;
    throw std::invalid_argument("unknown unlearning mode '" + s + "' (expected guide|baseline)");
}

void UnlearnConfig::validate() const {
    auto fail = [](const std::string& m) { throw std::invalid_argument("unlearn config: " + m); };
    if (!std::isfinite(d)) fail("d must be finite");
    if (!(alpha_max >= 0.0)) fail("alpha_max must be >= 0");
    if (n_a < 1) fail("n_a must be >= 1");
    if (n_g < 1) fail("n_g must be >= 1");
    if (!(learning_rate > 0.0)) fail("learning_rate must be > 0");
    if (iterations < 0) fail("iterations must be >= 0");
    if (mean_latent_samples < 1) fail("mean_latent_samples must be >= 1");
    if (!(global_margin >= 0.0)) fail("global_margin must be >= 0");
    for (const LossWeights* w : {&local, &adjacency_weights()}) {
        if (w->l2 < 0 || w->per < 0 || w->id < 0) fail("loss weights must be >= 0");
    }
    if (lambda_adj < 0 || lambda_global < 0) fail("lambda_adj/lambda_global must be >= 0");
}

UnlearnConfig UnlearnConfig::preset(const std::string& name) {
    UnlearnConfig c;
    if (name == "default") return c;
    if (name == "no-id") {
        c.local.id = 0.0;
        return c;
    }
    throw std::invalid_argument("unknown preset '" + name + "' (expected default|no-id)");
}

namespace {

nlohmann::json weights_json(const LossWeights& w) { return {{"l2", w.l2}, {"per", w.per}, {"id", w.id}}; }

LossWeights weights_from_json(const nlohmann::json& j, LossWeights w) {
    if (!j.is_object()) throw std::invalid_argument("loss weights must be an object");
    for (const auto& [k, v] : j.items()) {
        if (k == "l2") w.l2 = v.get<double>();
        else if (k == "per") w.per = v.get<double>();
        else if (k == "id") w.id = v.get<double>();
        else throw std::invalid_argument("unknown loss weight key '" + k + "'");
    }
    return w;
}

}  // namespace

nlohmann::json to_json(const UnlearnConfig& c) {
    nlohmann::json j{{"d", c.d},
                     {"alpha_max", c.alpha_max},
                     {"n_a", c.n_a},
                     {"n_g", c.n_g},
                     {"local", weights_json(c.local)},
                     {"lambda_adj", c.lambda_adj},
                     {"lambda_global", c.lambda_global},
                     {"learning_rate", c.learning_rate},
                     {"iterations", c.iterations},
                     {"seed", c.seed},
                     {"mode", to_string(c.mode)},
                     {"mean_latent_samples", c.mean_latent_samples},
                     {"global_margin", c.global_margin}};
    j["adjacency"] = c.adjacency ? weights_json(*c.adjacency) : nlohmann::json(nullptr);
    return j;
}

UnlearnConfig unlearn_config_from_json(const nlohmann::json& j, UnlearnConfig c) {
    if (!j.is_object()) throw std::invalid_argument("unlearn config must be a JSON object");
    for (const auto& [k, v] : j.items()) {
        if (k == "d") c.d = v.get<double>();
        else if (k == "alpha_max") c.alpha_max = v.get<double>();
        else if (k == "n_a") c.n_a = v.get<int>();
        else if (k == "n_g") c.n_g = v.get<int>();
        else if (k == "local") c.local = weights_from_json(v, c.local);
        else if (k == "adjacency") {
            if (v.is_null()) c.adjacency.reset();
            else c.adjacency = weights_from_json(v, c.adjacency_weights());
        } else if (k == "lambda_adj") c.lambda_adj = v.get<double>();
        else if (k == "lambda_global") c.lambda_global = v.get<double>();
        else if (k == "learning_rate") c.learning_rate = v.get<double>();
        else if (k == "iterations") c.iterations = v.get<int>();
        else if (k == "seed") c.seed = v.get<std::uint64_t>();
        else if (k == "mode") c.mode = parse_unlearn_mode(v.get<std::string>());
        else if (k == "mean_latent_samples") c.mean_latent_samples = v.get<int>();
        else if (k == "global_margin") c.global_margin = v.get<double>();
        else throw std::invalid_argument("unknown unlearn config key '" + k + "'");
    }
    c.validate();
    return c;
}

double perceptual_distance(const PerceptualNet& p, const Image& a, const Image& b) {
    const auto fa = p.features(a), fb = p.features(b);
    double total = 0.0;
    for (std::size_t l = 0; l < fa.size(); ++l) {
        double s = 0.0;
        for (std::size_t i = 0; i < fa[l].size(); ++i) {
            const double d = fa[l][i] - fb[l][i];
            s += d * d;
        }
        total += s / static_cast<double>(fa[l].size());
    }
    return total / static_cast<double>(fa.size());
}

namespace {

// One (source, target) comparison with its coefficients already folded in.
struct Pair {
    LatentCode src, tgt;
    double l2 = 0.0, per = 0.0, id = 0.0;
};

Tensor gather(const Tensor& t, const std::vector<int>& idx) {
    Shape s = t.shape();
    s.n = static_cast<int>(idx.size());
    Tensor out(s);
    for (std::size_t k = 0; k < idx.size(); ++k) {
        auto src = t.sample(idx[k]);
        std::copy(src.begin(), src.end(), out.sample(static_cast<int>(k)).begin());
    }
    return out;
}

// Per-pair weighted losses; accumulates synthesis gradients of ctx.g_u.
std::vector<double> evaluate_pairs(const LossContext& ctx, const std::vector<Pair>& pairs, Gradients* grads) {
    const int n = static_cast<int>(pairs.size());
    std::vector<double> loss(n, 0.0);
    if (n == 0) return loss;

    std::vector<LatentCode> src, tgt;
    for (const auto& p : pairs) {
        src.push_back(p.src);
        tgt.push_back(p.tgt);
    }
    const Tensor S = latent_batch(src), T = latent_batch(tgt);

    Trace t_syn, t_ren, t_per, t_emb;
    ctx.g_u.synthesis.forward(S, t_syn);
    const Tensor x_u = ctx.g_u.renderer.forward(t_syn.output(), t_ren);
    const SynthFeature F_t = synth_forward(ctx.g_s, T);
    const Image x_t = render_forward(ctx.g_s, F_t);

    const bool want_grad = grads != nullptr;
    Tensor dF(t_syn.output().shape());
    Tensor dx(x_u.shape());

    // feature L2
    const std::size_t fs = F_t.sample_size();
    for (int i = 0; i < n; ++i) {
        if (pairs[i].l2 == 0.0) continue;
        auto a = t_syn.output().sample(i);
        auto b = F_t.sample(i);
        double s = 0.0;
        for (std::size_t k = 0; k < fs; ++k) s += (a[k] - b[k]) * (a[k] - b[k]);
        loss[i] += pairs[i].l2 * s / static_cast<double>(fs);
        if (want_grad) {
            auto g = dF.sample(i);
            const double c = 2.0 * pairs[i].l2 / static_cast<double>(fs);
            for (std::size_t k = 0; k < fs; ++k) g[k] += c * (a[k] - b[k]);
        }
    }

    // perceptual
    bool any_per = false;
    for (const auto& p : pairs) any_per |= p.per != 0.0;
    if (any_per) {
        const Network& pn = ctx.percep.network();
        pn.forward(x_u, t_per);
        const auto ft = ctx.percep.features(x_t);
        const auto taps = ctx.percep.taps();
        const double L = static_cast<double>(taps.size());
        std::vector<GradSeed> seeds;
        for (std::size_t l = 0; l < taps.size(); ++l) {
            const Tensor& fu = t_per.activations[taps[l]];
            const std::size_t m = fu.sample_size();
            Tensor g(fu.shape());
            for (int i = 0; i < n; ++i) {
                if (pairs[i].per == 0.0) continue;
                auto a = fu.sample(i);
                auto b = ft[l].sample(i);
                auto gi = g.sample(i);
                double s = 0.0;
                const double c = 2.0 * pairs[i].per / (L * static_cast<double>(m));
                for (std::size_t k = 0; k < m; ++k) {
                    const double d = a[k] - b[k];
                    s += d * d;
                    gi[k] = c * d;
                }
                loss[i] += pairs[i].per * s / (L * static_cast<double>(m));
            }
            if (want_grad) seeds.push_back({taps[l], std::move(g)});
        }
        if (want_grad) {
            const Tensor gx = pn.backward(t_per, std::move(seeds), nullptr);
            for (std::size_t k = 0; k < dx.size(); ++k) dx[k] += gx[k];
        }
    }

    // identity: only the pairs that carry it go through the embedder
    std::vector<int> id_rows;
    for (int i = 0; i < n; ++i)
        if (pairs[i].id != 0.0) id_rows.push_back(i);
    if (!id_rows.empty()) {
        const Tensor xu_id = gather(x_u, id_rows);
        const Tensor e_u = ctx.embedder.net.forward(xu_id, t_emb);
        const Tensor e_t = embed_identity(ctx.embedder, gather(x_t, id_rows));
        Tensor de(e_u.shape());
        const std::size_t m = e_u.sample_size();
        for (std::size_t r = 0; r < id_rows.size(); ++r) {
            const int i = id_rows[r];
            auto a = e_u.sample(static_cast<int>(r));
            auto b = e_t.sample(static_cast<int>(r));
            double cos = 0.0;
            for (std::size_t k = 0; k < m; ++k) cos += a[k] * b[k];
            loss[i] += pairs[i].id * (1.0 - cos);
            auto g = de.sample(static_cast<int>(r));
            for (std::size_t k = 0; k < m; ++k) g[k] = -pairs[i].id * b[k];
        }
        if (want_grad) {
            const Tensor gx = ctx.embedder.net.backward(t_emb, de, nullptr);
            for (std::size_t r = 0; r < id_rows.size(); ++r) {
                auto src_g = gx.sample(static_cast<int>(r));
                auto dst = dx.sample(id_rows[r]);
                for (std::size_t k = 0; k < src_g.size(); ++k) dst[k] += src_g[k];
            }
        }
    }

    if (want_grad) {
        const Tensor gF = ctx.g_u.renderer.backward(t_ren, dx, nullptr);
        for (std::size_t k = 0; k < dF.size(); ++k) dF[k] += gF[k];
        ctx.g_u.synthesis.backward(t_syn, dF, grads);
    }
    return loss;
}

void check_grads(const LossContext& ctx, const Gradients* grads) {
    if (grads && grads->size() != ctx.g_u.synthesis.parameters().size()) {
        throw std::invalid_argument("gradient buffers do not match the synthesis parameters");
    }
}

Pair local_pair(const LatentCode& s, const LatentCode& t, const LossWeights& w, double coef) {
    return Pair{s, t, coef * w.l2, coef * w.per, coef * w.id};
}

void append_adjacency(std::vector<Pair>& pairs, const LatentCode& w_u, const LatentCode& w_t,
                      const AdjacencyOffsets& offsets, const LossWeights& w, double coef) {
    const double k = coef / static_cast<double>(offsets.offsets.size());
    for (const auto& o : offsets.offsets) pairs.push_back(local_pair(w_u + o, w_t + o, w, k));
}

void append_global(std::vector<Pair>& pairs, const std::vector<LatentCode>& globals, double coef) {
    const double k = coef / static_cast<double>(globals.size());
    for (const auto& g : globals) pairs.push_back(Pair{g, g, 0.0, k, 0.0});
}

double sum(const std::vector<double>& v, std::size_t begin, std::size_t end) {
    double s = 0.0;
    for (std::size_t i = begin; i < end; ++i) s += v[i];
    return s;
}

}  // namespace

double local_unlearn_loss(const LossContext& ctx, const LatentCode& w_u, const LatentCode& w_t,
                          const LossWeights& weights, Gradients* grads) {
    check_grads(ctx, grads);
    return evaluate_pairs(ctx, {local_pair(w_u, w_t, weights, 1.0)}, grads)[0];
}

double adjacency_unlearn_loss(const LossContext& ctx, const LatentCode& w_u, const LatentCode& w_t,
                              const AdjacencyOffsets& offsets, const LossWeights& weights, Gradients* grads) {
    check_grads(ctx, grads);
    if (offsets.offsets.empty()) throw std::invalid_argument("adjacency loss needs at least one offset");
    std::vector<Pair> pairs;
    append_adjacency(pairs, w_u, w_t, offsets, weights, 1.0);
    const auto l = evaluate_pairs(ctx, pairs, grads);
    return sum(l, 0, l.size());
}

double global_preservation_loss(const LossContext& ctx, const std::vector<LatentCode>& globals, Gradients* grads) {
    check_grads(ctx, grads);
    if (globals.empty()) throw std::invalid_argument("global loss needs at least one latent");
    std::vector<Pair> pairs;
    append_global(pairs, globals, 1.0);
    const auto l = evaluate_pairs(ctx, pairs, grads);
    return sum(l, 0, l.size());
}

LossBreakdown total_loss(const LossContext& ctx, const LatentCode& w_u, const LatentCode& w_t,
                         const AdjacencyOffsets& offsets, const std::vector<LatentCode>& globals,
                         const UnlearnConfig& cfg, Gradients* grads) {
    check_grads(ctx, grads);
    const bool use_adj = cfg.adjacency_enabled() && !offsets.offsets.empty();
    const bool use_global = cfg.global_enabled() && !globals.empty();

    // Each group is evaluated at its own coefficient so the gradient is that of
    // the weighted total; the unweighted terms are recovered by dividing out.
    std::vector<Pair> pairs{local_pair(w_u, w_t, cfg.local, 1.0)};
    if (use_adj) append_adjacency(pairs, w_u, w_t, offsets, cfg.adjacency_weights(), cfg.lambda_adj);
    const std::size_t adj_end = pairs.size();
    if (use_global) append_global(pairs, globals, cfg.lambda_global);
    const auto l = evaluate_pairs(ctx, pairs, grads);

    LossBreakdown b;
    b.local = l[0];
    const double adj_weighted = sum(l, 1, adj_end);
    const double glob_weighted = sum(l, adj_end, l.size());
    if (use_adj) b.adj = adj_weighted / cfg.lambda_adj;
    if (use_global) b.global = glob_weighted / cfg.lambda_global;
    b.total = b.local + adj_weighted + glob_weighted;
    return b;
}

UnlearnResult run_unlearning(const GeneratorBundle& g_s, const LatentCode& w_u, const EmbedderNet& embedder,
                             const PerceptualNet& percep, const UnlearnConfig& cfg,
                             const std::optional<LatentCode>& mean_latent) {
    cfg.validate();
    if (w_u.size() != g_s.arch.w_dim) throw std::invalid_argument("run_unlearning: w_u dimension mismatch");
    const auto start = std::chrono::steady_clock::now();
    const Rng root(cfg.seed);

    UnlearnResult res{clone_generator(g_s), {}};
    UnlearnRunRecord& rec = res.record;
    rec.config = cfg;
    rec.w_u = w_u;
    if (mean_latent) {
        rec.w_bar = *mean_latent;
    } else {
        Rng r = root.substream("mean_latent");
        rec.w_bar = estimate_mean_latent(g_s, cfg.mean_latent_samples, r);
    }
    rec.w_t = cfg.mode == UnlearnMode::guide ? compute_target_latent(w_u, rec.w_bar, cfg.d) : rec.w_bar;

    const LossContext ctx{res.g_u, g_s, percep, embedder};
    auto params = res.g_u.synthesis.parameters();
    Adam adam(cfg.learning_rate);
    const GlobalExclusion ex{w_u, rec.w_t, cfg.alpha_max, cfg.global_margin};

    for (int it = 0; it < cfg.iterations; ++it) {
        AdjacencyOffsets offs;
        std::vector<LatentCode> globals;
        if (cfg.adjacency_enabled()) {
            Rng r = root.substream("adjacency", static_cast<std::uint64_t>(it));
            offs = sample_adjacency_offsets(w_u, cfg.alpha_max, cfg.n_a, g_s, r);
        }
        if (cfg.global_enabled()) {
            Rng r = root.substream("global", static_cast<std::uint64_t>(it));
            globals = sample_global_latents(cfg.n_g, g_s, r, ex).latents;
        }
        Gradients grads = res.g_u.synthesis.zero_gradients();
        const LossBreakdown b = total_loss(ctx, w_u, rec.w_t, offs, globals, cfg, &grads);
        if (!std::isfinite(b.total)) {
            std::ostringstream msg;
            msg << "non-finite loss at iteration " << it << " (local " << b.local << ", adj " << b.adj << ", global "
                << b.global << ")";
            throw NonFiniteLoss(msg.str());
        }
        rec.rows.push_back({it, b.local, b.adj, b.global, b.total});
        adam.step(params, grads);
    }
    rec.wall_time_sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return res;
}

void write_losses_csv(const UnlearnRunRecord& rec, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << "iteration,L_local,L_adj,L_global,L_total\n";
    out.precision(17);
    for (const auto& r : rec.rows) {
        out << r.iteration << ',' << r.l_local << ',' << r.l_adj << ',' << r.l_global << ',' << r.l_total << '\n';
    }
}

std::vector<LossRow> read_losses_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read " + path.string());
    std::string line;
    std::getline(in, line);
    if (line != "iteration,L_local,L_adj,L_global,L_total") {
        throw std::runtime_error(path.string() + ": unexpected header '" + line + "'");
    }
    std::vector<LossRow> rows;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream ss(line);
        LossRow r;
        char c1, c2, c3, c4;
        if (!(ss >> r.iteration >> c1 >> r.l_local >> c2 >> r.l_adj >> c3 >> r.l_global >> c4 >> r.l_total)) {
            throw std::runtime_error(path.string() + ": malformed row '" + line + "'");
        }
        rows.push_back(r);
    }
    return rows;
}

nlohmann::json run_json(const UnlearnRunRecord& rec) {
    auto vec = [](const LatentCode& v) { return std::vector<double>(v.data(), v.data() + v.size()); };
    return {{"config", to_json(rec.config)},
            {"mode", to_string(rec.config.mode)},
            {"iterations_run", rec.rows.size()},
            {"w_u", vec(rec.w_u)},
            {"w_t", vec(rec.w_t)},
            {"w_bar", vec(rec.w_bar)},
            {"wall_time_sec", rec.wall_time_sec},
            {"source_checkpoint", rec.source_checkpoint},
            {"unlearned_checkpoint", rec.unlearned_checkpoint}};
}

}  // namespace latent_unlearn
