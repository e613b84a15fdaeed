#include "latent_unlearn/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>

namespace latent_unlearn {

namespace fs = std::filesystem;
using nlohmann::json;

std::uint64_t ExperimentConfig::run_seed(Scenario s, int k) const {
    return derive_seed(seed, "run_" + to_string(s), static_cast<std::uint64_t>(k));
}

namespace {

[[noreturn]] void bad_key(const std::string& path) {
    throw std::invalid_argument("config: unknown key '" + path + "'");
}

template <class T>
T get(const json& v, const std::string& path) {
    try {
        return v.get<T>();
    } catch (const json::exception&) {
        throw std::invalid_argument("config: wrong type for '" + path + "'");
    }
}

// Section parsers throw with the bare key; prefix the section name.
template <class F>
auto in_section(const std::string& section, F&& f) {
    try {
        return f();
    } catch (const std::invalid_argument& e) {
        throw std::invalid_argument("config section '" + section + "': " + e.what());
    }
}

json data_json(const DataConfig& d) {
    return {{"n_train", d.n_train},
            {"n_heldout_ind", d.n_heldout_ind},
            {"n_heldout_ood", d.n_heldout_ood},
            {"images_per_identity", d.images_per_identity}};
}

DataConfig data_from_json(const json& j) {
    DataConfig d;
    for (const auto& [k, v] : j.items()) {
        const std::string p = "data." + k;
        if (k == "n_train") d.n_train = get<int>(v, p);
        else if (k == "n_heldout_ind") d.n_heldout_ind = get<int>(v, p);
        else if (k == "n_heldout_ood") d.n_heldout_ood = get<int>(v, p);
        else if (k == "images_per_identity") d.images_per_identity = get<int>(v, p);
        else bad_key(p);
    }
    if (d.n_train < 2 || d.n_heldout_ind < 0 || d.n_heldout_ood < 0 || d.images_per_identity < 2) {
        throw std::invalid_argument("config: data counts out of range");
    }
    return d;
}

json ablate_json(const AblateConfig& a) {
    return {{"axis", a.axis}, {"values", a.values}, {"identities", a.identities}, {"scenario", to_string(a.scenario)}};
}

AblateConfig ablate_from_json(const json& j) {
    AblateConfig a;
    for (const auto& [k, v] : j.items()) {
        const std::string p = "ablate." + k;
        if (k == "axis") a.axis = get<std::string>(v, p);
        else if (k == "values") a.values = get<std::vector<double>>(v, p);
        else if (k == "identities") a.identities = get<int>(v, p);
        else if (k == "scenario") a.scenario = in_section("ablate", [&] { return parse_scenario(get<std::string>(v, p)); });
        else bad_key(p);
    }
    if (!known_axis(a.axis)) throw std::invalid_argument("config: 'ablate.axis' has unknown axis '" + a.axis + "'");
    if (a.values.empty()) throw std::invalid_argument("config: 'ablate.values' is empty");
    if (a.identities < 1) throw std::invalid_argument("config: 'ablate.identities' must be >= 1");
    return a;
}

void reject_section_seed(const json& j, const std::string& section) {
    if (j.contains("seed")) {
        throw std::invalid_argument("config: '" + section +
                                    ".seed' is not settable; section seeds derive from the top-level 'seed'");
    }
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write " + path.string());
    f << text;
}

json read_json(const fs::path& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot read " + path.string());
    try {
        return json::parse(f);
    } catch (const json::exception& e) {
        throw std::runtime_error(path.string() + ": " + e.what());
    }
}

void require(const fs::path& p, const std::string& command, const fs::path& root) {
    if (!fs::exists(p)) {
        throw MissingArtifact("missing " + p.string() + "; run `latent-unlearn " + command + " --out " + root.string() +
                              "` first");
    }
}

std::vector<double> vec(const LatentCode& v) { return {v.data(), v.data() + v.size()}; }

}  // namespace

json to_json(const ExperimentConfig& c) {
    json p = to_json(c.pretrain);
    p.erase("seed");
    json u = to_json(c.unlearn);
    u.erase("seed");
    return {{"seed", c.seed},
            {"out", c.out},
            {"data", data_json(c.data)},
            {"arch", to_json(c.arch)},
            {"pretrain", p},
            {"unlearn", u},
            {"eval", {{"n_latents", c.eval.n_latents}}},
            {"ablate", ablate_json(c.ablate)}};
}

ExperimentConfig experiment_from_json(const json& j) {
    if (!j.is_object()) throw std::invalid_argument("config: top level must be an object");
    ExperimentConfig c;
    for (const auto& [k, v] : j.items()) {
        if (k == "seed") c.seed = get<std::uint64_t>(v, k);
        else if (k == "out") c.out = get<std::string>(v, k);
        else if (k == "data") c.data = data_from_json(v);
        else if (k == "arch") c.arch = in_section("arch", [&] { return arch_from_json(v); });
        else if (k == "pretrain") {
            reject_section_seed(v, k);
            c.pretrain = in_section(k, [&] { return pretrain_config_from_json(v); });
        } else if (k == "unlearn") {
            reject_section_seed(v, k);
            c.unlearn = in_section(k, [&] { return unlearn_config_from_json(v); });
        } else if (k == "eval") {
            for (const auto& [ek, ev] : v.items()) {
                if (ek == "n_latents") c.eval.n_latents = get<int>(ev, "eval.n_latents");
                else bad_key("eval." + ek);
            }
            if (c.eval.n_latents < 100) throw std::invalid_argument("config: 'eval.n_latents' must be >= 100");
        } else if (k == "ablate") c.ablate = ablate_from_json(v);
        else bad_key(k);
    }
    c.pretrain.seed = c.pretrain_seed();
    c.arch.validate();
    c.pretrain.validate();
    c.unlearn.validate();
    if (c.pretrain.train_variations >= c.data.images_per_identity) {
        throw std::invalid_argument("config: 'pretrain.train_variations' must leave at least one held-out variation");
    }
    return c;
}

ExperimentConfig load_experiment(const fs::path& path) { return experiment_from_json(read_json(path)); }

bool known_axis(const std::string& axis) {
    static const std::vector<std::string> axes{"d",         "alpha_max",  "n_a",       "n_g",          "lambda_l2",
                                               "lambda_per", "lambda_id", "lambda_adj", "lambda_global"};
    return std::find(axes.begin(), axes.end(), axis) != axes.end();
}

void apply_axis(UnlearnConfig& cfg, const std::string& axis, double value) {
    auto count = [&] {
        if (value < 0 || value != std::floor(value)) {
            throw std::invalid_argument("axis " + axis + " needs a non-negative integer, got " + std::to_string(value));
        }
        return static_cast<int>(value);
    };
    // lambda_* on the local weights; adjacency follows unless it was set separately
    if (axis == "d") cfg.d = value;
    else if (axis == "alpha_max") cfg.alpha_max = value;
    else if (axis == "n_a") cfg.n_a = count();
    else if (axis == "n_g") cfg.n_g = count();
    else if (axis == "lambda_l2") cfg.local.l2 = value;
    else if (axis == "lambda_per") cfg.local.per = value;
    else if (axis == "lambda_id") cfg.local.id = value;
    else if (axis == "lambda_adj") cfg.lambda_adj = value;
    else if (axis == "lambda_global") cfg.lambda_global = value;
    else throw std::invalid_argument("unknown ablation axis '" + axis + "'");
    cfg.validate();
}

fs::path Layout::run_dir(Scenario s, UnlearnMode m, int k) const {
    return root / "runs" / (to_string(s) + "_" + to_string(m) + "_" + std::to_string(k));
}

void write_dir_metadata(const fs::path& dir, const ExperimentConfig& cfg, const std::string& command) {
    fs::create_directories(dir);
    json resolved = to_json(cfg);
    resolved["software_version"] = kSoftwareVersion;
    write_text(dir / "config.resolved.json", resolved.dump(2) + "\n");

    std::vector<std::string> files;
    for (const auto& e : fs::recursive_directory_iterator(dir)) {
        if (!e.is_regular_file()) continue;
        const std::string rel = fs::relative(e.path(), dir).generic_string();
        if (rel != "manifest.json") files.push_back(rel);
    }
    std::sort(files.begin(), files.end());
    json list = json::array();
    for (const auto& f : files) list.push_back({{"path", f}, {"bytes", fs::file_size(dir / f)}});
    const json manifest{{"command", command}, {"software_version", kSoftwareVersion}, {"files", list}};
    write_text(dir / "manifest.json", manifest.dump(2) + "\n");
}

Corpus make_data(const ExperimentConfig& cfg) {
    const auto& d = cfg.data;
    return build_corpus(d.n_train, d.n_heldout_ind, d.n_heldout_ood, d.images_per_identity, cfg.data_seed());
}

PretrainOutcome run_pretrain(const ExperimentConfig& cfg, const Corpus& corpus, const Layout& layout) {
    BackboneResult bb = train_backbone(corpus, cfg.arch, cfg.pretrain);
    EmbedderResult em = train_embedder(corpus, cfg.arch, cfg.pretrain);
    Rng mean_rng(cfg.mean_latent_seed());
    const LatentCode w_bar = estimate_mean_latent(bb.generator, cfg.unlearn.mean_latent_samples, mean_rng);

    PretrainOutcome out{{corpus, bb.generator, bb.encoder, em.embedder, w_bar, layout.checkpoint()}, bb.history, {}};
    out.history.insert(out.history.end(), em.history.begin(), em.history.end());
    out.quality = measure_quality(corpus, bb.generator, bb.encoder, em.embedder, cfg.pretrain, cfg.pretrain.seed);

    const fs::path dir = layout.pretrain_dir();
    fs::create_directories(dir);
    Checkpoint ck;
    ck.arch = cfg.arch;
    ck.seed = cfg.pretrain.seed;
    ck.generator = bb.generator;
    ck.encoder = bb.encoder;
    ck.embedder = em.embedder;
    ck.mean_latent = w_bar;
    ck.metadata = {{"pretrain", to_json(cfg.pretrain)},
                   {"mean_latent_samples", cfg.unlearn.mean_latent_samples},
                   {"mean_latent_seed", cfg.mean_latent_seed()},
                   {"quality", to_json(out.quality)}};
    save_checkpoint(ck, layout.checkpoint());
    write_history_csv(out.history, dir / "history.csv");
    write_text(dir / "quality.json", to_json(out.quality).dump(2) + "\n");
    return out;
}

SourceModel load_source_model(const Layout& layout) {
    require(layout.corpus(), "make-data", layout.root);
    require(layout.checkpoint() / "manifest.json", "pretrain", layout.root);
    SourceModel m;
    m.corpus = load_corpus(layout.corpus());
    Checkpoint ck = load_checkpoint(layout.checkpoint());
    if (!ck.generator || !ck.encoder || !ck.embedder || !ck.mean_latent) {
        throw MissingArtifact("checkpoint " + layout.checkpoint().string() +
                              " lacks generator, encoder, embedder or mean latent; re-run `latent-unlearn pretrain`");
    }
    m.g_s = std::move(*ck.generator);
    m.encoder = std::move(*ck.encoder);
    m.embedder = std::move(*ck.embedder);
    m.w_bar = std::move(*ck.mean_latent);
    m.checkpoint = layout.checkpoint();
    return m;
}

UnlearnSource select_source(const SourceModel& m, const ExperimentConfig& cfg, Scenario s, int k) {
    if (k < 0) throw std::invalid_argument("source index must be >= 0");
    UnlearnSource src;
    src.scenario = s;
    src.index = k;
    const int res = m.g_s.arch.image_size();
    if (s == Scenario::random) {
        Rng rng(derive_seed(cfg.seed, "random_source", static_cast<std::uint64_t>(k)));
        src.w_u = map_forward(m.g_s, sample_noise(m.g_s.arch.z_dim, rng));
        return src;
    }
    const Split split = s == Scenario::ind ? Split::train : Split::heldout_ood;
    const auto pool = m.corpus.indices_of(split);
    if (static_cast<std::size_t>(k) >= pool.size()) {
        throw std::invalid_argument("scenario " + to_string(s) + " has " + std::to_string(pool.size()) +
                                    " identities; index " + std::to_string(k) + " is out of range");
    }
    const std::size_t id = pool[static_cast<std::size_t>(k)];
    // InD: the first variation the backbone never saw
    const int v_src = s == Scenario::ind ? cfg.pretrain.train_variations : 0;
    if (v_src >= m.corpus.images_per_identity) throw std::invalid_argument("no held-out variation in the corpus");
    src.identity_id = m.corpus.identities[id].spec.identity_id;
    src.x_u = render_corpus_image(m.corpus, id, static_cast<std::size_t>(v_src), res);
    src.w_u = encode_one(m.encoder, *src.x_u);
    for (int v = 0; v < m.corpus.images_per_identity; ++v) {
        if (v != v_src) src.others.push_back(render_corpus_image(m.corpus, id, static_cast<std::size_t>(v), res));
    }
    return src;
}

UnlearnConfig run_config(const ExperimentConfig& cfg, const UnlearnConfig& ucfg, const UnlearnSource& src) {
    UnlearnConfig c = ucfg;
    c.seed = cfg.run_seed(src.scenario, src.index);
    return c;
}

UnlearnResult unlearn_source(const SourceModel& m, const ExperimentConfig& cfg, const UnlearnConfig& ucfg,
                             const UnlearnSource& src) {
    const PerceptualNet percep(m.g_s.arch);
    return run_unlearning(m.g_s, src.w_u, m.embedder, percep, run_config(cfg, ucfg, src), m.w_bar);
}

EvalReport evaluate_source(const SourceModel& m, const FrechetReference& ref, const ExperimentConfig& cfg,
                           const UnlearnConfig& ucfg, const UnlearnSource& src, const GeneratorBundle& g_u) {
    const UnlearnConfig rc = run_config(cfg, ucfg, src);
    EvalInputs in;
    in.scenario = src.scenario;
    in.g_s = &m.g_s;
    in.g_u = &g_u;
    in.encoder = &m.encoder;
    in.embedder = &m.embedder;
    in.reference = &ref;
    in.w_u = src.w_u;
    in.others = src.others;
    in.config = {{"unlearn", to_json(rc)},
                 {"scenario", to_string(src.scenario)},
                 {"source_index", src.index},
                 {"n_eval_latents", cfg.eval.n_latents},
                 {"software_version", kSoftwareVersion}};
    in.seeds = {{"master", cfg.seed}, {"run", rc.seed}, {"frechet", ref.seed}, {"pretrain", cfg.pretrain.seed}};
    return evaluate(in);
}

void write_run(const fs::path& dir, const SourceModel& m, const UnlearnSource& src, UnlearnResult& result) {
    fs::create_directories(dir);
    result.record.source_checkpoint = m.checkpoint.string();
    result.record.unlearned_checkpoint = (dir / "generator").string();
    Checkpoint ck;
    ck.arch = result.g_u.arch;
    ck.seed = result.record.config.seed;
    ck.generator = result.g_u;
    save_checkpoint(ck, dir / "generator");
    write_losses_csv(result.record, dir / "losses.csv");
    write_text(dir / "run.json", run_json(result.record).dump(2) + "\n");
    const json s{{"scenario", to_string(src.scenario)},
                 {"index", src.index},
                 {"identity_id", src.identity_id},
                 {"w_u", vec(src.w_u)}};
    write_text(dir / "source.json", s.dump(2) + "\n");
}

StoredRun load_run(const fs::path& dir, const ArchConfig& arch) {
    for (const char* f : {"run.json", "source.json", "generator/manifest.json"}) {
        if (!fs::exists(dir / f)) {
            throw MissingArtifact("missing " + (dir / f).string() + "; run `latent-unlearn unlearn` for this source first");
        }
    }
    StoredRun r;
    const json run = read_json(dir / "run.json");
    r.config = unlearn_config_from_json(run.at("config"));
    const auto w_t = run.at("w_t").get<std::vector<double>>();
    r.w_t = Eigen::Map<const Eigen::VectorXd>(w_t.data(), static_cast<Eigen::Index>(w_t.size()));
    const json src = read_json(dir / "source.json");
    r.scenario = parse_scenario(src.at("scenario").get<std::string>());
    r.index = src.at("index").get<int>();
    Checkpoint ck = load_checkpoint(dir / "generator", arch);
    if (!ck.generator) throw CheckpointCorruptError((dir / "generator").string() + " holds no generator");
    r.g_u = std::move(*ck.generator);
    r.g_u.provenance = Provenance::unlearned;
    r.g_u.frozen_mapping = r.g_u.frozen_renderer = true;
    return r;
}

FrechetReference make_reference(const SourceModel& m, const ExperimentConfig& cfg) {
    const TrainingSet ts = training_set(m.corpus, cfg.pretrain.train_variations, m.g_s.arch.image_size());
    return make_frechet_reference(m.g_s, m.embedder, ts.images, cfg.eval.n_latents, cfg.frechet_seed());
}

RunOutcome run_source(const SourceModel& m, const FrechetReference& ref, const ExperimentConfig& cfg,
                      const UnlearnConfig& ucfg, const UnlearnSource& src, const std::optional<fs::path>& dir) {
    RunOutcome out{unlearn_source(m, cfg, ucfg, src), {}};
    out.report = evaluate_source(m, ref, cfg, ucfg, src, out.result.g_u);
    if (dir) {
        write_run(*dir, m, src, out.result);
        save_report(out.report, *dir / "report.json");
    }
    return out;
}

namespace {

std::pair<double, double> mean_std(const std::vector<double>& v) {
    const double n = static_cast<double>(v.size());
    const double mean = std::accumulate(v.begin(), v.end(), 0.0) / n;
    if (v.size() < 2) return {mean, 0.0};
    double ss = 0.0;
    for (double x : v) ss += (x - mean) * (x - mean);
    return {mean, std::sqrt(ss / (n - 1.0))};
}

std::string value_label(double v) {
    std::ostringstream s;
    s << v;
    return s.str();
}

}  // namespace

SummaryRow summarize(double axis_value, const std::vector<EvalReport>& reports) {
    if (reports.empty()) throw std::invalid_argument("summarize: no reports");
    SummaryRow row;
    row.axis_value = axis_value;
    row.n = static_cast<int>(reports.size());
    std::vector<double> id, others, fp, delta;
    for (const auto& r : reports) {
        id.push_back(r.id);
        if (r.id_others) others.push_back(*r.id_others);
        fp.push_back(r.frechet_pre);
        delta.push_back(r.delta_frechet_real);
    }
    std::tie(row.id_mean, row.id_std) = mean_std(id);
    if (others.size() == reports.size()) {
        auto [m, s] = mean_std(others);
        row.id_others_mean = m;
        row.id_others_std = s;
    }
    std::tie(row.frechet_pre_mean, row.frechet_pre_std) = mean_std(fp);
    std::tie(row.delta_mean, row.delta_std) = mean_std(delta);
    return row;
}

void write_summary_csv(const std::string& axis, const std::vector<SummaryRow>& rows, const fs::path& path) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write " + path.string());
    f << axis << ",n,id_mean,id_std,id_others_mean,id_others_std,frechet_pre_mean,frechet_pre_std,"
      << "delta_frechet_real_mean,delta_frechet_real_std\n";
    f << std::setprecision(10);
    for (const auto& r : rows) {
        f << r.axis_value << ',' << r.n << ',' << r.id_mean << ',' << r.id_std << ',';
        if (r.id_others_mean) f << *r.id_others_mean << ',' << *r.id_others_std << ',';
        else f << ",,";
        f << r.frechet_pre_mean << ',' << r.frechet_pre_std << ',' << r.delta_mean << ',' << r.delta_std << '\n';
    }
}

std::vector<SummaryRow> run_ablation(const SourceModel& m, const ExperimentConfig& cfg, const Layout& layout,
                                     const std::function<void(const std::string&)>& log) {
    const auto& a = cfg.ablate;
    const fs::path dir = layout.ablate_dir(a.axis);
    const FrechetReference ref = make_reference(m, cfg);
    std::vector<UnlearnSource> sources;
    for (int k = 0; k < a.identities; ++k) sources.push_back(select_source(m, cfg, a.scenario, k));

    std::vector<SummaryRow> rows;
    for (double value : a.values) {
        UnlearnConfig ucfg = cfg.unlearn;
        apply_axis(ucfg, a.axis, value);
        std::vector<EvalReport> reports;
        for (const auto& src : sources) {
            const fs::path run_dir = dir / (a.axis + "=" + value_label(value)) / std::to_string(src.index);
            RunOutcome r = run_source(m, ref, cfg, ucfg, src, run_dir);
            if (log) {
                std::ostringstream s;
                s << a.axis << "=" << value << " source " << src.index << ": id " << r.report.id << " frechet_pre "
                  << r.report.frechet_pre;
                log(s.str());
            }
            reports.push_back(r.report);
        }
        rows.push_back(summarize(value, reports));
    }
    fs::create_directories(dir);
    write_summary_csv(a.axis, rows, dir / "summary.csv");
    return rows;
}

std::vector<Image> grid_row(const SourceModel& m, const ExperimentConfig& cfg, const UnlearnSource& src,
                            const GeneratorBundle& g_u, const LatentCode& w_t, int n_pairs) {
    std::vector<Image> row;
    row.push_back(src.x_u ? *src.x_u : generate(m.g_s, src.w_u));
    row.push_back(generate(m.g_s, w_t));
    row.push_back(generate(g_u, src.w_u));
    for (const auto& w : fixed_prior_latents(m.g_s, n_pairs, derive_seed(cfg.seed, "grid_pairs"))) {
        row.push_back(generate(m.g_s, w));
        row.push_back(generate(g_u, w));
    }
    return row;
}

Image contact_sheet(const std::vector<std::vector<Image>>& rows, int pad) {
    if (rows.empty() || rows[0].empty()) throw std::invalid_argument("contact_sheet: no images");
    const int h = rows[0][0].h(), w = rows[0][0].w();
    std::size_t cols = 0;
    for (const auto& r : rows) cols = std::max(cols, r.size());
    const int H = static_cast<int>(rows.size()) * (h + pad) + pad;
    const int W = static_cast<int>(cols) * (w + pad) + pad;
    Image sheet(Shape{1, 3, H, W}, 1.0);  // white gutters
    for (std::size_t r = 0; r < rows.size(); ++r) {
        for (std::size_t c = 0; c < rows[r].size(); ++c) {
            const Image& img = rows[r][c];
            if (img.n() != 1 || img.c() != 3 || img.h() != h || img.w() != w) {
                throw std::invalid_argument("contact_sheet: image shape " + img.shape().str());
            }
            const int y0 = pad + static_cast<int>(r) * (h + pad), x0 = pad + static_cast<int>(c) * (w + pad);
            for (int ch = 0; ch < 3; ++ch)
                for (int y = 0; y < h; ++y)
                    for (int x = 0; x < w; ++x)
                        sheet.data()[(static_cast<std::size_t>(ch) * H + y0 + y) * W + x0 + x] =
                            img.data()[(static_cast<std::size_t>(ch) * h + y) * w + x];
        }
    }
    return sheet;
}

}  // namespace latent_unlearn
