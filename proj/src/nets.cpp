#include "latent_unlearn/nets.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <map>

namespace latent_unlearn {

using nlohmann::json;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

std::string to_string(MapKind k) {
    switch (k) {
        case MapKind::identity: return "identity";
        case MapKind::affine: return "affine";
        case MapKind::mlp: return "mlp";
    }
    return "identity";
}

MapKind parse_map_kind(const std::string& s) {
    if (s == "identity") return MapKind::identity;
    if (s == "affine") return MapKind::affine;
    if (s == "mlp") return MapKind::mlp;
    throw std::invalid_argument("unknown map kind '" + s + "'");
}

std::string to_string(Provenance p) { return p == Provenance::source ? "source" : "unlearned"; }

void ArchConfig::validate() const {
    auto fail = [](const std::string& m) { throw std::invalid_argument("architecture: " + m); };
    if (z_dim < 1 || w_dim < 1) fail("latent dimensions must be positive");
    if (map_kind == MapKind::identity && z_dim != w_dim) fail("identity mapping needs z_dim == w_dim");
    if (!(latent_scale > 0.0)) fail("latent_scale must be positive");
    if (feat_size < 2 || feat_size % 2 != 0) fail("feat_size must be even and >= 2");
    if (feat_channels < 1 || render_channels < 1 || embed_dim < 1 || embed_hidden < 1) fail("widths must be positive");
}

ArchConfig ArchConfig::miniature() {
    ArchConfig a;
    a.z_dim = 6;
    a.w_dim = 6;
    a.latent_scale = 2.0;
    a.map_width = 8;
    a.feat_channels = 4;
    a.feat_size = 2;
    a.render_channels = 3;
    a.encoder_channels = {3, 4, 4, 5};
    a.embedder_channels = {3, 4, 5};
    a.embed_hidden = 6;
    a.embed_dim = 4;
    a.perceptual_channels = {3, 4, 4};
    return a;
}

json to_json(const ArchConfig& a) {
    return {{"z_dim", a.z_dim},
            {"w_dim", a.w_dim},
            {"map_kind", to_string(a.map_kind)},
            {"latent_scale", a.latent_scale},
            {"map_width", a.map_width},
            {"feat_channels", a.feat_channels},
            {"feat_size", a.feat_size},
            {"render_channels", a.render_channels},
            {"encoder_channels", a.encoder_channels},
            {"embedder_channels", a.embedder_channels},
            {"embed_hidden", a.embed_hidden},
            {"embed_dim", a.embed_dim},
            {"perceptual_channels", a.perceptual_channels},
            {"perceptual_seed", a.perceptual_seed}};
}

ArchConfig arch_from_json(const json& j) {
    ArchConfig a;
    static const std::vector<std::string> known = {
        "z_dim",         "w_dim",          "map_kind",         "latent_scale",      "map_width",
        "feat_channels", "feat_size",      "render_channels",  "encoder_channels",  "embedder_channels",
        "embed_hidden",  "embed_dim",      "perceptual_channels", "perceptual_seed"};
    for (const auto& [k, v] : j.items()) {
        if (std::find(known.begin(), known.end(), k) == known.end()) {
            throw std::invalid_argument("architecture: unknown key '" + k + "'");
        }
    }
    a.z_dim = j.value("z_dim", a.z_dim);
    a.w_dim = j.value("w_dim", a.w_dim);
    if (j.contains("map_kind")) a.map_kind = parse_map_kind(j.at("map_kind").get<std::string>());
    a.latent_scale = j.value("latent_scale", a.latent_scale);
    a.map_width = j.value("map_width", a.map_width);
    a.feat_channels = j.value("feat_channels", a.feat_channels);
    a.feat_size = j.value("feat_size", a.feat_size);
    a.render_channels = j.value("render_channels", a.render_channels);
    a.encoder_channels = j.value("encoder_channels", a.encoder_channels);
    a.embedder_channels = j.value("embedder_channels", a.embedder_channels);
    a.embed_hidden = j.value("embed_hidden", a.embed_hidden);
    a.embed_dim = j.value("embed_dim", a.embed_dim);
    a.perceptual_channels = j.value("perceptual_channels", a.perceptual_channels);
    a.perceptual_seed = j.value("perceptual_seed", a.perceptual_seed);
    a.validate();
    return a;
}

// ---------------------------------------------------------------------------
// Architectures

namespace {

Network build_mapping(const ArchConfig& a) {
    Network net("mapping");
    switch (a.map_kind) {
        case MapKind::identity:
            net.add(make_scale(a.latent_scale));
            break;
        case MapKind::affine:
            net.add(make_linear(a.z_dim, a.w_dim));
            break;
        case MapKind::mlp:
            net.add(make_linear(a.z_dim, a.map_width));
            net.add(make_leaky_relu());
            net.add(make_linear(a.map_width, a.w_dim));
            break;
    }
    return net;
}

Network build_synthesis(const ArchConfig& a) {
    Network net("synthesis");
    const int c = a.feat_channels, s = a.feat_size;
    net.add(make_scale(1.0 / a.latent_scale));
    net.add(make_linear(a.w_dim, c * s * s));
    net.add(make_reshape(c, s, s));
    net.add(make_leaky_relu());
    net.add(make_conv3x3(c, c));
    net.add(make_leaky_relu());
    net.add(make_conv3x3(c, c));
    net.add(make_leaky_relu());
    return net;
}

Network build_renderer(const ArchConfig& a) {
    Network net("renderer");
    net.add(make_upsample2x());
    net.add(make_conv3x3(a.feat_channels, a.render_channels));
    net.add(make_leaky_relu());
    net.add(make_upsample2x());
    // Linear output: a tanh here saturates on the flat -1 background within a
    // few steps and the whole renderer stops learning. generate() clamps.
    net.add(make_conv3x3(a.render_channels, 3, 0.5));
    return net;
}

Network build_encoder(const ArchConfig& a) {
    Network net("encoder");
    const auto& ch = a.encoder_channels;
    net.add(make_conv3x3(3, ch[0])).add(make_leaky_relu()).add(make_avg_pool2x());
    net.add(make_conv3x3(ch[0], ch[1])).add(make_leaky_relu()).add(make_avg_pool2x());
    net.add(make_conv3x3(ch[1], ch[2])).add(make_leaky_relu()).add(make_avg_pool2x());
    net.add(make_conv3x3(ch[2], ch[3])).add(make_leaky_relu());
    const int side = a.image_size() / 8;
    net.add(make_linear(ch[3] * side * side, a.w_dim, 0.5));
    net.add(make_scale(a.latent_scale));
    return net;
}

Network build_embedder(const ArchConfig& a, std::size_t& feature_index) {
    Network net("embedder");
    const auto& ch = a.embedder_channels;
    net.add(make_conv3x3(3, ch[0])).add(make_leaky_relu()).add(make_avg_pool2x());
    net.add(make_conv3x3(ch[0], ch[1])).add(make_leaky_relu()).add(make_avg_pool2x());
    net.add(make_conv3x3(ch[1], ch[2])).add(make_leaky_relu()).add(make_avg_pool2x());
    const int side = a.image_size() / 8;
    net.add(make_linear(ch[2] * side * side, a.embed_hidden));
    net.add(make_leaky_relu());
    feature_index = net.depth();
    net.add(make_linear(a.embed_hidden, a.embed_dim));
    net.add(make_l2_normalize());
    return net;
}

}  // namespace

GeneratorBundle make_generator(const ArchConfig& arch, Rng& rng) {
    arch.validate();
    GeneratorBundle g;
    g.arch = arch;
    g.mapping = build_mapping(arch);
    g.synthesis = build_synthesis(arch);
    g.renderer = build_renderer(arch);
    Rng r = rng.substream("generator");
    g.mapping.initialize(r);
    g.synthesis.initialize(r);
    g.renderer.initialize(r);
    return g;
}

GeneratorBundle clone_generator(const GeneratorBundle& source) {
    GeneratorBundle g = source;
    g.provenance = Provenance::unlearned;
    g.frozen_mapping = true;
    g.frozen_renderer = true;
    g.frozen_synthesis = false;
    return g;
}

Tensor latent_batch(std::span<const LatentCode> codes) {
    if (codes.empty()) return {};
    const int d = static_cast<int>(codes[0].size());
    Tensor t(Shape{static_cast<int>(codes.size()), d, 1, 1});
    for (std::size_t i = 0; i < codes.size(); ++i) {
        if (codes[i].size() != d) throw std::invalid_argument("latent_batch: dimension mismatch");
        std::copy(codes[i].data(), codes[i].data() + d, t.sample(static_cast<int>(i)).data());
    }
    return t;
}

Tensor latent_batch(const LatentCode& code) { return latent_batch(std::span<const LatentCode>(&code, 1)); }

LatentCode latent_at(const Tensor& batch, int i) {
    auto s = batch.sample(i);
    return Eigen::Map<const Eigen::VectorXd>(s.data(), static_cast<Eigen::Index>(s.size()));
}

namespace {
void expect_dim(const Tensor& t, int dim, const char* what) {
    if (static_cast<int>(t.sample_size()) != dim) {
        throw std::invalid_argument(std::string(what) + ": expected dimension " + std::to_string(dim) + ", got " +
                                    t.shape().str());
    }
}
}  // namespace

Tensor map_forward(const GeneratorBundle& g, const Tensor& z) {
    expect_dim(z, g.arch.z_dim, "map_forward");
    return g.mapping.forward(z);
}

LatentCode map_forward(const GeneratorBundle& g, const NoiseVector& z) {
    return latent_at(map_forward(g, latent_batch(z)), 0);
}

SynthFeature synth_forward(const GeneratorBundle& g, const Tensor& w) {
    expect_dim(w, g.arch.w_dim, "synth_forward");
    return g.synthesis.forward(w);
}

Image render_forward(const GeneratorBundle& g, const SynthFeature& f) {
    if (f.c() != g.arch.feat_channels || f.h() != g.arch.feat_size || f.w() != g.arch.feat_size) {
        throw std::invalid_argument("render_forward: feature shape " + f.shape().str() + " does not match config");
    }
    return g.renderer.forward(f);
}

Image generate(const GeneratorBundle& g, const Tensor& w) {
    Image x = render_forward(g, synth_forward(g, w));
    for (auto& v : x.values()) v = std::clamp(v, -1.0, 1.0);
    return x;
}

Image generate(const GeneratorBundle& g, const LatentCode& w) { return generate(g, latent_batch(w)); }

EncoderNet make_encoder(const ArchConfig& arch, Rng& rng) {
    arch.validate();
    EncoderNet e{arch, build_encoder(arch)};
    Rng r = rng.substream("encoder");
    e.net.initialize(r);
    return e;
}

namespace {
void expect_image(const ArchConfig& a, const Image& x, const char* what) {
    if (x.c() != 3 || x.h() != a.image_size() || x.w() != a.image_size()) {
        throw std::invalid_argument(std::string(what) + ": image shape " + x.shape().str() + " does not match config");
    }
}
}  // namespace

Tensor encode(const EncoderNet& e, const Image& x) {
    expect_image(e.arch, x, "encode");
    return e.net.forward(x);
}

LatentCode encode_one(const EncoderNet& e, const Image& x) { return latent_at(encode(e, x), 0); }

EmbedderNet make_embedder(const ArchConfig& arch, Rng& rng) {
    arch.validate();
    EmbedderNet e;
    e.arch = arch;
    e.net = build_embedder(arch, e.feature_index);
    Rng r = rng.substream("embedder");
    e.net.initialize(r);
    return e;
}

Tensor embed_identity(const EmbedderNet& e, const Image& x) {
    expect_image(e.arch, x, "embed_identity");
    return e.net.forward(x);
}

Tensor embed_features(const EmbedderNet& e, const Image& x) {
    expect_image(e.arch, x, "embed_features");
    Tensor cur = x;
    for (std::size_t i = 0; i < e.feature_index; ++i) cur = e.net.layer(i).forward(cur);
    return cur;
}

PerceptualNet::PerceptualNet(const ArchConfig& arch) : seed_(arch.perceptual_seed) {
    const auto& ch = arch.perceptual_channels;
    net_.add(make_conv3x3(3, ch[0])).add(make_leaky_relu());
    taps_.push_back(net_.depth());
    net_.add(make_avg_pool2x()).add(make_conv3x3(ch[0], ch[1])).add(make_leaky_relu());
    taps_.push_back(net_.depth());
    net_.add(make_avg_pool2x()).add(make_conv3x3(ch[1], ch[2])).add(make_leaky_relu());
    taps_.push_back(net_.depth());
    Rng rng(seed_);
    net_.initialize(rng);
}

std::vector<Tensor> PerceptualNet::features(const Image& x) const {
    Trace trace;
    net_.forward(x, trace);
    std::vector<Tensor> out;
    for (auto t : taps_) out.push_back(trace.activations[t]);
    return out;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

struct ArrayRef {
    std::string name;
    std::vector<int> shape;
    std::vector<double>* values;
};

std::size_t shape_product(const std::vector<int>& shape) {
    std::size_t n = 1;
    for (int d : shape) n *= static_cast<std::size_t>(d);
    return n;
}

std::vector<ArrayRef> collect_arrays(Checkpoint& ck) {
    std::vector<ArrayRef> out;
    auto add_net = [&](Network& net) {
        for (auto* p : net.parameters()) out.push_back({p->name, p->shape, &p->value});
    };
    if (ck.generator) {
        add_net(ck.generator->mapping);
        add_net(ck.generator->synthesis);
        add_net(ck.generator->renderer);
    }
    if (ck.encoder) add_net(ck.encoder->net);
    if (ck.embedder) add_net(ck.embedder->net);
    return out;
}

std::string file_for(const std::string& name) { return name + ".bin"; }

void write_floats(const std::filesystem::path& file, const std::vector<double>& v) {
    std::vector<float> buf(v.begin(), v.end());
    std::ofstream out(file, std::ios::binary);
    if (!out) throw CheckpointError("cannot write " + file.string());
    out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
    if (!out) throw CheckpointError("failed writing " + file.string());
}

std::vector<double> read_floats(const std::filesystem::path& file, std::size_t expected, const std::string& name) {
    std::error_code ec;
    const auto bytes = std::filesystem::file_size(file, ec);
    if (ec) throw CheckpointCorruptError("array '" + name + "': missing file " + file.string());
    if (bytes != expected * sizeof(float)) {
        throw CheckpointCorruptError("array '" + name + "': file holds " + std::to_string(bytes) +
                                     " bytes, manifest shape needs " + std::to_string(expected * sizeof(float)));
    }
    std::vector<float> buf(expected);
    std::ifstream in(file, std::ios::binary);
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(bytes));
    if (!in) throw CheckpointCorruptError("array '" + name + "': short read from " + file.string());
    return {buf.begin(), buf.end()};
}

json read_manifest(const std::filesystem::path& dir) {
    const auto path = dir / "manifest.json";
    std::ifstream in(path);
    if (!in) throw CheckpointCorruptError("checkpoint manifest not found: " + path.string());
    json doc;
    try {
        doc = json::parse(in);
    } catch (const std::exception& e) {
        throw CheckpointCorruptError("checkpoint manifest " + path.string() + " does not parse: " + e.what());
    }
    if (!doc.contains("version") || !doc.contains("arrays") || !doc.contains("config")) {
        throw CheckpointCorruptError("checkpoint manifest " + path.string() + " lacks version/config/arrays");
    }
    if (doc.at("version").get<int>() != kCheckpointVersion) {
        throw CheckpointVersionError("checkpoint " + dir.string() + " has version " + doc.at("version").dump() +
                                     ", this build reads version " + std::to_string(kCheckpointVersion));
    }
    return doc;
}

Checkpoint load_into(const std::filesystem::path& dir, const json& doc, const ArchConfig& arch) {
    Checkpoint ck;
    ck.arch = arch;
    ck.seed = doc.value("seed", std::uint64_t{0});
    ck.metadata = doc.value("metadata", json::object());
    const auto parts = doc.value("parts", std::vector<std::string>{});
    auto has = [&](const char* p) { return std::find(parts.begin(), parts.end(), p) != parts.end(); };
    Rng scratch(0);
    if (has("generator")) {
        ck.generator = make_generator(arch, scratch);
        const auto& gj = doc.at("generator");
        ck.generator->provenance = gj.value("provenance", "source") == "source" ? Provenance::source : Provenance::unlearned;
        ck.generator->frozen_mapping = gj.value("frozen_mapping", false);
        ck.generator->frozen_synthesis = gj.value("frozen_synthesis", false);
        ck.generator->frozen_renderer = gj.value("frozen_renderer", false);
    }
    if (has("encoder")) ck.encoder = make_encoder(arch, scratch);
    if (has("embedder")) ck.embedder = make_embedder(arch, scratch);

    std::map<std::string, std::vector<int>> table;
    for (const auto& [name, shape] : doc.at("arrays").items()) table[name] = shape.get<std::vector<int>>();

    for (auto& ref : collect_arrays(ck)) {
        auto it = table.find(ref.name);
        if (it == table.end()) throw CheckpointCorruptError("array '" + ref.name + "' missing from manifest");
        if (it->second != ref.shape) {
            throw CheckpointShapeError("array '" + ref.name + "': stored shape " + json(it->second).dump() +
                                       " != expected " + json(ref.shape).dump());
        }
        *ref.values = read_floats(dir / file_for(ref.name), shape_product(ref.shape), ref.name);
    }
    if (auto it = table.find("mean_latent"); it != table.end()) {
        if (it->second != std::vector<int>{arch.w_dim}) {
            throw CheckpointShapeError("array 'mean_latent': stored shape " + json(it->second).dump() +
                                       " != expected [" + std::to_string(arch.w_dim) + "]");
        }
        auto v = read_floats(dir / file_for("mean_latent"), static_cast<std::size_t>(arch.w_dim), "mean_latent");
        ck.mean_latent = Eigen::Map<Eigen::VectorXd>(v.data(), arch.w_dim);
    }
    return ck;
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    Checkpoint copy = ckpt;
    json doc;
    doc["version"] = kCheckpointVersion;
    doc["config"] = to_json(ckpt.arch);
    doc["seed"] = ckpt.seed;
    doc["metadata"] = ckpt.metadata;
    std::vector<std::string> parts;
    if (ckpt.generator) {
        parts.push_back("generator");
        doc["generator"] = {{"provenance", to_string(ckpt.generator->provenance)},
                            {"frozen_mapping", ckpt.generator->frozen_mapping},
                            {"frozen_synthesis", ckpt.generator->frozen_synthesis},
                            {"frozen_renderer", ckpt.generator->frozen_renderer}};
    }
    if (ckpt.encoder) parts.push_back("encoder");
    if (ckpt.embedder) parts.push_back("embedder");
    doc["parts"] = parts;
    doc["perceptual_seed"] = ckpt.arch.perceptual_seed;
    json arrays = json::object();
    for (const auto& ref : collect_arrays(copy)) {
        arrays[ref.name] = ref.shape;
        write_floats(dir / file_for(ref.name), *ref.values);
    }
    if (ckpt.mean_latent) {
        arrays["mean_latent"] = std::vector<int>{static_cast<int>(ckpt.mean_latent->size())};
        write_floats(dir / file_for("mean_latent"),
                     std::vector<double>(ckpt.mean_latent->data(), ckpt.mean_latent->data() + ckpt.mean_latent->size()));
    }
    doc["arrays"] = std::move(arrays);
    std::ofstream out(dir / "manifest.json");
    if (!out) throw CheckpointError("cannot write manifest in " + dir.string());
    out << doc.dump(2) << "\n";
}

Checkpoint load_checkpoint(const std::filesystem::path& dir) {
    const json doc = read_manifest(dir);
    ArchConfig arch;
    try {
        arch = arch_from_json(doc.at("config"));
    } catch (const std::exception& e) {
        throw CheckpointCorruptError("checkpoint " + dir.string() + ": bad architecture config: " + e.what());
    }
    return load_into(dir, doc, arch);
}

Checkpoint load_checkpoint(const std::filesystem::path& dir, const ArchConfig& expected) {
    const json doc = read_manifest(dir);
    return load_into(dir, doc, expected);
}

void validate_checkpoint(const std::filesystem::path& dir) {
    const json doc = read_manifest(dir);
    for (const auto& [name, shape] : doc.at("arrays").items()) {
        const auto n = shape_product(shape.get<std::vector<int>>());
        std::error_code ec;
        const auto bytes = std::filesystem::file_size(dir / file_for(name), ec);
        if (ec) throw CheckpointCorruptError("array '" + name + "': missing file");
        if (bytes != n * sizeof(float)) {
            throw CheckpointCorruptError("array '" + name + "': " + std::to_string(bytes) + " bytes for " +
                                         std::to_string(n) + " floats");
        }
    }
}

}  // namespace latent_unlearn
