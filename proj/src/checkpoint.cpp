#include "hvq/checkpoint.hpp"

#include <chrono>

namespace hvq {

namespace {

constexpr char kMagic[4] = {'H', 'V', 'Q', 'C'};

void write_reals(bin::Writer& w, std::span<const real> values) {
    w.u64(values.size());
    for (real v : values) w.f64(double(v));
}

std::vector<real> read_reals(bin::Reader& r) {
    const std::uint64_t n = r.u64();
    if (n > r.remaining() / 8) throw FormatError("checkpoint: value count exceeds section size");
    std::vector<real> out(n);
    for (auto& v : out) v = real(r.f64());
    return out;
}

void expect_done(const bin::Reader& r, const std::string& what) {
    if (!r.done()) throw FormatError(what + ": trailing bytes");
}

}  // namespace

void Checkpoint::put(const std::string& name, std::vector<std::uint8_t> payload) {
    for (auto& [n, p] : sections_)
        if (n == name) {
            p = std::move(payload);
            return;
        }
    sections_.emplace_back(name, std::move(payload));
}

bool Checkpoint::has(const std::string& name) const {
    for (const auto& [n, p] : sections_)
        if (n == name) return true;
    return false;
}

const std::vector<std::uint8_t>& Checkpoint::get(const std::string& name) const {
    for (const auto& [n, p] : sections_)
        if (n == name) return p;
    throw FormatError("checkpoint has no section '" + name + "'");
}

std::vector<std::uint8_t> Checkpoint::serialize() const {
    bin::Writer w;
    w.bytes(kMagic, 4);
    w.u32(kVersion);
    w.u64(timestamp);
    w.u32(std::uint32_t(sections_.size()));
    for (const auto& [name, payload] : sections_) {
        w.str(name);
        w.u64(payload.size());
        w.bytes(payload.data(), payload.size());
    }
    return std::move(w.buffer());
}

Checkpoint Checkpoint::parse(const std::vector<std::uint8_t>& bytes, const std::string& what) {
    bin::Reader r(bytes, what);
    const auto* magic = r.bytes(4);
    if (!std::equal(magic, magic + 4, kMagic)) throw FormatError(what + ": bad magic");
    const std::uint32_t version = r.u32();
    if (version != kVersion) throw FormatError(what + ": unsupported version " + std::to_string(version));
    Checkpoint c;
    c.timestamp = r.u64();
    const std::uint32_t count = r.u32();
    for (std::uint32_t i = 0; i < count; ++i) {
        std::string name = r.str();
        const std::uint64_t n = r.u64();
        if (n > r.remaining()) throw FormatError(what + ": truncated");
        const auto* p = r.bytes(n);
        c.sections_.emplace_back(std::move(name), std::vector<std::uint8_t>(p, p + n));
    }
    expect_done(r, what);
    return c;
}

void Checkpoint::save(const std::filesystem::path& path) {
    timestamp = std::uint64_t(
        std::chrono::duration_cast<std::chrono::seconds>(std::chrono::system_clock::now().time_since_epoch()).count());
    bin::write_file(path, serialize());
}

Checkpoint Checkpoint::load(const std::filesystem::path& path) {
    return parse(bin::read_file(path), path.string());
}

void write_params(bin::Writer& w, const ParameterSet& params) {
    w.u32(std::uint32_t(params.size()));
    for (std::size_t i = 0; i < params.size(); ++i) {
        const Tensor& t = params.tensors()[i];
        w.str(params.names()[i]);
        w.u32(std::uint32_t(t.rank()));
        for (auto d : t.shape()) w.u64(d);
        write_reals(w, t.data());
    }
}

void read_params(bin::Reader& r, ParameterSet& params) {
    const std::uint32_t n = r.u32();
    if (n != params.size())
        throw FormatError("checkpoint holds " + std::to_string(n) + " parameters, model has " +
                          std::to_string(params.size()));
    for (std::uint32_t i = 0; i < n; ++i) {
        const std::string name = r.str();
        if (!params.contains(name)) throw FormatError("checkpoint parameter '" + name + "' is not in the model");
        Tensor& t = params.get(name);
        Shape shape(r.u32());
        for (auto& d : shape) d = r.u64();
        if (shape != t.shape())
            throw FormatError("parameter '" + name + "': checkpoint shape " + shape_str(shape) + ", model shape " +
                              shape_str(t.shape()));
        auto values = read_reals(r);
        if (values.size() != t.numel()) throw FormatError("parameter '" + name + "': value count mismatch");
        std::copy(values.begin(), values.end(), t.mutable_data().begin());
    }
}

void write_codebook(bin::Writer& w, const Codebook& cb) {
    w.u64(cb.size());
    w.u64(cb.dim());
    w.f64(cb.config().decay);
    w.f64(cb.config().epsilon);
    write_reals(w, cb.prototypes().data());
    write_reals(w, cb.counts());
    write_reals(w, cb.sums());
}

Codebook read_codebook(bin::Reader& r) {
    CodebookConfig c;
    c.size = r.u64();
    c.dim = r.u64();
    c.decay = r.f64();
    c.epsilon = r.f64();
    auto e = read_reals(r);
    auto n = read_reals(r);
    auto m = read_reals(r);
    if (e.size() != c.size * c.dim || n.size() != c.size || m.size() != c.size * c.dim)
        throw FormatError("codebook: inconsistent sizes");
    return Codebook(c, std::move(e), std::move(n), std::move(m));
}

std::vector<std::uint8_t> encode_adam(const Adam& adam) {
    bin::Writer w;
    w.f64(adam.config().learning_rate);
    w.f64(adam.config().beta1);
    w.f64(adam.config().beta2);
    w.f64(adam.config().epsilon);
    w.u64(adam.steps());
    w.u32(std::uint32_t(adam.moments().size()));
    for (const auto& [name, values] : adam.moments()) {
        w.str(name);
        write_reals(w, values);
    }
    return std::move(w.buffer());
}

Adam decode_adam(const std::vector<std::uint8_t>& bytes) {
    bin::Reader r(bytes, "optimizer section");
    AdamConfig c;
    c.learning_rate = r.f64();
    c.beta1 = r.f64();
    c.beta2 = r.f64();
    c.epsilon = r.f64();
    Adam adam(c);
    adam.set_steps(r.u64());
    const std::uint32_t n = r.u32();
    for (std::uint32_t i = 0; i < n; ++i) {
        std::string name = r.str();
        adam.moments()[name] = read_reals(r);
    }
    expect_done(r, "optimizer section");
    return adam;
}

std::vector<std::uint8_t> encode_text(const std::string& text) { return {text.begin(), text.end()}; }
std::string decode_text(const std::vector<std::uint8_t>& bytes) { return {bytes.begin(), bytes.end()}; }

std::vector<std::uint8_t> encode_u64(std::uint64_t v) {
    bin::Writer w;
    w.u64(v);
    return std::move(w.buffer());
}

std::uint64_t decode_u64(const std::vector<std::uint8_t>& bytes) {
    bin::Reader r(bytes, "counter section");
    const auto v = r.u64();
    expect_done(r, "counter section");
    return v;
}

std::vector<std::uint8_t> encode_codec(const HierarchicalCodec& codec) {
    bin::Writer w;
    write_params(w, codec.params());
    w.u32(std::uint32_t(codec.codebooks().size()));
    for (const auto& cb : codec.codebooks()) write_codebook(w, cb);
    return std::move(w.buffer());
}

HierarchicalCodec decode_codec(const CodecConfig& config, const std::vector<std::uint8_t>& bytes) {
    Rng scratch(0);
    HierarchicalCodec codec(config, scratch);
    bin::Reader r(bytes, "codec section");
    read_params(r, codec.params());
    const std::uint32_t n = r.u32();
    if (n != codec.levels()) throw FormatError("codec section: codebook count does not match the configuration");
    for (std::uint32_t l = 0; l < n; ++l) {
        Codebook cb = read_codebook(r);
        const auto& want = config.levels[l].codebook;
        if (cb.size() != want.size || cb.dim() != want.dim)
            throw FormatError("codec section: codebook '" + config.levels[l].name + "' shape mismatch");
        cb.set_trainable(config.codebook_update == CodebookUpdate::loss);
        codec.codebooks()[l] = std::move(cb);
    }
    expect_done(r, "codec section");
    return codec;
}

std::vector<std::uint8_t> encode_prior(const PixelCnnPrior& prior) {
    bin::Writer w;
    write_params(w, prior.params());
    return std::move(w.buffer());
}

PixelCnnPrior decode_prior(const PriorConfig& config, const std::vector<std::uint8_t>& bytes) {
    Rng scratch(0);
    PixelCnnPrior prior(config, scratch);
    bin::Reader r(bytes, "prior section");
    read_params(r, prior.params());
    expect_done(r, "prior section");
    return prior;
}

void save_classifier(const std::filesystem::path& path, const ToyClassifier& clf) {
    const auto& c = clf.config();
    bin::Writer w;
    w.u64(c.channels);
    w.u64(c.classes);
    w.u64(c.width);
    Checkpoint ck;
    ck.put("classifier.config", std::move(w.buffer()));
    bin::Writer p;
    write_params(p, clf.params());
    ck.put("classifier", std::move(p.buffer()));
    ck.save(path);
}

ToyClassifier load_classifier(const std::filesystem::path& path) {
    const Checkpoint ck = Checkpoint::load(path);
    bin::Reader r(ck.get("classifier.config"), "classifier config");
    ClassifierConfig c;
    c.channels = r.u64();
    c.classes = r.u64();
    c.width = r.u64();
    Rng scratch(0);
    ToyClassifier clf(c, scratch);
    bin::Reader p(ck.get("classifier"), "classifier section");
    read_params(p, clf.params());
    expect_done(p, "classifier section");
    return clf;
}

std::pair<RunConfig, HierarchicalCodec> load_codec(const std::filesystem::path& path) {
    const Checkpoint ck = Checkpoint::load(path);
    RunConfig cfg = RunConfig::from_json(decode_text(ck.get("config")));
    HierarchicalCodec codec = decode_codec(cfg.codec, ck.get("codec"));
    return {std::move(cfg), std::move(codec)};
}

std::pair<RunConfig, PixelCnnPrior> load_prior(const std::filesystem::path& path) {
    const Checkpoint ck = Checkpoint::load(path);
    RunConfig cfg = RunConfig::from_json(decode_text(ck.get("config")));
    const std::string level = decode_text(ck.get("level"));
    PixelCnnPrior prior = decode_prior(cfg.prior(level).model, ck.get("prior"));
    return {std::move(cfg), std::move(prior)};
}

}  // namespace hvq
