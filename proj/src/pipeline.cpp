#include "hvq/pipeline.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <json.hpp>

namespace hvq {

namespace fs = std::filesystem;

namespace {

constexpr std::size_t kChunk = 64;
constexpr char kCodesMagic[4] = {'H', 'V', 'Q', 'D'};

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

std::uint64_t level_seed(std::uint64_t seed, const std::string& level) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : level) h = (h ^ c) * 1099511628211ull;
    return splitmix64(seed ^ h);
}

std::vector<std::size_t> iota_rows(std::size_t begin, std::size_t end) {
    std::vector<std::size_t> rows;
    for (std::size_t i = begin; i < end; ++i) rows.push_back(i);
    return rows;
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
    Shape shape = parts.front().shape();
    std::vector<real> data;
    shape[0] = 0;
    for (const auto& p : parts) {
        shape[0] += p.dim(0);
        data.insert(data.end(), p.data().begin(), p.data().end());
    }
    return Tensor::from(std::move(shape), std::move(data));
}

CodeGrid gather_grid(const CodeGrid& grid, const std::vector<std::size_t>& rows) {
    CodeGrid out = grid;
    out.batch = rows.size();
    out.indices.clear();
    const std::size_t n = grid.positions();
    for (std::size_t r : rows)
        out.indices.insert(out.indices.end(), grid.indices.begin() + std::ptrdiff_t(r * n),
                           grid.indices.begin() + std::ptrdiff_t((r + 1) * n));
    return out;
}

void check_images(const CodecConfig& codec, const Tensor& images) {
    if (!images.defined()) throw ConfigError("dataset is empty");
    if (images.rank() != 4 || images.dim(1) != codec.channels || images.dim(2) != codec.image_size ||
        images.dim(3) != codec.image_size)
        throw DimensionError("images " + shape_str(images.shape()) + " do not match the codec (" +
                             std::to_string(codec.channels) + " channels, " + std::to_string(codec.image_size) +
                             "x" + std::to_string(codec.image_size) + ")");
}

void check_labels(std::size_t classes, const std::vector<Label>& labels, std::size_t n, const char* what) {
    if (classes == 0) return;
    if (labels.size() != n)
        throw ConfigError(std::string(what) + ": class-conditional priors need one label per image");
}

std::vector<std::string> level_names(const CodecConfig& c) {
    std::vector<std::string> names;
    for (const auto& l : c.levels) names.push_back(l.name);
    return names;
}

// Time-series CSV that survives resumption: rows after the resume step are dropped.
class MetricsFile {
public:
    MetricsFile(const fs::path& path, const std::string& header, std::optional<std::size_t> resumed_at) : path_(path) {
        std::vector<std::string> keep;
        if (resumed_at && fs::exists(path)) {
            std::ifstream in(path);
            std::string line;
            std::getline(in, line);
            while (std::getline(in, line)) {
                if (line.empty()) continue;
                if (std::stoull(line.substr(0, line.find(','))) <= *resumed_at) keep.push_back(line);
            }
        }
        std::ofstream out(path, std::ios::trunc);
        if (!out) throw FormatError("cannot write " + path.string());
        out << header << '\n';
        for (const auto& l : keep) out << l << '\n';
    }

    void row(const std::string& line) {
        std::ofstream out(path_, std::ios::app);
        out << line << '\n';
    }

private:
    fs::path path_;
};

std::string fmt(double v) {
    std::ostringstream os;
    os << std::setprecision(10) << v;
    return os.str();
}

Tensor decode_all(const HierarchicalCodec& codec, const CodeDataset& codes, const std::vector<bool>& active) {
    std::vector<Tensor> parts;
    for (std::size_t b = 0; b < codes.size(); b += kChunk) {
        const std::size_t e = std::min(codes.size(), b + kChunk);
        std::vector<CodeGrid> grids;
        for (const auto& g : codes.levels) grids.push_back(slice_grid(g, b, e));
        Tape tape(Tape::Mode::inference);
        parts.push_back(codec.decode_codes(tape, grids, active));
    }
    return concat_rows(parts);
}

std::vector<double> mse_per_image(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw DimensionError("reconstruction " + shape_str(a.shape()) + " vs images " + shape_str(b.shape()));
    const std::size_t n = a.dim(0), m = a.numel() / n;
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        double s = 0;
        for (std::size_t j = 0; j < m; ++j) {
            const double d = double(a[i * m + j]) - double(b[i * m + j]);
            s += d * d;
        }
        out[i] = s / double(m);
    }
    return out;
}

double mean(const std::vector<double>& v) {
    double s = 0;
    for (double x : v) s += x;
    return s / double(v.size());
}

std::string image_name(const std::string& stem, std::size_t i, std::size_t channels) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "_%04zu", i);
    return stem + buf + (channels == 3 ? ".ppm" : ".pgm");
}

}  // namespace

void CodeDataset::validate(const CodecConfig& codec) const {
    if (levels.size() != codec.levels.size())
        throw ConfigError("code dataset has " + std::to_string(levels.size()) + " levels, codec has " +
                          std::to_string(codec.levels.size()));
    for (std::size_t l = 0; l < levels.size(); ++l) {
        const CodeGrid& g = levels[l];
        g.validate();
        if (g.batch != size()) throw DimensionError("code dataset levels differ in length");
        const std::size_t side = codec.grid_size(l);
        if (g.height != side || g.width != side)
            throw DimensionError("level '" + codec.levels[l].name + "': code grid " + std::to_string(g.height) + "x" +
                                 std::to_string(g.width) + ", codec expects " + std::to_string(side) + "x" +
                                 std::to_string(side));
        if (g.vocabulary != codec.levels[l].codebook.size)
            throw ConfigError("level '" + codec.levels[l].name + "': code vocabulary " + std::to_string(g.vocabulary) +
                              " does not match codebook size " + std::to_string(codec.levels[l].codebook.size));
    }
    if (!labels.empty() && labels.size() != size()) throw DimensionError("code dataset label count mismatch");
}

CodeGrid slice_grid(const CodeGrid& grid, std::size_t begin, std::size_t end) {
    return gather_grid(grid, iota_rows(begin, end));
}

CodeDataset CodeDataset::slice(std::size_t begin, std::size_t end) const {
    CodeDataset out;
    for (const auto& g : levels) out.levels.push_back(slice_grid(g, begin, end));
    if (!labels.empty()) out.labels.assign(labels.begin() + std::ptrdiff_t(begin), labels.begin() + std::ptrdiff_t(end));
    return out;
}

void write_codes(const fs::path& path, const CodeDataset& codes) {
    bin::Writer w;
    w.bytes(kCodesMagic, 4);
    w.u32(1);
    w.u32(std::uint32_t(codes.levels.size()));
    w.u64(codes.size());
    w.u8(codes.labels.empty() ? 0 : 1);
    for (const auto& g : codes.levels) {
        if (g.vocabulary > 65536) throw FormatError("code file: vocabulary too large for u16 codes");
        w.str(g.source);
        w.u32(std::uint32_t(g.height));
        w.u32(std::uint32_t(g.width));
        w.u32(std::uint32_t(g.vocabulary));
    }
    for (const auto& g : codes.levels)
        for (Code c : g.indices) w.u16(std::uint16_t(c));
    for (Label l : codes.labels) w.i32(l);
    bin::write_file(path, w.buffer());
}

CodeDataset read_codes(const fs::path& path) {
    const auto bytes = bin::read_file(path);
    bin::Reader r(bytes, path.string());
    const auto* magic = r.bytes(4);
    if (!std::equal(magic, magic + 4, kCodesMagic)) throw FormatError(path.string() + ": not a code file");
    if (r.u32() != 1) throw FormatError(path.string() + ": unsupported code file version");
    CodeDataset out;
    out.levels.resize(r.u32());
    const std::uint64_t n = r.u64();
    const bool labelled = r.u8() != 0;
    for (auto& g : out.levels) {
        g.source = r.str();
        g.batch = n;
        g.height = r.u32();
        g.width = r.u32();
        g.vocabulary = r.u32();
    }
    for (auto& g : out.levels) {
        const std::uint64_t count = n * g.height * g.width;
        if (count > r.remaining() / 2) throw FormatError(path.string() + ": truncated");
        g.indices.resize(count);
        for (auto& c : g.indices) c = r.u16();
        g.validate();
    }
    if (labelled) {
        out.labels.resize(n);
        for (auto& l : out.labels) l = r.i32();
    }
    if (!r.done()) throw FormatError(path.string() + ": trailing bytes");
    return out;
}

RunLock::RunLock(const fs::path& dir) : path_(dir / ".lock") {
    fs::create_directories(dir);
    const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd < 0)
        throw StateError("run directory " + dir.string() + " is locked by another process (remove " +
                         path_.string() + " if it is stale)");
    const std::string pid = std::to_string(::getpid()) + "\n";
    [[maybe_unused]] auto written = ::write(fd, pid.data(), pid.size());
    ::close(fd);
}

RunLock::~RunLock() {
    std::error_code ec;
    fs::remove(path_, ec);
}

std::vector<bool> validation_rows(std::size_t n, double fraction, std::uint64_t seed) {
    std::vector<bool> out(n, false);
    if (fraction <= 0) return out;
    for (std::size_t i = 0; i < n; ++i)
        out[i] = double(splitmix64(std::uint64_t(i) ^ splitmix64(seed)) >> 11) * 0x1.0p-53 < fraction;
    return out;
}

DataSplit load_data(const RunConfig& config) {
    if (config.data.train.empty()) throw ConfigError("no training data configured (data.train)");
    Dataset all = config.data.train.load();
    DataSplit split;
    if (!config.data.validation.empty()) {
        split.train = std::move(all);
        split.validation = config.data.validation.load();
    } else {
        const auto mask = validation_rows(all.size(), config.data.validation_fraction, config.seed);
        std::vector<std::size_t> tr, va;
        for (std::size_t i = 0; i < mask.size(); ++i) (mask[i] ? va : tr).push_back(i);
        split.train = all.subset(tr);
        split.validation = all.subset(va);
    }
    if (split.train.size() == 0) throw ConfigError("training set is empty");
    check_images(config.codec, split.train.images);
    if (split.validation.size() > 0) check_images(config.codec, split.validation.images);
    check_labels(config.classes, split.train.labels, split.train.size(), "training set");
    if (split.validation.size() > 0)
        check_labels(config.classes, split.validation.labels, split.validation.size(), "validation set");
    return split;
}

Stage1Trainer::Stage1Trainer(const RunConfig& config, Dataset train)
    : config_(config), data_(std::move(train)), rng_(config.seed), codec_(config.codec, rng_),
      adam_(config.stage1.adam) {
    if (data_.size() == 0) throw ConfigError("training set is empty");
    check_images(config_.codec, data_.images);
}

Stage1Trainer::Stage1Trainer(const Checkpoint& ck, Dataset train)
    : config_(RunConfig::from_json(decode_text(ck.get("config")))), data_(std::move(train)), rng_(0),
      codec_(decode_codec(config_.codec, ck.get("codec"))), adam_(decode_adam(ck.get("optim.codec"))),
      step_(decode_u64(ck.get("state"))) {
    rng_.load_state(decode_text(ck.get("rng")));
    if (data_.size() == 0) throw ConfigError("training set is empty");
    check_images(config_.codec, data_.images);
}

Tensor Stage1Trainer::next_batch() {
    const std::size_t n = data_.size(), b = config_.stage1.batch_size;
    if (b >= n) return data_.images;
    std::vector<std::size_t> rows(b);
    for (auto& r : rows) r = rng_.uniform_int(n);
    return data_.subset(rows).images;
}

TrainStepResult Stage1Trainer::step() {
    const Tensor batch = next_batch();
    auto r = codec_.train_step(batch, adam_);
    ++step_;
    return r;
}

Checkpoint Stage1Trainer::checkpoint() const {
    Checkpoint ck;
    ck.put("config", encode_text(config_.to_json()));
    ck.put("codec", encode_codec(codec_));
    ck.put("optim.codec", encode_adam(adam_));
    ck.put("rng", encode_text(rng_.save_state()));
    ck.put("state", encode_u64(step_));
    return ck;
}

Stage1Report run_stage1(const RunConfig& config, const fs::path& dir, const std::optional<fs::path>& resume,
                        std::ostream* log) {
    RunLock lock(dir);
    const RunPaths paths(dir);
    std::optional<Checkpoint> ck;
    if (resume) ck = Checkpoint::load(*resume);
    const RunConfig cfg = ck ? RunConfig::from_json(decode_text(ck->get("config"))) : config;
    DataSplit split = load_data(cfg);
    std::optional<Stage1Trainer> trainer;
    if (ck)
        trainer.emplace(*ck, split.train);
    else
        trainer.emplace(cfg, split.train);

    std::string header = "step,loss,mse";
    for (const auto& name : level_names(cfg.codec)) header += ",perplexity_" + name;
    MetricsFile metrics(paths.stage1_metrics(), header,
                        ck ? std::optional<std::size_t>(trainer->steps_done()) : std::nullopt);

    Stage1Report report;
    const auto& t = cfg.stage1;
    while (trainer->steps_done() < t.steps) {
        report.last = trainer->step();
        const std::size_t s = trainer->steps_done();
        if ((t.log_interval && s % t.log_interval == 0) || s == t.steps || s == 1) {
            std::string line = std::to_string(s) + "," + fmt(report.last.loss) + "," + fmt(report.last.mse);
            for (double p : report.last.perplexity) line += "," + fmt(p);
            metrics.row(line);
            if (log) *log << "stage1 step " << s << " loss " << fmt(report.last.loss) << " mse " << fmt(report.last.mse)
                          << '\n';
        }
        if (t.checkpoint_interval && s % t.checkpoint_interval == 0 && s < t.steps) {
            auto c = trainer->checkpoint();
            c.save(paths.codec());
        }
    }
    auto c = trainer->checkpoint();
    c.save(paths.codec());
    report.steps = trainer->steps_done();
    report.train_mse = reconstruction_mse(trainer->codec(), split.train.images);
    return report;
}

CodeDataset extract_codes(const HierarchicalCodec& codec, const Dataset& data) {
    check_images(codec.config(), data.images);
    std::vector<std::vector<CodeGrid>> parts(codec.levels());
    for (std::size_t b = 0; b < data.size(); b += kChunk) {
        const Dataset chunk = data.subset(iota_rows(b, std::min(data.size(), b + kChunk)));
        Tape tape(Tape::Mode::inference);
        auto latents = codec.encode(tape, chunk.images);
        for (std::size_t l = 0; l < codec.levels(); ++l) parts[l].push_back(std::move(latents.codes[l]));
    }
    CodeDataset out;
    for (std::size_t l = 0; l < codec.levels(); ++l) {
        out.levels.push_back(CodeGrid::stack(parts[l]));
        out.levels.back().source = codec.config().levels[l].name;
    }
    out.labels = data.labels;
    return out;
}

std::vector<bool> levels_from(std::size_t levels, std::size_t lowest) {
    std::vector<bool> active(levels, false);
    for (std::size_t l = lowest; l < levels; ++l) active[l] = true;
    return active;
}

std::vector<double> decode_mse_per_image(const HierarchicalCodec& codec, const CodeDataset& codes,
                                         const Tensor& images, const std::vector<bool>& active) {
    codes.validate(codec.config());
    return mse_per_image(decode_all(codec, codes, active), images);
}

double decode_mse(const HierarchicalCodec& codec, const CodeDataset& codes, const Tensor& images,
                  const std::vector<bool>& active) {
    return mean(decode_mse_per_image(codec, codes, images, active));
}

double reconstruction_mse(const HierarchicalCodec& codec, const Tensor& images) {
    check_images(codec.config(), images);
    Dataset data;
    data.images = images;
    std::vector<Tensor> parts;
    for (std::size_t b = 0; b < data.size(); b += kChunk) {
        const Dataset chunk = data.subset(iota_rows(b, std::min(data.size(), b + kChunk)));
        Tape tape(Tape::Mode::inference);
        auto latents = codec.encode(tape, chunk.images);
        parts.push_back(codec.decode(tape, latents));
    }
    return mean(mse_per_image(concat_rows(parts), images));
}

Stage2Trainer::Stage2Trainer(const RunConfig& config, const std::string& level, CodeDataset train)
    : config_(config), level_(level), index_(config.codec.level_index(level)), data_(std::move(train)),
      rng_(level_seed(config.seed, level)), prior_(config.prior(level).model, rng_),
      adam_(config.prior(level).train.adam) {
    data_.validate(config_.codec);
    if (data_.size() == 0) throw ConfigError("code dataset is empty");
    check_labels(config_.classes, data_.labels, data_.size(), "code dataset");
}

Stage2Trainer::Stage2Trainer(const Checkpoint& ck, CodeDataset train)
    : config_(RunConfig::from_json(decode_text(ck.get("config")))), level_(decode_text(ck.get("level"))),
      index_(config_.codec.level_index(level_)), data_(std::move(train)), rng_(0),
      prior_(decode_prior(config_.prior(level_).model, ck.get("prior"))),
      adam_(decode_adam(ck.get("optim.prior"))), step_(decode_u64(ck.get("state"))) {
    rng_.load_state(decode_text(ck.get("rng")));
    data_.validate(config_.codec);
    if (data_.size() == 0) throw ConfigError("code dataset is empty");
    check_labels(config_.classes, data_.labels, data_.size(), "code dataset");
}

double Stage2Trainer::step() {
    const std::size_t n = data_.size(), b = config_.prior(level_).train.batch_size;
    std::vector<std::size_t> rows;
    if (b >= n) {
        rows = iota_rows(0, n);
    } else {
        rows.resize(b);
        for (auto& r : rows) r = rng_.uniform_int(n);
    }
    const CodeGrid codes = gather_grid(data_.levels[index_], rows);
    std::optional<CodeGrid> cond;
    if (index_ + 1 < data_.levels.size()) cond = gather_grid(data_.levels[index_ + 1], rows);
    std::vector<Label> labels;
    if (prior_.config().classes > 0)
        for (auto r : rows) labels.push_back(data_.labels[r]);
    PriorBatch batch{&codes, labels, cond ? &*cond : nullptr};
    const double loss = prior_.train_step(batch, adam_, rng_);
    ++step_;
    return loss;
}

Checkpoint Stage2Trainer::checkpoint() const {
    Checkpoint ck;
    ck.put("config", encode_text(config_.to_json()));
    ck.put("level", encode_text(level_));
    ck.put("prior", encode_prior(prior_));
    ck.put("optim.prior", encode_adam(adam_));
    ck.put("rng", encode_text(rng_.save_state()));
    ck.put("state", encode_u64(step_));
    return ck;
}

double dataset_nll(const PixelCnnPrior& prior, const CodeDataset& codes, std::size_t level) {
    if (level >= codes.levels.size()) throw IndexError("dataset_nll: level out of range");
    const std::size_t n = codes.size();
    if (n == 0) throw ConfigError("dataset_nll: empty code dataset");
    double total = 0;
    for (std::size_t b = 0; b < n; b += kChunk) {
        const std::size_t e = std::min(n, b + kChunk);
        const CodeGrid grid = slice_grid(codes.levels[level], b, e);
        std::optional<CodeGrid> cond;
        if (level + 1 < codes.levels.size()) cond = slice_grid(codes.levels[level + 1], b, e);
        std::vector<Label> labels;
        if (prior.config().classes > 0) {
            if (codes.labels.size() != n) throw ConfigError("class-conditional prior needs labelled codes");
            labels.assign(codes.labels.begin() + std::ptrdiff_t(b), codes.labels.begin() + std::ptrdiff_t(e));
        }
        Tape tape(Tape::Mode::inference);
        const double nll = prior.nll(tape, PriorBatch{&grid, labels, cond ? &*cond : nullptr}).item();
        total += nll * double(e - b);
    }
    return total / double(n);
}

Stage2Report run_stage2(const RunConfig& config, const std::string& level, const CodeDataset& train,
                        const CodeDataset* validation, const fs::path& dir, const std::optional<fs::path>& resume,
                        std::ostream* log) {
    RunLock lock(dir);
    const RunPaths paths(dir);
    std::optional<Checkpoint> ck;
    if (resume) ck = Checkpoint::load(*resume);
    std::optional<Stage2Trainer> trainer;
    if (ck)
        trainer.emplace(*ck, train);
    else
        trainer.emplace(config, level, train);
    const std::string& lv = trainer->level();
    const RunConfig cfg = ck ? RunConfig::from_json(decode_text(ck->get("config"))) : config;
    const std::size_t index = cfg.codec.level_index(lv);
    if (validation) validation->validate(cfg.codec);

    MetricsFile metrics(paths.prior_metrics(lv), "step,loss,nll_" + lv + ",nll_" + lv + "_bits",
                        ck ? std::optional<std::size_t>(trainer->steps_done()) : std::nullopt);
    const auto& t = cfg.prior(lv).train;
    while (trainer->steps_done() < t.steps) {
        const double loss = trainer->step();
        const std::size_t s = trainer->steps_done();
        if ((t.log_interval && s % t.log_interval == 0) || s == t.steps || s == 1) {
            metrics.row(std::to_string(s) + "," + fmt(loss) + "," + fmt(loss) + "," + fmt(nats_to_bits(loss)));
            if (log) *log << "prior " << lv << " step " << s << " nll " << fmt(loss) << " nats\n";
        }
        if (t.checkpoint_interval && s % t.checkpoint_interval == 0 && s < t.steps) {
            auto c = trainer->checkpoint();
            c.save(paths.prior(lv));
        }
    }
    auto c = trainer->checkpoint();
    c.save(paths.prior(lv));

    Stage2Report report;
    report.level = lv;
    report.steps = trainer->steps_done();
    report.train_nll = dataset_nll(trainer->prior(), train, index);
    if (validation && validation->size() > 0) report.validation_nll = dataset_nll(trainer->prior(), *validation, index);
    if (log) {
        *log << "prior " << lv << " train nll " << fmt(report.train_nll) << " nats ("
             << fmt(nats_to_bits(report.train_nll)) << " bits)";
        if (report.validation_nll)
            *log << ", validation nll " << fmt(*report.validation_nll) << " nats ("
                 << fmt(nats_to_bits(*report.validation_nll)) << " bits)";
        *log << '\n';
    }
    return report;
}

Generated generate(const HierarchicalCodec& codec, const std::vector<const PixelCnnPrior*>& priors,
                   std::size_t classes, const ToyClassifier* classifier, const GenerateOptions& o) {
    const std::size_t levels = codec.levels();
    if (priors.size() != levels)
        throw ConfigError("generate needs one prior per level (" + std::to_string(levels) + "), got " +
                          std::to_string(priors.size()));
    for (std::size_t l = 0; l < levels; ++l) {
        if (!priors[l]) throw ConfigError("missing prior for level '" + codec.config().levels[l].name + "'");
        const auto& pc = priors[l]->config();
        if (pc.height != codec.config().grid_size(l) || pc.vocabulary != codec.config().levels[l].codebook.size)
            throw ConfigError("prior for level '" + codec.config().levels[l].name + "' does not match the codec");
    }
    if (o.n == 0) throw ConfigError("generate: n must be positive");
    if (!(o.keep_fraction > 0 && o.keep_fraction <= 1)) throw ConfigError("keep fraction must lie in (0,1]");
    if (o.keep_fraction < 1 && !classifier)
        throw ConfigError("keep fraction below 1 requires a classifier checkpoint");
    if (o.class_label >= 0 && std::size_t(o.class_label) >= std::max<std::size_t>(classes, 1))
        throw ConfigError("class label " + std::to_string(o.class_label) + " out of range");

    std::vector<Label> labels;
    if (classes > 0)
        for (std::size_t i = 0; i < o.n; ++i) labels.push_back(o.class_label >= 0 ? o.class_label : Label(i % classes));

    Rng rng(o.seed);
    Generated g;
    g.codes.levels.resize(levels);
    g.codes.labels = labels;
    for (std::size_t l = levels; l-- > 0;) {
        const CodeGrid* cond = l + 1 < levels ? &g.codes.levels[l + 1] : nullptr;
        g.codes.levels[l] = ancestral_sample(*priors[l], o.n, labels, cond, o.temperature, rng);
        g.codes.levels[l].source = codec.config().levels[l].name;
    }
    g.images = decode_all(codec, g.codes, {});

    if (classifier) {
        std::vector<Label> targets = labels;
        if (targets.empty()) targets.assign(o.n, 0);
        g.scored = score(g.images, targets, *classifier, 0);
        for (const auto& s : reject_filter(g.scored, o.keep_fraction)) g.kept.push_back(s.sample_id);
        std::sort(g.kept.begin(), g.kept.end());
    } else {
        g.kept = iota_rows(0, o.n);
    }
    return g;
}

void write_generated(const fs::path& dir, const Generated& g) {
    fs::create_directories(dir);
    const std::size_t channels = g.images.dim(1);
    for (std::size_t id : g.kept) write_pnm(dir / image_name("sample", id, channels), to_image(g.images, id));
    if (!g.scored.empty()) {
        std::vector<ScoredSample> kept;
        for (const auto& s : g.scored)
            if (std::binary_search(g.kept.begin(), g.kept.end(), s.sample_id)) kept.push_back(s);
        std::ostringstream os;
        write_scores_csv(os, g.scored, kept);
        bin::write_text(dir / "scores.csv", os.str());
    }
    write_codes(dir / "codes.bin", g.codes);
}

EvalReport evaluate(const HierarchicalCodec& codec, const std::map<std::string, const PixelCnnPrior*>& priors,
                    const Dataset& train, const Dataset& validation) {
    const std::size_t levels = codec.levels();
    const CodeDataset tc = extract_codes(codec, train);
    std::optional<CodeDataset> vc;
    if (validation.size() > 0) vc = extract_codes(codec, validation);

    EvalReport r;
    r.train_images = train.size();
    r.validation_images = validation.size();
    for (std::size_t l = 0; l < levels; ++l) {
        LevelReport lr;
        lr.level = codec.config().levels[l].name;
        const auto active = levels_from(levels, l);
        lr.train_mse = decode_mse(codec, tc, train.images, active);
        if (vc) lr.validation_mse = decode_mse(codec, *vc, validation.images, active);
        if (auto it = priors.find(lr.level); it != priors.end() && it->second) {
            lr.train_nll = dataset_nll(*it->second, tc, l);
            if (vc) lr.validation_nll = dataset_nll(*it->second, *vc, l);
        }
        r.levels.push_back(lr);
    }
    r.train_mse = r.levels.front().train_mse;
    r.validation_mse = r.levels.front().validation_mse;
    return r;
}

namespace {

nlohmann::ordered_json opt(const std::optional<double>& v) {
    return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(nullptr);
}

std::optional<double> bits(const std::optional<double>& nats) {
    return nats ? std::optional<double>(nats_to_bits(*nats)) : std::nullopt;
}

std::string cell(const std::optional<double>& v) {
    if (!v) return "";
    std::ostringstream os;
    os << std::setprecision(17) << *v;
    return os.str();
}

}  // namespace

std::string EvalReport::to_json() const {
    nlohmann::ordered_json j;
    j["train_images"] = train_images;
    j["validation_images"] = validation_images;
    j["train_mse"] = train_mse;
    j["validation_mse"] = opt(validation_mse);
    auto arr = nlohmann::ordered_json::array();
    for (const auto& l : levels)
        arr.push_back({{"level", l.level},
                       {"train_nll_nats", opt(l.train_nll)},
                       {"train_nll_bits", opt(bits(l.train_nll))},
                       {"validation_nll_nats", opt(l.validation_nll)},
                       {"validation_nll_bits", opt(bits(l.validation_nll))},
                       {"train_mse", l.train_mse},
                       {"validation_mse", opt(l.validation_mse)}});
    j["levels"] = arr;
    return j.dump(2) + "\n";
}

std::string EvalReport::to_csv() const {
    std::ostringstream os;
    os << "level,train_nll_nats,train_nll_bits,validation_nll_nats,validation_nll_bits,train_mse,validation_mse\n";
    for (const auto& l : levels)
        os << l.level << ',' << cell(l.train_nll) << ',' << cell(bits(l.train_nll)) << ',' << cell(l.validation_nll)
           << ',' << cell(bits(l.validation_nll)) << ',' << cell(l.train_mse) << ',' << cell(l.validation_mse) << '\n';
    return os.str();
}

std::vector<std::vector<double>> reconstruction_detail(const HierarchicalCodec& codec, const Dataset& data,
                                                       const fs::path& dir) {
    const CodeDataset codes = extract_codes(codec, data);
    const std::size_t levels = codec.levels(), channels = codec.config().channels;
    fs::create_directories(dir);
    for (std::size_t i = 0; i < data.size(); ++i)
        write_pnm(dir / image_name("original", i, channels), to_image(data.images, i));
    std::vector<std::vector<double>> mse;
    std::ostringstream csv;
    csv << "image,level,mse\n" << std::setprecision(17);
    for (std::size_t l = 0; l < levels; ++l) {
        const std::string& name = codec.config().levels[l].name;
        const Tensor recon = decode_all(codec, codes, levels_from(levels, l));
        mse.push_back(mse_per_image(recon, data.images));
        for (std::size_t i = 0; i < data.size(); ++i) {
            write_pnm(dir / image_name(name, i, channels), to_image(recon, i));
            csv << i << ',' << name << ',' << mse.back()[i] << '\n';
        }
    }
    bin::write_text(dir / "detail.csv", csv.str());
    return mse;
}

}  // namespace hvq
