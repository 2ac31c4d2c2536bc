#include "hvq/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

namespace hvq {

using json = nlohmann::ordered_json;

namespace {

// Reads the fields of one JSON object, remembering which keys were consumed
// so that anything left over can be reported as unknown.
class Fields {
public:
    Fields(const json& j, std::string where) : j_(j), where_(std::move(where)) {
        if (!j_.is_object()) throw ConfigError(where_ + ": expected an object");
    }

    bool has(const std::string& key) const { return j_.contains(key); }

    const json& at(const std::string& key) {
        seen_.insert(key);
        return j_.at(key);
    }

    void get(const std::string& key, std::size_t& out) {
        if (!has(key)) return;
        const json& v = at(key);
        if (!v.is_number_unsigned()) throw ConfigError(path(key) + ": expected a non-negative integer");
        out = v.get<std::size_t>();
    }
    void get(const std::string& key, std::int32_t& out) {
        if (!has(key)) return;
        const json& v = at(key);
        if (!v.is_number_integer()) throw ConfigError(path(key) + ": expected an integer");
        out = v.get<std::int32_t>();
    }
    void get(const std::string& key, double& out) {
        if (!has(key)) return;
        const json& v = at(key);
        if (!v.is_number()) throw ConfigError(path(key) + ": expected a number");
        out = v.get<double>();
    }
    void get(const std::string& key, std::string& out) {
        if (!has(key)) return;
        const json& v = at(key);
        if (!v.is_string()) throw ConfigError(path(key) + ": expected a string");
        out = v.get<std::string>();
    }

    std::string path(const std::string& key) const { return where_ + "." + key; }

    void finish() const {
        for (const auto& [key, value] : j_.items())
            if (!seen_.count(key)) throw ConfigError("unknown key '" + path(key) + "'");
    }

private:
    const json& j_;
    std::string where_;
    std::set<std::string> seen_;
};

json synthetic_json(const SyntheticSpec& s) {
    return {{"count", s.count}, {"size", s.size}, {"channels", s.channels}, {"families", s.families},
            {"seed", s.seed}};
}

SyntheticSpec synthetic_from(const json& j, const std::string& where) {
    SyntheticSpec s;
    Fields f(j, where);
    f.get("count", s.count);
    f.get("size", s.size);
    f.get("channels", s.channels);
    f.get("families", s.families);
    f.get("seed", s.seed);
    f.finish();
    return s;
}

json source_json(const DataSource& s) {
    json j = json::object();
    if (!s.path.empty()) j["path"] = s.path;
    if (!s.labels.empty()) j["labels"] = s.labels;
    if (s.synthetic) j["synthetic"] = synthetic_json(*s.synthetic);
    return j;
}

DataSource source_from(const json& j, const std::string& where) {
    DataSource s;
    Fields f(j, where);
    f.get("path", s.path);
    f.get("labels", s.labels);
    if (f.has("synthetic")) s.synthetic = synthetic_from(f.at("synthetic"), f.path("synthetic"));
    f.finish();
    if (!s.path.empty() && s.synthetic) throw ConfigError(where + ": give either a path or a synthetic spec");
    return s;
}

json train_json(const TrainConfig& t) {
    return {{"batch_size", t.batch_size},
            {"steps", t.steps},
            {"learning_rate", t.adam.learning_rate},
            {"adam_beta1", t.adam.beta1},
            {"adam_beta2", t.adam.beta2},
            {"adam_epsilon", t.adam.epsilon},
            {"log_interval", t.log_interval},
            {"checkpoint_interval", t.checkpoint_interval}};
}

TrainConfig train_from(const json& j, const std::string& where) {
    TrainConfig t;
    Fields f(j, where);
    f.get("batch_size", t.batch_size);
    f.get("steps", t.steps);
    f.get("learning_rate", t.adam.learning_rate);
    f.get("adam_beta1", t.adam.beta1);
    f.get("adam_beta2", t.adam.beta2);
    f.get("adam_epsilon", t.adam.epsilon);
    f.get("log_interval", t.log_interval);
    f.get("checkpoint_interval", t.checkpoint_interval);
    f.finish();
    return t;
}

json codec_json(const CodecConfig& c) {
    json levels = json::array();
    for (const auto& l : c.levels)
        levels.push_back({{"name", l.name},
                          {"downsample", l.downsample},
                          {"codebook_size", l.codebook.size},
                          {"code_dim", l.codebook.dim},
                          {"decay", l.codebook.decay},
                          {"epsilon", l.codebook.epsilon}});
    return {{"image_size", c.image_size},
            {"channels", c.channels},
            {"hidden_units", c.hidden_units},
            {"residual_units", c.residual_units},
            {"residual_layers", c.residual_layers},
            {"encoder_filter_size", c.encoder_filter_size},
            {"upsampling_filter_size", c.upsampling_filter_size},
            {"beta", c.beta},
            {"codebook_update", c.codebook_update == CodebookUpdate::ema ? "ema" : "loss"},
            {"levels", levels}};
}

CodecConfig codec_from(const json& j, const std::string& where) {
    CodecConfig c;
    Fields f(j, where);
    f.get("image_size", c.image_size);
    f.get("channels", c.channels);
    f.get("hidden_units", c.hidden_units);
    f.get("residual_units", c.residual_units);
    f.get("residual_layers", c.residual_layers);
    f.get("encoder_filter_size", c.encoder_filter_size);
    f.get("upsampling_filter_size", c.upsampling_filter_size);
    f.get("beta", c.beta);
    std::string update = "ema";
    f.get("codebook_update", update);
    if (update == "ema")
        c.codebook_update = CodebookUpdate::ema;
    else if (update == "loss")
        c.codebook_update = CodebookUpdate::loss;
    else
        throw ConfigError(f.path("codebook_update") + ": expected \"ema\" or \"loss\", got \"" + update + "\"");
    if (!f.has("levels")) throw ConfigError(where + ": missing 'levels'");
    const json& levels = f.at("levels");
    if (!levels.is_array()) throw ConfigError(f.path("levels") + ": expected an array");
    for (std::size_t i = 0; i < levels.size(); ++i) {
        LevelConfig l;
        Fields lf(levels[i], f.path("levels") + "[" + std::to_string(i) + "]");
        lf.get("name", l.name);
        lf.get("downsample", l.downsample);
        lf.get("codebook_size", l.codebook.size);
        lf.get("code_dim", l.codebook.dim);
        lf.get("decay", l.codebook.decay);
        lf.get("epsilon", l.codebook.epsilon);
        lf.finish();
        c.levels.push_back(l);
    }
    f.finish();
    return c;
}

json prior_json(const PriorRunConfig& p) {
    const PriorConfig& m = p.model;
    return {{"height", m.height},
            {"width", m.width},
            {"vocabulary", m.vocabulary},
            {"hidden_units", m.hidden_units},
            {"residual_units", m.residual_units},
            {"layers", m.layers},
            {"attention_period", m.attention_period},
            {"attention_layers", m.attention_layers},
            {"attention_heads", m.attention_heads},
            {"filter_size", m.filter_size},
            {"dropout", m.dropout},
            {"attention_dropout", m.attention_dropout},
            {"output_stack_layers", m.output_stack_layers},
            {"conditioning_residual_blocks", m.conditioning_residual_blocks},
            {"condition_vocabulary", m.condition_vocabulary},
            {"condition_height", m.condition_height},
            {"condition_width", m.condition_width},
            {"classes", m.classes},
            {"train", train_json(p.train)}};
}

PriorRunConfig prior_from(const json& j, const std::string& level, const std::string& where) {
    PriorRunConfig p;
    PriorConfig& m = p.model;
    m.level = level;
    // Grid, vocabulary, conditioning and class fields default to "derive from the codec".
    m.height = m.width = m.vocabulary = m.classes = 0;
    Fields f(j, where);
    f.get("height", m.height);
    f.get("width", m.width);
    f.get("vocabulary", m.vocabulary);
    f.get("hidden_units", m.hidden_units);
    f.get("residual_units", m.residual_units);
    f.get("layers", m.layers);
    f.get("attention_period", m.attention_period);
    f.get("attention_layers", m.attention_layers);
    f.get("attention_heads", m.attention_heads);
    f.get("filter_size", m.filter_size);
    f.get("dropout", m.dropout);
    f.get("attention_dropout", m.attention_dropout);
    f.get("output_stack_layers", m.output_stack_layers);
    f.get("conditioning_residual_blocks", m.conditioning_residual_blocks);
    f.get("condition_vocabulary", m.condition_vocabulary);
    f.get("condition_height", m.condition_height);
    f.get("condition_width", m.condition_width);
    f.get("classes", m.classes);
    if (f.has("train")) p.train = train_from(f.at("train"), f.path("train"));
    f.finish();
    return p;
}

void derive(std::size_t& field, std::size_t expected, const std::string& level, const char* what) {
    if (field == 0)
        field = expected;
    else if (field != expected)
        throw ConfigError("prior '" + level + "': " + what + " " + std::to_string(field) + " does not match " +
                          std::to_string(expected) + " from the codec configuration");
}

}  // namespace

Dataset DataSource::load() const {
    if (synthetic) {
        std::vector<Label> labels;
        auto images = synthetic_images(*synthetic, &labels);
        return make_dataset(images, labels);
    }
    if (path.empty()) throw ConfigError("no dataset path configured");
    return ingest(path, labels);
}

void RunConfig::resolve() {
    codec.validate();
    for (const auto& [name, p] : priors) codec.level_index(name);
    const std::size_t n = codec.levels.size();
    for (std::size_t l = 0; l < n; ++l) {
        auto it = priors.find(codec.levels[l].name);
        if (it == priors.end()) continue;
        PriorConfig& m = it->second.model;
        const std::string& name = codec.levels[l].name;
        m.level = name;
        derive(m.height, codec.grid_size(l), name, "grid height");
        derive(m.width, codec.grid_size(l), name, "grid width");
        derive(m.vocabulary, codec.levels[l].codebook.size, name, "vocabulary");
        const bool above = l + 1 < n;
        derive(m.condition_vocabulary, above ? codec.levels[l + 1].codebook.size : 0, name, "condition vocabulary");
        derive(m.condition_height, above ? codec.grid_size(l + 1) : 0, name, "condition height");
        derive(m.condition_width, above ? codec.grid_size(l + 1) : 0, name, "condition width");
        derive(m.classes, classes, name, "class count");
    }
    classifier.channels = codec.channels;
    if (classes > 0) classifier.classes = classes;
}

void RunConfig::validate() const {
    codec.validate();
    for (const auto& [name, p] : priors) {
        const std::size_t l = codec.level_index(name);
        p.model.validate();
        if (p.model.height != codec.grid_size(l) || p.model.vocabulary != codec.levels[l].codebook.size)
            throw ConfigError("prior '" + name + "' does not match the codec grid or vocabulary");
        if ((l + 1 < codec.levels.size()) != p.model.conditioned())
            throw ConfigError("prior '" + name + "': only levels below the top are conditioned");
        if (p.model.classes != classes) throw ConfigError("prior '" + name + "': class count mismatch");
        if (p.train.batch_size == 0) throw ConfigError("prior '" + name + "': batch size must be positive");
    }
    if (stage1.batch_size == 0) throw ConfigError("stage1.batch_size must be positive");
    if (!(data.validation_fraction >= 0 && data.validation_fraction < 1))
        throw ConfigError("data.validation_fraction must lie in [0,1)");
    if (!(sampling.temperature > 0)) throw ConfigError("sampling.temperature must be positive");
    if (!(sampling.keep_fraction > 0 && sampling.keep_fraction <= 1))
        throw ConfigError("sampling.keep_fraction must lie in (0,1]");
    if (sampling.class_label >= 0 && std::size_t(sampling.class_label) >= std::max<std::size_t>(classes, 1))
        throw ConfigError("sampling.class_label out of range");
}

const PriorRunConfig& RunConfig::prior(const std::string& level) const {
    auto it = priors.find(level);
    if (it == priors.end()) throw ConfigError("no prior configured for level '" + level + "'");
    return it->second;
}

std::string RunConfig::to_json() const {
    json j;
    j["seed"] = seed;
    j["output_dir"] = output_dir;
    j["classes"] = classes;
    j["data"] = {{"train", source_json(data.train)},
                 {"validation", source_json(data.validation)},
                 {"validation_fraction", data.validation_fraction}};
    j["codec"] = codec_json(codec);
    j["stage1"] = train_json(stage1);
    json pj = json::object();
    for (const auto& level : codec.levels)
        if (auto it = priors.find(level.name); it != priors.end()) pj[level.name] = prior_json(it->second);
    j["priors"] = pj;
    j["classifier"] = {{"width", classifier.width},
                       {"steps", classifier.steps},
                       {"batch_size", classifier.batch_size},
                       {"learning_rate", classifier.learning_rate},
                       {"seed", classifier.seed}};
    j["sampling"] = {{"n", sampling.n},
                     {"temperature", sampling.temperature},
                     {"keep_fraction", sampling.keep_fraction},
                     {"class_label", sampling.class_label}};
    return j.dump(2) + "\n";
}

RunConfig RunConfig::from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    RunConfig c;
    c.priors.clear();
    Fields f(j, "config");
    f.get("seed", c.seed);
    f.get("output_dir", c.output_dir);
    f.get("classes", c.classes);
    if (f.has("data")) {
        Fields d(f.at("data"), "config.data");
        if (d.has("train")) c.data.train = source_from(d.at("train"), "config.data.train");
        if (d.has("validation")) c.data.validation = source_from(d.at("validation"), "config.data.validation");
        d.get("validation_fraction", c.data.validation_fraction);
        d.finish();
    }
    if (f.has("codec")) c.codec = codec_from(f.at("codec"), "config.codec");
    if (f.has("stage1")) c.stage1 = train_from(f.at("stage1"), "config.stage1");
    if (f.has("priors")) {
        const json& pj = f.at("priors");
        if (!pj.is_object()) throw ConfigError("config.priors: expected an object keyed by level");
        for (const auto& [level, value] : pj.items())
            c.priors[level] = prior_from(value, level, "config.priors." + level);
    }
    if (f.has("classifier")) {
        Fields cf(f.at("classifier"), "config.classifier");
        cf.get("width", c.classifier.width);
        cf.get("steps", c.classifier.steps);
        cf.get("batch_size", c.classifier.batch_size);
        cf.get("learning_rate", c.classifier.learning_rate);
        cf.get("seed", c.classifier.seed);
        cf.finish();
    }
    if (f.has("sampling")) {
        Fields sf(f.at("sampling"), "config.sampling");
        sf.get("n", c.sampling.n);
        sf.get("temperature", c.sampling.temperature);
        sf.get("keep_fraction", c.sampling.keep_fraction);
        sf.get("class_label", c.sampling.class_label);
        sf.finish();
    }
    f.finish();
    c.resolve();
    c.validate();
    return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return from_json(ss.str());
}

namespace {

PriorRunConfig prior_run(PriorConfig model, std::size_t batch, std::size_t steps, double lr) {
    PriorRunConfig p;
    p.model = std::move(model);
    p.train.batch_size = batch;
    p.train.steps = steps;
    p.train.adam.learning_rate = lr;
    return p;
}

void finish(RunConfig& c) {
    for (auto& [name, p] : c.priors) p.model.classes = c.classes;
    c.resolve();
    c.validate();
}

}  // namespace

RunConfig RunConfig::desk() {
    RunConfig c;
    c.output_dir = "runs/desk";
    c.classes = 8;
    c.data.train.synthetic = SyntheticSpec{256, 32, 1, 8, 1};
    c.codec = CodecConfig::desk();
    c.stage1.batch_size = 32;
    c.stage1.steps = 5000;
    c.stage1.checkpoint_interval = 1000;
    c.priors["top"] = prior_run(PriorConfig::desk_top(), 32, 3000, 3e-4);
    c.priors["bottom"] = prior_run(PriorConfig::desk_bottom(), 32, 3000, 3e-4);
    finish(c);
    return c;
}

RunConfig RunConfig::overfit() {
    RunConfig c;
    c.output_dir = "runs/overfit";
    c.classes = 8;
    c.data.train.synthetic = SyntheticSpec{8, 32, 1, 8, 1};
    c.data.validation_fraction = 0;
    c.codec = CodecConfig::desk();
    c.stage1.batch_size = 8;
    c.stage1.steps = 2000;
    c.stage1.adam.learning_rate = 1e-3;
    c.stage1.log_interval = 100;
    c.stage1.checkpoint_interval = 0;
    PriorConfig top = PriorConfig::desk_top();
    top.dropout = top.attention_dropout = 0;
    PriorConfig bottom = PriorConfig::desk_bottom();
    bottom.dropout = 0;
    c.priors["top"] = prior_run(top, 8, 300, 1e-3);
    c.priors["bottom"] = prior_run(bottom, 8, 200, 2e-3);
    for (auto& [name, p] : c.priors) {
        p.train.log_interval = 50;
        p.train.checkpoint_interval = 0;
    }
    c.sampling.n = 8;
    c.sampling.temperature = 0.1;
    finish(c);
    return c;
}

RunConfig RunConfig::generalization() {
    RunConfig c = overfit();
    c.output_dir = "runs/generalization";
    c.data.train.synthetic = SyntheticSpec{64, 32, 1, 8, 1};
    c.data.validation.synthetic = SyntheticSpec{16, 32, 1, 8, 2};
    c.stage1.batch_size = 16;
    c.stage1.steps = 1500;
    for (auto& [name, p] : c.priors) {
        p.train.batch_size = 16;
        p.train.steps = 100;
    }
    finish(c);
    return c;
}

RunConfig RunConfig::paper_imagenet() {
    RunConfig c;
    c.output_dir = "runs/imagenet";
    c.classes = 1000;
    c.data.train.path = "imagenet/train.vq2i";
    c.data.train.labels = "imagenet/train.labels";
    c.codec = CodecConfig::paper_imagenet();
    c.stage1.batch_size = 128;
    c.stage1.steps = 2207444;
    c.stage1.log_interval = 1000;
    c.stage1.checkpoint_interval = 50000;
    c.priors["top"] = prior_run(PriorConfig::paper_imagenet_top(), 1024, 1600000, 3e-4);
    c.priors["bottom"] = prior_run(PriorConfig::paper_imagenet_bottom(), 512, 754000, 3e-4);
    c.classifier.channels = 3;
    finish(c);
    return c;
}

RunConfig RunConfig::preset(const std::string& name) {
    if (name == "desk") return desk();
    if (name == "overfit") return overfit();
    if (name == "generalization") return generalization();
    if (name == "paper-imagenet") return paper_imagenet();
    throw ConfigError("unknown preset '" + name + "' (desk, overfit, generalization, paper-imagenet)");
}

}  // namespace hvq
