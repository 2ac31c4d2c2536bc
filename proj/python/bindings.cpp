#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "hvq/gradsuite.hpp"
#include "hvq/pipeline.hpp"

namespace py = pybind11;
using namespace hvq;
namespace fs = std::filesystem;

namespace {

using Array = py::array_t<real, py::array::c_style | py::array::forcecast>;
using CodeArray = py::array_t<Code, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a) {
    Shape shape(a.shape(), a.shape() + a.ndim());
    return Tensor::from(shape, std::vector<real>(a.data(), a.data() + a.size()));
}

py::array_t<real> to_array(const Tensor& t) {
    std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
    py::array_t<real> out(shape);
    std::copy(t.data().begin(), t.data().end(), out.mutable_data());
    return out;
}

py::array_t<Code> grid_to_array(const CodeGrid& g) {
    py::array_t<Code> out({py::ssize_t(g.batch), py::ssize_t(g.height), py::ssize_t(g.width)});
    std::copy(g.indices.begin(), g.indices.end(), out.mutable_data());
    return out;
}

CodeGrid array_to_grid(const CodeArray& a, std::size_t vocabulary, const std::string& source) {
    if (a.ndim() != 3) throw DimensionError("code arrays must be [batch, height, width]");
    CodeGrid g{std::size_t(a.shape(0)), std::size_t(a.shape(1)), std::size_t(a.shape(2)), vocabulary,
               std::vector<Code>(a.data(), a.data() + a.size()), source};
    g.validate();
    return g;
}

std::vector<CodeGrid> arrays_to_grids(const HierarchicalCodec& codec, const std::vector<CodeArray>& codes) {
    if (codes.size() != codec.levels()) throw DimensionError("expected one code array per level, bottom first");
    std::vector<CodeGrid> grids;
    for (std::size_t l = 0; l < codes.size(); ++l)
        grids.push_back(array_to_grid(codes[l], codec.config().levels[l].codebook.size, codec.config().levels[l].name));
    return grids;
}

std::vector<Label> labels_of(const std::optional<std::vector<Label>>& labels) {
    return labels ? *labels : std::vector<Label>{};
}

struct LoadedCodec {
    RunConfig config;
    HierarchicalCodec codec;
};

struct LoadedPrior {
    RunConfig config;
    PixelCnnPrior prior;
};

DataSplit data_for(const fs::path& dir, RunConfig& cfg) {
    cfg.output_dir = dir.string();
    return load_data(cfg);
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Hierarchical VQ-VAE with autoregressive priors";

    // Translators are tried newest first, so the base class goes first.
    py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
    py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
    py::register_exception<DimensionError>(m, "DimensionError", PyExc_ValueError);
    py::register_exception<FormatError>(m, "FormatError", PyExc_IOError);

    m.def("preset", [](const std::string& name) { return RunConfig::preset(name).to_json(); }, py::arg("name"),
          "Built-in run configuration as JSON text.");

    m.def(
        "synthetic_images",
        [](std::size_t count, std::size_t size, std::size_t channels, std::size_t families, std::uint64_t seed) {
            std::vector<Label> labels;
            const auto images = synthetic_images({count, size, channels, families, seed}, &labels);
            return py::make_tuple(to_array(make_dataset(images, labels).images), labels);
        },
        py::arg("count") = 8, py::arg("size") = 32, py::arg("channels") = 1, py::arg("families") = 8,
        py::arg("seed") = 0, "(images [N,C,H,W] in [-0.5, 0.5], labels)");

    m.def(
        "quantize",
        [](const Array& z, const Array& prototypes) {
            if (prototypes.ndim() != 2) throw DimensionError("prototypes must be [K, D]");
            const std::size_t k = std::size_t(prototypes.shape(0)), d = std::size_t(prototypes.shape(1));
            std::vector<real> p(prototypes.data(), prototypes.data() + prototypes.size());
            Codebook cb({k, d, 0.99, 1e-5}, p, std::vector<real>(k, 1), p);
            return grid_to_array(quantize(to_tensor(z), cb).codes);
        },
        py::arg("z"), py::arg("prototypes"), "Nearest-prototype indices [B,H,W] for z[B,D,H,W].");

    py::class_<LoadedCodec>(m, "Codec")
        .def_property_readonly("config", [](const LoadedCodec& c) { return c.config.to_json(); })
        .def_property_readonly("levels",
                               [](const LoadedCodec& c) {
                                   std::vector<std::string> names;
                                   for (const auto& l : c.codec.config().levels) names.push_back(l.name);
                                   return names;
                               })
        .def(
            "encode",
            [](const LoadedCodec& c, const Array& images) {
                Tape tape(Tape::Mode::inference);
                const auto lat = c.codec.encode(tape, to_tensor(images));
                std::vector<py::array_t<Code>> out;
                for (const auto& g : lat.codes) out.push_back(grid_to_array(g));
                return out;
            },
            py::arg("images"), "Code arrays, bottom level first.")
        .def(
            "decode",
            [](const LoadedCodec& c, const std::vector<CodeArray>& codes, std::optional<std::vector<bool>> active) {
                Tape tape(Tape::Mode::inference);
                return to_array(c.codec.decode_codes(tape, arrays_to_grids(c.codec, codes), active.value_or(std::vector<bool>{})));
            },
            py::arg("codes"), py::arg("active") = py::none(),
            "Images from code arrays; `active` zeroes the levels marked False.")
        .def(
            "prototypes", [](const LoadedCodec& c, std::size_t level) {
                return to_array(c.codec.codebooks().at(level).prototypes());
            },
            py::arg("level"));

    py::class_<LoadedPrior>(m, "Prior")
        .def_property_readonly("config", [](const LoadedPrior& p) { return p.config.to_json(); })
        .def_property_readonly("level", [](const LoadedPrior& p) { return p.prior.config().level; })
        .def(
            "nll",
            [](const LoadedPrior& p, const CodeArray& codes, std::optional<CodeArray> condition,
               std::optional<std::vector<Label>> labels) {
                const auto& pc = p.prior.config();
                const CodeGrid g = array_to_grid(codes, pc.vocabulary, pc.level);
                std::optional<CodeGrid> cond;
                if (condition) cond = array_to_grid(*condition, pc.condition_vocabulary, "");
                const auto lab = labels_of(labels);
                Tape tape(Tape::Mode::inference);
                return double(p.prior.nll(tape, PriorBatch{&g, lab, cond ? &*cond : nullptr}).item());
            },
            py::arg("codes"), py::arg("condition") = py::none(), py::arg("labels") = py::none(),
            "Mean NLL in nats per position.")
        .def(
            "sample",
            [](const LoadedPrior& p, std::size_t n, double temperature, std::uint64_t seed,
               std::optional<CodeArray> condition, std::optional<std::vector<Label>> labels) {
                std::optional<CodeGrid> cond;
                if (condition) cond = array_to_grid(*condition, p.prior.config().condition_vocabulary, "");
                const auto lab = labels_of(labels);
                Rng rng(seed);
                return grid_to_array(ancestral_sample(p.prior, n, lab, cond ? &*cond : nullptr, temperature, rng));
            },
            py::arg("n"), py::arg("temperature") = 1.0, py::arg("seed") = 0, py::arg("condition") = py::none(),
            py::arg("labels") = py::none());

    m.def(
        "load_codec",
        [](const fs::path& path) {
            auto [cfg, codec] = hvq::load_codec(path);
            return LoadedCodec{std::move(cfg), std::move(codec)};
        },
        py::arg("path"));
    m.def(
        "load_prior",
        [](const fs::path& path) {
            auto [cfg, prior] = hvq::load_prior(path);
            return LoadedPrior{std::move(cfg), std::move(prior)};
        },
        py::arg("path"));

    m.def(
        "run_stage1",
        [](const std::string& config, const fs::path& dir) {
            RunConfig cfg = RunConfig::from_json(config);
            cfg.output_dir = dir.string();
            py::gil_scoped_release release;
            const auto r = hvq::run_stage1(cfg, dir);
            return std::make_pair(r.steps, r.train_mse);
        },
        py::arg("config"), py::arg("dir"), "Trains the codec into `dir`; returns (steps, train MSE).");

    m.def(
        "extract_codes",
        [](const fs::path& dir) {
            auto [cfg, codec] = hvq::load_codec(RunPaths(dir).codec());
            const DataSplit split = data_for(dir, cfg);
            const RunPaths paths(dir);
            write_codes(paths.train_codes(), hvq::extract_codes(codec, split.train));
            if (split.validation.size() > 0)
                write_codes(paths.validation_codes(), hvq::extract_codes(codec, split.validation));
            return std::make_pair(split.train.size(), split.validation.size());
        },
        py::arg("dir"), "Writes the code files of a trained run; returns (train, validation) counts.");

    m.def(
        "run_stage2",
        [](const std::string& level, const fs::path& dir, std::optional<std::string> config) {
            auto [cfg, codec] = hvq::load_codec(RunPaths(dir).codec());
            if (config) {
                RunConfig given = RunConfig::from_json(*config);
                given.codec = cfg.codec;
                given.resolve();
                given.validate();
                cfg = given;
            }
            const DataSplit split = data_for(dir, cfg);
            py::gil_scoped_release release;
            const CodeDataset tr = hvq::extract_codes(codec, split.train);
            std::optional<CodeDataset> va;
            if (split.validation.size() > 0) va = hvq::extract_codes(codec, split.validation);
            return hvq::run_stage2(cfg, level, tr, va ? &*va : nullptr, dir).train_nll;
        },
        py::arg("level"), py::arg("dir"), py::arg("config") = py::none(),
        "Trains one prior of a run; returns the training NLL in nats per position.");

    m.def(
        "generate",
        [](const fs::path& dir, std::size_t n, double temperature, std::uint64_t seed, Label class_label) {
            auto [cfg, codec] = hvq::load_codec(RunPaths(dir).codec());
            std::vector<PixelCnnPrior> priors;
            for (const auto& l : cfg.codec.levels) priors.push_back(hvq::load_prior(RunPaths(dir).prior(l.name)).second);
            std::vector<const PixelCnnPrior*> ptrs;
            for (const auto& p : priors) ptrs.push_back(&p);
            GenerateOptions o{n, temperature, 1.0, class_label, seed};
            const Generated g = hvq::generate(codec, ptrs, cfg.classes, nullptr, o);
            std::vector<py::array_t<Code>> codes;
            for (const auto& grid : g.codes.levels) codes.push_back(grid_to_array(grid));
            return py::make_tuple(to_array(g.images), codes);
        },
        py::arg("dir"), py::arg("n") = 8, py::arg("temperature") = 1.0, py::arg("seed") = 0,
        py::arg("class_label") = -1, "(images, codes bottom first) sampled from a fully trained run.");

    m.def(
        "evaluate",
        [](const fs::path& dir) {
            auto [cfg, codec] = hvq::load_codec(RunPaths(dir).codec());
            const DataSplit split = data_for(dir, cfg);
            std::vector<PixelCnnPrior> priors;
            std::vector<std::string> names;
            for (const auto& l : cfg.codec.levels)
                if (fs::exists(RunPaths(dir).prior(l.name))) {
                    priors.push_back(hvq::load_prior(RunPaths(dir).prior(l.name)).second);
                    names.push_back(l.name);
                }
            std::map<std::string, const PixelCnnPrior*> by_level;
            for (std::size_t i = 0; i < priors.size(); ++i) by_level[names[i]] = &priors[i];
            return hvq::evaluate(codec, by_level, split.train, split.validation).to_json();
        },
        py::arg("dir"), "Evaluation report of a run as JSON text.");

    m.def(
        "gradient_suite",
        [](std::uint64_t seed) {
            std::vector<py::tuple> out;
            for (const auto& e : hvq::gradient_suite(seed))
                out.push_back(py::make_tuple(e.name, e.report.passed, e.report.max_rel_error, e.report.checked));
            return out;
        },
        py::arg("seed") = 0, "[(name, passed, max relative error, elements checked)]");
}
