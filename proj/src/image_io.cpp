#include "hvq/image_io.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "hvq/binary.hpp"

namespace hvq {

namespace fs = std::filesystem;

namespace {

// Reads the next header token, skipping whitespace and '#' comments.
std::string pnm_token(const std::vector<std::uint8_t>& buf, std::size_t& pos, const std::string& name) {
    while (pos < buf.size()) {
        if (buf[pos] == '#') {
            while (pos < buf.size() && buf[pos] != '\n') ++pos;
        } else if (std::isspace(buf[pos])) {
            ++pos;
        } else {
            break;
        }
    }
    std::string tok;
    while (pos < buf.size() && !std::isspace(buf[pos]) && buf[pos] != '#') tok += char(buf[pos++]);
    if (tok.empty()) throw FormatError(name + ": truncated header");
    return tok;
}

std::size_t pnm_number(const std::string& tok, const std::string& name) {
    if (tok.empty() || !std::all_of(tok.begin(), tok.end(), [](char c) { return std::isdigit(c); }) ||
        tok.size() > 9)
        throw FormatError(name + ": bad header field '" + tok + "'");
    return std::stoul(tok);
}

}  // namespace

Image read_pnm(const fs::path& path) {
    const auto buf = bin::read_file(path);
    const std::string name = path.string();
    std::size_t pos = 0;
    const std::string magic = pnm_token(buf, pos, name);
    Image img;
    if (magic == "P5")
        img.channels = 1;
    else if (magic == "P6")
        img.channels = 3;
    else
        throw FormatError(name + ": not a binary PGM/PPM file");
    img.width = pnm_number(pnm_token(buf, pos, name), name);
    img.height = pnm_number(pnm_token(buf, pos, name), name);
    const std::size_t maxval = pnm_number(pnm_token(buf, pos, name), name);
    if (maxval != 255) throw FormatError(name + ": only maxval 255 is supported, got " + std::to_string(maxval));
    if (img.width == 0 || img.height == 0) throw FormatError(name + ": empty image");
    if (pos >= buf.size() || !std::isspace(buf[pos])) throw FormatError(name + ": truncated header");
    ++pos;
    const std::size_t n = img.width * img.height * img.channels;
    if (buf.size() - pos < n) throw FormatError(name + ": truncated pixel data");
    img.pixels.assign(buf.begin() + long(pos), buf.begin() + long(pos + n));
    return img;
}

void write_pnm(const fs::path& path, const Image& image) {
    if (image.channels != 1 && image.channels != 3)
        throw FormatError("write_pnm: only 1 or 3 channels can be written");
    std::string header = (image.channels == 1 ? "P5\n" : "P6\n") + std::to_string(image.width) + " " +
                         std::to_string(image.height) + "\n255\n";
    std::vector<std::uint8_t> out(header.begin(), header.end());
    out.insert(out.end(), image.pixels.begin(), image.pixels.end());
    bin::write_file(path, out);
}

void append_normalized(const Image& image, std::vector<real>& out) {
    const std::size_t hw = image.height * image.width;
    const std::size_t base = out.size();
    out.resize(base + hw * image.channels);
    for (std::size_t p = 0; p < hw; ++p)
        for (std::size_t c = 0; c < image.channels; ++c)
            out[base + c * hw + p] = real(double(image.pixels[p * image.channels + c]) / 255.0 - 0.5);
}

Image to_image(const Tensor& batch, std::size_t index) {
    if (batch.rank() != 4 || index >= batch.dim(0)) throw DimensionError("to_image: expected [N,C,H,W]");
    Image img{batch.dim(2), batch.dim(3), batch.dim(1), {}};
    const std::size_t hw = img.height * img.width;
    img.pixels.resize(hw * img.channels);
    auto d = batch.data().subspan(index * hw * img.channels, hw * img.channels);
    for (std::size_t p = 0; p < hw; ++p)
        for (std::size_t c = 0; c < img.channels; ++c) {
            const double v = std::round((double(d[c * hw + p]) + 0.5) * 255.0);
            img.pixels[p * img.channels + c] = std::uint8_t(std::clamp(v, 0.0, 255.0));
        }
    return img;
}

std::vector<Image> read_raw(const fs::path& path) {
    const auto buf = bin::read_file(path);
    bin::Reader r(buf, path.string());
    const auto* magic = r.bytes(4);
    if (std::memcmp(magic, "VQ2I", 4) != 0) throw FormatError(path.string() + ": bad magic, expected VQ2I");
    const std::size_t count = r.u32(), h = r.u32(), w = r.u32(), c = r.u32();
    if (count > 0 && (h == 0 || w == 0 || c == 0)) throw FormatError(path.string() + ": zero image extent");
    const std::size_t n = h * w * c;
    if (count > 0 && r.remaining() != count * n)
        throw FormatError(path.string() + ": expected " + std::to_string(count * n) + " pixel bytes, found " +
                          std::to_string(r.remaining()));
    std::vector<Image> images;
    for (std::size_t i = 0; i < count; ++i) {
        const auto* p = r.bytes(n);
        images.push_back({h, w, c, std::vector<std::uint8_t>(p, p + n)});
    }
    return images;
}

void write_raw(const fs::path& path, const std::vector<Image>& images) {
    bin::Writer w;
    w.bytes("VQ2I", 4);
    const Image first = images.empty() ? Image{} : images.front();
    w.u32(std::uint32_t(images.size()));
    w.u32(std::uint32_t(first.height));
    w.u32(std::uint32_t(first.width));
    w.u32(std::uint32_t(first.channels));
    for (const auto& img : images) {
        if (img.height != first.height || img.width != first.width || img.channels != first.channels)
            throw FormatError("write_raw: images differ in size");
        w.bytes(img.pixels.data(), img.pixels.size());
    }
    bin::write_file(path, w.buffer());
}

std::vector<Label> read_labels(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw FormatError("cannot open labels file " + path.string());
    std::vector<Label> labels;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        std::istringstream is(line);
        long v;
        std::string rest;
        if (!(is >> v) || (is >> rest) || v < 0 || v > 1'000'000)
            throw FormatError(path.string() + ":" + std::to_string(lineno) + ": expected one non-negative integer");
        labels.push_back(Label(v));
    }
    return labels;
}

void write_labels(const fs::path& path, const std::vector<Label>& labels) {
    std::string s;
    for (Label l : labels) s += std::to_string(l) + "\n";
    bin::write_text(path, s);
}

Dataset Dataset::subset(const std::vector<std::size_t>& rows) const {
    Dataset out;
    if (rows.empty()) return out;
    Shape shape = images.shape();
    const std::size_t n = images.numel() / shape[0];
    shape[0] = rows.size();
    std::vector<real> data;
    data.reserve(rows.size() * n);
    for (std::size_t r : rows) {
        if (r >= size()) throw IndexError("Dataset::subset: row out of range");
        auto src = images.data().subspan(r * n, n);
        data.insert(data.end(), src.begin(), src.end());
        if (labelled()) out.labels.push_back(labels[r]);
    }
    out.images = Tensor::from(std::move(shape), std::move(data));
    return out;
}

Dataset make_dataset(const std::vector<Image>& images, std::vector<Label> labels) {
    Dataset ds;
    if (!labels.empty() && labels.size() != images.size())
        throw FormatError("dataset has " + std::to_string(images.size()) + " images but " +
                          std::to_string(labels.size()) + " labels");
    ds.labels = std::move(labels);
    if (images.empty()) return ds;
    const Image& first = images.front();
    std::vector<real> data;
    data.reserve(images.size() * first.pixels.size());
    for (const auto& img : images) {
        if (img.height != first.height || img.width != first.width || img.channels != first.channels)
            throw FormatError("dataset images differ in size: " + std::to_string(first.height) + "x" +
                              std::to_string(first.width) + "x" + std::to_string(first.channels) + " vs " +
                              std::to_string(img.height) + "x" + std::to_string(img.width) + "x" +
                              std::to_string(img.channels));
        append_normalized(img, data);
    }
    ds.images = Tensor::from({images.size(), first.channels, first.height, first.width}, std::move(data));
    return ds;
}

Dataset ingest(const fs::path& source, const fs::path& labels) {
    std::vector<Image> images;
    if (fs::is_directory(source)) {
        std::vector<fs::path> files;
        for (const auto& entry : fs::directory_iterator(source)) {
            const auto ext = entry.path().extension().string();
            if (entry.is_regular_file() && (ext == ".pgm" || ext == ".ppm")) files.push_back(entry.path());
        }
        std::sort(files.begin(), files.end(),
                  [](const fs::path& a, const fs::path& b) { return a.filename().string() < b.filename().string(); });
        for (const auto& f : files) images.push_back(read_pnm(f));
    } else if (fs::exists(source)) {
        images = read_raw(source);
    } else {
        throw FormatError("dataset source not found: " + source.string());
    }
    return make_dataset(images, labels.empty() ? std::vector<Label>{} : read_labels(labels));
}

namespace {

double pattern(std::size_t family, double y, double x, const double* p) {
    constexpr double pi = std::numbers::pi;
    switch (family % 8) {
        case 0: {  // checkerboard
            const long cy = long(std::floor((y + p[1]) / p[0])), cx = long(std::floor((x + p[2]) / p[0]));
            return ((cy + cx) % 2 == 0) ? 0.15 : 0.85;
        }
        case 1:  // linear gradient
            return 0.5 + 0.45 * (std::cos(p[3]) * (y - 0.5) + std::sin(p[3]) * (x - 0.5)) * 1.4;
        case 2:  // horizontal stripes
            return std::fmod(y + p[1], p[0]) < p[0] / 2 ? 0.2 : 0.8;
        case 3:  // vertical stripes
            return std::fmod(x + p[2], p[0]) < p[0] / 2 ? 0.25 : 0.75;
        case 4:  // diagonal stripes
            return 0.5 + 0.35 * std::sin(2 * pi * (x + y) / p[0] + p[3]);
        case 5: {  // rings
            const double r = std::hypot(y - p[4], x - p[5]);
            return 0.5 + 0.35 * std::cos(2 * pi * r / p[0]);
        }
        case 6:  // box
            return (std::abs(y - p[4]) < 0.2 && std::abs(x - p[5]) < 0.25) ? 0.9 : 0.1;
        default: {  // radial blob
            const double r2 = (y - p[4]) * (y - p[4]) + (x - p[5]) * (x - p[5]);
            return 0.1 + 0.8 * std::exp(-r2 / 0.08);
        }
    }
}

}  // namespace

std::vector<Image> synthetic_images(const SyntheticSpec& spec, std::vector<Label>* labels) {
    if (spec.size == 0 || spec.channels == 0 || spec.families == 0)
        throw ConfigError("synthetic images need a positive size, channel count and family count");
    Rng rng(spec.seed);
    std::vector<Image> images;
    if (labels) labels->clear();
    for (std::size_t i = 0; i < spec.count; ++i) {
        const std::size_t family = i % spec.families;
        // period (in unit coordinates), two phases, an angle, a centre
        const double period = (2.0 + double(rng.uniform_int(7))) / double(spec.size) * 2.0;
        const double p[6] = {period,
                             rng.uniform() * period,
                             rng.uniform() * period,
                             rng.uniform() * 2 * std::numbers::pi,
                             0.3 + 0.4 * rng.uniform(),
                             0.3 + 0.4 * rng.uniform()};
        std::vector<double> tint(spec.channels, 1.0);
        if (spec.channels > 1)
            for (auto& t : tint) t = 0.5 + 0.5 * rng.uniform();
        Image img{spec.size, spec.size, spec.channels, {}};
        img.pixels.reserve(spec.size * spec.size * spec.channels);
        for (std::size_t h = 0; h < spec.size; ++h)
            for (std::size_t w = 0; w < spec.size; ++w) {
                const double v = pattern(family, (double(h) + 0.5) / double(spec.size),
                                         (double(w) + 0.5) / double(spec.size), p);
                for (std::size_t c = 0; c < spec.channels; ++c)
                    img.pixels.push_back(std::uint8_t(std::clamp(std::round(v * tint[c] * 255.0), 0.0, 255.0)));
            }
        images.push_back(std::move(img));
        if (labels) labels->push_back(Label(family));
    }
    return images;
}

}  // namespace hvq
