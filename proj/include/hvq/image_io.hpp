#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "hvq/prior.hpp"
#include "hvq/tensor.hpp"

namespace hvq {

/// 8-bit image stored HWC, as read from or written to disk.
struct Image {
    std::size_t height = 0;
    std::size_t width = 0;
    std::size_t channels = 0;  // 1 (PGM) or 3 (PPM)
    std::vector<std::uint8_t> pixels;

    bool operator==(const Image&) const = default;
};

Image read_pnm(const std::filesystem::path& path);
void write_pnm(const std::filesystem::path& path, const Image& image);

// x / 255 - 0.5, as a [C,H,W] block appended to `out`.
void append_normalized(const Image& image, std::vector<real>& out);
// Inverse of the normalisation, rounding and clamping to [0,255].
Image to_image(const Tensor& batch, std::size_t index);

/// Raw dataset file: "VQ2I", u32 count, u32 H, u32 W, u32 C (little endian),
/// then count*H*W*C bytes of HWC pixels.
std::vector<Image> read_raw(const std::filesystem::path& path);
void write_raw(const std::filesystem::path& path, const std::vector<Image>& images);

std::vector<Label> read_labels(const std::filesystem::path& path);
void write_labels(const std::filesystem::path& path, const std::vector<Label>& labels);

struct Dataset {
    Tensor images;  // [N,C,H,W] in [-0.5, 0.5]; undefined when empty
    std::vector<Label> labels;  // empty or one per image

    std::size_t size() const { return images.defined() ? images.dim(0) : 0; }
    bool labelled() const { return !labels.empty(); }
    Dataset subset(const std::vector<std::size_t>& rows) const;
};

Dataset make_dataset(const std::vector<Image>& images, std::vector<Label> labels);

/// Loads a directory of .pgm/.ppm files (sorted by file name) or a raw file.
/// `labels` may be empty.
Dataset ingest(const std::filesystem::path& source, const std::filesystem::path& labels = {});

/// Seeded checkerboards, stripes, gradients and rings. Image i is drawn from
/// pattern family i % families and labelled with its family.
struct SyntheticSpec {
    std::size_t count = 8;
    std::size_t size = 32;
    std::size_t channels = 1;
    std::size_t families = 8;
    std::uint64_t seed = 0;
};

std::vector<Image> synthetic_images(const SyntheticSpec& spec, std::vector<Label>* labels = nullptr);

}  // namespace hvq
