#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "hvq/binary.hpp"
#include "hvq/codec.hpp"
#include "hvq/config.hpp"
#include "hvq/nn.hpp"
#include "hvq/prior.hpp"
#include "hvq/rejection.hpp"
#include "hvq/rng.hpp"

namespace hvq {

/// Versioned container of named binary sections.
///
/// Layout: "HVQC", u32 version, u64 unix timestamp, u32 section count, then
/// per section a length-prefixed name, a u64 payload length and the payload.
/// The timestamp sits at a fixed offset (8..16) so that everything else is a
/// pure function of the saved state.
class Checkpoint {
public:
    static constexpr std::uint32_t kVersion = 1;
    static constexpr std::size_t kTimestampOffset = 8;

    void put(const std::string& name, std::vector<std::uint8_t> payload);
    bool has(const std::string& name) const;
    const std::vector<std::uint8_t>& get(const std::string& name) const;
    const std::vector<std::pair<std::string, std::vector<std::uint8_t>>>& sections() const { return sections_; }

    std::uint64_t timestamp = 0;

    std::vector<std::uint8_t> serialize() const;
    static Checkpoint parse(const std::vector<std::uint8_t>& bytes, const std::string& what = "checkpoint");

    // save() stamps the current time.
    void save(const std::filesystem::path& path);
    static Checkpoint load(const std::filesystem::path& path);

private:
    std::vector<std::pair<std::string, std::vector<std::uint8_t>>> sections_;
};

void write_params(bin::Writer& w, const ParameterSet& params);
// Names and shapes must match `params` exactly.
void read_params(bin::Reader& r, ParameterSet& params);

void write_codebook(bin::Writer& w, const Codebook& codebook);
Codebook read_codebook(bin::Reader& r);

std::vector<std::uint8_t> encode_adam(const Adam& adam);
Adam decode_adam(const std::vector<std::uint8_t>& bytes);

std::vector<std::uint8_t> encode_text(const std::string& text);
std::string decode_text(const std::vector<std::uint8_t>& bytes);

std::vector<std::uint8_t> encode_u64(std::uint64_t v);
std::uint64_t decode_u64(const std::vector<std::uint8_t>& bytes);

// Parameters and codebooks; the architecture comes from the config section.
std::vector<std::uint8_t> encode_codec(const HierarchicalCodec& codec);
HierarchicalCodec decode_codec(const CodecConfig& config, const std::vector<std::uint8_t>& bytes);

std::vector<std::uint8_t> encode_prior(const PixelCnnPrior& prior);
PixelCnnPrior decode_prior(const PriorConfig& config, const std::vector<std::uint8_t>& bytes);

/// Classifier checkpoint: sections "classifier.config" and "classifier".
void save_classifier(const std::filesystem::path& path, const ToyClassifier& clf);
ToyClassifier load_classifier(const std::filesystem::path& path);

// Loads the codec (config + weights) from a stage-1 checkpoint.
std::pair<RunConfig, HierarchicalCodec> load_codec(const std::filesystem::path& path);
// Loads one level's prior from a stage-2 checkpoint.
std::pair<RunConfig, PixelCnnPrior> load_prior(const std::filesystem::path& path);

}  // namespace hvq
