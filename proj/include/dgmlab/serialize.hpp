#pragma once

#include <optional>
#include <string>

#include "dgmlab/models.hpp"
#include "dgmlab/toydata.hpp"

namespace dgmlab {

// DGML container: magic "DGML", u16 version, u16 kind, u32 section count,
// then sections of (4-byte tag, u64 payload size, payload). Tensors are
// little-endian f64, row-major, preceded by u32 rank and u32 dims. Writes
// are byte-deterministic; save -> load -> save reproduces the file exactly.
//
// Sections by kind:
//   generator/discriminator: ARCH, PARM [, MASK]
//   vae:                     ENCD, DECD (nested generator blobs)
//   bypass composite:        GRPH (node opcodes, trigger set, two nested blobs)
//   dataset:                 META, PARM
// Every file may carry a leading META text section.

enum class ModelKind : uint16_t {
    Generator = 0,
    Discriminator = 1,
    Vae = 2,
    Bypass = 3,
    Dataset = 4,
};

constexpr uint16_t kDgmlVersion = 1;

void save_model(const Generator& g, const std::string& path, const std::string& meta = "");
void save_model(const Discriminator& d, const std::string& path, const std::string& meta = "");
void save_model(const Vae& v, const std::string& path, const std::string& meta = "");
void save_model(const BypassModel& m, const std::string& path, const std::string& meta = "");
void save_dataset(const ImageDataset& ds, const std::string& path);

struct LoadedModel {
    ModelKind kind = ModelKind::Generator;
    std::string meta;
    std::optional<Generator> generator;
    std::optional<Discriminator> discriminator;
    std::optional<Vae> vae;
    std::optional<BypassModel> bypass;
    std::optional<ImageDataset> dataset;

    // Graph opcodes from the GRPH section, in serialized order, for static
    // inspection of composite models.
    std::vector<uint8_t> graph_opcodes;

    const Generator& as_generator() const;
};

LoadedModel load_model(const std::string& path);

// In-memory encode/decode of a generator, used for nested blobs.
std::string encode_generator(const Generator& g, const std::string& meta = "");
Generator decode_generator(const std::string& bytes);

}  // namespace dgmlab
