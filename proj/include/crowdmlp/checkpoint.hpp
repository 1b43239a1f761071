#pragma once

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "crowdmlp/model.hpp"

namespace crowdmlp {

struct NamedArray {
    std::string name;
    Shape shape;
    std::vector<double> data;
};

// File layout: magic "CMLP1", u64 little-endian header length, UTF-8 JSON
// header (version, model config echo, array table with shapes and byte
// offsets, rng state, epoch, optimizer metadata), then the raw little-endian
// IEEE-754 f64 blobs in header order.
struct Checkpoint {
    int version = 1;
    nlohmann::json model_config;
    int epoch = 0;
    std::uint64_t rng_seed = 0;
    std::uint64_t rng_state = 0;
    std::vector<NamedArray> arrays;              // parameters + batch-norm stats
    std::vector<NamedArray> optimizer_arrays;    // adam moments, optional
    nlohmann::json optimizer_meta;               // {"step": t} when present
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

// Snapshot copies all parameter and buffer arrays by value.
Checkpoint make_checkpoint(CrowdMlp& model, const RngState& rng, int epoch);

// Writes the checkpoint arrays into an existing model; a missing, extra, or
// shape-mismatched array is an error naming the offending parameter.
void apply_checkpoint(const Checkpoint& ckpt, CrowdMlp& model);

// Rebuilds the model from the configuration echoed in the checkpoint.
CrowdMlp model_from_checkpoint(const Checkpoint& ckpt);

} // namespace crowdmlp
