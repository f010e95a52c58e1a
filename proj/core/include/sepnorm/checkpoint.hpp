#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sepnorm/encoder.hpp"
#include "sepnorm/objectives.hpp"

namespace sepnorm {

// On disk: magic "SEPNORM1", encoder-config echo, u64 step counter,
// length-prefixed RNG state, then length-prefixed name/shape/value
// records (names, u64 extents, little-endian 64-bit floats). BN running
// statistics ride along as ordinary records.
struct CheckpointRecord {
    std::string name;
    Shape shape;
    std::vector<double> values;
};

struct Checkpoint {
    EncoderConfig config;
    std::uint64_t step = 0;
    std::string rng_state;
    std::vector<CheckpointRecord> records;

    const CheckpointRecord* find(const std::string& name) const;
};

void save_checkpoint(const Checkpoint& c, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

// captures encoder (+ optional decoder) parameters and BN buffers
Checkpoint snapshot(Encoder& encoder, Decoder* decoder, std::uint64_t step,
                    const std::string& rng_state);
// rejects a checkpoint whose config echo mismatches encoder.config()
void restore(const Checkpoint& c, Encoder& encoder, Decoder* decoder);

}  // namespace sepnorm
