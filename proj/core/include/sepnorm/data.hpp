#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sepnorm/tensor.hpp"

namespace sepnorm {

// Raw image dataset. On disk (little-endian): magic "SNDS", u32 count,
// u32 height, u32 width, u32 classes, then per image height*width bytes
// of row-major 8-bit pixels followed by one label byte.
struct Dataset {
    std::size_t image_side = 0;
    std::size_t num_classes = 0;
    std::vector<std::uint8_t> pixels;  // count * side * side
    std::vector<std::uint8_t> labels;  // count

    std::size_t count() const { return labels.size(); }

    // images as doubles in [-1, 1]: x = pixel / 255 * 2 - 1
    Tensor image_batch(const std::vector<std::size_t>& indices) const;
    Tensor image(std::size_t index) const;
};

void save_dataset(const Dataset& ds, const std::string& path);
Dataset load_dataset(const std::string& path);

enum class SyntheticKind { ClassBlobs, Textures };

SyntheticKind parse_synthetic_kind(const std::string& s);
std::string synthetic_kind_name(SyntheticKind k);

struct SyntheticDatasetSpec {
    SyntheticKind kind = SyntheticKind::ClassBlobs;
    std::size_t classes = 4;
    std::size_t train_count = 256;
    std::size_t test_count = 256;
    std::size_t image_side = 16;
    double noise = 0.1;  // Gaussian pixel noise, in units of full scale
    std::uint64_t seed = 0;

    void validate() const;
};

struct DatasetPair {
    Dataset train;
    Dataset test;
};

// Deterministic per seed; labels balanced; train/test drawn from disjoint
// random streams. class-blobs carries a class-dependent low-frequency
// pattern (global brightness + smooth gradient) so whole-image statistics
// determine the class; textures varies spatial frequency at equal mean.
DatasetPair generate_synthetic(const SyntheticDatasetSpec& spec);

}  // namespace sepnorm
