#include "sepnorm/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "sepnorm/rng.hpp"

namespace sepnorm {

namespace {

constexpr char kMagic[4] = {'S', 'N', 'D', 'S'};

void write_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t read_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace

Tensor Dataset::image(std::size_t index) const {
    const std::size_t px = image_side * image_side;
    std::vector<double> v(px);
    for (std::size_t i = 0; i < px; ++i)
        v[i] = static_cast<double>(pixels[index * px + i]) / 255.0 * 2.0 - 1.0;
    return Tensor::from({image_side, image_side}, std::move(v));
}

Tensor Dataset::image_batch(const std::vector<std::size_t>& indices) const {
    const std::size_t px = image_side * image_side;
    std::vector<double> v(indices.size() * px);
    for (std::size_t b = 0; b < indices.size(); ++b)
        for (std::size_t i = 0; i < px; ++i)
            v[b * px + i] = static_cast<double>(pixels[indices[b] * px + i]) / 255.0 * 2.0 - 1.0;
    return Tensor::from({indices.size(), image_side, image_side}, std::move(v));
}

void save_dataset(const Dataset& ds, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for writing: " + path);
    os.write(kMagic, 4);
    write_u32(os, static_cast<std::uint32_t>(ds.count()));
    write_u32(os, static_cast<std::uint32_t>(ds.image_side));
    write_u32(os, static_cast<std::uint32_t>(ds.image_side));
    write_u32(os, static_cast<std::uint32_t>(ds.num_classes));
    const std::size_t px = ds.image_side * ds.image_side;
    for (std::size_t i = 0; i < ds.count(); ++i) {
        os.write(reinterpret_cast<const char*>(ds.pixels.data() + i * px),
                 static_cast<std::streamsize>(px));
        os.write(reinterpret_cast<const char*>(&ds.labels[i]), 1);
    }
    if (!os) throw IoError("write failed: " + path);
}

Dataset load_dataset(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open: " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0)
        throw IoError("bad dataset magic in " + path);
    const std::uint32_t count = read_u32(is);
    const std::uint32_t height = read_u32(is);
    const std::uint32_t width = read_u32(is);
    const std::uint32_t classes = read_u32(is);
    if (height != width) throw IoError("non-square images in " + path);
    Dataset ds;
    ds.image_side = height;
    ds.num_classes = classes;
    const std::size_t px = static_cast<std::size_t>(height) * width;
    ds.pixels.resize(count * px);
    ds.labels.resize(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        is.read(reinterpret_cast<char*>(ds.pixels.data() + i * px),
                static_cast<std::streamsize>(px));
        is.read(reinterpret_cast<char*>(&ds.labels[i]), 1);
    }
    if (!is) throw IoError("truncated dataset: " + path);
    return ds;
}

SyntheticKind parse_synthetic_kind(const std::string& s) {
    if (s == "class-blobs") return SyntheticKind::ClassBlobs;
    if (s == "textures") return SyntheticKind::Textures;
    throw ConfigError("unknown synthetic kind: " + s);
}

std::string synthetic_kind_name(SyntheticKind k) {
    return k == SyntheticKind::ClassBlobs ? "class-blobs" : "textures";
}

void SyntheticDatasetSpec::validate() const {
    if (classes < 2) throw ConfigError("need at least 2 classes");
    if (train_count % classes != 0 || test_count % classes != 0)
        throw ConfigError("split sizes must be divisible by the class count for balance");
    if (image_side == 0) throw ConfigError("image_side must be positive");
    if (noise < 0.0) throw ConfigError("noise must be >= 0");
}

namespace {

std::uint8_t clamp_pixel(double v) {
    return static_cast<std::uint8_t>(std::clamp(std::lround(v * 255.0), 0L, 255L));
}

Dataset generate_split(const SyntheticDatasetSpec& spec, std::size_t count, Rng& rng) {
    Dataset ds;
    ds.image_side = spec.image_side;
    ds.num_classes = spec.classes;
    const std::size_t side = spec.image_side;
    const std::size_t px = side * side;
    ds.pixels.resize(count * px);
    ds.labels.resize(count);
    const std::size_t per_class = count / spec.classes;
    for (std::size_t i = 0; i < count; ++i) {
        const std::size_t c = i / per_class;
        ds.labels[i] = static_cast<std::uint8_t>(c);
        const double frac = static_cast<double>(c) / static_cast<double>(spec.classes);
        // per-image jitter keeps samples within a class distinct beyond noise
        const double phase = rng.uniform(0.0, 2.0 * M_PI);
        for (std::size_t y = 0; y < side; ++y)
            for (std::size_t x = 0; x < side; ++x) {
                const double u = static_cast<double>(x) / static_cast<double>(side);
                const double w = static_cast<double>(y) / static_cast<double>(side);
                double v;
                if (spec.kind == SyntheticKind::ClassBlobs) {
                    // class-dependent brightness and smooth diagonal gradient
                    v = 0.25 + 0.5 * frac + 0.15 * std::sin(2.0 * M_PI * (u + w) + phase);
                } else {
                    // equal-mean, class-dependent spatial frequency
                    const double freq = 1.0 + 2.0 * static_cast<double>(c);
                    v = 0.5 + 0.35 * std::sin(2.0 * M_PI * freq * u + phase) *
                                  std::sin(2.0 * M_PI * freq * w);
                }
                v += spec.noise * rng.normal();
                ds.pixels[i * px + y * side + x] = clamp_pixel(v);
            }
    }
    // deterministic shuffle so class runs do not align with batch order
    std::vector<std::size_t> perm(count);
    for (std::size_t i = 0; i < count; ++i) perm[i] = i;
    for (std::size_t i = count; i > 1; --i) std::swap(perm[i - 1], perm[rng.index(i)]);
    Dataset out = ds;
    for (std::size_t i = 0; i < count; ++i) {
        std::copy(ds.pixels.begin() + perm[i] * px, ds.pixels.begin() + (perm[i] + 1) * px,
                  out.pixels.begin() + i * px);
        out.labels[i] = ds.labels[perm[i]];
    }
    return out;
}

}  // namespace

DatasetPair generate_synthetic(const SyntheticDatasetSpec& spec) {
    spec.validate();
    Rng train_rng(spec.seed * 2654435761ULL + 1);
    Rng test_rng(spec.seed * 2654435761ULL + 2);
    DatasetPair pair;
    pair.train = generate_split(spec, spec.train_count, train_rng);
    pair.test = generate_split(spec, spec.test_count, test_rng);
    return pair;
}

}  // namespace sepnorm
