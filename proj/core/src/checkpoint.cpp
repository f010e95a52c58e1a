#include "sepnorm/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace sepnorm {

namespace {

constexpr char kMagic[8] = {'S', 'E', 'P', 'N', 'O', 'R', 'M', '1'};

void write_u64(std::ostream& os, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    os.write(reinterpret_cast<const char*>(b), 8);
}

std::uint64_t read_u64(std::istream& is) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}

void write_f64(std::ostream& os, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    write_u64(os, bits);
}

double read_f64(std::istream& is) {
    const std::uint64_t bits = read_u64(is);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
}

void write_str(std::ostream& os, const std::string& s) {
    write_u64(os, s.size());
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_str(std::istream& is) {
    const std::uint64_t n = read_u64(is);
    std::string s(n, '\0');
    is.read(s.data(), static_cast<std::streamsize>(n));
    return s;
}

void write_config(std::ostream& os, const EncoderConfig& c) {
    write_u64(os, c.image_side);
    write_u64(os, c.patch_side);
    write_u64(os, c.dim);
    write_u64(os, c.depth);
    write_u64(os, c.heads);
    write_f64(os, c.mlp_ratio);
    const unsigned char scheme[3] = {static_cast<unsigned char>(c.norm_scheme.separate),
                                     static_cast<unsigned char>(c.norm_scheme.cls_kind),
                                     static_cast<unsigned char>(c.norm_scheme.token_kind)};
    os.write(reinterpret_cast<const char*>(scheme), 3);
    write_u64(os, c.seed);
}

EncoderConfig read_config(std::istream& is) {
    EncoderConfig c;
    c.image_side = read_u64(is);
    c.patch_side = read_u64(is);
    c.dim = read_u64(is);
    c.depth = read_u64(is);
    c.heads = read_u64(is);
    c.mlp_ratio = read_f64(is);
    unsigned char scheme[3];
    is.read(reinterpret_cast<char*>(scheme), 3);
    c.norm_scheme.separate = scheme[0] != 0;
    c.norm_scheme.cls_kind = static_cast<NormKind>(scheme[1]);
    c.norm_scheme.token_kind = static_cast<NormKind>(scheme[2]);
    c.seed = read_u64(is);
    return c;
}

}  // namespace

const CheckpointRecord* Checkpoint::find(const std::string& name) const {
    for (const auto& r : records)
        if (r.name == name) return &r;
    return nullptr;
}

void save_checkpoint(const Checkpoint& c, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for writing: " + path);
    os.write(kMagic, 8);
    write_config(os, c.config);
    write_u64(os, c.step);
    write_str(os, c.rng_state);
    write_u64(os, c.records.size());
    for (const auto& r : c.records) {
        write_str(os, r.name);
        write_u64(os, r.shape.size());
        for (std::size_t e : r.shape) write_u64(os, e);
        for (double v : r.values) write_f64(os, v);
    }
    if (!os) throw IoError("write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open: " + path);
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, kMagic, 8) != 0)
        throw IoError("bad checkpoint magic in " + path);
    Checkpoint c;
    c.config = read_config(is);
    c.step = read_u64(is);
    c.rng_state = read_str(is);
    const std::uint64_t n = read_u64(is);
    c.records.resize(n);
    for (auto& r : c.records) {
        r.name = read_str(is);
        const std::uint64_t nd = read_u64(is);
        r.shape.resize(nd);
        for (auto& e : r.shape) e = read_u64(is);
        r.values.resize(numel(r.shape));
        for (double& v : r.values) v = read_f64(is);
    }
    if (!is) throw IoError("truncated checkpoint: " + path);
    return c;
}

Checkpoint snapshot(Encoder& encoder, Decoder* decoder, std::uint64_t step,
                    const std::string& rng_state) {
    Checkpoint c;
    c.config = encoder.config();
    c.step = step;
    c.rng_state = rng_state;
    for (auto& [name, t] : encoder.parameters())
        c.records.push_back({name, t->shape, *t->data});
    for (auto& [name, buf] : encoder.buffers())
        c.records.push_back({name, {buf->size()}, *buf});
    if (decoder)
        for (auto& [name, t] : decoder->parameters())
            c.records.push_back({name, t->shape, *t->data});
    return c;
}

void restore(const Checkpoint& c, Encoder& encoder, Decoder* decoder) {
    if (!(c.config == encoder.config()))
        throw ContractError("checkpoint config does not match the encoder");
    auto load_into = [&c](const std::string& name, const Shape& shape, std::vector<double>& dst) {
        const CheckpointRecord* r = c.find(name);
        if (!r) throw ContractError("checkpoint missing record: " + name);
        if (r->shape != shape)
            throw ContractError("checkpoint record " + name + " has shape " + shape_str(r->shape) +
                                ", expected " + shape_str(shape));
        dst = r->values;
    };
    for (auto& [name, t] : encoder.parameters()) load_into(name, t->shape, *t->data);
    for (auto& [name, buf] : encoder.buffers()) load_into(name, {buf->size()}, *buf);
    if (decoder)
        for (auto& [name, t] : decoder->parameters()) load_into(name, t->shape, *t->data);
}

}  // namespace sepnorm
