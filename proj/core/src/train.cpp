#include "sepnorm/train.hpp"

#include <cmath>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace sepnorm {

namespace fs = std::filesystem;

namespace {

std::string fmt(double v) {
    std::ostringstream oss;
    oss.precision(17);
    oss << v;
    return oss.str();
}

}  // namespace

std::string RunConfig::canonical() const {
    std::ostringstream oss;
    oss << "image_side=" << encoder.image_side << "\n"
        << "patch_side=" << encoder.patch_side << "\n"
        << "dim=" << encoder.dim << "\n"
        << "depth=" << encoder.depth << "\n"
        << "heads=" << encoder.heads << "\n"
        << "mlp_ratio=" << fmt(encoder.mlp_ratio) << "\n"
        << "norm_scheme=" << encoder.norm_scheme.name() << "\n"
        << "encoder_seed=" << encoder.seed << "\n"
        << "mask_ratio=" << fmt(objective.mask_ratio) << "\n"
        << "lambda=" << fmt(objective.lambda) << "\n"
        << "target=" << uniformity_target_name(objective.uniformity_target) << "\n"
        << "decoder_depth=" << objective.decoder_depth << "\n"
        << "decoder_dim=" << objective.decoder_dim << "\n"
        << "lr=" << fmt(optimizer.lr) << "\n"
        << "steps=" << optimizer.steps << "\n"
        << "batch_size=" << optimizer.batch_size << "\n"
        << "weight_decay=" << fmt(optimizer.weight_decay) << "\n"
        << "momentum=" << fmt(optimizer.momentum) << "\n"
        << "seed=" << seed << "\n"
        << "train_data=" << train_data << "\n";
    return oss.str();
}

std::uint64_t RunConfig::content_hash() const {
    const std::string s = canonical();
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

void apply_config_entry(RunConfig& cfg, const std::string& key, const std::string& value) {
    auto to_u = [&](const std::string& v) { return std::stoull(v); };
    auto to_d = [&](const std::string& v) { return std::stod(v); };
    if (key == "image_side") cfg.encoder.image_side = to_u(value);
    else if (key == "patch_side") cfg.encoder.patch_side = to_u(value);
    else if (key == "dim") cfg.encoder.dim = to_u(value);
    else if (key == "depth") cfg.encoder.depth = to_u(value);
    else if (key == "heads") cfg.encoder.heads = to_u(value);
    else if (key == "mlp_ratio") cfg.encoder.mlp_ratio = to_d(value);
    else if (key == "norm_scheme") cfg.encoder.norm_scheme = NormSchemeConfig::parse(value);
    else if (key == "encoder_seed") cfg.encoder.seed = to_u(value);
    else if (key == "mask_ratio") cfg.objective.mask_ratio = to_d(value);
    else if (key == "lambda") cfg.objective.lambda = to_d(value);
    else if (key == "target") cfg.objective.uniformity_target = parse_uniformity_target(value);
    else if (key == "decoder_depth") cfg.objective.decoder_depth = to_u(value);
    else if (key == "decoder_dim") cfg.objective.decoder_dim = to_u(value);
    else if (key == "lr") cfg.optimizer.lr = to_d(value);
    else if (key == "steps") cfg.optimizer.steps = to_u(value);
    else if (key == "batch_size") cfg.optimizer.batch_size = to_u(value);
    else if (key == "weight_decay") cfg.optimizer.weight_decay = to_d(value);
    else if (key == "momentum") cfg.optimizer.momentum = to_d(value);
    else if (key == "seed") cfg.seed = to_u(value);
    else if (key == "train_data") cfg.train_data = value;
    else if (key == "test_data") cfg.test_data = value;
    else if (key == "out_dir") cfg.output_dir = value;
    else throw ConfigError("unknown config key: " + key);
}

void apply_config_file(RunConfig& cfg, const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open config: " + path);
    std::string line;
    while (std::getline(is, line)) {
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        // trim
        const auto b = line.find_first_not_of(" \t\r");
        if (b == std::string::npos) continue;
        const auto e = line.find_last_not_of(" \t\r");
        line = line.substr(b, e - b + 1);
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError("bad config line: " + line);
        auto strip = [](std::string s) {
            const auto b2 = s.find_first_not_of(" \t");
            const auto e2 = s.find_last_not_of(" \t");
            return b2 == std::string::npos ? std::string() : s.substr(b2, e2 - b2 + 1);
        };
        apply_config_entry(cfg, strip(line.substr(0, eq)), strip(line.substr(eq + 1)));
    }
}

std::string resolve_output_dir(const std::string& dir) {
    if (!dir.empty() && dir.front() == '/') return dir;
    const char* root = std::getenv("SEPNORM_OUT_ROOT");
    if (!root || !*root) return dir;
    return (fs::path(root) / dir).string();
}

namespace {

struct Sgd {
    std::vector<Tensor*> params;
    std::vector<std::vector<double>> velocity;
    double lr, momentum, weight_decay;

    Sgd(std::vector<Tensor*> p, const OptimizerConfig& oc)
        : params(std::move(p)), lr(oc.lr), momentum(oc.momentum), weight_decay(oc.weight_decay) {
        for (Tensor* t : params) velocity.emplace_back(t->size(), 0.0);
    }

    void step() {
        for (std::size_t k = 0; k < params.size(); ++k) {
            Tensor* t = params[k];
            auto& vel = velocity[k];
            for (std::size_t i = 0; i < t->size(); ++i) {
                const double g = (*t->grad)[i] + weight_decay * (*t->data)[i];
                vel[i] = momentum * vel[i] + g;
                (*t->data)[i] -= lr * vel[i];
            }
        }
    }

    void zero_grad() {
        for (Tensor* t : params) t->zero_grad();
    }
};

std::vector<std::size_t> draw_batch(Rng& rng, std::size_t dataset_size, std::size_t batch_size) {
    std::vector<std::size_t> idx(batch_size);
    for (auto& i : idx) i = rng.index(dataset_size);
    return idx;
}

}  // namespace

PretrainResult pretrain(const RunConfig& cfg, const Dataset& train) {
    cfg.encoder.validate();
    cfg.objective.validate(cfg.encoder.num_patches());
    if (train.image_side != cfg.encoder.image_side)
        throw ContractError("dataset image side does not match encoder config");
    if (cfg.optimizer.batch_size < 2) throw ConfigError("batch_size must be >= 2");

    const std::string out_dir = resolve_output_dir(cfg.output_dir);
    fs::create_directories(out_dir);
    const std::string log_path = (fs::path(out_dir) / "train_log.csv").string();
    const std::string ckpt_path = (fs::path(out_dir) / "checkpoint.bin").string();

    Encoder encoder(cfg.encoder);
    Decoder decoder(cfg.encoder.dim, cfg.encoder.num_patches(), cfg.encoder.patch_pixels(),
                    cfg.objective, cfg.seed ^ 0x9e3779b97f4a7c15ULL);
    Rng rng(cfg.seed);

    std::vector<Tensor*> params;
    for (auto& [name, t] : encoder.parameters()) params.push_back(t);
    for (auto& [name, t] : decoder.parameters()) params.push_back(t);
    Sgd opt(params, cfg.optimizer);

    std::ofstream log(log_path);
    if (!log) throw IoError("cannot open log: " + log_path);
    log << "step,l_mae,l_u,total\n";

    PretrainResult result;
    result.checkpoint_path = ckpt_path;
    result.log_path = log_path;

    Checkpoint last_good = snapshot(encoder, &decoder, 0, rng.serialize());
    const std::size_t L = cfg.encoder.num_patches();
    for (std::size_t step = 0; step < cfg.optimizer.steps; ++step) {
        const auto idx = draw_batch(rng, train.count(), cfg.optimizer.batch_size);
        Tensor images = train.image_batch(idx);
        MaskPlan plan = sample_mask(idx.size(), L, cfg.objective.mask_ratio, rng);

        Graph g;
        UMaeResult losses =
            u_mae_loss(g, images, encoder, decoder, plan, cfg.objective, NormMode::Train);
        const double total = losses.total.item();
        if (!std::isfinite(total)) {
            save_checkpoint(last_good, ckpt_path);
            log << step << ",nan,nan,nan\n";
            result.aborted_on_nan = true;
            return result;
        }
        result.l_mae_final = losses.l_mae.item();
        log << step << "," << fmt(losses.l_mae.item()) << "," << fmt(losses.l_u.item()) << ","
            << fmt(total) << "\n";

        opt.zero_grad();
        g.backward(losses.total);
        opt.step();
        last_good = snapshot(encoder, &decoder, step + 1, rng.serialize());
    }
    save_checkpoint(last_good, ckpt_path);
    return result;
}

EmbeddingDump encode_dataset(Encoder& encoder, const Dataset& ds, std::size_t batch_size) {
    const std::size_t N = ds.count();
    const std::size_t d = encoder.config().dim;
    const std::size_t L = encoder.config().num_patches();
    EmbeddingDump dump;
    dump.cls = {N, d, std::vector<double>(N * d)};
    dump.tokens = {N * L, d, std::vector<double>(N * L * d)};
    for (std::size_t start = 0; start < N; start += batch_size) {
        const std::size_t b = std::min(batch_size, N - start);
        std::vector<std::size_t> idx(b);
        for (std::size_t i = 0; i < b; ++i) idx[i] = start + i;
        Graph g;
        EncodeResult enc = encoder.encode(g, ds.image_batch(idx), {}, NormMode::Eval);
        std::copy(enc.cls.data->begin(), enc.cls.data->end(), dump.cls.v.begin() + start * d);
        std::copy(enc.tokens.data->begin(), enc.tokens.data->end(),
                  dump.tokens.v.begin() + start * L * d);
    }
    return dump;
}

void save_matrix(const ValueMatrix& m, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for writing: " + path);
    os.write("SNMX", 4);
    const std::uint32_t dims[2] = {static_cast<std::uint32_t>(m.rows),
                                   static_cast<std::uint32_t>(m.cols)};
    os.write(reinterpret_cast<const char*>(dims), 8);
    os.write(reinterpret_cast<const char*>(m.v.data()),
             static_cast<std::streamsize>(m.v.size() * sizeof(double)));
    if (!os) throw IoError("write failed: " + path);
}

ValueMatrix load_matrix(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open: " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "SNMX", 4) != 0) throw IoError("bad matrix magic in " + path);
    std::uint32_t dims[2];
    is.read(reinterpret_cast<char*>(dims), 8);
    ValueMatrix m{dims[0], dims[1], std::vector<double>(std::size_t(dims[0]) * dims[1])};
    is.read(reinterpret_cast<char*>(m.v.data()),
            static_cast<std::streamsize>(m.v.size() * sizeof(double)));
    if (!is) throw IoError("truncated matrix: " + path);
    return m;
}

std::string ReportRow::csv_header() {
    return "scheme,cls_norm,token_norm,lambda,target,seed,steps,l_mae_final,cls_uniformity,"
           "token_uniformity,cls_effrank,token_effrank,probe_acc";
}

std::string ReportRow::csv() const {
    std::ostringstream oss;
    oss << scheme << "," << cls_norm << "," << token_norm << "," << fmt(lambda) << "," << target
        << "," << seed << "," << steps << "," << fmt(l_mae_final) << "," << fmt(cls_uniformity)
        << "," << fmt(token_uniformity) << "," << fmt(cls_effrank) << "," << fmt(token_effrank)
        << ",";
    if (probe_acc) oss << fmt(*probe_acc);
    return oss.str();
}

AnalysisReport analyze_checkpoint(const Checkpoint& ckpt, const Dataset& train,
                                  const Dataset& test, const std::string& dump_dir,
                                  bool with_probe) {
    Encoder encoder(ckpt.config);
    restore(ckpt, encoder, nullptr);
    EmbeddingDump dump = encode_dataset(encoder, test);
    if (!dump_dir.empty()) {
        fs::create_directories(dump_dir);
        save_matrix(dump.cls, (fs::path(dump_dir) / "cls.mat").string());
        save_matrix(dump.tokens, (fs::path(dump_dir) / "tokens.mat").string());
    }
    AnalysisReport report;
    report.cls = embedding_stats(dump.cls);
    report.token = embedding_stats(dump.tokens);
    if (with_probe) report.probe_accuracy = probe_checkpoint(ckpt, train, test);
    return report;
}

double probe_checkpoint(const Checkpoint& ckpt, const Dataset& train, const Dataset& test,
                        std::size_t epochs, double lr) {
    Encoder encoder(ckpt.config);
    restore(ckpt, encoder, nullptr);
    EmbeddingDump tr = encode_dataset(encoder, train);
    EmbeddingDump te = encode_dataset(encoder, test);
    std::vector<std::size_t> trl(train.labels.begin(), train.labels.end());
    std::vector<std::size_t> tel(test.labels.begin(), test.labels.end());
    return linear_probe(tr.cls, trl, te.cls, tel, train.num_classes, epochs, lr);
}

std::vector<RunConfig> AblationGrid::cells() const {
    std::vector<RunConfig> out;
    for (const NormSchemeConfig& scheme : schemes)
        for (double lambda : lambdas) {
            std::vector<UniformityTarget> cell_targets = targets;
            if (lambda == 0.0) cell_targets = {UniformityTarget::None};
            for (UniformityTarget target : cell_targets)
                for (std::uint64_t seed : seeds) {
                    RunConfig cfg = base;
                    cfg.encoder.norm_scheme = scheme;
                    cfg.encoder.seed = seed;
                    cfg.objective.lambda = lambda;
                    cfg.objective.uniformity_target = target;
                    cfg.seed = seed;
                    out.push_back(cfg);
                }
        }
    return out;
}

AblateResult run_ablation(const AblationGrid& grid, const Dataset& train, const Dataset& test,
                          const std::string& output_root) {
    const std::string root = resolve_output_dir(output_root);
    fs::create_directories(root);
    const auto cells = grid.cells();
    AblateResult result;
    result.total_cells = cells.size();
    std::vector<std::string> rows;
    for (const RunConfig& cell : cells) {
        std::ostringstream key;
        key << std::hex << cell.content_hash();
        const fs::path cell_dir = fs::path(root) / "cells" / key.str();
        const std::string row_path = (cell_dir / "row.csv").string();
        if (!fs::exists(row_path)) {
            fs::create_directories(cell_dir);
            RunConfig cfg = cell;
            cfg.output_dir = cell_dir.string();
            PretrainResult pr = pretrain(cfg, train);
            AnalysisReport report = analyze_checkpoint(load_checkpoint(pr.checkpoint_path), train,
                                                       test, (cell_dir / "dump").string());
            ReportRow row;
            row.scheme = cell.encoder.norm_scheme.separate ? "sep" : "share";
            row.cls_norm = norm_kind_name(cell.encoder.norm_scheme.cls_kind);
            row.token_norm = norm_kind_name(cell.encoder.norm_scheme.token_kind);
            row.lambda = cell.objective.lambda;
            row.target = uniformity_target_name(cell.objective.uniformity_target);
            row.seed = cell.seed;
            row.steps = cell.optimizer.steps;
            row.l_mae_final = pr.l_mae_final;
            row.cls_uniformity = report.cls.uniformity;
            row.token_uniformity = report.token.uniformity;
            row.cls_effrank = report.cls.effective_rank;
            row.token_effrank = report.token.effective_rank;
            row.probe_acc = report.probe_accuracy;
            std::ofstream os(row_path);
            os << row.csv() << "\n";
            if (!os) throw IoError("write failed: " + row_path);
            ++result.trained_cells;
        }
        std::ifstream is(row_path);
        std::string line;
        std::getline(is, line);
        rows.push_back(line);
    }
    const std::string report_path = (fs::path(root) / "report.csv").string();
    std::ofstream os(report_path);
    os << ReportRow::csv_header() << "\n";
    for (const std::string& r : rows) os << r << "\n";
    if (!os) throw IoError("write failed: " + report_path);
    result.report_path = report_path;
    return result;
}

}  // namespace sepnorm
