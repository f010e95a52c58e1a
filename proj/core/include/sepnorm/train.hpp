#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "sepnorm/analysis.hpp"
#include "sepnorm/checkpoint.hpp"
#include "sepnorm/data.hpp"
#include "sepnorm/encoder.hpp"
#include "sepnorm/objectives.hpp"

namespace sepnorm {

struct OptimizerConfig {
    double lr = 1e-2;
    std::size_t steps = 2000;
    std::size_t batch_size = 8;
    double weight_decay = 0.0;
    double momentum = 0.9;
};

struct RunConfig {
    EncoderConfig encoder;
    ObjectiveConfig objective;
    OptimizerConfig optimizer;
    std::uint64_t seed = 0;  // drives batching, masking, decoder init
    std::string train_data;
    std::string test_data;
    std::string output_dir = "runs/default";

    // stable key=value text; the cell identity under hashing
    std::string canonical() const;
    std::uint64_t content_hash() const;  // FNV-1a 64 of canonical()
};

// key=value file (one per line, '#' comments); unknown keys rejected
void apply_config_file(RunConfig& cfg, const std::string& path);
void apply_config_entry(RunConfig& cfg, const std::string& key, const std::string& value);

// resolves cfg.output_dir against $SEPNORM_OUT_ROOT when relative
std::string resolve_output_dir(const std::string& dir);

struct PretrainResult {
    std::string checkpoint_path;
    std::string log_path;
    double l_mae_final = 0.0;
    bool aborted_on_nan = false;
};

// SGD with momentum on the configured objective; logs step,l_mae,l_u,total
// per step; saves the final checkpoint. NaN loss aborts with the
// last-good checkpoint.
PretrainResult pretrain(const RunConfig& cfg, const Dataset& train);

struct EmbeddingDump {
    ValueMatrix cls;     // [N, d]
    ValueMatrix tokens;  // [N*L, d]
};

// full split, no masking, eval-mode normalization
EmbeddingDump encode_dataset(Encoder& encoder, const Dataset& ds, std::size_t batch_size = 64);

// SNMX matrix container: magic "SNMX", u32 rows, u32 cols, f64 values
void save_matrix(const ValueMatrix& m, const std::string& path);
ValueMatrix load_matrix(const std::string& path);

struct ReportRow {
    std::string scheme;     // "share" | "sep"
    std::string cls_norm;   // "LN" | "BN"
    std::string token_norm;
    double lambda = 0.0;
    std::string target;
    std::uint64_t seed = 0;
    std::size_t steps = 0;
    double l_mae_final = 0.0;
    double cls_uniformity = 0.0;
    double token_uniformity = 0.0;
    double cls_effrank = 0.0;
    double token_effrank = 0.0;
    std::optional<double> probe_acc;

    static std::string csv_header();
    std::string csv() const;
};

// encodes the eval split, dumps embeddings, runs every analysis op
AnalysisReport analyze_checkpoint(const Checkpoint& ckpt, const Dataset& train,
                                  const Dataset& test, const std::string& dump_dir,
                                  bool with_probe = true);

double probe_checkpoint(const Checkpoint& ckpt, const Dataset& train, const Dataset& test,
                        std::size_t epochs = 300, double lr = 0.5);

struct AblationGrid {
    std::vector<NormSchemeConfig> schemes;
    std::vector<double> lambdas;
    std::vector<UniformityTarget> targets;
    std::vector<std::uint64_t> seeds;
    RunConfig base;  // encoder/objective/optimizer template

    // lambda=0 collapses all targets to one "none" cell per scheme/seed
    std::vector<RunConfig> cells() const;
};

struct AblateResult {
    std::string report_path;
    std::size_t trained_cells = 0;  // cells actually trained (not resumed)
    std::size_t total_cells = 0;
};

// resumable: a cell whose row file exists is not retrained
AblateResult run_ablation(const AblationGrid& grid, const Dataset& train, const Dataset& test,
                          const std::string& output_root);

}  // namespace sepnorm
