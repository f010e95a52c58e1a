// Command-line front end: synthetic data generation, pretraining,
// ablation grids, analysis reports, and linear probing.

#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "sepnorm/train.hpp"

namespace fs = std::filesystem;
using namespace sepnorm;

namespace {

void add_run_options(CLI::App* app, RunConfig& cfg, std::string& config_file) {
    app->add_option("--config", config_file, "key=value config file applied first");
    app->add_option("--image-side", cfg.encoder.image_side);
    app->add_option("--patch-side", cfg.encoder.patch_side);
    app->add_option("--dim", cfg.encoder.dim);
    app->add_option("--depth", cfg.encoder.depth);
    app->add_option("--heads", cfg.encoder.heads);
    app->add_option("--mlp-ratio", cfg.encoder.mlp_ratio);
    app->add_option_function<std::string>(
        "--norm-scheme",
        [&cfg](const std::string& v) { cfg.encoder.norm_scheme = NormSchemeConfig::parse(v); },
        "LN, BN, or cls+token pairs like BN+LN");
    app->add_option("--mask-ratio", cfg.objective.mask_ratio);
    app->add_option("--lambda", cfg.objective.lambda);
    app->add_option_function<std::string>(
        "--target",
        [&cfg](const std::string& v) { cfg.objective.uniformity_target = parse_uniformity_target(v); },
        "uniformity target: none|cls|token|both");
    app->add_option("--decoder-depth", cfg.objective.decoder_depth);
    app->add_option("--decoder-dim", cfg.objective.decoder_dim);
    app->add_option("--lr", cfg.optimizer.lr);
    app->add_option("--steps", cfg.optimizer.steps);
    app->add_option("--batch-size", cfg.optimizer.batch_size);
    app->add_option("--weight-decay", cfg.optimizer.weight_decay);
    app->add_option("--momentum", cfg.optimizer.momentum);
    app->add_option("--seed", cfg.seed);
    app->add_option("--train-data", cfg.train_data);
    app->add_option("--test-data", cfg.test_data);
    app->add_option("--out-dir", cfg.output_dir);
}

// file entries apply only where no flag was given; flags win
void merge_config_file(CLI::App* sub, RunConfig& cfg, const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open config: " + path);
    std::string line;
    while (std::getline(is, line)) {
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
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
        const std::string key = strip(line.substr(0, eq));
        std::string flag = "--" + key;
        for (char& c : flag)
            if (c == '_') c = '-';
        const CLI::Option* opt = sub->get_option_no_throw(flag);
        if (opt && opt->count() > 0) continue;
        apply_config_entry(cfg, key, strip(line.substr(eq + 1)));
    }
}

ReportRow report_row_for(const Checkpoint& ckpt, const AnalysisReport& report, double lambda,
                         UniformityTarget target, std::uint64_t seed, double l_mae) {
    ReportRow row;
    row.scheme = ckpt.config.norm_scheme.separate ? "sep" : "share";
    row.cls_norm = norm_kind_name(ckpt.config.norm_scheme.cls_kind);
    row.token_norm = norm_kind_name(ckpt.config.norm_scheme.token_kind);
    row.lambda = lambda;
    row.target = uniformity_target_name(target);
    row.seed = seed;
    row.steps = ckpt.step;
    row.l_mae_final = l_mae;
    row.cls_uniformity = report.cls.uniformity;
    row.token_uniformity = report.token.uniformity;
    row.cls_effrank = report.cls.effective_rank;
    row.token_effrank = report.token.effective_rank;
    row.probe_acc = report.probe_accuracy;
    return row;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"SepNorm desk-scale transformer workbench"};
    app.require_subcommand(1);

    // gen-data
    SyntheticDatasetSpec spec;
    std::string gen_kind = "class-blobs";
    std::string gen_out = "data";
    auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
    gen->add_option("--kind", gen_kind, "class-blobs | textures");
    gen->add_option("--classes", spec.classes);
    gen->add_option("--train-count", spec.train_count);
    gen->add_option("--test-count", spec.test_count);
    gen->add_option("--image-side", spec.image_side);
    gen->add_option("--noise", spec.noise);
    gen->add_option("--seed", spec.seed);
    gen->add_option("--out-dir", gen_out, "directory for train.snds / test.snds");

    // pretrain
    RunConfig pt_cfg;
    std::string pt_config_file;
    auto* pt = app.add_subcommand("pretrain", "run masked-autoencoder pretraining");
    add_run_options(pt, pt_cfg, pt_config_file);

    // ablate
    RunConfig ab_cfg;
    std::string ab_config_file;
    std::vector<std::string> ab_schemes = {"LN", "BN", "BN+LN", "BN+BN"};
    std::vector<double> ab_lambdas = {0.0, 0.01, 0.1, 1.0};
    std::vector<std::string> ab_targets = {"cls", "token", "both"};
    std::vector<std::uint64_t> ab_seeds = {0};
    auto* ab = app.add_subcommand("ablate", "run the normalization/lambda/target grid");
    add_run_options(ab, ab_cfg, ab_config_file);
    ab->add_option("--schemes", ab_schemes, "norm schemes in the grid");
    ab->add_option("--lambdas", ab_lambdas, "lambda values in the grid");
    ab->add_option("--targets", ab_targets, "uniformity targets in the grid");
    ab->add_option("--seeds", ab_seeds, "seeds in the grid");

    // analyze
    std::string an_ckpt, an_train, an_test, an_out = "analysis";
    auto* an = app.add_subcommand("analyze", "uniformity/spectrum/probe report for a checkpoint");
    an->add_option("--checkpoint", an_ckpt)->required();
    an->add_option("--train-data", an_train)->required();
    an->add_option("--test-data", an_test)->required();
    an->add_option("--out-dir", an_out, "directory for report.csv and embedding dumps");

    // probe
    std::string pr_ckpt, pr_train, pr_test;
    std::size_t pr_epochs = 300;
    double pr_lr = 0.5;
    auto* pr = app.add_subcommand("probe", "linear probe on frozen [CLS] embeddings");
    pr->add_option("--checkpoint", pr_ckpt)->required();
    pr->add_option("--train-data", pr_train)->required();
    pr->add_option("--test-data", pr_test)->required();
    pr->add_option("--epochs", pr_epochs);
    pr->add_option("--lr", pr_lr);

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) {
            spec.kind = parse_synthetic_kind(gen_kind);
            DatasetPair pair = generate_synthetic(spec);
            const std::string out = resolve_output_dir(gen_out);
            fs::create_directories(out);
            save_dataset(pair.train, (fs::path(out) / "train.snds").string());
            save_dataset(pair.test, (fs::path(out) / "test.snds").string());
            std::cout << "wrote " << pair.train.count() << " train / " << pair.test.count()
                      << " test images to " << out << "\n";
        } else if (pt->parsed()) {
            if (!pt_config_file.empty()) merge_config_file(pt, pt_cfg, pt_config_file);
            Dataset train = load_dataset(pt_cfg.train_data);
            PretrainResult r = pretrain(pt_cfg, train);
            if (r.aborted_on_nan) {
                std::cerr << "aborted on NaN loss; last-good checkpoint at " << r.checkpoint_path
                          << "\n";
                return 2;
            }
            std::cout << "final L_MAE " << r.l_mae_final << "\ncheckpoint " << r.checkpoint_path
                      << "\nlog " << r.log_path << "\n";
        } else if (ab->parsed()) {
            if (!ab_config_file.empty()) merge_config_file(ab, ab_cfg, ab_config_file);
            AblationGrid grid;
            for (const auto& s : ab_schemes) grid.schemes.push_back(NormSchemeConfig::parse(s));
            grid.lambdas = ab_lambdas;
            for (const auto& t : ab_targets) grid.targets.push_back(parse_uniformity_target(t));
            grid.seeds = ab_seeds;
            grid.base = ab_cfg;
            Dataset train = load_dataset(ab_cfg.train_data);
            Dataset test = load_dataset(ab_cfg.test_data);
            AblateResult r = run_ablation(grid, train, test, ab_cfg.output_dir);
            std::cout << "trained " << r.trained_cells << " of " << r.total_cells
                      << " cells\nreport " << r.report_path << "\n";
        } else if (an->parsed()) {
            Checkpoint ckpt = load_checkpoint(an_ckpt);
            Dataset train = load_dataset(an_train);
            Dataset test = load_dataset(an_test);
            const std::string out = resolve_output_dir(an_out);
            fs::create_directories(out);
            AnalysisReport report = analyze_checkpoint(ckpt, train, test, out);
            ReportRow row = report_row_for(ckpt, report, 0.0, UniformityTarget::None, 0, 0.0);
            std::ofstream os((fs::path(out) / "report.csv").string());
            os << ReportRow::csv_header() << "\n" << row.csv() << "\n";
            std::cout << "cls uniformity " << report.cls.uniformity << "\ntoken uniformity "
                      << report.token.uniformity << "\ncls effrank " << report.cls.effective_rank
                      << "\ntoken effrank " << report.token.effective_rank << "\nprobe acc "
                      << (report.probe_accuracy ? *report.probe_accuracy : 0.0) << "\nreport "
                      << (fs::path(out) / "report.csv").string() << "\n";
        } else if (pr->parsed()) {
            Checkpoint ckpt = load_checkpoint(pr_ckpt);
            Dataset train = load_dataset(pr_train);
            Dataset test = load_dataset(pr_test);
            const double acc = probe_checkpoint(ckpt, train, test, pr_epochs, pr_lr);
            std::cout << "probe accuracy " << acc << "\n";
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
