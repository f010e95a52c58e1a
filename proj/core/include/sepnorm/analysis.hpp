#pragma once

#include <cstdint>
#include <optional>
#include <utility>
#include <vector>

namespace sepnorm {

// plain row-major value matrix, outside any gradient graph
struct ValueMatrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> v;

    double at(std::size_t r, std::size_t c) const { return v[r * cols + c]; }
    double& at(std::size_t r, std::size_t c) { return v[r * cols + c]; }
};

struct EmbeddingStats {
    double uniformity = 0.0;
    std::vector<std::pair<double, double>> per_dim;  // (mean, population std)
    std::vector<double> singular_values;             // descending
    double effective_rank = 0.0;
};

struct AnalysisReport {
    EmbeddingStats cls;
    EmbeddingStats token;
    std::optional<double> probe_accuracy;
};

// Same formula as uniformity_loss, evaluated on plain values. Zero-norm
// rows are skipped (count reported via skipped, when non-null). Inputs
// with more than 4096 rows are subsampled with a fixed seed.
double measure_uniformity(const ValueMatrix& embeddings, std::size_t* skipped = nullptr);

// Singular values of the (optionally column-centered) matrix via cyclic
// Jacobi eigendecomposition of the d x d Gram matrix. Converged when all
// off-diagonals < 1e-12 * trace; at most 100 sweeps.
std::vector<double> singular_spectrum(const ValueMatrix& embeddings, bool center = true);

// exp(entropy of sigma_i / sum sigma) -- Roy-Vetterli effective rank
double effective_rank(const std::vector<double>& singular_values);

std::vector<std::pair<double, double>> per_dim_stats(const ValueMatrix& embeddings);

// Single affine layer + softmax cross-entropy, full-batch gradient
// descent from zero init. Returns top-1 test accuracy. When loss_history
// is non-null it receives the mean training cross-entropy per epoch.
double linear_probe(const ValueMatrix& train_embeddings, const std::vector<std::size_t>& train_labels,
                    const ValueMatrix& test_embeddings, const std::vector<std::size_t>& test_labels,
                    std::size_t num_classes, std::size_t epochs, double lr,
                    std::vector<double>* loss_history = nullptr);

EmbeddingStats embedding_stats(const ValueMatrix& embeddings, bool center = true);

}  // namespace sepnorm
