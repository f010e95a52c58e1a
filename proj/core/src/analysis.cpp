#include "sepnorm/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "sepnorm/errors.hpp"
#include "sepnorm/rng.hpp"

namespace sepnorm {

namespace {
constexpr std::size_t kSubsampleCap = 4096;
constexpr std::uint64_t kSubsampleSeed = 0x5eb0a11ce;
}  // namespace

double measure_uniformity(const ValueMatrix& embeddings, std::size_t* skipped) {
    const std::size_t d = embeddings.cols;
    if (embeddings.rows < 2) throw ContractError("measure_uniformity: need at least 2 rows");

    // unit-normalize, skipping zero rows
    std::vector<double> unit;
    unit.reserve(embeddings.rows * d);
    std::size_t zero_rows = 0;
    for (std::size_t r = 0; r < embeddings.rows; ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < d; ++c) s += embeddings.at(r, c) * embeddings.at(r, c);
        if (s == 0.0) {
            ++zero_rows;
            continue;
        }
        const double inv = 1.0 / std::sqrt(s);
        for (std::size_t c = 0; c < d; ++c) unit.push_back(embeddings.at(r, c) * inv);
    }
    if (skipped) *skipped = zero_rows;
    std::size_t n = unit.size() / d;
    if (n < 2) throw ContractError("measure_uniformity: fewer than 2 nonzero rows");

    if (n > kSubsampleCap) {
        Rng rng(kSubsampleSeed);
        const auto pick = rng.sample_without_replacement(n, kSubsampleCap);
        std::vector<double> sub;
        sub.reserve(kSubsampleCap * d);
        for (std::size_t r : pick)
            sub.insert(sub.end(), unit.begin() + r * d, unit.begin() + (r + 1) * d);
        unit = std::move(sub);
        n = kSubsampleCap;
    }

    double acc = 0.0;
    for (std::size_t a = 0; a < n; ++a)
        for (std::size_t b = a + 1; b < n; ++b) {
            double dist = 0.0;
            for (std::size_t c = 0; c < d; ++c) {
                const double dv = unit[a * d + c] - unit[b * d + c];
                dist += dv * dv;
            }
            acc += std::exp(-2.0 * dist);
        }
    return std::log(acc * 2.0 / (static_cast<double>(n) * (n - 1)));
}

std::vector<double> singular_spectrum(const ValueMatrix& embeddings, bool center) {
    const std::size_t N = embeddings.rows, d = embeddings.cols;
    if (N < 2) throw ContractError("singular_spectrum: need at least 2 rows");

    std::vector<double> x = embeddings.v;
    if (center) {
        for (std::size_t c = 0; c < d; ++c) {
            double mean = 0.0;
            for (std::size_t r = 0; r < N; ++r) mean += x[r * d + c];
            mean /= static_cast<double>(N);
            for (std::size_t r = 0; r < N; ++r) x[r * d + c] -= mean;
        }
    }

    // d x d Gram matrix X^T X
    std::vector<double> a(d * d, 0.0);
    for (std::size_t r = 0; r < N; ++r)
        for (std::size_t i = 0; i < d; ++i) {
            const double xi = x[r * d + i];
            for (std::size_t j = i; j < d; ++j) a[i * d + j] += xi * x[r * d + j];
        }
    for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = 0; j < i; ++j) a[i * d + j] = a[j * d + i];

    double trace = 0.0;
    for (std::size_t i = 0; i < d; ++i) trace += a[i * d + i];
    const double tol = 1e-12 * trace;

    // cyclic Jacobi rotations
    const std::size_t max_sweeps = 100;
    std::size_t sweep = 0;
    for (; sweep < max_sweeps; ++sweep) {
        double off = 0.0;
        for (std::size_t i = 0; i < d; ++i)
            for (std::size_t j = i + 1; j < d; ++j) off = std::max(off, std::abs(a[i * d + j]));
        if (off <= tol || trace == 0.0) break;
        for (std::size_t p = 0; p < d; ++p)
            for (std::size_t q = p + 1; q < d; ++q) {
                const double apq = a[p * d + q];
                if (std::abs(apq) <= tol * 1e-2) continue;
                const double app = a[p * d + p], aqq = a[q * d + q];
                const double theta = (aqq - app) / (2.0 * apq);
                const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                                 (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (std::size_t k = 0; k < d; ++k) {
                    const double akp = a[k * d + p], akq = a[k * d + q];
                    a[k * d + p] = c * akp - s * akq;
                    a[k * d + q] = s * akp + c * akq;
                }
                for (std::size_t k = 0; k < d; ++k) {
                    const double apk = a[p * d + k], aqk = a[q * d + k];
                    a[p * d + k] = c * apk - s * aqk;
                    a[q * d + k] = s * apk + c * aqk;
                }
            }
    }
    if (sweep == max_sweeps) {
        double off = 0.0;
        for (std::size_t i = 0; i < d; ++i)
            for (std::size_t j = i + 1; j < d; ++j) off = std::max(off, std::abs(a[i * d + j]));
        throw NumericalError("singular_spectrum: Jacobi failed to converge after " +
                             std::to_string(max_sweeps) + " sweeps (max off-diagonal " +
                             std::to_string(off) + ", tolerance " + std::to_string(tol) + ")");
    }

    std::vector<double> sv;
    sv.reserve(d);
    for (std::size_t i = 0; i < d; ++i) sv.push_back(std::sqrt(std::max(a[i * d + i], 0.0)));
    std::sort(sv.begin(), sv.end(), std::greater<double>());
    sv.resize(std::min(N, d));
    return sv;
}

double effective_rank(const std::vector<double>& singular_values) {
    double total = 0.0;
    for (double s : singular_values) {
        if (s < 0.0) throw ContractError("effective_rank: negative singular value");
        total += s;
    }
    if (total == 0.0) throw ContractError("effective_rank: all-zero spectrum");
    double entropy = 0.0;
    for (double s : singular_values) {
        if (s == 0.0) continue;
        const double p = s / total;
        entropy -= p * std::log(p);
    }
    return std::exp(entropy);
}

std::vector<std::pair<double, double>> per_dim_stats(const ValueMatrix& embeddings) {
    const std::size_t N = embeddings.rows, d = embeddings.cols;
    if (N < 2) throw ContractError("per_dim_stats: need at least 2 rows");
    std::vector<std::pair<double, double>> out(d);
    for (std::size_t c = 0; c < d; ++c) {
        double mean = 0.0;
        for (std::size_t r = 0; r < N; ++r) mean += embeddings.at(r, c);
        mean /= static_cast<double>(N);
        double var = 0.0;
        for (std::size_t r = 0; r < N; ++r) {
            const double dv = embeddings.at(r, c) - mean;
            var += dv * dv;
        }
        var /= static_cast<double>(N);
        out[c] = {mean, std::sqrt(var)};
    }
    return out;
}

double linear_probe(const ValueMatrix& train_embeddings, const std::vector<std::size_t>& train_labels,
                    const ValueMatrix& test_embeddings, const std::vector<std::size_t>& test_labels,
                    std::size_t num_classes, std::size_t epochs, double lr,
                    std::vector<double>* loss_history) {
    const std::size_t N = train_embeddings.rows, d = train_embeddings.cols;
    if (train_labels.size() != N || test_labels.size() != test_embeddings.rows)
        throw ContractError("linear_probe: label count mismatch");
    bool multi_class = false;
    for (std::size_t l : train_labels) {
        if (l >= num_classes) throw ContractError("linear_probe: label out of range");
        if (l != train_labels[0]) multi_class = true;
    }
    if (!multi_class) throw ContractError("linear_probe: single-class training set");

    std::vector<double> w(d * num_classes, 0.0), b(num_classes, 0.0);
    std::vector<double> logits(num_classes), probs(num_classes);
    std::vector<double> gw(d * num_classes), gb(num_classes);
    const double inv_n = 1.0 / static_cast<double>(N);
    if (loss_history) loss_history->clear();
    for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
        std::fill(gw.begin(), gw.end(), 0.0);
        std::fill(gb.begin(), gb.end(), 0.0);
        double epoch_loss = 0.0;
        for (std::size_t r = 0; r < N; ++r) {
            double mx = -1e300;
            for (std::size_t c = 0; c < num_classes; ++c) {
                double z = b[c];
                for (std::size_t i = 0; i < d; ++i) z += train_embeddings.at(r, i) * w[i * num_classes + c];
                logits[c] = z;
                mx = std::max(mx, z);
            }
            double zsum = 0.0;
            for (std::size_t c = 0; c < num_classes; ++c) {
                probs[c] = std::exp(logits[c] - mx);
                zsum += probs[c];
            }
            epoch_loss -= std::log(probs[train_labels[r]] / zsum) * inv_n;
            for (std::size_t c = 0; c < num_classes; ++c) {
                const double delta = probs[c] / zsum - (c == train_labels[r] ? 1.0 : 0.0);
                gb[c] += delta * inv_n;
                for (std::size_t i = 0; i < d; ++i)
                    gw[i * num_classes + c] += delta * train_embeddings.at(r, i) * inv_n;
            }
        }
        if (loss_history) loss_history->push_back(epoch_loss);
        for (std::size_t i = 0; i < w.size(); ++i) w[i] -= lr * gw[i];
        for (std::size_t c = 0; c < num_classes; ++c) b[c] -= lr * gb[c];
    }

    std::size_t correct = 0;
    for (std::size_t r = 0; r < test_embeddings.rows; ++r) {
        std::size_t best = 0;
        double best_z = -1e300;
        for (std::size_t c = 0; c < num_classes; ++c) {
            double z = b[c];
            for (std::size_t i = 0; i < d; ++i) z += test_embeddings.at(r, i) * w[i * num_classes + c];
            if (z > best_z) {
                best_z = z;
                best = c;
            }
        }
        if (best == test_labels[r]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(test_embeddings.rows);
}

EmbeddingStats embedding_stats(const ValueMatrix& embeddings, bool center) {
    EmbeddingStats s;
    s.uniformity = measure_uniformity(embeddings);
    s.per_dim = per_dim_stats(embeddings);
    s.singular_values = singular_spectrum(embeddings, center);
    s.effective_rank = effective_rank(s.singular_values);
    return s;
}

}  // namespace sepnorm
