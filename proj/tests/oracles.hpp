#ifndef SPDICT_TEST_ORACLES_HPP
#define SPDICT_TEST_ORACLES_HPP

// Slow, independent reference implementations used to check the library.
// Nothing here calls into the code under test except for plain data types.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <random>
#include <vector>

#include "spdict/common.hpp"
#include "spdict/sae.hpp"

namespace oracle {

using spdict::Index;
using spdict::Matrix;
using spdict::SaeParams;
using spdict::Vector;

/// Scalar-loop nested-prefix loss; sizes = {n} gives the plain objective.
inline double sae_loss(const SaeParams& p, const Matrix& x, double lambda, const std::vector<Index>& sizes) {
    const Index n = p.w_enc.rows();
    const Index d = p.w_enc.cols();
    double recon = 0;
    double l1 = 0;
    for (Index r = 0; r < x.rows(); ++r) {
        std::vector<double> f(static_cast<std::size_t>(n));
        for (Index j = 0; j < n; ++j) {
            double h = p.b_enc(j);
            for (Index i = 0; i < d; ++i) {
                h += p.w_enc(j, i) * (x(r, i) - p.b_dec(i));
            }
            f[static_cast<std::size_t>(j)] = h > 0 ? h : 0.0;
            l1 += f[static_cast<std::size_t>(j)];
        }
        for (Index m : sizes) {
            for (Index i = 0; i < d; ++i) {
                double xhat = p.b_dec(i);
                for (Index j = 0; j < m; ++j) {
                    xhat += p.w_dec(i, j) * f[static_cast<std::size_t>(j)];
                }
                recon += (x(r, i) - xhat) * (x(r, i) - xhat);
            }
        }
    }
    const auto b = static_cast<double>(x.rows());
    return recon / b + lambda * l1 / b;
}

/// Smallest |pre-activation| over the batch; finite differences are valid only away from the ReLU kink.
inline double min_abs_preactivation(const SaeParams& p, const Matrix& x) {
    const Matrix h = ((x.rowwise() - p.b_dec.transpose()) * p.w_enc.transpose()).rowwise() + p.b_enc.transpose();
    return h.cwiseAbs().minCoeff();
}

/// Visits every scalar parameter as (tensor index, reference).
inline void for_each_param(SaeParams& p, const std::function<void(int, Index, double&)>& fn) {
    for (Index i = 0; i < p.w_enc.size(); ++i) fn(0, i, p.w_enc.data()[i]);
    for (Index i = 0; i < p.b_enc.size(); ++i) fn(1, i, p.b_enc.data()[i]);
    for (Index i = 0; i < p.w_dec.size(); ++i) fn(2, i, p.w_dec.data()[i]);
    for (Index i = 0; i < p.b_dec.size(); ++i) fn(3, i, p.b_dec.data()[i]);
}

inline double grad_entry(const spdict::Gradients& g, int tensor, Index i) {
    switch (tensor) {
        case 0: return g.w_enc.data()[i];
        case 1: return g.b_enc.data()[i];
        case 2: return g.w_dec.data()[i];
        default: return g.b_dec.data()[i];
    }
}

/// Worst relative error between analytic gradients and central differences of the scalar loss.
inline double max_fd_relative_error(const SaeParams& params, const Matrix& x, double lambda,
                                    const std::vector<Index>& sizes, const spdict::Gradients& analytic,
                                    double step = 1e-6) {
    SaeParams p = params;
    double worst = 0;
    for_each_param(p, [&](int tensor, Index i, double& v) {
        const double saved = v;
        v = saved + step;
        const double up = sae_loss(p, x, lambda, sizes);
        v = saved - step;
        const double down = sae_loss(p, x, lambda, sizes);
        v = saved;
        const double numeric = (up - down) / (2 * step);
        const double a = grad_entry(analytic, tensor, i);
        const double denom = std::max({std::abs(a), std::abs(numeric), 1e-6});
        worst = std::max(worst, std::abs(a - numeric) / denom);
    });
    return worst;
}

/// Random SAE with Gaussian weights and unit decoder columns.
inline SaeParams random_params(Index n, Index d, std::mt19937_64& rng, double scale = 0.5) {
    std::normal_distribution<double> normal;
    SaeParams p = SaeParams::zeros(n, d);
    for (Index i = 0; i < p.w_enc.size(); ++i) p.w_enc.data()[i] = scale * normal(rng);
    for (Index i = 0; i < p.b_enc.size(); ++i) p.b_enc.data()[i] = 0.3 * normal(rng);
    for (Index i = 0; i < p.w_dec.size(); ++i) p.w_dec.data()[i] = normal(rng);
    for (Index i = 0; i < p.b_dec.size(); ++i) p.b_dec.data()[i] = 0.2 * normal(rng);
    for (Index j = 0; j < n; ++j) p.w_dec.col(j).normalize();
    return p;
}

inline Matrix random_matrix(Index rows, Index cols, std::mt19937_64& rng) {
    std::normal_distribution<double> normal;
    Matrix m(rows, cols);
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = normal(rng);
    return m;
}

/// Random strictly increasing prefix list ending at n with `count` entries.
inline std::vector<Index> random_prefixes(Index n, std::size_t count, std::mt19937_64& rng) {
    std::vector<Index> pool(static_cast<std::size_t>(n - 1));
    std::iota(pool.begin(), pool.end(), Index{1});
    std::shuffle(pool.begin(), pool.end(), rng);
    pool.resize(std::min(pool.size(), count - 1));
    std::sort(pool.begin(), pool.end());
    pool.push_back(n);
    return pool;
}

/// Average precision by explicit rank walk: ties broken by lower row id.
inline double average_precision(const std::vector<double>& scores, const std::vector<bool>& positive) {
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (scores[a] != scores[b]) return scores[a] > scores[b];
        return a < b;
    });
    double hits = 0;
    double sum = 0;
    for (std::size_t rank = 0; rank < order.size(); ++rank) {
        if (positive[order[rank]]) {
            hits += 1;
            sum += hits / static_cast<double>(rank + 1);
        }
    }
    return hits > 0 ? sum / hits : 0.0;
}

/// Mean binary cross-entropy of the logistic model w * s + b.
inline double probe_loss(const std::vector<double>& s, const std::vector<std::uint8_t>& y, double w, double b) {
    double total = 0;
    for (std::size_t i = 0; i < s.size(); ++i) {
        const double z = w * s[i] + b;
        // log(1 + e^z) - y z, evaluated stably
        const double softplus = z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
        total += softplus - (y[i] ? z : 0.0);
    }
    return total / static_cast<double>(s.size());
}

/// Coarse-to-fine grid minimisation of the 1-D probe loss.
inline std::pair<double, double> probe_grid_search(const std::vector<double>& s, const std::vector<std::uint8_t>& y,
                                                   double w_range, double b_range) {
    double best_w = 0, best_b = 0, best = probe_loss(s, y, 0, 0);
    double cw = 0, cb = 0, rw = w_range, rb = b_range;
    for (int level = 0; level < 40; ++level) {
        for (int i = -10; i <= 10; ++i) {
            for (int j = -10; j <= 10; ++j) {
                const double w = cw + rw * i / 10.0;
                const double b = cb + rb * j / 10.0;
                const double l = probe_loss(s, y, w, b);
                if (l < best) {
                    best = l;
                    best_w = w;
                    best_b = b;
                }
            }
        }
        cw = best_w;
        cb = best_b;
        rw *= 0.35;
        rb *= 0.35;
    }
    return {best_w, best_b};
}

/// Hungarian algorithm (minimisation) on a square cost matrix; returns column for each row.
inline std::vector<int> hungarian(const std::vector<std::vector<double>>& cost) {
    const int n = static_cast<int>(cost.size());
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> u(n + 1), v(n + 1);
    std::vector<int> p(n + 1), way(n + 1);
    for (int i = 1; i <= n; ++i) {
        p[0] = i;
        int j0 = 0;
        std::vector<double> minv(n + 1, inf);
        std::vector<bool> used(n + 1, false);
        do {
            used[j0] = true;
            const int i0 = p[j0];
            double delta = inf;
            int j1 = 0;
            for (int j = 1; j <= n; ++j) {
                if (!used[j]) {
                    const double cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if (cur < minv[j]) {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if (minv[j] < delta) {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for (int j = 0; j <= n; ++j) {
                if (used[j]) {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (p[j0] != 0);
        do {
            const int j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        } while (j0);
    }
    std::vector<int> assignment(n);
    for (int j = 1; j <= n; ++j) {
        assignment[p[j] - 1] = j - 1;
    }
    return assignment;
}

/// Fraction of true atoms whose best-matching learned column has |cosine| >= threshold.
inline double atom_recovery(const Matrix& truth, const Matrix& learned, double threshold) {
    Index hits = 0;
    for (Index a = 0; a < truth.cols(); ++a) {
        double best = 0;
        const Vector t = truth.col(a).normalized();
        for (Index j = 0; j < learned.cols(); ++j) {
            const double nrm = learned.col(j).norm();
            if (nrm > 0) {
                best = std::max(best, std::abs(t.dot(learned.col(j)) / nrm));
            }
        }
        if (best >= threshold) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(truth.cols());
}

/// Top-k majority purity by full sort; latents with fewer than k nonzeros are skipped.
struct PurityOracle {
    double value = 0;
    Index included = 0;
};

inline PurityOracle purity_at_k(const spdict::MatrixF& codes, const std::vector<std::uint16_t>& labels, Index k) {
    PurityOracle out;
    double total = 0;
    for (Index j = 0; j < codes.cols(); ++j) {
        std::vector<std::pair<float, Index>> pairs;
        Index nonzero = 0;
        for (Index r = 0; r < codes.rows(); ++r) {
            pairs.push_back({-codes(r, j), r});
            nonzero += codes(r, j) != 0;
        }
        if (nonzero < k) continue;
        std::sort(pairs.begin(), pairs.end());
        std::map<int, int> counts;
        int best = 0;
        for (Index i = 0; i < k; ++i) {
            best = std::max(best, ++counts[labels[static_cast<std::size_t>(pairs[static_cast<std::size_t>(i)].second)]]);
        }
        total += best / static_cast<double>(k);
        ++out.included;
    }
    out.value = out.included ? total / static_cast<double>(out.included) : 0.0;
    return out;
}

/// Squared error over squared deviation from the per-dimension mean, in long double.
inline double nmse(const Matrix& x, const Matrix& xhat) {
    long double err = 0, base = 0;
    for (Index c = 0; c < x.cols(); ++c) {
        long double mean = 0;
        for (Index r = 0; r < x.rows(); ++r) mean += x(r, c);
        mean /= static_cast<long double>(x.rows());
        for (Index r = 0; r < x.rows(); ++r) {
            err += (static_cast<long double>(x(r, c)) - xhat(r, c)) * (static_cast<long double>(x(r, c)) - xhat(r, c));
            base += (x(r, c) - mean) * (x(r, c) - mean);
        }
    }
    return static_cast<double>(err / base);
}

/// Latent whose grid-searched probe has the lowest loss; ties within 1e-9 keep the lower id.
inline std::pair<Index, double> best_latent(const spdict::MatrixF& codes, const std::vector<std::uint8_t>& y,
                                            double range = 10.0) {
    double best = std::numeric_limits<double>::infinity();
    Index best_j = -1;
    for (Index j = 0; j < codes.cols(); ++j) {
        std::vector<double> z(static_cast<std::size_t>(codes.rows()));
        for (Index r = 0; r < codes.rows(); ++r) z[static_cast<std::size_t>(r)] = codes(r, j);
        auto [w, b] = probe_grid_search(z, y, range, range);
        const double l = probe_loss(z, y, w, b);
        if (l < best - 1e-9) {
            best = l;
            best_j = j;
        }
    }
    return {best_j, best};
}

/// Logistic data on sparse-code-like scores: a third of the rows score exactly zero.
inline void random_probe_problem(std::mt19937_64& rng, std::vector<double>& z, std::vector<std::uint8_t>& y,
                                 int rows = 300) {
    std::normal_distribution<double> normal;
    std::uniform_real_distribution<double> u(0, 1);
    const double slope = 0.5 + 2 * u(rng);
    const double offset = normal(rng);
    z.clear();
    y.clear();
    for (int i = 0; i < rows; ++i) {
        const double zi = u(rng) < 0.33 ? 0.0 : std::max(0.0, 1.0 + normal(rng));
        z.push_back(zi);
        const double p = 1.0 / (1.0 + std::exp(-(slope * zi + offset)));
        y.push_back(u(rng) < p ? 1 : 0);
    }
}

/**
 * One-to-one greedy matching of true atoms to learned columns by descending
 * |cosine|; returns the fraction of atoms whose match reaches the threshold.
 */
inline double greedy_atom_matching(const Matrix& truth, const Matrix& learned, double threshold) {
    struct Pair {
        double score;
        Index atom;
        Index column;
    };
    std::vector<Pair> pairs;
    for (Index a = 0; a < truth.cols(); ++a) {
        const Vector t = truth.col(a).normalized();
        for (Index j = 0; j < learned.cols(); ++j) {
            const double nrm = learned.col(j).norm();
            pairs.push_back({nrm > 0 ? std::abs(t.dot(learned.col(j)) / nrm) : 0.0, a, j});
        }
    }
    std::stable_sort(pairs.begin(), pairs.end(), [](const Pair& a, const Pair& b) { return a.score > b.score; });
    std::vector<bool> atom_used(static_cast<std::size_t>(truth.cols())), col_used(static_cast<std::size_t>(learned.cols()));
    Index hits = 0;
    for (const auto& p : pairs) {
        if (atom_used[static_cast<std::size_t>(p.atom)] || col_used[static_cast<std::size_t>(p.column)]) continue;
        atom_used[static_cast<std::size_t>(p.atom)] = col_used[static_cast<std::size_t>(p.column)] = true;
        hits += p.score >= threshold;
    }
    return static_cast<double>(hits) / static_cast<double>(truth.cols());
}

}  // namespace oracle

#endif
