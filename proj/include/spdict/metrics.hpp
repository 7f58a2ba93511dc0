#ifndef SPDICT_METRICS_HPP
#define SPDICT_METRICS_HPP

#include <numeric>
#include <optional>
#include <span>

#include "common.hpp"

/**
 * @file metrics.hpp
 * @brief Reconstruction and concept-alignment metrics: NMSE, 1-D logistic
 * probes, average precision, Purity@k and Coverage@tau.
 */

namespace spdict {

/// sum ||x_i - x_hat_i||^2 / sum ||x_i - x_bar||^2 with x_bar the mean of the originals.
template <class A, class B>
double nmse(const Eigen::MatrixBase<A>& originals, const Eigen::MatrixBase<B>& reconstructions) {
    require(originals.rows() >= 1, "nmse: empty evaluation set");
    require(originals.rows() == reconstructions.rows() && originals.cols() == reconstructions.cols(),
            "nmse: shape mismatch");
    const Matrix x = originals.template cast<double>();
    const Matrix x_hat = reconstructions.template cast<double>();
    const Eigen::RowVectorXd mean = x.colwise().mean();
    // Both sums share one loop order, so reconstructing every row as the mean scores exactly 1.
    double error = 0;
    double baseline = 0;
    for (Index c = 0; c < x.cols(); ++c) {
        for (Index r = 0; r < x.rows(); ++r) {
            const double e = x(r, c) - x_hat(r, c);
            const double v = x(r, c) - mean(c);
            error += e * e;
            baseline += v * v;
        }
    }
    if (!(baseline > 0)) {
        throw InvalidArgument("nmse: degenerate evaluation set (zero variance)");
    }
    return error / baseline;
}

/**
 * Streaming NMSE. The baseline uses per-dimension running means and squared
 * deviations merged chunk by chunk (Chan et al.), so no second pass is needed.
 */
class NmseAccumulator {
public:
    explicit NmseAccumulator(Index dim) : mean_(Eigen::RowVectorXd::Zero(dim)), m2_(Eigen::RowVectorXd::Zero(dim)) {}

    template <class A, class B>
    void add(const Eigen::MatrixBase<A>& x, const Eigen::MatrixBase<B>& x_hat) {
        require(x.rows() == x_hat.rows() && x.cols() == x_hat.cols() && x.cols() == mean_.size(),
                "nmse: shape mismatch");
        if (x.rows() == 0) {
            return;
        }
        const Matrix xd = x.template cast<double>();
        error_ += (xd - x_hat.template cast<double>()).squaredNorm();
        const auto nb = static_cast<double>(xd.rows());
        const Eigen::RowVectorXd chunk_mean = xd.colwise().mean();
        const Eigen::RowVectorXd chunk_m2 = (xd.rowwise() - chunk_mean).colwise().squaredNorm();
        const double na = count_;
        const Eigen::RowVectorXd delta = chunk_mean - mean_;
        mean_ += delta * (nb / (na + nb));
        m2_ += chunk_m2 + delta.cwiseAbs2() * (na * nb / (na + nb));
        count_ += nb;
    }

    double value() const {
        const double baseline = m2_.sum();
        require(count_ > 0, "nmse: empty evaluation set");
        if (!(baseline > 0)) {
            throw InvalidArgument("nmse: degenerate evaluation set (zero variance)");
        }
        return error_ / baseline;
    }

private:
    Eigen::RowVectorXd mean_;
    Eigen::RowVectorXd m2_;
    double count_ = 0;
    double error_ = 0;
};

enum class BiasInit { log_odds, prevalence };

struct ProbeOptions {
    double ridge = 1e-8;
    int steps = 30;
    int max_halvings = 20;
    BiasInit bias_init = BiasInit::log_odds;
};

/**
 * A 1-D logistic probe sigma(w z + b) for one (latent, class) pair. `loss` is
 * the mean binary cross-entropy at the fitted parameters and `bias_loss` the
 * same at the initialization w = 0, b = b0.
 */
struct ProbeFit {
    Index latent = -1;
    int class_id = -1;
    double w = 0;
    double b = 0;
    double loss = 0;
    double bias_loss = 0;
    double r = 0;
    bool valid = false;  ///< false when the labels contain a single class
    std::string note;
};

namespace detail {

inline double softplus(double t) { return std::max(t, 0.0) + std::log1p(std::exp(-std::abs(t))); }

inline double sigmoid(double t) {
    if (t >= 0) {
        return 1.0 / (1.0 + std::exp(-t));
    }
    const double e = std::exp(t);
    return e / (1.0 + e);
}

/// Rows with z = 0 share a logit, so they are folded into two counts.
struct CompressedProbeData {
    std::vector<double> z;
    std::vector<std::uint8_t> y;
    double zero_pos = 0;
    double zero_neg = 0;
    double count = 0;

    /// Mean BCE (without ridge).
    double bce(double w, double b) const {
        double total = zero_pos * softplus(-b) + zero_neg * softplus(b);
        for (std::size_t i = 0; i < z.size(); ++i) {
            const double t = w * z[i] + b;
            total += y[i] ? softplus(-t) : softplus(t);
        }
        return total / count;
    }
};

}  // namespace detail

/**
 * Fits w, b by damped Newton iterations on mean BCE + ridge * w^2, starting
 * from w = 0 and b at the class prior. Each step is halved until the objective
 * does not increase, so the fit never ends worse than its starting point.
 */
inline ProbeFit fit_1d_probe(std::span<const double> z, std::span<const std::uint8_t> y,
                             const ProbeOptions& options = {}) {
    require(z.size() == y.size(), "fit_1d_probe: scores and labels differ in length");
    require(!z.empty(), "fit_1d_probe: no rows");
    ProbeFit fit;
    detail::CompressedProbeData data;
    data.count = static_cast<double>(z.size());
    double positives = 0;
    for (std::size_t i = 0; i < z.size(); ++i) {
        require(std::isfinite(z[i]), "fit_1d_probe: non-finite score at row " + std::to_string(i));
        positives += y[i] ? 1.0 : 0.0;
        if (z[i] == 0.0) {
            (y[i] ? data.zero_pos : data.zero_neg) += 1.0;
        } else {
            data.z.push_back(z[i]);
            data.y.push_back(y[i] ? 1 : 0);
        }
    }
    if (positives == 0 || positives == data.count) {
        fit.note = positives == 0 ? "no positives" : "no negatives";
        return fit;
    }
    const double prior = positives / data.count;
    double w = 0;
    double b = options.bias_init == BiasInit::log_odds ? std::log(prior / (1.0 - prior)) : prior;
    const double ridge = options.ridge;
    auto objective = [&](double wv, double bv) { return data.bce(wv, bv) + ridge * wv * wv; };

    fit.bias_loss = data.bce(0.0, b);
    double current = objective(w, b);
    for (int step = 0; step < options.steps; ++step) {
        double gw = 0, gb = 0, hww = 0, hwb = 0, hbb = 0;
        {
            const double s0 = detail::sigmoid(b);
            const double n0 = data.zero_pos + data.zero_neg;
            gb += s0 * n0 - data.zero_pos;
            hbb += s0 * (1.0 - s0) * n0;
        }
        for (std::size_t i = 0; i < data.z.size(); ++i) {
            const double zi = data.z[i];
            const double s = detail::sigmoid(w * zi + b);
            const double r = s - data.y[i];
            const double c = s * (1.0 - s);
            gw += r * zi;
            gb += r;
            hww += c * zi * zi;
            hwb += c * zi;
            hbb += c;
        }
        gw = gw / data.count + 2.0 * ridge * w;
        gb /= data.count;
        hww = hww / data.count + 2.0 * ridge;
        hwb /= data.count;
        hbb /= data.count;

        double dw, db;
        const double det = hww * hbb - hwb * hwb;
        if (std::isfinite(det) && det > 1e-300) {
            dw = -(hbb * gw - hwb * gb) / det;
            db = -(hww * gb - hwb * gw) / det;
        } else {
            dw = -gw;
            db = -gb;
        }
        if (dw == 0 && db == 0) {
            break;
        }
        double alpha = 1.0;
        bool accepted = false;
        for (int h = 0; h <= options.max_halvings; ++h) {
            const double candidate = objective(w + alpha * dw, b + alpha * db);
            if (std::isfinite(candidate) && candidate <= current) {
                w += alpha * dw;
                b += alpha * db;
                current = candidate;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if (!accepted) {
            break;
        }
    }
    fit.w = w;
    fit.b = b;
    fit.loss = data.bce(w, b);
    fit.r = 1.0 - fit.loss / fit.bias_loss;
    fit.valid = true;
    return fit;
}

/**
 * Ranks rows by score (descending, ties by lower row index) and averages the
 * precision at the rank of each positive. No positives gives 0.
 */
inline double average_precision(std::span<const double> scores, std::span<const std::uint8_t> labels) {
    require(scores.size() == labels.size(), "average_precision: length mismatch");
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    double hits = 0;
    double sum = 0;
    for (std::size_t rank = 0; rank < order.size(); ++rank) {
        if (labels[order[rank]]) {
            hits += 1;
            sum += hits / static_cast<double>(rank + 1);
        }
    }
    return hits > 0 ? sum / hits : 0.0;
}

inline double mean_average_precision(std::span<const double> per_class_ap) {
    require(!per_class_ap.empty(), "mean_average_precision: no classes");
    return std::accumulate(per_class_ap.begin(), per_class_ap.end(), 0.0) / static_cast<double>(per_class_ap.size());
}

/// Fraction of `class_count` classes whose AP reaches tau.
inline double coverage_at_tau(std::span<const double> per_class_ap, double tau, Index class_count) {
    require(tau >= 0 && tau <= 1, "coverage_at_tau: tau must lie in [0, 1]");
    require(class_count >= 1, "coverage_at_tau: class_count must be >= 1");
    const auto covered = std::count_if(per_class_ap.begin(), per_class_ap.end(), [&](double ap) { return ap >= tau; });
    return static_cast<double>(covered) / static_cast<double>(class_count);
}

/// Indices of the k largest values, descending, ties by lower index.
template <class T>
std::vector<Index> top_k_rows(std::span<const T> values, Index k) {
    require(k >= 1 && k <= static_cast<Index>(values.size()), "top_k: k out of range");
    std::vector<Index> order(values.size());
    std::iota(order.begin(), order.end(), Index{0});
    std::partial_sort(order.begin(), order.begin() + k, order.end(), [&](Index a, Index b) {
        const auto va = values[static_cast<std::size_t>(a)];
        const auto vb = values[static_cast<std::size_t>(b)];
        return va > vb || (va == vb && a < b);
    });
    order.resize(static_cast<std::size_t>(k));
    return order;
}

struct PurityResult {
    double value = 0;  ///< mean over included latents; 0 when none qualify
    Index included = 0;
    Index excluded = 0;  ///< latents with fewer than k nonzero activations
    std::vector<double> per_latent;  ///< NaN for excluded latents
};

/**
 * For each latent (column of `codes`), the fraction of its top-k rows carrying
 * the majority label among them. Latents with fewer than k nonzero values are
 * excluded from the mean.
 */
template <class Derived>
PurityResult purity_at_k(const Eigen::MatrixBase<Derived>& codes, std::span<const std::uint16_t> labels, Index k) {
    require(static_cast<Index>(labels.size()) == codes.rows(), "purity: label count differs from row count");
    require(k >= 1 && k <= codes.rows(), "purity: k = " + std::to_string(k) + " exceeds row count " +
                                             std::to_string(codes.rows()));
    PurityResult out;
    out.per_latent.assign(static_cast<std::size_t>(codes.cols()), std::numeric_limits<double>::quiet_NaN());
    std::vector<double> column(static_cast<std::size_t>(codes.rows()));
    double total = 0;
    for (Index j = 0; j < codes.cols(); ++j) {
        Index nonzero = 0;
        for (Index r = 0; r < codes.rows(); ++r) {
            column[static_cast<std::size_t>(r)] = static_cast<double>(codes(r, j));
            nonzero += codes(r, j) != 0 ? 1 : 0;
        }
        if (nonzero < k) {
            ++out.excluded;
            continue;
        }
        const auto top = top_k_rows<double>(column, k);
        std::vector<std::uint16_t> top_labels;
        for (auto r : top) {
            top_labels.push_back(labels[static_cast<std::size_t>(r)]);
        }
        std::sort(top_labels.begin(), top_labels.end());
        Index best = 0;
        for (std::size_t i = 0; i < top_labels.size();) {
            std::size_t e = i;
            while (e < top_labels.size() && top_labels[e] == top_labels[i]) {
                ++e;
            }
            best = std::max<Index>(best, static_cast<Index>(e - i));
            i = e;
        }
        const double purity = static_cast<double>(best) / static_cast<double>(k);
        out.per_latent[static_cast<std::size_t>(j)] = purity;
        total += purity;
        ++out.included;
    }
    out.value = out.included > 0 ? total / static_cast<double>(out.included) : 0.0;
    return out;
}

}  // namespace spdict

#endif
