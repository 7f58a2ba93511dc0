#ifndef SPDICT_SAE_HPP
#define SPDICT_SAE_HPP

#include <optional>
#include <span>

#include "activation_store.hpp"
#include "common.hpp"

/**
 * @file sae.hpp
 * @brief ReLU sparse autoencoder: forward passes, vanilla and Matryoshka losses,
 * closed-form gradients and the unit-norm decoder constraint.
 *
 * Batches are row-major in the sense of one example per matrix row:
 *
 *     h     = W_enc (x - b_dec) + b_enc
 *     f(x)  = ReLU(h)
 *     x_hat = W_dec f(x) + b_dec
 */

namespace spdict {

enum class Objective : std::uint32_t { vanilla = 0, matryoshka = 1 };

inline std::string to_string(Objective o) { return o == Objective::vanilla ? "vanilla" : "matryoshka"; }

inline Objective objective_from_string(const std::string& s) {
    if (s == "vanilla") {
        return Objective::vanilla;
    }
    if (s == "matryoshka") {
        return Objective::matryoshka;
    }
    throw FormatError("unknown objective '" + s + "' (expected vanilla or matryoshka)");
}

template <class Scalar>
struct BasicSaeParams {
    using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
    using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

    Mat w_enc;  ///< n x d
    Vec b_enc;  ///< n
    Mat w_dec;  ///< d x n
    Vec b_dec;  ///< d

    Index n() const { return w_enc.rows(); }
    Index d() const { return w_enc.cols(); }

    static BasicSaeParams zeros(Index n, Index d) {
        require(n >= 1 && d >= 1, "SAE shape must be positive");
        return {Mat::Zero(n, d), Vec::Zero(n), Mat::Zero(d, n), Vec::Zero(d)};
    }

    void check_shapes() const {
        require(n() >= 1 && d() >= 1, "SAE shape must be positive");
        require(b_enc.size() == n() && w_dec.rows() == d() && w_dec.cols() == n() && b_dec.size() == d(),
                "inconsistent SAE parameter shapes");
    }

    bool finite() const { return w_enc.allFinite() && b_enc.allFinite() && w_dec.allFinite() && b_dec.allFinite(); }

    /// Largest deviation of a decoder column norm from 1.
    Scalar max_decoder_norm_error() const {
        Scalar worst = 0;
        for (Index j = 0; j < n(); ++j) {
            worst = std::max(worst, std::abs(w_dec.col(j).norm() - Scalar(1)));
        }
        return worst;
    }

    /// Exact equality of shapes and every entry.
    bool identical(const BasicSaeParams& o) const {
        auto same = [](const auto& a, const auto& b) {
            return a.rows() == b.rows() && a.cols() == b.cols() && (a.size() == 0 || a == b);
        };
        return same(w_enc, o.w_enc) && same(b_enc, o.b_enc) && same(w_dec, o.w_dec) && same(b_dec, o.b_dec);
    }
};

using SaeParams = BasicSaeParams<double>;

/// Gradients (or Adam moments) with the same layout as the parameters.
template <class Scalar>
using BasicGradients = BasicSaeParams<Scalar>;
using Gradients = BasicGradients<double>;

struct LatentCode {
    Vector pre;    ///< h
    Vector codes;  ///< f(x) = max(h, 0)

    std::vector<Index> active() const {
        std::vector<Index> out;
        for (Index i = 0; i < codes.size(); ++i) {
            if (codes(i) > 0) {
                out.push_back(i);
            }
        }
        return out;
    }
};

inline LatentCode encode(const SaeParams& p, const Vector& x) {
    require(x.size() == p.d(), "encode: input has length " + std::to_string(x.size()) + ", expected " +
                                   std::to_string(p.d()));
    LatentCode code;
    code.pre = p.w_enc * (x - p.b_dec) + p.b_enc;
    code.codes = code.pre.cwiseMax(0.0);
    return code;
}

inline Vector decode(const SaeParams& p, const Vector& codes) {
    require(codes.size() == p.n(), "decode: code has length " + std::to_string(codes.size()) + ", expected " +
                                       std::to_string(p.n()));
    return p.w_dec * codes + p.b_dec;
}

/// Pre-activations for a batch (one example per row).
inline Matrix encode_pre(const SaeParams& p, const Matrix& x) {
    require(x.cols() == p.d(), "encode: batch width " + std::to_string(x.cols()) + ", expected " +
                                   std::to_string(p.d()));
    return ((x.rowwise() - p.b_dec.transpose()) * p.w_enc.transpose()).rowwise() + p.b_enc.transpose();
}

inline Matrix encode_batch(const SaeParams& p, const Matrix& x) { return encode_pre(p, x).cwiseMax(0.0); }

inline Matrix decode_batch(const SaeParams& p, const Matrix& codes) {
    require(codes.cols() == p.n(), "decode: code width " + std::to_string(codes.cols()) + ", expected " +
                                       std::to_string(p.n()));
    return (codes * p.w_dec.transpose()).rowwise() + p.b_dec.transpose();
}

/// Number of strictly positive entries.
inline double l0(const LatentCode& code) { return static_cast<double>((code.codes.array() > 0).count()); }

inline double mean_l0(const Matrix& codes) {
    if (codes.rows() == 0) {
        return 0.0;
    }
    return static_cast<double>((codes.array() > 0).count()) / static_cast<double>(codes.rows());
}

/**
 * Nested prefix sizes m_1 < ... < m_K = n. Training samples ten of these per
 * step; other sizes are accepted for analysis and tests.
 */
class PrefixSet {
public:
    PrefixSet() = default;

    PrefixSet(std::vector<Index> sizes, Index n) : sizes_(std::move(sizes)) {
        require(!sizes_.empty(), "prefix set is empty");
        for (std::size_t i = 0; i < sizes_.size(); ++i) {
            require(sizes_[i] >= 1 && sizes_[i] <= n,
                    "prefix " + std::to_string(sizes_[i]) + " outside [1, " + std::to_string(n) + "]");
            require(i == 0 || sizes_[i] > sizes_[i - 1], "prefix sizes must be strictly increasing");
        }
        require(sizes_.back() == n, "last prefix must equal n = " + std::to_string(n));
    }

    static PrefixSet full(Index n) { return PrefixSet({n}, n); }

    const std::vector<Index>& sizes() const { return sizes_; }
    std::size_t size() const { return sizes_.size(); }
    Index n() const { return sizes_.empty() ? 0 : sizes_.back(); }

    bool operator==(const PrefixSet&) const = default;

private:
    std::vector<Index> sizes_;
};

struct LossBreakdown {
    double reconstruction = 0;
    double sparsity = 0;  ///< mean L1 of f(x)
    double lambda = 0;
    double total = 0;
    std::vector<double> prefix_mse;  ///< Matryoshka only, one per prefix
};

/// Loss, gradients and activation statistics from one forward/backward pass.
struct LossAndGradients {
    LossBreakdown loss;
    Gradients grads;
    double mean_l0 = 0;
    Eigen::VectorXi fired;  ///< per-latent count of rows with f > 0
};

namespace detail {

inline void check_batch(const SaeParams& p, const Matrix& x, double lambda) {
    require(x.rows() >= 1, "loss: empty batch");
    require(x.cols() == p.d(), "loss: batch width " + std::to_string(x.cols()) + ", expected " +
                                   std::to_string(p.d()));
    require(lambda >= 0, "loss: lambda must be non-negative");
}

/**
 * Shared forward/backward over nested prefixes. Latents in [m_{k-1}, m_k) appear
 * in prefixes k..K, so their gradient sees the suffix sum of prefix residuals.
 * The vanilla objective is the single-prefix case M = [n].
 */
inline LossAndGradients prefix_forward_backward(const SaeParams& p, const Matrix& x, double lambda,
                                                const PrefixSet& prefixes, bool want_grads) {
    check_batch(p, x, lambda);
    require(prefixes.n() == p.n(), "prefix set does not end at n = " + std::to_string(p.n()));
    const auto batch = static_cast<double>(x.rows());
    const auto& sizes = prefixes.sizes();
    const std::size_t segments = sizes.size();

    const Matrix u = x.rowwise() - p.b_dec.transpose();
    const Matrix h = (u * p.w_enc.transpose()).rowwise() + p.b_enc.transpose();
    const Matrix f = h.cwiseMax(0.0);

    LossAndGradients out;
    out.loss.lambda = lambda;
    out.loss.sparsity = f.sum() / batch;
    out.loss.prefix_mse.resize(segments);
    out.fired = (f.array() > 0).cast<int>().colwise().sum().transpose();
    out.mean_l0 = static_cast<double>(out.fired.sum()) / batch;

    std::vector<Matrix> residual(segments);
    Matrix running = (-x).rowwise() + p.b_dec.transpose();
    Index begin = 0;
    for (std::size_t k = 0; k < segments; ++k) {
        const Index len = sizes[k] - begin;
        running.noalias() += f.middleCols(begin, len) * p.w_dec.middleCols(begin, len).transpose();
        out.loss.prefix_mse[k] = running.squaredNorm() / batch;
        out.loss.reconstruction += out.loss.prefix_mse[k];
        if (want_grads) {
            residual[k] = running;
        }
        begin = sizes[k];
    }
    out.loss.total = out.loss.reconstruction + lambda * out.loss.sparsity;
    if (!want_grads) {
        return out;
    }

    // Suffix sums in place: residual[k] becomes sum_{t >= k} r_t.
    for (std::size_t k = segments - 1; k-- > 0;) {
        residual[k] += residual[k + 1];
    }

    Gradients& g = out.grads;
    g.w_dec.resize(p.d(), p.n());
    Matrix df(x.rows(), p.n());
    begin = 0;
    for (std::size_t k = 0; k < segments; ++k) {
        const Index len = sizes[k] - begin;
        g.w_dec.middleCols(begin, len).noalias() = (2.0 / batch) * residual[k].transpose() * f.middleCols(begin, len);
        df.middleCols(begin, len).noalias() = (2.0 / batch) * residual[k] * p.w_dec.middleCols(begin, len);
        begin = sizes[k];
    }
    df.array() += lambda / batch;
    // ReLU subgradient is 0 at h = 0.
    const Matrix dh = (h.array() > 0).select(df, 0.0);
    g.w_enc.noalias() = dh.transpose() * u;
    g.b_enc = dh.colwise().sum().transpose();
    g.b_dec = (2.0 / batch) * residual[0].colwise().sum().transpose() - p.w_enc.transpose() * g.b_enc;
    return out;
}

}  // namespace detail

/// Mean over the batch of ||x - x_hat||^2 plus lambda times the mean L1 of f(x).
inline LossBreakdown vanilla_loss(const SaeParams& p, const Matrix& x, double lambda) {
    detail::check_batch(p, x, lambda);
    const auto batch = static_cast<double>(x.rows());
    const Matrix f = encode_batch(p, x);
    const Matrix r = decode_batch(p, f) - x;
    LossBreakdown out;
    out.lambda = lambda;
    out.reconstruction = r.squaredNorm() / batch;
    out.sparsity = f.sum() / batch;
    out.total = out.reconstruction + lambda * out.sparsity;
    return out;
}

/// Sum over prefixes of the mean squared error of prefix reconstructions, plus one sparsity term on the full code.
inline LossBreakdown matryoshka_loss(const SaeParams& p, const Matrix& x, double lambda, const PrefixSet& prefixes) {
    return detail::prefix_forward_backward(p, x, lambda, prefixes, false).loss;
}

inline LossBreakdown vanilla_loss(const SaeParams& p, const ActivationBatch& batch, double lambda) {
    return vanilla_loss(p, batch.x, lambda);
}

inline LossBreakdown matryoshka_loss(const SaeParams& p, const ActivationBatch& batch, double lambda,
                                     const PrefixSet& prefixes) {
    return matryoshka_loss(p, batch.x, lambda, prefixes);
}

/// Loss and gradients of the mean-batch objective with respect to all four parameter tensors.
inline LossAndGradients loss_and_gradients(const SaeParams& p, const Matrix& x, double lambda, Objective objective,
                                           const std::optional<PrefixSet>& prefixes = std::nullopt) {
    if (objective == Objective::matryoshka) {
        require(prefixes.has_value(), "matryoshka objective requires a prefix set");
        return detail::prefix_forward_backward(p, x, lambda, *prefixes, true);
    }
    return detail::prefix_forward_backward(p, x, lambda, PrefixSet::full(p.n()), true);
}

inline Gradients backward(const SaeParams& p, const Matrix& x, double lambda, Objective objective,
                          const std::optional<PrefixSet>& prefixes = std::nullopt) {
    return loss_and_gradients(p, x, lambda, objective, prefixes).grads;
}

/// Removes from each decoder-column gradient its component along that column.
inline void project_decoder_gradient(const SaeParams& p, Gradients& g) {
    for (Index j = 0; j < p.n(); ++j) {
        const double norm2 = p.w_dec.col(j).squaredNorm();
        if (!(norm2 > 0)) {
            throw InvalidArgument("decoder column " + std::to_string(j) + " has zero norm");
        }
        g.w_dec.col(j) -= (g.w_dec.col(j).dot(p.w_dec.col(j)) / norm2) * p.w_dec.col(j);
    }
}

/// Rescales every decoder column to unit L2 norm.
template <class Scalar>
void normalize_decoder(BasicSaeParams<Scalar>& p) {
    for (Index j = 0; j < p.n(); ++j) {
        const Scalar norm = p.w_dec.col(j).norm();
        if (!(norm > 0)) {
            throw InvalidArgument("decoder column " + std::to_string(j) + " has zero norm");
        }
        p.w_dec.col(j) /= norm;
    }
}

}  // namespace spdict

#endif
