#ifndef SPDICT_BASELINES_HPP
#define SPDICT_BASELINES_HPP

#include "activation_store.hpp"
#include "checkpoint.hpp"
#include "trainer.hpp"

/**
 * @file baselines.hpp
 * @brief Label-free decomposition baselines: mini-batch k-means (nearest
 * centroid reconstruction, one-hot codes) and incremental PCA.
 */

namespace spdict {

struct KMeansConfig {
    Index batch_size = 16384;
    Index iterations = 100;
    std::uint64_t seed = 0;
};

struct KMeansModel {
    Matrix centroids;  ///< k x d
    std::vector<std::uint64_t> counts;

    Index k() const { return centroids.rows(); }
    Index d() const { return centroids.cols(); }
};

namespace detail {

/// Nearest centroid by exact squared distance; ties go to the lower index.
inline std::pair<Index, double> nearest_centroid(const Matrix& centroids, const auto& row) {
    Index best = 0;
    double best_dist = std::numeric_limits<double>::infinity();
    for (Index j = 0; j < centroids.rows(); ++j) {
        const double dist = (centroids.row(j) - row).squaredNorm();
        if (dist < best_dist) {
            best_dist = dist;
            best = j;
        }
    }
    return {best, best_dist};
}

/// k-means++ seeding over a pool of rows.
inline Matrix kmeans_plus_plus(const Matrix& pool, Index k, std::mt19937_64& rng) {
    const Index rows = pool.rows();
    Matrix centroids(k, pool.cols());
    std::vector<double> dist(static_cast<std::size_t>(rows), std::numeric_limits<double>::infinity());
    Index pick = std::uniform_int_distribution<Index>(0, rows - 1)(rng);
    for (Index c = 0; c < k; ++c) {
        centroids.row(c) = pool.row(pick);
        double total = 0;
        for (Index r = 0; r < rows; ++r) {
            auto& dr = dist[static_cast<std::size_t>(r)];
            dr = std::min(dr, (pool.row(r) - centroids.row(c)).squaredNorm());
            total += dr;
        }
        if (c + 1 == k) {
            break;
        }
        if (total > 0) {
            double target = std::uniform_real_distribution<double>(0.0, total)(rng);
            pick = rows - 1;
            for (Index r = 0; r < rows; ++r) {
                target -= dist[static_cast<std::size_t>(r)];
                if (target < 0 && dist[static_cast<std::size_t>(r)] > 0) {
                    pick = r;
                    break;
                }
            }
        } else {
            // Every pool row coincides with a centroid; duplicates are unavoidable.
            pick = std::uniform_int_distribution<Index>(0, rows - 1)(rng);
        }
    }
    return centroids;
}

}  // namespace detail

/**
 * Mini-batch k-means: each iteration assigns a shuffled batch to its nearest
 * centroids and moves each centroid toward its points with per-centroid step
 * 1 / count. Centroids that have never received a point after an iteration
 * are reseeded at the batch point farthest from its centroid.
 */
inline KMeansModel kmeans_fit(const Dataset& dataset, Index k, const KMeansConfig& config) {
    require(k >= 1, "kmeans: k must be >= 1");
    if (k > dataset.count()) {
        throw InvalidArgument("kmeans: k = " + std::to_string(k) + " exceeds dataset count " +
                              std::to_string(dataset.count()));
    }
    require(config.iterations >= 1, "kmeans: iterations must be >= 1");
    const Index batch_size = std::min(config.batch_size, dataset.count());
    require(batch_size >= 1, "kmeans: batch_size must be >= 1");

    std::mt19937_64 rng(mix_seed(config.seed, 0x6b6d));
    TrainingSampler sampler(dataset, batch_size, mix_seed(config.seed, 0x5eed));

    // Seeding pool: the first batches of the stream, at least k rows.
    const Index pool_rows = std::min(dataset.count(), std::max(batch_size, k));
    const auto init_ids = TrainingSampler(dataset, pool_rows, mix_seed(config.seed, 0x5eed)).next_ids(pool_rows);
    const Matrix pool = dataset.gather(init_ids).x;

    KMeansModel model;
    model.centroids = detail::kmeans_plus_plus(pool, k, rng);
    model.counts.assign(static_cast<std::size_t>(k), 0);

    for (Index it = 0; it < config.iterations; ++it) {
        const Matrix x = sampler.next(batch_size).x;
        std::vector<Index> assign(static_cast<std::size_t>(x.rows()));
        std::vector<double> dist(static_cast<std::size_t>(x.rows()));
        for (Index r = 0; r < x.rows(); ++r) {
            auto [j, d2] = detail::nearest_centroid(model.centroids, x.row(r));
            assign[static_cast<std::size_t>(r)] = j;
            dist[static_cast<std::size_t>(r)] = d2;
        }
        for (Index r = 0; r < x.rows(); ++r) {
            const auto j = assign[static_cast<std::size_t>(r)];
            auto& count = model.counts[static_cast<std::size_t>(j)];
            count += 1;
            const double eta = 1.0 / static_cast<double>(count);
            model.centroids.row(j) += eta * (x.row(r) - model.centroids.row(j));
        }
        for (Index j = 0; j < k; ++j) {
            if (model.counts[static_cast<std::size_t>(j)] != 0) {
                continue;
            }
            auto far = std::max_element(dist.begin(), dist.end());
            if (far == dist.end() || *far <= 0) {
                break;
            }
            const auto r = static_cast<Index>(far - dist.begin());
            model.centroids.row(j) = x.row(r);
            *far = 0;
        }
    }
    return model;
}

struct KMeansOutput {
    std::vector<Index> assignments;
    Matrix reconstructions;
    MatrixF codes;  ///< one-hot, rows x k
};

inline KMeansOutput kmeans_assign_reconstruct(const KMeansModel& model, const Matrix& x) {
    require(x.cols() == model.d(), "kmeans: batch width " + std::to_string(x.cols()) + ", expected " +
                                       std::to_string(model.d()));
    KMeansOutput out;
    out.assignments.resize(static_cast<std::size_t>(x.rows()));
    out.reconstructions.resize(x.rows(), x.cols());
    out.codes = MatrixF::Zero(x.rows(), model.k());
    for (Index r = 0; r < x.rows(); ++r) {
        const Index j = detail::nearest_centroid(model.centroids, x.row(r)).first;
        out.assignments[static_cast<std::size_t>(r)] = j;
        out.reconstructions.row(r) = model.centroids.row(j);
        out.codes(r, j) = 1.0f;
    }
    return out;
}

inline Checkpoint kmeans_checkpoint(const KMeansModel& model) {
    Checkpoint ck;
    ck.kind = ModelKind::kmeans;
    ck.n = static_cast<std::uint64_t>(model.k());
    ck.d = static_cast<std::uint64_t>(model.d());
    ck.tensors = {Tensor::from_matrix("centroids", model.centroids), Tensor::from_counts("counts", model.counts)};
    return ck;
}

inline KMeansModel kmeans_from_checkpoint(const Checkpoint& ck) {
    if (ck.kind != ModelKind::kmeans) {
        throw FormatError("checkpoint holds a " + to_string(ck.kind) + " model, not k-means");
    }
    KMeansModel model;
    model.centroids = ck.matrix("centroids", static_cast<Index>(ck.n), static_cast<Index>(ck.d));
    model.counts = ck.tensor("counts").u64;
    if (static_cast<std::uint64_t>(model.counts.size()) != ck.n) {
        throw FormatError("k-means checkpoint count tensor has the wrong length");
    }
    return model;
}

struct PcaConfig {
    Index batch_size = 16384;
    std::uint64_t seed = 0;
    Index epochs = 1;
};

struct PcaModel {
    Vector mean;                ///< d
    Matrix components;          ///< n_c x d, orthonormal rows
    Vector explained_variance;  ///< n_c, non-increasing
    Vector singular_values;     ///< n_c, carried between incremental updates
    std::uint64_t samples_seen = 0;

    Index n_components() const { return components.rows(); }
    Index d() const { return components.cols(); }

    /**
     * Folds one batch into the model: the retained spectrum S V, the centered
     * batch and a mean-shift correction row are stacked and re-decomposed,
     * keeping the top components. Exact when n_components covers the data rank.
     */
    void partial_fit(const Matrix& x) {
        require(x.cols() == d(), "pca: batch width mismatch");
        if (x.rows() == 0) {
            return;
        }
        const Index nc = n_components();
        const auto seen = static_cast<double>(samples_seen);
        const auto nb = static_cast<double>(x.rows());
        const Vector batch_mean = x.colwise().mean().transpose();

        Matrix stacked;
        if (samples_seen == 0) {
            require(x.rows() >= nc, "pca: first batch must have at least n_components rows");
            stacked = x.rowwise() - batch_mean.transpose();
        } else {
            stacked.resize(nc + x.rows() + 1, d());
            stacked.topRows(nc) = singular_values.asDiagonal() * components;
            stacked.middleRows(nc, x.rows()) = x.rowwise() - batch_mean.transpose();
            stacked.bottomRows(1) = std::sqrt(seen * nb / (seen + nb)) * (mean - batch_mean).transpose();
        }
        Eigen::BDCSVD<Matrix> svd(stacked, Eigen::ComputeThinV);
        const Matrix v = svd.matrixV();
        for (Index c = 0; c < nc; ++c) {
            Eigen::RowVectorXd row = v.col(c).transpose();
            Index pivot = 0;
            row.cwiseAbs().maxCoeff(&pivot);
            if (row(pivot) < 0) {
                row = -row;
            }
            components.row(c) = row;
            singular_values(c) = svd.singularValues()(c);
        }
        mean = (seen * mean + nb * batch_mean) / (seen + nb);
        samples_seen += static_cast<std::uint64_t>(x.rows());
        const double denom = std::max(1.0, static_cast<double>(samples_seen) - 1.0);
        explained_variance = singular_values.cwiseAbs2() / denom;
    }
};

inline PcaModel pca_fit(const Dataset& dataset, Index n_components, const PcaConfig& config) {
    require(n_components >= 1, "pca: n_components must be >= 1");
    if (n_components > dataset.dim()) {
        throw InvalidArgument("pca: n_components = " + std::to_string(n_components) + " exceeds dim " +
                              std::to_string(dataset.dim()));
    }
    require(config.batch_size >= 1 && config.epochs >= 1, "pca: batch_size and epochs must be >= 1");
    require(std::min(config.batch_size, dataset.count()) >= n_components,
            "pca: batches must hold at least n_components rows");
    PcaModel model;
    model.mean = Vector::Zero(dataset.dim());
    model.components = Matrix::Zero(n_components, dataset.dim());
    model.singular_values = Vector::Zero(n_components);
    model.explained_variance = Vector::Zero(n_components);
    for (Index epoch = 0; epoch < config.epochs; ++epoch) {
        auto stream = stream_batches(dataset, config.batch_size, config.seed, static_cast<std::uint64_t>(epoch));
        while (auto batch = stream.next()) {
            model.partial_fit(batch->x);
        }
    }
    return model;
}

struct PcaOutput {
    Matrix scores;  ///< rows x n_c
    Matrix reconstructions;
};

inline PcaOutput pca_project_reconstruct(const PcaModel& model, const Matrix& x) {
    require(x.cols() == model.d(), "pca: batch width " + std::to_string(x.cols()) + ", expected " +
                                       std::to_string(model.d()));
    PcaOutput out;
    const Matrix centered = x.rowwise() - model.mean.transpose();
    out.scores = centered * model.components.transpose();
    out.reconstructions = (out.scores * model.components).rowwise() + model.mean.transpose();
    return out;
}

inline Checkpoint pca_checkpoint(const PcaModel& model) {
    Checkpoint ck;
    ck.kind = ModelKind::pca;
    ck.n = static_cast<std::uint64_t>(model.n_components());
    ck.d = static_cast<std::uint64_t>(model.d());
    ck.step = model.samples_seen;
    ck.tensors = {Tensor::from_matrix("mean", model.mean), Tensor::from_matrix("components", model.components),
                  Tensor::from_matrix("explained_variance", model.explained_variance),
                  Tensor::from_matrix("singular_values", model.singular_values)};
    return ck;
}

inline PcaModel pca_from_checkpoint(const Checkpoint& ck) {
    if (ck.kind != ModelKind::pca) {
        throw FormatError("checkpoint holds a " + to_string(ck.kind) + " model, not PCA");
    }
    const auto nc = static_cast<Index>(ck.n);
    const auto d = static_cast<Index>(ck.d);
    PcaModel model;
    model.mean = ck.matrix("mean", d, 1);
    model.components = ck.matrix("components", nc, d);
    model.explained_variance = ck.matrix("explained_variance", nc, 1);
    model.singular_values = ck.matrix("singular_values", nc, 1);
    model.samples_seen = ck.step;
    return model;
}

}  // namespace spdict

#endif
