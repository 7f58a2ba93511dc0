#ifndef SPDICT_EVALUATION_HPP
#define SPDICT_EVALUATION_HPP

#include <variant>

#include "baselines.hpp"
#include "checkpoint.hpp"
#include "metrics.hpp"
#include "sae.hpp"

/**
 * @file evaluation.hpp
 * @brief Concept-alignment evaluation of a trained dictionary against labeled
 * patch splits, and probe-based model selection.
 *
 * Protocol: codes are computed for a training and a validation split. For
 * every class, a 1-D probe is fit on every latent over the training split and
 * the latent with the lowest training loss is selected. AP, Purity@k,
 * Coverage@tau, Probe R, NMSE and L0 are then measured on the validation split.
 */

namespace spdict {

using AnyModel = std::variant<SaeParams, KMeansModel, PcaModel>;

inline ModelKind model_kind(const AnyModel& model) {
    return std::visit(
        [](const auto& m) {
            using M = std::decay_t<decltype(m)>;
            if constexpr (std::is_same_v<M, SaeParams>) {
                return ModelKind::sae;
            } else if constexpr (std::is_same_v<M, KMeansModel>) {
                return ModelKind::kmeans;
            } else {
                return ModelKind::pca;
            }
        },
        model);
}

inline AnyModel model_from_checkpoint(const Checkpoint& ck) {
    switch (ck.kind) {
        case ModelKind::sae: return sae_from_checkpoint(ck);
        case ModelKind::kmeans: return kmeans_from_checkpoint(ck);
        case ModelKind::pca: return pca_from_checkpoint(ck);
    }
    throw FormatError("unknown model kind");
}

inline AnyModel load_model(const std::filesystem::path& path) { return model_from_checkpoint(Checkpoint::load(path)); }

inline Index model_dim(const AnyModel& model) {
    return std::visit([](const auto& m) { return m.d(); }, model);
}

/// Codes for one split plus the dictionary-learning statistics measured on it.
struct SplitCodes {
    MatrixF codes;  ///< rows x latents
    double nmse = 0;
    double mean_l0 = 0;
};

/**
 * Latent scores for every row: ReLU codes for SAEs, one-hot assignments for
 * k-means, signed projections for PCA. Codes are stored in f32 so that a
 * report rebuilt from saved codes matches a fresh evaluation exactly.
 */
inline SplitCodes compute_codes(const AnyModel& model, const Dataset& dataset, Index chunk = 4096) {
    if (model_dim(model) != dataset.dim()) {
        throw InvalidArgument("model dim " + std::to_string(model_dim(model)) + " differs from dataset dim " +
                              std::to_string(dataset.dim()));
    }
    const MatrixF all = dataset.load_all();
    SplitCodes out;
    NmseAccumulator acc(dataset.dim());
    double active = 0;
    for (Index start = 0; start < all.rows(); start += chunk) {
        const Index rows = std::min(chunk, all.rows() - start);
        const Matrix x = all.middleRows(start, rows).cast<double>();
        std::visit(
            [&](const auto& m) {
                using M = std::decay_t<decltype(m)>;
                Matrix codes;
                Matrix recon;
                if constexpr (std::is_same_v<M, SaeParams>) {
                    codes = encode_batch(m, x);
                    recon = decode_batch(m, codes);
                    active += static_cast<double>((codes.array() > 0).count());
                } else if constexpr (std::is_same_v<M, KMeansModel>) {
                    auto o = kmeans_assign_reconstruct(m, x);
                    codes = o.codes.template cast<double>();
                    recon = std::move(o.reconstructions);
                    active += static_cast<double>((codes.array() != 0).count());
                } else {
                    auto o = pca_project_reconstruct(m, x);
                    codes = std::move(o.scores);
                    recon = std::move(o.reconstructions);
                    active += static_cast<double>(rows * m.n_components());
                }
                if (out.codes.size() == 0) {
                    out.codes.resize(all.rows(), codes.cols());
                }
                out.codes.middleRows(start, rows) = codes.cast<float>();
                acc.add(x, recon);
            },
            model);
    }
    out.nmse = acc.value();
    out.mean_l0 = active / static_cast<double>(all.rows());
    return out;
}

struct EvalOptions {
    Index k = 16;
    double tau = 0.3;
    ProbeOptions probe;
    Index probe_row_budget = 2'000'000;  ///< training rows used for probe fitting
    std::uint64_t seed = 0;              ///< subsampling seed when the budget binds
    int threads = 1;
};

struct ClassAlignment {
    int class_id = 0;
    bool present = false;  ///< class has positives in the training split
    Index best_latent = -1;
    double best_loss = 0;  ///< training BCE of the selected probe
    ProbeFit train_fit;
    ProbeFit validation_fit;  ///< the selected latent refit on validation, for Probe R
    double average_precision = 0;
    Index validation_positives = 0;
};

struct MetricsReport {
    std::string model_kind;
    double nmse = 0;
    double mean_l0 = 0;
    double probe_r = 0;
    double map = 0;
    double purity = 0;
    double coverage = 0;
    Index k = 16;
    double tau = 0.3;
    Index class_count = 0;
    Index latent_count = 0;
    Index purity_included = 0;
    Index purity_excluded = 0;
    Index probe_rows = 0;
    Index validation_rows = 0;
    std::vector<ClassAlignment> per_class;
};

namespace detail {

inline std::vector<std::uint8_t> indicator(std::span<const std::uint16_t> labels, int class_id) {
    std::vector<std::uint8_t> y(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) {
        y[i] = labels[i] == class_id ? 1 : 0;
    }
    return y;
}

inline std::vector<double> column(const MatrixF& codes, Index j) {
    std::vector<double> z(static_cast<std::size_t>(codes.rows()));
    for (Index r = 0; r < codes.rows(); ++r) {
        z[static_cast<std::size_t>(r)] = static_cast<double>(codes(r, j));
    }
    return z;
}

/// Uniform subsample of row indices (sorted) when the row count exceeds the budget.
inline std::vector<Index> probe_rows(Index rows, Index budget, std::uint64_t seed) {
    std::vector<Index> ids(static_cast<std::size_t>(rows));
    std::iota(ids.begin(), ids.end(), Index{0});
    if (budget > 0 && rows > budget) {
        std::mt19937_64 rng(mix_seed(seed, 0x9b0be));
        std::shuffle(ids.begin(), ids.end(), rng);
        ids.resize(static_cast<std::size_t>(budget));
        std::sort(ids.begin(), ids.end());
    }
    return ids;
}

}  // namespace detail

/**
 * Best latent for each listed class on the given split: a probe is fit on
 * every latent and the lowest training loss wins (ties by lower latent id).
 * Absent classes come back with `present == false`.
 */
inline std::vector<ClassAlignment> best_latents(const MatrixF& codes, std::span<const std::uint16_t> labels,
                                                const std::vector<int>& classes, const ProbeOptions& options = {},
                                                int threads = 1) {
    require(static_cast<Index>(labels.size()) == codes.rows(), "labels and codes differ in row count");
    const Index latents = codes.cols();
    const auto n_classes = classes.size();
    std::vector<std::vector<std::uint8_t>> y(n_classes);
    std::vector<bool> present(n_classes);
    for (std::size_t c = 0; c < n_classes; ++c) {
        y[c] = detail::indicator(labels, classes[c]);
        present[c] = std::find(y[c].begin(), y[c].end(), 1) != y[c].end();
    }
    std::vector<ProbeFit> fits(static_cast<std::size_t>(latents) * n_classes);
    parallel_for(latents, threads, [&](Index j) {
        const auto z = detail::column(codes, j);
        for (std::size_t c = 0; c < n_classes; ++c) {
            if (!present[c]) {
                continue;
            }
            auto fit = fit_1d_probe(z, y[c], options);
            fit.latent = j;
            fit.class_id = classes[c];
            fits[static_cast<std::size_t>(j) * n_classes + c] = fit;
        }
    });
    std::vector<ClassAlignment> out(n_classes);
    for (std::size_t c = 0; c < n_classes; ++c) {
        auto& a = out[c];
        a.class_id = classes[c];
        a.present = present[c];
        if (!present[c]) {
            continue;
        }
        for (Index j = 0; j < latents; ++j) {
            const auto& fit = fits[static_cast<std::size_t>(j) * n_classes + c];
            if (!fit.valid) {
                continue;
            }
            if (a.best_latent < 0 || fit.loss < a.best_loss) {
                a.best_latent = j;
                a.best_loss = fit.loss;
                a.train_fit = fit;
            }
        }
        a.present = a.best_latent >= 0;
    }
    return out;
}

inline ClassAlignment best_latent_per_class(const MatrixF& codes, std::span<const std::uint16_t> labels, int class_id,
                                            const ProbeOptions& options = {}, int threads = 1) {
    return best_latents(codes, labels, {class_id}, options, threads).front();
}

namespace detail {

inline MatrixF select_rows(const MatrixF& m, const std::vector<Index>& rows) {
    if (static_cast<Index>(rows.size()) == m.rows()) {
        return m;
    }
    MatrixF out(static_cast<Index>(rows.size()), m.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        out.row(static_cast<Index>(i)) = m.row(rows[i]);
    }
    return out;
}

template <class T>
std::vector<T> select(const std::vector<T>& v, const std::vector<Index>& rows) {
    std::vector<T> out;
    out.reserve(rows.size());
    for (auto r : rows) {
        out.push_back(v[static_cast<std::size_t>(r)]);
    }
    return out;
}

}  // namespace detail

/**
 * Downstream metrics from precomputed codes. `dictionary` carries NMSE and
 * L0 measured on the validation split.
 */
inline MetricsReport evaluate_codes(const MatrixF& train_codes, const std::vector<std::uint16_t>& train_labels,
                                    const MatrixF& val_codes, const std::vector<std::uint16_t>& val_labels,
                                    Index class_count, const SplitCodes& dictionary, const EvalOptions& options) {
    require(train_codes.cols() == val_codes.cols(), "train and validation codes differ in latent count");
    require(static_cast<Index>(train_labels.size()) == train_codes.rows() &&
                static_cast<Index>(val_labels.size()) == val_codes.rows(),
            "label counts must match code rows");
    require(class_count >= 1, "evaluation needs at least one class");

    MetricsReport report;
    report.nmse = dictionary.nmse;
    report.mean_l0 = dictionary.mean_l0;
    report.k = options.k;
    report.tau = options.tau;
    report.class_count = class_count;
    report.latent_count = train_codes.cols();
    report.validation_rows = val_codes.rows();

    const auto train_rows = detail::probe_rows(train_codes.rows(), options.probe_row_budget, options.seed);
    const MatrixF probe_codes = detail::select_rows(train_codes, train_rows);
    const auto probe_labels = detail::select(train_labels, train_rows);
    report.probe_rows = probe_codes.rows();

    std::vector<int> classes(static_cast<std::size_t>(class_count));
    std::iota(classes.begin(), classes.end(), 0);
    report.per_class = best_latents(probe_codes, probe_labels, classes, options.probe, options.threads);

    std::vector<double> aps(static_cast<std::size_t>(class_count), 0.0);
    double r_sum = 0;
    Index r_count = 0;
    parallel_for(class_count, options.threads, [&](Index c) {
        auto& a = report.per_class[static_cast<std::size_t>(c)];
        const auto y = detail::indicator(val_labels, a.class_id);
        a.validation_positives = std::count(y.begin(), y.end(), std::uint8_t{1});
        if (!a.present || a.validation_positives == 0) {
            return;
        }
        const auto z = detail::column(val_codes, a.best_latent);
        // Probe logits w z + b order rows exactly as the probe probabilities do.
        std::vector<double> score(z.size());
        for (std::size_t i = 0; i < z.size(); ++i) {
            score[i] = a.train_fit.w * z[i] + a.train_fit.b;
        }
        a.average_precision = average_precision(score, y);
        a.validation_fit = fit_1d_probe(z, y, options.probe);
        a.validation_fit.latent = a.best_latent;
        a.validation_fit.class_id = a.class_id;
        aps[static_cast<std::size_t>(c)] = a.average_precision;
    });
    for (const auto& a : report.per_class) {
        if (a.validation_fit.valid) {
            r_sum += a.validation_fit.r;
            ++r_count;
        }
    }
    report.probe_r = r_count > 0 ? r_sum / static_cast<double>(r_count) : 0.0;
    report.map = mean_average_precision(aps);
    report.coverage = coverage_at_tau(aps, options.tau, class_count);
    if (options.k <= val_codes.rows()) {
        auto purity = purity_at_k(val_codes, val_labels, options.k);
        report.purity = purity.value;
        report.purity_included = purity.included;
        report.purity_excluded = purity.excluded;
    } else {
        throw InvalidArgument("purity: k = " + std::to_string(options.k) + " exceeds validation rows");
    }
    return report;
}

inline void check_splits(const Dataset& train, const Dataset& val) {
    require(train.dim() == val.dim(), "train and validation splits differ in dim");
    require(train.has_labels() && val.has_labels(), "evaluation splits must carry labels");
    if (train.class_count() != val.class_count()) {
        throw InvalidArgument("class vocabulary mismatch: train has " + std::to_string(train.class_count()) +
                              " classes, validation has " + std::to_string(val.class_count()));
    }
}

/// Full evaluation of a model on a labeled train/validation pair.
inline MetricsReport evaluate_model(const AnyModel& model, const Dataset& train, const Dataset& val,
                                    const EvalOptions& options = {}, SplitCodes* train_out = nullptr,
                                    SplitCodes* val_out = nullptr) {
    check_splits(train, val);
    auto train_codes = compute_codes(model, train);
    auto val_codes = compute_codes(model, val);
    auto report = evaluate_codes(train_codes.codes, train.labels(), val_codes.codes, val.labels(), train.class_count(),
                                 val_codes, options);
    report.model_kind = to_string(model_kind(model));
    if (train_out) {
        *train_out = std::move(train_codes);
    }
    if (val_out) {
        *val_out = std::move(val_codes);
    }
    return report;
}

/// Mean over present classes of the best-latent training probe loss; lower is better.
inline double probe_selection_loss(const AnyModel& model, const Dataset& train, const EvalOptions& options = {}) {
    require(train.has_labels(), "model selection needs a labeled training split");
    const auto codes = compute_codes(model, train);
    const auto rows = detail::probe_rows(codes.codes.rows(), options.probe_row_budget, options.seed);
    const auto probe_labels = detail::select(train.labels(), rows);
    std::vector<int> classes(static_cast<std::size_t>(train.class_count()));
    std::iota(classes.begin(), classes.end(), 0);
    const auto alignments =
        best_latents(detail::select_rows(codes.codes, rows), probe_labels, classes, options.probe, options.threads);
    double sum = 0;
    Index count = 0;
    for (const auto& a : alignments) {
        if (a.present) {
            sum += a.best_loss;
            ++count;
        }
    }
    require(count > 0, "model selection: no class has positives in the training split");
    return sum / static_cast<double>(count);
}

/// Index of the family member with the lowest probe selection loss (first wins ties).
inline std::size_t select_best_by_probe(const std::vector<AnyModel>& family, const Dataset& train,
                                        const EvalOptions& options = {}, std::vector<double>* losses = nullptr) {
    require(!family.empty(), "select_best_by_probe: empty family");
    std::size_t best = 0;
    std::vector<double> all;
    for (std::size_t i = 0; i < family.size(); ++i) {
        all.push_back(probe_selection_loss(family[i], train, options));
        if (all[i] < all[best]) {
            best = i;
        }
    }
    if (losses) {
        *losses = std::move(all);
    }
    return best;
}

inline nlohmann::ordered_json probe_json(const ProbeFit& f) {
    nlohmann::ordered_json j;
    j["w"] = f.w;
    j["b"] = f.b;
    j["loss"] = f.loss;
    j["bias_loss"] = f.bias_loss;
    j["r"] = f.r;
    return j;
}

inline nlohmann::ordered_json to_json(const MetricsReport& r) {
    nlohmann::ordered_json j;
    j["model_kind"] = r.model_kind;
    j["nmse"] = r.nmse;
    j["l0"] = r.mean_l0;
    j["probe_r"] = r.probe_r;
    j["map"] = r.map;
    j["purity_at_k"] = r.purity;
    j["coverage_at_tau"] = r.coverage;
    j["k"] = r.k;
    j["tau"] = r.tau;
    j["class_count"] = r.class_count;
    j["latent_count"] = r.latent_count;
    j["purity_included_latents"] = r.purity_included;
    j["purity_excluded_latents"] = r.purity_excluded;
    j["probe_rows"] = r.probe_rows;
    j["validation_rows"] = r.validation_rows;
    auto& classes = j["per_class"] = nlohmann::ordered_json::array();
    for (const auto& a : r.per_class) {
        nlohmann::ordered_json c;
        c["class_id"] = a.class_id;
        c["present"] = a.present;
        c["best_latent"] = a.best_latent;
        c["train_loss"] = a.best_loss;
        c["average_precision"] = a.average_precision;
        c["validation_positives"] = a.validation_positives;
        c["train_probe"] = a.present ? probe_json(a.train_fit) : nlohmann::ordered_json(nullptr);
        c["validation_probe"] = a.validation_fit.valid ? probe_json(a.validation_fit) : nlohmann::ordered_json(nullptr);
        classes.push_back(std::move(c));
    }
    return j;
}

/// Fixed-width table with columns Method, NMSE, L0, Probe R, mAP, Purity@k, Cov@tau.
inline std::string render_table(const std::vector<std::pair<std::string, MetricsReport>>& rows) {
    std::ostringstream out;
    Index k = rows.empty() ? 16 : rows.front().second.k;
    double tau = rows.empty() ? 0.3 : rows.front().second.tau;
    std::ostringstream purity_header, coverage_header;
    purity_header << "Purity@" << k;
    coverage_header << "Cov@" << tau;
    out << std::left << std::setw(24) << "Method" << std::right << std::setw(10) << "NMSE" << std::setw(10) << "L0"
        << std::setw(10) << "Probe R" << std::setw(10) << "mAP" << std::setw(12) << purity_header.str()
        << std::setw(10) << coverage_header.str() << "\n";
    for (const auto& [name, r] : rows) {
        out << std::left << std::setw(24) << name << std::right << std::fixed << std::setprecision(3)
            << std::setw(10) << r.nmse << std::setw(10) << r.mean_l0 << std::setw(10) << r.probe_r << std::setw(10)
            << r.map << std::setw(12) << r.purity << std::setw(10) << r.coverage << "\n";
    }
    return out.str();
}

}  // namespace spdict

#endif
