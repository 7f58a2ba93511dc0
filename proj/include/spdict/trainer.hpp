#ifndef SPDICT_TRAINER_HPP
#define SPDICT_TRAINER_HPP

#include <functional>
#include <numbers>
#include <set>

#include "activation_store.hpp"
#include "checkpoint.hpp"
#include "metrics.hpp"
#include "sae.hpp"

/**
 * @file trainer.hpp
 * @brief SAE optimization loop: initialization, Adam with projected decoder
 * gradients, learning-rate and sparsity schedules, Matryoshka prefix sampling,
 * and hyperparameter sweeps.
 */

namespace spdict {

struct TrainConfig {
    Objective objective = Objective::matryoshka;
    Index n = 16384;
    double lambda_max = 1e-3;
    double lr_max = 1e-3;
    Index batch_size = 16384;
    Index total_examples = 100'000'000;
    Index warmup_steps = 500;
    std::uint64_t seed = 0;
    Index prefix_count = 10;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    Index log_every = 50;

    Index total_steps() const { return (total_examples + batch_size - 1) / batch_size; }

    void validate() const {
        require(n >= 1, "config: n must be >= 1");
        require(lambda_max >= 0, "config: lambda_max must be >= 0");
        require(lr_max > 0, "config: lr_max must be > 0");
        require(batch_size >= 1, "config: batch_size must be >= 1");
        require(warmup_steps >= 0, "config: warmup_steps must be >= 0");
        require(total_examples >= batch_size, "config: total_examples must be >= batch_size");
        require(prefix_count >= 1, "config: prefix_count must be >= 1");
        require(objective == Objective::vanilla || n >= prefix_count, "config: n must be >= prefix_count");
        require(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1 && eps > 0, "config: invalid Adam constants");
        require(log_every >= 1, "config: log_every must be >= 1");
    }
};

/**
 * Kaiming-uniform weights (bound sqrt(6 / fan_in), i.e. variance 2 / fan_in),
 * zero biases, then unit-norm decoder columns.
 */
inline SaeParams init_params(Index n, Index d, std::uint64_t seed) {
    require(n >= 1 && d >= 1, "init_params: n and d must be >= 1");
    std::mt19937_64 rng(seed);
    auto fill = [&rng](Matrix& m, Index fan_in) {
        std::uniform_real_distribution<double> dist(-std::sqrt(6.0 / static_cast<double>(fan_in)),
                                                    std::sqrt(6.0 / static_cast<double>(fan_in)));
        for (Index c = 0; c < m.cols(); ++c) {
            for (Index r = 0; r < m.rows(); ++r) {
                m(r, c) = dist(rng);
            }
        }
    };
    SaeParams p = SaeParams::zeros(n, d);
    fill(p.w_enc, d);
    fill(p.w_dec, n);
    normalize_decoder(p);
    return p;
}

/// Linear warmup from 0 to lr_max, then cosine decay to 0 at the final step.
inline double lr_schedule(Index step, const TrainConfig& config) {
    const Index total = config.total_steps();
    const Index warmup = config.warmup_steps;
    require(step >= 0 && step <= total, "lr_schedule: step out of range");
    if (step < warmup) {
        return config.lr_max * static_cast<double>(step) / static_cast<double>(warmup);
    }
    if (total <= warmup) {
        return config.lr_max;
    }
    const double progress = static_cast<double>(step - warmup) / static_cast<double>(total - warmup);
    return config.lr_max * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

/// Sparsity coefficient ramps linearly from 0 to lambda_max over the whole run.
inline double lambda_schedule(Index step, const TrainConfig& config) {
    const Index total = config.total_steps();
    require(step >= 0 && step <= total, "lambda_schedule: step out of range");
    return config.lambda_max * (static_cast<double>(step) / static_cast<double>(total));
}

/**
 * Draws `count - 1` distinct cut points log-uniformly over [1, n) plus the full
 * width n. Duplicates are redrawn.
 */
inline PrefixSet sample_prefixes(Index n, Index count, std::uint64_t seed) {
    require(count >= 1 && n >= count, "sample_prefixes: need n >= count >= 1");
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const double log_n = std::log2(static_cast<double>(n));
    std::set<Index> cuts;
    while (static_cast<Index>(cuts.size()) < count - 1) {
        auto m = static_cast<Index>(std::floor(std::exp2(unit(rng) * log_n)));
        cuts.insert(std::clamp<Index>(m, 1, n - 1));
    }
    std::vector<Index> sizes(cuts.begin(), cuts.end());
    sizes.push_back(n);
    return PrefixSet(std::move(sizes), n);
}

struct OptimizerState {
    Index step = 0;
    Gradients m;
    Gradients v;
    double lr = 0;
    double lambda = 0;

    static OptimizerState zeros(Index n, Index d) { return {0, Gradients::zeros(n, d), Gradients::zeros(n, d), 0, 0}; }
};

/// Raised when training produces a non-finite gradient or loss.
class TrainingAborted : public Error {
public:
    TrainingAborted(const std::string& what, Index step, SaeParams last_good)
        : Error(what), step_(step), last_good_(std::move(last_good)) {}

    Index step() const { return step_; }
    const SaeParams& last_good() const { return last_good_; }

private:
    Index step_;
    SaeParams last_good_;
};

namespace detail {

template <class P, class G, class M>
void adam_update(P& param, const G& grad, M& m, M& v, double lr, double beta1, double beta2, double eps,
                 double correction1, double correction2) {
    m = beta1 * m + (1.0 - beta1) * grad;
    v = beta2 * v + (1.0 - beta2) * grad.cwiseAbs2();
    param.array() -= lr * (m.array() / correction1) / ((v.array() / correction2).sqrt() + eps);
}

}  // namespace detail

/**
 * One Adam step at learning rate `lr`. Decoder gradients are projected onto the
 * tangent space of their (unit) columns before entering the moments; columns
 * are renormalized after the update. `grads` is left holding the projected gradients.
 */
inline void adam_step(SaeParams& params, Gradients& grads, OptimizerState& state, double lr,
                      const TrainConfig& config) {
    if (!grads.finite()) {
        throw TrainingAborted("non-finite gradient at step " + std::to_string(state.step + 1), state.step + 1,
                              params);
    }
    project_decoder_gradient(params, grads);
    state.step += 1;
    state.lr = lr;
    const double c1 = 1.0 - std::pow(config.beta1, static_cast<double>(state.step));
    const double c2 = 1.0 - std::pow(config.beta2, static_cast<double>(state.step));
    detail::adam_update(params.w_enc, grads.w_enc, state.m.w_enc, state.v.w_enc, lr, config.beta1, config.beta2,
                        config.eps, c1, c2);
    detail::adam_update(params.b_enc, grads.b_enc, state.m.b_enc, state.v.b_enc, lr, config.beta1, config.beta2,
                        config.eps, c1, c2);
    detail::adam_update(params.w_dec, grads.w_dec, state.m.w_dec, state.v.w_dec, lr, config.beta1, config.beta2,
                        config.eps, c1, c2);
    detail::adam_update(params.b_dec, grads.b_dec, state.m.b_dec, state.v.b_dec, lr, config.beta1, config.beta2,
                        config.eps, c1, c2);
    normalize_decoder(params);
}

/**
 * Fixed-size batches over repeated shuffled epochs. Epoch e uses the
 * permutation keyed by (seed, e). A batch that straddles an epoch boundary
 * defers any id already in the batch to the front of the next batch, so ids
 * are unique within a batch and every row is visited floor or ceil of
 * (examples / count) times.
 */
class TrainingSampler {
public:
    TrainingSampler(const Dataset& dataset, Index batch_size, std::uint64_t seed)
        : dataset_(&dataset), seed_(seed) {
        require(batch_size >= 1, "batch_size must be >= 1");
        require(batch_size <= dataset.count(), "batch_size " + std::to_string(batch_size) +
                                                   " exceeds dataset size " + std::to_string(dataset.count()));
    }

    std::vector<Index> next_ids(Index size) {
        require(size >= 1 && size <= dataset_->count(), "sampler: invalid batch size");
        if (taken_.empty()) {
            taken_.assign(static_cast<std::size_t>(dataset_->count()), 0);
        }
        std::vector<Index> ids;
        ids.reserve(static_cast<std::size_t>(size));
        std::vector<Index> still_deferred;
        auto take = [&](Index id) {
            if (static_cast<Index>(ids.size()) < size && !taken_[static_cast<std::size_t>(id)]) {
                taken_[static_cast<std::size_t>(id)] = 1;
                ids.push_back(id);
            } else {
                still_deferred.push_back(id);
            }
        };
        for (Index id : deferred_) {
            take(id);
        }
        while (static_cast<Index>(ids.size()) < size) {
            if (pos_ == order_.size()) {
                order_ = epoch_permutation(dataset_->count(), seed_, epoch_++);
                pos_ = 0;
            }
            take(order_[pos_++]);
        }
        for (Index id : ids) {
            taken_[static_cast<std::size_t>(id)] = 0;
        }
        deferred_ = std::move(still_deferred);
        return ids;
    }

    ActivationBatch next(Index size) {
        auto ids = next_ids(size);
        return dataset_->gather(ids);
    }

private:
    const Dataset* dataset_;
    std::uint64_t seed_;
    std::uint64_t epoch_ = 0;
    std::vector<Index> order_;
    std::size_t pos_ = 0;
    std::vector<Index> deferred_;
    std::vector<char> taken_;
};

struct HistoryRecord {
    Index step = 0;
    double lr = 0;
    double lambda = 0;
    double reconstruction = 0;
    double sparsity = 0;
    double total = 0;
    double mean_l0 = 0;
    double dead_fraction = 0;
};

using TrainHistory = std::vector<HistoryRecord>;

inline std::string history_line(const HistoryRecord& r) {
    nlohmann::ordered_json j;
    j["step"] = r.step;
    j["lr"] = r.lr;
    j["lambda"] = r.lambda;
    j["recon"] = r.reconstruction;
    j["sparsity"] = r.sparsity;
    j["total"] = r.total;
    j["mean_l0"] = r.mean_l0;
    j["dead_fraction"] = r.dead_fraction;
    return j.dump();
}

/// What a per-step observer sees: parameters before and after the update and the projected gradients.
struct StepView {
    Index step;
    const SaeParams& before;
    const Gradients& projected;
    const SaeParams& after;
    const LossBreakdown& loss;
};

using StepObserver = std::function<void(const StepView&)>;

namespace detail {

inline bool within_f32_range(const SaeParams& p) {
    constexpr double limit = std::numeric_limits<float>::max();
    auto ok = [](const auto& m) { return m.size() == 0 || m.cwiseAbs().maxCoeff() <= limit; };
    return p.finite() && ok(p.w_enc) && ok(p.b_enc) && ok(p.w_dec) && ok(p.b_dec);
}

}  // namespace detail

struct TrainResult {
    SaeParams params;
    TrainHistory history;
    PrefixSet last_prefixes;
    Index steps = 0;

    Checkpoint checkpoint(Objective objective) const { return sae_checkpoint(params, objective, static_cast<std::uint64_t>(steps), last_prefixes); }
};

using HistoryCallback = std::function<void(const HistoryRecord&)>;

/**
 * Trains an SAE for ceil(total_examples / batch_size) steps. Step t (1-based)
 * uses lr_schedule(t) and lambda_schedule(t), so the last step runs at lr 0 and
 * lambda_max. Deterministic for a fixed (config, dataset).
 */

inline TrainResult train(const TrainConfig& config, const Dataset& dataset, const StepObserver& observer = {},
                         const HistoryCallback& on_record = {}) {
    config.validate();
    const Index d = dataset.dim();
    const Index steps = config.total_steps();
    TrainResult result;
    result.params = init_params(config.n, d, mix_seed(config.seed, 0x1417));
    auto state = OptimizerState::zeros(config.n, d);
    TrainingSampler sampler(dataset, config.batch_size, mix_seed(config.seed, 0xba7c));
    Eigen::VectorXi fired_window = Eigen::VectorXi::Zero(config.n);

    for (Index t = 1; t <= steps; ++t) {
        const Index size = std::min(config.batch_size, config.total_examples - (t - 1) * config.batch_size);
        const auto batch = sampler.next(size);
        const double lr = lr_schedule(t, config);
        const double lambda = lambda_schedule(t, config);
        std::optional<PrefixSet> prefixes;
        if (config.objective == Objective::matryoshka) {
            prefixes = sample_prefixes(config.n, config.prefix_count, mix_seed(config.seed, 0x9000000 + static_cast<std::uint64_t>(t)));
            result.last_prefixes = *prefixes;
        } else {
            result.last_prefixes = PrefixSet::full(config.n);
        }
        auto pass = loss_and_gradients(result.params, batch.x, lambda, config.objective, prefixes);
        if (!std::isfinite(pass.loss.total)) {
            throw TrainingAborted("non-finite loss at step " + std::to_string(t), t, result.params);
        }
        fired_window += pass.fired;

        SaeParams before = result.params;
        state.lambda = lambda;
        adam_step(result.params, pass.grads, state, lr, config);
        // Checkpoints are f32, so values beyond its range count as divergence too.
        if (!detail::within_f32_range(result.params)) {
            throw TrainingAborted("parameters diverged (non-finite or beyond f32 range) after step " + std::to_string(t), t, std::move(before));
        }
        if (observer) {
            observer(StepView{t, before, pass.grads, result.params, pass.loss});
        }

        if (t % config.log_every == 0 || t == steps) {
            HistoryRecord r;
            r.step = t;
            r.lr = lr;
            r.lambda = lambda;
            r.reconstruction = pass.loss.reconstruction;
            r.sparsity = pass.loss.sparsity;
            r.total = pass.loss.total;
            r.mean_l0 = pass.mean_l0;
            r.dead_fraction = static_cast<double>((fired_window.array() == 0).count()) / static_cast<double>(config.n);
            result.history.push_back(r);
            fired_window.setZero();
            if (on_record) {
                on_record(r);
            }
        }
    }
    result.steps = steps;
    return result;
}

/// NMSE and mean L0 of an SAE over a dataset, accumulated in chunks.
struct DictionaryStats {
    double nmse = 0;
    double mean_l0 = 0;
};

inline DictionaryStats sae_dictionary_stats(const SaeParams& p, const Dataset& dataset, Index chunk = 4096) {
    NmseAccumulator acc(dataset.dim());
    double active = 0;
    const MatrixF all = dataset.load_all();
    for (Index start = 0; start < all.rows(); start += chunk) {
        const Index rows = std::min(chunk, all.rows() - start);
        const Matrix x = all.middleRows(start, rows).cast<double>();
        const Matrix f = encode_batch(p, x);
        acc.add(x, decode_batch(p, f));
        active += static_cast<double>((f.array() > 0).count());
    }
    return {acc.value(), active / static_cast<double>(all.rows())};
}

struct SweepGrid {
    std::vector<double> learning_rates;
    std::vector<double> lambdas;

    void validate() const {
        require(!learning_rates.empty() && !lambdas.empty(), "sweep grid lists must be non-empty");
        for (double lr : learning_rates) {
            require(lr > 0, "sweep grid learning rates must be positive");
        }
        for (double l : lambdas) {
            require(l >= 0, "sweep grid lambdas must be non-negative");
        }
    }

    /// Learning rate and sparsity values from the reference hyperparameter sweep.
    static SweepGrid reference() { return {{3e-4, 1e-3, 3e-3, 1e-2, 3e-2, 1e-1}, {1e-4, 1e-3, 1e-2, 1e-1}}; }

    /// Grid points in learning-rate-major order.
    std::vector<TrainConfig> expand(const TrainConfig& base) const {
        std::vector<TrainConfig> out;
        for (double lr : learning_rates) {
            for (double lambda : lambdas) {
                TrainConfig c = base;
                c.lr_max = lr;
                c.lambda_max = lambda;
                out.push_back(c);
            }
        }
        return out;
    }
};

inline std::string config_tag(const TrainConfig& c) {
    std::ostringstream out;
    out << "lr" << c.lr_max << "_lambda" << c.lambda_max;
    return out.str();
}

struct SweepRun {
    TrainConfig config;
    std::string tag;
    std::optional<TrainResult> result;
    DictionaryStats validation;
    std::string error;  ///< non-empty if the run failed

    bool ok() const { return error.empty(); }
};

/**
 * Trains one model per grid point (runs are independent and may execute in
 * parallel) and records validation NMSE and L0. A failing run is recorded and
 * the sweep continues.
 */
inline std::vector<SweepRun> sweep(const SweepGrid& grid, const TrainConfig& base, const Dataset& train_set,
                                   const Dataset& validation_set, int threads = 1) {
    grid.validate();
    const auto configs = grid.expand(base);
    std::vector<SweepRun> runs(configs.size());
    parallel_for(static_cast<Index>(configs.size()), threads, [&](Index i) {
        auto& run = runs[static_cast<std::size_t>(i)];
        run.config = configs[static_cast<std::size_t>(i)];
        run.tag = config_tag(run.config);
        try {
            run.result = train(run.config, train_set);
            run.validation = sae_dictionary_stats(run.result->params, validation_set);
        } catch (const std::exception& e) {
            run.error = e.what();
            run.result.reset();
        }
    });
    return runs;
}

/**
 * Indices of points not dominated in (nmse, l0), both minimized, ordered by
 * increasing L0 (so NMSE strictly decreases along the result). Among exact
 * duplicates the lowest index is kept.
 */
inline std::vector<std::size_t> pareto_frontier(const std::vector<DictionaryStats>& points) {
    std::vector<std::size_t> order(points.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (points[a].mean_l0 != points[b].mean_l0) {
            return points[a].mean_l0 < points[b].mean_l0;
        }
        return points[a].nmse < points[b].nmse;
    });
    std::vector<std::size_t> frontier;
    double best_nmse = std::numeric_limits<double>::infinity();
    for (auto i : order) {
        if (std::isfinite(points[i].nmse) && points[i].nmse < best_nmse) {
            frontier.push_back(i);
            best_nmse = points[i].nmse;
        }
    }
    return frontier;
}

}  // namespace spdict

#endif
