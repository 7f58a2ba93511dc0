// Acceptance suite: one PASS/FAIL line per end-to-end requirement, each with
// its measured values and wall time against its time budget. Exit status is
// nonzero when any line fails.

#include <chrono>
#include <cstdio>
#include <functional>
#include <iostream>

#include "spdict/spdict.hpp"

#include "cli_runner.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace spdict;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = true;
    std::string detail;
};

/// Accumulates named checks; the first failing one is named in the detail.
class Checks {
public:
    void expect(bool ok, const std::string& what) {
        if (!ok && pass_) {
            pass_ = false;
            failure_ = what;
        }
    }
    void note(const std::string& text) { notes_ += (notes_.empty() ? "" : "; ") + text; }
    Outcome done() const { return {pass_, pass_ ? notes_ : "failed: " + failure_ + (notes_.empty() ? "" : " [" + notes_ + "]")}; }

private:
    bool pass_ = true;
    std::string failure_;
    std::string notes_;
};

std::string fmt(double v, int precision = 3) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*g", precision, v);
    return buf;
}

// ---------------------------------------------------------------- gradients

Outcome gradient_correctness() {
    Checks c;
    std::mt19937_64 rng(101);
    std::uniform_int_distribution<Index> dim(2, 16), width(2, 32), batch(1, 8);
    for (Objective objective : {Objective::vanilla, Objective::matryoshka}) {
        double worst = 0;
        int accepted = 0, rejected = 0;
        while (accepted < 20) {
            const Index d = dim(rng), n = width(rng), b = batch(rng);
            auto p = oracle::random_params(n, d, rng);
            const Matrix x = oracle::random_matrix(b, d, rng);
            // Central differences straddle the ReLU kink when a pre-activation is within a step of 0.
            if (oracle::min_abs_preactivation(p, x) < 5e-3) {
                ++rejected;
                continue;
            }
            ++accepted;
            std::vector<Index> sizes = {n};
            std::optional<PrefixSet> prefixes;
            if (objective == Objective::matryoshka) {
                sizes = oracle::random_prefixes(n, std::min<std::size_t>(static_cast<std::size_t>(n), 5), rng);
                prefixes = PrefixSet(sizes, n);
            }
            const double lambda = 0.05 + 0.2 * std::uniform_real_distribution<double>()(rng);
            const auto g = backward(p, x, lambda, objective, prefixes);
            worst = std::max(worst, oracle::max_fd_relative_error(p, x, lambda, sizes, g));
        }
        c.expect(worst <= 1e-4, to_string(objective) + " max relative error " + fmt(worst));
        c.note(to_string(objective) + " max rel err " + fmt(worst) + " over 20 (" + std::to_string(rejected) +
               " near-kink draws redrawn)");
    }
    return c.done();
}

Outcome full_prefix_reduction() {
    Checks c;
    std::mt19937_64 rng(202);
    std::uniform_int_distribution<Index> dim(1, 24), width(1, 48), batch(1, 16);
    double worst = 0;
    for (int i = 0; i < 100; ++i) {
        const Index d = dim(rng), n = width(rng);
        auto p = oracle::random_params(n, d, rng);
        const Matrix x = oracle::random_matrix(batch(rng), d, rng);
        const double lambda = std::uniform_real_distribution<double>(0, 0.5)(rng);
        const double v = vanilla_loss(p, x, lambda).total;
        const double m = matryoshka_loss(p, x, lambda, PrefixSet::full(n)).total;
        worst = std::max(worst, std::abs(m - v) / std::max(std::abs(v), 1e-300));
    }
    c.expect(worst <= 1e-12, "relative difference " + fmt(worst));
    c.note("max rel diff " + fmt(worst) + " over 100");
    return c.done();
}

// ---------------------------------------------------------------- decoder constraint

Outcome decoder_constraint() {
    Checks c;
    const Matrix dict = random_dictionary(12, 20, 3);
    auto data = make_synthetic(dict, 3, 4000, 0.01, 4);
    TrainConfig config;
    config.objective = Objective::matryoshka;
    config.n = 32;
    config.batch_size = 64;
    config.total_examples = 500 * 64;
    config.warmup_steps = 50;
    config.lr_max = 3e-3;
    config.lambda_max = 3e-3;
    config.prefix_count = 6;
    config.log_every = 100;
    double worst_norm = 0, worst_dot = 0;
    Index steps = 0;
    train(config, data.dataset, [&](const StepView& v) {
        ++steps;
        worst_norm = std::max(worst_norm, v.after.max_decoder_norm_error());
        for (Index j = 0; j < v.before.n(); ++j) {
            const auto col = v.before.w_dec.col(j);
            const auto g = v.projected.w_dec.col(j);
            const double scale = g.norm() * col.norm();
            if (scale > 0) {
                worst_dot = std::max(worst_dot, std::abs(g.dot(col)) / scale);
            }
        }
    });
    c.expect(steps == 500, "ran " + std::to_string(steps) + " steps");
    c.expect(worst_norm <= 1e-6, "decoder norm deviation " + fmt(worst_norm));
    c.expect(worst_dot <= 1e-10, "projected gradient dot ratio " + fmt(worst_dot));
    c.note(std::to_string(steps) + " steps, max |norm-1| " + fmt(worst_norm) + ", max |g.c|/(|g||c|) " + fmt(worst_dot));
    return c.done();
}

// ---------------------------------------------------------------- planted recovery

// Best setting found by a learning-rate x sparsity search at this budget; warmup stays at 500.
TrainConfig planted_config(Objective objective, std::uint64_t seed) {
    TrainConfig config;
    config.objective = objective;
    config.n = 48;
    config.batch_size = 256;
    config.total_examples = 2000 * 256;
    config.warmup_steps = 500;
    config.lr_max = 0.1;
    // The nested loss sums ten reconstruction terms, so it needs a larger sparsity weight.
    config.lambda_max = objective == Objective::matryoshka ? 4.0 : 1.0;
    config.prefix_count = 10;
    config.seed = seed;
    config.log_every = 500;
    return config;
}

Outcome planted_recovery() {
    Checks c;
    const Matrix dict = random_dictionary(16, 24, 11);
    auto data = make_synthetic(dict, 3, 200'000, 0.01, 12);
    const auto result = train(planted_config(Objective::matryoshka, 13), data.dataset);
    const double greedy = oracle::greedy_atom_matching(dict, result.params.w_dec, 0.9);
    const double any = oracle::atom_recovery(dict, result.params.w_dec, 0.9);
    c.expect(result.steps == 2000, "trained " + std::to_string(result.steps) + " steps");
    c.expect(greedy >= 0.8, "greedy-matched recovery " + fmt(greedy) + " < 0.8");
    // Reference only: the plain objective on the same data and budget.
    const auto plain = train(planted_config(Objective::vanilla, 13), data.dataset);
    c.note("steps " + std::to_string(result.steps) + ", greedy one-to-one recovery " + fmt(greedy) +
           ", best-column recovery " + fmt(any) + " at |cos| >= 0.9; vanilla reference " +
           fmt(oracle::greedy_atom_matching(dict, plain.params.w_dec, 0.9)));
    return c.done();
}

// ---------------------------------------------------------------- concept rediscovery

std::vector<std::uint16_t> permuted(std::vector<std::uint16_t> labels, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::shuffle(labels.begin(), labels.end(), rng);
    return labels;
}

double percentile99(std::vector<double> values) {
    std::sort(values.begin(), values.end());
    const auto rank = static_cast<std::size_t>(std::ceil(0.99 * static_cast<double>(values.size())));
    return values[rank - 1];
}

Outcome concept_rediscovery() {
    Checks c;
    const Matrix dict = random_dictionary(16, 24, 21);
    SyntheticOptions opt;
    opt.labeled_atoms = 12;  // class c <=> planted atom c is present
    auto train_data = make_synthetic(dict, 3, 200'000, 0.01, 22, opt);
    auto val_data = make_synthetic(dict, 3, 20'000, 0.01, 23, opt);
    const auto result = train(planted_config(Objective::matryoshka, 24), train_data.dataset);
    const AnyModel model = round_to_f32(result.params);

    EvalOptions options;
    options.threads = default_threads();
    options.probe_row_budget = 20'000;  // shared by the real, control and null evaluations
    SplitCodes train_codes, val_codes;
    const auto report = evaluate_model(model, train_data.dataset, val_data.dataset, options, &train_codes, &val_codes);
    c.expect(report.coverage >= 0.8, "coverage@0.3 " + fmt(report.coverage));
    c.expect(report.map >= 0.6, "mAP " + fmt(report.map));
    c.note("coverage@0.3 " + fmt(report.coverage) + ", mAP " + fmt(report.map) + ", probe R " + fmt(report.probe_r));

    // Label-permutation control against a null of 100 further permutations of the same codes.
    const auto& yt = train_data.dataset.labels();
    const auto& yv = val_data.dataset.labels();
    auto permuted_report = [&](std::uint64_t seed) {
        return evaluate_codes(train_codes.codes, permuted(yt, mix_seed(seed, 1)), val_codes.codes,
                              permuted(yv, mix_seed(seed, 2)), 12, val_codes, options);
    };
    const auto control = permuted_report(999);
    std::vector<double> null_map, null_cov;
    for (std::uint64_t s = 0; s < 100; ++s) {
        const auto r = permuted_report(1000 + s);
        null_map.push_back(r.map);
        null_cov.push_back(r.coverage);
    }
    const double map99 = percentile99(null_map), cov99 = percentile99(null_cov);
    c.expect(control.map <= map99, "control mAP " + fmt(control.map) + " above null p99 " + fmt(map99));
    c.expect(control.coverage <= cov99, "control coverage " + fmt(control.coverage) + " above null p99 " + fmt(cov99));
    c.note("permuted control mAP " + fmt(control.map) + " (null p99 " + fmt(map99) + "), coverage " +
           fmt(control.coverage) + " (null p99 " + fmt(cov99) + ")");
    return c.done();
}

// ---------------------------------------------------------------- metric oracles

Outcome metric_oracles() {
    Checks c;
    std::mt19937_64 rng(303);
    std::uniform_int_distribution<int> small(0, 5), coin(0, 3);
    Index ap_checked = 0, purity_checked = 0, selection_checked = 0;
    double worst_nmse = 0;
    for (int trial = 0; trial < 50; ++trial) {
        // AP: integer scores force ties, which must resolve by row id.
        const std::size_t rows = 5 + static_cast<std::size_t>(trial) * 4;
        std::vector<double> s(rows);
        std::vector<std::uint8_t> y(rows);
        std::vector<bool> yb(rows);
        for (std::size_t i = 0; i < rows; ++i) {
            s[i] = small(rng);
            y[i] = coin(rng) == 0;
            yb[i] = y[i];
        }
        const double ap = average_precision(s, y), ref = oracle::average_precision(s, yb);
        c.expect(ap == ref, "AP trial " + std::to_string(trial) + ": " + fmt(ap, 17) + " vs " + fmt(ref, 17));
        ++ap_checked;

        // Purity@k with sparse codes and excluded latents.
        MatrixF codes(40, 6);
        for (Index i = 0; i < codes.size(); ++i) codes.data()[i] = static_cast<float>(std::max(0, small(rng) - 2));
        std::vector<std::uint16_t> labels(40);
        for (auto& l : labels) l = static_cast<std::uint16_t>(coin(rng));
        const Index k = 1 + trial % 10;
        const auto got = purity_at_k(codes, labels, k);
        const auto want = oracle::purity_at_k(codes, labels, k);
        c.expect(got.value == want.value && got.included == want.included,
                 "purity trial " + std::to_string(trial) + ": " + fmt(got.value, 17) + " vs " + fmt(want.value, 17));
        ++purity_checked;

        // Best-latent selection against an exhaustive grid-searched probe per latent.
        const Index srows = 120, latents = 5;
        std::normal_distribution<double> normal;
        std::vector<std::uint16_t> slabels(static_cast<std::size_t>(srows));
        for (Index r = 0; r < srows; ++r) slabels[static_cast<std::size_t>(r)] = static_cast<std::uint16_t>(r % 3);
        MatrixF scodes(srows, latents);
        for (Index r = 0; r < srows; ++r) {
            for (Index j = 0; j < latents; ++j) {
                const double signal = slabels[static_cast<std::size_t>(r)] == 1 ? 0.15 * static_cast<double>(j) : 0.0;
                scodes(r, j) = static_cast<float>(std::max(0.0, 0.5 * normal(rng) + signal));
            }
        }
        std::vector<std::uint8_t> sy(static_cast<std::size_t>(srows));
        for (Index r = 0; r < srows; ++r) sy[static_cast<std::size_t>(r)] = slabels[static_cast<std::size_t>(r)] == 1;
        const auto picked = best_latent_per_class(scodes, slabels, 1);
        const auto [ref_latent, ref_loss] = oracle::best_latent(scodes, sy);
        c.expect(picked.best_latent == ref_latent, "selection trial " + std::to_string(trial) + ": latent " +
                                                       std::to_string(picked.best_latent) + " vs " +
                                                       std::to_string(ref_latent));
        ++selection_checked;

        // NMSE against a long-double scalar loop.
        const Index nr = 3 + trial, nd = 1 + trial % 7;
        const Matrix x = oracle::random_matrix(nr, nd, rng);
        const Matrix xhat = x + 0.5 * oracle::random_matrix(nr, nd, rng);
        const double a = nmse(x, xhat), b = oracle::nmse(x, xhat);
        worst_nmse = std::max(worst_nmse, std::abs(a - b));
        c.expect(std::abs(a - b) <= 1e-9, "NMSE trial " + std::to_string(trial));

        // The mean predictor scores exactly one.
        Matrix mean_rows(nr, nd);
        for (Index col = 0; col < nd; ++col) mean_rows.col(col).setConstant(x.col(col).mean());
        c.expect(nmse(x, mean_rows) == 1.0, "mean predictor NMSE " + fmt(nmse(x, mean_rows), 17));
    }
    c.note(std::to_string(ap_checked) + " AP, " + std::to_string(purity_checked) + " purity, " +
           std::to_string(selection_checked) + " selection instances exact; max NMSE diff " + fmt(worst_nmse) +
           "; mean predictor NMSE = 1 exactly");
    return c.done();
}

Outcome probe_oracle() {
    Checks c;
    std::mt19937_64 rng(404);
    double worst = 0;
    for (int i = 0; i < 10; ++i) {
        std::vector<double> z;
        std::vector<std::uint8_t> y;
        oracle::random_probe_problem(rng, z, y);
        const auto fit = fit_1d_probe(z, y);
        const auto [w, b] = oracle::probe_grid_search(z, y, 8.0, 8.0);
        const double ref = oracle::probe_loss(z, y, w, b);
        worst = std::max(worst, std::abs(fit.loss - ref));
        c.expect(fit.valid, "probe " + std::to_string(i) + " invalid");
        c.expect(std::abs(fit.loss - ref) <= 1e-6, "probe " + std::to_string(i) + " loss gap " + fmt(fit.loss - ref));
        c.expect(fit.loss <= fit.bias_loss, "probe " + std::to_string(i) + " loss above bias-only loss");
    }
    c.note("max |L - L_grid| " + fmt(worst) + " over 10; L <= L_bias on all");
    return c.done();
}

// ---------------------------------------------------------------- baselines

Outcome baseline_sanity() {
    Checks c;
    // k-means codes are one-hot.
    const Matrix dict = random_dictionary(16, 24, 31);
    auto data = make_synthetic(dict, 3, 20'000, 0.01, 32);
    const auto km = kmeans_fit(data.dataset, 32, {1024, 50, 33});
    const double km_l0 = compute_codes(km, data.dataset).mean_l0;
    c.expect(km_l0 == 1.0, "k-means mean L0 " + fmt(km_l0, 17));

    // PCA error non-increasing in component count.
    const Matrix wide = random_dictionary(96, 160, 34);
    auto wide_data = make_synthetic(wide, 8, 20'000, 0.05, 35);
    std::vector<double> errors;
    for (Index nc : {1, 4, 16, 64}) {
        const auto pca = pca_fit(wide_data.dataset, nc, {2048, 36, 1});
        errors.push_back(compute_codes(pca, wide_data.dataset).nmse);
    }
    for (std::size_t i = 1; i < errors.size(); ++i) {
        c.expect(errors[i] <= errors[i - 1], "PCA error rose from " + fmt(errors[i - 1]) + " to " + fmt(errors[i]));
    }

    // Three separated blobs.
    std::mt19937_64 rng(37);
    std::normal_distribution<double> normal;
    const Matrix centers = 10.0 * oracle::random_matrix(3, 8, rng);
    MatrixF rows(3 * 2000, 8);
    for (Index r = 0; r < rows.rows(); ++r) {
        for (Index j = 0; j < 8; ++j) rows(r, j) = static_cast<float>(centers(r % 3, j) + 0.3 * normal(rng));
    }
    const auto blobs = kmeans_fit(Dataset::from_memory(rows), 3, {512, 100, 38});
    std::vector<std::vector<double>> cost(3, std::vector<double>(3));
    for (Index i = 0; i < 3; ++i) {
        for (Index j = 0; j < 3; ++j) {
            cost[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] = (centers.row(i) - blobs.centroids.row(j)).norm();
        }
    }
    const auto match = oracle::hungarian(cost);
    double worst = 0;
    for (std::size_t i = 0; i < 3; ++i) worst = std::max(worst, cost[i][static_cast<std::size_t>(match[i])]);
    c.expect(worst <= 0.1, "blob mean error " + fmt(worst));
    c.note("k-means L0 " + fmt(km_l0, 17) + "; PCA NMSE at {1,4,16,64} = " + fmt(errors[0]) + ", " + fmt(errors[1]) +
           ", " + fmt(errors[2]) + ", " + fmt(errors[3]) + "; worst matched blob mean error " + fmt(worst));
    return c.done();
}

// ---------------------------------------------------------------- determinism

Outcome determinism() {
    Checks c;
    TempDir dir;
    auto run = [&](std::vector<std::string> args) {
        auto r = run_cli(args);
        c.expect(r.exit_code == 0, "command failed: " + r.output.substr(0, 300));
    };
    const std::string data = (dir / "data").string();
    run({"--seed", "3", "--out", data, "synth", "--d", "16", "--n-true", "24", "--s", "3", "--count", "20000",
         "--val-count", "4000"});
    auto cfg = small_train_config();
    cfg["n"] = 32;
    cfg["total_examples"] = 256 * 300;
    write_file(dir / "cfg.json", cfg.dump());
    auto base = cfg;
    base["total_examples"] = 256 * 100;
    write_file(dir / "grid.json",
               nlohmann::json{{"base", base}, {"learning_rates", {1e-3, 3e-3}}, {"lambdas", {1e-3, 1e-2}}}.dump());

    for (const char* name : {"train_a", "train_b"}) {
        run({"--seed", "7", "--out", (dir / name).string(), "train", "--config", (dir / "cfg.json").string(), "--data",
             data});
    }
    for (const char* name : {"sweep_a", "sweep_b"}) {
        run({"--seed", "7", "--out", (dir / name).string(), "sweep", "--grid", (dir / "grid.json").string(), "--data",
             data, "--val", data + "/val"});
    }
    Index compared = 0;
    auto same = [&](const fs::path& a, const fs::path& b) {
        ++compared;
        const bool exists = fs::exists(a) && fs::exists(b);
        c.expect(exists && digest_file(a) == digest_file(b), "digest differs: " + fs::relative(a, dir.path()).string());
    };
    for (const char* f : {"checkpoint.bin", "history.jsonl", "config.json"}) {
        same(dir / "train_a" / f, dir / "train_b" / f);
    }
    same(dir / "sweep_a/frontier.json", dir / "sweep_b/frontier.json");
    same(dir / "sweep_a/sweep.json", dir / "sweep_b/sweep.json");
    Index runs = 0;
    if (fs::exists(dir / "sweep_a/runs")) {
        for (const auto& e : fs::directory_iterator(dir / "sweep_a/runs")) {
            ++runs;
            for (const char* f : {"checkpoint.bin", "history.jsonl", "metrics.json", "config.json"}) {
                same(e.path() / f, dir / "sweep_b/runs" / e.path().filename() / f);
            }
        }
    }
    c.expect(runs == 4, "sweep produced " + std::to_string(runs) + " runs");
    c.note(std::to_string(compared) + " artifact digests identical across repeated train and sweep (" +
           std::to_string(runs) + " sweep runs)");
    return c.done();
}

// ---------------------------------------------------------------- schedules

Outcome schedule_contract() {
    Checks c;
    TrainConfig config;
    config.lr_max = 3e-3;
    config.lambda_max = 0.04;
    config.batch_size = 4096;
    config.total_examples = 100'000'000;
    config.warmup_steps = 500;
    const Index total = config.total_steps();
    const double lr0 = lr_schedule(0, config), lr500 = lr_schedule(500, config), lr_end = lr_schedule(total, config);
    c.expect(std::abs(lr0) <= 1e-12, "lr(0) = " + fmt(lr0, 17));
    c.expect(std::abs(lr500 - config.lr_max) <= 1e-12, "lr(500) = " + fmt(lr500, 17));
    c.expect(std::abs(lr_end) <= 1e-12, "lr(T) = " + fmt(lr_end, 17));
    const double l0 = lambda_schedule(0, config), lend = lambda_schedule(total, config);
    c.expect(l0 == 0.0, "lambda(0) = " + fmt(l0, 17));
    c.expect(lend == config.lambda_max, "lambda(T) = " + fmt(lend, 17));
    c.expect(lambda_schedule(total / 2, config) ==
                 config.lambda_max * (static_cast<double>(total / 2) / static_cast<double>(total)),
             "lambda is not linear at T/2");
    c.note("T " + std::to_string(total) + ": lr(0) " + fmt(lr0) + ", lr(500) " + fmt(lr500, 17) + ", lr(T) " +
           fmt(lr_end) + "; lambda(0) " + fmt(l0) + ", lambda(T) " + fmt(lend, 17));
    return c.done();
}

struct Criterion {
    const char* name;
    double budget_s;
    std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
    // Optional arguments select criteria by name.
    const std::vector<std::string> only(argv + 1, argv + argc);
    const std::vector<Criterion> criteria = {
        {"gradient-correctness", 30, gradient_correctness},
        {"full-prefix-reduction", 5, full_prefix_reduction},
        {"decoder-constraint", 60, decoder_constraint},
        {"planted-dictionary-recovery", 600, planted_recovery},
        {"concept-rediscovery", 900, concept_rediscovery},
        {"metric-oracles", 30, metric_oracles},
        {"probe-oracle", 60, probe_oracle},
        {"baseline-sanity", 120, baseline_sanity},
        {"determinism", 300, determinism},
        {"schedule-contract", 1, schedule_contract},
    };
    int failures = 0;
    int ran = 0;
    for (const auto& criterion : criteria) {
        if (!only.empty() && std::find(only.begin(), only.end(), criterion.name) == only.end()) {
            continue;
        }
        ++ran;
        const auto start = std::chrono::steady_clock::now();
        Outcome outcome;
        try {
            outcome = criterion.run();
        } catch (const std::exception& e) {
            outcome = {false, std::string("exception: ") + e.what()};
        }
        const double elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        if (elapsed > criterion.budget_s) {
            outcome.pass = false;
            outcome.detail += "; over time budget";
        }
        failures += outcome.pass ? 0 : 1;
        std::printf("%s %-28s %7.2fs / %4.0fs  %s\n", outcome.pass ? "PASS" : "FAIL", criterion.name, elapsed,
                    criterion.budget_s, outcome.detail.c_str());
        std::fflush(stdout);
    }
    std::printf("%d of %d criteria passed\n", ran - failures, ran);
    return failures == 0 ? 0 : 1;
}
