// spdict command-line entry point: dataset creation, training, sweeps,
// evaluation, reports and exhibits. Exit codes: 0 success, 1 runtime
// failure, 2 usage or configuration error.

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <iostream>
#include <map>

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "spdict/spdict.hpp"

#include "render.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace spdict;

namespace {

/// Bad flags or configuration; maps to exit code 2.
class UsageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct GlobalOptions {
    std::uint64_t seed = 0;
    bool seed_given = false;
    fs::path out;
    int threads = 0;
    std::string log_level = "info";
};

fs::path manifest_path(const fs::path& p) { return fs::is_directory(p) ? p / "manifest.json" : p; }

Dataset open_dataset(const fs::path& p) {
    const auto manifest = manifest_path(p);
    if (!fs::exists(manifest)) {
        throw UsageError("dataset not found: " + manifest.string());
    }
    return Dataset::open(manifest);
}

/// Digest over the manifest and every file it references.
std::string dataset_digest(const Dataset& ds, const fs::path& p) {
    Fnv1a h;
    h.update(digest_file(manifest_path(p)));
    for (const auto& shard : ds.manifest().shards) {
        h.update(digest_file(ds.root() / shard));
    }
    if (ds.manifest().label_file) {
        h.update(digest_file(ds.root() / *ds.manifest().label_file));
    }
    return h.hex();
}

fs::path require_out(const GlobalOptions& g) {
    if (g.out.empty()) {
        throw UsageError("--out is required");
    }
    fs::create_directories(g.out);
    return g.out;
}

std::string json_text(const json& j) { return j.dump(2) + "\n"; }

/// Provenance written next to every command's outputs as run.json.
class RunRecord {
public:
    RunRecord(std::string command, const GlobalOptions& g, std::vector<std::string> argv)
        : command_(std::move(command)), seed_(g.seed), argv_(std::move(argv)), start_(std::chrono::steady_clock::now()) {
        const auto now = std::chrono::system_clock::now();
        const auto t = std::chrono::system_clock::to_time_t(now);
        std::tm tm{};
        gmtime_r(&t, &tm);
        char stamp[32];
        std::strftime(stamp, sizeof stamp, "%Y%m%dT%H%M%SZ", &tm);
        started_ = stamp;
        std::random_device rd;
        std::ostringstream id;
        id << command_ << "-" << stamp << "-" << std::hex << (static_cast<std::uint64_t>(rd()) << 32 | rd());
        run_id_ = id.str();
    }

    void config(const std::string& digest) { config_digest_ = digest; }
    void input(const std::string& name, const std::string& digest) { inputs_[name] = digest; }
    void output(const fs::path& p) { outputs_.push_back(p.string()); }

    void write(const fs::path& dir) const {
        json j;
        j["run_id"] = run_id_;
        j["command"] = command_;
        j["argv"] = argv_;
        j["seed"] = seed_;
        j["config_digest"] = config_digest_;
        j["input_digests"] = inputs_;
        j["outputs"] = outputs_;
        j["started_utc"] = started_;
        j["wall_time_s"] =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
        j["versions"] = {{"spdict", SPDICT_VERSION}, {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." +
                                                                   std::to_string(EIGEN_MAJOR_VERSION) + "." +
                                                                   std::to_string(EIGEN_MINOR_VERSION)}};
        write_file(dir / "run.json", json_text(j));
    }

private:
    std::string command_;
    std::uint64_t seed_;
    std::vector<std::string> argv_;
    std::chrono::steady_clock::time_point start_;
    std::string started_;
    std::string run_id_;
    std::string config_digest_;
    std::map<std::string, std::string> inputs_;
    std::vector<std::string> outputs_;
};

void write_history(const TrainHistory& history, const fs::path& path) {
    std::string text;
    for (const auto& r : history) {
        text += history_line(r) + "\n";
    }
    write_file(path, text);
}

TrainConfig load_config_or_usage(const fs::path& path) {
    if (!fs::exists(path)) {
        throw UsageError("config not found: " + path.string());
    }
    try {
        auto config = load_train_config(path);
        config.validate();
        return config;
    } catch (const spdict::Error& e) {
        throw UsageError(e.what());
    }
}

// ---------------------------------------------------------------- synth

struct SynthArgs {
    Index d = 0;
    Index n_true = 0;
    Index s = 3;
    double sigma = 0.01;
    Index count = 1000;
    Index val_count = 0;
    std::optional<std::uint64_t> dict_seed;
    Index labeled_atoms = 0;
    Index shard_rows = 65536;
};

int cmd_synth(const SynthArgs& a, const GlobalOptions& g, RunRecord& run) {
    const auto out = require_out(g);
    const Index n_true = a.n_true > 0 ? a.n_true : 2 * a.d;
    if (a.s < 1 || a.s > n_true || a.count < 1 || a.sigma < 0 || a.labeled_atoms > n_true) {
        throw UsageError("synth: need 1 <= s <= n-true, count >= 1, sigma >= 0, labeled-atoms <= n-true");
    }
    const std::uint64_t dict_seed = a.dict_seed.value_or(g.seed);
    const Matrix dict = random_dictionary(a.d, n_true, dict_seed);
    SyntheticOptions opt;
    opt.labeled_atoms = a.labeled_atoms;

    auto emit = [&](const fs::path& dir, Index count, std::uint64_t seed) {
        auto syn = make_synthetic(dict, a.s, count, a.sigma, seed, opt);
        DatasetManifest meta;
        meta.model_id = "synthetic";
        if (a.labeled_atoms > 0) {
            meta.class_count = static_cast<int>(a.labeled_atoms);
        }
        std::optional<std::vector<std::uint16_t>> labels;
        if (syn.dataset.has_labels()) {
            labels = syn.dataset.labels();
        }
        const auto manifest = write_dataset(dir, syn.dataset.load_all(), labels, meta, a.shard_rows);
        write_shard(syn.codes, n_true, dir / "codes.bin");
        run.output(manifest);
        run.output(dir / "codes.bin");
        spdlog::info("wrote {} rows to {}", count, dir.string());
    };
    emit(out, a.count, g.seed);
    if (a.val_count > 0) {
        emit(out / "val", a.val_count, mix_seed(g.seed, 0x7a1));
    }
    // One atom per row.
    write_shard(dict.transpose(), a.d, out / "dictionary.bin");
    run.output(out / "dictionary.bin");
    json cfg = {{"d", a.d}, {"n_true", n_true}, {"s", a.s}, {"sigma", a.sigma}, {"count", a.count},
                {"val_count", a.val_count}, {"seed", g.seed}, {"dict_seed", dict_seed},
                {"labeled_atoms", a.labeled_atoms}, {"shard_rows", a.shard_rows}};
    write_file(out / "synth.json", json_text(cfg));
    run.config(digest_bytes(cfg.dump()));
    run.write(out);
    return 0;
}

// ---------------------------------------------------------------- extract

int cmd_extract(const std::vector<std::string>& args) {
    const char* path_env = std::getenv("PATH");
    std::string found;
    std::istringstream dirs(path_env ? path_env : "");
    for (std::string dir; std::getline(dirs, dir, ':');) {
        const fs::path candidate = fs::path(dir) / "spdict-extract";
        if (!dir.empty() && fs::exists(candidate)) {
            found = candidate.string();
            break;
        }
    }
    if (found.empty()) {
        spdlog::error("extract: the Python extractor 'spdict-extract' is not on PATH");
        return 1;
    }
    auto quote = [](const std::string& s) {
        std::string q = "'";
        for (char c : s) {
            q += c == '\'' ? std::string("'\\''") : std::string(1, c);
        }
        return q + "'";
    };
    std::string command = quote(found);
    for (const auto& a : args) {
        command += " " + quote(a);
    }
    const int status = std::system(command.c_str());
    return status == 0 ? 0 : (WIFEXITED(status) ? WEXITSTATUS(status) : 1);
}

// ---------------------------------------------------------------- train

struct TrainArgs {
    fs::path config;
    fs::path data;
    std::string baseline;
    Index size = 0;
    Index iterations = 100;
    Index batch_size = 16384;
    Index epochs = 1;
};

int train_baseline(const TrainArgs& a, const GlobalOptions& g, RunRecord& run) {
    const auto out = require_out(g);
    if (a.size < 1) {
        throw UsageError("train: --size is required for baselines");
    }
    auto ds = open_dataset(a.data);
    run.input("data", dataset_digest(ds, a.data));
    json cfg = {{"baseline", a.baseline}, {"size", a.size}, {"batch_size", a.batch_size}, {"seed", g.seed}};
    Checkpoint ck;
    if (a.baseline == "kmeans") {
        cfg["iterations"] = a.iterations;
        ck = kmeans_checkpoint(kmeans_fit(ds, a.size, {a.batch_size, a.iterations, g.seed}));
    } else if (a.baseline == "pca") {
        cfg["epochs"] = a.epochs;
        ck = pca_checkpoint(pca_fit(ds, a.size, {a.batch_size, g.seed, a.epochs}));
    } else {
        throw UsageError("train: --baseline must be kmeans or pca");
    }
    ck.save(out / "checkpoint.bin");
    write_file(out / "config.json", json_text(cfg));
    run.config(digest_bytes(cfg.dump()));
    run.output(out / "checkpoint.bin");
    run.write(out);
    spdlog::info("{} baseline written to {}", a.baseline, (out / "checkpoint.bin").string());
    return 0;
}

int cmd_train(const TrainArgs& a, const GlobalOptions& g, RunRecord& run) {
    if (!a.baseline.empty()) {
        return train_baseline(a, g, run);
    }
    if (a.config.empty()) {
        throw UsageError("train: --config is required (or --baseline)");
    }
    auto config = load_config_or_usage(a.config);
    if (g.seed_given) {
        config.seed = g.seed;
    }
    const auto out = require_out(g);
    auto ds = open_dataset(a.data);
    const json resolved = to_json(config);
    write_file(out / "config.json", json_text(resolved));
    run.config(digest_bytes(resolved.dump()));
    run.input("data", dataset_digest(ds, a.data));

    spdlog::info("training {} SAE: n={} d={} steps={}", to_string(config.objective), config.n, ds.dim(),
                 config.total_steps());
    TrainResult result;
    try {
        result = train(config, ds, {}, [](const HistoryRecord& r) { spdlog::info("{}", history_line(r)); });
    } catch (const TrainingAborted& e) {
        const auto path = out / "last_good.bin";
        sae_checkpoint(e.last_good(), config.objective, static_cast<std::uint64_t>(e.step() - 1)).save(path);
        run.output(path);
        run.write(out);
        spdlog::error("training aborted: {}; last good checkpoint: {}", e.what(), path.string());
        return 1;
    }
    result.checkpoint(config.objective).save(out / "checkpoint.bin");
    write_history(result.history, out / "history.jsonl");
    run.output(out / "checkpoint.bin");
    run.output(out / "history.jsonl");
    run.write(out);
    spdlog::info("checkpoint written to {}", (out / "checkpoint.bin").string());
    return 0;
}

// ---------------------------------------------------------------- sweep

struct SweepArgs {
    fs::path grid;
    fs::path data;
    fs::path val;
    fs::path select_train;
    int parallelism = 0;
};

int cmd_sweep(const SweepArgs& a, const GlobalOptions& g, RunRecord& run) {
    if (!fs::exists(a.grid)) {
        throw UsageError("grid not found: " + a.grid.string());
    }
    SweepSpec spec;
    try {
        spec = sweep_spec_from_json(parse_json_file(a.grid), a.grid.string());
    } catch (const spdict::Error& e) {
        throw UsageError(e.what());
    }
    if (g.seed_given) {
        spec.base.seed = g.seed;
    }
    const auto out = require_out(g);
    auto train_set = open_dataset(a.data);
    auto val_set = a.val.empty() ? train_set : open_dataset(a.val);
    const auto data_digest = dataset_digest(train_set, a.data);
    const auto val_digest = a.val.empty() ? data_digest : dataset_digest(val_set, a.val);
    run.input("data", data_digest);
    run.input("val", val_digest);
    run.config(digest_file(a.grid));

    const auto configs = spec.grid.expand(spec.base);
    struct Slot {
        TrainConfig config;
        std::string tag;
        fs::path dir;
        std::string config_digest;
        bool reused = false;
        std::string error;
        DictionaryStats stats;
    };
    std::vector<Slot> slots(configs.size());
    std::vector<Index> pending;
    for (std::size_t i = 0; i < configs.size(); ++i) {
        auto& s = slots[i];
        s.config = configs[i];
        s.tag = config_tag(s.config);
        s.dir = out / "runs" / s.tag;
        s.config_digest = digest_bytes(to_json(s.config).dump());
        const auto metrics_path = s.dir / "metrics.json";
        if (fs::exists(metrics_path) && fs::exists(s.dir / "checkpoint.bin")) {
            try {
                const auto m = parse_json_file(metrics_path);
                if (m.at("config_digest") == s.config_digest && m.at("data_digest") == data_digest &&
                    m.at("val_digest") == val_digest &&
                    m.at("checkpoint_digest") == digest_file(s.dir / "checkpoint.bin")) {
                    s.stats = {m.at("nmse").get<double>(), m.at("l0").get<double>()};
                    s.reused = true;
                    continue;
                }
            } catch (const std::exception&) {
                // Unreadable metrics: rerun.
            }
        }
        pending.push_back(static_cast<Index>(i));
    }
    spdlog::info("sweep: {} runs, {} already complete", slots.size(), slots.size() - pending.size());

    const int workers = a.parallelism > 0 ? a.parallelism : (g.threads > 0 ? g.threads : default_threads());
    parallel_for(static_cast<Index>(pending.size()), workers, [&](Index p) {
        auto& s = slots[static_cast<std::size_t>(pending[static_cast<std::size_t>(p)])];
        fs::create_directories(s.dir);
        fs::remove(s.dir / "error.json");
        write_file(s.dir / "config.json", json_text(to_json(s.config)));
        try {
            auto result = train(s.config, train_set);
            result.checkpoint(s.config.objective).save(s.dir / "checkpoint.bin");
            write_history(result.history, s.dir / "history.jsonl");
            s.stats = sae_dictionary_stats(round_to_f32(result.params), val_set);
            json m = {{"tag", s.tag},
                      {"nmse", s.stats.nmse},
                      {"l0", s.stats.mean_l0},
                      {"config_digest", s.config_digest},
                      {"data_digest", data_digest},
                      {"val_digest", val_digest},
                      {"checkpoint_digest", digest_file(s.dir / "checkpoint.bin")}};
            write_file(s.dir / "metrics.json", json_text(m));
            spdlog::info("sweep run {} done: nmse={:.4f} l0={:.2f}", s.tag, s.stats.nmse, s.stats.mean_l0);
        } catch (const std::exception& e) {
            s.error = e.what();
            write_file(s.dir / "error.json", json_text(json{{"tag", s.tag}, {"error", s.error}}));
            spdlog::warn("sweep run {} failed: {}", s.tag, s.error);
        }
    });

    std::vector<DictionaryStats> points;
    std::vector<std::size_t> ok;
    json runs = json::array();
    for (std::size_t i = 0; i < slots.size(); ++i) {
        const auto& s = slots[i];
        json r = {{"tag", s.tag}, {"dir", fs::relative(s.dir, out).string()}, {"reused", s.reused}};
        if (s.error.empty()) {
            r["nmse"] = s.stats.nmse;
            r["l0"] = s.stats.mean_l0;
            ok.push_back(i);
            points.push_back(s.stats);
        } else {
            r["error"] = s.error;
        }
        runs.push_back(r);
    }
    json frontier = json::array();
    std::vector<std::size_t> frontier_slots;
    for (auto idx : pareto_frontier(points)) {
        const auto& s = slots[ok[idx]];
        frontier_slots.push_back(ok[idx]);
        frontier.push_back({{"tag", s.tag}, {"nmse", s.stats.nmse}, {"l0", s.stats.mean_l0}});
    }
    write_file(out / "frontier.json", json_text(frontier));
    // Reuse flags and failures vary between invocations, so they live beside the deterministic outputs.
    write_file(out / "sweep.json", json_text(json{{"runs", runs}}));
    run.output(out / "frontier.json");
    run.output(out / "sweep.json");

    if (!a.select_train.empty() && !frontier_slots.empty()) {
        auto labeled = open_dataset(a.select_train);
        run.input("select_train", dataset_digest(labeled, a.select_train));
        std::vector<AnyModel> family;
        for (auto i : frontier_slots) {
            family.push_back(load_model(slots[i].dir / "checkpoint.bin"));
        }
        EvalOptions opt;
        opt.threads = g.threads > 0 ? g.threads : default_threads();
        std::vector<double> losses;
        const auto best = select_best_by_probe(family, labeled, opt, &losses);
        json sel = {{"selected", slots[frontier_slots[best]].tag}, {"candidates", json::array()}};
        for (std::size_t i = 0; i < frontier_slots.size(); ++i) {
            sel["candidates"].push_back({{"tag", slots[frontier_slots[i]].tag}, {"probe_loss", losses[i]}});
        }
        write_file(out / "selected.json", json_text(sel));
        run.output(out / "selected.json");
        spdlog::info("selected {}", slots[frontier_slots[best]].tag);
    }
    run.write(out);
    const auto failures = slots.size() - ok.size();
    if (failures > 0) {
        spdlog::warn("{} of {} sweep runs failed", failures, slots.size());
    }
    return failures == slots.size() ? 1 : 0;
}

// ---------------------------------------------------------------- eval / report

struct EvalArgs {
    fs::path model;
    fs::path train;
    fs::path val;
    Index k = 16;
    double tau = 0.3;
    Index probe_rows = 2'000'000;
    std::string bias_init = "log-odds";
    bool save_codes = false;
    std::string name;
};

EvalOptions eval_options(const EvalArgs& a, const GlobalOptions& g) {
    EvalOptions opt;
    opt.k = a.k;
    opt.tau = a.tau;
    opt.probe_row_budget = a.probe_rows;
    opt.seed = g.seed;
    opt.threads = g.threads > 0 ? g.threads : default_threads();
    if (a.bias_init == "prevalence") {
        opt.probe.bias_init = BiasInit::prevalence;
    } else if (a.bias_init != "log-odds") {
        throw UsageError("--bias-init must be log-odds or prevalence");
    }
    if (a.k < 1 || a.tau < 0 || a.tau > 1) {
        throw UsageError("need k >= 1 and tau in [0, 1]");
    }
    return opt;
}

json options_json(const EvalOptions& o) {
    return {{"k", o.k},
            {"tau", o.tau},
            {"probe_rows", o.probe_row_budget},
            {"seed", o.seed},
            {"bias_init", o.probe.bias_init == BiasInit::log_odds ? "log-odds" : "prevalence"}};
}

void write_report(const MetricsReport& report, const std::string& name, const fs::path& out, RunRecord& run) {
    json j = to_json(report);
    j["name"] = name;
    write_file(out / "report.json", json_text(j));
    write_file(out / "report.txt", render_table({{name, report}}));
    run.output(out / "report.json");
    run.output(out / "report.txt");
    std::cout << render_table({{name, report}});
}

int cmd_eval(const EvalArgs& a, const GlobalOptions& g, RunRecord& run) {
    const auto opt = eval_options(a, g);
    const auto out = require_out(g);
    auto model = load_model(a.model);
    auto train_set = open_dataset(a.train);
    auto val_set = open_dataset(a.val);
    run.input("model", digest_file(a.model));
    run.input("train", dataset_digest(train_set, a.train));
    run.input("val", dataset_digest(val_set, a.val));
    run.config(digest_bytes(options_json(opt).dump()));

    SplitCodes train_codes, val_codes;
    auto report = evaluate_model(model, train_set, val_set, opt, &train_codes, &val_codes);
    const auto name = a.name.empty() ? report.model_kind : a.name;
    write_report(report, name, out, run);
    if (a.save_codes) {
        const auto dir = out / "codes";
        fs::create_directories(dir);
        write_shard(train_codes.codes, train_codes.codes.cols(), dir / "train_codes.bin");
        write_shard(val_codes.codes, val_codes.codes.cols(), dir / "val_codes.bin");
        json meta = {{"model_kind", report.model_kind},
                     {"name", name},
                     {"nmse", val_codes.nmse},
                     {"l0", val_codes.mean_l0},
                     {"options", options_json(opt)}};
        write_file(dir / "codes.json", json_text(meta));
        run.output(dir);
    }
    run.write(out);
    return 0;
}

struct ReportArgs {
    std::vector<fs::path> inputs;
    fs::path codes;
    fs::path train;
    fs::path val;
};

MetricsReport report_from_json(const nlohmann::json& j) {
    MetricsReport r;
    r.model_kind = j.at("model_kind").get<std::string>();
    r.nmse = j.at("nmse").get<double>();
    r.mean_l0 = j.at("l0").get<double>();
    r.probe_r = j.at("probe_r").get<double>();
    r.map = j.at("map").get<double>();
    r.purity = j.at("purity_at_k").get<double>();
    r.coverage = j.at("coverage_at_tau").get<double>();
    r.k = j.at("k").get<Index>();
    r.tau = j.at("tau").get<double>();
    return r;
}

int cmd_report(const ReportArgs& a, const GlobalOptions& g, RunRecord& run) {
    if (!a.codes.empty()) {
        if (a.train.empty() || a.val.empty()) {
            throw UsageError("report --codes needs --train and --val for the labels");
        }
        const auto out = require_out(g);
        const auto meta = parse_json_file(a.codes / "codes.json");
        const auto& o = meta.at("options");
        EvalOptions opt;
        opt.k = o.at("k").get<Index>();
        opt.tau = o.at("tau").get<double>();
        opt.probe_row_budget = o.at("probe_rows").get<Index>();
        opt.seed = o.at("seed").get<std::uint64_t>();
        opt.probe.bias_init = o.at("bias_init") == "prevalence" ? BiasInit::prevalence : BiasInit::log_odds;
        opt.threads = g.threads > 0 ? g.threads : default_threads();
        auto train_set = open_dataset(a.train);
        auto val_set = open_dataset(a.val);
        check_splits(train_set, val_set);
        const MatrixF train_codes = read_shard(a.codes / "train_codes.bin");
        const MatrixF val_codes = read_shard(a.codes / "val_codes.bin");
        SplitCodes dict{MatrixF(), meta.at("nmse").get<double>(), meta.at("l0").get<double>()};
        auto report = evaluate_codes(train_codes, train_set.labels(), val_codes, val_set.labels(),
                                     train_set.class_count(), dict, opt);
        report.model_kind = meta.at("model_kind").get<std::string>();
        run.input("codes", digest_file(a.codes / "train_codes.bin") + digest_file(a.codes / "val_codes.bin"));
        write_report(report, meta.at("name").get<std::string>(), out, run);
        run.write(out);
        return 0;
    }
    if (a.inputs.empty()) {
        throw UsageError("report: give report.json files or directories, or --codes");
    }
    std::vector<std::pair<std::string, MetricsReport>> rows;
    for (const auto& in : a.inputs) {
        const auto path = fs::is_directory(in) ? in / "report.json" : in;
        const auto j = parse_json_file(path);
        rows.emplace_back(j.value("name", path.parent_path().filename().string()), report_from_json(j));
        run.input(path.string(), digest_file(path));
    }
    const auto table = render_table(rows);
    std::cout << table;
    if (!g.out.empty()) {
        fs::create_directories(g.out);
        write_file(g.out / "report.txt", table);
        run.output(g.out / "report.txt");
        run.write(g.out);
    }
    return 0;
}

// ---------------------------------------------------------------- exhibits

struct ExhibitArgs {
    fs::path model;
    fs::path data;
    std::vector<Index> latents;
    bool per_class_best = false;
    fs::path train;
    Index k = 16;
    fs::path images;
};

int cmd_exhibits(const ExhibitArgs& a, const GlobalOptions& g, RunRecord& run) {
    if (a.latents.empty() == !a.per_class_best) {
        throw UsageError("exhibits: give exactly one of --latents or --per-class-best");
    }
    if (a.k < 1) {
        throw UsageError("exhibits: --k must be >= 1");
    }
    const auto out = require_out(g);
    auto model = load_model(a.model);
    auto ds = open_dataset(a.data);
    const auto& manifest = ds.manifest();
    run.input("model", digest_file(a.model));
    run.input("data", dataset_digest(ds, a.data));
    const MatrixF codes = compute_codes(model, ds).codes;

    std::vector<std::pair<Index, int>> requests;  // (latent, class or -1)
    if (a.per_class_best) {
        const fs::path train_path = a.train.empty() ? a.data : a.train;
        auto train_set = a.train.empty() ? ds : open_dataset(a.train);
        if (!train_set.has_labels()) {
            throw UsageError("exhibits --per-class-best needs a labeled split (--train)");
        }
        const MatrixF train_codes = a.train.empty() ? codes : compute_codes(model, train_set).codes;
        std::vector<int> classes(static_cast<std::size_t>(train_set.class_count()));
        std::iota(classes.begin(), classes.end(), 0);
        const int threads = g.threads > 0 ? g.threads : default_threads();
        for (const auto& c : best_latents(train_codes, train_set.labels(), classes, {}, threads)) {
            if (c.present) {
                requests.emplace_back(c.best_latent, c.class_id);
            }
        }
    } else {
        for (auto l : a.latents) {
            requests.emplace_back(l, -1);
        }
    }

    const bool render_images = !a.images.empty() && manifest.patch_rows > 0;
    if (!a.images.empty() && manifest.patch_rows == 0) {
        spdlog::warn("dataset manifest has no patch grid; writing the listing only");
    }
    std::map<Index, cv::Mat> image_cache;
    auto source_image = [&](const ExhibitEntry& e) -> cv::Mat {
        if (auto it = image_cache.find(e.image_index); it != image_cache.end()) {
            return it->second;
        }
        cv::Mat img;
        if (!e.image_id.empty()) {
            if (auto path = render::find_image(a.images, e.image_id)) {
                img = render::load_grid_image(*path, manifest.patch_rows, manifest.patch_cols);
            }
        }
        if (img.empty()) {
            spdlog::warn("source image missing for '{}' (row {})", e.image_id, e.row_id);
        }
        return image_cache[e.image_index] = img;
    };

    json listing = json::array();
    Index gaps = 0;
    for (const auto& [latent, class_id] : requests) {
        const auto entries = exhibit_entries(codes, latent, a.k, manifest);
        json item = {{"latent", latent}};
        if (class_id >= 0) {
            item["class_id"] = class_id;
        }
        std::vector<cv::Mat> crops;
        json rows = json::array();
        std::map<Index, std::string> heatmaps;
        for (const auto& e : entries) {
            json r = {{"rank", e.rank},         {"row_id", e.row_id},       {"activation", e.activation},
                      {"image_id", e.image_id}, {"patch_row", e.patch_row}, {"patch_col", e.patch_col}};
            if (render_images) {
                const cv::Mat img = source_image(e);
                r["missing"] = img.empty();
                if (img.empty()) {
                    ++gaps;
                    crops.emplace_back();
                } else {
                    crops.push_back(render::crop_patch(img, e.patch_row, e.patch_col));
                    if (!heatmaps.count(e.image_index)) {
                        const auto acts = image_patch_activations(codes, latent, e.image_index, manifest);
                        const auto file = "latent_" + std::to_string(latent) + "_heat_" + e.image_id + ".png";
                        cv::imwrite((out / file).string(),
                                    render::heatmap_overlay(img, acts, manifest.patch_rows, manifest.patch_cols,
                                                            entries.front().activation));
                        heatmaps[e.image_index] = file;
                    }
                    r["heatmap"] = heatmaps[e.image_index];
                }
            }
            rows.push_back(r);
        }
        item["entries"] = rows;
        if (render_images && !crops.empty()) {
            const auto file = "latent_" + std::to_string(latent) + "_grid.png";
            cv::imwrite((out / file).string(), render::tile(crops, 4, 64));
            item["grid"] = file;
        }
        listing.push_back(item);
    }
    write_file(out / "exhibits.json", json_text(json{{"k", a.k}, {"latents", listing}, {"missing_images", gaps}}));
    run.output(out / "exhibits.json");
    run.write(out);
    if (gaps > 0) {
        spdlog::warn("{} exhibit tiles had no source image and are marked missing", gaps);
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    auto logger = spdlog::stderr_color_mt("spdict");
    spdlog::set_default_logger(logger);
    spdlog::set_pattern("[%H:%M:%S] [%^%l%$] %v");

    CLI::App app{"Sparse dictionary learning on patch activations"};
    app.set_version_flag("--version", std::string(SPDICT_VERSION));
    app.require_subcommand(1);
    app.fallthrough();

    GlobalOptions g;
    app.add_option("--seed", g.seed, "Seed for every random choice of the run");
    app.add_option("--out", g.out, "Output directory");
    app.add_option("--threads", g.threads, "Worker threads (default: SPDICT_THREADS or hardware)")
        ->check(CLI::NonNegativeNumber);
    app.add_option("--log-level", g.log_level, "trace, debug, info, warn, error or off")
        ->check(CLI::IsMember({"trace", "debug", "info", "warn", "error", "off"}));

    SynthArgs synth;
    auto* synth_cmd = app.add_subcommand("synth", "Write a planted sparse-dictionary dataset");
    synth_cmd->add_option("--d", synth.d, "Activation width")->required()->check(CLI::PositiveNumber);
    synth_cmd->add_option("--n-true", synth.n_true, "Planted atoms (default 2d)")->check(CLI::PositiveNumber);
    synth_cmd->add_option("--s", synth.s, "Active atoms per row");
    synth_cmd->add_option("--sigma", synth.sigma, "Gaussian noise scale");
    synth_cmd->add_option("--count", synth.count, "Rows");
    synth_cmd->add_option("--val-count", synth.val_count, "Rows of a held-out split written to <out>/val");
    synth_cmd->add_option("--dict-seed", synth.dict_seed, "Dictionary seed (default --seed)");
    synth_cmd->add_option("--labeled-atoms", synth.labeled_atoms, "Label each row by its first atom among the first N");
    synth_cmd->add_option("--shard-rows", synth.shard_rows, "Rows per shard")->check(CLI::PositiveNumber);

    std::vector<std::string> extract_args;
    auto* extract_cmd = app.add_subcommand("extract", "Run the activation extractor (spdict-extract)");
    extract_cmd->allow_extras();
    extract_cmd->prefix_command();
    extract_cmd->fallthrough(false);

    TrainArgs train_args;
    auto* train_cmd = app.add_subcommand("train", "Train an SAE from a config, or a k-means/PCA baseline");
    train_cmd->add_option("--config", train_args.config, "Training config (JSON)");
    train_cmd->add_option("--data", train_args.data, "Dataset directory or manifest")->required();
    train_cmd->add_option("--baseline", train_args.baseline, "kmeans or pca instead of an SAE");
    train_cmd->add_option("--size", train_args.size, "Clusters or components for a baseline");
    train_cmd->add_option("--iterations", train_args.iterations, "k-means iterations");
    train_cmd->add_option("--batch-size", train_args.batch_size, "Baseline batch size");
    train_cmd->add_option("--epochs", train_args.epochs, "PCA passes over the data");

    SweepArgs sweep_args;
    auto* sweep_cmd = app.add_subcommand("sweep", "Train a learning-rate x sparsity grid and its Pareto frontier");
    sweep_cmd->add_option("--grid", sweep_args.grid, "Sweep spec (JSON)")->required();
    sweep_cmd->add_option("--data", sweep_args.data, "Training dataset")->required();
    sweep_cmd->add_option("--val", sweep_args.val, "Dataset for frontier NMSE and L0 (default: --data)");
    sweep_cmd->add_option("--parallelism", sweep_args.parallelism, "Concurrent runs");
    sweep_cmd->add_option("--select-train", sweep_args.select_train,
                          "Labeled split for picking a frontier model by probe loss");

    EvalArgs eval_args;
    auto* eval_cmd = app.add_subcommand("eval", "Concept-alignment metrics for a checkpoint");
    eval_cmd->add_option("--model", eval_args.model, "Checkpoint")->required();
    eval_cmd->add_option("--train", eval_args.train, "Labeled split for probe selection")->required();
    eval_cmd->add_option("--val", eval_args.val, "Labeled split for metrics")->required();
    eval_cmd->add_option("--k", eval_args.k, "Purity@k");
    eval_cmd->add_option("--tau", eval_args.tau, "Coverage threshold");
    eval_cmd->add_option("--probe-rows", eval_args.probe_rows, "Training rows used to fit probes");
    eval_cmd->add_option("--bias-init", eval_args.bias_init, "Probe bias start: log-odds or prevalence");
    eval_cmd->add_flag("--save-codes", eval_args.save_codes, "Store codes so report can rebuild the metrics");
    eval_cmd->add_option("--name", eval_args.name, "Row label in the table");

    ExhibitArgs ex;
    std::string latent_list;
    auto* ex_cmd = app.add_subcommand("exhibits", "Top-activating patches per latent, as listings and images");
    ex_cmd->add_option("--model", ex.model, "Checkpoint")->required();
    ex_cmd->add_option("--data", ex.data, "Dataset with image ids and patch grid")->required();
    ex_cmd->add_option("--latents", latent_list, "Comma-separated latent ids");
    ex_cmd->add_flag("--per-class-best", ex.per_class_best, "Use each class's best probe latent");
    ex_cmd->add_option("--train", ex.train, "Labeled split for --per-class-best (default: --data)");
    ex_cmd->add_option("--k", ex.k, "Patches per latent");
    ex_cmd->add_option("--images", ex.images, "Directory of source images named by image id");

    ReportArgs report_args;
    auto* report_cmd = app.add_subcommand("report", "Tabulate reports, or rebuild one from stored codes");
    report_cmd->add_option("inputs", report_args.inputs, "report.json files or directories");
    report_cmd->add_option("--codes", report_args.codes, "Codes directory written by eval --save-codes");
    report_cmd->add_option("--train", report_args.train, "Labeled train split (with --codes)");
    report_cmd->add_option("--val", report_args.val, "Labeled validation split (with --codes)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }
    g.seed_given = app.get_option("--seed")->count() > 0;
    spdlog::set_level(spdlog::level::from_str(g.log_level));
    if (g.threads > 0) {
        Eigen::setNbThreads(g.threads);
    }

    std::vector<std::string> args(argv, argv + argc);
    try {
        if (*synth_cmd) {
            RunRecord run("synth", g, args);
            return cmd_synth(synth, g, run);
        }
        if (*extract_cmd) {
            return cmd_extract(extract_cmd->remaining());
        }
        if (*train_cmd) {
            RunRecord run("train", g, args);
            return cmd_train(train_args, g, run);
        }
        if (*sweep_cmd) {
            RunRecord run("sweep", g, args);
            return cmd_sweep(sweep_args, g, run);
        }
        if (*eval_cmd) {
            RunRecord run("eval", g, args);
            return cmd_eval(eval_args, g, run);
        }
        if (*ex_cmd) {
            if (!latent_list.empty()) {
                std::istringstream in(latent_list);
                for (std::string tok; std::getline(in, tok, ',');) {
                    try {
                        ex.latents.push_back(std::stoll(tok));
                    } catch (const std::exception&) {
                        throw UsageError("--latents: not an integer: '" + tok + "'");
                    }
                }
            }
            RunRecord run("exhibits", g, args);
            return cmd_exhibits(ex, g, run);
        }
        if (*report_cmd) {
            RunRecord run("report", g, args);
            return cmd_report(report_args, g, run);
        }
    } catch (const UsageError& e) {
        spdlog::error("{}", e.what());
        return 2;
    } catch (const std::exception& e) {
        spdlog::error("{}", e.what());
        return 1;
    }
    return 2;
}
