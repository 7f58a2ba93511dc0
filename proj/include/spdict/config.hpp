#ifndef SPDICT_CONFIG_HPP
#define SPDICT_CONFIG_HPP

#include "json.hpp"

#include "trainer.hpp"

/**
 * @file config.hpp
 * @brief JSON forms of TrainConfig and sweep grids. Every field must be
 * present in a config file; unknown keys are rejected.
 */

namespace spdict {

inline const std::vector<std::string>& train_config_keys() {
    static const std::vector<std::string> keys = {
        "objective",     "n",         "lambda_max", "lr_max",     "batch_size", "total_examples", "warmup_steps",
        "seed",          "prefix_count", "adam_beta1", "adam_beta2", "adam_eps",   "log_every"};
    return keys;
}

inline nlohmann::ordered_json to_json(const TrainConfig& c) {
    nlohmann::ordered_json j;
    j["objective"] = to_string(c.objective);
    j["n"] = c.n;
    j["lambda_max"] = c.lambda_max;
    j["lr_max"] = c.lr_max;
    j["batch_size"] = c.batch_size;
    j["total_examples"] = c.total_examples;
    j["warmup_steps"] = c.warmup_steps;
    j["seed"] = c.seed;
    j["prefix_count"] = c.prefix_count;
    j["adam_beta1"] = c.beta1;
    j["adam_beta2"] = c.beta2;
    j["adam_eps"] = c.eps;
    j["log_every"] = c.log_every;
    return j;
}

inline TrainConfig train_config_from_json(const nlohmann::json& j, const std::string& origin = "config") {
    if (!j.is_object()) {
        throw FormatError(origin + ": expected a JSON object");
    }
    const auto& keys = train_config_keys();
    for (const auto& item : j.items()) {
        if (std::find(keys.begin(), keys.end(), item.key()) == keys.end()) {
            throw FormatError(origin + ": unknown key '" + item.key() + "'");
        }
    }
    TrainConfig c;
    auto get = [&](const std::string& key, auto& out) {
        if (!j.contains(key)) {
            throw FormatError(origin + ": missing key '" + key + "'");
        }
        try {
            using T = std::decay_t<decltype(out)>;
            if constexpr (std::is_integral_v<T>) {
                if (!j.at(key).is_number_integer()) {
                    throw FormatError("expected an integer");
                }
            } else if constexpr (std::is_floating_point_v<T>) {
                if (!j.at(key).is_number()) {
                    throw FormatError("expected a number");
                }
            }
            out = j.at(key).get<T>();
        } catch (const std::exception& e) {
            throw FormatError(origin + ": invalid value for key '" + key + "': " + e.what());
        }
    };
    std::string objective;
    get("objective", objective);
    try {
        c.objective = objective_from_string(objective);
    } catch (const FormatError& e) {
        throw FormatError(origin + ": invalid value for key 'objective': " + e.what());
    }
    get("n", c.n);
    get("lambda_max", c.lambda_max);
    get("lr_max", c.lr_max);
    get("batch_size", c.batch_size);
    get("total_examples", c.total_examples);
    get("warmup_steps", c.warmup_steps);
    get("seed", c.seed);
    get("prefix_count", c.prefix_count);
    get("adam_beta1", c.beta1);
    get("adam_beta2", c.beta2);
    get("adam_eps", c.eps);
    get("log_every", c.log_every);
    try {
        c.validate();
    } catch (const InvalidArgument& e) {
        throw FormatError(origin + ": " + e.what());
    }
    return c;
}

inline nlohmann::json parse_json_file(const std::filesystem::path& path) {
    try {
        return nlohmann::json::parse(read_file(path));
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

inline TrainConfig load_train_config(const std::filesystem::path& path) {
    return train_config_from_json(parse_json_file(path), path.string());
}

/// Sweep file: {"base": <train config>, "learning_rates": [...], "lambdas": [...]}.
struct SweepSpec {
    TrainConfig base;
    SweepGrid grid;
};

inline SweepSpec sweep_spec_from_json(const nlohmann::json& j, const std::string& origin = "sweep") {
    for (const char* key : {"base", "learning_rates", "lambdas"}) {
        if (!j.contains(key)) {
            throw FormatError(origin + ": missing key '" + key + "'");
        }
    }
    for (const auto& item : j.items()) {
        if (item.key() != "base" && item.key() != "learning_rates" && item.key() != "lambdas") {
            throw FormatError(origin + ": unknown key '" + item.key() + "'");
        }
    }
    SweepSpec spec;
    spec.base = train_config_from_json(j.at("base"), origin + ":base");
    try {
        spec.grid.learning_rates = j.at("learning_rates").get<std::vector<double>>();
        spec.grid.lambdas = j.at("lambdas").get<std::vector<double>>();
        spec.grid.validate();
    } catch (const std::exception& e) {
        throw FormatError(origin + ": invalid grid: " + e.what());
    }
    return spec;
}

}  // namespace spdict

#endif
