#pragma once

// Run configuration: one JSON file with model / train / schedule / data
// sections. A missing or null schedule section means a vanilla run (no
// removal events).

#include <fstream>
#include <optional>
#include <string>

#include <json.hpp>

#include "lnfree/common.hpp"
#include "lnfree/model.hpp"
#include "lnfree/schedule.hpp"
#include "lnfree/trainer.hpp"

namespace lnfree {

namespace cfg_detail {

using nlohmann::json;

inline const json& section(const json& j, const std::string& name) {
    if (!j.contains(name) || !j.at(name).is_object()) {
        throw ConfigError("config: missing section \"" + name + "\"");
    }
    return j.at(name);
}

inline double num(const json& j, const std::string& path, const std::string& key,
                  std::optional<double> fallback = std::nullopt) {
    if (!j.contains(key)) {
        if (fallback) return *fallback;
        throw ConfigError("config: missing field " + path + "." + key);
    }
    if (!j.at(key).is_number()) throw ConfigError("config: " + path + "." + key + " must be a number");
    return j.at(key).get<double>();
}

inline int64_t integer(const json& j, const std::string& path, const std::string& key,
                       std::optional<int64_t> fallback = std::nullopt) {
    if (!j.contains(key)) {
        if (fallback) return *fallback;
        throw ConfigError("config: missing field " + path + "." + key);
    }
    if (!j.at(key).is_number_integer()) {
        throw ConfigError("config: " + path + "." + key + " must be an integer");
    }
    return j.at(key).get<int64_t>();
}

inline bool flag(const json& j, const std::string& path, const std::string& key, bool fallback) {
    if (!j.contains(key)) return fallback;
    if (!j.at(key).is_boolean()) throw ConfigError("config: " + path + "." + key + " must be a boolean");
    return j.at(key).get<bool>();
}

inline std::string str(const json& j, const std::string& path, const std::string& key,
                       std::optional<std::string> fallback = std::nullopt) {
    if (!j.contains(key)) {
        if (fallback) return *fallback;
        throw ConfigError("config: missing field " + path + "." + key);
    }
    if (!j.at(key).is_string()) throw ConfigError("config: " + path + "." + key + " must be a string");
    return j.at(key).get<std::string>();
}

}  // namespace cfg_detail

struct DataConfig {
    std::string train_path;
    std::string eval_path;  // defaults to train_path
    int64_t seq_len = 128;
    int64_t eval_batch_size = 8;
};

struct RunConfig {
    ModelConfig model;
    TrainConfig train;
    bool has_schedule = false;
    ScheduleConfig schedule;
    std::string sigma_estimator = "per_batch";  // or "ema"
    double ema_alpha = 0.9;
    DataConfig data;
    std::string out_dir = "run";
    std::string init_checkpoint;
    int64_t checkpoint_interval = 0;  // 0 = final checkpoint only

    SigmaEstimator::Mode estimator_mode() const {
        if (sigma_estimator == "per_batch") return SigmaEstimator::Mode::per_batch;
        if (sigma_estimator == "ema") return SigmaEstimator::Mode::ema;
        throw ConfigError("config: schedule.sigma_estimator must be \"per_batch\" or \"ema\"");
    }

    RemovalSchedule removal_schedule() const {
        if (!has_schedule) return RemovalSchedule{};
        return build_schedule(schedule);
    }

    static RunConfig from_json(const nlohmann::json& j) {
        using namespace cfg_detail;
        RunConfig rc;

        const auto& jm = section(j, "model");
        rc.model.n_layers = static_cast<int>(integer(jm, "model", "n_layers"));
        rc.model.d_model = static_cast<int>(integer(jm, "model", "d_model"));
        rc.model.n_heads = static_cast<int>(integer(jm, "model", "n_heads"));
        rc.model.d_head = static_cast<int>(integer(jm, "model", "d_head", rc.model.n_heads > 0 ? rc.model.d_model / rc.model.n_heads : 0));
        rc.model.vocab_size = static_cast<int>(integer(jm, "model", "vocab_size", 257));
        rc.model.max_seq_len = static_cast<int>(integer(jm, "model", "max_seq_len", 256));
        rc.model.ln_epsilon = num(jm, "model", "ln_epsilon", 1e-5);
        rc.model.tie_embeddings = flag(jm, "model", "tie_embeddings", true);
        rc.model.validate();

        const auto& jt = section(j, "train");
        rc.train.learning_rate = num(jt, "train", "learning_rate");
        rc.train.min_learning_rate = num(jt, "train", "min_learning_rate", rc.train.learning_rate);
        rc.train.warmup_steps = integer(jt, "train", "warmup_steps");
        rc.train.max_steps = integer(jt, "train", "max_steps");
        rc.train.weight_decay = num(jt, "train", "weight_decay", 0.01);
        rc.train.aux_loss_weight = num(jt, "train", "aux_loss_weight", 0.0);
        rc.train.micro_batch_size = integer(jt, "train", "micro_batch_size");
        rc.train.grad_accum_steps = integer(jt, "train", "gradient_accumulation_steps", 1);
        if (jt.contains("grad_clip_norm") && jt.at("grad_clip_norm").is_null()) {
            rc.train.grad_clip_norm = std::nullopt;
        } else {
            rc.train.grad_clip_norm = num(jt, "train", "grad_clip_norm", 1.0);
        }
        rc.train.eot_token_id = static_cast<int32_t>(integer(jt, "train", "eot_token_id", ByteVocab::kDefaultEot));
        rc.train.seed = static_cast<uint64_t>(integer(jt, "train", "seed", 0));
        rc.train.validate();

        if (j.contains("schedule") && !j.at("schedule").is_null()) {
            const auto& js = j.at("schedule");
            if (!js.is_object()) throw ConfigError("config: schedule must be an object or null");
            rc.has_schedule = true;
            rc.schedule.n_layers = rc.model.n_layers;
            rc.schedule.start_mlp = integer(js, "schedule", "start_ln_mlp");
            rc.schedule.start_qk = integer(js, "schedule", "start_ln_qk");
            rc.schedule.start_v = integer(js, "schedule", "start_ln_v");
            rc.schedule.start_final = integer(js, "schedule", "start_ln_f");
            rc.schedule.gap_mlp = integer(js, "schedule", "gap_ln_mlp");
            rc.schedule.gap_qk = integer(js, "schedule", "gap_ln_qk");
            rc.schedule.gap_v = integer(js, "schedule", "gap_ln_v");
            rc.schedule.validate();
            rc.sigma_estimator = str(js, "schedule", "sigma_estimator", std::string("per_batch"));
            rc.ema_alpha = num(js, "schedule", "ema_alpha", 0.9);
            rc.estimator_mode();  // validates the name
        }

        if (j.contains("data") && !j.at("data").is_null()) {
            const auto& jd = j.at("data");
            rc.data.train_path = str(jd, "data", "train_path", std::string());
            rc.data.eval_path = str(jd, "data", "eval_path", rc.data.train_path);
            rc.data.seq_len = integer(jd, "data", "seq_len", 128);
            rc.data.eval_batch_size = integer(jd, "data", "eval_batch_size", 8);
            if (rc.data.seq_len < 1) throw ConfigError("config: data.seq_len must be >= 1");
            if (rc.data.seq_len > rc.model.max_seq_len) {
                throw ConfigError("config: data.seq_len must be <= model.max_seq_len");
            }
        }

        rc.out_dir = j.contains("out_dir") && j.at("out_dir").is_string() ? j.at("out_dir").get<std::string>() : "run";
        if (j.contains("init_checkpoint") && j.at("init_checkpoint").is_string()) {
            rc.init_checkpoint = j.at("init_checkpoint").get<std::string>();
        }
        if (j.contains("checkpoint_interval")) {
            rc.checkpoint_interval = cfg_detail::integer(j, "config", "checkpoint_interval", 0);
        }
        return rc;
    }

    static RunConfig from_file(const std::string& path) {
        std::ifstream is(path);
        if (!is) throw IoError("cannot open config: " + path);
        nlohmann::json j;
        try {
            is >> j;
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError("config: invalid JSON in " + path + ": " + e.what());
        }
        return from_json(j);
    }
};

}  // namespace lnfree
