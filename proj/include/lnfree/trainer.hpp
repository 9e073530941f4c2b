#pragma once

// Fine-tuning loop: cross-entropy plus the sigma-consistency auxiliary loss,
// AdamW with decoupled weight decay, linear warmup with cosine decay, gradient
// accumulation, and schedule-driven normalization removal. Removals due at a
// step execute after that step's forward passes (which feed the sigma
// estimator) and before its optimizer update.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "lnfree/common.hpp"
#include "lnfree/data.hpp"
#include "lnfree/graph.hpp"
#include "lnfree/model.hpp"
#include "lnfree/norm.hpp"
#include "lnfree/schedule.hpp"
#include "lnfree/tensor.hpp"

namespace lnfree {

struct TrainConfig {
    double learning_rate = 6e-4;
    double min_learning_rate = 3e-4;
    int64_t warmup_steps = 10;
    int64_t max_steps = 100;
    double weight_decay = 0.01;
    double aux_loss_weight = 0.0;  // lambda
    int64_t micro_batch_size = 8;
    int64_t grad_accum_steps = 1;
    std::optional<double> grad_clip_norm = 1.0;
    int32_t eot_token_id = ByteVocab::kDefaultEot;
    uint64_t seed = 0;

    void validate() const {
        if (!(learning_rate > 0.0)) throw ConfigError("train.learning_rate must be positive");
        if (min_learning_rate > learning_rate) {
            throw ConfigError("train.min_learning_rate must be <= train.learning_rate");
        }
        if (warmup_steps < 0 || warmup_steps >= max_steps) {
            throw ConfigError("train.warmup_steps must be in [0, max_steps)");
        }
        if (aux_loss_weight < 0.0) throw ConfigError("train.aux_loss_weight must be >= 0");
        if (micro_batch_size < 1 || grad_accum_steps < 1) {
            throw ConfigError("train.micro_batch_size and train.grad_accum_steps must be >= 1");
        }
        if (grad_clip_norm && !(*grad_clip_norm > 0.0)) {
            throw ConfigError("train.grad_clip_norm must be positive when set");
        }
    }
};

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

template <typename T>
NodePtr<T> ce_loss(NodePtr<T> logits, const TensorI& targets) {
    return cross_entropy(std::move(logits), targets);
}

// Positions contributing to the aux target sigma_hat: everything except
// position 0 and positions holding the end-of-text token.
struct AuxMask {
    int64_t batch = 0, seq = 0;
    std::vector<uint8_t> included;  // row-major [B, S]

    static AuxMask from_tokens(const TensorI& tokens, int32_t eot_id) {
        if (tokens.rank() != 2) throw InputError("aux mask: tokens must be [B, S]");
        AuxMask m;
        m.batch = tokens.shape[0];
        m.seq = tokens.shape[1];
        m.included.resize(static_cast<size_t>(tokens.numel()));
        for (int64_t b = 0; b < m.batch; ++b) {
            for (int64_t s = 0; s < m.seq; ++s) {
                const bool in = s != 0 && tokens.at2(b, s) != eot_id;
                m.included[static_cast<size_t>(b * m.seq + s)] = in ? 1 : 0;
            }
        }
        return m;
    }

    int64_t n_included() const {
        int64_t n = 0;
        for (uint8_t v : included) n += v;
        return n;
    }
};

// lambda * mean over all positions of (sigma - sigma_hat)^2, where sigma_hat
// is the mean of sigma over mask-included positions and is treated as a
// constant (no gradient flows through the target).
template <typename T>
NodePtr<T> aux_loss(NodePtr<T> sigma_grid, const AuxMask& mask, double lambda) {
    if (sigma_grid->numel() != static_cast<int64_t>(mask.included.size())) {
        throw InputError("aux_loss: sigma grid and mask sizes disagree");
    }
    const int64_t n_in = mask.n_included();
    if (n_in == 0) throw InputError("aux_loss: mask excludes every position");
    double sigma_hat = 0.0;
    for (int64_t i = 0; i < sigma_grid->numel(); ++i) {
        if (mask.included[static_cast<size_t>(i)]) sigma_hat += static_cast<double>(sigma_grid->value[i]);
    }
    sigma_hat /= static_cast<double>(n_in);
    NodePtr<T> centered = add_scalar(sigma_grid, -sigma_hat);
    return scale(mean_all(mul(centered, centered)), lambda);
}

// ---------------------------------------------------------------------------
// learning rate and optimizer
// ---------------------------------------------------------------------------

inline double lr_at(int64_t step, const TrainConfig& c) {
    if (step < 0 || step > c.max_steps) throw ProtocolError("lr_at: step out of range");
    if (step < c.warmup_steps) {
        return c.learning_rate * static_cast<double>(step) / static_cast<double>(c.warmup_steps);
    }
    const double span = static_cast<double>(c.max_steps - c.warmup_steps);
    const double t = span > 0.0 ? static_cast<double>(step - c.warmup_steps) / span : 1.0;
    return c.min_learning_rate +
           0.5 * (c.learning_rate - c.min_learning_rate) * (1.0 + std::cos(M_PI * t));
}

struct AdamwConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

template <typename T>
struct OptimState {
    std::vector<Tensor<T>> m;
    std::vector<Tensor<T>> v;
    int64_t t = 0;

    static OptimState init(const std::vector<ParamInfo<T>>& params) {
        OptimState s;
        for (const auto& p : params) {
            s.m.push_back(Tensor<T>::zeros(p.node->shape()));
            s.v.push_back(Tensor<T>::zeros(p.node->shape()));
        }
        return s;
    }
};

// One AdamW update from the gradients currently in each parameter node.
// Weight decay is decoupled and skipped for params flagged no-decay
// (gamma/beta, biases, embeddings).
template <typename T>
void adamw_step(std::vector<ParamInfo<T>>& params, OptimState<T>& state, double lr,
                double weight_decay, const AdamwConfig& cfg = {}) {
    if (params.size() != state.m.size()) throw ProtocolError("adamw_step: state does not match params");
    ++state.t;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
    for (size_t pi = 0; pi < params.size(); ++pi) {
        auto& node = *params[pi].node;
        auto& m = state.m[pi];
        auto& v = state.v[pi];
        const double wd = params[pi].weight_decay ? weight_decay : 0.0;
        for (int64_t i = 0; i < node.numel(); ++i) {
            const double g = static_cast<double>(node.grad[i]);
            if (!std::isfinite(g)) {
                throw NumericsError("adamw_step: non-finite gradient in " + params[pi].name);
            }
            const double mi = cfg.beta1 * static_cast<double>(m[i]) + (1.0 - cfg.beta1) * g;
            const double vi = cfg.beta2 * static_cast<double>(v[i]) + (1.0 - cfg.beta2) * g * g;
            m[i] = static_cast<T>(mi);
            v[i] = static_cast<T>(vi);
            double p = static_cast<double>(node.value[i]);
            p -= lr * wd * p;
            p -= lr * (mi / bc1) / (std::sqrt(vi / bc2) + cfg.eps);
            node.value[i] = static_cast<T>(p);
        }
    }
}

// ---------------------------------------------------------------------------
// training loop
// ---------------------------------------------------------------------------

struct TrainEvent {
    std::string type;  // "removal" | "loss_spike" | "gradient_explosion"
    std::string site;  // removals only
    double sigma = 0.0;
};

// Spike = main loss above 3x the median of the trailing (up to) 20 steps.
inline bool loss_spike_detected(const std::vector<double>& history, double current) {
    if (history.empty()) return false;
    std::vector<double> window(history.end() - std::min<size_t>(history.size(), 20), history.end());
    std::sort(window.begin(), window.end());
    return current > 3.0 * window[window.size() / 2];
}

struct StepMetrics {
    int64_t step = 0;
    double main_loss = 0.0;
    double aux_loss = 0.0;
    double lr = 0.0;
    double grad_norm = 0.0;
    std::vector<TrainEvent> events;
};

inline nlohmann::json step_metrics_json(const StepMetrics& m) {
    nlohmann::json events = nlohmann::json::array();
    for (const auto& e : m.events) {
        nlohmann::json je{{"type", e.type}};
        if (e.type == "removal") {
            je["site"] = e.site;
            je["sigma"] = e.sigma;
        }
        events.push_back(je);
    }
    return nlohmann::json{{"step", m.step},         {"main_loss", m.main_loss}, {"aux_loss", m.aux_loss},
                          {"lr", m.lr},             {"grad_norm", m.grad_norm}, {"events", events}};
}

// Starting point for a run: fresh init or a loaded checkpoint's state.
template <typename T>
struct ModelState {
    TransformerParams<T> params;
    NormModeMap modes;
};

template <typename T>
class Trainer {
public:
    Trainer(ModelConfig model_cfg, TrainConfig train_cfg, RemovalSchedule schedule,
            const TokenizedCorpus& corpus, int64_t seq_len,
            SigmaEstimator::Mode estimator_mode = SigmaEstimator::Mode::per_batch,
            double ema_alpha = 0.9, std::optional<ModelState<T>> init = std::nullopt)
        : model_cfg_(model_cfg),
          train_cfg_(train_cfg),
          schedule_(std::move(schedule)),
          seq_len_(seq_len),
          params_(init ? std::move(init->params) : TransformerParams<T>::init(model_cfg, train_cfg.seed)),
          modes_(init ? std::move(init->modes) : NormModeMap(model_cfg.n_layers)),
          named_(params_.named_parameters()),
          opt_(OptimState<T>::init(named_)),
          iter_(corpus, seq_len, train_cfg.micro_batch_size, train_cfg.seed + 1),
          estimator_(estimator_mode, ema_alpha) {
        model_cfg_.validate();
        train_cfg_.validate();
        if (!schedule_.empty() && schedule_.last_step() >= train_cfg_.max_steps) {
            throw ConfigError("schedule: last removal step must be < train.max_steps");
        }
        if (corpus.vocab_size != model_cfg_.vocab_size) {
            throw ConfigError("corpus vocab_size does not match model vocab_size");
        }
    }

    StepMetrics train_step() {
        if (step_ >= train_cfg_.max_steps) throw ProtocolError("train_step: run is complete");
        StepMetrics metrics;
        metrics.step = step_;
        metrics.lr = lr_at(step_, train_cfg_);

        for (const auto& p : named_) p.node->zero_grad();

        double main_sum = 0.0, aux_sum = 0.0;
        std::map<std::string, std::pair<double, int64_t>> sigma_acc;  // site -> (sum, count)

        for (int64_t micro = 0; micro < train_cfg_.grad_accum_steps; ++micro) {
            const TensorI block = iter_.next();
            TensorI inputs({block.shape[0], seq_len_});
            TensorI targets({block.shape[0], seq_len_});
            for (int64_t b = 0; b < block.shape[0]; ++b) {
                for (int64_t s = 0; s < seq_len_; ++s) {
                    inputs.at2(b, s) = block.at2(b, s);
                    targets.at2(b, s) = block.at2(b, s + 1);
                }
            }

            ForwardOptions<T> opts;
            auto fwd = forward(params_, model_cfg_, modes_, inputs, opts);
            NodePtr<T> ce = cross_entropy(fwd.logits, targets);
            NodePtr<T> loss = ce;
            if (train_cfg_.aux_loss_weight > 0.0) {
                const AuxMask mask = AuxMask::from_tokens(inputs, train_cfg_.eot_token_id);
                NodePtr<T> aux = aux_loss(fwd.final_sigma, mask, train_cfg_.aux_loss_weight);
                aux_sum += static_cast<double>(aux->value[0]);
                loss = add(ce, aux);
            }
            const double loss_val = static_cast<double>(loss->value[0]);
            if (!std::isfinite(loss_val)) {
                throw NumericsError("train_step: non-finite loss at step " + std::to_string(step_));
            }
            main_sum += static_cast<double>(ce->value[0]);

            Graph<T> graph(loss);
            graph.backward();

            accumulate_sigma(fwd.cache, sigma_acc);
        }

        // Batch-level sigma_avg feeds the estimator for every still-LN site,
        // so removals executed now freeze the statistics of this very batch.
        for (const NormSite& site : modes_.all_sites()) {
            if (modes_.at(site).fake) continue;
            auto it = sigma_acc.find(site.name());
            if (it != sigma_acc.end() && it->second.second > 0) {
                estimator_.update(site, it->second.first / static_cast<double>(it->second.second));
            }
        }
        for (const NormSite& site : schedule_.due_removals(step_)) {
            execute_removal(modes_, site, estimator_);
            metrics.events.push_back({"removal", site.name(), modes_.at(site).frozen_sigma});
        }

        const double inv_accum = 1.0 / static_cast<double>(train_cfg_.grad_accum_steps);
        double sq_sum = 0.0;
        bool finite = true;
        for (const auto& p : named_) {
            for (int64_t i = 0; i < p.node->numel(); ++i) {
                p.node->grad[i] = static_cast<T>(static_cast<double>(p.node->grad[i]) * inv_accum);
                const double g = static_cast<double>(p.node->grad[i]);
                sq_sum += g * g;
                if (!std::isfinite(g)) finite = false;
            }
        }
        metrics.grad_norm = std::sqrt(sq_sum);
        if (!finite || !std::isfinite(metrics.grad_norm)) {
            metrics.events.push_back({"gradient_explosion", "", 0.0});
        } else {
            if (train_cfg_.grad_clip_norm && metrics.grad_norm > *train_cfg_.grad_clip_norm) {
                const double s = *train_cfg_.grad_clip_norm / metrics.grad_norm;
                for (const auto& p : named_) {
                    for (int64_t i = 0; i < p.node->numel(); ++i) {
                        p.node->grad[i] = static_cast<T>(static_cast<double>(p.node->grad[i]) * s);
                    }
                }
            }
            adamw_step(named_, opt_, metrics.lr, train_cfg_.weight_decay);
        }

        metrics.main_loss = main_sum * inv_accum;
        metrics.aux_loss = aux_sum * inv_accum;
        if (loss_spike_detected(loss_history_, metrics.main_loss)) {
            metrics.events.push_back({"loss_spike", "", 0.0});
        }
        loss_history_.push_back(metrics.main_loss);
        ++step_;
        return metrics;
    }

    // Runs the remaining steps; the callback sees every step's metrics.
    void run(const std::function<void(const StepMetrics&)>& on_step = nullptr) {
        while (step_ < train_cfg_.max_steps) {
            const StepMetrics m = train_step();
            if (on_step) on_step(m);
        }
    }

    int64_t step() const { return step_; }
    const ModelConfig& model_config() const { return model_cfg_; }
    const TrainConfig& train_config() const { return train_cfg_; }
    TransformerParams<T>& params() { return params_; }
    const TransformerParams<T>& params() const { return params_; }
    const NormModeMap& modes() const { return modes_; }
    const RemovalSchedule& schedule() const { return schedule_; }
    const SigmaEstimator& estimator() const { return estimator_; }

private:
    void accumulate_sigma(const ActivationCache<T>& cache,
                          std::map<std::string, std::pair<double, int64_t>>& acc) {
        auto add_grid = [&acc](const NormSite& site, const Tensor<T>& grid) {
            auto& slot = acc[site.name()];
            for (int64_t i = 0; i < grid.numel(); ++i) slot.first += static_cast<double>(grid[i]);
            slot.second += grid.numel();
        };
        for (int l = 0; l < model_cfg_.n_layers; ++l) {
            const auto& lc = cache.layers[static_cast<size_t>(l)];
            if (!modes_.at(NormSite::qk(l)).fake) add_grid(NormSite::qk(l), lc.qk.sigma);
            if (!modes_.at(NormSite::v(l)).fake) add_grid(NormSite::v(l), lc.v.sigma);
            if (!modes_.at(NormSite::mlp(l)).fake) add_grid(NormSite::mlp(l), lc.mlp.sigma);
        }
        if (!modes_.at(NormSite::final()).fake) add_grid(NormSite::final(), cache.final_site.sigma);
    }

    ModelConfig model_cfg_;
    TrainConfig train_cfg_;
    RemovalSchedule schedule_;
    int64_t seq_len_;
    TransformerParams<T> params_;
    NormModeMap modes_;
    std::vector<ParamInfo<T>> named_;
    OptimState<T> opt_;
    BatchIterator iter_;
    SigmaEstimator estimator_;
    std::vector<double> loss_history_;
    int64_t step_ = 0;
};

// ---------------------------------------------------------------------------
// evaluation
// ---------------------------------------------------------------------------

struct EvalResult {
    double ce = 0.0;
    double entropy = 0.0;
    double ece = 0.0;
    int64_t positions = 0;
};

// Streams per-position metrics: next-token cross-entropy (nats), Shannon
// entropy of the output distribution, and ECE over 10 equal-width
// max-probability bins with top-1 accuracy (bin-mean confidence vs accuracy,
// weighted by bin population).
class EvalAccumulator {
public:
    explicit EvalAccumulator(int64_t vocab) : vocab_(vocab) {}

    template <typename T>
    void add_rows(const T* logits, const int32_t* targets, int64_t rows) {
        std::vector<T> probs(static_cast<size_t>(vocab_));
        for (int64_t r = 0; r < rows; ++r) {
            const T* row = logits + r * vocab_;
            std::copy(row, row + vocab_, probs.data());
            kernels::softmax_row(probs.data(), vocab_);
            const int32_t target = targets[r];
            ce_sum_ -= std::log(std::max(static_cast<double>(probs[static_cast<size_t>(target)]), 1e-300));
            double ent = 0.0, conf = -1.0;
            int64_t argmax = 0;
            for (int64_t v = 0; v < vocab_; ++v) {
                const double p = static_cast<double>(probs[static_cast<size_t>(v)]);
                if (p > 0.0) ent -= p * std::log(p);
                if (p > conf) {
                    conf = p;
                    argmax = v;
                }
            }
            ent_sum_ += ent;
            const int bin = std::clamp(static_cast<int>(conf * kBins), 0, kBins - 1);
            ++bin_count_[static_cast<size_t>(bin)];
            bin_conf_[static_cast<size_t>(bin)] += conf;
            if (argmax == target) ++bin_correct_[static_cast<size_t>(bin)];
            ++positions_;
        }
    }

    EvalResult result() const {
        EvalResult res;
        res.positions = positions_;
        if (positions_ == 0) return res;
        res.ce = ce_sum_ / static_cast<double>(positions_);
        res.entropy = ent_sum_ / static_cast<double>(positions_);
        for (int k = 0; k < kBins; ++k) {
            if (bin_count_[static_cast<size_t>(k)] == 0) continue;
            const double n = static_cast<double>(bin_count_[static_cast<size_t>(k)]);
            const double acc = static_cast<double>(bin_correct_[static_cast<size_t>(k)]) / n;
            const double conf = bin_conf_[static_cast<size_t>(k)] / n;
            res.ece += (n / static_cast<double>(positions_)) * std::abs(acc - conf);
        }
        return res;
    }

private:
    static constexpr int kBins = 10;
    int64_t vocab_;
    double ce_sum_ = 0.0, ent_sum_ = 0.0;
    int64_t positions_ = 0;
    std::vector<int64_t> bin_count_ = std::vector<int64_t>(kBins, 0);
    std::vector<int64_t> bin_correct_ = std::vector<int64_t>(kBins, 0);
    std::vector<double> bin_conf_ = std::vector<double>(kBins, 0.0);
};

// Walks the corpus in sequential non-overlapping blocks of seq_len + 1 and
// hands each forward result to the visitor. Shared by evaluation and the
// dataset-sweep analyses.
template <typename T, typename Visitor>
void for_each_eval_batch(const TransformerParams<T>& params, const ModelConfig& cfg,
                         const NormModeMap& modes, const TokenizedCorpus& corpus, int64_t seq_len,
                         int64_t batch_size, int64_t max_blocks, const ForwardOptions<T>& opts,
                         Visitor&& visit) {
    if (corpus.vocab_size != cfg.vocab_size) {
        throw InputError("eval: corpus vocab_size does not match the model");
    }
    const int64_t block = seq_len + 1;
    if (corpus.size() < block) throw InputError("eval: corpus smaller than one block");
    int64_t n_blocks = corpus.size() / block;
    if (max_blocks >= 0) n_blocks = std::min(n_blocks, max_blocks);
    for (int64_t start_block = 0; start_block < n_blocks; start_block += batch_size) {
        const int64_t bsz = std::min(batch_size, n_blocks - start_block);
        TensorI inputs({bsz, seq_len});
        TensorI targets({bsz, seq_len});
        for (int64_t b = 0; b < bsz; ++b) {
            const int64_t off = (start_block + b) * block;
            for (int64_t s = 0; s < seq_len; ++s) {
                inputs.at2(b, s) = corpus.ids[static_cast<size_t>(off + s)];
                targets.at2(b, s) = corpus.ids[static_cast<size_t>(off + s + 1)];
            }
        }
        auto fwd = forward(params, cfg, modes, inputs, opts);
        visit(fwd, inputs, targets);
    }
}

// Mean next-token cross-entropy, mean output entropy, and ECE on sequential
// non-overlapping blocks of the corpus.
template <typename T>
EvalResult evaluate(const TransformerParams<T>& params, const ModelConfig& cfg, const NormModeMap& modes,
                    const TokenizedCorpus& corpus, int32_t eot_id, int64_t seq_len,
                    int64_t batch_size = 8, int64_t max_blocks = -1) {
    if (eot_id < 0 || eot_id >= corpus.vocab_size) {
        throw InputError("evaluate: eot id out of range for the corpus vocab");
    }
    EvalAccumulator acc(cfg.vocab_size);
    ForwardOptions<T> opts;
    opts.cache.sigma_grids = false;
    for_each_eval_batch(params, cfg, modes, corpus, seq_len, batch_size, max_blocks, opts,
                        [&acc](const ForwardResult<T>& fwd, const TensorI& inputs, const TensorI& targets) {
                            (void)inputs;
                            acc.add_rows(fwd.logits->value.data.data(), targets.data.data(), targets.numel());
                        });
    return acc.result();
}

// Auxiliary loss value for fixed params on a fixed batch; used to track the
// spread-reduction behavior on a held-out batch.
template <typename T>
double aux_on_batch(const TransformerParams<T>& params, const ModelConfig& cfg, const NormModeMap& modes,
                    const TensorI& inputs, int32_t eot_id, double lambda) {
    ForwardOptions<T> opts;
    opts.cache.sigma_grids = false;
    auto fwd = forward(params, cfg, modes, inputs, opts);
    const AuxMask mask = AuxMask::from_tokens(inputs, eot_id);
    return static_cast<double>(aux_loss(fwd.final_sigma, mask, lambda)->value[0]);
}

}  // namespace lnfree
