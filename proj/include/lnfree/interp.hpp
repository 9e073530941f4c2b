#pragma once

// Interpretability suite: direct effects vs direct logit attribution,
// activation and attribution patching, residual norm profiles, attention
// sink rates, and confidence-neuron analysis.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "lnfree/common.hpp"
#include "lnfree/graph.hpp"
#include "lnfree/linalg.hpp"
#include "lnfree/model.hpp"
#include "lnfree/norm.hpp"
#include "lnfree/tensor.hpp"
#include "lnfree/trainer.hpp"

namespace lnfree {

// ---------------------------------------------------------------------------
// components and direct effects
// ---------------------------------------------------------------------------

enum class ComponentKind { head, mlp, embed };

struct ComponentId {
    ComponentKind kind;
    int layer = 0;
    int head = 0;

    static ComponentId attn_head(int layer, int head) { return {ComponentKind::head, layer, head}; }
    static ComponentId mlp(int layer) { return {ComponentKind::mlp, layer, 0}; }
    static ComponentId embed() { return {ComponentKind::embed, 0, 0}; }

    std::string name() const {
        switch (kind) {
            case ComponentKind::head: return "head." + std::to_string(layer) + "." + std::to_string(head);
            case ComponentKind::mlp: return "mlp." + std::to_string(layer);
            case ComponentKind::embed: return "embed";
        }
        return "?";
    }
};

namespace detail {

template <typename T>
const Tensor<T>& component_contribution(const ActivationCache<T>& cache, const ComponentId& comp) {
    const Tensor<T>* c = nullptr;
    switch (comp.kind) {
        case ComponentKind::head: {
            const auto& lc = cache.layers.at(static_cast<size_t>(comp.layer));
            if (comp.head < 0 || comp.head >= static_cast<int>(lc.head_contrib.size())) {
                throw ProtocolError("component " + comp.name() + " contribution missing from cache");
            }
            c = &lc.head_contrib[static_cast<size_t>(comp.head)];
            break;
        }
        case ComponentKind::mlp:
            c = &cache.layers.at(static_cast<size_t>(comp.layer)).mlp_contrib;
            break;
        case ComponentKind::embed:
            c = &cache.embed_contrib;
            break;
    }
    if (c == nullptr || c->numel() == 0) {
        throw ProtocolError("component " + comp.name() + " contribution missing from cache");
    }
    return *c;
}

// f(x) = finalnorm(x) . u, one residual row through the model's actual final
// normalization and one unembedding column.
template <typename T>
double final_readout(const T* x, int64_t h, const Tensor<T>& gamma, const Tensor<T>& beta,
                     const NormMode& mode, double eps, const Tensor<T>& w_u, int64_t token) {
    double mean = 0.0;
    for (int64_t i = 0; i < h; ++i) mean += static_cast<double>(x[i]);
    mean /= static_cast<double>(h);
    double scale;
    if (mode.fake) {
        scale = mode.frozen_sigma;
    } else {
        double var = 0.0;
        for (int64_t i = 0; i < h; ++i) {
            const double d = static_cast<double>(x[i]) - mean;
            var += d * d;
        }
        var /= static_cast<double>(h);
        scale = std::sqrt(var + eps);
    }
    double out = 0.0;
    const int64_t vocab = w_u.shape[1];
    for (int64_t i = 0; i < h; ++i) {
        const double y = (static_cast<double>(x[i]) - mean) / scale * static_cast<double>(gamma[i]) +
                         static_cast<double>(beta[i]);
        out += y * static_cast<double>(w_u.data[static_cast<size_t>(i * vocab + token)]);
    }
    return out;
}

}  // namespace detail

// DE(c) = finalnorm(r) . W_U - finalnorm(r - c) . W_U at the correct-next-
// token logit, per position. Applies the model's actual final normalization
// (LN recomputes sigma on each operand; FakeLN uses the frozen scale).
template <typename T>
Tensor<double> direct_effect(const ActivationCache<T>& cache, const ComponentId& comp,
                             const TransformerParams<T>& params, const ModelConfig& cfg,
                             const NormMode& final_mode, const TensorI& targets) {
    const Tensor<T>& c = detail::component_contribution(cache, comp);
    if (cache.resid_final.numel() == 0) throw ProtocolError("direct_effect: cache has no final residual");
    const int64_t b = cache.batch, s = cache.seq, h = cfg.d_model;
    const Tensor<T> w_u = params.unembedding();
    const Tensor<T>& gamma = params.ln_final.gamma->value;
    const Tensor<T>& beta = params.ln_final.beta->value;
    Tensor<double> out({b, s});
    std::vector<T> r_minus_c(static_cast<size_t>(h));
    for (int64_t bi = 0; bi < b; ++bi) {
        for (int64_t si = 0; si < s; ++si) {
            const T* r = cache.resid_final.data.data() + (bi * s + si) * h;
            const T* cr = c.data.data() + (bi * s + si) * h;
            for (int64_t i = 0; i < h; ++i) r_minus_c[static_cast<size_t>(i)] = r[i] - cr[i];
            const int64_t token = targets.at2(bi, si);
            const double f_r = detail::final_readout(r, h, gamma, beta, final_mode, cfg.ln_epsilon, w_u, token);
            const double f_rc = detail::final_readout(r_minus_c.data(), h, gamma, beta, final_mode,
                                                      cfg.ln_epsilon, w_u, token);
            out.at2(bi, si) = f_r - f_rc;
        }
    }
    return out;
}

// DLA(c): c is centered, divided by the final norm's cached per-position
// scale, weighted by gamma, and read out at the target-token column.
template <typename T>
Tensor<double> dla(const ActivationCache<T>& cache, const ComponentId& comp,
                   const TransformerParams<T>& params, const ModelConfig& cfg, const TensorI& targets) {
    const Tensor<T>& c = detail::component_contribution(cache, comp);
    if (cache.final_site.applied_scale.numel() == 0) {
        throw ProtocolError("dla: cache has no final-site applied scale");
    }
    const int64_t b = cache.batch, s = cache.seq, h = cfg.d_model;
    const Tensor<T> w_u = params.unembedding();
    const Tensor<T>& gamma = params.ln_final.gamma->value;
    const int64_t vocab = w_u.shape[1];
    Tensor<double> out({b, s});
    for (int64_t bi = 0; bi < b; ++bi) {
        for (int64_t si = 0; si < s; ++si) {
            const T* cr = c.data.data() + (bi * s + si) * h;
            const double scale = static_cast<double>(cache.final_site.applied_scale.at2(bi, si));
            double mean = 0.0;
            for (int64_t i = 0; i < h; ++i) mean += static_cast<double>(cr[i]);
            mean /= static_cast<double>(h);
            const int64_t token = targets.at2(bi, si);
            double v = 0.0;
            for (int64_t i = 0; i < h; ++i) {
                v += (static_cast<double>(cr[i]) - mean) / scale * static_cast<double>(gamma[i]) *
                     static_cast<double>(w_u.data[static_cast<size_t>(i * vocab + token)]);
            }
            out.at2(bi, si) = v;
        }
    }
    return out;
}

// 100 * mean|DLA - DE| / mean|DE|.
inline double nmae(const std::vector<double>& dla_values, const std::vector<double>& de_values) {
    if (dla_values.size() != de_values.size() || dla_values.empty()) {
        throw InputError("nmae: value vectors must be nonempty and equal length");
    }
    double num = 0.0, den = 0.0;
    for (size_t i = 0; i < dla_values.size(); ++i) {
        num += std::abs(dla_values[i] - de_values[i]);
        den += std::abs(de_values[i]);
    }
    if (den == 0.0) throw InputError("nmae: mean |DE| is zero; metric undefined");
    return 100.0 * num / den;
}

struct DlaReport {
    double nmae_pct = 0.0;
    int64_t n_values = 0;
    double mean_abs_de = 0.0;
    std::vector<std::pair<std::string, double>> per_component_nmae;
};

// DLA-vs-DE sweep over every attention head on sequential corpus blocks.
template <typename T>
DlaReport run_dla_analysis(const TransformerParams<T>& params, const ModelConfig& cfg,
                           const NormModeMap& modes, const TokenizedCorpus& corpus, int64_t seq_len,
                           int64_t n_sequences, int64_t batch_size = 8) {
    const NormMode final_mode = modes.at(NormSite::final());
    double num = 0.0, den = 0.0;
    int64_t count = 0;
    std::vector<double> comp_num(static_cast<size_t>(cfg.n_layers * cfg.n_heads), 0.0);
    std::vector<double> comp_den(static_cast<size_t>(cfg.n_layers * cfg.n_heads), 0.0);
    ForwardOptions<T> opts;
    opts.cache = CacheOptions::analysis();
    for_each_eval_batch(params, cfg, modes, corpus, seq_len, batch_size, n_sequences, opts,
                        [&](const ForwardResult<T>& fwd, const TensorI& inputs, const TensorI& targets) {
                            (void)inputs;
                            for (int l = 0; l < cfg.n_layers; ++l) {
                                for (int hd = 0; hd < cfg.n_heads; ++hd) {
                                    const ComponentId comp = ComponentId::attn_head(l, hd);
                                    const Tensor<double> de =
                                        direct_effect(fwd.cache, comp, params, cfg, final_mode, targets);
                                    const Tensor<double> da = dla(fwd.cache, comp, params, cfg, targets);
                                    const size_t ci = static_cast<size_t>(l * cfg.n_heads + hd);
                                    for (int64_t i = 0; i < de.numel(); ++i) {
                                        num += std::abs(da[i] - de[i]);
                                        den += std::abs(de[i]);
                                        comp_num[ci] += std::abs(da[i] - de[i]);
                                        comp_den[ci] += std::abs(de[i]);
                                        ++count;
                                    }
                                }
                            }
                        });
    if (den == 0.0) throw InputError("run_dla_analysis: mean |DE| is zero; metric undefined");
    DlaReport rep;
    rep.nmae_pct = 100.0 * num / den;
    rep.n_values = count;
    rep.mean_abs_de = den / static_cast<double>(count);
    for (int l = 0; l < cfg.n_layers; ++l) {
        for (int hd = 0; hd < cfg.n_heads; ++hd) {
            const size_t ci = static_cast<size_t>(l * cfg.n_heads + hd);
            rep.per_component_nmae.push_back({ComponentId::attn_head(l, hd).name(),
                                              comp_den[ci] > 0.0 ? 100.0 * comp_num[ci] / comp_den[ci] : 0.0});
        }
    }
    return rep;
}

// ---------------------------------------------------------------------------
// activation / attribution patching
// ---------------------------------------------------------------------------

struct PatchSpec {
    TensorI clean;      // [S]
    TensorI corrupted;  // [S]
    int layer = 0;
    int64_t position = 0;
    int32_t answer_a = 0;
    int32_t answer_b = 0;
    // Interpolation of the patched activation toward the clean one:
    // a_patch = a_corr + epsilon * (a_clean - a_corr).
    double epsilon = 1.0;

    void validate(const ModelConfig& cfg) const {
        if (clean.rank() != 1 || corrupted.rank() != 1 || clean.shape != corrupted.shape) {
            throw InputError("patch spec: clean and corrupted must be equal-length [S]");
        }
        if (answer_a < 0 || answer_a >= cfg.vocab_size || answer_b < 0 || answer_b >= cfg.vocab_size) {
            throw InputError("patch spec: answer token out of range");
        }
        if (layer < 0 || layer >= cfg.n_layers) throw InputError("patch spec: layer out of range");
        if (position < 0 || position >= clean.shape[0]) throw InputError("patch spec: position out of range");
    }
};

namespace detail {

inline TensorI as_batch1(const TensorI& seq) {
    TensorI out({1, seq.shape[0]});
    out.data = seq.data;
    return out;
}

template <typename T>
double logit_diff_metric(const Tensor<T>& logits, int32_t a, int32_t b) {
    const int64_t s = logits.shape[1], v = logits.shape[2];
    const T* row = logits.data.data() + (s - 1) * v;
    return static_cast<double>(row[a]) - static_cast<double>(row[b]);
}

template <typename T>
Tensor<T> metric_mask(const Shape& logits_shape, int32_t a, int32_t b) {
    Tensor<T> mask(logits_shape);
    const int64_t s = logits_shape[1], v = logits_shape[2];
    mask[(s - 1) * v + a] = T(1);
    mask[(s - 1) * v + b] -= T(1);
    return mask;
}

}  // namespace detail

struct PatchResult {
    double f_clean = 0.0, f_corr = 0.0, f_patched = 0.0;
    double delta_normalized = 0.0;
};

// Rerun the corrupted prompt with the pre-block residual at (layer, position)
// moved toward the clean run's value; metric normalized as
// (f_patched - f_corr) / (f_clean - f_corr).
template <typename T>
PatchResult activation_patch(const TransformerParams<T>& params, const ModelConfig& cfg,
                             const NormModeMap& modes, const PatchSpec& spec) {
    spec.validate(cfg);
    ForwardOptions<T> clean_opts;
    clean_opts.cache.sigma_grids = false;
    clean_opts.cache.residuals = true;
    auto clean_fwd = forward(params, cfg, modes, detail::as_batch1(spec.clean), clean_opts);

    ForwardOptions<T> corr_opts;
    corr_opts.cache.sigma_grids = false;
    corr_opts.cache.residuals = true;
    auto corr_fwd = forward(params, cfg, modes, detail::as_batch1(spec.corrupted), corr_opts);

    PatchResult res;
    res.f_clean = detail::logit_diff_metric(clean_fwd.logits->value, spec.answer_a, spec.answer_b);
    res.f_corr = detail::logit_diff_metric(corr_fwd.logits->value, spec.answer_a, spec.answer_b);
    const double denom = res.f_clean - res.f_corr;
    if (std::abs(denom) < 1e-12) {
        throw NumericsError("activation_patch: clean and corrupted metrics coincide; normalization degenerate");
    }

    const int64_t h = cfg.d_model;
    const Tensor<T>& clean_res = clean_fwd.cache.layers[static_cast<size_t>(spec.layer)].resid_pre;
    const Tensor<T>& corr_res = corr_fwd.cache.layers[static_cast<size_t>(spec.layer)].resid_pre;
    Tensor<T> value({1, h});
    for (int64_t i = 0; i < h; ++i) {
        const double cv = static_cast<double>(clean_res.at3(0, spec.position, i));
        const double xv = static_cast<double>(corr_res.at3(0, spec.position, i));
        value[i] = static_cast<T>(xv + spec.epsilon * (cv - xv));
    }
    ForwardOptions<T> patch_opts;
    patch_opts.cache.sigma_grids = false;
    patch_opts.residual_patch = ResidualPatchSpec<T>{spec.layer, spec.position, std::move(value)};
    auto patched_fwd = forward(params, cfg, modes, detail::as_batch1(spec.corrupted), patch_opts);
    res.f_patched = detail::logit_diff_metric(patched_fwd.logits->value, spec.answer_a, spec.answer_b);
    res.delta_normalized = (res.f_patched - res.f_corr) / denom;
    return res;
}

// First-order Taylor estimate: grad of the metric on the corrupted run dotted
// with the (epsilon-scaled) clean-minus-corrupted activation difference, same
// normalization as activation_patch.
template <typename T>
PatchResult attribution_patch(const TransformerParams<T>& params, const ModelConfig& cfg,
                              const NormModeMap& modes, const PatchSpec& spec) {
    spec.validate(cfg);
    ForwardOptions<T> clean_opts;
    clean_opts.cache.sigma_grids = false;
    clean_opts.cache.residuals = true;
    auto clean_fwd = forward(params, cfg, modes, detail::as_batch1(spec.clean), clean_opts);

    ForwardOptions<T> corr_opts;
    corr_opts.cache.sigma_grids = false;
    corr_opts.cache.residuals = true;
    corr_opts.keep_residual_nodes = true;
    auto corr_fwd = forward(params, cfg, modes, detail::as_batch1(spec.corrupted), corr_opts);

    PatchResult res;
    res.f_clean = detail::logit_diff_metric(clean_fwd.logits->value, spec.answer_a, spec.answer_b);
    res.f_corr = detail::logit_diff_metric(corr_fwd.logits->value, spec.answer_a, spec.answer_b);
    const double denom = res.f_clean - res.f_corr;
    if (std::abs(denom) < 1e-12) {
        throw NumericsError("attribution_patch: clean and corrupted metrics coincide; normalization degenerate");
    }

    NodePtr<T> metric = inner(corr_fwd.logits,
                              detail::metric_mask<T>(corr_fwd.logits->shape(), spec.answer_a, spec.answer_b));
    Graph<T> graph(metric);
    graph.backward();

    const NodePtr<T>& resid_node = corr_fwd.resid_pre_nodes.at(static_cast<size_t>(spec.layer));
    const Tensor<T>& clean_res = clean_fwd.cache.layers[static_cast<size_t>(spec.layer)].resid_pre;
    const int64_t h = cfg.d_model;
    double attr = 0.0;
    for (int64_t i = 0; i < h; ++i) {
        const double g = static_cast<double>(resid_node->grad.at3(0, spec.position, i));
        const double diff = static_cast<double>(clean_res.at3(0, spec.position, i)) -
                            static_cast<double>(resid_node->value.at3(0, spec.position, i));
        attr += g * spec.epsilon * diff;
    }
    res.f_patched = res.f_corr + attr;
    res.delta_normalized = attr / denom;
    return res;
}

struct PatchGrids {
    Tensor<double> activation;   // [L, S] normalized delta
    Tensor<double> attribution;  // [L, S] normalized first-order estimate
    double f_clean = 0.0, f_corr = 0.0;
};

// Both patching estimates for every (layer, position) of one prompt pair.
// Activation patching reruns the model per cell; attribution patching costs
// one backward pass for the whole grid.
template <typename T>
PatchGrids patching_grids(const TransformerParams<T>& params, const ModelConfig& cfg,
                          const NormModeMap& modes, const TensorI& clean, const TensorI& corrupted,
                          int32_t answer_a, int32_t answer_b, double epsilon = 1.0) {
    const int64_t seq = clean.shape[0];
    PatchGrids out;
    out.activation = Tensor<double>({cfg.n_layers, seq});
    out.attribution = Tensor<double>({cfg.n_layers, seq});

    ForwardOptions<T> clean_opts;
    clean_opts.cache.sigma_grids = false;
    clean_opts.cache.residuals = true;
    auto clean_fwd = forward(params, cfg, modes, detail::as_batch1(clean), clean_opts);

    ForwardOptions<T> corr_opts;
    corr_opts.cache.sigma_grids = false;
    corr_opts.cache.residuals = true;
    corr_opts.keep_residual_nodes = true;
    auto corr_fwd = forward(params, cfg, modes, detail::as_batch1(corrupted), corr_opts);

    out.f_clean = detail::logit_diff_metric(clean_fwd.logits->value, answer_a, answer_b);
    out.f_corr = detail::logit_diff_metric(corr_fwd.logits->value, answer_a, answer_b);
    const double denom = out.f_clean - out.f_corr;
    if (std::abs(denom) < 1e-12) {
        throw NumericsError("patching_grids: clean and corrupted metrics coincide; normalization degenerate");
    }

    NodePtr<T> metric = inner(corr_fwd.logits,
                              detail::metric_mask<T>(corr_fwd.logits->shape(), answer_a, answer_b));
    Graph<T> graph(metric);
    graph.backward();

    const int64_t h = cfg.d_model;
    for (int l = 0; l < cfg.n_layers; ++l) {
        const Tensor<T>& clean_res = clean_fwd.cache.layers[static_cast<size_t>(l)].resid_pre;
        const Tensor<T>& corr_res = corr_fwd.cache.layers[static_cast<size_t>(l)].resid_pre;
        const NodePtr<T>& resid_node = corr_fwd.resid_pre_nodes.at(static_cast<size_t>(l));
        for (int64_t p = 0; p < seq; ++p) {
            Tensor<T> value({1, h});
            double attr = 0.0;
            for (int64_t i = 0; i < h; ++i) {
                const double cv = static_cast<double>(clean_res.at3(0, p, i));
                const double xv = static_cast<double>(corr_res.at3(0, p, i));
                value[i] = static_cast<T>(xv + epsilon * (cv - xv));
                attr += static_cast<double>(resid_node->grad.at3(0, p, i)) * epsilon * (cv - xv);
            }
            ForwardOptions<T> patch_opts;
            patch_opts.cache.sigma_grids = false;
            patch_opts.residual_patch = ResidualPatchSpec<T>{l, p, std::move(value)};
            auto patched = forward(params, cfg, modes, detail::as_batch1(corrupted), patch_opts);
            const double f_patched = detail::logit_diff_metric(patched.logits->value, answer_a, answer_b);
            out.activation.at2(l, p) = (f_patched - out.f_corr) / denom;
            out.attribution.at2(l, p) = attr / denom;
        }
    }
    return out;
}

struct PromptPair {
    TensorI clean;
    TensorI corrupted;
    int32_t answer_a = 0;
    int32_t answer_b = 0;
};

struct PatchingComparison {
    std::vector<double> error_a;      // per layer, mean over prompts of sum_positions |delta - delta_attr|
    std::vector<double> error_b;
    std::vector<double> improvement;  // error_a - error_b
    double mean_improvement = 0.0;
    double stddev_improvement = 0.0;
};

template <typename T>
PatchingComparison patching_error_comparison(const TransformerParams<T>& params_a, const ModelConfig& cfg_a,
                                             const NormModeMap& modes_a,
                                             const TransformerParams<T>& params_b, const ModelConfig& cfg_b,
                                             const NormModeMap& modes_b,
                                             const std::vector<PromptPair>& prompts) {
    if (cfg_a.n_layers != cfg_b.n_layers) {
        throw InputError("patching_error_comparison: models must have equal layer counts");
    }
    if (prompts.empty()) throw InputError("patching_error_comparison: prompt set is empty");
    const int layers = cfg_a.n_layers;
    PatchingComparison cmp;
    cmp.error_a.assign(static_cast<size_t>(layers), 0.0);
    cmp.error_b.assign(static_cast<size_t>(layers), 0.0);
    for (const auto& pp : prompts) {
        const auto grid_a = patching_grids(params_a, cfg_a, modes_a, pp.clean, pp.corrupted, pp.answer_a, pp.answer_b);
        const auto grid_b = patching_grids(params_b, cfg_b, modes_b, pp.clean, pp.corrupted, pp.answer_a, pp.answer_b);
        for (int l = 0; l < layers; ++l) {
            for (int64_t p = 0; p < grid_a.activation.shape[1]; ++p) {
                cmp.error_a[static_cast<size_t>(l)] += std::abs(grid_a.activation.at2(l, p) - grid_a.attribution.at2(l, p));
                cmp.error_b[static_cast<size_t>(l)] += std::abs(grid_b.activation.at2(l, p) - grid_b.attribution.at2(l, p));
            }
        }
    }
    const double inv_prompts = 1.0 / static_cast<double>(prompts.size());
    for (int l = 0; l < layers; ++l) {
        cmp.error_a[static_cast<size_t>(l)] *= inv_prompts;
        cmp.error_b[static_cast<size_t>(l)] *= inv_prompts;
        cmp.improvement.push_back(cmp.error_a[static_cast<size_t>(l)] - cmp.error_b[static_cast<size_t>(l)]);
    }
    for (double v : cmp.improvement) cmp.mean_improvement += v;
    cmp.mean_improvement /= static_cast<double>(layers);
    for (double v : cmp.improvement) {
        const double d = v - cmp.mean_improvement;
        cmp.stddev_improvement += d * d;
    }
    cmp.stddev_improvement = std::sqrt(cmp.stddev_improvement / static_cast<double>(layers));
    return cmp;
}

// Synthetic name-mover prompts for byte-level models: a fixed template with
// two distinct single-byte names, so every prompt has identical token length
// and name positions. The corrupted twin swaps the names; the metric pair is
// (indirect-object byte, repeated-subject byte).
inline std::vector<PromptPair> make_name_mover_prompts(int n, uint64_t seed) {
    Rng rng(seed);
    std::vector<PromptPair> out;
    const std::string templ = "When # and @ met at the park, # gave a ball to";
    for (int i = 0; i < n; ++i) {
        const char name_a = static_cast<char>('A' + rng.below(26));
        char name_b = name_a;
        while (name_b == name_a) name_b = static_cast<char>('A' + rng.below(26));
        auto render = [&templ](char subject, char object) {
            std::string s = templ;
            for (char& c : s) {
                if (c == '#') c = subject;
                if (c == '@') c = object;
            }
            return s;
        };
        const std::string clean = render(name_a, name_b);
        const std::string corrupted = render(name_b, name_a);
        PromptPair pp;
        pp.clean = TensorI({static_cast<int64_t>(clean.size())});
        pp.corrupted = TensorI({static_cast<int64_t>(corrupted.size())});
        for (size_t c = 0; c < clean.size(); ++c) {
            pp.clean[static_cast<int64_t>(c)] = static_cast<int32_t>(static_cast<unsigned char>(clean[c]));
            pp.corrupted[static_cast<int64_t>(c)] = static_cast<int32_t>(static_cast<unsigned char>(corrupted[c]));
        }
        pp.answer_a = static_cast<int32_t>(static_cast<unsigned char>(name_b));
        pp.answer_b = static_cast<int32_t>(static_cast<unsigned char>(name_a));
        out.push_back(std::move(pp));
    }
    return out;
}

// ---------------------------------------------------------------------------
// norm profile and attention sinks
// ---------------------------------------------------------------------------

struct PositionNormStats {
    double first_mean = 0.0, first_q25 = 0.0, first_q50 = 0.0, first_q75 = 0.0;
    double other_mean = 0.0, other_q25 = 0.0, other_q50 = 0.0, other_q75 = 0.0;
};

namespace detail {

inline void quartiles(std::vector<double>& v, double* mean, double* q25, double* q50, double* q75) {
    *mean = *q25 = *q50 = *q75 = 0.0;
    if (v.empty()) return;
    double sum = 0.0;
    for (double x : v) sum += x;
    *mean = sum / static_cast<double>(v.size());
    std::sort(v.begin(), v.end());
    auto at = [&v](double q) {
        const size_t idx = static_cast<size_t>(q * static_cast<double>(v.size() - 1) + 0.5);
        return v[std::min(idx, v.size() - 1)];
    };
    *q25 = at(0.25);
    *q50 = at(0.5);
    *q75 = at(0.75);
}

template <typename T>
PositionNormStats position_norms(const Tensor<T>& resid) {
    const int64_t b = resid.shape[0], s = resid.shape[1], h = resid.shape[2];
    std::vector<double> first, others;
    for (int64_t bi = 0; bi < b; ++bi) {
        for (int64_t si = 0; si < s; ++si) {
            double sq = 0.0;
            const T* row = resid.data.data() + (bi * s + si) * h;
            for (int64_t i = 0; i < h; ++i) sq += static_cast<double>(row[i]) * static_cast<double>(row[i]);
            (si == 0 ? first : others).push_back(std::sqrt(sq));
        }
    }
    PositionNormStats st;
    quartiles(first, &st.first_mean, &st.first_q25, &st.first_q50, &st.first_q75);
    quartiles(others, &st.other_mean, &st.other_q25, &st.other_q50, &st.other_q75);
    return st;
}

}  // namespace detail

// Residual-stream L2 norms split into position 0 vs the rest, per layer
// (pre-block streams, plus the final residual as the last entry).
template <typename T>
std::vector<PositionNormStats> norm_profile(const ActivationCache<T>& cache) {
    std::vector<PositionNormStats> out;
    for (const auto& lc : cache.layers) {
        if (lc.resid_pre.numel() == 0) throw ProtocolError("norm_profile: cache has no residual streams");
        out.push_back(detail::position_norms(lc.resid_pre));
    }
    if (cache.resid_final.numel() > 0) out.push_back(detail::position_norms(cache.resid_final));
    return out;
}

struct SinkRate {
    double rate = 0.0;
    int64_t sunk = 0;
    int64_t pairs = 0;
};

// A (head, sequence) pair "sinks" when the mean over query positions of
// attention to position 0 reaches the threshold.
template <typename T>
SinkRate sink_rate(const std::vector<Tensor<T>>& patterns, double threshold = 0.30) {
    SinkRate out;
    for (const auto& pat : patterns) {
        if (pat.numel() == 0) throw ProtocolError("sink_rate: empty attention pattern");
        const int64_t b = pat.shape[0], nh = pat.shape[1], s = pat.shape[2];
        for (int64_t bi = 0; bi < b; ++bi) {
            for (int64_t hd = 0; hd < nh; ++hd) {
                double mass = 0.0;
                for (int64_t q = 0; q < s; ++q) {
                    mass += static_cast<double>(pat.data[static_cast<size_t>(((bi * nh + hd) * s + q) * s)]);
                }
                mass /= static_cast<double>(s);
                ++out.pairs;
                if (mass >= threshold) ++out.sunk;
            }
        }
    }
    if (out.pairs > 0) out.rate = static_cast<double>(out.sunk) / static_cast<double>(out.pairs);
    return out;
}

// ---------------------------------------------------------------------------
// confidence neurons
// ---------------------------------------------------------------------------

// Variance over the vocab of the neuron direction's normalized projection on
// each unembedding column.
template <typename T>
double logit_var(const Tensor<T>& w_u, const Tensor<T>& w) {
    const int64_t h = w_u.shape[0], vocab = w_u.shape[1];
    if (w.numel() != h) throw InputError("logit_var: direction length must match d_model");
    double wnorm = 0.0;
    for (int64_t i = 0; i < h; ++i) wnorm += static_cast<double>(w[i]) * static_cast<double>(w[i]);
    wnorm = std::sqrt(wnorm);
    if (wnorm == 0.0) throw InputError("logit_var: zero direction");
    double sum = 0.0, sum_sq = 0.0;
    for (int64_t v = 0; v < vocab; ++v) {
        double dot = 0.0, colnorm = 0.0;
        for (int64_t i = 0; i < h; ++i) {
            const double u = static_cast<double>(w_u.data[static_cast<size_t>(i * vocab + v)]);
            dot += u * static_cast<double>(w[i]);
            colnorm += u * u;
        }
        colnorm = std::sqrt(colnorm);
        const double proj = colnorm > 0.0 ? dot / (colnorm * wnorm) : 0.0;
        sum += proj;
        sum_sq += proj * proj;
    }
    const double mean = sum / static_cast<double>(vocab);
    return std::max(0.0, sum_sq / static_cast<double>(vocab) - mean * mean);
}

inline constexpr double kCnScoreGuard = 1e-12;

template <typename T>
double cn_score(const Tensor<T>& w_u, const Tensor<T>& w) {
    double wnorm = 0.0;
    for (int64_t i = 0; i < w.numel(); ++i) wnorm += static_cast<double>(w[i]) * static_cast<double>(w[i]);
    wnorm = std::sqrt(wnorm);
    if (wnorm == 0.0) throw InputError("cn_score: zero direction");
    return wnorm / (logit_var(w_u, w) + kCnScoreGuard);
}

struct NullspaceProfile {
    std::vector<double> normalized_singular_values;  // descending, max-normalized
    std::vector<double> cosines;                     // |<w_hat, v_i>| per singular direction
};

// Singular structure of the unembedding as seen from residual space: the
// Gram matrix W_U W_U^T is decomposed and w is compared against each
// singular direction.
template <typename T>
NullspaceProfile unembedding_nullspace(const Tensor<T>& w_u, const Tensor<T>& w, int64_t k) {
    const int64_t h = w_u.shape[0], vocab = w_u.shape[1];
    if (w.numel() != h) throw InputError("unembedding_nullspace: direction length must match d_model");
    if (k < 1 || k > h) throw InputError("unembedding_nullspace: k must be in [1, d_model]");
    Tensor<double> gram({h, h});
    for (int64_t i = 0; i < h; ++i) {
        for (int64_t j = i; j < h; ++j) {
            double acc = 0.0;
            for (int64_t v = 0; v < vocab; ++v) {
                acc += static_cast<double>(w_u.data[static_cast<size_t>(i * vocab + v)]) *
                       static_cast<double>(w_u.data[static_cast<size_t>(j * vocab + v)]);
            }
            gram.at2(i, j) = acc;
            gram.at2(j, i) = acc;
        }
    }
    const SymmetricEigen eig = symmetric_eigen(gram);
    const double top = std::sqrt(std::max(eig.values[0], 0.0));
    double wnorm = 0.0;
    for (int64_t i = 0; i < h; ++i) wnorm += static_cast<double>(w[i]) * static_cast<double>(w[i]);
    wnorm = std::sqrt(wnorm);
    if (wnorm == 0.0) throw InputError("unembedding_nullspace: zero direction");
    NullspaceProfile out;
    for (int64_t i = 0; i < k; ++i) {
        const double sv = std::sqrt(std::max(eig.values[static_cast<size_t>(i)], 0.0));
        out.normalized_singular_values.push_back(top > 0.0 ? sv / top : 0.0);
        double dot = 0.0;
        for (int64_t r = 0; r < h; ++r) dot += static_cast<double>(w[r]) / wnorm * eig.vectors.at2(r, i);
        out.cosines.push_back(std::abs(dot));
    }
    return out;
}

struct NeuronStats {
    int64_t index = 0;
    double weight_norm = 0.0;
    double logit_var = 0.0;
    double cn_score = 0.0;
    std::vector<double> nullspace_cosines;  // filled for top-ranked neurons
};

// Rank final-MLP (or any layer's) neurons by confidence-neuron score; the
// top_profiled entries also get their nullspace cosine profile.
template <typename T>
std::vector<NeuronStats> confidence_neuron_scan(const TransformerParams<T>& params, int layer,
                                                int64_t top_profiled = 0, int64_t profile_k = 0) {
    const auto& lp = params.layers.at(static_cast<size_t>(layer));
    const Tensor<T>& w_out = lp.w_out->value;  // [4H, H]; row i is neuron i's output direction
    const int64_t n_neurons = w_out.shape[0], h = w_out.shape[1];
    const Tensor<T> w_u = params.unembedding();
    std::vector<NeuronStats> stats;
    stats.reserve(static_cast<size_t>(n_neurons));
    for (int64_t i = 0; i < n_neurons; ++i) {
        Tensor<T> w({h});
        std::copy(w_out.data.data() + i * h, w_out.data.data() + (i + 1) * h, w.data.data());
        NeuronStats st;
        st.index = i;
        double norm = 0.0;
        for (int64_t j = 0; j < h; ++j) norm += static_cast<double>(w[j]) * static_cast<double>(w[j]);
        st.weight_norm = std::sqrt(norm);
        if (st.weight_norm == 0.0) {
            st.logit_var = 0.0;
            st.cn_score = 0.0;
        } else {
            st.logit_var = logit_var(w_u, w);
            st.cn_score = st.weight_norm / (st.logit_var + kCnScoreGuard);
        }
        stats.push_back(std::move(st));
    }
    std::sort(stats.begin(), stats.end(), [](const NeuronStats& a, const NeuronStats& b) {
        if (a.cn_score != b.cn_score) return a.cn_score > b.cn_score;
        return a.index < b.index;
    });
    const int64_t kk = profile_k > 0 ? profile_k : h;
    for (int64_t i = 0; i < std::min<int64_t>(top_profiled, static_cast<int64_t>(stats.size())); ++i) {
        auto& st = stats[static_cast<size_t>(i)];
        if (st.weight_norm == 0.0) continue;
        Tensor<T> w({h});
        std::copy(w_out.data.data() + st.index * h, w_out.data.data() + (st.index + 1) * h, w.data.data());
        st.nullspace_cosines = unembedding_nullspace(w_u, w, kk).cosines;
    }
    return stats;
}

// ---------------------------------------------------------------------------
// mean ablation
// ---------------------------------------------------------------------------

struct MeanAblateResult {
    EvalResult baseline;
    EvalResult ablated;
    double delta_ce = 0.0;
    double delta_entropy = 0.0;
    std::vector<double> neuron_means;
};

// Two passes over the corpus: the first measures each neuron's mean post-GELU
// activation (and the baseline metrics), the second reruns with those
// activations clamped to their means.
template <typename T>
MeanAblateResult mean_ablate(const TransformerParams<T>& params, const ModelConfig& cfg,
                             const NormModeMap& modes, const TokenizedCorpus& corpus, int64_t seq_len,
                             int layer, const std::vector<int64_t>& neurons, int64_t batch_size = 8,
                             int64_t max_blocks = -1) {
    if (layer < 0 || layer >= cfg.n_layers) throw InputError("mean_ablate: layer out of range");
    for (int64_t n : neurons) {
        if (n < 0 || n >= cfg.d_mlp()) throw InputError("mean_ablate: neuron index out of range");
    }
    MeanAblateResult res;
    std::vector<double> sums(neurons.size(), 0.0);
    int64_t count = 0;
    EvalAccumulator base_acc(cfg.vocab_size);
    ForwardOptions<T> opts;
    opts.cache.sigma_grids = false;
    opts.cache.mlp_hidden = true;
    for_each_eval_batch(params, cfg, modes, corpus, seq_len, batch_size, max_blocks, opts,
                        [&](const ForwardResult<T>& fwd, const TensorI& inputs, const TensorI& targets) {
                            (void)inputs;
                            base_acc.add_rows(fwd.logits->value.data.data(), targets.data.data(),
                                              targets.numel());
                            const Tensor<T>& hidden = fwd.cache.layers[static_cast<size_t>(layer)].mlp_hidden;
                            const int64_t rows = hidden.numel() / hidden.dim(-1);
                            const int64_t width = hidden.dim(-1);
                            for (int64_t r = 0; r < rows; ++r) {
                                for (size_t ni = 0; ni < neurons.size(); ++ni) {
                                    sums[ni] += static_cast<double>(hidden[r * width + neurons[ni]]);
                                }
                            }
                            count += rows;
                        });
    res.baseline = base_acc.result();
    if (count == 0) throw InputError("mean_ablate: corpus produced no positions");
    for (size_t ni = 0; ni < neurons.size(); ++ni) res.neuron_means.push_back(sums[ni] / static_cast<double>(count));

    EvalAccumulator abl_acc(cfg.vocab_size);
    ForwardOptions<T> abl_opts;
    abl_opts.cache.sigma_grids = false;
    for (size_t ni = 0; ni < neurons.size(); ++ni) {
        abl_opts.neuron_clamps.push_back({layer, neurons[ni], static_cast<T>(res.neuron_means[ni])});
    }
    for_each_eval_batch(params, cfg, modes, corpus, seq_len, batch_size, max_blocks, abl_opts,
                        [&](const ForwardResult<T>& fwd, const TensorI& inputs, const TensorI& targets) {
                            (void)inputs;
                            abl_acc.add_rows(fwd.logits->value.data.data(), targets.data.data(),
                                             targets.numel());
                        });
    res.ablated = abl_acc.result();
    res.delta_ce = res.ablated.ce - res.baseline.ce;
    res.delta_entropy = res.ablated.entropy - res.baseline.entropy;
    return res;
}

}  // namespace lnfree
