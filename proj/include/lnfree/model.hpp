#pragma once

// Decoder-only pre-norm transformer with independently switchable
// normalization sites. The attention input is normalized twice: once for the
// query/key path and once for the value path, so each can be weaned off LN
// separately. Forward builds an autodiff graph and fills an ActivationCache
// with whatever the caller asked to record.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "lnfree/common.hpp"
#include "lnfree/graph.hpp"
#include "lnfree/norm.hpp"
#include "lnfree/tensor.hpp"

namespace lnfree {

struct ModelConfig {
    int n_layers = 2;
    int d_model = 64;
    int n_heads = 4;
    int d_head = 16;
    int vocab_size = 257;
    int max_seq_len = 256;
    double ln_epsilon = 1e-5;
    bool tie_embeddings = true;

    void validate() const {
        if (n_layers < 1) throw ConfigError("model.n_layers must be >= 1");
        if (n_heads * d_head != d_model) {
            throw ConfigError("model.n_heads * model.d_head must equal model.d_model");
        }
        if (!(ln_epsilon > 0.0)) throw ConfigError("model.ln_epsilon must be positive");
        if (vocab_size < 2) throw ConfigError("model.vocab_size must be >= 2");
        if (max_seq_len < 1) throw ConfigError("model.max_seq_len must be >= 1");
    }

    int d_mlp() const { return 4 * d_model; }
};

template <typename T>
struct NormSiteParams {
    NodePtr<T> gamma;
    NodePtr<T> beta;
};

template <typename T>
struct LayerParams {
    NodePtr<T> w_q, b_q, w_k, b_k, w_v, b_v, w_o, b_o;
    NodePtr<T> w_in, b_in, w_out, b_out;
    NormSiteParams<T> ln_qk, ln_v, ln_mlp;
};

template <typename T>
struct ParamInfo {
    std::string name;
    NodePtr<T> node;
    bool weight_decay;
};

template <typename T>
struct TransformerParams {
    NodePtr<T> tok_emb;  // [V, H]
    NodePtr<T> pos_emb;  // [max_seq_len, H]
    std::vector<LayerParams<T>> layers;
    NormSiteParams<T> ln_final;
    NodePtr<T> w_u;  // [H, V]; null when tied (unembedding = tok_emb^T)
    bool tied = true;

    static TransformerParams init(const ModelConfig& cfg, uint64_t seed) {
        cfg.validate();
        Rng rng(seed);
        const int64_t h = cfg.d_model, v = cfg.vocab_size, m = cfg.d_mlp();
        const double resid_scale = 0.02 / std::sqrt(2.0 * cfg.n_layers);
        TransformerParams p;
        p.tied = cfg.tie_embeddings;
        p.tok_emb = parameter(Tensor<T>::randn({v, h}, rng, 0.02));
        p.pos_emb = parameter(Tensor<T>::randn({cfg.max_seq_len, h}, rng, 0.01));
        for (int l = 0; l < cfg.n_layers; ++l) {
            LayerParams<T> lp;
            lp.w_q = parameter(Tensor<T>::randn({h, h}, rng, 0.02));
            lp.b_q = parameter(Tensor<T>::zeros({h}));
            lp.w_k = parameter(Tensor<T>::randn({h, h}, rng, 0.02));
            lp.b_k = parameter(Tensor<T>::zeros({h}));
            lp.w_v = parameter(Tensor<T>::randn({h, h}, rng, 0.02));
            lp.b_v = parameter(Tensor<T>::zeros({h}));
            lp.w_o = parameter(Tensor<T>::randn({h, h}, rng, resid_scale));
            lp.b_o = parameter(Tensor<T>::zeros({h}));
            lp.w_in = parameter(Tensor<T>::randn({h, m}, rng, 0.02));
            lp.b_in = parameter(Tensor<T>::zeros({m}));
            lp.w_out = parameter(Tensor<T>::randn({m, h}, rng, resid_scale));
            lp.b_out = parameter(Tensor<T>::zeros({h}));
            lp.ln_qk = {parameter(Tensor<T>::full({h}, T(1))), parameter(Tensor<T>::zeros({h}))};
            lp.ln_v = {parameter(Tensor<T>::full({h}, T(1))), parameter(Tensor<T>::zeros({h}))};
            lp.ln_mlp = {parameter(Tensor<T>::full({h}, T(1))), parameter(Tensor<T>::zeros({h}))};
            p.layers.push_back(std::move(lp));
        }
        p.ln_final = {parameter(Tensor<T>::full({h}, T(1))), parameter(Tensor<T>::zeros({h}))};
        if (!p.tied) p.w_u = parameter(Tensor<T>::randn({h, v}, rng, 0.02));
        return p;
    }

    std::vector<ParamInfo<T>> named_parameters() const {
        std::vector<ParamInfo<T>> out;
        out.push_back({"tok_emb", tok_emb, false});
        out.push_back({"pos_emb", pos_emb, false});
        for (size_t l = 0; l < layers.size(); ++l) {
            const auto& lp = layers[l];
            const std::string pre = "layers." + std::to_string(l) + ".";
            out.push_back({pre + "w_q", lp.w_q, true});
            out.push_back({pre + "b_q", lp.b_q, false});
            out.push_back({pre + "w_k", lp.w_k, true});
            out.push_back({pre + "b_k", lp.b_k, false});
            out.push_back({pre + "w_v", lp.w_v, true});
            out.push_back({pre + "b_v", lp.b_v, false});
            out.push_back({pre + "w_o", lp.w_o, true});
            out.push_back({pre + "b_o", lp.b_o, false});
            out.push_back({pre + "w_in", lp.w_in, true});
            out.push_back({pre + "b_in", lp.b_in, false});
            out.push_back({pre + "w_out", lp.w_out, true});
            out.push_back({pre + "b_out", lp.b_out, false});
            out.push_back({pre + "ln_qk.gamma", lp.ln_qk.gamma, false});
            out.push_back({pre + "ln_qk.beta", lp.ln_qk.beta, false});
            out.push_back({pre + "ln_v.gamma", lp.ln_v.gamma, false});
            out.push_back({pre + "ln_v.beta", lp.ln_v.beta, false});
            out.push_back({pre + "ln_mlp.gamma", lp.ln_mlp.gamma, false});
            out.push_back({pre + "ln_mlp.beta", lp.ln_mlp.beta, false});
        }
        out.push_back({"ln_final.gamma", ln_final.gamma, false});
        out.push_back({"ln_final.beta", ln_final.beta, false});
        if (!tied) out.push_back({"w_u", w_u, true});
        return out;
    }

    // Unembedding as a plain [H, V] matrix (transpose of tok_emb when tied).
    Tensor<T> unembedding() const {
        if (!tied) return w_u->value;
        const Tensor<T>& e = tok_emb->value;
        const int64_t v = e.shape[0], h = e.shape[1];
        Tensor<T> out({h, v});
        for (int64_t i = 0; i < v; ++i)
            for (int64_t j = 0; j < h; ++j) out.at2(j, i) = e.at2(i, j);
        return out;
    }
};

// ---------------------------------------------------------------------------
// activation cache
// ---------------------------------------------------------------------------

struct CacheOptions {
    bool sigma_grids = true;
    bool residuals = false;
    bool attention = false;
    bool contributions = false;
    bool mlp_hidden = false;
    bool site_inputs = false;

    static CacheOptions training() { return {}; }
    static CacheOptions analysis() { return {true, true, true, true, true, false}; }
};

template <typename T>
struct SiteCacheEntry {
    Tensor<T> sigma;          // [B, S] sigma of the site input (model epsilon inside)
    Tensor<T> applied_scale;  // [B, S] divisor the site actually used
    bool data_dependent = false;
    Tensor<T> input;  // only with CacheOptions::site_inputs
};

template <typename T>
struct LayerCache {
    Tensor<T> resid_pre;  // [B, S, H]
    SiteCacheEntry<T> qk, v, mlp;
    Tensor<T> attn_pattern;               // [B, nh, S, S]
    std::vector<Tensor<T>> head_contrib;  // nh entries of [B, S, H], W_O bias excluded
    Tensor<T> attn_bias;                  // [H]
    Tensor<T> mlp_contrib;                // [B, S, H], biases included
    Tensor<T> mlp_hidden;                 // [B, S, 4H] post-gelu
};

template <typename T>
struct ActivationCache {
    int64_t batch = 0;
    int64_t seq = 0;
    Tensor<T> embed_contrib;  // [B, S, H] token + positional
    std::vector<LayerCache<T>> layers;
    SiteCacheEntry<T> final_site;
    Tensor<T> resid_final;  // [B, S, H] input of the final norm site
    // Number of normalization applications whose divisor was computed from
    // the data (true LN sites). Zero once every site is FakeLN.
    int64_t ln_scale_applications = 0;
};

// ---------------------------------------------------------------------------
// forward
// ---------------------------------------------------------------------------

template <typename T>
struct ResidualPatchSpec {
    int layer = 0;
    int64_t position = 0;  // -1 patches every position
    Tensor<T> value;       // [B, H], or [B, S, H] when position == -1
};

template <typename T>
struct NeuronClampSpec {
    int layer = 0;
    int64_t neuron = 0;
    T value = T(0);
};

template <typename T>
struct ForwardOptions {
    CacheOptions cache = CacheOptions::training();
    std::optional<ResidualPatchSpec<T>> residual_patch;
    std::vector<NeuronClampSpec<T>> neuron_clamps;
    bool keep_residual_nodes = false;
};

template <typename T>
struct ForwardResult {
    NodePtr<T> logits;       // [B, S, V]
    NodePtr<T> final_sigma;  // [B, S] sigma at the final site input
    std::vector<NodePtr<T>> resid_pre_nodes;  // per layer, when requested
    ActivationCache<T> cache;
};

namespace detail {

template <typename T>
void record_site(SiteCacheEntry<T>& entry, const Tensor<T>& input, const NormMode& mode, double eps,
                 const CacheOptions& opts) {
    if (!opts.sigma_grids) return;
    auto [grid, avg] = sigma_stats(input, eps);
    (void)avg;
    entry.sigma = grid;
    entry.data_dependent = !mode.fake;
    if (mode.fake) {
        entry.applied_scale = Tensor<T>::full(grid.shape, static_cast<T>(mode.frozen_sigma));
    } else {
        entry.applied_scale = entry.sigma;
    }
    if (opts.site_inputs) entry.input = input;
}

// Per-head output contribution: z[b, head, s, :] @ W_O rows of that head.
template <typename T>
std::vector<Tensor<T>> head_contributions(const Tensor<T>& z, const Tensor<T>& w_o) {
    const int64_t b = z.shape[0], nh = z.shape[1], seq = z.shape[2], dh = z.shape[3];
    const int64_t h = w_o.shape[1];
    std::vector<Tensor<T>> out;
    out.reserve(static_cast<size_t>(nh));
    for (int64_t head = 0; head < nh; ++head) {
        Tensor<T> c({b, seq, h});
        const T* w = w_o.data.data() + head * dh * h;
        for (int64_t bi = 0; bi < b; ++bi) {
            const T* zp = z.data.data() + ((bi * nh + head) * seq) * dh;
            kernels::gemm_nn(zp, w, c.data.data() + bi * seq * h, seq, h, dh);
        }
        out.push_back(std::move(c));
    }
    return out;
}

}  // namespace detail

template <typename T>
ForwardResult<T> forward(const TransformerParams<T>& params, const ModelConfig& cfg,
                         const NormModeMap& modes, const TensorI& tokens,
                         const ForwardOptions<T>& opts = {}) {
    if (tokens.rank() != 2) throw InputError("forward: tokens must be [B, S]");
    const int64_t batch = tokens.shape[0], seq = tokens.shape[1];
    if (seq > cfg.max_seq_len) {
        throw InputError("forward: sequence length " + std::to_string(seq) + " exceeds max_seq_len");
    }
    if (modes.n_layers() != cfg.n_layers) throw ProtocolError("forward: mode map layer count mismatch");

    ForwardResult<T> res;
    auto& cache = res.cache;
    cache.batch = batch;
    cache.seq = seq;
    cache.layers.resize(static_cast<size_t>(cfg.n_layers));

    auto apply_norm = [&](NodePtr<T> x, const NormSiteParams<T>& p, const NormMode& mode) {
        if (mode.fake) return fake_ln(x, p.gamma, p.beta, mode.frozen_sigma);
        ++cache.ln_scale_applications;
        return layer_norm(x, p.gamma, p.beta, cfg.ln_epsilon);
    };

    NodePtr<T> h = add(embedding(params.tok_emb, tokens), first_rows(params.pos_emb, seq));
    if (opts.cache.contributions) cache.embed_contrib = h->value;

    for (int l = 0; l < cfg.n_layers; ++l) {
        auto& lc = cache.layers[static_cast<size_t>(l)];
        const auto& lp = params.layers[static_cast<size_t>(l)];

        if (opts.residual_patch && opts.residual_patch->layer == l) {
            h = overwrite_position(h, opts.residual_patch->position, opts.residual_patch->value);
        }
        if (opts.cache.residuals) lc.resid_pre = h->value;
        if (opts.keep_residual_nodes) res.resid_pre_nodes.push_back(h);

        const NormMode& qk_mode = modes.at(NormSite::qk(l));
        const NormMode& v_mode = modes.at(NormSite::v(l));
        detail::record_site(lc.qk, h->value, qk_mode, cfg.ln_epsilon, opts.cache);
        detail::record_site(lc.v, h->value, v_mode, cfg.ln_epsilon, opts.cache);

        NodePtr<T> x_qk = apply_norm(h, lp.ln_qk, qk_mode);
        NodePtr<T> x_v = apply_norm(h, lp.ln_v, v_mode);

        NodePtr<T> q = split_heads(add(matmul(x_qk, lp.w_q), lp.b_q), cfg.n_heads);
        NodePtr<T> k = split_heads(add(matmul(x_qk, lp.w_k), lp.b_k), cfg.n_heads);
        NodePtr<T> v = split_heads(add(matmul(x_v, lp.w_v), lp.b_v), cfg.n_heads);

        NodePtr<T> probs = causal_softmax(scale(matmul_nt(q, k), 1.0 / std::sqrt(double(cfg.d_head))));
        if (opts.cache.attention) lc.attn_pattern = probs->value;

        NodePtr<T> z = matmul(probs, v);
        NodePtr<T> attn_out = add(matmul(merge_heads(z), lp.w_o), lp.b_o);
        if (opts.cache.contributions) {
            lc.head_contrib = detail::head_contributions(z->value, lp.w_o->value);
            lc.attn_bias = lp.b_o->value;
        }
        h = add(h, attn_out);

        const NormMode& mlp_mode = modes.at(NormSite::mlp(l));
        detail::record_site(lc.mlp, h->value, mlp_mode, cfg.ln_epsilon, opts.cache);
        NodePtr<T> x_mlp = apply_norm(h, lp.ln_mlp, mlp_mode);

        NodePtr<T> hidden = gelu(add(matmul(x_mlp, lp.w_in), lp.b_in));
        std::vector<std::pair<int64_t, T>> clamps;
        for (const auto& c : opts.neuron_clamps) {
            if (c.layer == l) clamps.push_back({c.neuron, c.value});
        }
        if (!clamps.empty()) hidden = clamp_features(hidden, std::move(clamps));
        if (opts.cache.mlp_hidden) lc.mlp_hidden = hidden->value;

        NodePtr<T> mlp_out = add(matmul(hidden, lp.w_out), lp.b_out);
        if (opts.cache.contributions) lc.mlp_contrib = mlp_out->value;
        h = add(h, mlp_out);
    }

    if (opts.cache.residuals) cache.resid_final = h->value;
    res.final_sigma = sigma(h, cfg.ln_epsilon);

    const NormMode& final_mode = modes.at(NormSite::final());
    if (opts.cache.sigma_grids) {
        cache.final_site.sigma = res.final_sigma->value;
        cache.final_site.data_dependent = !final_mode.fake;
        cache.final_site.applied_scale =
            final_mode.fake ? Tensor<T>::full(res.final_sigma->value.shape, static_cast<T>(final_mode.frozen_sigma))
                            : res.final_sigma->value;
        if (opts.cache.site_inputs) cache.final_site.input = h->value;
    }

    NodePtr<T> x_final = apply_norm(h, params.ln_final, final_mode);
    res.logits = params.tied ? matmul_nt(x_final, params.tok_emb) : matmul(x_final, params.w_u);
    return res;
}

}  // namespace lnfree
