#include <gtest/gtest.h>

#include <cmath>

#include "lnfree/model.hpp"
#include "oracles.hpp"

using namespace lnfree;

namespace {

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.n_layers = 2;
    cfg.d_model = 16;
    cfg.n_heads = 2;
    cfg.d_head = 8;
    cfg.vocab_size = 11;
    cfg.max_seq_len = 12;
    return cfg;
}

TensorI random_tokens(int64_t b, int64_t s, int vocab, uint64_t seed) {
    Rng rng(seed);
    TensorI t({b, s});
    for (auto& v : t.data) v = static_cast<int32_t>(rng.below(static_cast<uint64_t>(vocab)));
    return t;
}

NormModeMap all_fake_modes(int n_layers, double sigma_bar) {
    NormModeMap modes(n_layers);
    for (const auto& site : modes.all_sites()) modes.set_norm_mode(site, sigma_bar);
    return modes;
}

}  // namespace

TEST(ModelConfig, Invariants) {
    ModelConfig cfg = tiny_config();
    cfg.d_head = 7;
    EXPECT_THROW(cfg.validate(), ConfigError);
    cfg = tiny_config();
    cfg.ln_epsilon = 0.0;
    EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(Forward, DeterministicAcrossRuns) {
    const ModelConfig cfg = tiny_config();
    auto params = TransformerParams<double>::init(cfg, 7);
    NormModeMap modes(cfg.n_layers);
    const TensorI tokens = random_tokens(2, 6, cfg.vocab_size, 3);
    auto a = forward(params, cfg, modes, tokens);
    auto b = forward(params, cfg, modes, tokens);
    ASSERT_EQ(a.logits->value.data.size(), b.logits->value.data.size());
    for (size_t i = 0; i < a.logits->value.data.size(); ++i) {
        EXPECT_EQ(a.logits->value.data[i], b.logits->value.data[i]);  // bitwise
    }
}

TEST(Forward, SingleTokenAttentionPatternIsOne) {
    const ModelConfig cfg = tiny_config();
    auto params = TransformerParams<double>::init(cfg, 1);
    NormModeMap modes(cfg.n_layers);
    ForwardOptions<double> opts;
    opts.cache.attention = true;
    auto res = forward(params, cfg, modes, random_tokens(1, 1, cfg.vocab_size, 5), opts);
    for (const auto& lc : res.cache.layers) {
        ASSERT_EQ(lc.attn_pattern.shape, (Shape{1, cfg.n_heads, 1, 1}));
        for (double v : lc.attn_pattern.data) EXPECT_DOUBLE_EQ(v, 1.0);
    }
}

TEST(Forward, RejectsOverlongSequencesAndBadTokens) {
    const ModelConfig cfg = tiny_config();
    auto params = TransformerParams<double>::init(cfg, 1);
    NormModeMap modes(cfg.n_layers);
    EXPECT_THROW(forward(params, cfg, modes, random_tokens(1, cfg.max_seq_len + 1, cfg.vocab_size, 5)),
                 InputError);
    TensorI bad({1, 2}, {0, 200});
    EXPECT_THROW(forward(params, cfg, modes, bad), InputError);
}

TEST(Forward, ResidualReconstructionFromContributions) {
    const ModelConfig cfg = tiny_config();
    auto params = TransformerParams<double>::init(cfg, 11);
    NormModeMap modes(cfg.n_layers);
    ForwardOptions<double> opts;
    opts.cache = CacheOptions::analysis();
    auto res = forward(params, cfg, modes, random_tokens(2, 5, cfg.vocab_size, 13), opts);
    const auto& cache = res.cache;
    Tensor<double> recon = cache.embed_contrib;
    for (const auto& lc : cache.layers) {
        for (const auto& hc : lc.head_contrib) {
            for (int64_t i = 0; i < recon.numel(); ++i) recon[i] += hc[i];
        }
        const int64_t h = cfg.d_model;
        for (int64_t i = 0; i < recon.numel(); ++i) {
            recon[i] += lc.attn_bias[i % h] + lc.mlp_contrib[i];
        }
    }
    for (int64_t i = 0; i < recon.numel(); ++i) {
        EXPECT_NEAR(recon[i], cache.resid_final[i], 1e-8);
    }
}

TEST(Forward, MatchesSingleLnReferenceWhenQkAndVShareParams) {
    const ModelConfig cfg = tiny_config();
    auto params = TransformerParams<double>::init(cfg, 17);
    // The reference implementation has one pre-attention LN; splitting is a
    // no-op when both split sites carry identical parameters.
    for (auto& lp : params.layers) {
        lp.ln_v.gamma->value = lp.ln_qk.gamma->value;
        lp.ln_v.beta->value = lp.ln_qk.beta->value;
    }
    NormModeMap modes(cfg.n_layers);
    const TensorI tokens = random_tokens(1, 7, cfg.vocab_size, 19);
    auto res = forward(params, cfg, modes, tokens);
    std::vector<int32_t> seq(tokens.data.begin(), tokens.data.end());
    const auto ref = oracle::reference_forward(params, cfg, seq);
    for (int64_t s = 0; s < 7; ++s) {
        for (int64_t v = 0; v < cfg.vocab_size; ++v) {
            EXPECT_NEAR(res.logits->value.at3(0, s, v), ref[static_cast<size_t>(s)][static_cast<size_t>(v)], 1e-8);
        }
    }
}

TEST(Forward, CachedSigmaGridsMatchSigmaStatsOnCachedInputs) {
    const ModelConfig cfg = tiny_config();
    auto params = TransformerParams<double>::init(cfg, 23);
    NormModeMap modes(cfg.n_layers);
    modes.set_norm_mode(NormSite::mlp(0), 1.5);  // mixed modes on purpose
    ForwardOptions<double> opts;
    opts.cache.site_inputs = true;
    auto res = forward(params, cfg, modes, random_tokens(2, 4, cfg.vocab_size, 29), opts);
    auto check_site = [&](const SiteCacheEntry<double>& entry) {
        auto [grid, avg] = sigma_stats(entry.input, cfg.ln_epsilon);
        (void)avg;
        ASSERT_EQ(grid.numel(), entry.sigma.numel());
        for (int64_t i = 0; i < grid.numel(); ++i) EXPECT_NEAR(grid[i], entry.sigma[i], 1e-6);
    };
    for (const auto& lc : res.cache.layers) {
        check_site(lc.qk);
        check_site(lc.v);
        check_site(lc.mlp);
    }
    check_site(res.cache.final_site);
}

TEST(Forward, FrozenSigmaIgnoresBatchStatistics) {
    const ModelConfig cfg = tiny_config();
    auto params = TransformerParams<double>::init(cfg, 31);
    NormModeMap modes(cfg.n_layers);
    modes.set_norm_mode(NormSite::final(), 2.25);
    ForwardOptions<double> opts;
    auto a = forward(params, cfg, modes, random_tokens(2, 4, cfg.vocab_size, 37), opts);
    auto b = forward(params, cfg, modes, random_tokens(2, 4, cfg.vocab_size, 38), opts);
    for (double v : a.cache.final_site.applied_scale.data) EXPECT_DOUBLE_EQ(v, 2.25);
    for (double v : b.cache.final_site.applied_scale.data) EXPECT_DOUBLE_EQ(v, 2.25);
    EXPECT_FALSE(a.cache.final_site.data_dependent);
}

TEST(Forward, LnScaleAuditCountsOnlyTrueLnSites) {
    const ModelConfig cfg = tiny_config();
    auto params = TransformerParams<double>::init(cfg, 41);
    const TensorI tokens = random_tokens(1, 4, cfg.vocab_size, 43);

    NormModeMap all_ln(cfg.n_layers);
    auto res_ln = forward(params, cfg, all_ln, tokens);
    EXPECT_EQ(res_ln.cache.ln_scale_applications, 3 * cfg.n_layers + 1);

    auto res_free = forward(params, cfg, all_fake_modes(cfg.n_layers, 1.0), tokens);
    EXPECT_EQ(res_free.cache.ln_scale_applications, 0);
}

// With every site FakeLN the final readout is affine, so the logit change
// from removing a contribution c cannot depend on which residual realizes
// the sum.
TEST(Model, FullyFakeLnComponentMapIsAffine) {
    const ModelConfig cfg = tiny_config();
    auto params = TransformerParams<double>::init(cfg, 47);
    const double sigma_bar = 1.8;
    Rng rng(53);
    const auto w_u = params.unembedding();
    const auto& gamma = params.ln_final.gamma->value;
    const auto& beta = params.ln_final.beta->value;
    auto readout = [&](const Tensor<double>& row) {
        auto y = fakeln_forward(row, gamma, beta, sigma_bar);
        std::vector<double> logits(static_cast<size_t>(cfg.vocab_size), 0.0);
        for (int64_t v = 0; v < cfg.vocab_size; ++v) {
            for (int64_t i = 0; i < cfg.d_model; ++i) logits[static_cast<size_t>(v)] += y[i] * w_u.at2(i, v);
        }
        return logits;
    };
    for (int rep = 0; rep < 20; ++rep) {
        auto r1 = Tensor<double>::randn({1, cfg.d_model}, rng, 2.0);
        auto r2 = Tensor<double>::randn({1, cfg.d_model}, rng, 0.5);
        auto c = Tensor<double>::randn({1, cfg.d_model}, rng, 1.0);
        auto minus = [&](const Tensor<double>& a) {
            Tensor<double> out = a;
            for (int64_t i = 0; i < out.numel(); ++i) out[i] -= c[i];
            return out;
        };
        const auto d1a = readout(r1), d1b = readout(minus(r1));
        const auto d2a = readout(r2), d2b = readout(minus(r2));
        for (size_t v = 0; v < d1a.size(); ++v) {
            EXPECT_NEAR(d1a[v] - d1b[v], d2a[v] - d2b[v], 1e-9);
        }
    }
}

TEST(Model, ResidualPatchOverridesPosition) {
    const ModelConfig cfg = tiny_config();
    auto params = TransformerParams<double>::init(cfg, 59);
    NormModeMap modes(cfg.n_layers);
    const TensorI tokens = random_tokens(1, 5, cfg.vocab_size, 61);
    ForwardOptions<double> base_opts;
    base_opts.cache.residuals = true;
    auto base = forward(params, cfg, modes, tokens, base_opts);

    ForwardOptions<double> patch_opts;
    patch_opts.cache.residuals = true;
    Tensor<double> value({1, cfg.d_model});
    for (int64_t i = 0; i < cfg.d_model; ++i) value[i] = 0.123 * static_cast<double>(i);
    patch_opts.residual_patch = ResidualPatchSpec<double>{1, 2, value};
    auto patched = forward(params, cfg, modes, tokens, patch_opts);
    for (int64_t i = 0; i < cfg.d_model; ++i) {
        EXPECT_DOUBLE_EQ(patched.cache.layers[1].resid_pre.at3(0, 2, i), value[i]);
    }
    // Causality: positions before the patch are unaffected at the next layer input.
    for (int64_t s = 0; s < 2; ++s) {
        for (int64_t i = 0; i < cfg.d_model; ++i) {
            EXPECT_DOUBLE_EQ(patched.cache.layers[1].resid_pre.at3(0, s, i),
                             base.cache.layers[1].resid_pre.at3(0, s, i));
        }
    }
}

TEST(Model, TiedUnembeddingIsTransposedTokenEmbedding) {
    const ModelConfig cfg = tiny_config();
    auto params = TransformerParams<double>::init(cfg, 67);
    const auto w_u = params.unembedding();
    ASSERT_EQ(w_u.shape, (Shape{cfg.d_model, cfg.vocab_size}));
    for (int64_t v = 0; v < cfg.vocab_size; ++v) {
        for (int64_t i = 0; i < cfg.d_model; ++i) {
            EXPECT_DOUBLE_EQ(w_u.at2(i, v), params.tok_emb->value.at2(v, i));
        }
    }
}
