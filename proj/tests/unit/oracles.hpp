#pragma once

// Test-only oracles, deliberately independent of the library's computation
// paths: a plain-loop reference transformer (single pre-attention LN, no
// autodiff), a scalar log-sum-exp cross-entropy, an eval-metric recomputation,
// and a power-iteration eigensolver. Everything here is double precision and
// written for clarity over speed.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "lnfree/model.hpp"
#include "lnfree/tensor.hpp"

namespace oracle {

using lnfree::ModelConfig;
using lnfree::Tensor;
using lnfree::TensorI;
using lnfree::TransformerParams;

using Vec = std::vector<double>;
using Mat = std::vector<Vec>;  // row major

inline Vec layer_norm_row(const Vec& x, const Vec& gamma, const Vec& beta, double eps) {
    const size_t h = x.size();
    double mean = 0.0;
    for (double v : x) mean += v;
    mean /= static_cast<double>(h);
    double var = 0.0;
    for (double v : x) var += (v - mean) * (v - mean);
    var /= static_cast<double>(h);
    const double sigma = std::sqrt(var + eps);
    Vec y(h);
    for (size_t i = 0; i < h; ++i) y[i] = (x[i] - mean) / sigma * gamma[i] + beta[i];
    return y;
}

inline double gelu_scalar(double x) {
    return 0.5 * x * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (x + 0.044715 * x * x * x)));
}

inline Vec node_row(const lnfree::NodePtr<double>& node, int64_t row) {
    const int64_t h = node->value.dim(-1);
    Vec out(static_cast<size_t>(h));
    for (int64_t i = 0; i < h; ++i) out[static_cast<size_t>(i)] = node->value[row * h + i];
    return out;
}

inline Vec tensor_vec(const lnfree::NodePtr<double>& node) {
    Vec out(node->value.data.begin(), node->value.data.end());
    return out;
}

// Reference decoder-only forward with one LN per attention sublayer (the
// qk/v split collapses to this when both sites share parameters and stay in
// LN mode). Optionally patches one pre-block residual row. Returns the
// logits for a single sequence.
struct ReferencePatch {
    bool enabled = false;
    int layer = 0;
    int64_t position = 0;
    Vec value;  // length d_model
};

inline Mat reference_forward(const TransformerParams<double>& p, const ModelConfig& cfg,
                             const std::vector<int32_t>& tokens, const ReferencePatch& patch = {}) {
    const int64_t seq = static_cast<int64_t>(tokens.size());
    const int64_t h = cfg.d_model, nh = cfg.n_heads, dh = cfg.d_head, m = cfg.d_mlp();

    Mat resid(static_cast<size_t>(seq), Vec(static_cast<size_t>(h)));
    for (int64_t s = 0; s < seq; ++s) {
        for (int64_t i = 0; i < h; ++i) {
            resid[s][i] = p.tok_emb->value.at2(tokens[static_cast<size_t>(s)], i) + p.pos_emb->value.at2(s, i);
        }
    }

    auto matvec = [](const lnfree::NodePtr<double>& w, const Vec& x) {
        const int64_t rows = w->value.shape[0], cols = w->value.shape[1];
        Vec out(static_cast<size_t>(cols), 0.0);
        for (int64_t r = 0; r < rows; ++r) {
            for (int64_t c = 0; c < cols; ++c) out[static_cast<size_t>(c)] += x[static_cast<size_t>(r)] * w->value.at2(r, c);
        }
        return out;
    };

    for (int l = 0; l < cfg.n_layers; ++l) {
        if (patch.enabled && patch.layer == l) {
            for (size_t i = 0; i < patch.value.size(); ++i) resid[static_cast<size_t>(patch.position)][i] = patch.value[i];
        }
        const auto& lp = p.layers[static_cast<size_t>(l)];
        const Vec gamma1 = tensor_vec(lp.ln_qk.gamma), beta1 = tensor_vec(lp.ln_qk.beta);

        Mat q(seq), k(seq), v(seq);
        for (int64_t s = 0; s < seq; ++s) {
            const Vec x1 = layer_norm_row(resid[static_cast<size_t>(s)], gamma1, beta1, cfg.ln_epsilon);
            q[static_cast<size_t>(s)] = matvec(lp.w_q, x1);
            k[static_cast<size_t>(s)] = matvec(lp.w_k, x1);
            v[static_cast<size_t>(s)] = matvec(lp.w_v, x1);
            for (int64_t i = 0; i < h; ++i) {
                q[static_cast<size_t>(s)][i] += lp.b_q->value[i];
                k[static_cast<size_t>(s)][i] += lp.b_k->value[i];
                v[static_cast<size_t>(s)][i] += lp.b_v->value[i];
            }
        }
        Mat attn_out(static_cast<size_t>(seq), Vec(static_cast<size_t>(h), 0.0));
        for (int64_t head = 0; head < nh; ++head) {
            for (int64_t s = 0; s < seq; ++s) {
                Vec scores(static_cast<size_t>(s + 1));
                for (int64_t t = 0; t <= s; ++t) {
                    double dot = 0.0;
                    for (int64_t i = 0; i < dh; ++i) {
                        dot += q[static_cast<size_t>(s)][head * dh + i] * k[static_cast<size_t>(t)][head * dh + i];
                    }
                    scores[static_cast<size_t>(t)] = dot / std::sqrt(static_cast<double>(dh));
                }
                const double mx = *std::max_element(scores.begin(), scores.end());
                double z = 0.0;
                for (double& sc : scores) {
                    sc = std::exp(sc - mx);
                    z += sc;
                }
                Vec mixed(static_cast<size_t>(dh), 0.0);
                for (int64_t t = 0; t <= s; ++t) {
                    const double w = scores[static_cast<size_t>(t)] / z;
                    for (int64_t i = 0; i < dh; ++i) mixed[static_cast<size_t>(i)] += w * v[static_cast<size_t>(t)][head * dh + i];
                }
                for (int64_t i = 0; i < dh; ++i) {
                    for (int64_t c = 0; c < h; ++c) {
                        attn_out[static_cast<size_t>(s)][c] += mixed[static_cast<size_t>(i)] * lp.w_o->value.at2(head * dh + i, c);
                    }
                }
            }
        }
        for (int64_t s = 0; s < seq; ++s) {
            for (int64_t i = 0; i < h; ++i) resid[static_cast<size_t>(s)][i] += attn_out[static_cast<size_t>(s)][i] + lp.b_o->value[i];
        }

        const Vec gamma2 = tensor_vec(lp.ln_mlp.gamma), beta2 = tensor_vec(lp.ln_mlp.beta);
        for (int64_t s = 0; s < seq; ++s) {
            const Vec x2 = layer_norm_row(resid[static_cast<size_t>(s)], gamma2, beta2, cfg.ln_epsilon);
            Vec hidden = matvec(lp.w_in, x2);
            for (int64_t i = 0; i < m; ++i) hidden[static_cast<size_t>(i)] = gelu_scalar(hidden[static_cast<size_t>(i)] + lp.b_in->value[i]);
            Vec mlp_out = matvec(lp.w_out, hidden);
            for (int64_t i = 0; i < h; ++i) resid[static_cast<size_t>(s)][i] += mlp_out[static_cast<size_t>(i)] + lp.b_out->value[i];
        }
    }

    const Vec gamma_f = tensor_vec(p.ln_final.gamma), beta_f = tensor_vec(p.ln_final.beta);
    Mat logits(static_cast<size_t>(seq), Vec(static_cast<size_t>(cfg.vocab_size), 0.0));
    for (int64_t s = 0; s < seq; ++s) {
        const Vec xf = layer_norm_row(resid[static_cast<size_t>(s)], gamma_f, beta_f, cfg.ln_epsilon);
        for (int64_t vtok = 0; vtok < cfg.vocab_size; ++vtok) {
            double dot = 0.0;
            for (int64_t i = 0; i < h; ++i) {
                const double wu = p.tied ? p.tok_emb->value.at2(vtok, i) : p.w_u->value.at2(i, vtok);
                dot += xf[static_cast<size_t>(i)] * wu;
            }
            logits[static_cast<size_t>(s)][static_cast<size_t>(vtok)] = dot;
        }
    }
    return logits;
}

// Scalar cross-entropy via log-sum-exp, independent of the graph op.
inline double ce_logsumexp(const Tensor<double>& logits, const TensorI& targets) {
    const int64_t vocab = logits.dim(-1);
    const int64_t rows = logits.numel() / vocab;
    double total = 0.0;
    for (int64_t r = 0; r < rows; ++r) {
        const double* row = logits.data.data() + r * vocab;
        double mx = row[0];
        for (int64_t v = 1; v < vocab; ++v) mx = std::max(mx, row[v]);
        double z = 0.0;
        for (int64_t v = 0; v < vocab; ++v) z += std::exp(row[v] - mx);
        total += mx + std::log(z) - row[targets.data[static_cast<size_t>(r)]];
    }
    return total / static_cast<double>(rows);
}

// Largest-k eigenpairs of a symmetric PSD matrix via power iteration with
// deflation.
struct PowerEigen {
    std::vector<double> values;
    Mat vectors;  // vectors[i] is the i-th eigenvector
};

inline PowerEigen power_iteration_eigen(Mat a, int k, int iters = 20000) {
    const size_t n = a.size();
    PowerEigen out;
    for (int e = 0; e < k; ++e) {
        Vec v(n, 0.0);
        v[static_cast<size_t>(e) % n] = 1.0;
        v[0] += 0.3;  // deterministic non-degenerate start
        double lambda = 0.0;
        for (int it = 0; it < iters; ++it) {
            Vec w(n, 0.0);
            for (size_t i = 0; i < n; ++i) {
                for (size_t j = 0; j < n; ++j) w[i] += a[i][j] * v[j];
            }
            double norm = 0.0;
            for (double x : w) norm += x * x;
            norm = std::sqrt(norm);
            if (norm == 0.0) break;
            for (size_t i = 0; i < n; ++i) v[i] = w[i] / norm;
            lambda = norm;
        }
        // Rayleigh quotient for the converged vector.
        Vec w(n, 0.0);
        for (size_t i = 0; i < n; ++i) {
            for (size_t j = 0; j < n; ++j) w[i] += a[i][j] * v[j];
        }
        lambda = 0.0;
        for (size_t i = 0; i < n; ++i) lambda += v[i] * w[i];
        out.values.push_back(lambda);
        out.vectors.push_back(v);
        for (size_t i = 0; i < n; ++i) {
            for (size_t j = 0; j < n; ++j) a[i][j] -= lambda * v[i] * v[j];
        }
    }
    return out;
}

}  // namespace oracle
