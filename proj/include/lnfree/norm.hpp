#pragma once

// Normalization sites and modes. A site is one of the 3L+1 normalization
// points in the network (per-layer qk / v / mlp plus the final one before the
// unembedding); a mode says whether that site currently runs a true LayerNorm
// or a FakeLN with a frozen scalar scale.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "lnfree/common.hpp"
#include "lnfree/kernels.hpp"
#include "lnfree/tensor.hpp"

namespace lnfree {

enum class SiteKind { qk, v, mlp, final };

inline const char* site_kind_name(SiteKind k) {
    switch (k) {
        case SiteKind::qk: return "qk";
        case SiteKind::v: return "v";
        case SiteKind::mlp: return "mlp";
        case SiteKind::final: return "final";
    }
    return "?";
}

inline SiteKind site_kind_from_name(const std::string& s) {
    if (s == "qk") return SiteKind::qk;
    if (s == "v") return SiteKind::v;
    if (s == "mlp") return SiteKind::mlp;
    if (s == "final") return SiteKind::final;
    throw ConfigError("unknown norm site kind: " + s);
}

struct NormSite {
    SiteKind kind;
    int layer = -1;  // -1 for the final site

    static NormSite qk(int layer) { return {SiteKind::qk, layer}; }
    static NormSite v(int layer) { return {SiteKind::v, layer}; }
    static NormSite mlp(int layer) { return {SiteKind::mlp, layer}; }
    static NormSite final() { return {SiteKind::final, -1}; }

    bool operator==(const NormSite& o) const { return kind == o.kind && layer == o.layer; }

    std::string name() const {
        if (kind == SiteKind::final) return "final";
        return std::string(site_kind_name(kind)) + std::to_string(layer);
    }
};

struct NormMode {
    bool fake = false;
    double frozen_sigma = 0.0;  // meaningful iff fake

    static NormMode ln() { return {false, 0.0}; }
    static NormMode fake_ln(double sigma_bar) {
        if (!(sigma_bar > 0.0)) throw ConfigError("FakeLN frozen sigma must be positive");
        return {true, sigma_bar};
    }
};

// Mode of every site in an L-layer model. Starts all-LN.
class NormModeMap {
public:
    NormModeMap() = default;
    explicit NormModeMap(int n_layers)
        : n_layers_(n_layers), qk_(n_layers), v_(n_layers), mlp_(n_layers) {}

    int n_layers() const { return n_layers_; }

    const NormMode& at(const NormSite& site) const {
        return const_cast<NormModeMap*>(this)->slot(site);
    }

    // Flip one site from LN to FakeLN, freezing sigma_bar. Never reversible
    // and never repeatable for the same site.
    void set_norm_mode(const NormSite& site, double sigma_bar) {
        NormMode& m = slot(site);
        if (m.fake) throw ProtocolError("set_norm_mode: site " + site.name() + " is already FakeLN");
        m = NormMode::fake_ln(sigma_bar);
    }

    bool all_fake() const {
        for (const auto& m : qk_) {
            if (!m.fake) return false;
        }
        for (const auto& m : v_) {
            if (!m.fake) return false;
        }
        for (const auto& m : mlp_) {
            if (!m.fake) return false;
        }
        return final_.fake;
    }

    std::vector<NormSite> all_sites() const {
        std::vector<NormSite> out;
        for (int l = 0; l < n_layers_; ++l) out.push_back(NormSite::qk(l));
        for (int l = 0; l < n_layers_; ++l) out.push_back(NormSite::v(l));
        for (int l = 0; l < n_layers_; ++l) out.push_back(NormSite::mlp(l));
        out.push_back(NormSite::final());
        return out;
    }

private:
    NormMode& slot(const NormSite& site) {
        if (site.kind == SiteKind::final) return final_;
        if (site.layer < 0 || site.layer >= n_layers_) {
            throw InputError("norm site layer out of range: " + site.name());
        }
        switch (site.kind) {
            case SiteKind::qk: return qk_[static_cast<size_t>(site.layer)];
            case SiteKind::v: return v_[static_cast<size_t>(site.layer)];
            default: return mlp_[static_cast<size_t>(site.layer)];
        }
    }

    int n_layers_ = 0;
    std::vector<NormMode> qk_, v_, mlp_;
    NormMode final_;
};

// ---------------------------------------------------------------------------
// Plain (non-graph) forward helpers. The differentiable versions live in
// graph.hpp; these operate directly on tensors for analysis code and tests.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> ln_forward(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, double eps) {
    const int64_t h = x.dim(-1);
    if (gamma.numel() != h || beta.numel() != h) throw InputError("ln_forward: gamma/beta length mismatch");
    const int64_t rows = x.numel() / h;
    Tensor<T> out(x.shape);
    for (int64_t r = 0; r < rows; ++r) {
        const T* xr = x.data.data() + r * h;
        T* yr = out.data.data() + r * h;
        T mean, sig;
        kernels::row_mean_sigma(xr, h, static_cast<T>(eps), &mean, &sig);
        for (int64_t i = 0; i < h; ++i) yr[i] = (xr[i] - mean) / sig * gamma[i] + beta[i];
    }
    return out;
}

template <typename T>
Tensor<T> fakeln_forward(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                         double sigma_bar) {
    if (!(sigma_bar > 0.0)) throw ConfigError("fakeln_forward: sigma_bar must be positive");
    const int64_t h = x.dim(-1);
    if (gamma.numel() != h || beta.numel() != h) throw InputError("fakeln_forward: gamma/beta length mismatch");
    const int64_t rows = x.numel() / h;
    const T inv = T(1) / static_cast<T>(sigma_bar);
    Tensor<T> out(x.shape);
    for (int64_t r = 0; r < rows; ++r) {
        const T* xr = x.data.data() + r * h;
        T* yr = out.data.data() + r * h;
        T mean = T(0);
        for (int64_t i = 0; i < h; ++i) mean += xr[i];
        mean /= T(h);
        for (int64_t i = 0; i < h; ++i) yr[i] = (xr[i] - mean) * inv * gamma[i] + beta[i];
    }
    return out;
}

// Returns the per-position sigma grid (shape = input shape minus the feature
// dim, e.g. [B, S] for [B, S, H] input) and its mean over all positions.
template <typename T>
std::pair<Tensor<T>, double> sigma_stats(const Tensor<T>& x, double eps) {
    const int64_t h = x.dim(-1);
    const int64_t rows = x.numel() / h;
    Shape grid_shape(x.shape.begin(), x.shape.end() - 1);
    if (grid_shape.empty()) grid_shape.push_back(1);
    Tensor<T> grid(grid_shape);
    double total = 0.0;
    for (int64_t r = 0; r < rows; ++r) {
        T mean, sig;
        kernels::row_mean_sigma(x.data.data() + r * h, h, static_cast<T>(eps), &mean, &sig);
        grid[r] = sig;
        total += static_cast<double>(sig);
    }
    return {std::move(grid), total / static_cast<double>(rows)};
}

}  // namespace lnfree
