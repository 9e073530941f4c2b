#pragma once

// Removal schedule: which normalization site gets frozen at which fine-tuning
// step, plus the running sigma estimator whose value is captured at the
// moment of removal.

#include <cstdint>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "lnfree/common.hpp"
#include "lnfree/norm.hpp"

namespace lnfree {

struct ScheduleConfig {
    int n_layers = 0;
    int64_t start_mlp = 0, start_qk = 0, start_v = 0, start_final = 0;
    int64_t gap_mlp = 1, gap_qk = 1, gap_v = 1;

    void validate() const {
        if (n_layers < 1) throw ConfigError("schedule: n_layers must be >= 1");
        if (start_mlp < 0) throw ConfigError("schedule: start_ln_mlp must be >= 0");
        if (gap_mlp < 1 || gap_qk < 1 || gap_v < 1) {
            throw ConfigError("schedule: gaps must be >= 1");
        }
        const int64_t last = n_layers - 1;
        if (start_mlp + last * gap_mlp >= start_qk) {
            throw ConfigError("schedule: mlp phase overlaps qk phase (start_ln_mlp + (L-1)*gap_ln_mlp must be < start_ln_qk)");
        }
        if (start_qk + last * gap_qk >= start_v) {
            throw ConfigError("schedule: qk phase overlaps v phase (start_ln_qk + (L-1)*gap_ln_qk must be < start_ln_v)");
        }
        if (start_v + last * gap_v >= start_final) {
            throw ConfigError("schedule: v phase overlaps final event (start_ln_v + (L-1)*gap_ln_v must be < start_ln_f)");
        }
    }
};

struct RemovalEvent {
    int64_t step;
    NormSite site;
};

struct RemovalSchedule {
    std::vector<RemovalEvent> events;  // strictly increasing steps

    bool empty() const { return events.empty(); }
    int64_t last_step() const { return events.empty() ? -1 : events.back().step; }

    std::vector<NormSite> due_removals(int64_t step) const {
        std::vector<NormSite> out;
        for (const auto& e : events) {
            if (e.step == step) out.push_back(e.site);
        }
        return out;
    }
};

inline RemovalSchedule build_schedule(const ScheduleConfig& c) {
    c.validate();
    RemovalSchedule s;
    for (int l = 0; l < c.n_layers; ++l) s.events.push_back({c.start_mlp + l * c.gap_mlp, NormSite::mlp(l)});
    for (int l = 0; l < c.n_layers; ++l) s.events.push_back({c.start_qk + l * c.gap_qk, NormSite::qk(l)});
    for (int l = 0; l < c.n_layers; ++l) s.events.push_back({c.start_v + l * c.gap_v, NormSite::v(l)});
    s.events.push_back({c.start_final, NormSite::final()});
    return s;
}

inline std::string schedule_csv(const RemovalSchedule& s) {
    std::ostringstream os;
    os << "step,kind,layer\n";
    for (const auto& e : s.events) {
        os << e.step << "," << site_kind_name(e.site.kind) << ",";
        if (e.site.kind != SiteKind::final) os << e.site.layer;
        os << "\n";
    }
    return os.str();
}

// Tracks the running sigma_avg per site. per_batch mode keeps the latest
// batch value; ema mode applies an exponential moving average (first update
// just seeds the estimate).
class SigmaEstimator {
public:
    enum class Mode { per_batch, ema };

    explicit SigmaEstimator(Mode mode = Mode::per_batch, double ema_alpha = 0.9)
        : mode_(mode), alpha_(ema_alpha) {
        if (mode == Mode::ema && !(ema_alpha > 0.0 && ema_alpha < 1.0)) {
            throw ConfigError("sigma estimator: ema alpha must be in (0, 1)");
        }
    }

    Mode mode() const { return mode_; }

    void update(const NormSite& site, double sigma_avg) {
        if (!(sigma_avg > 0.0)) throw InputError("sigma estimator: sigma_avg must be positive");
        const std::string key = site.name();
        if (removed_.count(key)) {
            throw ProtocolError("sigma estimator: site " + key + " was already removed");
        }
        auto it = estimates_.find(key);
        if (it == estimates_.end() || mode_ == Mode::per_batch) {
            estimates_[key] = sigma_avg;
        } else {
            it->second = alpha_ * it->second + (1.0 - alpha_) * sigma_avg;
        }
    }

    bool has(const NormSite& site) const { return estimates_.count(site.name()) > 0; }

    double estimate(const NormSite& site) const {
        auto it = estimates_.find(site.name());
        if (it == estimates_.end()) {
            throw ProtocolError("sigma estimator: no estimate for site " + site.name());
        }
        return it->second;
    }

    void mark_removed(const NormSite& site) { removed_.insert(site.name()); }

private:
    Mode mode_;
    double alpha_;
    std::map<std::string, double> estimates_;
    std::set<std::string> removed_;
};

// Freeze one site: the estimator's current value becomes the site's fixed
// sigma_bar and the estimator stops accepting updates for it.
inline void execute_removal(NormModeMap& modes, const NormSite& site, SigmaEstimator& estimator) {
    if (!estimator.has(site)) {
        throw ProtocolError("execute_removal: estimator has no sigma estimate for site " + site.name());
    }
    modes.set_norm_mode(site, estimator.estimate(site));
    estimator.mark_removed(site);
}

}  // namespace lnfree
