#include <gtest/gtest.h>

#include "lnfree/schedule.hpp"

using namespace lnfree;

namespace {

ScheduleConfig small_cfg() {
    ScheduleConfig c;
    c.n_layers = 12;
    c.start_mlp = 20;
    c.start_qk = 44;
    c.start_v = 68;
    c.start_final = 104;
    c.gap_mlp = 2;
    c.gap_qk = 2;
    c.gap_v = 3;
    return c;
}

ScheduleConfig row(int layers, int64_t sm, int64_t sq, int64_t sv, int64_t sf, int64_t gm, int64_t gq,
                   int64_t gv) {
    ScheduleConfig c;
    c.n_layers = layers;
    c.start_mlp = sm;
    c.start_qk = sq;
    c.start_v = sv;
    c.start_final = sf;
    c.gap_mlp = gm;
    c.gap_qk = gq;
    c.gap_v = gv;
    return c;
}

}  // namespace

TEST(BuildSchedule, SmallModelEventSteps) {
    const RemovalSchedule s = build_schedule(small_cfg());
    ASSERT_EQ(s.events.size(), 37u);  // 3L+1
    // mlp 20..42 gap 2
    for (int l = 0; l < 12; ++l) {
        EXPECT_EQ(s.events[static_cast<size_t>(l)].step, 20 + 2 * l);
        EXPECT_EQ(s.events[static_cast<size_t>(l)].site.kind, SiteKind::mlp);
        EXPECT_EQ(s.events[static_cast<size_t>(l)].site.layer, l);
    }
    // qk 44..66 gap 2
    for (int l = 0; l < 12; ++l) {
        EXPECT_EQ(s.events[static_cast<size_t>(12 + l)].step, 44 + 2 * l);
        EXPECT_EQ(s.events[static_cast<size_t>(12 + l)].site.kind, SiteKind::qk);
    }
    // v 68,71,...,101 gap 3
    for (int l = 0; l < 12; ++l) {
        EXPECT_EQ(s.events[static_cast<size_t>(24 + l)].step, 68 + 3 * l);
        EXPECT_EQ(s.events[static_cast<size_t>(24 + l)].site.kind, SiteKind::v);
    }
    EXPECT_EQ(s.events.back().step, 104);
    EXPECT_EQ(s.events.back().site.kind, SiteKind::final);
}

TEST(BuildSchedule, PublishedRowsLandOnExpectedLastSteps) {
    struct Expect {
        ScheduleConfig cfg;
        int64_t last_mlp, last_qk, last_v, fin;
    };
    const std::vector<Expect> rows = {
        {row(12, 20, 44, 68, 104, 2, 2, 3), 42, 66, 101, 104},
        {row(24, 20, 68, 116, 188, 2, 2, 3), 66, 114, 185, 188},
        {row(36, 30, 174, 318, 534, 4, 4, 6), 170, 314, 528, 534},
        {row(48, 50, 242, 434, 722, 4, 4, 6), 238, 430, 716, 722},
    };
    for (const auto& e : rows) {
        const RemovalSchedule s = build_schedule(e.cfg);
        const int L = e.cfg.n_layers;
        ASSERT_EQ(static_cast<int>(s.events.size()), 3 * L + 1);
        EXPECT_EQ(s.events[static_cast<size_t>(L - 1)].step, e.last_mlp);
        EXPECT_EQ(s.events[static_cast<size_t>(2 * L - 1)].step, e.last_qk);
        EXPECT_EQ(s.events[static_cast<size_t>(3 * L - 1)].step, e.last_v);
        EXPECT_EQ(s.events.back().step, e.fin);
    }
}

TEST(BuildSchedule, DegenerateSingleLayer) {
    const RemovalSchedule s = build_schedule(row(1, 1, 2, 3, 4, 1, 1, 1));
    ASSERT_EQ(s.events.size(), 4u);
    EXPECT_EQ(s.events[0].step, 1);
    EXPECT_EQ(s.events[0].site.name(), "mlp0");
    EXPECT_EQ(s.events[1].step, 2);
    EXPECT_EQ(s.events[1].site.name(), "qk0");
    EXPECT_EQ(s.events[2].step, 3);
    EXPECT_EQ(s.events[2].site.name(), "v0");
    EXPECT_EQ(s.events[3].step, 4);
    EXPECT_EQ(s.events[3].site.name(), "final");
}

TEST(BuildSchedule, OverlappingPhasesRejected) {
    auto c = small_cfg();
    c.start_qk = 42;  // collides with the last mlp removal
    EXPECT_THROW(build_schedule(c), ConfigError);
    c = small_cfg();
    c.start_final = 101;
    EXPECT_THROW(build_schedule(c), ConfigError);
}

TEST(BuildSchedule, StrictlyIncreasingAndPhaseOrderedForRandomConfigs) {
    Rng rng(2024);
    for (int rep = 0; rep < 50; ++rep) {
        const int L = 1 + static_cast<int>(rng.below(8));
        ScheduleConfig c;
        c.n_layers = L;
        c.gap_mlp = 1 + static_cast<int64_t>(rng.below(4));
        c.gap_qk = 1 + static_cast<int64_t>(rng.below(4));
        c.gap_v = 1 + static_cast<int64_t>(rng.below(4));
        c.start_mlp = 1 + static_cast<int64_t>(rng.below(10));
        c.start_qk = c.start_mlp + (L - 1) * c.gap_mlp + 1 + static_cast<int64_t>(rng.below(5));
        c.start_v = c.start_qk + (L - 1) * c.gap_qk + 1 + static_cast<int64_t>(rng.below(5));
        c.start_final = c.start_v + (L - 1) * c.gap_v + 1 + static_cast<int64_t>(rng.below(5));
        const RemovalSchedule s = build_schedule(c);
        ASSERT_EQ(static_cast<int>(s.events.size()), 3 * L + 1);
        for (size_t i = 1; i < s.events.size(); ++i) {
            EXPECT_GT(s.events[i].step, s.events[i - 1].step);
        }
        // phase order: all mlp, then all qk, then all v, then final
        for (int l = 0; l < L; ++l) {
            EXPECT_EQ(s.events[static_cast<size_t>(l)].site.kind, SiteKind::mlp);
            EXPECT_EQ(s.events[static_cast<size_t>(L + l)].site.kind, SiteKind::qk);
            EXPECT_EQ(s.events[static_cast<size_t>(2 * L + l)].site.kind, SiteKind::v);
            EXPECT_EQ(s.events[static_cast<size_t>(l)].site.layer, l);
        }
        EXPECT_EQ(s.events.back().site.kind, SiteKind::final);
    }
}

TEST(DueRemovals, LookupByStep) {
    const RemovalSchedule s = build_schedule(small_cfg());
    EXPECT_TRUE(s.due_removals(21).empty());
    const auto at20 = s.due_removals(20);
    ASSERT_EQ(at20.size(), 1u);
    EXPECT_EQ(at20[0].name(), "mlp0");
    const auto at104 = s.due_removals(104);
    ASSERT_EQ(at104.size(), 1u);
    EXPECT_EQ(at104[0].kind, SiteKind::final);
}

TEST(ScheduleCsv, Format) {
    const RemovalSchedule s = build_schedule(row(1, 1, 2, 3, 4, 1, 1, 1));
    EXPECT_EQ(schedule_csv(s), "step,kind,layer\n1,mlp,0\n2,qk,0\n3,v,0\n4,final,\n");
}

TEST(SigmaEstimator, PerBatchKeepsLastValue) {
    SigmaEstimator e(SigmaEstimator::Mode::per_batch);
    e.update(NormSite::mlp(0), 2.0);
    e.update(NormSite::mlp(0), 3.0);
    EXPECT_DOUBLE_EQ(e.estimate(NormSite::mlp(0)), 3.0);
}

TEST(SigmaEstimator, EmaBlendsAndSeedsOnFirstUpdate) {
    SigmaEstimator e(SigmaEstimator::Mode::ema, 0.5);
    e.update(NormSite::v(1), 2.0);
    e.update(NormSite::v(1), 4.0);
    EXPECT_DOUBLE_EQ(e.estimate(NormSite::v(1)), 3.0);

    SigmaEstimator f(SigmaEstimator::Mode::ema, 0.5);
    f.update(NormSite::qk(0), 5.0);
    EXPECT_DOUBLE_EQ(f.estimate(NormSite::qk(0)), 5.0);
}

TEST(SigmaEstimator, Contracts) {
    SigmaEstimator e(SigmaEstimator::Mode::per_batch);
    EXPECT_THROW(e.update(NormSite::mlp(0), 0.0), InputError);
    EXPECT_THROW(e.estimate(NormSite::mlp(0)), ProtocolError);
    EXPECT_THROW(SigmaEstimator(SigmaEstimator::Mode::ema, 1.5), ConfigError);
}

TEST(ExecuteRemoval, FreezesEstimatorValue) {
    NormModeMap modes(1);
    SigmaEstimator e(SigmaEstimator::Mode::per_batch);
    e.update(NormSite::mlp(0), 2.5);
    execute_removal(modes, NormSite::mlp(0), e);
    EXPECT_TRUE(modes.at(NormSite::mlp(0)).fake);
    EXPECT_DOUBLE_EQ(modes.at(NormSite::mlp(0)).frozen_sigma, 2.5);
    // The site stops receiving updates after removal.
    EXPECT_THROW(e.update(NormSite::mlp(0), 9.0), ProtocolError);
}

TEST(ExecuteRemoval, MissingEstimateIsProtocolError) {
    NormModeMap modes(1);
    SigmaEstimator e(SigmaEstimator::Mode::per_batch);
    EXPECT_THROW(execute_removal(modes, NormSite::v(0), e), ProtocolError);
}
