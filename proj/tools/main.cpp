// lnfree command-line tool: train with schedule-driven normalization removal,
// reproduce removal schedules, evaluate checkpoints, and run the analysis
// suite. Exit codes: 0 ok, 2 config error, 3 numerical divergence, 4 I/O
// error.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "lnfree/checkpoint.hpp"
#include "lnfree/config.hpp"
#include "lnfree/data.hpp"
#include "lnfree/interp.hpp"
#include "lnfree/model.hpp"
#include "lnfree/schedule.hpp"
#include "lnfree/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitNumerics = 3;
constexpr int kExitIo = 4;

void write_text(const std::string& path, const std::string& content) {
    std::ofstream os(path);
    if (!os) throw lnfree::IoError("cannot open for writing: " + path);
    os << content;
    if (!os) throw lnfree::IoError("write failed: " + path);
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

int cmd_train(const std::string& config_path, int64_t seed_override, const std::string& out_override) {
    using T = float;  // training dtype
    lnfree::RunConfig rc = lnfree::RunConfig::from_file(config_path);
    if (seed_override >= 0) rc.train.seed = static_cast<uint64_t>(seed_override);
    if (!out_override.empty()) rc.out_dir = out_override;
    if (rc.data.train_path.empty()) throw lnfree::ConfigError("config: data.train_path is required for train");

    const lnfree::ByteVocab vocab(rc.train.eot_token_id);
    const lnfree::TokenizedCorpus corpus = lnfree::load_corpus_auto(rc.data.train_path, vocab);

    std::optional<lnfree::ModelState<T>> init;
    if (!rc.init_checkpoint.empty()) {
        auto ckpt = lnfree::load_checkpoint<T>(rc.init_checkpoint);
        if (ckpt.config.n_layers != rc.model.n_layers || ckpt.config.d_model != rc.model.d_model) {
            throw lnfree::ConfigError("init_checkpoint does not match the configured model shape");
        }
        init = lnfree::ModelState<T>{std::move(ckpt.params), std::move(ckpt.modes)};
    }

    fs::create_directories(rc.out_dir);
    const std::string metrics_path = rc.out_dir + "/metrics.jsonl";
    std::ofstream metrics(metrics_path);
    if (!metrics) throw lnfree::IoError("cannot open for writing: " + metrics_path);

    lnfree::Trainer<T> trainer(rc.model, rc.train, rc.removal_schedule(), corpus, rc.data.seq_len,
                               rc.estimator_mode(), rc.ema_alpha, std::move(init));
    try {
        while (trainer.step() < rc.train.max_steps) {
            const lnfree::StepMetrics m = trainer.train_step();
            metrics << lnfree::step_metrics_json(m).dump() << "\n";
            if (rc.checkpoint_interval > 0 && (m.step + 1) % rc.checkpoint_interval == 0 &&
                m.step + 1 < rc.train.max_steps) {
                lnfree::save_checkpoint(rc.out_dir + "/checkpoint_step_" + std::to_string(m.step + 1) + ".bin",
                                        rc.model, trainer.modes(), trainer.params());
            }
        }
    } catch (const lnfree::NumericsError& e) {
        metrics.flush();
        const std::string dump_ckpt = rc.out_dir + "/checkpoint_diverged.bin";
        lnfree::save_checkpoint(dump_ckpt, rc.model, trainer.modes(), trainer.params());
        json dump{{"error", e.what()}, {"step", trainer.step()}, {"checkpoint", dump_ckpt}};
        write_text(rc.out_dir + "/divergence.json", dump.dump(2) + "\n");
        std::cerr << "training diverged: " << e.what() << "\nstate dump: " << rc.out_dir
                  << "/divergence.json" << std::endl;
        return kExitNumerics;
    }
    metrics.flush();

    const std::string final_path = rc.out_dir + "/checkpoint_final.bin";
    lnfree::save_checkpoint(final_path, rc.model, trainer.modes(), trainer.params());

    json summary{{"out_dir", rc.out_dir},
                 {"metrics", metrics_path},
                 {"checkpoint", final_path},
                 {"steps", trainer.step()},
                 {"all_sites_fake", trainer.modes().all_fake()}};
    std::cout << summary.dump(2) << std::endl;
    return kExitOk;
}

// ---------------------------------------------------------------------------
// gen-schedule
// ---------------------------------------------------------------------------

int cmd_gen_schedule(const std::string& config_path) {
    const lnfree::RunConfig rc = lnfree::RunConfig::from_file(config_path);
    if (!rc.has_schedule) throw lnfree::ConfigError("config: schedule section is required for gen-schedule");
    std::cout << lnfree::schedule_csv(lnfree::build_schedule(rc.schedule));
    return kExitOk;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

int cmd_eval(const std::string& ckpt_path, const std::string& dataset_path, int64_t seq_len,
             int32_t eot_id, int64_t batch_size, int64_t max_blocks) {
    using T = double;  // analysis dtype
    auto ckpt = lnfree::load_checkpoint<T>(ckpt_path);
    const lnfree::ByteVocab vocab(eot_id);
    const lnfree::TokenizedCorpus corpus = lnfree::load_corpus_auto(dataset_path, vocab);
    const lnfree::EvalResult r = lnfree::evaluate(ckpt.params, ckpt.config, ckpt.modes, corpus, eot_id,
                                                  seq_len, batch_size, max_blocks);
    json out{{"ce", r.ce}, {"entropy", r.entropy}, {"ece", r.ece}, {"positions", r.positions}};
    std::cout << out.dump(2) << std::endl;
    return kExitOk;
}

// ---------------------------------------------------------------------------
// analyze
// ---------------------------------------------------------------------------

struct AnalyzeArgs {
    std::string analysis;
    std::vector<std::string> checkpoints;
    std::string dataset;
    std::string reference;
    std::string out_dir = ".";
    double threshold = 0.30;
    int layer = -1;
    int64_t top_k = 10;
    int64_t n_sequences = 64;
    int64_t seq_len = 128;
    int64_t n_prompts = 16;
    int32_t eot_id = lnfree::ByteVocab::kDefaultEot;
    uint64_t seed = 0;
};

using AnalysisModel = lnfree::Checkpoint<double>;

int analyze_dla(const AnalyzeArgs& a, AnalysisModel& m) {
    const lnfree::ByteVocab vocab(a.eot_id);
    const auto corpus = lnfree::load_corpus_auto(a.dataset, vocab);
    const auto rep = lnfree::run_dla_analysis(m.params, m.config, m.modes, corpus, a.seq_len, a.n_sequences);
    json out{{"analysis", "dla"},
             {"nmae", rep.nmae_pct},
             {"n_values", rep.n_values},
             {"mean_abs_de", rep.mean_abs_de},
             {"final_site_fake", m.modes.at(lnfree::NormSite::final()).fake}};
    write_text(a.out_dir + "/dla_report.json", out.dump(2) + "\n");
    std::ostringstream csv;
    csv << "component,nmae\n";
    for (const auto& [name, val] : rep.per_component_nmae) csv << name << "," << val << "\n";
    write_text(a.out_dir + "/dla_per_component.csv", csv.str());
    std::cout << out.dump(2) << std::endl;
    return kExitOk;
}

int analyze_patching(const AnalyzeArgs& a, AnalysisModel& m, AnalysisModel* other) {
    const auto prompts = lnfree::make_name_mover_prompts(static_cast<int>(a.n_prompts), a.seed);

    auto grid_csv = [](const lnfree::PatchGrids& g) {
        std::ostringstream csv;
        csv << "layer,position,activation,attribution\n";
        for (int64_t l = 0; l < g.activation.shape[0]; ++l) {
            for (int64_t p = 0; p < g.activation.shape[1]; ++p) {
                csv << l << "," << p << "," << g.activation.at2(l, p) << "," << g.attribution.at2(l, p) << "\n";
            }
        }
        return csv.str();
    };
    const auto grid = lnfree::patching_grids(m.params, m.config, m.modes, prompts[0].clean,
                                             prompts[0].corrupted, prompts[0].answer_a, prompts[0].answer_b);
    write_text(a.out_dir + "/patching_grid.csv", grid_csv(grid));

    json out{{"analysis", "patching"}, {"n_prompts", a.n_prompts}};
    if (other != nullptr) {
        const auto cmp = lnfree::patching_error_comparison(m.params, m.config, m.modes, other->params,
                                                           other->config, other->modes, prompts);
        out["per_layer_error_a"] = cmp.error_a;
        out["per_layer_error_b"] = cmp.error_b;
        out["per_layer_improvement"] = cmp.improvement;
        out["mean_improvement"] = cmp.mean_improvement;
        out["stddev_improvement"] = cmp.stddev_improvement;
        const auto grid_b = lnfree::patching_grids(other->params, other->config, other->modes,
                                                   prompts[0].clean, prompts[0].corrupted,
                                                   prompts[0].answer_a, prompts[0].answer_b);
        write_text(a.out_dir + "/patching_grid_b.csv", grid_csv(grid_b));
    }
    write_text(a.out_dir + "/patching_report.json", out.dump(2) + "\n");
    std::cout << out.dump(2) << std::endl;
    return kExitOk;
}

int analyze_norms(const AnalyzeArgs& a, AnalysisModel& m) {
    const lnfree::ByteVocab vocab(a.eot_id);
    const auto corpus = lnfree::load_corpus_auto(a.dataset, vocab);
    lnfree::ForwardOptions<double> opts;
    opts.cache = lnfree::CacheOptions::analysis();
    std::vector<std::vector<lnfree::PositionNormStats>> profiles;
    lnfree::for_each_eval_batch(m.params, m.config, m.modes, corpus, a.seq_len, 8, a.n_sequences, opts,
                                [&](const lnfree::ForwardResult<double>& fwd, const lnfree::TensorI&,
                                    const lnfree::TensorI&) { profiles.push_back(lnfree::norm_profile(fwd.cache)); });
    // Average the per-batch stats.
    const size_t n_rows = profiles.empty() ? 0 : profiles[0].size();
    json rows = json::array();
    std::ostringstream csv;
    csv << "layer,first_mean,first_q25,first_q50,first_q75,other_mean,other_q25,other_q50,other_q75\n";
    for (size_t l = 0; l < n_rows; ++l) {
        lnfree::PositionNormStats avg;
        for (const auto& p : profiles) {
            avg.first_mean += p[l].first_mean / profiles.size();
            avg.first_q25 += p[l].first_q25 / profiles.size();
            avg.first_q50 += p[l].first_q50 / profiles.size();
            avg.first_q75 += p[l].first_q75 / profiles.size();
            avg.other_mean += p[l].other_mean / profiles.size();
            avg.other_q25 += p[l].other_q25 / profiles.size();
            avg.other_q50 += p[l].other_q50 / profiles.size();
            avg.other_q75 += p[l].other_q75 / profiles.size();
        }
        const std::string label = l + 1 == n_rows ? "final" : std::to_string(l);
        rows.push_back({{"layer", label},
                        {"first_mean", avg.first_mean},
                        {"first_q25", avg.first_q25},
                        {"first_q50", avg.first_q50},
                        {"first_q75", avg.first_q75},
                        {"other_mean", avg.other_mean},
                        {"other_q25", avg.other_q25},
                        {"other_q50", avg.other_q50},
                        {"other_q75", avg.other_q75}});
        csv << label << "," << avg.first_mean << "," << avg.first_q25 << "," << avg.first_q50 << ","
            << avg.first_q75 << "," << avg.other_mean << "," << avg.other_q25 << "," << avg.other_q50 << ","
            << avg.other_q75 << "\n";
    }
    json out{{"analysis", "norms"}, {"layers", rows}};
    write_text(a.out_dir + "/norms.json", out.dump(2) + "\n");
    write_text(a.out_dir + "/norms.csv", csv.str());
    std::cout << out.dump(2) << std::endl;
    return kExitOk;
}

int analyze_sinks(const AnalyzeArgs& a, AnalysisModel& m) {
    const lnfree::ByteVocab vocab(a.eot_id);
    const auto corpus = lnfree::load_corpus_auto(a.dataset, vocab);
    lnfree::ForwardOptions<double> opts;
    opts.cache.sigma_grids = false;
    opts.cache.attention = true;
    lnfree::SinkRate total;
    lnfree::for_each_eval_batch(m.params, m.config, m.modes, corpus, a.seq_len, 8, a.n_sequences, opts,
                                [&](const lnfree::ForwardResult<double>& fwd, const lnfree::TensorI&,
                                    const lnfree::TensorI&) {
                                    std::vector<lnfree::Tensor<double>> patterns;
                                    for (const auto& lc : fwd.cache.layers) patterns.push_back(lc.attn_pattern);
                                    const auto r = lnfree::sink_rate(patterns, a.threshold);
                                    total.sunk += r.sunk;
                                    total.pairs += r.pairs;
                                });
    total.rate = total.pairs > 0 ? static_cast<double>(total.sunk) / static_cast<double>(total.pairs) : 0.0;
    json out{{"analysis", "sinks"},
             {"threshold", a.threshold},
             {"rate", total.rate},
             {"sunk", total.sunk},
             {"pairs", total.pairs}};
    write_text(a.out_dir + "/sinks.json", out.dump(2) + "\n");
    std::cout << out.dump(2) << std::endl;
    return kExitOk;
}

int analyze_neurons(const AnalyzeArgs& a, AnalysisModel& m) {
    const int layer = a.layer >= 0 ? a.layer : m.config.n_layers - 1;
    const auto stats = lnfree::confidence_neuron_scan(m.params, layer, a.top_k, std::min<int64_t>(m.config.d_model, 32));
    json neurons = json::array();
    for (int64_t i = 0; i < std::min<int64_t>(a.top_k, static_cast<int64_t>(stats.size())); ++i) {
        const auto& st = stats[static_cast<size_t>(i)];
        neurons.push_back({{"index", st.index},
                           {"weight_norm", st.weight_norm},
                           {"logit_var", st.logit_var},
                           {"cn_score", st.cn_score},
                           {"nullspace_cosines", st.nullspace_cosines}});
    }
    json out{{"analysis", "neurons"}, {"layer", layer}, {"top", neurons}};
    if (!a.dataset.empty()) {
        const lnfree::ByteVocab vocab(a.eot_id);
        const auto corpus = lnfree::load_corpus_auto(a.dataset, vocab);
        json ablations = json::array();
        std::vector<int64_t> cumulative;
        for (int64_t i = 0; i < std::min<int64_t>(3, static_cast<int64_t>(stats.size())); ++i) {
            const int64_t idx = stats[static_cast<size_t>(i)].index;
            const auto single = lnfree::mean_ablate(m.params, m.config, m.modes, corpus, a.seq_len, layer,
                                                    {idx}, 8, a.n_sequences);
            cumulative.push_back(idx);
            const auto cum = lnfree::mean_ablate(m.params, m.config, m.modes, corpus, a.seq_len, layer,
                                                 cumulative, 8, a.n_sequences);
            ablations.push_back({{"neuron", idx},
                                 {"delta_ce", single.delta_ce},
                                 {"delta_entropy", single.delta_entropy},
                                 {"cumulative_delta_ce", cum.delta_ce},
                                 {"cumulative_delta_entropy", cum.delta_entropy}});
        }
        out["mean_ablation"] = ablations;
    }
    write_text(a.out_dir + "/neurons.json", out.dump(2) + "\n");
    std::cout << out.dump(2) << std::endl;
    return kExitOk;
}

int analyze_filter_report(const AnalyzeArgs& a) {
    const lnfree::ByteVocab vocab(a.eot_id);
    const auto corpus = lnfree::load_corpus_auto(a.dataset, vocab);
    const auto reference = lnfree::load_corpus_auto(a.reference, vocab);
    std::set<int32_t> present;
    for (const auto& [id, count] : lnfree::token_frequency(reference)) present.insert(id);
    const auto res = lnfree::filter_corpus(corpus, present);
    json entries = json::array();
    for (const auto& e : res.report) {
        entries.push_back({{"token_id", e.token_id},
                           {"token_repr", lnfree::token_repr(e.token_id, a.eot_id)},
                           {"count", e.count}});
    }
    json out{{"analysis", "filter-report"},
             {"docs_dropped", res.docs_dropped},
             {"docs_kept", res.corpus.n_docs()},
             {"offending", entries}};
    write_text(a.out_dir + "/filter_report.json", out.dump(2) + "\n");
    write_text(a.out_dir + "/filter_report.csv", lnfree::filter_report_csv(res.report, a.eot_id));
    std::cout << out.dump(2) << std::endl;
    return kExitOk;
}

int cmd_analyze(const AnalyzeArgs& a) {
    fs::create_directories(a.out_dir);
    if (a.analysis == "filter-report") {
        if (a.dataset.empty() || a.reference.empty()) {
            throw lnfree::ConfigError("analyze filter-report requires --dataset and --reference");
        }
        return analyze_filter_report(a);
    }
    if (a.checkpoints.empty()) throw lnfree::ConfigError("analyze requires --checkpoint");
    AnalysisModel model = lnfree::load_checkpoint<double>(a.checkpoints[0]);
    std::optional<AnalysisModel> other;
    if (a.checkpoints.size() > 1) {
        other = lnfree::load_checkpoint<double>(a.checkpoints[1]);
        if (other->config.n_layers != model.config.n_layers || other->config.d_model != model.config.d_model) {
            throw lnfree::InputError("analyze: checkpoints have mismatched model shapes");
        }
    }
    if (a.analysis == "dla") {
        if (a.dataset.empty()) throw lnfree::ConfigError("analyze dla requires --dataset");
        return analyze_dla(a, model);
    }
    if (a.analysis == "patching") return analyze_patching(a, model, other ? &*other : nullptr);
    if (a.analysis == "norms") {
        if (a.dataset.empty()) throw lnfree::ConfigError("analyze norms requires --dataset");
        return analyze_norms(a, model);
    }
    if (a.analysis == "sinks") {
        if (a.dataset.empty()) throw lnfree::ConfigError("analyze sinks requires --dataset");
        return analyze_sinks(a, model);
    }
    if (a.analysis == "neurons") return analyze_neurons(a, model);
    throw lnfree::ConfigError("unknown analysis: " + a.analysis +
                              " (expected dla|patching|norms|sinks|neurons|filter-report)");
}

// ---------------------------------------------------------------------------
// filter-corpus
// ---------------------------------------------------------------------------

int cmd_filter_corpus(const std::string& input, const std::string& reference, const std::string& output,
                      const std::string& report_path, int32_t eot_id) {
    const lnfree::ByteVocab vocab(eot_id);
    const auto corpus = lnfree::load_corpus_auto(input, vocab);
    const auto ref = lnfree::load_corpus_auto(reference, vocab);
    std::set<int32_t> present;
    for (const auto& [id, count] : lnfree::token_frequency(ref)) present.insert(id);
    const auto res = lnfree::filter_corpus(corpus, present);
    lnfree::save_corpus(res.corpus, output);
    if (!report_path.empty()) write_text(report_path, lnfree::filter_report_csv(res.report, eot_id));
    json out{{"input_docs", corpus.n_docs()},
             {"kept_docs", res.corpus.n_docs()},
             {"docs_dropped", res.docs_dropped},
             {"offending_ids", res.report.size()},
             {"output", output}};
    std::cout << out.dump(2) << std::endl;
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"lnfree: desk-scale transformer training with LayerNorm removal and analysis"};
    app.require_subcommand(1);

    std::string config_path, out_override;
    int64_t seed_override = -1;

    auto* train = app.add_subcommand("train", "run the fine-tuning loop (with optional LN-removal schedule)");
    train->add_option("--config", config_path, "run config JSON")->required();
    train->add_option("--seed", seed_override, "override train.seed");
    train->add_option("--out", out_override, "override output directory");

    auto* gen = app.add_subcommand("gen-schedule", "emit the removal schedule as CSV (step,kind,layer)");
    std::string gen_config;
    gen->add_option("--config", gen_config, "run config JSON")->required();

    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint: mean CE, entropy, ECE");
    std::string eval_ckpt, eval_dataset;
    int64_t eval_seq_len = 128, eval_batch = 8, eval_max_blocks = -1;
    int32_t eval_eot = lnfree::ByteVocab::kDefaultEot;
    eval->add_option("--checkpoint", eval_ckpt, "checkpoint file")->required();
    eval->add_option("--dataset", eval_dataset, "text or token file")->required();
    eval->add_option("--seq-len", eval_seq_len, "evaluation block length");
    eval->add_option("--eot", eval_eot, "end-of-text token id");
    eval->add_option("--batch-size", eval_batch, "evaluation batch size");
    eval->add_option("--max-blocks", eval_max_blocks, "cap on evaluated blocks (-1 = all)");

    auto* analyze = app.add_subcommand("analyze", "interpretability reports (JSON + CSV)");
    AnalyzeArgs aa;
    analyze->add_option("--analysis", aa.analysis, "dla|patching|norms|sinks|neurons|filter-report")->required();
    analyze->add_option("--checkpoint", aa.checkpoints, "checkpoint(s); comparisons take two");
    analyze->add_option("--dataset", aa.dataset, "text or token file");
    analyze->add_option("--reference", aa.reference, "reference corpus (filter-report)");
    analyze->add_option("--out", aa.out_dir, "report directory");
    analyze->add_option("--threshold", aa.threshold, "attention-sink threshold");
    analyze->add_option("--layer", aa.layer, "MLP layer for neuron analyses (-1 = last)");
    analyze->add_option("--top-k", aa.top_k, "neurons to report");
    analyze->add_option("--n-seq", aa.n_sequences, "sequences to analyze");
    analyze->add_option("--seq-len", aa.seq_len, "analysis block length");
    analyze->add_option("--prompts", aa.n_prompts, "patching prompt pairs");
    analyze->add_option("--eot", aa.eot_id, "end-of-text token id");
    analyze->add_option("--seed", aa.seed, "prompt generator seed");

    auto* filter = app.add_subcommand("filter-corpus", "drop documents containing tokens absent from a reference corpus");
    std::string f_input, f_reference, f_output, f_report;
    int32_t f_eot = lnfree::ByteVocab::kDefaultEot;
    filter->add_option("--input", f_input, "corpus to filter")->required();
    filter->add_option("--reference", f_reference, "reference corpus")->required();
    filter->add_option("--output", f_output, "filtered token file")->required();
    filter->add_option("--report", f_report, "offending-token CSV report path");
    filter->add_option("--eot", f_eot, "end-of-text token id");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitConfig;
    }

    try {
        if (*train) return cmd_train(config_path, seed_override, out_override);
        if (*gen) return cmd_gen_schedule(gen_config);
        if (*eval) return cmd_eval(eval_ckpt, eval_dataset, eval_seq_len, eval_eot, eval_batch, eval_max_blocks);
        if (*analyze) return cmd_analyze(aa);
        if (*filter) return cmd_filter_corpus(f_input, f_reference, f_output, f_report, f_eot);
    } catch (const lnfree::NumericsError& e) {
        std::cerr << "numerics error: " << e.what() << std::endl;
        return kExitNumerics;
    } catch (const lnfree::IoError& e) {
        std::cerr << "i/o error: " << e.what() << std::endl;
        return kExitIo;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << std::endl;
        return kExitConfig;
    }
    return kExitConfig;
}
