// SPDX-License-Identifier: Apache-2.0
//
// Batch experiment driver for the keyword-spotting accelerator simulator.
// Each subcommand reads one structured-text config, runs a pipeline stage,
// and writes delimiter-separated reports plus a run manifest (config
// snapshot, effective seed, output content hashes) into --out, so any run
// can be repeated and compared byte for byte. Failures exit nonzero after
// printing a single machine-readable record: "error\t<message>".

#include <CLI11.hpp>

#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <string>
#include <thread>
#include <vector>

#include "kwsim/checkpoint.hpp"
#include "kwsim/compensate.hpp"
#include "kwsim/config.hpp"
#include "kwsim/dataio.hpp"
#include "kwsim/fixtures.hpp"
#include "kwsim/imcsim.hpp"
#include "kwsim/model.hpp"
#include "kwsim/report.hpp"
#include "kwsim/train_offline.hpp"
#include "kwsim/trainer.hpp"

namespace fs = std::filesystem;
using namespace kwsim;

namespace {

// ===== Shared plumbing ======================================================

struct CommonArgs {
    std::string config;
    std::string out;
    std::string model;
    int64_t seed = -1; // < 0: keep the seed from the config
};

ExperimentConfig load_config(const std::string& path) {
    return path.empty() ? ExperimentConfig{} : ExperimentConfig::load(path);
}

uint64_t pick_seed(int64_t flag, uint64_t config_value) {
    return flag < 0 ? config_value : uint64_t(flag);
}

Dataset load_corpus(const ExperimentConfig& cfg) {
    if (cfg.data.root.empty())
        throw ConfigError("data.root must point at the keyword corpus");
    return load_gscd(cfg.data.root, cfg.data.keywords, cfg.data.split_seed,
                     cfg.arch.sample_rate);
}

Dataset load_personal(const ExperimentConfig& cfg) {
    if (cfg.data.personal_root.empty())
        throw ConfigError("data.personal_root must point at the per-speaker corpus");
    return build_personal_split(cfg.data.personal_root, cfg.data.keywords,
                                cfg.data.train_per_cell, cfg.data.split_seed,
                                cfg.arch.sample_rate);
}

Backend backend_from_string(const std::string& s) {
    if (s == "digital") return Backend::digital;
    if (s == "imc") return Backend::imc;
    throw ConfigError("unknown backend '" + s + "' (use digital or imc)");
}

bool bool_from_string(const std::string& raw) {
    const std::string v = detail::lower(raw);
    if (v == "true" || v == "yes" || v == "on" || v == "1") return true;
    if (v == "false" || v == "no" || v == "off" || v == "0") return false;
    throw ConfigError("'" + raw + "' is not a boolean");
}

// --toggles "scaling=off,sga=off,rgp=on,rgp_lambda=8,train_bias=false"
void apply_toggles(CustomizeConfig& c, const std::string& toggles) {
    size_t start = 0;
    while (start < toggles.size()) {
        const size_t comma = toggles.find(',', start);
        const size_t end = comma == std::string::npos ? toggles.size() : comma;
        const std::string item = detail::trim(std::string_view(toggles).substr(start, end - start));
        start = end + 1;
        if (item.empty()) continue;
        const size_t eq = item.find('=');
        if (eq == std::string::npos)
            throw ConfigError("toggle '" + item + "' must look like key=value");
        const std::string key = detail::trim(std::string_view(item).substr(0, eq));
        const std::string val = detail::trim(std::string_view(item).substr(eq + 1));
        if (key == "scaling")
            c.scaling = scaling_from_string(val);
        else if (key == "sga")
            c.sga = bool_from_string(val);
        else if (key == "rgp")
            c.rgp = bool_from_string(val);
        else if (key == "rgp_lambda")
            c.rgp_lambda = std::stod(val);
        else if (key == "train_bias")
            c.train_bias = bool_from_string(val);
        else
            throw ConfigError("unknown toggle '" + key + "'");
    }
}

RunManifest make_manifest(const char* command, uint64_t seed, const ExperimentConfig& cfg) {
    RunManifest m;
    m.command = command;
    m.seed = seed;
    m.config_snapshot = cfg.snapshot();
    return m;
}

void finish_run(const fs::path& out, const RunManifest& man) {
    write_text_file(out / "manifest.txt", man.text());
    std::cout << man.command << ": wrote " << (out / "manifest.txt").string() << "\n";
}

// Save a checkpoint (plus its text sidecar) and record both in the manifest.
void record_checkpoint(const fs::path& out, const std::string& name, const ModelSpec& m,
                       RunManifest& man) {
    fs::create_directories(out);
    save_checkpoint(m, out / name);
    man.record(name, read_text_file(out / name));
    man.record(name + ".txt", read_text_file(out / (name + ".txt")));
}

std::string stages_tsv(const std::vector<StageAccuracy>& stages) {
    Table t;
    t.header = {"stage", "correct", "total", "accuracy"};
    for (const StageAccuracy& s : stages)
        t.add_row({s.stage, std::to_string(s.correct), std::to_string(s.total),
                   format_fixed(s.accuracy)});
    return t.tsv();
}

std::string predictions_tsv(const Dataset& ds, const std::vector<Utterance>& utts,
                            const EvalResult& r) {
    Table t;
    t.header = {"path", "expected", "predicted", "hit"};
    for (size_t i = 0; i < utts.size(); ++i)
        t.add_row({utts[i].path, ds.keywords[size_t(r.expected[i])],
                   ds.keywords[size_t(r.predicted[i])],
                   r.predicted[i] == r.expected[i] ? "1" : "0"});
    return t.tsv();
}

// ===== Subcommands ==========================================================

void cmd_train(const CommonArgs& a) {
    ExperimentConfig cfg = load_config(a.config);
    cfg.train.seed = pick_seed(a.seed, cfg.train.seed);
    const Dataset ds = load_corpus(cfg);
    const TrainResult tr = train_offline(ds, cfg.arch, cfg.train);

    RunManifest man = make_manifest("train", cfg.train.seed, cfg);
    Table trace;
    trace.header = {"epoch", "lr", "loss", "accuracy"};
    for (const EpochStats& e : tr.trace)
        trace.add_row({std::to_string(e.epoch), detail::format_double(e.lr),
                       format_fixed(e.loss), format_fixed(e.accuracy)});
    const ParamCount pc = count_params(tr.model);
    Table params;
    params.header = {"name", "value"};
    params.add_row({"deploy", std::to_string(pc.deploy())});
    params.add_row({"train", std::to_string(pc.train())});
    params.add_row({"classifier", std::to_string(pc.classifier)});
    params.add_row({"block_weights", std::to_string(pc.block_weights)});

    const fs::path out(a.out);
    emit_report(out, "train_trace.tsv", trace.tsv(), man);
    emit_report(out, "params.tsv", params.tsv(), man);
    emit_report(out, "dataset.txt", dataset_manifest(ds), man);
    record_checkpoint(out, "model.ckpt", tr.model, man);
    finish_run(out, man);
    if (!tr.trace.empty())
        std::cout << "train: final epoch accuracy " << format_fixed(tr.trace.back().accuracy)
                  << " over " << ds.train.size() << " utterances\n";
}

void cmd_eval(const CommonArgs& a, const std::string& backend, const std::string& split) {
    ExperimentConfig cfg = load_config(a.config);
    cfg.noise.seed = pick_seed(a.seed, cfg.noise.seed);
    const Dataset ds = load_corpus(cfg);
    const ModelSpec m = load_checkpoint(a.model);

    const std::vector<Utterance>& utts = split == "train" ? ds.train : ds.test;
    ForwardOptions opt;
    opt.backend = backend_from_string(backend);
    opt.noise = cfg.noise;
    const EvalResult r = evaluate(m, utts, ds, opt);

    RunManifest man = make_manifest("eval", cfg.noise.seed, cfg);
    Table metrics;
    metrics.header = {"backend", "split", "correct", "total", "accuracy"};
    metrics.add_row({backend, split, std::to_string(r.correct), std::to_string(r.total),
                     format_fixed(r.accuracy())});
    const fs::path out(a.out);
    emit_report(out, "metrics.tsv", metrics.tsv(), man);
    emit_report(out, "predictions.tsv", predictions_tsv(ds, utts, r), man);
    finish_run(out, man);
    std::cout << "eval: " << r.correct << "/" << r.total << " (" << format_fixed(r.accuracy())
              << ") on " << split << " via " << backend << "\n";
}

void cmd_constrain(const CommonArgs& a) {
    ExperimentConfig cfg = load_config(a.config);
    const Dataset ds = load_corpus(cfg);
    const ModelSpec m = load_checkpoint(a.model);

    // Selection sweep: constrain with each method and score the training
    // split digitally (bit-equivalent to the noise-free array).
    Table sweep;
    sweep.header = {"method", "correct", "total", "accuracy", "chosen"};
    const BiasMapMethod picked = select_mapping(m, ds.train, ds);
    for (BiasMapMethod method : {BiasMapMethod::add, BiasMapMethod::absolute_add,
                                 BiasMapMethod::sub, BiasMapMethod::absolute_sub}) {
        const EvalResult r = evaluate(constrain(m, method), ds.train, ds);
        sweep.add_row({to_string(method), std::to_string(r.correct), std::to_string(r.total),
                       format_fixed(r.accuracy()), method == picked ? "1" : "0"});
    }
    const ModelSpec constrained_model = constrain(m, picked);

    std::vector<StageAccuracy> stages;
    const EvalResult rq = evaluate(m, ds.test, ds);
    stages.push_back({"quantized", rq.correct, rq.total, rq.accuracy()});
    const EvalResult rc = evaluate(constrained_model, ds.test, ds);
    stages.push_back({"constrained", rc.correct, rc.total, rc.accuracy()});

    RunManifest man = make_manifest("constrain", cfg.data.split_seed, cfg);
    const fs::path out(a.out);
    emit_report(out, "mapping.tsv", sweep.tsv(), man);
    emit_report(out, "stages.tsv", stages_tsv(stages), man);
    record_checkpoint(out, "constrained.ckpt", constrained_model, man);
    finish_run(out, man);
    std::cout << "constrain: picked " << to_string(picked) << ", test accuracy "
              << format_fixed(rc.accuracy()) << "\n";
}

void cmd_inject(const CommonArgs& a, int seeds) {
    if (seeds < 1) throw ConfigError("--seeds must be at least 1");
    ExperimentConfig cfg = load_config(a.config);
    cfg.noise.seed = pick_seed(a.seed, cfg.noise.seed);
    const Dataset ds = load_corpus(cfg);
    const ModelSpec m = load_checkpoint(a.model);

    // Monte Carlo across independent array instances: seed s programs its own
    // static offsets and read-noise streams. Evaluations run in parallel.
    std::vector<EvalResult> results(static_cast<size_t>(seeds));
    std::atomic<int> next{0};
    const unsigned workers =
        std::min<unsigned>(unsigned(seeds), std::max(1u, std::thread::hardware_concurrency()));
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (unsigned w = 0; w < workers; ++w) {
        pool.emplace_back([&] {
            for (int i = next.fetch_add(1); i < seeds; i = next.fetch_add(1)) {
                ForwardOptions opt;
                opt.backend = Backend::imc;
                opt.noise = cfg.noise;
                opt.noise.seed = cfg.noise.seed + uint64_t(i);
                results[size_t(i)] = evaluate(m, ds.test, ds, opt);
            }
        });
    }
    for (auto& t : pool) t.join();

    Table rows;
    rows.header = {"run", "noise_seed", "correct", "total", "accuracy"};
    double mean = 0.0;
    for (int i = 0; i < seeds; ++i) {
        const EvalResult& r = results[size_t(i)];
        rows.add_row({std::to_string(i), std::to_string(cfg.noise.seed + uint64_t(i)),
                      std::to_string(r.correct), std::to_string(r.total),
                      format_fixed(r.accuracy())});
        mean += r.accuracy();
    }
    mean /= double(seeds);
    double var = 0.0;
    for (const EvalResult& r : results) {
        const double d = r.accuracy() - mean;
        var += d * d;
    }
    const double sd = seeds > 1 ? std::sqrt(var / double(seeds - 1)) : 0.0;
    Table stats;
    stats.header = {"metric", "value"};
    stats.add_row({"runs", std::to_string(seeds)});
    stats.add_row({"mean_accuracy", format_fixed(mean)});
    stats.add_row({"std_accuracy", format_fixed(sd)});

    RunManifest man = make_manifest("inject", cfg.noise.seed, cfg);
    const fs::path out(a.out);
    emit_report(out, "injections.tsv", rows.tsv(), man);
    emit_report(out, "stats.tsv", stats.tsv(), man);
    finish_run(out, man);
    std::cout << "inject: mean accuracy " << format_fixed(mean) << " +/- " << format_fixed(sd)
              << " over " << seeds << " array instances\n";
}

void cmd_compensate(const CommonArgs& a) {
    ExperimentConfig cfg = load_config(a.config);
    cfg.compensate.seed = pick_seed(a.seed, cfg.compensate.seed);
    const Dataset ds = load_corpus(cfg);
    const ModelSpec m = load_checkpoint(a.model);

    const CompensationResult r = compensate_and_finetune(m, cfg.noise, ds, cfg.compensate);

    Table deltas;
    deltas.header = {"block", "channel", "delta"};
    for (size_t b = 0; b < r.deltas.size(); ++b)
        for (size_t c = 0; c < r.deltas[b].size(); ++c)
            deltas.add_row({std::to_string(b), std::to_string(c),
                            std::to_string(r.deltas[b][c])});
    Table outcome;
    outcome.header = {"key", "value"};
    outcome.add_row({"clamped", std::to_string(r.clamped)});
    outcome.add_row({"range_exceeded", r.range_exceeded ? "1" : "0"});
    outcome.add_row({"finetune_kept", r.finetune_kept ? "1" : "0"});

    RunManifest man = make_manifest("compensate", cfg.compensate.seed, cfg);
    const fs::path out(a.out);
    emit_report(out, "stages.tsv", stages_tsv(r.stages), man);
    emit_report(out, "deltas.tsv", deltas.tsv(), man);
    emit_report(out, "outcome.tsv", outcome.tsv(), man);
    record_checkpoint(out, "compensated.ckpt", r.model, man);
    finish_run(out, man);
    for (const StageAccuracy& s : r.stages)
        std::cout << "compensate: " << s.stage << " " << format_fixed(s.accuracy) << "\n";
}

void cmd_customize(const CommonArgs& a, const std::string& toggles) {
    ExperimentConfig cfg = load_config(a.config);
    cfg.customize.seed = pick_seed(a.seed, cfg.customize.seed);
    apply_toggles(cfg.customize, toggles);
    const Dataset ds = load_personal(cfg);
    ModelSpec m = load_checkpoint(a.model);

    // Record the speaker's utterances through the (possibly noisy) array into
    // the feature buffer, exactly as the chip would capture them.
    ForwardOptions feat;
    feat.backend = Backend::imc;
    feat.noise = cfg.noise;
    FeatureBuffer buf(cfg.buffer_capacity);
    const size_t take = std::min(static_cast<size_t>(cfg.buffer_capacity), ds.train.size());
    for (size_t i = 0; i < take; ++i) {
        const int label = ds.label_of(ds.train[i].label);
        if (label < 0)
            throw ConfigError("utterance label '" + ds.train[i].label +
                              "' is not in data.keywords");
        feat.sample_key = uint64_t(i);
        buf.push(forward_features(m, to_8bit(ds.train[i]), feat), label);
    }

    ForwardOptions evalopt;
    evalopt.backend = Backend::imc;
    evalopt.noise = cfg.noise;
    std::vector<StageAccuracy> stages;
    const EvalResult before = evaluate(m, ds.test, ds, evalopt);
    stages.push_back({"before", before.correct, before.total, before.accuracy()});

    TrainerState st = TrainerState::from_model(m);
    const std::vector<EpochRecord> trace = customize(st, buf, cfg.customize);
    st.apply_to_model(m);
    const EvalResult after = evaluate(m, ds.test, ds, evalopt);
    stages.push_back({"after", after.correct, after.total, after.accuracy()});

    Table t;
    t.header = {"epoch",           "lr_exponent", "loss_proxy_raw", "correct",
                "samples",         "nonzero_updates", "rgp_agree",  "rgp_total"};
    for (const EpochRecord& e : trace)
        t.add_row({std::to_string(e.epoch), std::to_string(e.lr_exponent),
                   std::to_string(e.loss_proxy_raw), std::to_string(e.correct),
                   std::to_string(e.samples), std::to_string(e.nonzero_updates),
                   std::to_string(e.rgp_agree), std::to_string(e.rgp_total)});

    RunManifest man = make_manifest("customize", cfg.customize.seed, cfg);
    const fs::path out(a.out);
    emit_report(out, "trace.tsv", t.tsv(), man);
    emit_report(out, "stages.tsv", stages_tsv(stages), man);
    emit_report(out, "dataset.txt", dataset_manifest(ds), man);
    record_checkpoint(out, "customized.ckpt", m, man);
    finish_run(out, man);
    std::cout << "customize: accuracy " << format_fixed(before.accuracy()) << " -> "
              << format_fixed(after.accuracy()) << " on " << ds.test.size()
              << " held-out utterances\n";
}

void cmd_testmode(const CommonArgs& a, int block, int patterns) {
    ExperimentConfig cfg = load_config(a.config);
    cfg.noise.seed = pick_seed(a.seed, cfg.noise.seed);
    const ModelSpec m = load_checkpoint(a.model);
    if (block < 0 || size_t(block) >= m.blocks.size())
        throw ConfigError("--block out of range for this model");
    if (patterns < 1) throw ConfigError("--patterns must be at least 1");

    const ConvBlockSpec& blk = m.blocks[size_t(block)];
    const auto macros = detail::load_block_macros(blk, block + 1, cfg.noise);
    const auto pats = make_test_patterns(blk.weights.cols(), patterns, cfg.noise.seed);
    const int opg = blk.out_channels / blk.groups;
    const int mpg = detail::macros_per_group(blk);

    Table t;
    t.header = {"macro",         "bank",        "channel",         "patterns",
                "disagreements", "mean_margin", "estimated_offset"};
    for (size_t mi = 0; mi < macros.size(); ++mi) {
        RngStream reads = RngStream::derive(cfg.noise.seed, {0x746d6f64ull, uint64_t(mi)});
        for (const BankVariation& v : test_mode(macros[mi], pats, cfg.noise, reads)) {
            const int g = int(mi) / mpg;
            const int oc = g * opg + (int(mi) % mpg) * ImcMacro::kBanks + v.bank;
            t.add_row({std::to_string(mi), std::to_string(v.bank), std::to_string(oc),
                       std::to_string(v.patterns), std::to_string(v.disagreements),
                       format_fixed(v.mean_margin), format_fixed(v.estimated_offset)});
        }
    }

    RunManifest man = make_manifest("testmode", cfg.noise.seed, cfg);
    const fs::path out(a.out);
    emit_report(out, "testmode.tsv", t.tsv(), man);
    finish_run(out, man);
    std::cout << "testmode: characterized block " << block << " over " << patterns
              << " patterns\n";
}

void cmd_fixtures(const CommonArgs& a, int files_per_keyword, int speakers, int files_per_cell) {
    ExperimentConfig cfg = load_config(a.config);
    FixtureConfig fc;
    fc.keywords = cfg.data.keywords;
    fc.rate = cfg.arch.sample_rate;
    fc.seed = pick_seed(a.seed, fc.seed);
    fc.files_per_keyword = files_per_keyword;
    fc.speakers = speakers;
    fc.files_per_cell = files_per_cell;

    const fs::path out(a.out);
    fc.root = out / "speech";
    generate_gscd_fixture(fc);
    fc.root = out / "personal";
    generate_personal_fixture(fc);

    // Hash every generated file so a rerun is verifiable from the manifest.
    RunManifest man = make_manifest("fixtures", fc.seed, cfg);
    std::vector<fs::path> files;
    for (const char* sub : {"speech", "personal"})
        for (const auto& e : fs::recursive_directory_iterator(out / sub))
            if (e.is_regular_file()) files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const fs::path& f : files)
        man.record(fs::relative(f, out).generic_string(), read_text_file(f));
    finish_run(out, man);
    std::cout << "fixtures: " << files.size() << " files under " << out.string() << "\n";
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"keyword-spotting accelerator simulation driver"};
    app.require_subcommand(1);

    CommonArgs a;
    std::string backend = "digital";
    std::string split = "test";
    std::string toggles;
    int seeds = 5;
    int block = 0;
    int patterns = 10000;
    int files_per_keyword = 20;
    int speakers = 3;
    int files_per_cell = 4;

    auto add_common = [&](CLI::App* cmd, bool needs_model) {
        cmd->add_option("--config", a.config, "structured-text config file");
        cmd->add_option("--out", a.out, "output directory for reports")->required();
        cmd->add_option("--seed", a.seed, "override this command's seed");
        if (needs_model)
            cmd->add_option("--model", a.model, "checkpoint file")->required();
    };

    CLI::App* train = app.add_subcommand("train", "offline training to a checkpoint");
    add_common(train, false);

    CLI::App* eval = app.add_subcommand("eval", "accuracy of a checkpoint on one split");
    add_common(eval, true);
    eval->add_option("--backend", backend, "digital or imc");
    eval->add_option("--split", split, "train or test")
        ->check(CLI::IsMember({"train", "test"}));

    CLI::App* constrain_cmd =
        app.add_subcommand("constrain", "pick a bias mapping and constrain the checkpoint");
    add_common(constrain_cmd, true);

    CLI::App* inject = app.add_subcommand("inject", "noisy accuracy across array instances");
    add_common(inject, true);
    inject->add_option("--seeds", seeds, "number of independent array instances");

    CLI::App* compensate_cmd =
        app.add_subcommand("compensate", "estimate offsets, merge corrections, fine-tune");
    add_common(compensate_cmd, true);

    CLI::App* customize_cmd =
        app.add_subcommand("customize", "on-chip style classifier customization");
    add_common(customize_cmd, true);
    customize_cmd->add_option("--toggles", toggles,
                              "comma list: scaling=off|software|hardware, sga=, rgp=, "
                              "rgp_lambda=, train_bias=");

    CLI::App* testmode_cmd =
        app.add_subcommand("testmode", "known-pattern array characterization");
    add_common(testmode_cmd, true);
    testmode_cmd->add_option("--block", block, "block index to characterize");
    testmode_cmd->add_option("--patterns", patterns, "number of test patterns");

    CLI::App* fixtures_cmd =
        app.add_subcommand("fixtures", "generate the synthetic keyword corpus");
    add_common(fixtures_cmd, false);
    fixtures_cmd->add_option("--files-per-keyword", files_per_keyword,
                             "utterances per keyword in the flat tree");
    fixtures_cmd->add_option("--speakers", speakers, "distinct synthetic speakers");
    fixtures_cmd->add_option("--files-per-cell", files_per_cell,
                             "utterances per (speaker, keyword) in the personal tree");

    try {
        app.parse(argc, argv);
        if (train->parsed()) cmd_train(a);
        if (eval->parsed()) cmd_eval(a, backend, split);
        if (constrain_cmd->parsed()) cmd_constrain(a);
        if (inject->parsed()) cmd_inject(a, seeds);
        if (compensate_cmd->parsed()) cmd_compensate(a);
        if (customize_cmd->parsed()) cmd_customize(a, toggles);
        if (testmode_cmd->parsed()) cmd_testmode(a, block, patterns);
        if (fixtures_cmd->parsed()) cmd_fixtures(a, files_per_keyword, speakers, files_per_cell);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    } catch (const std::exception& e) {
        std::cerr << "error\t" << e.what() << "\n";
        return 1;
    }
    return 0;
}
