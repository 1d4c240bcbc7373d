// adares: featurize, gradcheck, train, eval and bench from the command line.
//
// Exit codes: 0 ok, 1 check or metric failure, 2 I/O error, 3 usage error.

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "adares/checks.hpp"
#include "adares/harness.hpp"

#ifndef ADARES_GIT_DESCRIBE
#define ADARES_GIT_DESCRIBE "unknown"
#endif

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace adares;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitCheck = 1;
constexpr int kExitIo = 2;
constexpr int kExitUsage = 3;

/// A failed check, reported with exit code 1.
struct CheckFailure : Error {
    using Error::Error;
};

struct Options {
    std::string input;
    std::string output_dir = ".";
    double hop_ms = 10.0;
    double window_ms = 25.0;
    std::size_t n_mels = 128;
    std::optional<double> delta;
    std::optional<double> fps_out;
    double lambda = 0.5;
    double epsilon = 1e-4;
    std::string variant = "diffres";
    std::uint64_t seed = 1;
    std::size_t epochs = 10;
    std::size_t batch = 16;
    bool json = false;

    std::string checkpoint;
    std::size_t train_clips = 512;
    std::size_t test_clips = 128;
    std::size_t classes = 4;
    std::string variants = "mel,diffres";
    std::size_t repetitions = 20;
    double seconds = 1.0;
    std::size_t frames = 32;
    std::size_t check_mels = 8;
    std::string corrupt_op;
};

std::string utc_now() {
    const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

dsp::SpectrogramConfig spec_config(const Options& o) {
    dsp::SpectrogramConfig c;
    c.hop_ms = o.hop_ms;
    c.window_length_ms = o.window_ms;
    c.n_mels = o.n_mels;
    c.fft_size = std::max<std::size_t>(c.fft_size, std::bit_ceil(c.window_samples()));
    c.validate();
    return c;
}

/// --delta wins when given; --fps-out maps to 1 - fps_out / fps_in.
double resolve_delta(const Options& o, double fps_in, double fallback) {
    if (o.delta && o.fps_out) throw ConfigError("--delta and --fps-out are mutually exclusive");
    if (o.fps_out) {
        if (!(*o.fps_out > 0 && *o.fps_out <= fps_in)) {
            throw ConfigError("--fps-out must lie in (0, " + harness::fmt(fps_in) + "]");
        }
        return 1.0 - *o.fps_out / fps_in;
    }
    return o.delta.value_or(fallback);
}

DiffResConfig diffres_config(const Options& o, double delta) {
    DiffResConfig c;
    c.delta = delta;
    c.lambda = o.lambda;
    c.epsilon = o.epsilon;
    c.validate();
    return c;
}

json options_json(const Options& o) {
    json j{{"input", o.input},
           {"output_dir", o.output_dir},
           {"hop_ms", o.hop_ms},
           {"window_ms", o.window_ms},
           {"n_mels", o.n_mels},
           {"lambda", o.lambda},
           {"epsilon", o.epsilon},
           {"variant", o.variant},
           {"seed", o.seed},
           {"epochs", o.epochs},
           {"batch", o.batch},
           {"json", o.json},
           {"checkpoint", o.checkpoint},
           {"train_clips", o.train_clips},
           {"test_clips", o.test_clips},
           {"classes", o.classes},
           {"variants", o.variants},
           {"repetitions", o.repetitions},
           {"seconds", o.seconds},
           {"frames", o.frames},
           {"check_mels", o.check_mels}};
    j["delta"] = o.delta ? json(*o.delta) : json(nullptr);
    j["fps_out"] = o.fps_out ? json(*o.fps_out) : json(nullptr);
    return j;
}

class Run {
public:
    Run(std::string command, const Options& o, std::vector<std::string> argv)
        : command_(std::move(command)), dir_(o.output_dir), started_(utc_now()) {
        std::error_code ec;
        fs::create_directories(dir_, ec);
        if (ec) throw IoError("cannot create output directory " + dir_.string() + ": " + ec.message());
        manifest_ = {{"command", command_},
                     {"argv", argv},
                     {"flags", options_json(o)},
                     {"seed", o.seed},
                     {"git_describe", ADARES_GIT_DESCRIBE},
                     {"started_at", started_}};
        if (const char* th = std::getenv("ADARES_THREADS")) manifest_["env"]["ADARES_THREADS"] = th;
    }

    fs::path path(const std::string& name) const { return dir_ / name; }
    json& manifest() { return manifest_; }

    void output(const std::string& name) { manifest_["outputs"].push_back(name); }

    void finish(const std::string& status) {
        manifest_["finished_at"] = utc_now();
        manifest_["status"] = status;
        std::ofstream out(path("manifest.json"));
        if (!out) throw IoError("cannot write " + path("manifest.json").string());
        out << manifest_.dump(2) << "\n";
    }

private:
    std::string command_;
    fs::path dir_;
    std::string started_;
    json manifest_;
};

std::ofstream open_out(const fs::path& p) {
    std::ofstream out(p);
    if (!out) throw IoError("cannot write " + p.string());
    return out;
}

// ---- featurize --------------------------------------------------------------------

int cmd_featurize(const Options& o, Run& run) {
    if (o.input.empty()) throw ConfigError("featurize needs --input");
    const dsp::SpectrogramConfig spec = spec_config(o);
    dsp::Waveform w;
    try {
        w = dsp::load_wav(o.input, spec.sample_rate);
    } catch (const ConfigError& e) {
        throw IoError(e.what());
    }
    const dsp::Spectrogram sp = dsp::mel_spectrogram(w, spec);
    const DiffResConfig cfg = diffres_config(o, resolve_delta(o, sp.fps, 0.5));
    std::mt19937_64 rng(o.seed);
    DiffResLayer layer(rng, cfg, FrameImportanceNet::default_channels(spec.n_mels));
    if (!o.checkpoint.empty()) {
        nn::StateList state;
        layer.collect_state(state);
        io::load_state(o.checkpoint, state, true);
    }
    const WarpedFeature wf = diffres_forward(sp, layer);

    io::write_named(run.path("features.adrs"),
                    {{"mean", wf.mean_channel}, {"max", wf.max_channel}, {"resenc", wf.resolution_encoding}});
    run.output("features.adrs");
    {
        auto out = open_out(run.path("frames.csv"));
        out << "frame,s_raw,s,energy,output_frame\n";
        for (std::size_t i = 0; i < sp.T; ++i) {
            out << i << "," << harness::fmt(wf.raw_scores[i]) << "," << harness::fmt(wf.scores[i]) << ","
                << harness::fmt(wf.energy[i]) << ",";
            if (wf.assignment[i] != warp::kNoRow) out << wf.assignment[i];
            out << "\n";
        }
    }
    run.output("frames.csv");
    harness::ClipDiagnostics d;
    if (cfg.delta > 0) d = harness::clip_diagnostics(wf.scores, wf.energy, cfg);
    {
        auto out = open_out(run.path("diagnostics.csv"));
        out << "step,clip_id,rho,guide_loss,mean_score_empty,mean_score_active\n";
        out << 0 << "," << fs::path(o.input).stem().string() << "," << harness::fmt(d.rho) << ","
            << harness::fmt(d.guide_loss) << "," << harness::fmt(d.mean_score_empty) << ","
            << harness::fmt(d.mean_score_active) << "\n";
    }
    run.output("diagnostics.csv");

    const std::size_t t = wf.mean_channel.dim(1);
    json summary{{"input_frames", sp.T},   {"output_frames", t},      {"n_mels", sp.F},
                 {"delta", cfg.delta},     {"rho", d.rho},            {"guide_loss", d.guide_loss},
                 {"fps_in", sp.fps},       {"fps_out", static_cast<double>(t) / w.seconds()}};
    run.manifest()["result"] = summary;
    if (o.json) std::cout << summary.dump() << "\n";
    else std::cout << "featurized " << o.input << ": " << sp.F << "x" << sp.T << " -> " << sp.F << "x" << t << "\n";
    return kExitOk;
}

// ---- gradcheck --------------------------------------------------------------------

int cmd_gradcheck(const Options& o, Run& run) {
    testing::corrupted_op() = o.corrupt_op;
    std::vector<checks::CheckResult> results = checks::run_op_checks(o.seed);
    results.push_back(checks::run_end_to_end_check(o.check_mels, o.frames, o.seed, o.delta.value_or(0.5)));
    testing::corrupted_op().clear();

    json report = json::array();
    std::vector<std::string> failed;
    for (const auto& r : results) {
        report.push_back({{"name", r.name},
                          {"max_rel_error", r.max_rel_error},
                          {"tolerance", r.tolerance},
                          {"coordinates", r.coordinates},
                          {"passed", r.passed()}});
        if (!r.passed()) failed.push_back(r.name);
    }
    {
        auto out = open_out(run.path("gradcheck.json"));
        out << json{{"checks", report}, {"failed", failed}}.dump(2) << "\n";
    }
    run.output("gradcheck.json");
    run.manifest()["result"] = {{"failed", failed}};
    if (o.json) {
        std::cout << json{{"checks", report}, {"failed", failed}}.dump() << "\n";
    } else {
        for (const auto& r : results)
            std::cout << (r.passed() ? "PASS " : "FAIL ") << r.name << " max_rel_error=" << r.max_rel_error
                      << " tol=" << r.tolerance << "\n";
    }
    if (!failed.empty()) {
        std::string names;
        for (const auto& n : failed) names += (names.empty() ? "" : ", ") + n;
        throw CheckFailure("gradient check failed for: " + names);
    }
    return kExitOk;
}

// ---- train / eval -----------------------------------------------------------------

harness::SyntheticDatasetConfig dataset_config(const Options& o, const dsp::SpectrogramConfig& spec) {
    harness::SyntheticDatasetConfig d;
    d.n_classes = o.classes;
    d.train_clips = o.train_clips;
    d.test_clips = o.test_clips;
    d.seed = o.seed;
    d.sample_rate = spec.sample_rate;
    return d;
}

harness::ModelConfig model_config(const Options& o, const dsp::SpectrogramConfig& spec) {
    harness::ModelConfig m;
    m.variant = harness::parse_variant(o.variant);
    m.n_mels = spec.n_mels;
    m.n_classes = o.classes;
    m.diffres = diffres_config(o, resolve_delta(o, spec.fps(), 0.5));
    if (m.variant == harness::Variant::Mel) m.diffres.delta = 0.0;
    m.factor();  // validates the pooling factor up front
    return m;
}

json eval_json(const harness::EvalResult& r) {
    json per = json::array();
    for (double v : r.per_class) per.push_back(std::isnan(v) ? json(nullptr) : json(v));
    return {{"accuracy", r.accuracy}, {"per_class", per}, {"confusion", r.confusion}, {"clips", r.count}};
}

void write_plot_script(const fs::path& p) {
    auto out = open_out(p);
    out << "set datafile separator ','\n"
           "set key autotitle columnhead\n"
           "set multiplot layout 3,1\n"
           "set xlabel 'step'\n"
           "plot 'metrics.csv' using 1:5 with lines title 'guide loss'\n"
           "plot 'metrics.csv' using 1:6 with lines title 'activeness'\n"
           "plot 'metrics.csv' using 1:7 with lines title 'accuracy'\n"
           "unset multiplot\n";
}

int cmd_train(const Options& o, Run& run) {
    const dsp::SpectrogramConfig spec = spec_config(o);
    const harness::ModelConfig mc = model_config(o, spec);
    const harness::Dataset ds = harness::generate_dataset(dataset_config(o, spec));
    const harness::FeatureSet train_fs = harness::prepare_features(ds.train, ds.n_classes, mc, spec);
    harness::Model model(mc, o.seed);

    harness::TrainConfig tc;
    tc.epochs = o.epochs;
    tc.batch = o.batch;
    tc.seed = o.seed;
    auto metrics = open_out(run.path("metrics.csv"));
    metrics << harness::kMetricsHeader << "\n";
    tc.on_step = [&](const harness::StepMetrics& m) { metrics << harness::metrics_row(m) << "\n"; };
    harness::TrainResult result;
    try {
        result = harness::train(model, train_fs, tc);
    } catch (const NumericError& e) {
        metrics.flush();
        throw CheckFailure(e.what());
    }
    metrics.close();
    run.output("metrics.csv");
    model.save(run.path("checkpoint.adrs"));
    run.output("checkpoint.adrs");
    write_plot_script(run.path("plot.gp"));
    run.output("plot.gp");

    json model_json{{"variant", harness::variant_name(mc.variant)},
                    {"delta", mc.diffres.delta},
                    {"lambda", mc.diffres.lambda},
                    {"epsilon", mc.diffres.epsilon},
                    {"n_mels", mc.n_mels},
                    {"hop_ms", spec.hop_ms},
                    {"window_ms", spec.window_length_ms},
                    {"classes", mc.n_classes},
                    {"seed", o.seed},
                    {"train_clips", o.train_clips},
                    {"test_clips", o.test_clips}};
    open_out(run.path("model.json")) << model_json.dump(2) << "\n";
    run.output("model.json");

    const harness::FeatureSet test_fs = harness::prepare_features(ds.test, ds.n_classes, mc, spec);
    const harness::EvalResult ev = harness::evaluate(model, test_fs);
    json summary{{"steps", result.history.size()}, {"test", eval_json(ev)}};
    if (!result.history.empty()) {
        const auto& last = result.history.back();
        summary["final"] = {{"loss_total", last.loss_total}, {"loss_guide", last.loss_guide}, {"rho", last.rho},
                            {"acc", last.acc}};
    }
    if (model.diffres()) {
        auto out = open_out(run.path("diagnostics.csv"));
        out << "step,clip_id,rho,guide_loss,mean_score_empty,mean_score_active\n";
        const auto rows = harness::score_diagnostics(model, test_fs);
        for (std::size_t i = 0; i < rows.size(); ++i)
            out << result.history.size() << ",test-" << i << "," << harness::fmt(rows[i].rho) << ","
                << harness::fmt(rows[i].guide_loss) << "," << harness::fmt(rows[i].mean_score_empty) << ","
                << harness::fmt(rows[i].mean_score_active) << "\n";
        run.output("diagnostics.csv");
        const auto avg = harness::average(rows);
        summary["test_diagnostics"] = {{"rho", avg.rho},
                                       {"guide_loss", avg.guide_loss},
                                       {"mean_score_empty", avg.mean_score_empty},
                                       {"mean_score_active", avg.mean_score_active}};
    }
    run.manifest()["result"] = summary;
    if (o.json) std::cout << summary.dump() << "\n";
    else
        std::cout << harness::variant_name(mc.variant) << ": " << result.history.size()
                  << " steps, test accuracy " << ev.accuracy << "\n";
    return kExitOk;
}

int cmd_eval(Options o, const CLI::App& app, Run& run) {
    if (o.checkpoint.empty()) throw ConfigError("eval needs --checkpoint");
    const fs::path model_file = fs::path(o.checkpoint).parent_path() / "model.json";
    if (fs::exists(model_file)) {
        // Training-time settings fill in whatever was not given explicitly.
        std::ifstream in(model_file);
        json m = json::parse(in, nullptr, false);
        if (m.is_discarded()) throw IoError("malformed " + model_file.string());
        auto given = [&](const char* flag) { return app.count(flag) > 0; };
        if (!given("--variant")) o.variant = m.value("variant", o.variant);
        if (!given("--delta") && !given("--fps-out") && m.contains("delta")) o.delta = m["delta"].get<double>();
        if (!given("--lambda")) o.lambda = m.value("lambda", o.lambda);
        if (!given("--epsilon")) o.epsilon = m.value("epsilon", o.epsilon);
        if (!given("--n-mels")) o.n_mels = m.value("n_mels", o.n_mels);
        if (!given("--hop-ms")) o.hop_ms = m.value("hop_ms", o.hop_ms);
        if (!given("--window-ms")) o.window_ms = m.value("window_ms", o.window_ms);
        if (!given("--classes")) o.classes = m.value("classes", o.classes);
        if (!given("--seed")) o.seed = m.value("seed", o.seed);
        if (!given("--test-clips")) o.test_clips = m.value("test_clips", o.test_clips);
        if (!given("--train-clips")) o.train_clips = m.value("train_clips", o.train_clips);
        run.manifest()["flags"] = options_json(o);
        run.manifest()["model_json"] = model_file.string();
    }
    const dsp::SpectrogramConfig spec = spec_config(o);
    harness::ModelConfig mc = model_config(o, spec);
    harness::Model model(mc, o.seed);
    model.load(o.checkpoint);
    harness::SyntheticDatasetConfig dc = dataset_config(o, spec);
    dc.train_clips = 0;
    const harness::Dataset ds = harness::generate_dataset(dc);
    const harness::FeatureSet test_fs = harness::prepare_features(ds.test, ds.n_classes, mc, spec);
    const harness::EvalResult ev = harness::evaluate(model, test_fs);
    const json j = eval_json(ev);
    open_out(run.path("eval.json")) << j.dump(2) << "\n";
    run.output("eval.json");
    run.manifest()["result"] = j;
    if (o.json) std::cout << j.dump() << "\n";
    else std::cout << "accuracy " << ev.accuracy << " on " << ev.count << " clips\n";
    return kExitOk;
}

// ---- bench ------------------------------------------------------------------------

std::vector<harness::Variant> parse_variant_list(const std::string& list) {
    std::vector<harness::Variant> out;
    std::stringstream ss(list);
    std::string item;
    while (std::getline(ss, item, ','))
        if (!item.empty()) out.push_back(harness::parse_variant(item));
    if (out.empty()) throw ConfigError("--variants is empty");
    return out;
}

int cmd_bench(const Options& o, const CLI::App& app, Run& run) {
    harness::BenchConfig bc;
    bc.spec = spec_config(o);
    bc.seconds = o.seconds;
    bc.repetitions = o.repetitions;
    bc.seed = o.seed;
    bc.n_classes = o.classes;
    Options with_default = o;
    if (!o.delta && !o.fps_out) with_default.fps_out = 25.0;
    bc.delta = resolve_delta(with_default, bc.spec.fps(), 0.75);
    const std::string list = app.count("--variant") && !app.count("--variants") ? o.variant : o.variants;
    const auto rows = harness::bench_throughput(parse_variant_list(list), bc);
    harness::write_bench_csv(run.path("bench.csv"), rows);
    run.output("bench.csv");
    json j = json::array();
    for (const auto& r : rows)
        j.push_back({{"variant", r.variant},
                     {"fps_in", r.fps_in},
                     {"fps_out", r.fps_out},
                     {"clips_per_second", r.clips_per_second},
                     {"mean_ms", r.mean_ms},
                     {"std_ms", r.std_ms}});
    run.manifest()["result"] = j;
    if (o.json) std::cout << j.dump() << "\n";
    else {
        std::cout << harness::kBenchHeader << "\n";
        for (const auto& r : rows) std::cout << harness::bench_row(r) << "\n";
    }
    return kExitOk;
}

// ---- flags ------------------------------------------------------------------------

void add_spec_flags(CLI::App* c, Options& o) {
    c->add_option("--hop-ms", o.hop_ms, "STFT hop in milliseconds")->check(CLI::PositiveNumber)->capture_default_str();
    c->add_option("--window-ms", o.window_ms, "STFT window in milliseconds")
        ->check(CLI::PositiveNumber)
        ->capture_default_str();
    c->add_option("--n-mels", o.n_mels, "mel bins")->check(CLI::PositiveNumber)->capture_default_str();
}

void add_reduction_flags(CLI::App* c, Options& o) {
    auto* d = c->add_option("--delta", o.delta, "dimension reduction rate in [0, 1)");
    auto* f = c->add_option("--fps-out", o.fps_out, "target output frames per second (sets delta)");
    d->excludes(f);
    c->add_option("--lambda", o.lambda, "guide-loss threshold")->capture_default_str();
    c->add_option("--epsilon", o.epsilon, "energy threshold for empty frames")->capture_default_str();
}

void add_common(CLI::App* c, Options& o) {
    c->add_option("--output-dir", o.output_dir, "run directory")->capture_default_str();
    c->add_option("--seed", o.seed, "random seed")->capture_default_str();
    c->add_flag("--json", o.json, "machine-readable stdout");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"adares: differentiable temporal resolution for audio spectrograms"};
    app.require_subcommand(1);
    Options o;

    auto* featurize = app.add_subcommand("featurize", "warp one WAV file and export features and diagnostics");
    featurize->add_option("--input", o.input, "input WAV")->required();
    featurize->add_option("--checkpoint", o.checkpoint, "trained checkpoint (importance network weights)");
    add_common(featurize, o);
    add_spec_flags(featurize, o);
    add_reduction_flags(featurize, o);

    auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference checks of every op and the full loss");
    gradcheck->add_option("--n-mels", o.check_mels, "mel bins of the end-to-end instance")->capture_default_str();
    gradcheck->add_option("--frames", o.frames, "frames of the end-to-end instance")->capture_default_str();
    gradcheck->add_option("--delta", o.delta, "reduction rate of the end-to-end instance");
    gradcheck->add_option("--corrupt-op", o.corrupt_op, "scale one op's backward pass (negative control)");
    add_common(gradcheck, o);

    auto* train = app.add_subcommand("train", "train a variant on the synthetic tone-burst set");
    train->add_option("--variant", o.variant, "mel-100fps, chsize, avgpool, convavgpool or diffres")
        ->capture_default_str();
    train->add_option("--epochs", o.epochs)->check(CLI::PositiveNumber)->capture_default_str();
    train->add_option("--batch", o.batch)->check(CLI::PositiveNumber)->capture_default_str();
    train->add_option("--train-clips", o.train_clips)->capture_default_str();
    train->add_option("--test-clips", o.test_clips)->capture_default_str();
    train->add_option("--classes", o.classes)->check(CLI::PositiveNumber)->capture_default_str();
    add_common(train, o);
    add_spec_flags(train, o);
    add_reduction_flags(train, o);

    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on the synthetic test split");
    eval->add_option("--checkpoint", o.checkpoint, "checkpoint written by train")->required();
    eval->add_option("--variant", o.variant);
    eval->add_option("--batch", o.batch)->check(CLI::PositiveNumber);
    eval->add_option("--train-clips", o.train_clips);
    eval->add_option("--test-clips", o.test_clips);
    eval->add_option("--classes", o.classes)->check(CLI::PositiveNumber);
    add_common(eval, o);
    add_spec_flags(eval, o);
    add_reduction_flags(eval, o);

    auto* bench = app.add_subcommand("bench", "front-end throughput per variant");
    bench->add_option("--variants", o.variants, "comma-separated variants")->capture_default_str();
    bench->add_option("--variant", o.variant, "single variant");
    bench->add_option("--repetitions", o.repetitions)->check(CLI::PositiveNumber)->capture_default_str();
    bench->add_option("--seconds", o.seconds, "audio per clip")->check(CLI::PositiveNumber)->capture_default_str();
    bench->add_option("--classes", o.classes)->check(CLI::PositiveNumber)->capture_default_str();
    add_common(bench, o);
    add_spec_flags(bench, o);
    add_reduction_flags(bench, o);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitUsage;
    }

    const std::vector<std::string> args(argv, argv + argc);
    std::optional<Run> run;
    try {
        CLI::App* sub = app.get_subcommands().front();
        run.emplace(sub->get_name(), o, args);
        int code = kExitOk;
        if (sub == featurize) code = cmd_featurize(o, *run);
        else if (sub == gradcheck) code = cmd_gradcheck(o, *run);
        else if (sub == train) code = cmd_train(o, *run);
        else if (sub == eval) code = cmd_eval(o, *eval, *run);
        else if (sub == bench) code = cmd_bench(o, *bench, *run);
        run->finish("ok");
        return code;
    } catch (const CheckFailure& e) {
        std::cerr << "adares: " << e.what() << "\n";
        if (run) run->finish("check_failed");
        return kExitCheck;
    } catch (const IoError& e) {
        std::cerr << "adares: I/O error: " << e.what() << "\n";
        if (run) {
            try {
                run->finish("io_error");
            } catch (const Error&) {
            }
        }
        return kExitIo;
    } catch (const NumericError& e) {
        std::cerr << "adares: numeric failure: " << e.what() << "\n";
        if (run) run->finish("numeric_error");
        return kExitCheck;
    } catch (const Error& e) {
        std::cerr << "adares: " << e.what() << "\n";
        if (run) run->finish("usage_error");
        return kExitUsage;
    }
}
