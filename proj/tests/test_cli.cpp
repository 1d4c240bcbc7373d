#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "adares/dsp.hpp"
#include "adares/io.hpp"

using namespace adares;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path root() {
    static const fs::path dir = [] {
        fs::path d = fs::temp_directory_path() / "adares_test_cli";
        fs::remove_all(d);
        fs::create_directories(d);
        return d;
    }();
    return dir;
}

struct Result {
    int code = -1;
    std::string out;
};

Result cli(const std::string& args) {
    static int counter = 0;
    const fs::path capture = root() / ("stdout_" + std::to_string(counter++) + ".txt");
    const std::string cmd = std::string(ADARES_CLI) + " " + args + " > " + capture.string() + " 2>&1";
    const int status = std::system(cmd.c_str());
    Result r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    std::ifstream in(capture);
    std::stringstream ss;
    ss << in.rdbuf();
    r.out = ss.str();
    return r;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

json read_json(const fs::path& p) { return json::parse(slurp(p)); }

fs::path silence_wav() {
    const fs::path p = root() / "silence.wav";
    if (!fs::exists(p)) {
        dsp::Waveform w;
        w.samples.assign(16000, 0.0);
        dsp::write_wav(p, w, dsp::WavFormat::Pcm16);
    }
    return p;
}

fs::path tone_wav() {
    const fs::path p = root() / "tone.wav";
    if (!fs::exists(p)) {
        dsp::Waveform w;
        w.samples.assign(16000, 0.0);
        for (std::size_t i = 4000; i < 6000; ++i) w.samples[i] = 0.3 * std::sin(2 * M_PI * 750.0 * i / 16000.0);
        dsp::write_wav(p, w, dsp::WavFormat::Pcm16);
    }
    return p;
}

std::size_t csv_rows(const fs::path& p) {
    std::ifstream in(p);
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) n += !line.empty();
    return n;
}

}  // namespace

TEST(Cli, FeaturizeSilence) {
    const fs::path out = root() / "feat_silence";
    const Result r = cli("featurize --input " + silence_wav().string() + " --delta 0.75 --output-dir " + out.string());
    ASSERT_EQ(r.code, 0) << r.out;
    const auto named = io::read_named(out / "features.adrs");
    ASSERT_EQ(named.size(), 3u);
    for (const auto& [name, t] : named) EXPECT_EQ(t.shape(), (Shape{128, 25})) << name;
    EXPECT_EQ(csv_rows(out / "frames.csv"), 101u);
    const json m = read_json(out / "manifest.json");
    EXPECT_EQ(m["status"], "ok");
    EXPECT_EQ(m["command"], "featurize");
    EXPECT_TRUE(m.contains("git_describe"));
}

TEST(Cli, FeaturizeIsDeterministic) {
    const fs::path a = root() / "feat_a", b = root() / "feat_b";
    ASSERT_EQ(cli("featurize --input " + tone_wav().string() + " --fps-out 50 --output-dir " + a.string()).code, 0);
    ASSERT_EQ(cli("featurize --input " + tone_wav().string() + " --fps-out 50 --output-dir " + b.string()).code, 0);
    EXPECT_EQ(slurp(a / "features.adrs"), slurp(b / "features.adrs"));
    EXPECT_EQ(slurp(a / "frames.csv"), slurp(b / "frames.csv"));
    EXPECT_EQ(io::read_named(a / "features.adrs")[0].second.dim(1), 50u);
}

TEST(Cli, UsageErrors) {
    EXPECT_EQ(cli("").code, 3);
    EXPECT_EQ(cli("frobnicate").code, 3);
    EXPECT_EQ(cli("featurize").code, 3);
    EXPECT_EQ(cli("featurize --input x.wav --delta 0.5 --fps-out 50").code, 3);
    EXPECT_EQ(cli("featurize --input " + silence_wav().string() + " --delta 1.5 --output-dir " +
                  (root() / "bad_delta").string())
                  .code,
              3);
    EXPECT_EQ(cli("train --variant nonsense --output-dir " + (root() / "bad_variant").string()).code, 3);
}

TEST(Cli, MissingInputIsAnIoError) {
    const Result r = cli("featurize --input " + (root() / "nope.wav").string() + " --output-dir " +
                         (root() / "missing").string());
    EXPECT_EQ(r.code, 2) << r.out;
}

TEST(Cli, GradcheckPasses) {
    const fs::path out = root() / "gradcheck";
    const Result r = cli("gradcheck --json --output-dir " + out.string());
    ASSERT_EQ(r.code, 0) << r.out;
    const json j = json::parse(r.out);
    EXPECT_TRUE(j["failed"].empty());
    EXPECT_GE(j["checks"].size(), 30u);
    EXPECT_TRUE(fs::exists(out / "gradcheck.json"));
}

TEST(Cli, GradcheckCatchesCorruptedOp) {
    const Result r = cli("gradcheck --corrupt-op matmul --output-dir " + (root() / "gradcheck_bad").string());
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.out.find("FAIL matmul"), std::string::npos) << r.out;
}

TEST(Cli, TrainThenEval) {
    const fs::path out = root() / "train";
    const Result r = cli("train --variant diffres --epochs 1 --batch 8 --train-clips 32 --test-clips 16 --n-mels 32 "
                         "--delta 0.75 --output-dir " + out.string());
    ASSERT_EQ(r.code, 0) << r.out;
    for (const char* f : {"metrics.csv", "checkpoint.adrs", "model.json", "diagnostics.csv", "manifest.json"})
        EXPECT_TRUE(fs::exists(out / f)) << f;
    EXPECT_EQ(csv_rows(out / "metrics.csv"), 1u + 4u);
    std::ifstream metrics(out / "metrics.csv");
    std::string header;
    std::getline(metrics, header);
    EXPECT_EQ(header, "step,variant,loss_total,loss_bce,loss_guide,rho,acc");

    const Result e = cli("eval --json --checkpoint " + (out / "checkpoint.adrs").string() + " --output-dir " +
                         (root() / "eval").string());
    ASSERT_EQ(e.code, 0) << e.out;
    const json j = json::parse(e.out);
    EXPECT_EQ(j["clips"], 16);
    EXPECT_GE(j["accuracy"].get<double>(), 0.0);
    EXPECT_LE(j["accuracy"].get<double>(), 1.0);

    // a checkpoint also drives featurize
    const Result f = cli("featurize --input " + tone_wav().string() + " --n-mels 32 --delta 0.75 --checkpoint " +
                         (out / "checkpoint.adrs").string() + " --output-dir " + (root() / "feat_ckpt").string());
    EXPECT_EQ(f.code, 0) << f.out;
}

TEST(Cli, EvalRejectsMismatchedCheckpoint) {
    const fs::path out = root() / "train_mel";
    ASSERT_EQ(cli("train --variant mel --epochs 1 --batch 8 --train-clips 16 --test-clips 8 --n-mels 32 --output-dir " +
                  out.string())
                  .code,
              0);
    const Result e = cli("eval --checkpoint " + (out / "checkpoint.adrs").string() + " --n-mels 64 --output-dir " +
                         (root() / "eval_bad").string());
    EXPECT_NE(e.code, 0);
}

TEST(Cli, Bench) {
    const fs::path out = root() / "bench";
    const Result r = cli("bench --variants mel,diffres,avgpool --repetitions 2 --output-dir " + out.string());
    ASSERT_EQ(r.code, 0) << r.out;
    std::ifstream in(out / "bench.csv");
    std::string header;
    std::getline(in, header);
    EXPECT_EQ(header, "variant,fps_in,fps_out,clips_per_second,mean_ms,std_ms");
    EXPECT_EQ(csv_rows(out / "bench.csv"), 7u);
}
