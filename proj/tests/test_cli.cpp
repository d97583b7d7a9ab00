#include <doctest.h>

#include <sys/wait.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "dhformer/checkpoint.hpp"
#include "dhformer/image_io.hpp"
#include "dhformer/metrics.hpp"
#include "dhformer/rng.hpp"

using namespace dhformer;
namespace fs = std::filesystem;

// These cases drive the installed binary the way a user would: through its
// argv surface and exit codes, never by calling into the library.

namespace {
fs::path cli_root() {
    fs::path p = fs::temp_directory_path() / "dhformer_unit" / "cli";
    fs::create_directories(p);
    return p;
}

struct RunResult {
    int code = -1;
    std::string out;
    std::string err;
};

std::string slurp(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

RunResult run_cli(const std::string& args) {
    static int serial = 0;
    const fs::path out = cli_root() / ("stdout." + std::to_string(serial));
    const fs::path err = cli_root() / ("stderr." + std::to_string(serial));
    ++serial;
    const std::string cmd = std::string(DHFORMER_CLI_PATH) + " " + args + " >" + out.string() +
                            " 2>" + err.string();
    const int rc = std::system(cmd.c_str());
    RunResult r;
    r.code = WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
    r.out = slurp(out);
    r.err = slurp(err);
    return r;
}

bool contains(const std::string& hay, const std::string& needle) {
    return hay.find(needle) != std::string::npos;
}

int count_files(const fs::path& dir, const std::string& suffix) {
    int n = 0;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.is_regular_file() && e.path().string().ends_with(suffix)) ++n;
    return n;
}

// dataset + synthesized images + trained checkpoint, built once via the CLI
struct Workspace {
    fs::path root, manifest, synth_dir, ckpt, loss_csv;
    std::string first_hazy;
};

const Workspace& ws() {
    static Workspace w = [] {
        Workspace v;
        v.root = cli_root() / "pipeline";
        fs::remove_all(v.root);
        fs::create_directories(v.root);
        const std::string data = (v.root / "data").string();
        RunResult mk = run_cli("mkmini --out " + data + " --count 8 --size 32 --seed 3");
        REQUIRE(mk.code == 0);
        v.manifest = fs::path(data) / "manifest.tsv";
        REQUIRE(fs::exists(v.manifest));

        v.synth_dir = v.root / "synth";
        RunResult sy = run_cli("synth --manifest " + v.manifest.string() + " --out " +
                               v.synth_dir.string() + " --seed 3");
        REQUIRE(sy.code == 0);

        v.ckpt = v.root / "model.dhfm";
        v.loss_csv = v.root / "loss.csv";
        RunResult tr = run_cli("train --manifest " + v.manifest.string() + " --out " +
                               v.ckpt.string() + " --loss-csv " + v.loss_csv.string() +
                               " --epochs 2 --batch-size 4 --seed 5");
        REQUIRE(tr.code == 0);
        REQUIRE(contains(tr.out, "resolved config:"));
        REQUIRE(contains(tr.out, "trained 4 steps"));

        std::vector<fs::path> hazies;
        for (const auto& e : fs::directory_iterator(v.synth_dir))
            if (e.path().string().ends_with("_hazy.png")) hazies.push_back(e.path());
        std::sort(hazies.begin(), hazies.end());
        REQUIRE(!hazies.empty());
        v.first_hazy = hazies.front().string();
        return v;
    }();
    return w;
}
}  // namespace

TEST_CASE("synthesis writes one hazy image per record plus a parameter table") {
    const Workspace& w = ws();
    CHECK(count_files(w.synth_dir, "_hazy.png") == 8);
    std::string csv = slurp(w.synth_dir / "haze_params.csv");
    CHECK(contains(csv, "image,airlight,beta"));
    // header plus eight rows
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 9);
}

TEST_CASE("training leaves a loadable checkpoint and a loss log") {
    const Workspace& w = ws();
    Checkpoint ck = load_checkpoint(w.ckpt.string());
    CHECK(ck.meta.seed == 5);
    CHECK(ck.meta.epoch == 2);
    CHECK(ck.meta.batch_size == 4);
    CHECK(ck.meta.ablation == "full");
    CHECK(ck.params.param_count() == 113415);

    std::string csv = slurp(w.loss_csv);
    CHECK(contains(csv, "step,epoch,loss"));
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 5);  // header + 4 steps
}

TEST_CASE("dehazing a single png") {
    const Workspace& w = ws();
    const fs::path out_dir = w.root / "dehazed_one";
    RunResult r = run_cli("dehaze --checkpoint " + w.ckpt.string() + " --input " + w.first_hazy +
                          " --out " + out_dir.string());
    CHECK(r.code == 0);
    const std::string stem = fs::path(w.first_hazy).stem().string();
    const fs::path produced = out_dir / (stem + "_dehazed.png");
    REQUIRE(fs::exists(produced));
    PngImage img = read_png(produced.string());
    CHECK(img.width == 32);
    CHECK(img.height == 32);
    CHECK(img.channels == 3);
    CHECK(img.bit_depth == 8);
}

TEST_CASE("dehazing a directory skips what it cannot read") {
    const Workspace& w = ws();
    const fs::path out_dir = w.root / "dehazed_dir";
    // the synth dir also holds haze_params.csv, which must be skipped loudly
    RunResult r = run_cli("dehaze --checkpoint " + w.ckpt.string() + " --input " +
                          w.synth_dir.string() + " --out " + out_dir.string());
    CHECK(r.code == 0);
    CHECK(contains(r.err, "warning: skipping"));
    CHECK(contains(r.err, "not a png"));
    CHECK(contains(r.out, "dehazed 8 images"));
    CHECK(count_files(out_dir, "_dehazed.png") == 8);

    // a directory with nothing usable is a failure, not a silent success
    const fs::path empty = w.root / "empty_dir";
    fs::create_directories(empty);
    std::ofstream(empty / "notes.txt") << "not an image\n";
    RunResult none = run_cli("dehaze --checkpoint " + w.ckpt.string() + " --input " +
                             empty.string());
    CHECK(none.code == 1);
}

TEST_CASE("evaluation baselines agree with their definitions") {
    const Workspace& w = ws();
    const fs::path report = w.root / "ident.csv";
    RunResult ident = run_cli("eval --manifest " + w.manifest.string() +
                              " --baseline identity --seed 3 --report " + report.string());
    CHECK(ident.code == 0);
    CHECK(contains(ident.out, "images 2"));
    MetricReport rep = read_report_csv(report.string());
    CHECK(rep.rows.size() == 2);

    const fs::path oreport = w.root / "oracle.csv";
    RunResult orc = run_cli("eval --manifest " + w.manifest.string() +
                            " --baseline oracle --seed 3 --report " + oreport.string());
    CHECK(orc.code == 0);
    MetricReport orep = read_report_csv(oreport.string());
    CHECK(orep.mean_psnr > 60.0);
    CHECK(orep.mean_psnr > rep.mean_psnr);

    RunResult net = run_cli("eval --manifest " + w.manifest.string() +
                            " --baseline network --seed 3 --checkpoint " + w.ckpt.string());
    CHECK(net.code == 0);
    CHECK(contains(net.out, "images 2"));

    RunResult nock = run_cli("eval --manifest " + w.manifest.string() +
                             " --baseline network --seed 3");
    CHECK(nock.code == 2);
    CHECK(contains(nock.err, "--checkpoint"));

    RunResult badbase = run_cli("eval --manifest " + w.manifest.string() +
                                " --baseline fancy --seed 3");
    CHECK(badbase.code == 2);
}

TEST_CASE("config file values apply unless a flag overrides them") {
    const Workspace& w = ws();
    const fs::path cfg = w.root / "train.cfg";
    std::ofstream(cfg) << "# small run\n"
                       << "epochs = 9\n"
                       << "learning_rate = 0.002\n"
                       << "ablation = residual_only\n";
    RunResult r = run_cli("train --manifest " + w.manifest.string() + " --out " +
                          (w.root / "cfgrun.dhfm").string() + " --config " + cfg.string() +
                          " --epochs 1 --batch-size 4 --seed 2");
    CHECK(r.code == 0);
    CHECK(contains(r.out, "epochs = 1"));             // flag beats file
    CHECK(contains(r.out, "learning_rate = 0.002"));  // file beats default
    CHECK(contains(r.out, "ablation = residual_only"));
}

TEST_CASE("config file rejections carry line numbers") {
    const Workspace& w = ws();
    auto run_with_cfg = [&](const std::string& body, const std::string& name) {
        const fs::path cfg = w.root / name;
        std::ofstream(cfg) << body;
        return run_cli("train --manifest " + w.manifest.string() + " --out " +
                       (w.root / "never.dhfm").string() + " --config " + cfg.string());
    };

    RunResult unknown = run_with_cfg("bogus = 1\n", "bad1.cfg");
    CHECK(unknown.code == 2);
    CHECK(contains(unknown.err, "line 1"));
    CHECK(contains(unknown.err, "unknown key"));

    RunResult noeq = run_with_cfg("epochs = 2\nepochs 3\n", "bad2.cfg");
    CHECK(noeq.code == 2);
    CHECK(contains(noeq.err, "line 2"));

    RunResult badint = run_with_cfg("epochs = abc\n", "bad3.cfg");
    CHECK(badint.code == 2);
    CHECK(contains(badint.err, "invalid integer"));

    RunResult absent = run_cli("train --manifest " + w.manifest.string() +
                               " --config /nonexistent/nowhere.cfg");
    CHECK(absent.code == 2);
}

TEST_CASE("usage errors exit with the input-error code") {
    RunResult nosub = run_cli("");
    CHECK(nosub.code == 2);
    RunResult unknown = run_cli("frobnicate");
    CHECK(unknown.code == 2);
    RunResult nomanifest = run_cli("train --out x.dhfm");
    CHECK(nomanifest.code == 2);
    RunResult badval = run_cli("train --manifest m.tsv --epochs notanumber");
    CHECK(badval.code == 2);
    RunResult gone = run_cli("eval --manifest /nonexistent/m.tsv --baseline identity");
    CHECK(gone.code == 2);
}

TEST_CASE("a checkpoint that contradicts itself exits with the mismatch code") {
    const Workspace& w = ws();
    const fs::path lie = w.root / "lie.dhfm";
    Checkpoint good = load_checkpoint(w.ckpt.string());
    good.meta.model.enc.n_layers = 3;  // header now disagrees with the tensors
    save_checkpoint(lie.string(), good.params, good.meta);
    RunResult r = run_cli("dehaze --checkpoint " + lie.string() + " --input " + w.first_hazy);
    CHECK(r.code == 4);
}

TEST_CASE("divergent training exits with the divergence code") {
    const Workspace& w = ws();
    RunResult r = run_cli("train --manifest " + w.manifest.string() + " --out " +
                          (w.root / "diverge.dhfm").string() +
                          " --optimizer sgd --lr 1e300 --epochs 3 --batch-size 4 --seed 1" +
                          " --ablation residual_only");
    CHECK(r.code == 3);
    CHECK(contains(r.err, "non-finite"));
}

TEST_CASE("verification subcommand gates on the suite results") {
    const Workspace& w = ws();
    RunResult ok = run_cli("verify --scratch " + (w.root / "verify").string());
    CHECK(ok.code == 0);
    CHECK(contains(ok.out, "all checks passed"));
    for (const char* suite : {"gradients.core", "gradients.model", "scattering.identity",
                              "metrics.sanity", "tensor.contracts", "trainer.tiling",
                              "checkpoint.roundtrip"})
        CHECK(contains(ok.out, suite));

    RunResult bad = run_cli("verify --scratch " + (w.root / "verify").string() +
                            " --inject-fault");
    CHECK(bad.code == 1);
    CHECK(contains(bad.out, "FAIL"));
    CHECK(contains(bad.out, "sigmoid"));
    CHECK(contains(bad.out, "verification failed"));
}

TEST_CASE("a pinned training run reproduces its loss curve bit for bit") {
    // Frozen after the first successful run on this platform; the curve is a
    // function of the seed, the procedural dataset, and double arithmetic, so
    // a differing libm could legitimately shift the last bits.
    constexpr uint64_t kGoldenLossHash = 4360569736709979321ULL;

    const fs::path root = cli_root() / "golden";
    fs::remove_all(root);
    const std::string data = (root / "data").string();
    RunResult mk = run_cli("mkmini --out " + data + " --count 8 --size 32 --seed 11");
    REQUIRE(mk.code == 0);
    const fs::path csv = root / "loss.csv";
    RunResult tr = run_cli("train --manifest " + data + "/manifest.tsv --out " +
                           (root / "golden.dhfm").string() + " --loss-csv " + csv.string() +
                           " --epochs 3 --batch-size 4 --seed 11");
    REQUIRE(tr.code == 0);
    const std::string bytes = slurp(csv);
    const uint64_t h = fnv1a64(bytes);
    if (kGoldenLossHash == 0ULL) {
        FAIL("golden loss hash not frozen yet; computed ", h);
    } else {
        CHECK(h == kGoldenLossHash);
    }
}
