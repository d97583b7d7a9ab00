#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>

#include "dhformer/checkpoint.hpp"
#include "dhformer/image_io.hpp"
#include "dhformer/selfcheck.hpp"
#include "dhformer/trainer.hpp"

namespace fs = std::filesystem;
using namespace dhformer;

// Exit codes: 0 success, 1 verification or runtime failure, 2 input or
// config error, 3 training diverged, 4 checkpoint mismatch.

namespace {

std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

long long parse_int_cfg(const std::string& v, int line) {
    try {
        size_t pos = 0;
        long long r = std::stoll(v, &pos);
        if (pos != v.size()) throw std::invalid_argument("trailing");
        return r;
    } catch (...) {
        throw ConfigError("config line " + std::to_string(line) + ": invalid integer '" + v +
                          "'");
    }
}

double parse_double_cfg(const std::string& v, int line) {
    try {
        size_t pos = 0;
        double r = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument("trailing");
        return r;
    } catch (...) {
        throw ConfigError("config line " + std::to_string(line) + ": invalid number '" + v +
                          "'");
    }
}

bool parse_bool_cfg(const std::string& v, int line) {
    if (v == "true" || v == "1" || v == "on") return true;
    if (v == "false" || v == "0" || v == "off") return false;
    throw ConfigError("config line " + std::to_string(line) + ": invalid bool '" + v + "'");
}

struct TrainOptions {
    std::string manifest;
    std::string out = "model.dhfm";
    std::string loss_csv;
    std::string config_path;
    TrainConfig tc;
    ModelConfig mc;
    std::string optimizer_name = "adam";
    std::string precision_name = "f32";
    std::string ablation_name = "full";
    uint64_t seed = 0;
};

// `key = value` lines, '#' starts a comment, unknown keys are rejected with
// their line number. A key given on the command line wins over the file.
void apply_config_file(
    const std::string& path,
    const std::map<std::string, std::function<void(const std::string&, int)>>& setters,
    const std::map<std::string, CLI::Option*>& opts) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot read config file " + path);
    std::string line;
    int ln = 0;
    while (std::getline(f, line)) {
        ++ln;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(ln) + ": expected 'key = value'");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        const auto it = setters.find(key);
        if (it == setters.end())
            throw ConfigError("config line " + std::to_string(ln) + ": unknown key '" + key +
                              "'");
        if (opts.at(key)->count() > 0) continue;
        it->second(value, ln);
    }
}

void print_resolved(const TrainOptions& o) {
    std::printf("resolved config:\n");
    std::printf("  epochs = %d\n", o.tc.epochs);
    std::printf("  batch_size = %d\n", o.tc.batch_size);
    std::printf("  learning_rate = %g\n", o.tc.learning_rate);
    std::printf("  optimizer = %s\n", to_string(o.tc.optimizer).c_str());
    std::printf("  precision = %s\n", to_string(o.tc.precision).c_str());
    std::printf("  ablation = %s\n", to_string(o.tc.ablation).c_str());
    std::printf("  seed = %llu\n", static_cast<unsigned long long>(o.tc.seed));
    std::printf("  input_size = %d\n", o.mc.arch.input_size);
    std::printf("  t_min = %g\n", o.mc.arch.t_min);
    std::printf("  embed_dim = %d\n", o.mc.enc.embed_dim);
    std::printf("  layers = %d\n", o.mc.enc.n_layers);
    std::printf("  heads = %d\n", o.mc.enc.heads);
    std::printf("  mlp_ratio = %g\n", o.mc.enc.mlp_ratio);
    std::printf("  patch = %d\n", o.mc.enc.patch);
    std::printf("  global_tokens = %s\n", o.mc.enc.use_global_tokens ? "true" : "false");
    std::printf("  global_count = %d\n", o.mc.enc.global_count);
    std::fflush(stdout);
}

int cmd_synth(const std::string& manifest_path, const std::string& out_dir, uint64_t seed) {
    Manifest m = load_manifest(manifest_path);
    PairLoader loader(m, seed);
    fs::create_directories(out_dir);
    const std::string csv_path = out_dir + "/haze_params.csv";
    std::FILE* csv = std::fopen(csv_path.c_str(), "wb");
    if (!csv) throw IoError("cannot write " + csv_path);
    std::fprintf(csv, "image,airlight,beta\n");
    for (int i = 0; i < loader.size(); ++i) {
        const HazePair& p = loader.pair(i);
        const std::string stem = fs::path(loader.entry(i).clear_path).stem().string();
        const std::string out = out_dir + "/" + stem + "_hazy.png";
        write_png(out, tensor_to_image(p.hazy));
        std::fprintf(csv, "%s,%.17g,%.17g\n", stem.c_str(), p.params.airlight, p.params.beta);
    }
    std::fclose(csv);
    std::printf("wrote %d hazy images and %s\n", loader.size(), csv_path.c_str());
    return 0;
}

int cmd_train(TrainOptions& o) {
    o.tc.optimizer = optimizer_from_string(o.optimizer_name);
    o.tc.precision = precision_from_string(o.precision_name);
    o.tc.ablation = ablation_from_string(o.ablation_name);
    o.tc.seed = o.seed;
    print_resolved(o);

    Manifest m = load_manifest(o.manifest);
    PairLoader loader(m, o.tc.seed);
    TrainResult res = train(loader, o.mc, o.tc);

    CheckpointMeta meta;
    meta.model = o.mc;
    meta.ablation = to_string(o.tc.ablation);
    meta.seed = o.tc.seed;
    meta.epoch = o.tc.epochs;
    meta.best_val_loss = res.best_val_loss;
    meta.optimizer = to_string(o.tc.optimizer);
    meta.learning_rate = o.tc.learning_rate;
    meta.batch_size = o.tc.batch_size;
    meta.precision = to_string(o.tc.precision);
    save_checkpoint(o.out, res.params, meta);

    if (!o.loss_csv.empty()) write_loss_csv(o.loss_csv, res.history);
    const double final_loss = res.history.empty() ? 0.0 : res.history.back().loss;
    std::printf("trained %d steps, final loss %.6g, checkpoint %s\n", res.steps_run, final_loss,
                o.out.c_str());
    return 0;
}

std::string dehazed_name(const fs::path& input, const std::string& out_dir) {
    fs::path dir = out_dir.empty() ? input.parent_path() : fs::path(out_dir);
    return (dir / (input.stem().string() + "_dehazed.png")).string();
}

int cmd_dehaze(const std::string& ckpt_path, const std::string& input,
               const std::string& out_dir) {
    Checkpoint ck = load_checkpoint(ckpt_path);
    const Ablation ablation = ablation_from_string(ck.meta.ablation);
    if (!out_dir.empty()) fs::create_directories(out_dir);

    auto one = [&](const fs::path& in) {
        Tensor img = image_to_tensor(read_png(in.string()));
        Tensor j = infer_tiled(ck.params, img, ck.meta.model, ablation);
        const std::string out = dehazed_name(in, out_dir);
        write_png(out, tensor_to_image(j));
        std::printf("%s -> %s\n", in.string().c_str(), out.c_str());
    };

    if (fs::is_directory(input)) {
        std::vector<fs::path> files;
        for (const auto& e : fs::directory_iterator(input))
            if (e.is_regular_file()) files.push_back(e.path());
        std::sort(files.begin(), files.end());
        int done = 0;
        for (const fs::path& f : files) {
            if (f.extension() != ".png") {
                std::fprintf(stderr, "warning: skipping %s (not a png)\n", f.string().c_str());
                continue;
            }
            try {
                one(f);
                ++done;
            } catch (const Error& e) {
                std::fprintf(stderr, "warning: skipping %s (%s)\n", f.string().c_str(),
                             e.what());
            }
        }
        std::printf("dehazed %d images\n", done);
        return done > 0 ? 0 : 1;
    }
    one(input);
    return 0;
}

int cmd_eval(const std::string& manifest_path, const std::string& ckpt_path,
             const std::string& report_path, const std::string& baseline, uint64_t seed) {
    Manifest m = load_manifest(manifest_path);
    PairLoader loader(m, seed);

    MetricReport report;
    if (baseline == "network") {
        if (ckpt_path.empty()) throw ConfigError("eval with the network needs --checkpoint");
        Checkpoint ck = load_checkpoint(ckpt_path);
        report = evaluate(&ck.params, loader, ck.meta.model,
                          ablation_from_string(ck.meta.ablation), EvalModel::network);
    } else if (baseline == "oracle") {
        report = evaluate(nullptr, loader, ModelConfig{}, Ablation::full,
                          EvalModel::oracle_residual);
    } else if (baseline == "identity") {
        report = evaluate(nullptr, loader, ModelConfig{}, Ablation::full, EvalModel::identity);
    } else {
        throw ConfigError("unknown baseline '" + baseline + "' (network, oracle, identity)");
    }

    if (!report_path.empty()) write_report_csv(report_path, report);
    std::printf("images %zu mean_psnr %.4f mean_ssim %.6f mean_fsim %.6f\n",
                report.rows.size(), report.mean_psnr, report.mean_ssim, report.mean_fsim);
    return 0;
}

int cmd_verify(const std::string& scratch, bool inject_fault) {
    std::vector<SuiteResult> results = run_selfcheck(scratch, inject_fault);
    std::printf("%-28s %-6s %10s\n", "suite", "status", "ms");
    for (const SuiteResult& r : results) {
        std::printf("%-28s %-6s %10.1f\n", r.name.c_str(), r.passed ? "pass" : "FAIL", r.ms);
        if (!r.passed) std::printf("    %s\n", r.detail.c_str());
    }
    const bool ok = all_passed(results);
    std::printf("%s\n", ok ? "all checks passed" : "verification failed");
    return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"residual image dehazing with transformer attention"};
    app.require_subcommand(1);
    int exit_code = 0;

    // synth
    auto* s = app.add_subcommand("synth", "synthesize hazy images from a manifest");
    std::string s_manifest, s_out = "synth_out";
    uint64_t s_seed = 0;
    s->add_option("--manifest", s_manifest, "dataset manifest tsv")->required();
    s->add_option("--out", s_out, "output directory");
    s->add_option("--seed", s_seed, "haze parameter seed");
    s->callback([&] { exit_code = cmd_synth(s_manifest, s_out, s_seed); });

    // train
    auto* t = app.add_subcommand("train", "train a model on a manifest");
    TrainOptions to;
    std::map<std::string, CLI::Option*> copt;
    copt["epochs"] = t->add_option("--epochs", to.tc.epochs, "training epochs");
    copt["batch_size"] = t->add_option("--batch-size", to.tc.batch_size, "examples per batch");
    copt["learning_rate"] = t->add_option("--lr", to.tc.learning_rate, "learning rate");
    copt["optimizer"] = t->add_option("--optimizer", to.optimizer_name, "adam or sgd");
    copt["precision"] = t->add_option("--precision", to.precision_name, "f32 or f64");
    copt["ablation"] =
        t->add_option("--ablation", to.ablation_name, "full or residual_only");
    copt["seed"] = t->add_option("--seed", to.seed, "run seed");
    copt["input_size"] = t->add_option("--input-size", to.mc.arch.input_size, "network tile size");
    copt["t_min"] = t->add_option("--t-min", to.mc.arch.t_min, "transmission floor");
    copt["embed_dim"] = t->add_option("--embed-dim", to.mc.enc.embed_dim, "token width");
    copt["layers"] = t->add_option("--layers", to.mc.enc.n_layers, "encoder layers");
    copt["heads"] = t->add_option("--heads", to.mc.enc.heads, "attention heads");
    copt["mlp_ratio"] = t->add_option("--mlp-ratio", to.mc.enc.mlp_ratio, "mlp width ratio");
    copt["patch"] = t->add_option("--patch", to.mc.enc.patch, "patch size");
    copt["global_tokens"] =
        t->add_option("--global-tokens", to.mc.enc.use_global_tokens, "use global context tokens");
    copt["global_count"] =
        t->add_option("--global-count", to.mc.enc.global_count, "global token count");
    t->add_option("--manifest", to.manifest, "dataset manifest tsv")->required();
    t->add_option("--out", to.out, "checkpoint output path");
    t->add_option("--loss-csv", to.loss_csv, "write per-step loss log here");
    t->add_option("--config", to.config_path, "config file (key = value lines)");
    t->callback([&] {
        if (!to.config_path.empty()) {
            std::map<std::string, std::function<void(const std::string&, int)>> set;
            set["epochs"] = [&](const std::string& v, int ln) {
                to.tc.epochs = static_cast<int>(parse_int_cfg(v, ln));
            };
            set["batch_size"] = [&](const std::string& v, int ln) {
                to.tc.batch_size = static_cast<int>(parse_int_cfg(v, ln));
            };
            set["learning_rate"] = [&](const std::string& v, int ln) {
                to.tc.learning_rate = parse_double_cfg(v, ln);
            };
            set["optimizer"] = [&](const std::string& v, int) { to.optimizer_name = v; };
            set["precision"] = [&](const std::string& v, int) { to.precision_name = v; };
            set["ablation"] = [&](const std::string& v, int) { to.ablation_name = v; };
            set["seed"] = [&](const std::string& v, int ln) {
                to.seed = static_cast<uint64_t>(parse_int_cfg(v, ln));
            };
            set["input_size"] = [&](const std::string& v, int ln) {
                to.mc.arch.input_size = static_cast<int>(parse_int_cfg(v, ln));
            };
            set["t_min"] = [&](const std::string& v, int ln) {
                to.mc.arch.t_min = parse_double_cfg(v, ln);
            };
            set["embed_dim"] = [&](const std::string& v, int ln) {
                to.mc.enc.embed_dim = static_cast<int>(parse_int_cfg(v, ln));
            };
            set["layers"] = [&](const std::string& v, int ln) {
                to.mc.enc.n_layers = static_cast<int>(parse_int_cfg(v, ln));
            };
            set["heads"] = [&](const std::string& v, int ln) {
                to.mc.enc.heads = static_cast<int>(parse_int_cfg(v, ln));
            };
            set["mlp_ratio"] = [&](const std::string& v, int ln) {
                to.mc.enc.mlp_ratio = parse_double_cfg(v, ln);
            };
            set["patch"] = [&](const std::string& v, int ln) {
                to.mc.enc.patch = static_cast<int>(parse_int_cfg(v, ln));
            };
            set["global_tokens"] = [&](const std::string& v, int ln) {
                to.mc.enc.use_global_tokens = parse_bool_cfg(v, ln);
            };
            set["global_count"] = [&](const std::string& v, int ln) {
                to.mc.enc.global_count = static_cast<int>(parse_int_cfg(v, ln));
            };
            apply_config_file(to.config_path, set, copt);
        }
        exit_code = cmd_train(to);
    });

    // dehaze
    auto* d = app.add_subcommand("dehaze", "dehaze a png image or a directory of them");
    std::string d_ckpt, d_input, d_out;
    d->add_option("--checkpoint", d_ckpt, "model checkpoint")->required();
    d->add_option("--input", d_input, "png file or directory")->required();
    d->add_option("--out", d_out, "output directory (default: next to input)");
    d->callback([&] { exit_code = cmd_dehaze(d_ckpt, d_input, d_out); });

    // eval
    auto* e = app.add_subcommand("eval", "score dehazed test images against ground truth");
    std::string e_manifest, e_ckpt, e_report, e_baseline = "network";
    uint64_t e_seed = 0;
    e->add_option("--manifest", e_manifest, "dataset manifest tsv")->required();
    e->add_option("--checkpoint", e_ckpt, "model checkpoint (network baseline)");
    e->add_option("--report", e_report, "write per-image metric csv here");
    e->add_option("--baseline", e_baseline, "network, oracle, or identity");
    e->add_option("--seed", e_seed, "haze parameter seed (must match synthesis)");
    e->callback([&] { exit_code = cmd_eval(e_manifest, e_ckpt, e_report, e_baseline, e_seed); });

    // verify
    auto* v = app.add_subcommand("verify", "run the built-in verification suites");
    std::string v_scratch = (fs::temp_directory_path() / "dhformer_verify").string();
    bool v_inject = false;
    v->add_option("--scratch", v_scratch, "scratch directory for round-trip files");
    v->add_flag("--inject-fault", v_inject,
                "negative control: corrupt a derivative rule and require detection");
    v->callback([&] { exit_code = cmd_verify(v_scratch, v_inject); });

    // mkmini
    auto* k = app.add_subcommand("mkmini", "write a small procedural dataset");
    std::string k_out = "mini_data";
    int k_count = 16, k_size = 32;
    uint64_t k_seed = 1;
    k->add_option("--out", k_out, "output directory");
    k->add_option("--count", k_count, "number of records");
    k->add_option("--size", k_size, "image side length");
    k->add_option("--seed", k_seed, "generation seed");
    k->callback([&] {
        const std::string manifest = write_mini_dataset(k_out, k_count, k_size, k_seed);
        std::printf("wrote %d records, manifest %s\n", k_count, manifest.c_str());
    });

    try {
        app.parse(argc, argv);
        return exit_code;
    } catch (const CLI::ParseError& ex) {
        const int code = app.exit(ex);
        return code == 0 ? 0 : 2;
    } catch (const TrainingError& ex) {
        std::fprintf(stderr, "error: %s (batch %d)\n", ex.what(), ex.batch_index);
        return 3;
    } catch (const CheckpointMismatchError& ex) {
        std::fprintf(stderr, "error: %s\n", ex.what());
        return 4;
    } catch (const ConfigError& ex) {
        std::fprintf(stderr, "error: %s\n", ex.what());
        return 2;
    } catch (const IoError& ex) {
        std::fprintf(stderr, "error: %s\n", ex.what());
        return 2;
    } catch (const FormatError& ex) {
        std::fprintf(stderr, "error: %s\n", ex.what());
        return 2;
    } catch (const std::exception& ex) {
        std::fprintf(stderr, "error: %s\n", ex.what());
        return 1;
    }
}
