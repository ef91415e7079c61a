// hypersfda: generate synthetic domains, pretrain on the source, adapt to the
// target without source data, evaluate checkpoints.
//
// Every command resolves its parameters as defaults <- --config file <- flags
// and records the result in <out>/manifest.json before doing any work.

#include "hypersfda/hypersfda.hpp"

#include "CLI11.hpp"

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>

namespace fs = std::filesystem;
using namespace hypersfda;

namespace {

constexpr const char* kToolVersion = "0.1.0";

enum ExitCode { kOk = 0, kInternal = 1, kUsage = 2, kAbort = 3 };

struct Globals {
    std::uint64_t seed = 0;
    std::string config;
    std::string out = ".";
    bool quiet = false;
    CLI::Option* seed_opt = nullptr;
};

/// A flag bound to one key of the command's parameter object.
struct Param {
    std::string key;
    CLI::Option* opt;
    std::function<json()> value;
};

struct Command {
    CLI::App* app = nullptr;
    std::vector<Param> params;

    template <class T>
    CLI::Option* add(const std::string& flag, const std::string& key, T& var, const std::string& help) {
        CLI::Option* o = app->add_option(flag, var, help)->capture_default_str();
        params.push_back({key, o, [&var] { return json(var); }});
        return o;
    }

    CLI::Option* add_switch(const std::string& flag, const std::string& key, bool set_to, const std::string& help) {
        CLI::Option* o = app->add_flag(flag, help);
        params.push_back({key, o, [set_to] { return json(set_to); }});
        return o;
    }

    /// defaults, overlaid with the config file's object, overlaid with flags given on the command line.
    json resolve(json defaults, const json& file) const {
        for (auto it = file.begin(); it != file.end(); ++it) defaults[it.key()] = it.value();
        for (const auto& p : params)
            if (p.opt->count() > 0) defaults[p.key] = p.value();
        return defaults;
    }
};

std::string utc_now() {
    const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

json read_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config '" + path + "'");
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        throw ConfigError("config '" + path + "' is not valid JSON: " + e.what());
    }
}

/// Accepts either a bare parameter object or a manifest written by this tool.
json config_section(const Globals& g, const std::string& command) {
    if (g.config.empty()) return json::object();
    json j = read_json_file(g.config);
    if (!j.is_object()) throw ConfigError("config must be a JSON object");
    if (j.contains("tool") && j.contains("params")) {
        if (j.value("command", "") != command)
            throw ConfigError("manifest '" + g.config + "' records command '" + j.value("command", "") + "', not '" + command + "'");
        j = j["params"];
    }
    return j;
}

void write_json_atomic(const fs::path& path, const json& j) {
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp);
        if (!out) throw std::runtime_error("cannot write '" + tmp.string() + "'");
        out << j.dump(2) << '\n';
    }
    fs::rename(tmp, path);
}

void ensure_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec || !fs::is_directory(dir)) throw ConfigError("cannot create output directory '" + dir.string() + "'");
}

struct Manifest {
    fs::path path;
    json body;

    Manifest(const Globals& g, const std::string& command, const json& params, const json& inputs) : path(fs::path(g.out) / "manifest.json") {
        body = json{{"tool", "hypersfda"}, {"version", kToolVersion}, {"command", command},        {"seed", params.value("seed", g.seed)},
                    {"params", params},    {"inputs", inputs},       {"outputs", json::object()}, {"started_at", utc_now()},
                    {"finished_at", nullptr}};
        write_json_atomic(path, body);
    }

    void finish(const json& outputs, const std::string& status = "ok") {
        body["outputs"] = outputs;
        body["status"] = status;
        body["finished_at"] = utc_now();
        write_json_atomic(path, body);
    }
};

std::string absolute_str(const std::string& p) { return fs::absolute(p).lexically_normal().string(); }

// ---------------------------------------------------------------------------
// gen

struct GenParams {
    std::string kind = "gaussian";
    int classes = 4;
    long dim = 16;
    long n_source = 600;
    long n_target = 600;
    double rotate_deg = 30.0;
    std::vector<double> translate;
    double noise = 0.0;
    std::vector<double> prior_drift;
    std::uint64_t shift_seed = 0;
    double sigma = 1.0;
    double separation = 4.0;
    double moon_noise = 0.1;
    std::uint64_t seed = 0;
};

json to_json(const GenParams& p) {
    return json{{"kind", p.kind},           {"classes", p.classes},       {"dim", p.dim},         {"n_source", p.n_source},
                {"n_target", p.n_target},   {"rotate_deg", p.rotate_deg}, {"translate", p.translate}, {"noise", p.noise},
                {"prior_drift", p.prior_drift}, {"shift_seed", p.shift_seed}, {"sigma", p.sigma},   {"separation", p.separation},
                {"moon_noise", p.moon_noise}, {"seed", p.seed}};
}

GenParams gen_from_json(const json& j) {
    GenParams p;
    for (auto it = j.begin(); it != j.end(); ++it) {
        const auto& k = it.key();
        const auto& v = it.value();
        try {
            if (k == "kind") p.kind = v.get<std::string>();
            else if (k == "classes") p.classes = v.get<int>();
            else if (k == "dim") p.dim = v.get<long>();
            else if (k == "n_source") p.n_source = v.get<long>();
            else if (k == "n_target") p.n_target = v.get<long>();
            else if (k == "rotate_deg") p.rotate_deg = v.get<double>();
            else if (k == "translate") p.translate = v.get<std::vector<double>>();
            else if (k == "noise") p.noise = v.get<double>();
            else if (k == "prior_drift") p.prior_drift = v.get<std::vector<double>>();
            else if (k == "shift_seed") p.shift_seed = v.get<std::uint64_t>();
            else if (k == "sigma") p.sigma = v.get<double>();
            else if (k == "separation") p.separation = v.get<double>();
            else if (k == "moon_noise") p.moon_noise = v.get<double>();
            else if (k == "seed") p.seed = v.get<std::uint64_t>();
            else throw ConfigError("unknown gen parameter '" + k + "'");
        } catch (const json::exception& e) {
            throw ConfigError("gen parameter '" + k + "': " + e.what());
        }
    }
    return p;
}

int run_gen(const Globals& g, const Command& cmd, GenParams defaults) {
    json params = cmd.resolve(to_json(defaults), config_section(g, "gen"));
    if (g.seed_opt->count() > 0) params["seed"] = g.seed;
    if (params["kind"] == "two-moons") params["classes"] = 2;
    const GenParams p = gen_from_json(params);
    if (p.kind != "gaussian" && p.kind != "two-moons") throw ConfigError("unknown generator '" + p.kind + "' (expected gaussian or two-moons)");

    ShiftSpec shift;
    shift.rotation_angle = p.rotate_deg * M_PI / 180.0;
    shift.translation = p.translate;
    shift.noise_sigma = p.noise;
    if (!p.prior_drift.empty()) shift.class_prior_drift = p.prior_drift;
    shift.seed = p.shift_seed;

    ensure_dir(g.out);
    Manifest manifest(g, "gen", params, json::object());
    std::pair<EmbeddingDataset, EmbeddingDataset> data;
    if (p.kind == "gaussian") {
        data = gen_gaussian_domains(p.classes, p.dim, p.n_source, p.n_target, shift, p.seed, GaussianOptions{p.sigma, p.separation});
    } else {
        data = gen_two_moons_domains(p.n_source, p.n_target, shift, p.seed, MoonOptions{p.dim, p.moon_noise});
    }
    const fs::path src = fs::path(g.out) / "source.csv", tgt = fs::path(g.out) / "target.csv";
    save_dataset(data.first, src);
    save_dataset(data.second, tgt);
    manifest.finish(json{{"source", absolute_str(src.string())}, {"target", absolute_str(tgt.string())}});
    if (!g.quiet) std::cout << "wrote " << src.string() << " and " << tgt.string() << "\n";
    return kOk;
}

// ---------------------------------------------------------------------------
// pretrain

struct PretrainParams {
    std::string source;
    long feature_dim = 0;  // 0: same as the input dimension
    PretrainConfig train;
};

json to_json(const PretrainParams& p) {
    return json{{"source", p.source},
                {"feature_dim", p.feature_dim},
                {"epochs", p.train.epochs},
                {"lr", p.train.lr},
                {"momentum", p.train.momentum},
                {"batch_size", p.train.batch_size},
                {"label_smoothing", p.train.label_smoothing},
                {"seed", p.train.seed}};
}

PretrainParams pretrain_from_json(const json& j) {
    PretrainParams p;
    for (auto it = j.begin(); it != j.end(); ++it) {
        const auto& k = it.key();
        const auto& v = it.value();
        try {
            if (k == "source") p.source = v.get<std::string>();
            else if (k == "feature_dim") p.feature_dim = v.get<long>();
            else if (k == "epochs") p.train.epochs = v.get<int>();
            else if (k == "lr") p.train.lr = v.get<double>();
            else if (k == "momentum") p.train.momentum = v.get<double>();
            else if (k == "batch_size") p.train.batch_size = v.get<int>();
            else if (k == "label_smoothing") p.train.label_smoothing = v.get<double>();
            else if (k == "seed") p.train.seed = v.get<std::uint64_t>();
            else throw ConfigError("unknown pretrain parameter '" + k + "'");
        } catch (const json::exception& e) {
            throw ConfigError("pretrain parameter '" + k + "': " + e.what());
        }
    }
    return p;
}

int run_pretrain(const Globals& g, const Command& cmd, const PretrainParams& defaults) {
    json params = cmd.resolve(to_json(defaults), config_section(g, "pretrain"));
    if (g.seed_opt->count() > 0) params["seed"] = g.seed;
    PretrainParams p = pretrain_from_json(params);
    if (p.source.empty()) throw ConfigError("pretrain needs --source");
    if (p.feature_dim < 0) throw ConfigError("feature_dim must be >= 0");
    const EmbeddingDataset src = load_dataset(p.source);
    if (!src.labeled()) throw ConfigError("source '" + p.source + "' is unlabeled; pretraining needs labels");

    ensure_dir(g.out);
    params["source"] = absolute_str(p.source);
    Manifest manifest(g, "pretrain", params, json{{"source", params["source"]}});
    const Index dz = p.feature_dim > 0 ? p.feature_dim : src.dim();
    const PretrainResult r = pretrain_source(make_model(src.dim(), dz, src.class_count, p.train.seed), src, p.train);
    const fs::path ckpt = fs::path(g.out) / "model.ckpt";
    save_model(r.model, ckpt);
    manifest.finish(json{{"checkpoint", absolute_str(ckpt.string())}, {"source_accuracy", r.source_accuracy}});
    std::cout << json{{"source_accuracy", r.source_accuracy}}.dump() << "\n";
    return kOk;
}

// ---------------------------------------------------------------------------
// adapt

struct AdaptIo {
    std::string checkpoint;
    std::string target;
    std::string resume;
    long stop_at = -1;
};

int run_adapt(const Globals& g, const Command& cmd, const AdaptIo& io_flags) {
    json file = config_section(g, "adapt");
    // A manifest (or hand-written file) may also name the inputs.
    AdaptIo io = io_flags;
    json cfg_part = json::object();
    for (auto it = file.begin(); it != file.end(); ++it) {
        if (it.key() == "checkpoint") {
            if (io.checkpoint.empty()) io.checkpoint = it.value().get<std::string>();
        } else if (it.key() == "target") {
            if (io.target.empty()) io.target = it.value().get<std::string>();
        } else {
            cfg_part[it.key()] = it.value();
        }
    }
    json params = cmd.resolve(to_json(AdaptConfig{}), cfg_part);
    params.erase("checkpoint");
    params.erase("target");
    params.erase("resume");
    params.erase("stop_at");
    if (g.seed_opt->count() > 0) params["seed"] = g.seed;
    const AdaptConfig cfg = config_from_json(params);
    if (io.checkpoint.empty() || io.target.empty()) throw ConfigError("adapt needs --checkpoint and --target");

    const AdaptModel model = load_model(io.checkpoint);
    const EmbeddingDataset target = load_dataset(io.target);
    if (target.dim() != model.input_dim())
        throw ShapeError("target '" + io.target + "' has dim " + std::to_string(target.dim()) + " but checkpoint expects " +
                         std::to_string(model.input_dim()));
    if (target.class_count != model.class_count())
        throw ShapeError("target '" + io.target + "' has " + std::to_string(target.class_count) + " classes but checkpoint has " +
                         std::to_string(model.class_count()));

    std::optional<TrainingState> resumed;
    if (!io.resume.empty()) resumed = load_training_state(io.resume);

    ensure_dir(g.out);
    json recorded = params;
    recorded["checkpoint"] = absolute_str(io.checkpoint);
    recorded["target"] = absolute_str(io.target);
    Manifest manifest(g, "adapt", recorded, json{{"checkpoint", recorded["checkpoint"]}, {"target", recorded["target"]}});

    const fs::path metrics_path = fs::path(g.out) / "metrics.jsonl";
    std::ofstream metrics(metrics_path, resumed ? std::ios::app : std::ios::trunc);
    if (!metrics) throw std::runtime_error("cannot write '" + metrics_path.string() + "'");

    AdaptHooks hooks;
    if (resumed) hooks.resume = &*resumed;
    if (io.stop_at >= 0) hooks.stop_at = io.stop_at;
    hooks.on_record = [&](const MetricsRecord& r) {
        metrics << to_json(r).dump() << '\n';
        metrics.flush();
        if (!g.quiet && r.acc)
            std::cerr << (r.final ? "final" : "iter " + std::to_string(r.iter)) << ": acc=" << *r.acc
                      << " neighbor_agreement=" << r.neighbor_agreement.value_or(0.0) << "\n";
    };

    const fs::path state_path = fs::path(g.out) / "state.ckpt";
    try {
        const AdaptResult r = adapt(model, target, cfg, hooks);
        const fs::path ckpt = fs::path(g.out) / "adapted.ckpt";
        save_model(r.model, ckpt);
        save_training_state(r.state, state_path);
        json outputs{{"checkpoint", absolute_str(ckpt.string())},
                     {"state", absolute_str(state_path.string())},
                     {"metrics", absolute_str(metrics_path.string())},
                     {"iterations", r.state.iter},
                     {"max_iter", r.max_iter}};
        if (r.final_metrics) outputs["final"] = to_json(*r.final_metrics);
        manifest.finish(outputs, r.state.iter >= r.max_iter ? "ok" : "stopped");
    } catch (const TrainingAborted& e) {
        save_training_state(e.last_good, state_path);
        manifest.finish(json{{"state", absolute_str(state_path.string())}, {"error", e.what()}}, "aborted");
        throw;
    }
    return kOk;
}

// ---------------------------------------------------------------------------
// eval

int run_eval(const std::string& checkpoint, const std::string& data, int h) {
    if (checkpoint.empty() || data.empty()) throw ConfigError("eval needs --checkpoint and --data");
    const AdaptModel model = load_model(checkpoint);
    const EmbeddingDataset ds = load_dataset(data);
    if (!ds.labeled()) throw ConfigError("'" + data + "' is unlabeled; evaluation needs labels");
    if (ds.dim() != model.input_dim()) throw ShapeError("'" + data + "' has dim " + std::to_string(ds.dim()) + " but checkpoint expects " + std::to_string(model.input_dim()));
    if (h < 1) throw ConfigError("h must be >= 1");
    std::cout << to_json(evaluate(model, ds, h)).dump() << "\n";
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Source-free domain adaptation with high-order neighbourhood clustering on embedding sets."};
    app.require_subcommand(1);
    // "-h" stays free for the close-set size flag --h.
    app.set_help_flag("--help", "Print this help message and exit");
    Globals g;
    g.seed_opt = app.add_option("--seed", g.seed, "Seed for generation, initialisation and shuffling")->capture_default_str();
    app.add_option("--config", g.config, "JSON parameter file, or a manifest.json from an earlier run; flags override it");
    app.add_option("--out", g.out, "Output directory")->capture_default_str();
    app.add_flag("--quiet", g.quiet, "Suppress progress output");
    // Global options may follow the subcommand too.
    app.fallthrough();

    // gen
    GenParams gen_p;
    Command gen{app.add_subcommand("gen", "Write synthetic source/target embedding CSVs")};
    gen.add("--kind", "kind", gen_p.kind, "Generator: gaussian | two-moons");
    gen.add("--classes", "classes", gen_p.classes, "Number of classes (gaussian; two-moons is always 2)");
    gen.add("--dim", "dim", gen_p.dim, "Embedding dimension");
    gen.add("--n-source", "n_source", gen_p.n_source, "Source sample count");
    gen.add("--n-target", "n_target", gen_p.n_target, "Target sample count");
    gen.add("--rotate-deg", "rotate_deg", gen_p.rotate_deg, "Target rotation in degrees");
    gen.add("--translate", "translate", gen_p.translate, "Target translation, one value per dimension")->delimiter(',');
    gen.add("--noise", "noise", gen_p.noise, "Extra isotropic target noise (std)");
    gen.add("--prior-drift", "prior_drift", gen_p.prior_drift, "Target class weights, comma separated, summing to 1")->delimiter(',');
    gen.add("--shift-seed", "shift_seed", gen_p.shift_seed, "Seed for the target draw");
    gen.add("--sigma", "sigma", gen_p.sigma, "Gaussian within-class std");
    gen.add("--separation", "separation", gen_p.separation, "Gaussian distance between class means, in units of sigma");
    gen.add("--moon-noise", "moon_noise", gen_p.moon_noise, "Two-moons noise in the moon plane");

    // pretrain
    PretrainParams pre_p;
    Command pre{app.add_subcommand("pretrain", "Train the source model on a labeled CSV; writes <out>/model.ckpt")};
    pre.add("--source", "source", pre_p.source, "Labeled source CSV");
    pre.add("--feature-dim", "feature_dim", pre_p.feature_dim, "Adapter width d_z (0 = input dimension)");
    pre.add("--epochs", "epochs", pre_p.train.epochs, "Training epochs");
    pre.add("--lr", "lr", pre_p.train.lr, "Learning rate");
    pre.add("--momentum", "momentum", pre_p.train.momentum, "SGD momentum");
    pre.add("--batch-size", "batch_size", pre_p.train.batch_size, "Mini-batch size");
    pre.add("--label-smoothing", "label_smoothing", pre_p.train.label_smoothing, "Label smoothing");

    // adapt
    AdaptConfig ac;
    AdaptIo io;
    Command ad{app.add_subcommand("adapt", "Adapt a checkpoint to an unlabeled target; writes adapted.ckpt, state.ckpt, metrics.jsonl")};
    ad.app->add_option("--checkpoint", io.checkpoint, "Source model checkpoint");
    ad.app->add_option("--target", io.target, "Target CSV (labels, if present, are used only for metrics)");
    ad.app->add_option("--resume", io.resume, "Continue from a state.ckpt written by an earlier run");
    ad.app->add_option("--stop-at", io.stop_at, "Stop before this iteration (state.ckpt can be resumed)");
    ad.add("--k", "k", ac.k, "Hyperedge degree");
    ad.add("--t-in", "t_in", ac.t_in, "Iterations between hypergraph refreshes");
    ad.add("--alpha", "alpha", ac.alpha, "Affinity norm penalty");
    ad.add("--h", "h", ac.h, "Close-set size");
    ad.add("--gamma", "gamma", ac.gamma, "Relation weight exponent");
    ad.add("--delta", "delta", ac.delta, "EMA decay");
    ad.add("--eta", "eta", ac.eta, "Regulariser weight");
    ad.add("--beta", "beta", ac.beta, "Push-term decay exponent");
    ad.add("--batch-size", "batch_size", ac.batch_size, "Mini-batch size");
    ad.add("--lr", "lr", ac.lr, "Learning rate");
    ad.add("--momentum", "momentum", ac.momentum, "SGD momentum");
    ad.add("--epochs", "epochs", ac.epochs, "Epochs over the target");
    ad.add("--m-prime", "m_prime", ac.m_prime, "Compressed width (0 = min(64, n-1))");
    ad.add("--eval-every", "eval_every", ac.eval_every, "Evaluate every N iterations (0 = once per epoch)");
    ad.add_switch("--open-set", "open_set", true, "Split off high-entropy samples as unknown and train on the rest");
    ad.add_switch("--no-self-loops", "self_loops", false, "Ablation: no entropy self loops");
    ad.add_switch("--pairwise", "high_order", false, "Ablation: cluster by plain feature cosine");

    // eval
    std::string ev_ckpt, ev_data;
    int ev_h = 3;
    CLI::App* ev = app.add_subcommand("eval", "Print accuracy and neighbourhood metrics of a checkpoint as JSON");
    ev->add_option("--checkpoint", ev_ckpt, "Model checkpoint");
    ev->add_option("--data", ev_data, "Labeled CSV");
    ev->add_option("--h", ev_h, "Neighbours used for neighbor_agreement")->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kUsage;
    }

    try {
        if (gen.app->parsed()) return run_gen(g, gen, GenParams{});
        if (pre.app->parsed()) return run_pretrain(g, pre, PretrainParams{});
        if (ad.app->parsed()) return run_adapt(g, ad, io);
        if (ev->parsed()) return run_eval(ev_ckpt, ev_data, ev_h);
    } catch (const NumericError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kAbort;
    } catch (const std::runtime_error& e) {
        // configuration, parse, shape, validation and file errors
        std::cerr << "error: " << e.what() << "\n";
        return kUsage;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << "\n";
        return kInternal;
    }
    return kUsage;
}
