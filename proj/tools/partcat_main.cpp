#include <omp.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "partcat/data.hpp"
#include "partcat/gradsuite.hpp"
#include "partcat/trainer.hpp"

namespace fs = std::filesystem;
using namespace partcat;

namespace {

struct Options {
    std::string config;
    std::uint64_t seed = 0;
    bool seed_set = false;
    std::string protocol = "pred-all";
    double tau = 0.5;
    std::string comp;
    std::string guidance;
    std::string out;
    std::string checkpoint;
    std::string data;
    std::string classes = PARTCAT_DEFAULT_CLASSES;
    std::size_t n_train = 64;
    std::size_t n_eval = 32;
    std::string class_name;
    std::size_t sample = 0;
    std::string axis = "comp";
    std::vector<std::uint64_t> seeds;
};

std::string slurp(const fs::path& p) {
    std::ifstream in(p);
    if (!in) throw std::runtime_error("cannot read " + p.string());
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

void apply_thread_cap() {
    const char* env = std::getenv("PARTCAT_THREADS");
    if (!env || !*env) return;
    char* end = nullptr;
    const long n = std::strtol(env, &end, 10);
    if (*end != '\0' || n < 1) throw CLI::ValidationError("PARTCAT_THREADS", "must be a positive integer");
    omp_set_num_threads(static_cast<int>(std::min<long>(n, omp_get_num_procs())));
}

TrainConfig train_config(const Options& o) {
    TrainConfig cfg = o.config.empty() ? TrainConfig{} : TrainConfig::parse(slurp(o.config));
    if (o.seed_set) cfg.seed = cfg.model.seed = o.seed;
    if (!o.comp.empty()) cfg.comp_mode = parse_comp_mode(o.comp);
    if (!o.guidance.empty()) cfg.model.guidance = GuidanceLevels::parse(o.guidance);
    cfg.validate();
    return cfg;
}

// A manifest or a dataset directory (which then means its eval split).
fs::path manifest_path(const std::string& data) {
    if (data.empty()) throw CLI::ValidationError("--data", "required");
    const fs::path p(data);
    return fs::is_directory(p) ? p / "eval.manifest" : p;
}

// Vocabulary whose index space the manifest's labels use, read from the `.names` sidecar.
Vocabulary manifest_vocabulary(const fs::path& manifest) {
    const Vocabulary full = load_dataset_vocabulary(manifest.parent_path());
    fs::path names = manifest;
    names.replace_extension(".names");
    if (!fs::exists(names)) return full;
    std::vector<std::size_t> kept;
    for (const auto& n : read_label_names(names)) kept.push_back(full.obj_part_index(n));
    return full.subset(kept).first;
}

int cmd_make_data(const Options& o) {
    if (o.out.empty()) throw CLI::ValidationError("--out", "required");
    SceneSpec spec = o.config.empty() ? SceneSpec{} : SceneSpec::parse(slurp(o.config));
    if (o.seed_set) spec.seed = o.seed;
    const Vocabulary vocab = Vocabulary::build(load_class_list(o.classes));
    const auto paths = build_dataset(o.out, spec, vocab, o.n_train, o.n_eval, spec.seed);
    std::cout << "wrote " << o.n_train << " train and " << o.n_eval << " eval samples to " << paths.root.string()
              << "\n";
    return 0;
}

int cmd_train(const Options& o) {
    if (o.out.empty()) throw CLI::ValidationError("--out", "required");
    if (o.data.empty()) throw CLI::ValidationError("--data", "required");
    const fs::path root(o.data);
    const fs::path train_manifest = fs::is_directory(root) ? root / "train.manifest" : root;
    const auto samples = load_samples(train_manifest);
    const Vocabulary vocab = manifest_vocabulary(train_manifest);

    std::optional<TrainState> resume;
    TrainConfig cfg;
    if (!o.checkpoint.empty()) {
        resume = load_checkpoint(o.checkpoint, &cfg);
        if (!o.config.empty()) {
            // keep the stored model; allow the schedule to be extended
            const TrainConfig extra = TrainConfig::parse(slurp(o.config));
            cfg.iterations = extra.iterations;
        }
    } else {
        cfg = train_config(o);
    }

    std::vector<Sample> eval_samples;
    Vocabulary eval_vocab;
    TrainHooks hooks;
    if (cfg.eval_interval > 0 && fs::is_directory(root)) {
        eval_samples = load_samples(root / "eval.manifest");
        eval_vocab = load_dataset_vocabulary(root);
        hooks.eval_samples = eval_samples;
        hooks.eval_vocab = &eval_vocab;
    }
    const auto result = train(cfg, samples, vocab, std::move(resume), hooks);

    const TrainState final_state{result.params, *result.optimizer, cfg.iterations};
    save_checkpoint(o.out, final_state, cfg);
    std::cout << result.log.to_tsv();
    return 0;
}

int cmd_eval(const Options& o) {
    if (o.checkpoint.empty()) throw CLI::ValidationError("--checkpoint", "required");
    TrainConfig cfg;
    const auto state = load_checkpoint(o.checkpoint, &cfg);
    const fs::path manifest = manifest_path(o.data);
    const auto samples = load_samples(manifest);
    const Vocabulary vocab = manifest_vocabulary(manifest);
    const auto result = evaluate(state.params, cfg.model, vocab, samples, parse_protocol(o.protocol), o.tau);
    std::cout << result.report.to_table();
    if (!o.out.empty()) {
        fs::create_directories(o.out);
        for (std::size_t k = 0; k < samples.size(); ++k) write_pgm(fs::path(o.out) / (samples[k].id + ".pgm"), result.predictions[k]);
        write_label_names(fs::path(o.out) / "labels.names", vocab.obj_parts());
    }
    return 0;
}

int cmd_gradcheck(const Options& o) {
    const auto cases = loss_gradient_suite(o.seed);
    bool ok = true;
    std::cout << std::scientific << std::setprecision(3);
    for (const auto& c : cases) {
        const bool pass = c.report.max_rel_error <= kGradTolerance;
        ok = ok && pass;
        std::cout << std::left << std::setw(28) << c.name << " max_rel_err=" << c.report.max_rel_error
                  << " inputs=" << c.inputs << (pass ? "  ok" : "  FAIL") << "\n";
    }
    return ok ? 0 : 2;
}

int cmd_ablate(const Options& o) {
    if (o.data.empty()) throw CLI::ValidationError("--data", "required");
    const fs::path root(o.data);
    const auto train_samples = load_samples(root / "train.manifest");
    const auto eval_samples = load_samples(root / "eval.manifest");
    const Vocabulary train_vocab = manifest_vocabulary(root / "train.manifest");
    const Vocabulary eval_vocab = load_dataset_vocabulary(root);
    std::vector<AblationCell> cells;
    if (o.axis == "comp") cells = comp_loss_axis();
    else if (o.axis == "guidance") cells = guidance_axis();
    else throw CLI::ValidationError("--axis", "expected comp or guidance");
    std::vector<std::uint64_t> seeds = o.seeds;
    if (seeds.empty()) seeds.push_back(o.seed);
    const AblationData data{train_samples, &train_vocab, eval_samples, &eval_vocab};
    const auto rows = run_ablation(train_config(o), cells, seeds, data, o.tau);
    const std::string table = ablation_table(rows);
    std::cout << table;
    if (!o.out.empty()) {
        std::ofstream out(o.out);
        if (!out) throw std::runtime_error("cannot write " + o.out);
        out << table;
    }
    return 0;
}

// Cost slice for one class as an 8-bit graymap: cosine in [-1, 1] maps to [0, 255].
LabelMap cost_slice(const Array<float>& cost, std::size_t column, std::size_t h, std::size_t w) {
    LabelMap m(w, h);
    for (std::size_t i = 0; i < h * w; ++i) {
        const double c = std::clamp<double>(cost.at(i, column), -1.0, 1.0);
        m.labels[i] = static_cast<std::uint8_t>(std::lround((c + 1.0) * 127.5));
    }
    return m;
}

int cmd_inspect(const Options& o) {
    if (o.checkpoint.empty()) throw CLI::ValidationError("--checkpoint", "required");
    if (o.class_name.empty()) throw CLI::ValidationError("--class", "required");
    if (o.out.empty()) throw CLI::ValidationError("--out", "required");
    TrainConfig cfg;
    const auto state = load_checkpoint(o.checkpoint, &cfg);
    const fs::path manifest = manifest_path(o.data);
    const auto samples = load_samples(manifest);
    const Vocabulary vocab = manifest_vocabulary(manifest);
    if (o.sample >= samples.size()) throw CLI::ValidationError("--sample", "out of range");
    const Sample& s = samples[o.sample];
    const std::size_t q = vocab.obj_part_index(o.class_name);

    Tape<float> tape;
    const BoundParams bound = BoundParams::bind(tape, state.params, false);
    const ModelOutputs out = forward(tape, s.embeddings, bound, vocab, cfg.model);
    const std::size_t h = s.embeddings.height, w = s.embeddings.width;

    struct Slice {
        std::string level;
        const Array<float>* cost;
        std::size_t column;
    };
    std::vector<Slice> slices{{"obj_part", &tape.value(out.cost_obj_part), q}};
    if (out.cost_obj) slices.push_back({"obj", &tape.value(*out.cost_obj), vocab.object_of(q)});
    if (out.cost_part) slices.push_back({"part", &tape.value(*out.cost_part), vocab.part_of(q)});

    fs::create_directories(o.out);
    std::cout << std::fixed << std::setprecision(4);
    for (const auto& sl : slices) {
        const fs::path file = fs::path(o.out) / (s.id + "_" + sl.level + ".pgm");
        write_pgm(file, cost_slice(*sl.cost, sl.column, h, w));
        double lo = 1e9, hi = -1e9;
        for (std::size_t i = 0; i < h * w; ++i) {
            lo = std::min<double>(lo, sl.cost->at(i, sl.column));
            hi = std::max<double>(hi, sl.cost->at(i, sl.column));
        }
        std::cout << sl.level << "\t" << file.filename().string() << "\tmin=" << lo << "\tmax=" << hi << "\n";
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Open-vocabulary part segmentation on synthetic scenes", "partcat"};
    app.require_subcommand(1, 1);
    Options o;

    auto seed_opt = [&o](CLI::App* c) {
        c->add_option_function<std::uint64_t>("--seed", [&o](std::uint64_t v) { o.seed = v; o.seed_set = true; },
                                              "random seed");
    };
    auto config_opt = [&o](CLI::App* c, const char* what) { c->add_option("--config", o.config, what)->check(CLI::ExistingFile); };

    auto* make = app.add_subcommand("make-data", "generate a synthetic dataset");
    config_opt(make, "scene spec (key=value)");
    seed_opt(make);
    make->add_option("--classes", o.classes, "class list")->check(CLI::ExistingFile);
    make->add_option("--n-train", o.n_train, "training samples");
    make->add_option("--n-eval", o.n_eval, "evaluation samples");
    make->add_option("--out", o.out, "output directory");

    auto* tr = app.add_subcommand("train", "train a model");
    config_opt(tr, "training config (key=value)");
    seed_opt(tr);
    tr->add_option("--data", o.data, "dataset directory or train manifest");
    tr->add_option("--comp", o.comp, "compositional loss: sm, l1 or off");
    tr->add_option("--guidance", o.guidance, "none, obj, part, obj,part or all");
    tr->add_option("--checkpoint", o.checkpoint, "resume from this checkpoint")->check(CLI::ExistingFile);
    tr->add_option("--out", o.out, "checkpoint to write");

    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
    seed_opt(ev);
    ev->add_option("--checkpoint", o.checkpoint, "checkpoint")->check(CLI::ExistingFile);
    ev->add_option("--data", o.data, "dataset directory or manifest");
    ev->add_option("--protocol", o.protocol, "pred-all or oracle-obj");
    ev->add_option("--tau", o.tau, "Pred-All threshold");
    ev->add_option("--out", o.out, "directory for predicted label maps");

    auto* gc = app.add_subcommand("gradcheck", "finite-difference check of every loss");
    seed_opt(gc);

    auto* ab = app.add_subcommand("ablate", "run an ablation axis");
    config_opt(ab, "base training config");
    seed_opt(ab);
    ab->add_option("--seeds", o.seeds, "several seeds (overrides --seed)");
    ab->add_option("--data", o.data, "dataset directory");
    ab->add_option("--axis", o.axis, "comp or guidance");
    ab->add_option("--tau", o.tau, "Pred-All threshold");
    ab->add_option("--out", o.out, "table file");

    auto* in = app.add_subcommand("inspect", "dump cost-volume slices for one class");
    seed_opt(in);
    in->add_option("--checkpoint", o.checkpoint, "checkpoint")->check(CLI::ExistingFile);
    in->add_option("--data", o.data, "dataset directory or manifest");
    in->add_option("--class", o.class_name, "object-specific part, e.g. \"cat's head\"");
    in->add_option("--sample", o.sample, "sample index in the manifest");
    in->add_option("--out", o.out, "output directory");

    if (argc <= 1) {
        std::cerr << app.help();
        return 1;
    }
    try {
        app.parse(argc, argv);
        apply_thread_cap();
    } catch (const CLI::CallForHelp& e) {
        std::cout << app.help();
        return 0;
    } catch (const CLI::ParseError& e) {
        std::cerr << e.what() << "\n" << app.help();
        return 1;
    }

    try {
        if (*make) return cmd_make_data(o);
        if (*tr) return cmd_train(o);
        if (*ev) return cmd_eval(o);
        if (*gc) return cmd_gradcheck(o);
        if (*ab) return cmd_ablate(o);
        if (*in) return cmd_inspect(o);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 1;
}
