#include "partcat/trainer.hpp"

#include <charconv>
#include <cmath>
#include <exception>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "partcat/data.hpp"
#include "partcat/rng.hpp"

namespace partcat {

namespace {

std::string trim(const std::string& s) {
    const auto first = s.find_first_not_of(" \t\r\n");
    if (first == std::string::npos) return {};
    const auto last = s.find_last_not_of(" \t\r\n");
    return s.substr(first, last - first + 1);
}

template <typename N>
N parse_number(const std::string& key, const std::string& value) {
    N out{};
    const auto* end = value.data() + value.size();
    const auto [ptr, ec] = std::from_chars(value.data(), end, out);
    if (ec != std::errc{} || ptr != end) {
        throw ConfigError("config key '" + key + "': cannot parse '" + value + "'");
    }
    return out;
}

std::vector<std::size_t> epoch_permutation(std::uint64_t seed, std::size_t n, std::size_t epoch) {
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    Rng rng(mix_seed(seed, 0xe90c0000ULL + epoch));
    rng.shuffle(perm);
    return perm;
}

bool all_zero(const Array<float>& a) {
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i] != 0.0f) return false;
    }
    return true;
}

TensorRecord scalar_record(const std::string& name, double v) {
    return TensorRecord::from(name, Array<double>(Shape{1}, std::vector<double>{v}));
}

double scalar_from(const std::vector<TensorRecord>& records, const std::string& name) {
    const Array<double> a = find_record(records, name).to_array<double>();
    if (a.size() != 1) throw DataError("record '" + name + "' must hold one value");
    return a[0];
}

TrainState fresh_state(const TrainConfig& cfg) {
    ModelParams<float> params = ModelParams<float>::init(cfg.model);
    AdamW opt(params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay);
    return TrainState{std::move(params), std::move(opt), 0};
}

}  // namespace

// ---- config -----------------------------------------------------------------

void TrainConfig::validate() const {
    model.validate();
    weights.validate();
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) throw ConfigError("lr must be finite and >= 0");
    if (batch_size == 0) throw ConfigError("batch_size must be at least 1");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
        throw ConfigError("adam betas must lie in [0, 1)");
    }
    if (!(adam_eps > 0.0)) throw ConfigError("adam_eps must be positive");
    if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be >= 0");
    if (checkpoint_interval != 0 && checkpoint_dir.empty()) {
        throw ConfigError("checkpoint_interval set without checkpoint_dir");
    }
}

TrainConfig TrainConfig::parse(const std::string& text) {
    TrainConfig cfg;
    std::string model_text;
    std::optional<std::uint64_t> seed, shuffle_seed;
    std::stringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const std::string t = trim(line);
        if (t.empty() || t.front() == '#') continue;
        const auto eq = t.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("config line " + std::to_string(lineno) + ": expected key=value");
        }
        const std::string key = trim(t.substr(0, eq));
        const std::string value = trim(t.substr(eq + 1));
        if (key == "lr") cfg.learning_rate = parse_number<double>(key, value);
        else if (key == "iterations") cfg.iterations = parse_number<std::size_t>(key, value);
        else if (key == "batch_size") cfg.batch_size = parse_number<std::size_t>(key, value);
        else if (key == "lambda_obj") cfg.weights.obj = parse_number<double>(key, value);
        else if (key == "lambda_part") cfg.weights.part = parse_number<double>(key, value);
        else if (key == "lambda_comp") cfg.weights.comp = parse_number<double>(key, value);
        else if (key == "comp_mode") cfg.comp_mode = parse_comp_mode(value);
        else if (key == "divergence") {
            if (value == "skl" || value == "symmetric_kl") cfg.divergence = Divergence::symmetric_kl;
            else if (value == "js" || value == "jensen_shannon") cfg.divergence = Divergence::jensen_shannon;
            else throw ConfigError("unknown divergence '" + value + "'");
        }
        else if (key == "beta1") cfg.beta1 = parse_number<double>(key, value);
        else if (key == "beta2") cfg.beta2 = parse_number<double>(key, value);
        else if (key == "adam_eps") cfg.adam_eps = parse_number<double>(key, value);
        else if (key == "weight_decay") cfg.weight_decay = parse_number<double>(key, value);
        else if (key == "seed") seed = parse_number<std::uint64_t>(key, value);
        else if (key == "shuffle_seed") shuffle_seed = parse_number<std::uint64_t>(key, value);
        else if (key == "checkpoint_interval") cfg.checkpoint_interval = parse_number<std::size_t>(key, value);
        else if (key == "checkpoint_dir") cfg.checkpoint_dir = value;
        else if (key == "eval_interval") cfg.eval_interval = parse_number<std::size_t>(key, value);
        else model_text += key + "=" + value + "\n";
    }
    cfg.model = ModelConfig::parse(model_text);
    if (seed) cfg.model.seed = cfg.seed = *seed;
    if (shuffle_seed) cfg.seed = *shuffle_seed;
    cfg.validate();
    return cfg;
}

TrainConfig TrainConfig::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str());
}

std::string TrainConfig::to_string() const {
    std::ostringstream out;
    out << std::setprecision(17);
    std::string model_text = model.to_string();
    // the model's seed line is re-emitted below as seed + shuffle_seed
    const auto pos = model_text.find("seed=");
    model_text.erase(pos, model_text.find('\n', pos) - pos + 1);
    out << model_text << "lr=" << learning_rate << "\niterations=" << iterations << "\nbatch_size=" << batch_size
        << "\nlambda_obj=" << weights.obj << "\nlambda_part=" << weights.part << "\nlambda_comp=" << weights.comp
        << "\ncomp_mode=" << comp_mode_name(comp_mode)
        << "\ndivergence=" << (divergence == Divergence::symmetric_kl ? "skl" : "js") << "\nbeta1=" << beta1
        << "\nbeta2=" << beta2 << "\nadam_eps=" << adam_eps << "\nweight_decay=" << weight_decay
        << "\nseed=" << model.seed << "\nshuffle_seed=" << seed << "\ncheckpoint_interval=" << checkpoint_interval
        << "\neval_interval=" << eval_interval << "\n";
    if (!checkpoint_dir.empty()) out << "checkpoint_dir=" << checkpoint_dir.string() << "\n";
    return out.str();
}

// ---- optimizer --------------------------------------------------------------

AdamW::AdamW(const ModelParams<float>& params, double lr, double beta1, double beta2, double eps, double decay)
    : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps), decay_(decay) {
    for (const auto& e : params.entries()) {
        m_.emplace_back(e.value.shape());
        v_.emplace_back(e.value.shape());
    }
    t_.assign(m_.size(), 0);
}

void AdamW::step(ModelParams<float>& params, const std::vector<Array<float>>& grads) {
    auto& entries = params.entries();
    if (grads.size() != entries.size() || m_.size() != entries.size()) {
        throw TrainError("optimizer: gradient count does not match parameters");
    }
    for (std::size_t k = 0; k < entries.size(); ++k) {
        const Array<float>& g = grads[k];
        Array<float>& p = entries[k].value;
        if (g.shape() != p.shape()) throw TrainError("optimizer: gradient shape mismatch for " + entries[k].name);
        if (all_zero(g)) continue;
        const auto t = static_cast<double>(++t_[k]);
        const double c1 = 1.0 - std::pow(beta1_, t);
        const double c2 = 1.0 - std::pow(beta2_, t);
        for (std::size_t i = 0; i < p.size(); ++i) {
            const double gi = g[i];
            const double m = beta1_ * m_[k][i] + (1.0 - beta1_) * gi;
            const double v = beta2_ * v_[k][i] + (1.0 - beta2_) * gi * gi;
            m_[k][i] = static_cast<float>(m);
            v_[k][i] = static_cast<float>(v);
            const double update = (m / c1) / (std::sqrt(v / c2) + eps_) + decay_ * p[i];
            p[i] = static_cast<float>(p[i] - lr_ * update);
        }
    }
}

// ---- log --------------------------------------------------------------------

std::string TrainLog::to_tsv() const {
    std::ostringstream out;
    out << std::setprecision(9);
    out << "iteration\ttotal\tobj_part\tdisentangle\tcomp\n";
    for (const auto& e : entries) {
        out << e.iteration << '\t' << e.total << '\t' << e.obj_part << '\t' << e.disentangle << '\t' << e.comp
            << '\n';
    }
    if (!snapshots.empty()) {
        out << "# eval\titeration\tmiou_seen\tmiou_unseen\th_iou\n";
        for (const auto& s : snapshots) {
            out << "# eval\t" << s.iteration << '\t' << s.miou_seen << '\t' << s.miou_unseen << '\t' << s.h_iou
                << '\n';
        }
    }
    return out.str();
}

// ---- training ---------------------------------------------------------------

SampleGradient sample_gradient(const ModelParams<float>& params, const TrainConfig& cfg, const Vocabulary& vocab,
                               const Sample& sample) {
    Tape<float> tape;
    const BoundParams bound = BoundParams::bind(tape, params, true);
    const ModelOutputs out = forward(tape, sample.embeddings, bound, vocab, cfg.model);
    const GroundTruth gt = make_ground_truth(sample, vocab);
    const LossTerms terms = total_loss(tape, out, gt, vocab, cfg.weights, cfg.comp_mode, cfg.divergence);
    tape.backward(terms.total);

    SampleGradient sg;
    sg.losses.total = tape.value(terms.total)[0];
    sg.losses.obj_part = tape.value(terms.obj_part)[0];
    if (terms.disentangle) sg.losses.disentangle = tape.value(*terms.disentangle)[0];
    if (terms.comp) sg.losses.comp = tape.value(*terms.comp)[0];
    for (const auto& e : params.entries()) sg.grads.push_back(tape.grad_or_zero(bound.at(e.name)));
    return sg;
}

std::size_t batch_sample_index(std::uint64_t seed, std::size_t dataset_size, std::size_t position) {
    if (dataset_size == 0) throw TrainError("empty training set");
    return epoch_permutation(seed, dataset_size, position / dataset_size)[position % dataset_size];
}

TrainResult train(const TrainConfig& cfg, std::span<const Sample> data, const Vocabulary& vocab,
                  std::optional<TrainState> resume, const TrainHooks& hooks) {
    cfg.validate();
    if (data.empty()) throw TrainError("empty training set");
    const std::size_t n = data.size();

    TrainState state = resume ? std::move(*resume) : fresh_state(cfg);
    const std::size_t nparams = state.params.entries().size();
    if (state.optimizer.steps().size() != nparams) throw TrainError("resumed optimizer does not match parameters");

    TrainLog log;
    std::size_t cached_epoch = static_cast<std::size_t>(-1);
    std::vector<std::size_t> perm;
    const std::size_t batch = cfg.batch_size;

    for (std::size_t it = state.iteration; it < cfg.iterations; ++it) {
        std::vector<std::size_t> picks(batch);
        for (std::size_t b = 0; b < batch; ++b) {
            const std::size_t pos = it * batch + b;
            if (pos / n != cached_epoch) {
                cached_epoch = pos / n;
                perm = epoch_permutation(cfg.seed, n, cached_epoch);
            }
            picks[b] = perm[pos % n];
        }

        std::vector<SampleGradient> per(batch);
        std::vector<std::exception_ptr> errors(batch);
#pragma omp parallel for schedule(static)
        for (std::size_t b = 0; b < batch; ++b) {
            try {
                per[b] = sample_gradient(state.params, cfg, vocab, data[picks[b]]);
            } catch (...) {
                errors[b] = std::current_exception();
            }
        }
        for (std::size_t b = 0; b < batch; ++b) {
            const Sample& s = data[picks[b]];
            try {
                if (errors[b]) std::rethrow_exception(errors[b]);
            } catch (const std::exception& e) {
                throw TrainError("iteration " + std::to_string(it) + ", sample " + s.id + ": " + e.what());
            }
            if (!std::isfinite(per[b].losses.total)) {
                throw TrainError("non-finite loss at iteration " + std::to_string(it) + " (sample " + s.id + ")");
            }
        }

        // fixed-order reduction keeps the result independent of the thread count
        LogEntry entry{it, 0, 0, 0, 0};
        std::vector<Array<float>> grads;
        grads.reserve(nparams);
        const double inv = 1.0 / static_cast<double>(batch);
        for (std::size_t k = 0; k < nparams; ++k) {
            Array<float> g(state.params.entries()[k].value.shape());
            for (std::size_t i = 0; i < g.size(); ++i) {
                double acc = 0.0;
                for (std::size_t b = 0; b < batch; ++b) acc += per[b].grads[k][i];
                g[i] = static_cast<float>(acc * inv);
            }
            grads.push_back(std::move(g));
        }
        for (std::size_t b = 0; b < batch; ++b) {
            entry.total += per[b].losses.total * inv;
            entry.obj_part += per[b].losses.obj_part * inv;
            entry.disentangle += per[b].losses.disentangle * inv;
            entry.comp += per[b].losses.comp * inv;
        }

        state.optimizer.step(state.params, grads);
        state.iteration = it + 1;
        log.entries.push_back(entry);
        if (hooks.on_iteration) hooks.on_iteration(entry);

        if (cfg.checkpoint_interval != 0 && state.iteration % cfg.checkpoint_interval == 0) {
            std::filesystem::create_directories(cfg.checkpoint_dir);
            save_checkpoint(cfg.checkpoint_dir / ("ckpt_" + std::to_string(state.iteration) + ".ptnsr"), state, cfg);
        }
        if (cfg.eval_interval != 0 && state.iteration % cfg.eval_interval == 0 && !hooks.eval_samples.empty()) {
            if (hooks.eval_vocab == nullptr) throw TrainError("evaluation snapshots need an evaluation vocabulary");
            const EvalResult r =
                evaluate(state.params, cfg.model, *hooks.eval_vocab, hooks.eval_samples, Protocol::pred_all);
            log.snapshots.push_back({state.iteration, r.report.miou_seen, r.report.miou_unseen, r.report.h_iou});
        }
    }
    return {std::move(state.params), std::move(log), std::move(state.optimizer)};
}

// ---- checkpoints ------------------------------------------------------------

void save_checkpoint(const std::filesystem::path& path, const TrainState& state, const TrainConfig& cfg) {
    std::vector<TensorRecord> records;
    const std::string text = cfg.to_string();
    records.push_back(TensorRecord::from_bytes("meta.config", {static_cast<std::uint32_t>(text.size())},
                                               std::vector<std::uint8_t>(text.begin(), text.end())));
    records.push_back(scalar_record("meta.iteration", static_cast<double>(state.iteration)));
    const auto& entries = state.params.entries();
    const auto& opt = state.optimizer;
    if (opt.steps().size() != entries.size()) throw TrainError("optimizer state does not match parameters");
    for (std::size_t k = 0; k < entries.size(); ++k) {
        const std::string& name = entries[k].name;
        records.push_back(TensorRecord::from("param/" + name, entries[k].value));
        records.push_back(TensorRecord::from("adam.m/" + name, opt.first_moments()[k]));
        records.push_back(TensorRecord::from("adam.v/" + name, opt.second_moments()[k]));
        records.push_back(scalar_record("adam.t/" + name, static_cast<double>(opt.steps()[k])));
    }
    write_tensor_container(path, records);
}

TrainState load_checkpoint(const std::filesystem::path& path, TrainConfig* cfg_out) {
    const auto records = read_tensor_container(path);
    const auto& text_bytes = find_record(records, "meta.config").bytes();
    const TrainConfig cfg = TrainConfig::parse(std::string(text_bytes.begin(), text_bytes.end()));

    // parameter order follows initialization, so shapes are checked against a fresh init
    ModelParams<float> params = ModelParams<float>::init(cfg.model);
    AdamW opt(params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay);
    auto& entries = params.entries();
    for (std::size_t k = 0; k < entries.size(); ++k) {
        const std::string& name = entries[k].name;
        auto load = [&](const std::string& key, Array<float>& dst) {
            Array<float> a = find_record(records, key).to_array<float>();
            if (a.shape() != dst.shape()) throw DataError(path.string() + ": '" + key + "' has the wrong shape");
            dst = std::move(a);
        };
        load("param/" + name, entries[k].value);
        load("adam.m/" + name, opt.first_moments()[k]);
        load("adam.v/" + name, opt.second_moments()[k]);
        opt.steps()[k] = static_cast<std::uint64_t>(scalar_from(records, "adam.t/" + name));
    }
    const auto iteration = static_cast<std::size_t>(scalar_from(records, "meta.iteration"));
    if (cfg_out) *cfg_out = cfg;
    return TrainState{std::move(params), std::move(opt), iteration};
}

// ---- ablations --------------------------------------------------------------

std::vector<AblationCell> comp_loss_axis() {
    const GuidanceLevels none{}, op{true, true, false};
    return {
        {"Cost Agg", ModelMode::disentangled, none, CompMode::off},
        {"+DINO", ModelMode::disentangled, op, CompMode::off},
        {"+DINO+comp-L1", ModelMode::disentangled, op, CompMode::l1},
        {"+DINO+comp-SM", ModelMode::disentangled, op, CompMode::softmax},
    };
}

std::vector<AblationCell> guidance_axis() {
    return {
        {"guide none", ModelMode::disentangled, {false, false, false}, CompMode::softmax},
        {"guide obj", ModelMode::disentangled, {true, false, false}, CompMode::softmax},
        {"guide part", ModelMode::disentangled, {false, true, false}, CompMode::softmax},
        {"guide obj+part", ModelMode::disentangled, {true, true, false}, CompMode::softmax},
    };
}

std::vector<AblationRow> run_ablation(const TrainConfig& base, const std::vector<AblationCell>& cells,
                                      const std::vector<std::uint64_t>& seeds, const AblationData& data,
                                      double tau) {
    if (data.train_vocab == nullptr || data.eval_vocab == nullptr) {
        throw TrainError("ablation needs training and evaluation vocabularies");
    }
    std::vector<AblationRow> rows;
    for (const auto& cell : cells) {
        for (const std::uint64_t seed : seeds) {
            TrainConfig cfg = base;
            cfg.model.mode = cell.mode;
            cfg.model.guidance = cell.guidance;
            cfg.comp_mode = cell.comp;
            cfg.model.seed = cfg.seed = seed;
            cfg.checkpoint_interval = 0;
            cfg.eval_interval = 0;
            const TrainResult trained = train(cfg, data.train, *data.train_vocab);
            AblationRow row{cell.label, seed, {}, {}, {}};
            row.pred_all = evaluate(trained.params, cfg.model, *data.eval_vocab, data.eval, Protocol::pred_all, tau)
                               .report;
            auto oracle = evaluate(trained.params, cfg.model, *data.eval_vocab, data.eval, Protocol::oracle_obj, tau);
            row.oracle_obj = std::move(oracle.report);
            row.oracle_predictions = std::move(oracle.predictions);
            rows.push_back(std::move(row));
        }
    }
    return rows;
}

std::string ablation_table(const std::vector<AblationRow>& rows) {
    std::ostringstream out;
    out << std::fixed << std::setprecision(2);
    out << std::left << std::setw(18) << "setting" << std::right << std::setw(6) << "seed" << std::setw(9)
        << "PA seen" << std::setw(9) << "PA unsn" << std::setw(9) << "PA h" << std::setw(9) << "OO seen"
        << std::setw(9) << "OO unsn" << std::setw(9) << "OO h" << '\n';
    for (const auto& r : rows) {
        out << std::left << std::setw(18) << r.label << std::right << std::setw(6) << r.seed << std::setw(9)
            << 100 * r.pred_all.miou_seen << std::setw(9) << 100 * r.pred_all.miou_unseen << std::setw(9)
            << 100 * r.pred_all.h_iou << std::setw(9) << 100 * r.oracle_obj.miou_seen << std::setw(9)
            << 100 * r.oracle_obj.miou_unseen << std::setw(9) << 100 * r.oracle_obj.h_iou << '\n';
    }
    return out.str();
}

}  // namespace partcat
