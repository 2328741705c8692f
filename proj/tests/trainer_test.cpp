#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <limits>
#include <set>

#include "partcat/data.hpp"
#include "partcat/trainer.hpp"

using namespace partcat;

namespace {

struct Fixture {
    Vocabulary vocab;
    Splits splits;
};

const Fixture& fixture() {
    static const Fixture f = [] {
        auto v = Vocabulary::build(load_class_list(std::filesystem::path(PARTCAT_DATA_DIR) / "toy_parts.txt"));
        SceneSpec spec;
        spec.height = spec.width = 6;
        spec.c = 8;
        spec.d_dino = 4;
        spec.seed = 2;
        auto s = generate_splits(spec, v, 12, 6, 4);
        return Fixture{std::move(v), std::move(s)};
    }();
    return f;
}

TrainConfig tiny_config() {
    TrainConfig cfg;
    cfg.model.c = 8;
    cfg.model.d = 8;
    cfg.model.d_dino = 4;
    cfg.model.heads = 2;
    cfg.model.ffn_mult = 1;
    cfg.model.max_grid = 6;
    cfg.model.seed = 1;
    cfg.iterations = 6;
    cfg.batch_size = 2;
    cfg.learning_rate = 1e-3;
    cfg.seed = 1;
    return cfg;
}

bool bit_equal(const ModelParams<float>& a, const ModelParams<float>& b) {
    if (a.entries().size() != b.entries().size()) return false;
    for (std::size_t k = 0; k < a.entries().size(); ++k) {
        const auto& x = a.entries()[k];
        const auto& y = b.entries()[k];
        if (x.name != y.name || x.value.shape() != y.value.shape()) return false;
        if (std::memcmp(x.value.data(), y.value.data(), x.value.size() * sizeof(float)) != 0) return false;
    }
    return true;
}

std::filesystem::path temp_dir(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / ("partcat_trainer_test_" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

}  // namespace

TEST(TrainConfig, TextRoundTripAndSeedKeys) {
    auto cfg = tiny_config();
    cfg.weights.comp = 0.25;
    cfg.comp_mode = CompMode::l1;
    cfg.divergence = Divergence::jensen_shannon;
    const auto back = TrainConfig::parse(cfg.to_string());
    EXPECT_EQ(back.to_string(), cfg.to_string());
    EXPECT_EQ(back.comp_mode, CompMode::l1);

    const auto s = TrainConfig::parse("seed=9\n");
    EXPECT_EQ(s.seed, 9u);
    EXPECT_EQ(s.model.seed, 9u);
    const auto t = TrainConfig::parse("seed=9\nshuffle_seed=4\n");
    EXPECT_EQ(t.seed, 4u);
    EXPECT_EQ(t.model.seed, 9u);
}

TEST(TrainConfig, Defaults) {
    const TrainConfig cfg;
    EXPECT_EQ(cfg.learning_rate, 1e-4);
    EXPECT_EQ(cfg.iterations, 2000u);
    EXPECT_EQ(cfg.batch_size, 4u);
    EXPECT_EQ(cfg.beta1, 0.9);
    EXPECT_EQ(cfg.beta2, 0.999);
    EXPECT_EQ(cfg.adam_eps, 1e-8);
    EXPECT_EQ(cfg.weight_decay, 1e-4);
}

TEST(TrainConfig, Rejections) {
    EXPECT_THROW(TrainConfig::parse("lr=-1\n"), std::exception);
    EXPECT_THROW(TrainConfig::parse("batch_size=0\n"), std::exception);
    EXPECT_THROW(TrainConfig::parse("divergence=hellinger\n"), std::exception);
    EXPECT_THROW(TrainConfig::parse("bogus=1\n"), std::exception);
}

TEST(BatchOrder, EachEpochIsAPermutation) {
    for (std::size_t n : {1u, 5u, 12u}) {
        for (std::size_t epoch = 0; epoch < 4; ++epoch) {
            std::set<std::size_t> seen;
            for (std::size_t k = 0; k < n; ++k) seen.insert(batch_sample_index(3, n, epoch * n + k));
            EXPECT_EQ(seen.size(), n);
            EXPECT_LT(*seen.rbegin(), n);
        }
    }
    bool differs = false;
    for (std::size_t k = 0; k < 12; ++k) differs = differs || batch_sample_index(3, 12, k) != batch_sample_index(3, 12, 12 + k);
    EXPECT_TRUE(differs);
    EXPECT_EQ(batch_sample_index(3, 12, 7), batch_sample_index(3, 12, 7));
}

TEST(AdamW, FirstStepMatchesHandComputation) {
    ModelParams<float> p;
    p.add("w", Array<float>(Shape{2}, {1.0f, -2.0f}));
    AdamW opt(p, 0.1, 0.9, 0.999, 1e-8, 0.01);
    opt.step(p, {Array<float>(Shape{2}, {0.5f, -4.0f})});
    // after one step m/c1 = g and v/c2 = g^2, so the update is lr * (sign(g) + decay * p)
    const double e0 = 1.0 - 0.1 * (0.5 / (0.5 + 1e-8) + 0.01 * 1.0);
    const double e1 = -2.0 - 0.1 * (-4.0 / (4.0 + 1e-8) + 0.01 * -2.0);
    EXPECT_NEAR(p.at("w")[0], e0, 1e-6);
    EXPECT_NEAR(p.at("w")[1], e1, 1e-6);
    EXPECT_EQ(opt.steps()[0], 1u);
}

TEST(AdamW, ZeroGradientLeavesParameterAlone) {
    ModelParams<float> p;
    p.add("a", Array<float>(Shape{2}, {1.0f, 2.0f}));
    p.add("b", Array<float>(Shape{1}, {3.0f}));
    AdamW opt(p, 0.1, 0.9, 0.999, 1e-8, 0.5);
    opt.step(p, {Array<float>(Shape{2}, 0.0f), Array<float>(Shape{1}, {1.0f})});
    EXPECT_EQ(p.at("a")[0], 1.0f);
    EXPECT_EQ(p.at("a")[1], 2.0f);
    EXPECT_NE(p.at("b")[0], 3.0f);
    EXPECT_EQ(opt.steps()[0], 0u);
    EXPECT_EQ(opt.steps()[1], 1u);
    EXPECT_THROW(opt.step(p, {Array<float>(Shape{2}, 0.0f)}), std::exception);
}

TEST(Train, ZeroLearningRateKeepsParameters) {
    const auto& f = fixture();
    auto cfg = tiny_config();
    cfg.learning_rate = 0;
    cfg.weight_decay = 0;
    const auto r = train(cfg, f.splits.train, f.splits.train_vocab);
    EXPECT_TRUE(bit_equal(r.params, ModelParams<float>::init(cfg.model)));
    EXPECT_EQ(r.log.entries.size(), cfg.iterations);
}

TEST(Train, SameSeedSameLogAndParameters) {
    const auto& f = fixture();
    const auto a = train(tiny_config(), f.splits.train, f.splits.train_vocab);
    const auto b = train(tiny_config(), f.splits.train, f.splits.train_vocab);
    EXPECT_EQ(a.log, b.log);
    EXPECT_EQ(a.log.to_tsv(), b.log.to_tsv());
    EXPECT_TRUE(bit_equal(a.params, b.params));
    auto other = tiny_config();
    other.seed = 2;
    EXPECT_NE(train(other, f.splits.train, f.splits.train_vocab).log, a.log);
}

TEST(Train, LogTermsAddUp) {
    const auto& f = fixture();
    const auto cfg = tiny_config();
    const auto r = train(cfg, f.splits.train, f.splits.train_vocab);
    for (const auto& e : r.log.entries) {
        EXPECT_TRUE(std::isfinite(e.total));
        EXPECT_NEAR(e.total,
                    e.obj_part + e.disentangle + cfg.weights.comp * e.comp, 1e-4);
    }
}

TEST(Train, ResumeFromCheckpointIsBitExact) {
    const auto& f = fixture();
    const auto dir = temp_dir("resume");
    auto cfg = tiny_config();
    cfg.checkpoint_interval = 3;
    cfg.checkpoint_dir = dir;
    const auto full = train(cfg, f.splits.train, f.splits.train_vocab);
    ASSERT_TRUE(std::filesystem::exists(dir / "ckpt_3.ptnsr"));

    TrainConfig stored;
    auto state = load_checkpoint(dir / "ckpt_3.ptnsr", &stored);
    EXPECT_EQ(state.iteration, 3u);
    EXPECT_EQ(stored.to_string(), cfg.to_string());
    stored.checkpoint_interval = 0;
    const auto resumed = train(stored, f.splits.train, f.splits.train_vocab, std::move(state));
    EXPECT_TRUE(bit_equal(resumed.params, full.params));
    ASSERT_EQ(resumed.log.entries.size(), 3u);
    for (std::size_t k = 0; k < 3; ++k) EXPECT_EQ(resumed.log.entries[k], full.log.entries[3 + k]);
}

TEST(Train, CheckpointRoundTripKeepsOptimizerState) {
    const auto& f = fixture();
    const auto dir = temp_dir("ckpt");
    auto cfg = tiny_config();
    cfg.iterations = 2;
    auto params = ModelParams<float>::init(cfg.model);
    TrainState st{params, AdamW(params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay), 0};
    auto g = sample_gradient(st.params, cfg, f.splits.train_vocab, f.splits.train[0]);
    st.optimizer.step(st.params, g.grads);
    st.iteration = 1;
    save_checkpoint(dir / "c.ptnsr", st, cfg);
    const auto back = load_checkpoint(dir / "c.ptnsr");
    EXPECT_TRUE(bit_equal(back.params, st.params));
    EXPECT_EQ(back.optimizer.steps(), st.optimizer.steps());
    EXPECT_EQ(back.iteration, 1u);
    for (std::size_t k = 0; k < st.optimizer.first_moments().size(); ++k) {
        const auto& a = st.optimizer.second_moments()[k];
        const auto& b = back.optimizer.second_moments()[k];
        EXPECT_EQ(std::memcmp(a.data(), b.data(), a.size() * sizeof(float)), 0);
    }
    EXPECT_THROW(load_checkpoint(dir / "missing.ptnsr"), std::exception);
}

TEST(Train, NonFiniteLossNamesIteration) {
    const auto& f = fixture();
    std::vector<Sample> data(f.splits.train.begin(), f.splits.train.end());
    for (auto& s : data) s.embeddings.visual[0] = std::numeric_limits<float>::quiet_NaN();
    try {
        train(tiny_config(), data, f.splits.train_vocab);
        FAIL() << "expected a training error";
    } catch (const TrainError& e) {
        EXPECT_NE(std::string(e.what()).find("iteration 0"), std::string::npos) << e.what();
    }
}

TEST(Train, EmptyDataRejected) {
    const auto& f = fixture();
    EXPECT_THROW(train(tiny_config(), std::span<const Sample>{}, f.splits.train_vocab), std::exception);
}

TEST(Train, EvalSnapshotsRecorded) {
    const auto& f = fixture();
    auto cfg = tiny_config();
    cfg.eval_interval = 3;
    TrainHooks hooks;
    hooks.eval_samples = f.splits.eval;
    hooks.eval_vocab = &f.splits.full;
    std::size_t calls = 0;
    hooks.on_iteration = [&](const LogEntry&) { ++calls; };
    const auto r = train(cfg, f.splits.train, f.splits.train_vocab, std::nullopt, hooks);
    EXPECT_EQ(calls, cfg.iterations);
    ASSERT_EQ(r.log.snapshots.size(), 2u);
    EXPECT_EQ(r.log.snapshots[0].iteration, 3u);
}

TEST(Train, LossFallsOverTwoHundredIterations) {
    const auto& f = fixture();
    std::vector<double> ratios;
    for (std::uint64_t seed : {1u, 2u, 3u}) {
        auto cfg = tiny_config();
        cfg.iterations = 201;
        cfg.seed = cfg.model.seed = seed;
        const auto r = train(cfg, f.splits.train, f.splits.train_vocab);
        ratios.push_back(r.log.entries[200].total / r.log.entries[0].total);
    }
    std::sort(ratios.begin(), ratios.end());
    EXPECT_LT(ratios[1], 1.0);
}

TEST(Ablation, AxesHaveFourCells) {
    const auto comp = comp_loss_axis();
    ASSERT_EQ(comp.size(), 4u);
    EXPECT_EQ(comp[0].guidance, GuidanceLevels{});
    EXPECT_EQ(comp[0].comp, CompMode::off);
    EXPECT_EQ(comp[3].comp, CompMode::softmax);
    const auto g = guidance_axis();
    ASSERT_EQ(g.size(), 4u);
    for (const auto& c : g) EXPECT_EQ(c.comp, CompMode::softmax);
}

TEST(Ablation, SingleCellMatchesTrainThenEvaluate) {
    const auto& f = fixture();
    const auto cfg = tiny_config();
    AblationCell cell{"x", ModelMode::disentangled, {true, true, false}, CompMode::softmax};
    AblationData data{f.splits.train, &f.splits.train_vocab, f.splits.eval, &f.splits.full};
    const auto rows = run_ablation(cfg, {cell}, {1}, data);
    ASSERT_EQ(rows.size(), 1u);

    auto direct = cfg;
    direct.model.guidance = cell.guidance;
    direct.comp_mode = cell.comp;
    direct.seed = direct.model.seed = 1;
    const auto r = train(direct, f.splits.train, f.splits.train_vocab);
    const auto pa = evaluate(r.params, direct.model, f.splits.full, f.splits.eval, Protocol::pred_all, 0.5);
    const auto oo = evaluate(r.params, direct.model, f.splits.full, f.splits.eval, Protocol::oracle_obj, 0.5);
    EXPECT_EQ(rows[0].pred_all.to_key_values(), pa.report.to_key_values());
    EXPECT_EQ(rows[0].oracle_obj.to_key_values(), oo.report.to_key_values());
    EXPECT_EQ(rows[0].label, "x");
}

TEST(Ablation, FourCellAxisEmitsFourRowsPerSeed) {
    const auto& f = fixture();
    auto cfg = tiny_config();
    cfg.iterations = 2;
    AblationData data{f.splits.train, &f.splits.train_vocab, f.splits.eval, &f.splits.full};
    const auto rows = run_ablation(cfg, comp_loss_axis(), {1, 2}, data);
    EXPECT_EQ(rows.size(), 8u);
    const auto table = ablation_table(rows);
    for (const auto& c : comp_loss_axis()) EXPECT_NE(table.find(c.label), std::string::npos);
}
