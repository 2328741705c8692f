#include "partcat/gradsuite.hpp"

#include "partcat/model.hpp"
#include "partcat/ops.hpp"
#include "partcat/rng.hpp"

namespace partcat {

namespace {

Array<double> uniform(Shape shape, Rng& rng, double lo, double hi) {
    Array<double> a(std::move(shape));
    for (std::size_t i = 0; i < a.size(); ++i) a[i] = rng.uniform(lo, hi);
    return a;
}

Vocabulary suite_vocab() {
    return Vocabulary::build({"cat's head", "cat's leg", "dog's head", "dog's tail", "bird's wing", "bird's head"},
                             {true, true, false, true, true, false});
}

std::size_t count(const std::vector<Array<double>>& xs) {
    std::size_t n = 0;
    for (const auto& x : xs) n += x.size();
    return n;
}

}  // namespace

GroundTruth random_ground_truth(const Vocabulary& vocab, std::size_t height, std::size_t width, std::uint64_t seed) {
    Rng rng(mix_seed(seed, 0x6a7));
    const std::size_t n = height * width;
    GroundTruth gt{Array<float>(Shape{n, vocab.num_objects()}), Array<float>(Shape{n, vocab.num_parts()}),
                   Array<float>(Shape{n, vocab.num_obj_parts()}), Array<float>(Shape{n}), Array<float>(Shape{n})};
    for (std::size_t i = 0; i < n; ++i) {
        if (rng.uniform() < 0.75) {
            const std::size_t q = rng.below(vocab.num_obj_parts());
            gt.obj_part.at(i, q) = 1.0f;
            gt.obj.at(i, vocab.object_of(q)) = 1.0f;
            gt.part.at(i, vocab.part_of(q)) = 1.0f;
        }
        gt.pixel_weight[i] = rng.uniform() < 1.0 / 6.0 ? 0.0f : 1.0f;
        gt.cost_weight[i] = gt.pixel_weight[i];
    }
    return gt;
}

std::vector<GradientCase> loss_gradient_suite(std::uint64_t seed) {
    Rng rng(mix_seed(seed, 0x9c));
    const Vocabulary vocab = suite_vocab();
    const std::size_t h = 4, w = 4, n = h * w;
    const std::size_t no = vocab.num_objects(), np = vocab.num_parts(), nq = vocab.num_obj_parts();
    const GroundTruth gt = random_ground_truth(vocab, h, w, seed);
    std::vector<GradientCase> out;
    auto run = [&out](std::string name, const ScalarFn& f, const std::vector<Array<double>>& inputs) {
        out.push_back({std::move(name), grad_check(f, inputs), count(inputs)});
    };

    // probabilities kept away from the clamp so the loss is smooth
    const auto prob = [&](std::size_t classes) { return uniform(Shape{n, classes}, rng, 0.05, 0.95); };

    run("bce", [&](Tape<double>& t, std::span<const Var> x) { return bce(t, gt.obj_part, x[0]); }, {prob(nq)});

    run("disentanglement_loss",
        [&](Tape<double>& t, std::span<const Var> x) {
            ModelOutputs o;
            o.pred_obj = x[0];
            o.pred_part = x[1];
            return disentanglement_loss(t, o, gt, LossWeights{0.7, 1.3, 1.0});
        },
        {prob(no), prob(np)});

    run("obj_part_loss",
        [&](Tape<double>& t, std::span<const Var> x) {
            ModelOutputs o;
            o.pred_obj_part = x[0];
            return obj_part_loss(t, o, gt);
        },
        {prob(nq)});

    const std::vector<Array<double>> costs{uniform(Shape{n, no}, rng, -0.9, 0.9),
                                           uniform(Shape{n, nq}, rng, -0.9, 0.9)};
    for (const auto& [label, mode, div] :
         {std::tuple{"compositional_loss sm", CompMode::softmax, Divergence::symmetric_kl},
          std::tuple{"compositional_loss l1", CompMode::l1, Divergence::symmetric_kl},
          std::tuple{"compositional_loss sm js", CompMode::softmax, Divergence::jensen_shannon}}) {
        run(label,
            [&, mode = mode, div = div](Tape<double>& t, std::span<const Var> x) {
                auto [p, pq] = class_distributions(t, x[0], x[1], mode);
                return compositional_loss(t, p, aggregate_to_object(t, pq, vocab), div, gt.cost_weight.span());
            },
            costs);
    }

    ModelConfig cfg;
    cfg.c = 4;
    cfg.d = 4;
    cfg.d_dino = 2;
    cfg.heads = 2;
    cfg.ffn_mult = 1;
    cfg.max_grid = 4;
    cfg.pos_bias = true;
    cfg.guidance = {true, true, false};
    cfg.seed = seed;
    ModelParams<double> params = ModelParams<double>::init(cfg);
    std::vector<std::string> names;
    std::vector<Array<double>> inputs;
    for (auto& e : params.entries()) {
        names.push_back(e.name);
        Array<double> v = e.value;
        for (std::size_t i = 0; i < v.size(); ++i) v[i] += rng.uniform(-0.3, 0.3);
        inputs.push_back(std::move(v));
    }
    EmbeddingBundle<double> bundle;
    bundle.height = h;
    bundle.width = w;
    bundle.visual = uniform(Shape{n, cfg.c}, rng, -1, 1);
    bundle.language_obj = uniform(Shape{no, cfg.c}, rng, -1, 1);
    bundle.language_part = uniform(Shape{np, cfg.c}, rng, -1, 1);
    bundle.language_obj_part = uniform(Shape{nq, cfg.c}, rng, -1, 1);
    bundle.structural = uniform(Shape{n, cfg.d_dino}, rng, -1, 1);
    run("total_loss full forward",
        [&](Tape<double>& t, std::span<const Var> x) {
            const BoundParams p = BoundParams::wrap(names, x);
            const ModelOutputs o = forward(t, bundle, p, vocab, cfg);
            return total_loss(t, o, gt, vocab, LossWeights{}, CompMode::softmax).total;
        },
        inputs);
    return out;
}

}  // namespace partcat
