#include "partcat/model.hpp"

#include <cstdlib>

#include "partcat/ops.hpp"

namespace partcat {

namespace {

class StageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

template <typename F>
auto staged(const std::string& stage, F&& fn) -> decltype(fn()) {
    try {
        return fn();
    } catch (const StageError&) {
        throw;
    } catch (const ShapeError& e) {
        throw ShapeError(stage + ": " + e.what());
    } catch (const NonFiniteError& e) {
        throw NonFiniteError(stage + ": " + e.what());
    } catch (const std::exception& e) {
        throw StageError(stage + ": " + e.what());
    }
}

// Pre-norm block: LN -> attention -> projection -> residual -> LN -> FFN -> residual.
// `q_extra`/`k_extra` are added to every batch slice of the query/key projections.
template <typename T>
Var transformer_block(Tape<T>& t, Var x, const BoundParams& p, const std::string& pre,
                      std::size_t heads, std::optional<Var> q_extra, std::optional<Var> k_extra,
                      std::optional<Var> bias) {
    using namespace ops;
    Var h = layer_norm(t, x, p.at(pre + ".ln1.gain"), p.at(pre + ".ln1.bias"));
    Var q = linear(t, h, p.at(pre + ".wq"));
    Var k = linear(t, h, p.at(pre + ".wk"));
    Var v = linear(t, h, p.at(pre + ".wv"));
    if (q_extra) q = add_broadcast(t, q, *q_extra);
    if (k_extra) k = add_broadcast(t, k, *k_extra);
    Var a = attention(t, q, k, v, heads, bias);
    x = add(t, x, linear(t, a, p.at(pre + ".wo"), p.at(pre + ".bo")));
    h = layer_norm(t, x, p.at(pre + ".ln2.gain"), p.at(pre + ".ln2.bias"));
    Var ff = gelu(t, linear(t, h, p.at(pre + ".ff1.w"), p.at(pre + ".ff1.b")));
    return add(t, x, linear(t, ff, p.at(pre + ".ff2.w"), p.at(pre + ".ff2.b")));
}

// [A x B] -> [B x A] via the rank-3 transpose.
template <typename T>
Var transpose2d(Tape<T>& t, Var x) {
    const Shape s = t.shape(x);
    Var y = ops::transpose01(t, ops::reshape(t, x, Shape{s[0], s[1], 1}));
    return ops::reshape(t, y, Shape{s[1], s[0]});
}

template <typename T>
Var run_branch(Tape<T>& t, Var cost, const std::string& branch, const EmbeddingBundle<T>& sample,
               std::optional<Var> guidance, const BoundParams& p, const ModelConfig& cfg) {
    const std::size_t h = sample.height, w = sample.width;
    Var f = staged(branch + " cost embedding", [&] {
        return embed_cost(t, cost, h, w, p.at(branch + ".embed.kernel"), p.at(branch + ".embed.bias"));
    });
    for (std::size_t l = 0; l < cfg.depth; ++l) {
        const std::string sa = branch + ".sa" + std::to_string(l);
        const std::string ca = branch + ".ca" + std::to_string(l);
        f = staged(sa + " spatial aggregation",
                   [&] { return spatial_aggregate(t, f, guidance, p, sa, cfg, h, w); });
        f = staged(ca + " class aggregation", [&] { return class_aggregate(t, f, p, ca, cfg); });
    }
    return f;
}

}  // namespace

std::vector<std::size_t> relative_position_index(std::size_t height, std::size_t width,
                                                 std::size_t max_grid, std::size_t heads) {
    if (height > max_grid || width > max_grid) {
        throw ShapeError("grid " + std::to_string(height) + "x" + std::to_string(width) +
                         " exceeds positional table side " + std::to_string(max_grid));
    }
    const std::size_t n = height * width;
    const std::size_t side = 2 * max_grid - 1;
    std::vector<std::size_t> index(heads * n * n);
    for (std::size_t hd = 0; hd < heads; ++hd) {
        for (std::size_t i = 0; i < n; ++i) {
            const std::size_t yi = i / width, xi = i % width;
            for (std::size_t j = 0; j < n; ++j) {
                const std::size_t yj = j / width, xj = j % width;
                const std::size_t dy = yi + max_grid - 1 - yj;
                const std::size_t dx = xi + max_grid - 1 - xj;
                index[(hd * n + i) * n + j] = (dy * side + dx) * heads + hd;
            }
        }
    }
    return index;
}

template <typename T>
Array<T> window_mask(std::size_t height, std::size_t width, std::size_t window, std::size_t heads) {
    const std::size_t n = height * width;
    const long r = static_cast<long>(window / 2);
    Array<T> mask(Shape{heads, n, n});
    for (std::size_t i = 0; i < n; ++i) {
        const long yi = static_cast<long>(i / width), xi = static_cast<long>(i % width);
        for (std::size_t j = 0; j < n; ++j) {
            const long yj = static_cast<long>(j / width), xj = static_cast<long>(j % width);
            const bool inside = std::labs(yi - yj) <= r && std::labs(xi - xj) <= r;
            for (std::size_t hd = 0; hd < heads; ++hd) mask[(hd * n + i) * n + j] = inside ? T{0} : T(-1e9);
        }
    }
    return mask;
}

template <typename T>
Var compute_cost(Tape<T>& t, Var visual, Var language) {
    const Shape& sv = t.shape(visual);
    const Shape& sl = t.shape(language);
    if (sv.size() != 2 || sl.size() != 2 || sv[1] != sl[1]) {
        throw ShapeError("compute_cost: visual " + shape_string(sv) + " and language " +
                         shape_string(sl) + " widths differ");
    }
    return ops::matmul_bt(t, ops::l2_normalize_last(t, visual), ops::l2_normalize_last(t, language));
}

template <typename T>
Var embed_cost(Tape<T>& t, Var cost, std::size_t height, std::size_t width, Var kernel,
               std::optional<Var> bias) {
    const Shape& sc = t.shape(cost);
    if (sc.size() != 2 || sc[0] != height * width) {
        throw ShapeError("embed_cost: cost " + shape_string(sc) + " does not match a " +
                         std::to_string(height) + "x" + std::to_string(width) + " grid");
    }
    const std::size_t classes = sc[1];
    const Shape& sk = t.shape(kernel);
    if (sk.size() != 4 || sk[2] != 1) throw ShapeError("embed_cost: kernel must be [k x k x 1 x d]");
    const std::size_t d = sk[3];
    Var x = ops::reshape(t, transpose2d(t, cost), Shape{classes, height, width, 1});
    Var f = ops::conv2d(t, x, kernel, bias);
    return ops::reshape(t, f, Shape{classes, height * width, d});
}

template <typename T>
Var spatial_aggregate(Tape<T>& t, Var f, std::optional<Var> guidance, const BoundParams& p,
                      const std::string& prefix, const ModelConfig& cfg, std::size_t height,
                      std::size_t width) {
    const Shape& sf = t.shape(f);
    if (sf.size() != 3 || sf[1] != height * width) {
        throw ShapeError("spatial_aggregate: feature " + shape_string(sf) + " does not match grid");
    }
    const std::size_t n = sf[1];
    std::optional<Var> q_extra, k_extra, bias;
    if (guidance) {
        const Shape& sg = t.shape(*guidance);
        if (sg.size() != 2 || sg[0] != n) {
            throw ShapeError("spatial_aggregate: guidance " + shape_string(sg) + " has length " +
                             std::to_string(sg.empty() ? 0 : sg[0]) + ", expected " + std::to_string(n));
        }
        q_extra = ops::linear(t, *guidance, p.at(prefix + ".wq_g"));
        k_extra = ops::linear(t, *guidance, p.at(prefix + ".wk_g"));
    }
    if (cfg.pos_bias) {
        bias = ops::gather_flat(t, p.at(prefix + ".pos_table"),
                                relative_position_index(height, width, cfg.max_grid, cfg.heads),
                                Shape{cfg.heads, n, n});
    }
    if (cfg.window != 0 && (cfg.window < 2 * height - 1 || cfg.window < 2 * width - 1)) {
        Var mask = t.constant(window_mask<T>(height, width, cfg.window, cfg.heads));
        bias = bias ? ops::add(t, *bias, mask) : mask;
    }
    return transformer_block(t, f, p, prefix, cfg.heads, q_extra, k_extra, bias);
}

template <typename T>
Var class_aggregate(Tape<T>& t, Var f, const BoundParams& p, const std::string& prefix,
                    const ModelConfig& cfg) {
    if (t.shape(f).size() != 3) throw ShapeError("class_aggregate: expected [classes x HW x d]");
    Var x = ops::transpose01(t, f);
    x = transformer_block(t, x, p, prefix, cfg.heads, std::nullopt, std::nullopt, std::nullopt);
    return ops::transpose01(t, x);
}

template <typename T>
Var combine_obj_part(Tape<T>& t, Var f_obj, Var f_part, const Vocabulary& vocab, Var weight,
                     std::optional<Var> bias) {
    const Shape& so = t.shape(f_obj);
    const Shape& sp = t.shape(f_part);
    if (so.size() != 3 || sp.size() != 3 || so[1] != sp[1] || so[2] != sp[2]) {
        throw ShapeError("combine_obj_part: features " + shape_string(so) + " and " +
                         shape_string(sp) + " disagree");
    }
    if (so[0] != vocab.num_objects() || sp[0] != vocab.num_parts()) {
        throw ShapeError("combine_obj_part: class counts do not match the vocabulary");
    }
    Var fo = ops::gather_axis1(t, ops::transpose01(t, f_obj), vocab.object_map());
    Var fp = ops::gather_axis1(t, ops::transpose01(t, f_part), vocab.part_map());
    Var combined = ops::linear(t, ops::concat_last(t, fo, fp), weight, bias);
    return ops::transpose01(t, combined);
}

template <typename T>
Var rescore(Tape<T>& t, Var f_combined, Var language, std::optional<Var> projection) {
    const Shape& sf = t.shape(f_combined);
    const Shape& sl = t.shape(language);
    if (sf.size() != 3 || sl.size() != 2 || sf[0] != sl[0]) {
        throw ShapeError("rescore: feature " + shape_string(sf) + " and language " +
                         shape_string(sl) + " class counts differ");
    }
    Var f = projection ? ops::linear(t, f_combined, *projection) : f_combined;
    if (t.shape(f)[2] != sl[1]) {
        throw ShapeError("rescore: feature width " + std::to_string(t.shape(f)[2]) +
                         " differs from text width " + std::to_string(sl[1]));
    }
    Var fn = ops::transpose01(t, ops::l2_normalize_last(t, f));
    return ops::sum_last(t, ops::mul_broadcast(t, fn, ops::l2_normalize_last(t, language)));
}

template <typename T>
Var decode(Tape<T>& t, Var f, std::size_t height, std::size_t width, const BoundParams& p,
           const std::string& prefix, std::size_t upsample) {
    const Shape& sf = t.shape(f);
    if (sf.size() != 3 || sf[1] != height * width) {
        throw ShapeError("decode: feature " + shape_string(sf) + " does not match grid");
    }
    const std::size_t classes = sf[0];
    Var x = ops::reshape(t, f, Shape{classes, height, width, sf[2]});
    x = ops::upsample_nearest(t, x, upsample);
    x = ops::gelu(t, ops::conv2d(t, x, p.at(prefix + ".conv1.kernel"), p.at(prefix + ".conv1.bias")));
    x = ops::conv2d(t, x, p.at(prefix + ".conv2.kernel"), p.at(prefix + ".conv2.bias"));
    const std::size_t pixels = height * width * upsample * upsample;
    x = ops::reshape(t, ops::sigmoid(t, x), Shape{classes, pixels});
    return transpose2d(t, x);
}

template <typename T>
ModelOutputs forward(Tape<T>& t, const EmbeddingBundle<T>& sample, const BoundParams& p,
                     const Vocabulary& vocab, const ModelConfig& cfg) {
    sample.validate();
    if (sample.visual.dim(1) != cfg.c) {
        throw ShapeError("forward: embedding width " + std::to_string(sample.visual.dim(1)) +
                         " differs from configured c=" + std::to_string(cfg.c));
    }
    if (sample.language_obj_part.dim(0) != vocab.num_obj_parts() ||
        sample.language_obj.dim(0) != vocab.num_objects() ||
        sample.language_part.dim(0) != vocab.num_parts()) {
        throw ShapeError("forward: language embeddings do not match the vocabulary");
    }
    const bool wants_guidance = cfg.guidance.any();
    if (wants_guidance && !sample.structural) {
        throw ShapeError("forward: guidance enabled but the sample has no structural features");
    }
    Var visual = t.constant(sample.visual);
    Var lang_op = t.constant(sample.language_obj_part);
    std::optional<Var> structural;
    if (wants_guidance) structural = t.constant(*sample.structural);
    auto guidance_for = [&](Level level) { return cfg.guidance.at(level) ? structural : std::nullopt; };

    ModelOutputs out;
    const std::size_t h = sample.height, w = sample.width;
    if (cfg.mode == ModelMode::disentangled) {
        Var lang_obj = t.constant(sample.language_obj);
        Var lang_part = t.constant(sample.language_part);
        out.cost_obj = staged("obj cost", [&] { return compute_cost(t, visual, lang_obj); });
        out.cost_part = staged("part cost", [&] { return compute_cost(t, visual, lang_part); });
        Var f_obj = run_branch(t, *out.cost_obj, "obj", sample, guidance_for(Level::obj), p, cfg);
        Var f_part = run_branch(t, *out.cost_part, "part", sample, guidance_for(Level::part), p, cfg);
        Var combined = staged("obj-part combination", [&] {
            return combine_obj_part(t, f_obj, f_part, vocab, p.at("combine.w"), p.at("combine.b"));
        });
        std::optional<Var> proj;
        if (p.contains("rescore.proj")) proj = p.at("rescore.proj");
        out.cost_obj_part = staged("obj-part rescoring", [&] { return rescore(t, combined, lang_op, proj); });
        out.pred_obj = staged("obj decoder", [&] { return decode(t, f_obj, h, w, p, "obj.dec", cfg.upsample); });
        out.pred_part = staged("part decoder", [&] { return decode(t, f_part, h, w, p, "part.dec", cfg.upsample); });
    } else {
        out.cost_obj_part = staged("obj-part cost", [&] { return compute_cost(t, visual, lang_op); });
    }
    Var f_op = run_branch(t, out.cost_obj_part, "obj_part", sample, guidance_for(Level::obj_part), p, cfg);
    out.pred_obj_part =
        staged("obj-part decoder", [&] { return decode(t, f_op, h, w, p, "obj_part.dec", cfg.upsample); });
    return out;
}

template <typename T>
void EmbeddingBundle<T>::validate() const {
    const std::size_t n = height * width;
    if (n == 0) throw ShapeError("embedding bundle has an empty grid");
    if (visual.rank() != 2 || visual.dim(0) != n) {
        throw ShapeError("visual embeddings " + shape_string(visual.shape()) + " do not cover " +
                         std::to_string(height) + "x" + std::to_string(width) + " pixels");
    }
    const std::size_t c = visual.dim(1);
    for (const Array<T>* lang : {&language_obj, &language_part, &language_obj_part}) {
        if (lang->rank() != 2 || lang->dim(1) != c) {
            throw ShapeError("language embeddings " + shape_string(lang->shape()) +
                             " do not have width " + std::to_string(c));
        }
    }
    if (structural && (structural->rank() != 2 || structural->dim(0) != n)) {
        throw ShapeError("structural features " + shape_string(structural->shape()) +
                         " do not cover the grid");
    }
}

template struct EmbeddingBundle<float>;
template struct EmbeddingBundle<double>;

#define PARTCAT_INSTANTIATE_MODEL(T)                                                              \
    template Array<T> window_mask<T>(std::size_t, std::size_t, std::size_t, std::size_t);         \
    template Var compute_cost<T>(Tape<T>&, Var, Var);                                             \
    template Var embed_cost<T>(Tape<T>&, Var, std::size_t, std::size_t, Var, std::optional<Var>); \
    template Var spatial_aggregate<T>(Tape<T>&, Var, std::optional<Var>, const BoundParams&,      \
                                      const std::string&, const ModelConfig&, std::size_t,        \
                                      std::size_t);                                               \
    template Var class_aggregate<T>(Tape<T>&, Var, const BoundParams&, const std::string&,        \
                                    const ModelConfig&);                                          \
    template Var combine_obj_part<T>(Tape<T>&, Var, Var, const Vocabulary&, Var,                  \
                                     std::optional<Var>);                                         \
    template Var rescore<T>(Tape<T>&, Var, Var, std::optional<Var>);                              \
    template Var decode<T>(Tape<T>&, Var, std::size_t, std::size_t, const BoundParams&,           \
                           const std::string&, std::size_t);                                      \
    template ModelOutputs forward<T>(Tape<T>&, const EmbeddingBundle<T>&, const BoundParams&,     \
                                     const Vocabulary&, const ModelConfig&);

PARTCAT_INSTANTIATE_MODEL(float)
PARTCAT_INSTANTIATE_MODEL(double)

#undef PARTCAT_INSTANTIATE_MODEL

}  // namespace partcat
