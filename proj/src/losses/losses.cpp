#include "partcat/losses.hpp"

#include <algorithm>
#include <cmath>

#include "partcat/ops.hpp"

namespace partcat {

void LossWeights::validate() const {
    if (!(obj >= 0.0) || !(part >= 0.0) || !(comp >= 0.0)) {
        throw LossError("loss weights must be non-negative");
    }
}

CompMode parse_comp_mode(const std::string& text) {
    if (text == "sm" || text == "softmax") return CompMode::softmax;
    if (text == "l1") return CompMode::l1;
    if (text == "off" || text == "none") return CompMode::off;
    throw LossError("unknown compositional mode '" + text + "' (expected sm, l1 or off)");
}

const char* comp_mode_name(CompMode mode) {
    switch (mode) {
        case CompMode::softmax: return "sm";
        case CompMode::l1: return "l1";
        case CompMode::off: return "off";
    }
    return "?";
}

void GroundTruth::validate(const Vocabulary& vocab) const {
    const std::size_t n = obj_part.dim(0);
    if (obj_part.shape() != Shape{n, vocab.num_obj_parts()} || obj.shape() != Shape{n, vocab.num_objects()} ||
        part.shape() != Shape{n, vocab.num_parts()}) {
        throw LossError("ground truth masks do not match the vocabulary");
    }
    if (pixel_weight.shape() != Shape{n}) throw LossError("pixel weights do not match the masks");
    for (const Array<float>* m : {&obj, &part, &obj_part}) {
        for (std::size_t i = 0; i < m->size(); ++i) {
            if ((*m)[i] != 0.0f && (*m)[i] != 1.0f) throw LossError("ground truth masks must be binary");
        }
    }
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t q = 0; q < vocab.num_obj_parts(); ++q) {
            if (obj_part.at(i, q) > obj.at(i, vocab.object_of(q))) {
                throw LossError("obj-part mask '" + vocab.obj_parts()[q] + "' leaves its object at pixel " +
                                std::to_string(i));
            }
        }
    }
}

template <typename T>
Var class_bce_sum(Tape<T>& t, const Array<float>& target, Var prob, std::span<const float> weight) {
    const auto& p = t.value(prob);
    if (p.rank() != 2 || target.shape() != p.shape()) {
        throw LossError("bce: target " + shape_string(target.shape()) + " and prediction " +
                        shape_string(p.shape()) + " differ");
    }
    const std::size_t n = p.dim(0), classes = p.dim(1);
    if (!weight.empty() && weight.size() != n) throw LossError("bce: pixel weights do not match");
    auto w = [&weight](std::size_t i) { return weight.empty() ? 1.0 : static_cast<double>(weight[i]); };
    double total_w = 0.0;
    for (std::size_t i = 0; i < n; ++i) total_w += w(i);
    if (total_w == 0.0) return t.constant(Array<T>::scalar(T{0}));

    const T eps = static_cast<T>(kBceEpsilon);
    const T lo = eps, hi = T{1} - eps;
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double row = 0.0;
        for (std::size_t c = 0; c < classes; ++c) {
            const T pc = std::clamp(p.at(i, c), lo, hi);
            const double tc = target.at(i, c);
            row -= tc * std::log(static_cast<double>(pc)) + (1.0 - tc) * std::log(1.0 - static_cast<double>(pc));
        }
        acc += w(i) * row;
    }
    std::vector<float> wcopy(weight.begin(), weight.end());
    return t.record(Array<T>::scalar(static_cast<T>(acc / total_w)), {prob},
                    [prob, target, wcopy, total_w, lo, hi, n, classes](Tape<T>& tp, const Array<T>& g) {
                        const auto& pv = tp.value(prob);
                        auto& gp = tp.grad(prob);
                        for (std::size_t i = 0; i < n; ++i) {
                            const double wi = wcopy.empty() ? 1.0 : static_cast<double>(wcopy[i]);
                            if (wi == 0.0) continue;
                            for (std::size_t c = 0; c < classes; ++c) {
                                const T pc = pv.at(i, c);
                                if (pc < lo || pc > hi) continue;  // clamp is flat here
                                const double tc = target.at(i, c);
                                const double pd = pc;
                                const double dl = -tc / pd + (1.0 - tc) / (1.0 - pd);
                                gp[i * classes + c] += static_cast<T>(g[0] * wi * dl / total_w);
                            }
                        }
                    });
}

template <typename T>
Var bce(Tape<T>& t, const Array<float>& target, Var prob) {
    Var s = class_bce_sum(t, target, prob);
    return ops::scale(t, s, T{1} / static_cast<T>(t.value(prob).dim(1)));
}

template <typename T>
Var disentanglement_loss(Tape<T>& t, const ModelOutputs& out, const GroundTruth& gt, const LossWeights& w) {
    w.validate();
    if (!out.pred_obj || !out.pred_part) throw LossError("disentanglement loss needs object and part predictions");
    const auto weight = gt.pixel_weight.span();
    Var lo = ops::scale(t, class_bce_sum(t, gt.obj, *out.pred_obj, weight), static_cast<T>(w.obj));
    Var lp = ops::scale(t, class_bce_sum(t, gt.part, *out.pred_part, weight), static_cast<T>(w.part));
    return ops::add(t, lo, lp);
}

template <typename T>
Var obj_part_loss(Tape<T>& t, const ModelOutputs& out, const GroundTruth& gt) {
    return class_bce_sum(t, gt.obj_part, out.pred_obj_part, gt.pixel_weight.span());
}

template <typename T>
std::pair<Var, Var> class_distributions(Tape<T>& t, Var cost_obj, Var cost_obj_part, CompMode mode) {
    switch (mode) {
        case CompMode::softmax:
            return {ops::softmax(t, cost_obj, 1), ops::softmax(t, cost_obj_part, 1)};
        case CompMode::l1:
            try {
                return {ops::l1_normalize_last(t, ops::add_scalar(t, cost_obj, T{1})),
                        ops::l1_normalize_last(t, ops::add_scalar(t, cost_obj_part, T{1}))};
            } catch (const std::exception& e) {
                throw LossError(std::string("L1 class distribution is degenerate: ") + e.what());
            }
        case CompMode::off: break;
    }
    throw LossError("class distributions requested with the compositional loss off");
}

template <typename T>
Var aggregate_to_object(Tape<T>& t, Var p_obj_part, const Vocabulary& vocab) {
    const auto& p = t.value(p_obj_part);
    if (p.rank() != 2 || p.dim(1) != vocab.num_obj_parts()) {
        throw LossError("aggregate_to_object: distribution " + shape_string(p.shape()) +
                        " does not match the vocabulary");
    }
    Array<T> mapping(Shape{vocab.num_obj_parts(), vocab.num_objects()});
    for (std::size_t q = 0; q < vocab.num_obj_parts(); ++q) mapping.at(q, vocab.object_of(q)) = T{1};
    return ops::matmul(t, p_obj_part, t.constant(std::move(mapping)));
}

namespace {

template <typename T>
void require_rows_normalized(const Array<T>& p, const char* what) {
    const std::size_t n = p.dim(0), k = p.dim(1);
    for (std::size_t i = 0; i < n; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < k; ++j) s += p.at(i, j);
        if (std::abs(s - 1.0) > 1e-6 * (std::is_same_v<T, float> ? 10.0 : 1.0)) {
            throw LossError(std::string(what) + " row " + std::to_string(i) + " sums to " + std::to_string(s));
        }
    }
}

// Σ_j a_j (log a_j − log b_j) per row, logs clamped.
template <typename T>
Var row_kl(Tape<T>& t, Var a, Var log_a, Var log_b) {
    return ops::sum_last(t, ops::mul(t, a, ops::sub(t, log_a, log_b)));
}

template <typename T>
Var weighted_pixel_mean(Tape<T>& t, Var per_pixel, std::span<const float> weight) {
    const std::size_t n = t.value(per_pixel).size();
    if (weight.empty()) return ops::mean(t, per_pixel);
    if (weight.size() != n) throw LossError("compositional loss: pixel weights do not match");
    double total = 0.0;
    Array<T> w(Shape{n});
    for (std::size_t i = 0; i < n; ++i) {
        w[i] = static_cast<T>(weight[i]);
        total += weight[i];
    }
    if (total == 0.0) return t.constant(Array<T>::scalar(T{0}));
    Var s = ops::sum(t, ops::mul(t, per_pixel, t.constant(std::move(w))));
    return ops::scale(t, s, static_cast<T>(1.0 / total));
}

}  // namespace

template <typename T>
Var compositional_loss(Tape<T>& t, Var p_obj, Var p_obj_agg, Divergence div, std::span<const float> weight) {
    const auto& a = t.value(p_obj);
    const auto& b = t.value(p_obj_agg);
    if (a.rank() != 2 || a.shape() != b.shape()) {
        throw LossError("compositional loss: distributions " + shape_string(a.shape()) + " and " +
                        shape_string(b.shape()) + " differ");
    }
    require_rows_normalized(a, "object distribution");
    require_rows_normalized(b, "aggregated distribution");
    const T floor = static_cast<T>(kLogFloor);
    Var per_pixel;
    if (div == Divergence::symmetric_kl) {
        // ½ Σ (P − P̃)(log P − log P̃): the two KL sums merged, symmetric under swap.
        Var diff = ops::sub(t, p_obj, p_obj_agg);
        Var log_diff = ops::sub(t, ops::log_clamped(t, p_obj, floor), ops::log_clamped(t, p_obj_agg, floor));
        per_pixel = ops::scale(t, ops::sum_last(t, ops::mul(t, diff, log_diff)), T(0.5));
    } else {
        Var mid = ops::scale(t, ops::add(t, p_obj, p_obj_agg), T(0.5));
        Var log_mid = ops::log_clamped(t, mid, floor);
        Var ka = row_kl(t, p_obj, ops::log_clamped(t, p_obj, floor), log_mid);
        Var kb = row_kl(t, p_obj_agg, ops::log_clamped(t, p_obj_agg, floor), log_mid);
        per_pixel = ops::scale(t, ops::add(t, ka, kb), T(0.5));
    }
    return weighted_pixel_mean(t, per_pixel, weight);
}

template <typename T>
LossTerms total_loss(Tape<T>& t, const ModelOutputs& out, const GroundTruth& gt, const Vocabulary& vocab,
                     const LossWeights& w, CompMode mode, Divergence div) {
    w.validate();
    LossTerms terms;
    terms.obj_part = obj_part_loss(t, out, gt);
    terms.total = terms.obj_part;
    if (out.pred_obj && out.pred_part) {
        terms.disentangle = disentanglement_loss(t, out, gt, w);
        terms.total = ops::add(t, terms.total, *terms.disentangle);
    }
    if (mode != CompMode::off && out.cost_obj) {
        auto [p_obj, p_op] = class_distributions(t, *out.cost_obj, out.cost_obj_part, mode);
        Var agg = aggregate_to_object(t, p_op, vocab);
        std::span<const float> cw;
        if (!gt.cost_weight.empty()) cw = gt.cost_weight.span();
        terms.comp = compositional_loss(t, p_obj, agg, div, cw);
        terms.total = ops::add(t, terms.total, ops::scale(t, *terms.comp, static_cast<T>(w.comp)));
    }
    return terms;
}

#define PARTCAT_INSTANTIATE_LOSSES(T)                                                                  \
    template Var bce<T>(Tape<T>&, const Array<float>&, Var);                                           \
    template Var class_bce_sum<T>(Tape<T>&, const Array<float>&, Var, std::span<const float>);         \
    template Var disentanglement_loss<T>(Tape<T>&, const ModelOutputs&, const GroundTruth&,            \
                                         const LossWeights&);                                          \
    template Var obj_part_loss<T>(Tape<T>&, const ModelOutputs&, const GroundTruth&);                  \
    template std::pair<Var, Var> class_distributions<T>(Tape<T>&, Var, Var, CompMode);                 \
    template Var aggregate_to_object<T>(Tape<T>&, Var, const Vocabulary&);                             \
    template Var compositional_loss<T>(Tape<T>&, Var, Var, Divergence, std::span<const float>);        \
    template LossTerms total_loss<T>(Tape<T>&, const ModelOutputs&, const GroundTruth&,                \
                                     const Vocabulary&, const LossWeights&, CompMode, Divergence);

PARTCAT_INSTANTIATE_LOSSES(float)
PARTCAT_INSTANTIATE_LOSSES(double)

#undef PARTCAT_INSTANTIATE_LOSSES

}  // namespace partcat
