#pragma once

#include <optional>
#include <span>
#include <string>
#include <utility>

#include "partcat/array.hpp"
#include "partcat/model.hpp"
#include "partcat/tape.hpp"
#include "partcat/vocab.hpp"

namespace partcat {

class LossError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

struct LossWeights {
    double obj = 1.0;
    double part = 1.0;
    double comp = 1.0;

    void validate() const;
};

enum class CompMode { softmax, l1, off };

/// "sm"/"softmax", "l1", "off".
CompMode parse_comp_mode(const std::string& text);
const char* comp_mode_name(CompMode mode);

enum class Divergence {
    symmetric_kl,    // ½(KL(P‖P̃) + KL(P̃‖P))
    jensen_shannon,  // ½KL(P‖A) + ½KL(P̃‖A), A the midpoint
};

inline constexpr double kBceEpsilon = 1e-7;
inline constexpr double kLogFloor = 1e-12;

/// Binary masks, pixel-major. `pixel_weight` [N] marks supervised pixels at the
/// prediction resolution (0 = ignored); `cost_weight` is the same at the cost grid.
struct GroundTruth {
    Array<float> obj;       // [N x O]
    Array<float> part;      // [N x P]
    Array<float> obj_part;  // [N x Q]
    Array<float> pixel_weight;
    Array<float> cost_weight;

    /// Binary entries, matching shapes, and every obj-part pixel inside its object.
    void validate(const Vocabulary& vocab) const;
};

/// Mean over all entries of −[t log p + (1−t) log(1−p)], p clamped to [ε, 1−ε].
template <typename T>
Var bce(Tape<T>& t, const Array<float>& target, Var prob);

/// Σ over classes of the per-class BCE averaged over pixels, pixel i weighted by
/// `weight[i]` (empty: all ones). Zero total weight yields 0.
template <typename T>
Var class_bce_sum(Tape<T>& t, const Array<float>& target, Var prob, std::span<const float> weight = {});

template <typename T>
Var disentanglement_loss(Tape<T>& t, const ModelOutputs& out, const GroundTruth& gt,
                         const LossWeights& w);

template <typename T>
Var obj_part_loss(Tape<T>& t, const ModelOutputs& out, const GroundTruth& gt);

/// Per-pixel distributions over objects and obj-parts from the two cost volumes.
/// L1 mode shifts costs by +1 before normalizing.
template <typename T>
std::pair<Var, Var> class_distributions(Tape<T>& t, Var cost_obj, Var cost_obj_part, CompMode mode);

/// P̃(i, o) = Σ_{q ∈ M⁻¹(o)} P(i, q).
template <typename T>
Var aggregate_to_object(Tape<T>& t, Var p_obj_part, const Vocabulary& vocab);

/// Divergence between row distributions, averaged over pixels (weighted when given).
template <typename T>
Var compositional_loss(Tape<T>& t, Var p_obj, Var p_obj_agg,
                       Divergence div = Divergence::symmetric_kl, std::span<const float> weight = {});

struct LossTerms {
    Var total{};
    Var obj_part{};
    std::optional<Var> disentangle;
    std::optional<Var> comp;
};

/// L_obj-part + L_disen + λ_comp·L_comp. The compositional term is skipped entirely
/// in CompMode::off and in single-volume outputs (no object costs).
template <typename T>
LossTerms total_loss(Tape<T>& t, const ModelOutputs& out, const GroundTruth& gt,
                     const Vocabulary& vocab, const LossWeights& w, CompMode mode,
                     Divergence div = Divergence::symmetric_kl);

}  // namespace partcat
