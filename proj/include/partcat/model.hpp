#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "partcat/array.hpp"
#include "partcat/tape.hpp"
#include "partcat/vocab.hpp"

namespace partcat {

class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

enum class Level { obj = 0, part = 1, obj_part = 2 };

const char* level_name(Level level);

/// Which spatial-aggregation levels receive structural guidance.
struct GuidanceLevels {
    bool obj = false;
    bool part = false;
    bool obj_part = false;

    bool at(Level level) const;
    bool any() const { return obj || part || obj_part; }
    /// "none", "obj", "part", "obj,part", "all" or any comma list of obj/part/obj-part.
    static GuidanceLevels parse(const std::string& text);
    std::string to_string() const;
    friend bool operator==(const GuidanceLevels&, const GuidanceLevels&) = default;
};

enum class ModelMode {
    disentangled,   // object and part branches, combination, re-scoring
    single_volume,  // aggregation directly over object-specific part costs
};

struct ModelConfig {
    std::size_t c = 32;        // embedding width of visual/text features
    std::size_t d = 32;        // cost feature width
    std::size_t d_dino = 16;   // structural feature width (0: no guidance weights)
    std::size_t heads = 4;
    std::size_t depth = 1;     // spatial+class block pairs per branch
    std::size_t ffn_mult = 2;  // feed-forward hidden width = ffn_mult * d
    std::size_t embed_kernel = 3;
    std::size_t upsample = 1;
    bool pos_bias = false;     // relative positional bias in spatial attention
    std::size_t max_grid = 16; // positional table covers offsets of grids up to this side
    std::size_t window = 0;    // square attention window side (0: full attention)
    GuidanceLevels guidance{true, true, false};
    ModelMode mode = ModelMode::disentangled;
    std::uint64_t seed = 0;

    void validate() const;

    /// key=value text; unknown keys and malformed values throw ConfigError.
    static ModelConfig parse(const std::string& text);
    static ModelConfig load(const std::filesystem::path& path);
    std::string to_string() const;
};

/// Named parameter tensors in a fixed creation order.
template <typename T>
class ModelParams {
public:
    struct Entry {
        std::string name;
        Array<T> value;
    };

    /// Seeded initialization: weights uniform in ±1/sqrt(fan_in), biases zero,
    /// normalization gains one, positional bias zero.
    static ModelParams init(const ModelConfig& cfg);

    void add(std::string name, Array<T> value);
    bool contains(const std::string& name) const { return index_.count(name) != 0; }
    const Array<T>& at(const std::string& name) const;
    Array<T>& at(const std::string& name);

    std::vector<Entry>& entries() { return entries_; }
    const std::vector<Entry>& entries() const { return entries_; }
    std::size_t count() const;  // total scalar parameters

    template <typename U>
    ModelParams<U> cast() const {
        ModelParams<U> out;
        for (const auto& e : entries_) out.add(e.name, e.value.template cast<U>());
        return out;
    }

private:
    std::vector<Entry> entries_;
    std::map<std::string, std::size_t> index_;
};

extern template class ModelParams<float>;
extern template class ModelParams<double>;

/// Per-sample encoder outputs. Row i of `visual` / `structural` is pixel i in
/// row-major (y, x) order.
template <typename T>
struct EmbeddingBundle {
    std::size_t height = 0;
    std::size_t width = 0;
    Array<T> visual;             // [HW x c]
    Array<T> language_obj;       // [O x c]
    Array<T> language_part;      // [P x c]
    Array<T> language_obj_part;  // [Q x c]
    std::optional<Array<T>> structural;  // [HW x d_dino]

    void validate() const;

    template <typename U>
    EmbeddingBundle<U> cast() const {
        EmbeddingBundle<U> out{height, width, visual.template cast<U>(),
                               language_obj.template cast<U>(), language_part.template cast<U>(),
                               language_obj_part.template cast<U>(), std::nullopt};
        if (structural) out.structural = structural->template cast<U>();
        return out;
    }
};

/// Parameters placed on a tape.
class BoundParams {
public:
    Var at(const std::string& name) const;
    bool contains(const std::string& name) const { return vars_.count(name) != 0; }
    const std::map<std::string, Var>& vars() const { return vars_; }

    template <typename T>
    static BoundParams bind(Tape<T>& tape, const ModelParams<T>& params, bool requires_grad);
    /// Names existing tape handles, e.g. leaves created by a gradient check.
    static BoundParams wrap(const std::vector<std::string>& names, std::span<const Var> vars);

private:
    std::map<std::string, Var> vars_;
};

/// Tape handles for one forward pass. Cost volumes are [HW x classes]; probabilities
/// are [(H·u)(W·u) x classes] for upsample factor u. Object and part entries are absent
/// in single-volume mode.
struct ModelOutputs {
    std::optional<Var> cost_obj;
    std::optional<Var> cost_part;
    Var cost_obj_part{};
    std::optional<Var> pred_obj;
    std::optional<Var> pred_part;
    Var pred_obj_part{};
};

// Pipeline stages. Features are laid out [classes x HW x d].

/// Cosine of every visual row against every language row: [HW x T].
template <typename T>
Var compute_cost(Tape<T>& t, Var visual, Var language);

/// Lifts [HW x T] costs to [T x HW x d] with a same-padded convolution per class.
template <typename T>
Var embed_cost(Tape<T>& t, Var cost, std::size_t height, std::size_t width, Var kernel,
               std::optional<Var> bias);

/// Pre-norm transformer block over the HW spatial tokens of each class slice.
/// `prefix` names the block's parameters (e.g. "obj.sa0").
template <typename T>
Var spatial_aggregate(Tape<T>& t, Var f, std::optional<Var> guidance, const BoundParams& p,
                      const std::string& prefix, const ModelConfig& cfg, std::size_t height,
                      std::size_t width);

/// Pre-norm transformer block over the class tokens at each pixel (no positional term).
template <typename T>
Var class_aggregate(Tape<T>& t, Var f, const BoundParams& p, const std::string& prefix,
                    const ModelConfig& cfg);

/// out[q, i] = projection([f_obj[M(q), i] ; f_part[part(q), i]]), [Q x HW x d].
template <typename T>
Var combine_obj_part(Tape<T>& t, Var f_obj, Var f_part, const Vocabulary& vocab, Var weight,
                     std::optional<Var> bias);

/// Cosine of each combined feature [Q x HW x d] with its class text [Q x c] -> [HW x Q].
/// `projection` [d x c] is required when d != c.
template <typename T>
Var rescore(Tape<T>& t, Var f_combined, Var language, std::optional<Var> projection);

/// Shared per-class head: conv(d->d), GELU, conv(d->1), sigmoid -> [(H·u)(W·u) x T].
template <typename T>
Var decode(Tape<T>& t, Var f, std::size_t height, std::size_t width, const BoundParams& p,
           const std::string& prefix, std::size_t upsample);

template <typename T>
ModelOutputs forward(Tape<T>& t, const EmbeddingBundle<T>& sample, const BoundParams& p,
                     const Vocabulary& vocab, const ModelConfig& cfg);

/// Relative-offset table indices for an H x W grid: [HW x HW] entries into a
/// (2m-1)^2 table for max grid side m, head-major when expanded by `heads`.
std::vector<std::size_t> relative_position_index(std::size_t height, std::size_t width,
                                                 std::size_t max_grid, std::size_t heads);

/// Additive mask [heads x HW x HW]: 0 inside the square window around each query, -1e9 outside.
template <typename T>
Array<T> window_mask(std::size_t height, std::size_t width, std::size_t window, std::size_t heads);

}  // namespace partcat
