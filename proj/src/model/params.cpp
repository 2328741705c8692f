#include <cmath>

#include "partcat/model.hpp"
#include "partcat/rng.hpp"

namespace partcat {

namespace {

constexpr std::uint64_t kInitSalt = 0x1a17;

template <typename T>
class Initializer {
public:
    Initializer(ModelParams<T>& params, std::uint64_t seed) : params_(params), rng_(mix_seed(seed, kInitSalt)) {}

    void weight(const std::string& name, Shape shape, std::size_t fan_in) {
        Array<T> a(std::move(shape));
        const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
        for (std::size_t i = 0; i < a.size(); ++i) a[i] = static_cast<T>(rng_.uniform(-bound, bound));
        params_.add(name, std::move(a));
    }
    void constant(const std::string& name, Shape shape, T value) {
        params_.add(name, Array<T>(std::move(shape), value));
    }

private:
    ModelParams<T>& params_;
    Rng rng_;
};

template <typename T>
void add_block(Initializer<T>& init, const std::string& pre, const ModelConfig& cfg, bool spatial) {
    const std::size_t d = cfg.d;
    const std::size_t hidden = cfg.ffn_mult * d;
    init.constant(pre + ".ln1.gain", {d}, T{1});
    init.constant(pre + ".ln1.bias", {d}, T{0});
    init.weight(pre + ".wq", {d, d}, d);
    init.weight(pre + ".wk", {d, d}, d);
    init.weight(pre + ".wv", {d, d}, d);
    init.weight(pre + ".wo", {d, d}, d);
    init.constant(pre + ".bo", {d}, T{0});
    if (spatial && cfg.d_dino > 0) {
        init.weight(pre + ".wq_g", {cfg.d_dino, d}, cfg.d_dino);
        init.weight(pre + ".wk_g", {cfg.d_dino, d}, cfg.d_dino);
    }
    if (spatial && cfg.pos_bias) {
        const std::size_t side = 2 * cfg.max_grid - 1;
        init.constant(pre + ".pos_table", {side * side, cfg.heads}, T{0});
    }
    init.constant(pre + ".ln2.gain", {d}, T{1});
    init.constant(pre + ".ln2.bias", {d}, T{0});
    init.weight(pre + ".ff1.w", {d, hidden}, d);
    init.constant(pre + ".ff1.b", {hidden}, T{0});
    init.weight(pre + ".ff2.w", {hidden, d}, hidden);
    init.constant(pre + ".ff2.b", {d}, T{0});
}

template <typename T>
void add_branch(Initializer<T>& init, const std::string& branch, const ModelConfig& cfg) {
    const std::size_t k = cfg.embed_kernel;
    const std::size_t d = cfg.d;
    init.weight(branch + ".embed.kernel", {k, k, 1, d}, k * k);
    init.constant(branch + ".embed.bias", {d}, T{0});
    for (std::size_t l = 0; l < cfg.depth; ++l) {
        add_block(init, branch + ".sa" + std::to_string(l), cfg, true);
        add_block(init, branch + ".ca" + std::to_string(l), cfg, false);
    }
    init.weight(branch + ".dec.conv1.kernel", {3, 3, d, d}, 9 * d);
    init.constant(branch + ".dec.conv1.bias", {d}, T{0});
    init.weight(branch + ".dec.conv2.kernel", {3, 3, d, 1}, 9 * d);
    init.constant(branch + ".dec.conv2.bias", {1}, T{0});
}

}  // namespace

template <typename T>
ModelParams<T> ModelParams<T>::init(const ModelConfig& cfg) {
    cfg.validate();
    ModelParams<T> params;
    Initializer<T> init(params, cfg.seed);
    if (cfg.mode == ModelMode::disentangled) {
        add_branch(init, "obj", cfg);
        add_branch(init, "part", cfg);
        init.weight("combine.w", {2 * cfg.d, cfg.d}, 2 * cfg.d);
        init.constant("combine.b", {cfg.d}, T{0});
        if (cfg.d != cfg.c) init.weight("rescore.proj", {cfg.d, cfg.c}, cfg.d);
    }
    add_branch(init, "obj_part", cfg);
    return params;
}

template <typename T>
void ModelParams<T>::add(std::string name, Array<T> value) {
    if (index_.count(name)) throw ConfigError("duplicate parameter '" + name + "'");
    index_.emplace(name, entries_.size());
    entries_.push_back(Entry{std::move(name), std::move(value)});
}

template <typename T>
const Array<T>& ModelParams<T>::at(const std::string& name) const {
    const auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter '" + name + "'");
    return entries_[it->second].value;
}

template <typename T>
Array<T>& ModelParams<T>::at(const std::string& name) {
    const auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter '" + name + "'");
    return entries_[it->second].value;
}

template <typename T>
std::size_t ModelParams<T>::count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.value.size();
    return n;
}

template class ModelParams<float>;
template class ModelParams<double>;

Var BoundParams::at(const std::string& name) const {
    const auto it = vars_.find(name);
    if (it == vars_.end()) throw ConfigError("parameter '" + name + "' is not bound");
    return it->second;
}

template <typename T>
BoundParams BoundParams::bind(Tape<T>& tape, const ModelParams<T>& params, bool requires_grad) {
    BoundParams out;
    for (const auto& e : params.entries()) out.vars_.emplace(e.name, tape.leaf(e.value, requires_grad));
    return out;
}

BoundParams BoundParams::wrap(const std::vector<std::string>& names, std::span<const Var> vars) {
    if (names.size() != vars.size()) throw ConfigError("wrap: name and handle counts differ");
    BoundParams out;
    for (std::size_t i = 0; i < names.size(); ++i) {
        if (!out.vars_.emplace(names[i], vars[i]).second) throw ConfigError("duplicate parameter '" + names[i] + "'");
    }
    return out;
}

template BoundParams BoundParams::bind<float>(Tape<float>&, const ModelParams<float>&, bool);
template BoundParams BoundParams::bind<double>(Tape<double>&, const ModelParams<double>&, bool);

}  // namespace partcat
