#include <charconv>
#include <cmath>
#include <numbers>
#include <sstream>

#include "partcat/data.hpp"
#include "partcat/rng.hpp"

namespace partcat {

namespace {

constexpr std::uint64_t kVisualNoiseSalt = 0x5eed'0001;
constexpr std::uint64_t kStructuralNoiseSalt = 0x5eed'0002;
constexpr std::uint64_t kJitterSalt = 0x5eed'0003;
constexpr std::uint64_t kLabelNoiseSalt = 0x5eed'0004;

std::uint64_t fnv1a(const std::string& s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : s) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::vector<double> gaussian_column(std::uint64_t seed, const std::string& key, std::size_t n) {
    Rng rng(mix_seed(seed, fnv1a(key)));
    std::vector<double> v(n);
    const double s = 1.0 / std::sqrt(static_cast<double>(n));
    for (auto& x : v) x = rng.normal() * s;
    return v;
}

void normalize_into(std::vector<double>& v, float* dst) {
    double norm = 0.0;
    for (double x : v) norm += x * x;
    norm = std::sqrt(norm);
    if (norm == 0.0) throw DataError("synthetic embedding has zero norm");
    for (std::size_t e = 0; e < v.size(); ++e) dst[e] = static_cast<float>(v[e] / norm);
}

std::string trim(const std::string& s) {
    const auto first = s.find_first_not_of(" \t\r\n");
    if (first == std::string::npos) return {};
    const auto last = s.find_last_not_of(" \t\r\n");
    return s.substr(first, last - first + 1);
}

double parse_real(const std::string& key, const std::string& value) {
    try {
        std::size_t used = 0;
        const double v = std::stod(value, &used);
        if (used != value.size()) throw std::invalid_argument("trailing");
        return v;
    } catch (const std::exception&) {
        throw DataError("scene key '" + key + "': expected a number, got '" + value + "'");
    }
}

std::size_t parse_count(const std::string& key, const std::string& value) {
    std::size_t out = 0;
    const auto* end = value.data() + value.size();
    const auto [ptr, ec] = std::from_chars(value.data(), end, out);
    if (ec != std::errc{} || ptr != end) throw DataError("scene key '" + key + "': expected an integer");
    return out;
}

}  // namespace

void SceneSpec::validate(const Vocabulary& vocab) const {
    if (height == 0 || width == 0 || label_scale == 0 || c == 0) throw DataError("scene dimensions must be positive");
    if (!(object_scale > 0.0 && object_scale <= 1.0)) throw DataError("object_scale must lie in (0, 1]");
    if (!(jitter >= 0.0) || !(sigma >= 0.0) || !(label_noise >= 0.0 && label_noise <= 1.0)) {
        throw DataError("jitter, sigma and label_noise must be non-negative (label_noise at most 1)");
    }
    for (const auto& [object, parts] : templates) {
        const std::size_t o = vocab.object_index(object);
        if (parts.empty()) throw DataError("object '" + object + "' template has no parts");
        for (const auto& pt : parts) {
            const std::size_t p = vocab.part_index(pt.part);
            if (!vocab.find_obj_part(o, p)) {
                throw DataError("template part '" + pt.part + "' is not a class of '" + object + "'");
            }
            const Rect& r = pt.region;
            if (r.x0 < 0 || r.y0 < 0 || r.x1 > 1 || r.y1 > 1 || r.x0 >= r.x1 || r.y0 >= r.y1) {
                throw DataError("template region of '" + object + "'s " + pt.part + "' leaves the unit square");
            }
        }
    }
}

std::map<std::string, std::vector<PartTemplate>> SceneSpec::default_templates(const Vocabulary& vocab) {
    static const std::map<std::string, Rect> known = {
        {"head", {0.0, 0.0, 0.3, 0.45}},   {"wing", {0.3, 0.0, 0.85, 0.25}},
        {"torso", {0.3, 0.25, 0.85, 0.7}}, {"leg", {0.3, 0.7, 0.85, 1.0}},
        {"tail", {0.85, 0.25, 1.0, 0.6}},
    };
    std::map<std::string, std::vector<PartTemplate>> out;
    for (std::size_t o = 0; o < vocab.num_objects(); ++o) {
        const auto& qs = vocab.parts_of_object(o);
        bool all_known = true;
        for (std::size_t q : qs) all_known = all_known && known.count(vocab.parts()[vocab.part_of(q)]);
        std::vector<PartTemplate> parts;
        const std::size_t cols = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(qs.size()))));
        const std::size_t rows = (qs.size() + cols - 1) / cols;
        for (std::size_t k = 0; k < qs.size(); ++k) {
            const std::string& name = vocab.parts()[vocab.part_of(qs[k])];
            if (all_known) {
                parts.push_back({name, known.at(name)});
            } else {
                const double cx = static_cast<double>(k % cols), cy = static_cast<double>(k / cols);
                parts.push_back({name, {cx / cols, cy / rows, (cx + 1) / cols, (cy + 1) / rows}});
            }
        }
        out.emplace(vocab.objects()[o], std::move(parts));
    }
    return out;
}

SceneSpec SceneSpec::parse(const std::string& text) {
    SceneSpec s;
    std::stringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        const std::string t = trim(line);
        if (t.empty() || t.front() == '#') continue;
        const auto eq = t.find('=');
        if (eq == std::string::npos) throw DataError("scene config line without '=': " + t);
        const std::string key = trim(t.substr(0, eq)), value = trim(t.substr(eq + 1));
        if (key == "height") s.height = parse_count(key, value);
        else if (key == "width") s.width = parse_count(key, value);
        else if (key == "label_scale") s.label_scale = parse_count(key, value);
        else if (key == "c") s.c = parse_count(key, value);
        else if (key == "d_dino") s.d_dino = parse_count(key, value);
        else if (key == "sigma") s.sigma = parse_real(key, value);
        else if (key == "part_weight") s.part_weight = parse_real(key, value);
        else if (key == "position_weight") s.position_weight = parse_real(key, value);
        else if (key == "object_scale") s.object_scale = parse_real(key, value);
        else if (key == "jitter") s.jitter = parse_real(key, value);
        else if (key == "label_noise") s.label_noise = parse_real(key, value);
        else if (key == "seed") s.seed = parse_count(key, value);
        else throw DataError("unknown scene config key '" + key + "'");
    }
    return s;
}

std::string SceneSpec::to_string() const {
    std::ostringstream out;
    out.precision(17);
    out << "height=" << height << "\nwidth=" << width << "\nlabel_scale=" << label_scale << "\nc=" << c
        << "\nd_dino=" << d_dino << "\nsigma=" << sigma << "\npart_weight=" << part_weight
        << "\nposition_weight=" << position_weight << "\nobject_scale=" << object_scale
        << "\njitter=" << jitter << "\nlabel_noise=" << label_noise << "\nseed=" << seed << "\n";
    return out.str();
}

EmbeddingFactors::EmbeddingFactors(const Vocabulary& vocab, std::size_t c, std::size_t d_dino, std::uint64_t seed)
    : c_(c), d_dino_(d_dino) {
    for (const auto& o : vocab.objects()) objects_.emplace(o, gaussian_column(seed, "object:" + o, c));
    for (const auto& p : vocab.parts()) {
        parts_.emplace(p, gaussian_column(seed, "part:" + p, c));
        if (d_dino > 0) dino_parts_.emplace(p, gaussian_column(seed, "structure:" + p, d_dino));
    }
    background_ = gaussian_column(seed, "background", c);
    if (d_dino > 0) {
        dino_background_ = gaussian_column(seed, "structure-background", d_dino);
        position_ = gaussian_column(seed, "structure-position", d_dino * 4);
    }
}

const std::vector<double>& EmbeddingFactors::object(const std::string& name) const {
    const auto it = objects_.find(name);
    if (it == objects_.end()) throw DataError("no embedding factor for object '" + name + "'");
    return it->second;
}

const std::vector<double>& EmbeddingFactors::part(const std::string& name) const {
    const auto it = parts_.find(name);
    if (it == parts_.end()) throw DataError("no embedding factor for part '" + name + "'");
    return it->second;
}

const std::vector<double>& EmbeddingFactors::structural_part(const std::string& name) const {
    const auto it = dino_parts_.find(name);
    if (it == dino_parts_.end()) throw DataError("no structural factor for part '" + name + "'");
    return it->second;
}

Array<float> synth_visual_embeddings(const SceneLabels& labels, const Vocabulary& vocab,
                                     const EmbeddingFactors& factors, double sigma, double part_weight,
                                     std::uint64_t seed) {
    const std::size_t n = labels.obj_part_map.size(), c = factors.c();
    Array<float> out(Shape{n, c});
    std::vector<double> v(c);
    for (std::size_t i = 0; i < n; ++i) {
        const std::uint8_t q = labels.obj_part_map.labels[i];
        if (q == kBackground) {
            v = factors.background();
        } else {
            const auto& wo = factors.object(vocab.objects()[vocab.object_of(q)]);
            const auto& wp = factors.part(vocab.parts()[vocab.part_of(q)]);
            for (std::size_t e = 0; e < c; ++e) v[e] = wo[e] + part_weight * wp[e];
        }
        Rng rng(mix_seed(mix_seed(seed, kVisualNoiseSalt), i));
        for (std::size_t e = 0; e < c; ++e) v[e] += sigma * rng.normal();
        normalize_into(v, out.data() + i * c);
    }
    return out;
}

LanguageEmbeddings synth_language_embeddings(const Vocabulary& vocab, const EmbeddingFactors& factors) {
    const std::size_t c = factors.c();
    LanguageEmbeddings out{Array<float>(Shape{vocab.num_objects(), c}), Array<float>(Shape{vocab.num_parts(), c}),
                           Array<float>(Shape{vocab.num_obj_parts(), c})};
    std::vector<double> v(c);
    for (std::size_t o = 0; o < vocab.num_objects(); ++o) {
        v = factors.object(vocab.objects()[o]);
        normalize_into(v, out.obj.data() + o * c);
    }
    for (std::size_t p = 0; p < vocab.num_parts(); ++p) {
        v = factors.part(vocab.parts()[p]);
        normalize_into(v, out.part.data() + p * c);
    }
    for (std::size_t q = 0; q < vocab.num_obj_parts(); ++q) {
        const auto& wo = factors.object(vocab.objects()[vocab.object_of(q)]);
        const auto& wp = factors.part(vocab.parts()[vocab.part_of(q)]);
        for (std::size_t e = 0; e < c; ++e) v[e] = wo[e] + wp[e];
        normalize_into(v, out.obj_part.data() + q * c);
    }
    return out;
}

Array<float> synth_structural_features(const SceneLabels& labels, const Vocabulary& vocab,
                                       const EmbeddingFactors& factors, double sigma, double position_weight,
                                       std::uint64_t seed) {
    const std::size_t dd = factors.d_dino();
    if (dd == 0) throw DataError("structural features requested with d_dino = 0");
    const std::size_t h = labels.obj_part_map.height, w = labels.obj_part_map.width;
    Array<float> out(Shape{h * w, dd});
    const auto& pos = factors.position_map();
    std::vector<double> v(dd);
    for (std::size_t i = 0; i < h * w; ++i) {
        const std::uint8_t q = labels.obj_part_map.labels[i];
        v = q == kBackground ? factors.structural_background()
                             : factors.structural_part(vocab.parts()[vocab.part_of(q)]);
        const double fy = std::numbers::pi * (static_cast<double>(i / w) + 0.5) / static_cast<double>(h);
        const double fx = std::numbers::pi * (static_cast<double>(i % w) + 0.5) / static_cast<double>(w);
        const double basis[4] = {std::sin(fy), std::cos(fy), std::sin(fx), std::cos(fx)};
        Rng rng(mix_seed(mix_seed(seed, kStructuralNoiseSalt), i));
        for (std::size_t e = 0; e < dd; ++e) {
            double p = 0.0;
            for (std::size_t b = 0; b < 4; ++b) p += pos[e * 4 + b] * basis[b];
            v[e] += position_weight * p + sigma * rng.normal();
        }
        normalize_into(v, out.data() + i * dd);
    }
    return out;
}

SceneLabels rasterize_scene(const SceneSpec& spec, const Vocabulary& vocab, std::size_t object, std::size_t scale,
                            std::uint64_t seed) {
    const std::string& name = vocab.objects().at(object);
    const auto templates = spec.templates.empty() ? SceneSpec::default_templates(vocab) : spec.templates;
    const auto it = templates.find(name);
    if (it == templates.end()) throw DataError("no scene template for object '" + name + "'");
    Rng rng(mix_seed(seed, kJitterSalt));
    const double ox = spec.jitter > 0 ? rng.uniform(-spec.jitter, spec.jitter) : 0.0;
    const double oy = spec.jitter > 0 ? rng.uniform(-spec.jitter, spec.jitter) : 0.0;
    const double side = spec.object_scale;
    const double bx0 = 0.5 - side / 2 + ox, by0 = 0.5 - side / 2 + oy;

    const std::size_t h = spec.height * scale, w = spec.width * scale;
    SceneLabels out{LabelMap(w, h), LabelMap(w, h)};
    std::vector<std::pair<std::size_t, Rect>> regions;
    for (const auto& pt : it->second) {
        const auto q = vocab.find_obj_part(object, vocab.part_index(pt.part));
        if (!q) throw DataError("template part '" + pt.part + "' is not a class of '" + name + "'");
        regions.emplace_back(*q, pt.region);
    }
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            const double u = ((static_cast<double>(x) + 0.5) / static_cast<double>(w) - bx0) / side;
            const double v = ((static_cast<double>(y) + 0.5) / static_cast<double>(h) - by0) / side;
            for (const auto& [q, r] : regions) {
                if (u >= r.x0 && u < r.x1 && v >= r.y0 && v < r.y1) {
                    out.obj_part_map.at(y, x) = static_cast<std::uint8_t>(q);
                    out.object_map.at(y, x) = static_cast<std::uint8_t>(object);
                }
            }
        }
    }
    return out;
}

Sample generate_sample(const SceneSpec& spec, const Vocabulary& vocab, const EmbeddingFactors& factors,
                       std::size_t object, std::uint64_t seed) {
    if (vocab.num_obj_parts() >= kBackground) throw DataError("vocabulary too large for 8-bit label maps");
    const SceneLabels grid = rasterize_scene(spec, vocab, object, 1, seed);
    SceneLabels labels = spec.label_scale == 1 ? grid : rasterize_scene(spec, vocab, object, spec.label_scale, seed);
    if (spec.label_noise > 0.0) {
        Rng rng(mix_seed(seed, kLabelNoiseSalt));
        const auto& siblings = vocab.parts_of_object(object);
        for (auto& q : labels.obj_part_map.labels) {
            if (q == kBackground) continue;
            if (rng.uniform() < spec.label_noise) q = static_cast<std::uint8_t>(siblings[rng.below(siblings.size())]);
        }
    }
    Sample s;
    s.embeddings.height = spec.height;
    s.embeddings.width = spec.width;
    s.embeddings.visual = synth_visual_embeddings(grid, vocab, factors, spec.sigma, spec.part_weight, seed);
    auto lang = synth_language_embeddings(vocab, factors);
    s.embeddings.language_obj = std::move(lang.obj);
    s.embeddings.language_part = std::move(lang.part);
    s.embeddings.language_obj_part = std::move(lang.obj_part);
    if (spec.d_dino > 0) {
        s.embeddings.structural =
            synth_structural_features(grid, vocab, factors, spec.sigma, spec.position_weight, seed);
    }
    s.object_map = std::move(labels.object_map);
    s.obj_part_map = std::move(labels.obj_part_map);
    s.pixel_weight.assign(s.obj_part_map.size(), 1.0f);
    return s;
}

Sample generate_sample(const SceneSpec& spec, const Vocabulary& vocab, std::size_t object, std::uint64_t seed) {
    return generate_sample(spec, vocab, EmbeddingFactors(vocab, spec.c, spec.d_dino, spec.seed), object, seed);
}

Sample restrict_sample(const Sample& sample, const Vocabulary& full, const Vocabulary& sub,
                       const std::vector<std::size_t>& kept) {
    constexpr std::size_t none = static_cast<std::size_t>(-1);
    std::vector<std::size_t> new_index(full.num_obj_parts(), none);
    for (std::size_t i = 0; i < kept.size(); ++i) new_index.at(kept[i]) = i;

    Sample out = sample;
    const std::size_t c = sample.embeddings.visual.dim(1);
    out.embeddings.language_obj = Array<float>(Shape{sub.num_objects(), c});
    out.embeddings.language_part = Array<float>(Shape{sub.num_parts(), c});
    out.embeddings.language_obj_part = Array<float>(Shape{sub.num_obj_parts(), c});
    auto copy_row = [c](const Array<float>& src, std::size_t from, Array<float>& dst, std::size_t to) {
        std::copy_n(src.data() + from * c, c, dst.data() + to * c);
    };
    for (std::size_t o = 0; o < sub.num_objects(); ++o) {
        copy_row(sample.embeddings.language_obj, full.object_index(sub.objects()[o]), out.embeddings.language_obj, o);
    }
    for (std::size_t p = 0; p < sub.num_parts(); ++p) {
        copy_row(sample.embeddings.language_part, full.part_index(sub.parts()[p]), out.embeddings.language_part, p);
    }
    for (std::size_t i = 0; i < kept.size(); ++i) {
        copy_row(sample.embeddings.language_obj_part, kept[i], out.embeddings.language_obj_part, i);
    }
    for (std::size_t i = 0; i < out.obj_part_map.size(); ++i) {
        const std::uint8_t q = sample.obj_part_map.labels[i];
        if (q == kBackground) {
            out.object_map.labels[i] = kBackground;
            continue;
        }
        const std::size_t nq = new_index.at(q);
        if (nq == none) {
            out.obj_part_map.labels[i] = kBackground;
            out.object_map.labels[i] = kBackground;
            out.pixel_weight[i] = 0.0f;
        } else {
            out.obj_part_map.labels[i] = static_cast<std::uint8_t>(nq);
            out.object_map.labels[i] = static_cast<std::uint8_t>(sub.object_of(nq));
        }
    }
    return out;
}

Splits generate_splits(const SceneSpec& spec, const Vocabulary& vocab, std::size_t n_train, std::size_t n_eval,
                       std::uint64_t seed) {
    if (n_train == 0 || n_eval == 0) throw DataError("both splits need at least one sample");
    spec.validate(vocab);
    auto [train_vocab, kept] = vocab.seen_subset();
    if (kept.size() == vocab.num_obj_parts()) throw DataError("split policy marks no class as novel");
    Splits out{vocab, std::move(train_vocab), std::move(kept), {}, {}};
    const EmbeddingFactors factors(vocab, spec.c, spec.d_dino, spec.seed);
    const std::size_t objects = vocab.num_objects();
    out.train.reserve(n_train);
    for (std::size_t k = 0; k < n_train; ++k) {
        Sample s = generate_sample(spec, vocab, factors, k % objects, mix_seed(seed, 0x10000 + k));
        s = restrict_sample(s, vocab, out.train_vocab, out.train_kept);
        s.id = "train_" + std::to_string(k);
        out.train.push_back(std::move(s));
    }
    out.eval.reserve(n_eval);
    for (std::size_t k = 0; k < n_eval; ++k) {
        Sample s = generate_sample(spec, vocab, factors, k % objects, mix_seed(seed, 0x20000 + k));
        s.id = "eval_" + std::to_string(k);
        out.eval.push_back(std::move(s));
    }
    return out;
}

}  // namespace partcat
