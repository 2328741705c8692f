#include <charconv>
#include <fstream>
#include <sstream>

#include "partcat/model.hpp"

namespace partcat {

namespace {

std::string trim(const std::string& s) {
    const auto first = s.find_first_not_of(" \t\r\n");
    if (first == std::string::npos) return {};
    const auto last = s.find_last_not_of(" \t\r\n");
    return s.substr(first, last - first + 1);
}

std::size_t parse_count(const std::string& key, const std::string& value) {
    std::size_t out = 0;
    const auto* end = value.data() + value.size();
    const auto [ptr, ec] = std::from_chars(value.data(), end, out);
    if (ec != std::errc{} || ptr != end) {
        throw ConfigError("config key '" + key + "': expected a non-negative integer, got '" + value + "'");
    }
    return out;
}

bool parse_flag(const std::string& key, const std::string& value) {
    if (value == "1" || value == "true" || value == "on") return true;
    if (value == "0" || value == "false" || value == "off") return false;
    throw ConfigError("config key '" + key + "': expected a boolean, got '" + value + "'");
}

}  // namespace

const char* level_name(Level level) {
    switch (level) {
        case Level::obj: return "obj";
        case Level::part: return "part";
        case Level::obj_part: return "obj_part";
    }
    return "?";
}

bool GuidanceLevels::at(Level level) const {
    switch (level) {
        case Level::obj: return obj;
        case Level::part: return part;
        case Level::obj_part: return obj_part;
    }
    return false;
}

GuidanceLevels GuidanceLevels::parse(const std::string& text) {
    const std::string s = trim(text);
    if (s == "none" || s.empty()) return {};
    if (s == "all") return {true, true, true};
    GuidanceLevels g;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (item == "obj") g.obj = true;
        else if (item == "part") g.part = true;
        else if (item == "obj-part" || item == "obj_part") g.obj_part = true;
        else throw ConfigError("unknown guidance level '" + item + "'");
    }
    return g;
}

std::string GuidanceLevels::to_string() const {
    if (!any()) return "none";
    if (obj && part && obj_part) return "all";
    std::string s;
    auto append = [&s](const char* name) {
        if (!s.empty()) s += ',';
        s += name;
    };
    if (obj) append("obj");
    if (part) append("part");
    if (obj_part) append("obj-part");
    return s;
}

void ModelConfig::validate() const {
    if (c == 0 || d == 0) throw ConfigError("model widths c and d must be positive");
    if (heads == 0 || d % heads != 0) {
        throw ConfigError("d=" + std::to_string(d) + " is not divisible by heads=" + std::to_string(heads));
    }
    if (depth == 0) throw ConfigError("depth must be at least 1");
    if (ffn_mult == 0) throw ConfigError("ffn_mult must be at least 1");
    if (embed_kernel % 2 == 0) throw ConfigError("embed_kernel must be odd");
    if (upsample == 0) throw ConfigError("upsample must be at least 1");
    if (pos_bias && max_grid == 0) throw ConfigError("max_grid must be positive with pos_bias");
    if (window != 0 && window % 2 == 0) throw ConfigError("window must be odd (or 0 for full attention)");
    if (guidance.any() && d_dino == 0) throw ConfigError("guidance requested but d_dino = 0");
    if (mode == ModelMode::single_volume && (guidance.obj || guidance.part)) {
        throw ConfigError("single-volume mode has no object or part branch to guide");
    }
}

ModelConfig ModelConfig::parse(const std::string& text) {
    ModelConfig cfg;
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
        if (key == "c") cfg.c = parse_count(key, value);
        else if (key == "d") cfg.d = parse_count(key, value);
        else if (key == "d_dino") cfg.d_dino = parse_count(key, value);
        else if (key == "heads") cfg.heads = parse_count(key, value);
        else if (key == "depth") cfg.depth = parse_count(key, value);
        else if (key == "ffn_mult") cfg.ffn_mult = parse_count(key, value);
        else if (key == "embed_kernel") cfg.embed_kernel = parse_count(key, value);
        else if (key == "upsample") cfg.upsample = parse_count(key, value);
        else if (key == "pos_bias") cfg.pos_bias = parse_flag(key, value);
        else if (key == "max_grid") cfg.max_grid = parse_count(key, value);
        else if (key == "window") cfg.window = parse_count(key, value);
        else if (key == "guidance_levels" || key == "guidance") cfg.guidance = GuidanceLevels::parse(value);
        else if (key == "seed") cfg.seed = parse_count(key, value);
        else if (key == "mode") {
            if (value == "disentangled") cfg.mode = ModelMode::disentangled;
            else if (value == "single" || value == "single_volume") cfg.mode = ModelMode::single_volume;
            else throw ConfigError("unknown model mode '" + value + "'");
        } else {
            throw ConfigError("unknown model config key '" + key + "'");
        }
    }
    cfg.validate();
    return cfg;
}

ModelConfig ModelConfig::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read model config " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str());
}

std::string ModelConfig::to_string() const {
    std::ostringstream out;
    out << "c=" << c << "\nd=" << d << "\nd_dino=" << d_dino << "\nheads=" << heads
        << "\ndepth=" << depth << "\nffn_mult=" << ffn_mult << "\nembed_kernel=" << embed_kernel
        << "\nupsample=" << upsample << "\npos_bias=" << (pos_bias ? 1 : 0)
        << "\nmax_grid=" << max_grid << "\nwindow=" << window
        << "\nguidance_levels=" << guidance.to_string()
        << "\nmode=" << (mode == ModelMode::disentangled ? "disentangled" : "single")
        << "\nseed=" << seed << "\n";
    return out.str();
}

}  // namespace partcat
