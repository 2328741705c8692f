#include "partcat/labelmap.hpp"

#include <charconv>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace partcat {

void LabelMap::validate(std::size_t num_classes) const {
    if (labels.size() != width * height) throw std::invalid_argument("label map size does not match its dimensions");
    for (std::uint8_t v : labels) {
        if (v != kBackground && v >= num_classes) {
            throw std::invalid_argument("label " + std::to_string(v) + " out of range for " +
                                        std::to_string(num_classes) + " classes");
        }
    }
}

void write_pgm(const std::filesystem::path& path, const LabelMap& map) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << "P5\n" << map.width << ' ' << map.height << "\n255\n";
    out.write(reinterpret_cast<const char*>(map.labels.data()), static_cast<std::streamsize>(map.labels.size()));
    if (!out) throw std::runtime_error("failed writing " + path.string());
}

namespace {

// Next whitespace-delimited header token, skipping '#' comments.
std::string header_token(std::istream& in) {
    std::string tok;
    char ch;
    while (in.get(ch)) {
        if (ch == '#') {
            std::string rest;
            std::getline(in, rest);
            continue;
        }
        if (std::isspace(static_cast<unsigned char>(ch))) {
            if (!tok.empty()) return tok;
            continue;
        }
        tok.push_back(ch);
    }
    return tok;
}

}  // namespace

LabelMap read_pgm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read " + path.string());
    if (header_token(in) != "P5") throw std::runtime_error(path.string() + ": not a binary graymap (P5)");
    std::size_t w = 0, h = 0, maxval = 0;
    try {
        w = std::stoul(header_token(in));
        h = std::stoul(header_token(in));
        maxval = std::stoul(header_token(in));
    } catch (const std::logic_error&) {
        throw std::runtime_error(path.string() + ": malformed graymap header");
    }
    if (maxval != 255 || w == 0 || h == 0) throw std::runtime_error(path.string() + ": unsupported graymap header");
    LabelMap map(w, h);
    in.read(reinterpret_cast<char*>(map.labels.data()), static_cast<std::streamsize>(map.labels.size()));
    if (in.gcount() != static_cast<std::streamsize>(map.labels.size())) {
        throw std::runtime_error(path.string() + ": truncated graymap payload");
    }
    return map;
}

void write_label_names(const std::filesystem::path& path, const std::vector<std::string>& names) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    for (std::size_t i = 0; i < names.size(); ++i) out << i << '\t' << names[i] << '\n';
    out << static_cast<unsigned>(kBackground) << "\tbackground\n";
}

std::vector<std::string> read_label_names(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read " + path.string());
    std::vector<std::string> names;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto tab = line.find('\t');
        if (tab == std::string::npos) throw std::runtime_error(path.string() + ": malformed names line");
        std::size_t idx = 0;
        const auto field = line.substr(0, tab);
        const auto [end, ec] = std::from_chars(field.data(), field.data() + field.size(), idx);
        if (ec != std::errc{} || end != field.data() + field.size()) {
            throw std::runtime_error(path.string() + ": bad index '" + field + "'");
        }
        if (idx == kBackground) continue;
        if (idx != names.size()) throw std::runtime_error(path.string() + ": names out of order");
        names.push_back(line.substr(tab + 1));
    }
    return names;
}

}  // namespace partcat
