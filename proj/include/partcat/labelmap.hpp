#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace partcat {

inline constexpr std::uint8_t kBackground = 255;

/// Per-pixel class index (row-major) or kBackground.
struct LabelMap {
    std::size_t width = 0;
    std::size_t height = 0;
    std::vector<std::uint8_t> labels;

    LabelMap() = default;
    LabelMap(std::size_t w, std::size_t h, std::uint8_t fill = kBackground)
        : width(w), height(h), labels(w * h, fill) {}

    std::size_t size() const { return labels.size(); }
    std::uint8_t& at(std::size_t y, std::size_t x) { return labels.at(y * width + x); }
    std::uint8_t at(std::size_t y, std::size_t x) const { return labels.at(y * width + x); }

    /// Throws if any non-background label is >= num_classes or the size is inconsistent.
    void validate(std::size_t num_classes) const;

    friend bool operator==(const LabelMap&, const LabelMap&) = default;
};

/// Binary P5 graymap, maxval 255.
void write_pgm(const std::filesystem::path& path, const LabelMap& map);
LabelMap read_pgm(const std::filesystem::path& path);

/// Sidecar binding label values to class names: one "index<TAB>name" line each.
void write_label_names(const std::filesystem::path& path, const std::vector<std::string>& names);
std::vector<std::string> read_label_names(const std::filesystem::path& path);

}  // namespace partcat
