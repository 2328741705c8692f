#pragma once

#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace partcat {

class VocabError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

struct ClassName {
    std::string object;
    std::string part;
};

/// Splits "object's part" at the last "'s " separator; both sides trimmed and non-empty.
ClassName parse_class_name(const std::string& name);

struct ClassList {
    std::vector<std::string> names;
    std::vector<bool> seen;
};

/// Reads `<seen|novel>\t<object's part>` lines; blank lines and `#` comments are skipped.
ClassList load_class_list(const std::filesystem::path& path);
void save_class_list(const std::filesystem::path& path, const ClassList& list);

/// Object / generalized-part / object-specific-part taxonomy with the part-to-object
/// mapping and its inverse. Indices follow first appearance in the source list.
class Vocabulary {
public:
    static Vocabulary build(const std::vector<std::string>& names, const std::vector<bool>& seen);
    static Vocabulary build(const ClassList& list) { return build(list.names, list.seen); }

    const std::vector<std::string>& objects() const { return objects_; }
    const std::vector<std::string>& parts() const { return parts_; }
    const std::vector<std::string>& obj_parts() const { return obj_parts_; }

    std::size_t num_objects() const { return objects_.size(); }
    std::size_t num_parts() const { return parts_.size(); }
    std::size_t num_obj_parts() const { return obj_parts_.size(); }

    /// M(q): object index of object-specific part q.
    std::size_t object_of(std::size_t q) const { return object_of_.at(q); }
    /// Generalized-part index of object-specific part q.
    std::size_t part_of(std::size_t q) const { return part_of_.at(q); }
    const std::vector<std::size_t>& object_map() const { return object_of_; }
    const std::vector<std::size_t>& part_map() const { return part_of_; }

    /// M⁻¹(o) in ascending index order.
    const std::vector<std::size_t>& parts_of_object(std::size_t o) const { return inverse_.at(o); }

    bool is_seen(std::size_t q) const { return seen_.at(q); }
    const std::vector<bool>& seen_mask() const { return seen_; }

    /// Index lookups; throw VocabError for unknown names.
    std::size_t object_index(const std::string& name) const;
    std::size_t part_index(const std::string& name) const;
    std::size_t obj_part_index(const std::string& name) const;
    /// Object-specific part index for (object, part), if that pair exists.
    std::optional<std::size_t> find_obj_part(std::size_t object, std::size_t part) const;

    /// Vocabulary restricted to the given object-specific parts (in the given order),
    /// with `kept[i]` the index in this vocabulary of the subset's i-th class.
    std::pair<Vocabulary, std::vector<std::size_t>> subset(const std::vector<std::size_t>& kept) const;
    /// Subset of seen object-specific parts.
    std::pair<Vocabulary, std::vector<std::size_t>> seen_subset() const;

    ClassList to_class_list() const;

    friend bool operator==(const Vocabulary&, const Vocabulary&) = default;

private:
    std::vector<std::string> objects_;
    std::vector<std::string> parts_;
    std::vector<std::string> obj_parts_;
    std::vector<std::size_t> object_of_;
    std::vector<std::size_t> part_of_;
    std::vector<std::vector<std::size_t>> inverse_;
    std::vector<bool> seen_;
};

}  // namespace partcat
