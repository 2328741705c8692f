#include "partcat/vocab.hpp"

#include <algorithm>
#include <fstream>
#include <optional>
#include <unordered_map>
#include <unordered_set>

namespace partcat {

namespace {

std::string trim(const std::string& s) {
    const auto first = s.find_first_not_of(" \t\r\n");
    if (first == std::string::npos) return {};
    const auto last = s.find_last_not_of(" \t\r\n");
    return s.substr(first, last - first + 1);
}

std::size_t find_index(const std::vector<std::string>& list, const std::string& name,
                       const char* kind) {
    const auto it = std::find(list.begin(), list.end(), name);
    if (it == list.end()) throw VocabError(std::string("unknown ") + kind + " class '" + name + "'");
    return static_cast<std::size_t>(it - list.begin());
}

}  // namespace

ClassName parse_class_name(const std::string& name) {
    static const std::string sep = "'s ";
    const auto pos = name.rfind(sep);
    if (pos == std::string::npos) {
        throw VocabError("class name '" + name + "' has no \"'s \" separator");
    }
    ClassName out{trim(name.substr(0, pos)), trim(name.substr(pos + sep.size()))};
    if (out.object.empty() || out.part.empty()) {
        throw VocabError("class name '" + name + "' has an empty object or part");
    }
    return out;
}

ClassList load_class_list(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw VocabError("cannot read class list " + path.string());
    ClassList list;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const std::string t = trim(line);
        if (t.empty() || t.front() == '#') continue;
        const auto tab = line.find('\t');
        if (tab == std::string::npos) {
            throw VocabError(path.string() + ":" + std::to_string(lineno) + ": expected <seen|novel>TAB<name>");
        }
        const std::string flag = trim(line.substr(0, tab));
        const std::string name = trim(line.substr(tab + 1));
        if (flag != "seen" && flag != "novel") {
            throw VocabError(path.string() + ":" + std::to_string(lineno) + ": bad split flag '" + flag + "'");
        }
        if (name.empty()) throw VocabError(path.string() + ":" + std::to_string(lineno) + ": empty class name");
        list.names.push_back(name);
        list.seen.push_back(flag == "seen");
    }
    return list;
}

void save_class_list(const std::filesystem::path& path, const ClassList& list) {
    std::ofstream out(path);
    if (!out) throw VocabError("cannot write class list " + path.string());
    for (std::size_t i = 0; i < list.names.size(); ++i) {
        out << (list.seen[i] ? "seen" : "novel") << '\t' << list.names[i] << '\n';
    }
}

Vocabulary Vocabulary::build(const std::vector<std::string>& names, const std::vector<bool>& seen) {
    if (names.size() != seen.size()) {
        throw VocabError("class list has " + std::to_string(names.size()) + " names but " +
                         std::to_string(seen.size()) + " split flags");
    }
    Vocabulary v;
    std::unordered_map<std::string, std::size_t> obj_idx, part_idx;
    std::unordered_set<std::string> seen_names;
    for (std::size_t q = 0; q < names.size(); ++q) {
        if (!seen_names.insert(names[q]).second) throw VocabError("duplicate class name '" + names[q] + "'");
        const ClassName cn = parse_class_name(names[q]);
        auto [oit, onew] = obj_idx.emplace(cn.object, v.objects_.size());
        if (onew) {
            v.objects_.push_back(cn.object);
            v.inverse_.emplace_back();
        }
        auto [pit, pnew] = part_idx.emplace(cn.part, v.parts_.size());
        if (pnew) v.parts_.push_back(cn.part);
        v.obj_parts_.push_back(names[q]);
        v.object_of_.push_back(oit->second);
        v.part_of_.push_back(pit->second);
        v.inverse_[oit->second].push_back(q);
    }
    v.seen_ = seen;
    return v;
}

std::size_t Vocabulary::object_index(const std::string& name) const {
    return find_index(objects_, name, "object");
}

std::size_t Vocabulary::part_index(const std::string& name) const {
    return find_index(parts_, name, "part");
}

std::size_t Vocabulary::obj_part_index(const std::string& name) const {
    return find_index(obj_parts_, name, "object-specific part");
}

std::optional<std::size_t> Vocabulary::find_obj_part(std::size_t object, std::size_t part) const {
    for (std::size_t q : inverse_.at(object)) {
        if (part_of_[q] == part) return q;
    }
    return std::nullopt;
}

std::pair<Vocabulary, std::vector<std::size_t>> Vocabulary::subset(
    const std::vector<std::size_t>& kept) const {
    std::vector<std::string> names;
    std::vector<bool> flags;
    for (std::size_t q : kept) {
        names.push_back(obj_parts_.at(q));
        flags.push_back(seen_.at(q));
    }
    return {build(names, flags), kept};
}

std::pair<Vocabulary, std::vector<std::size_t>> Vocabulary::seen_subset() const {
    std::vector<std::size_t> kept;
    for (std::size_t q = 0; q < obj_parts_.size(); ++q) {
        if (seen_[q]) kept.push_back(q);
    }
    if (kept.empty()) throw VocabError("vocabulary has no seen classes");
    return subset(kept);
}

ClassList Vocabulary::to_class_list() const {
    return ClassList{obj_parts_, seen_};
}

}  // namespace partcat
