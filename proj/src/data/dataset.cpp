#include <fstream>

#include "partcat/data.hpp"

namespace partcat {

namespace {

TensorRecord label_record(const std::string& name, const LabelMap& map) {
    return TensorRecord::from_bytes(
        name, {static_cast<std::uint32_t>(map.height), static_cast<std::uint32_t>(map.width)}, map.labels);
}

LabelMap label_from_record(const TensorRecord& r) {
    if (r.dims.size() != 2) throw DataError("label record '" + r.name + "' must be rank 2");
    LabelMap m(r.dims[1], r.dims[0]);
    m.labels = r.bytes();
    return m;
}

// [HW x k] stored as [H x W x k].
TensorRecord grid_record(const std::string& name, const Array<float>& a, std::size_t h, std::size_t w) {
    return TensorRecord::from(name, a.reshaped(Shape{h, w, a.dim(1)}));
}

}  // namespace

std::vector<TensorRecord> sample_to_records(const Sample& s) {
    const auto& e = s.embeddings;
    e.validate();
    std::vector<TensorRecord> out;
    out.push_back(grid_record("visual", e.visual, e.height, e.width));
    out.push_back(TensorRecord::from("language_obj", e.language_obj));
    out.push_back(TensorRecord::from("language_part", e.language_part));
    out.push_back(TensorRecord::from("language_obj_part", e.language_obj_part));
    if (e.structural) out.push_back(grid_record("structural", *e.structural, e.height, e.width));
    out.push_back(label_record("object_map", s.object_map));
    out.push_back(label_record("obj_part_map", s.obj_part_map));
    out.push_back(TensorRecord::from("pixel_weight", Array<float>(Shape{s.pixel_weight.size()}, s.pixel_weight)));
    return out;
}

Sample sample_from_records(const std::string& id, const std::vector<TensorRecord>& records) {
    Sample s;
    s.id = id;
    const Array<float> visual = find_record(records, "visual").to_array<float>();
    if (visual.rank() != 3) throw DataError(id + ": visual record must be [H x W x c]");
    s.embeddings.height = visual.dim(0);
    s.embeddings.width = visual.dim(1);
    const std::size_t n = visual.dim(0) * visual.dim(1);
    s.embeddings.visual = visual.reshaped(Shape{n, visual.dim(2)});
    s.embeddings.language_obj = find_record(records, "language_obj").to_array<float>();
    s.embeddings.language_part = find_record(records, "language_part").to_array<float>();
    s.embeddings.language_obj_part = find_record(records, "language_obj_part").to_array<float>();
    for (const auto& r : records) {
        if (r.name == "structural") {
            const Array<float> st = r.to_array<float>();
            if (st.rank() != 3) throw DataError(id + ": structural record must be [H x W x d]");
            s.embeddings.structural = st.reshaped(Shape{n, st.dim(2)});
        }
    }
    s.object_map = label_from_record(find_record(records, "object_map"));
    s.obj_part_map = label_from_record(find_record(records, "obj_part_map"));
    s.pixel_weight = find_record(records, "pixel_weight").to_array<float>().vec();
    s.embeddings.validate();
    (void)s.label_scale();
    return s;
}

std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot read manifest " + path.string());
    std::vector<ManifestEntry> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line.front() == '#') continue;
        const auto t1 = line.find('\t');
        const auto t2 = t1 == std::string::npos ? t1 : line.find('\t', t1 + 1);
        if (t2 == std::string::npos) {
            throw DataError(path.string() + ":" + std::to_string(lineno) + ": expected id TAB container TAB labelmap");
        }
        out.push_back({line.substr(0, t1), line.substr(t1 + 1, t2 - t1 - 1), line.substr(t2 + 1)});
    }
    return out;
}

void write_manifest(const std::filesystem::path& path, const std::vector<ManifestEntry>& entries) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write manifest " + path.string());
    for (const auto& e : entries) {
        out << e.id << '\t' << e.container.generic_string() << '\t' << e.labelmap.generic_string() << '\n';
    }
}

DatasetPaths build_dataset(const std::filesystem::path& root, const SceneSpec& spec, const Vocabulary& vocab,
                           std::size_t n_train, std::size_t n_eval, std::uint64_t seed) {
    const Splits splits = generate_splits(spec, vocab, n_train, n_eval, seed);
    std::filesystem::create_directories(root / "samples");
    save_class_list(root / "classes.txt", vocab.to_class_list());
    {
        std::ofstream cfg(root / "scene.cfg");
        cfg << spec.to_string();
    }
    write_label_names(root / "train.names", splits.train_vocab.obj_parts());
    write_label_names(root / "eval.names", vocab.obj_parts());
    auto write_split = [&root](const std::vector<Sample>& samples, const std::string& manifest) {
        std::vector<ManifestEntry> entries;
        for (const auto& s : samples) {
            const std::filesystem::path container = std::filesystem::path("samples") / (s.id + ".ptnsr");
            const std::filesystem::path labels = std::filesystem::path("samples") / (s.id + ".pgm");
            write_tensor_container(root / container, sample_to_records(s));
            write_pgm(root / labels, s.obj_part_map);
            entries.push_back({s.id, container, labels});
        }
        write_manifest(root / manifest, entries);
    };
    write_split(splits.train, "train.manifest");
    write_split(splits.eval, "eval.manifest");
    return DatasetPaths{root};
}

std::vector<Sample> load_samples(const std::filesystem::path& manifest) {
    const auto dir = manifest.parent_path();
    std::vector<Sample> out;
    for (const auto& e : read_manifest(manifest)) {
        Sample s = sample_from_records(e.id, read_tensor_container(dir / e.container));
        if (read_pgm(dir / e.labelmap) != s.obj_part_map) {
            throw DataError("sample '" + e.id + "': label map file disagrees with its container");
        }
        out.push_back(std::move(s));
    }
    if (out.empty()) throw DataError("manifest " + manifest.string() + " lists no samples");
    return out;
}

Vocabulary load_dataset_vocabulary(const std::filesystem::path& root) {
    return Vocabulary::build(load_class_list(root / "classes.txt"));
}

}  // namespace partcat
