#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "partcat/array.hpp"
#include "partcat/labelmap.hpp"
#include "partcat/sample.hpp"
#include "partcat/vocab.hpp"

namespace partcat {

class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// ---- tensor container -------------------------------------------------------

enum class DType : std::uint8_t { f32 = 0, f64 = 1, u8 = 2 };

struct TensorRecord {
    std::string name;
    DType dtype = DType::f32;
    std::vector<std::uint32_t> dims;
    std::vector<std::uint8_t> payload;  // little-endian, row-major

    static TensorRecord from(std::string name, const Array<float>& a);
    static TensorRecord from(std::string name, const Array<double>& a);
    static TensorRecord from_bytes(std::string name, std::vector<std::uint32_t> dims, std::vector<std::uint8_t> bytes);

    Shape shape() const;
    /// f32 and f64 records convert to either precision.
    template <typename T> Array<T> to_array() const;
    /// u8 payload.
    const std::vector<std::uint8_t>& bytes() const;

    friend bool operator==(const TensorRecord&, const TensorRecord&) = default;
};

void write_tensor_container(const std::filesystem::path& path, const std::vector<TensorRecord>& records);
std::vector<TensorRecord> read_tensor_container(const std::filesystem::path& path);
std::vector<std::uint8_t> encode_tensor_container(const std::vector<TensorRecord>& records);
std::vector<TensorRecord> decode_tensor_container(const std::vector<std::uint8_t>& bytes);

const TensorRecord& find_record(const std::vector<TensorRecord>& records, const std::string& name);

// ---- synthetic scenes -------------------------------------------------------

struct Rect {
    double x0 = 0, y0 = 0, x1 = 1, y1 = 1;  // canonical unit-square coordinates, half-open
};

struct PartTemplate {
    std::string part;
    Rect region;
};

struct SceneSpec {
    std::size_t height = 16;
    std::size_t width = 16;
    std::size_t label_scale = 1;  // label maps are (H·s) x (W·s)
    std::size_t c = 32;
    std::size_t d_dino = 16;      // 0: no structural features
    double sigma = 0.1;           // per-component embedding noise
    double part_weight = 0.6;     // part factor strength in visual embeddings
    double position_weight = 0.3; // smooth positional term in structural features
    double object_scale = 0.75;   // object box side as a fraction of the grid
    double jitter = 0.1;          // max box offset as a fraction of the grid
    double label_noise = 0.0;     // chance an obj-part pixel is relabeled to a sibling part
    std::uint64_t seed = 0;       // dataset-wide factor seed
    std::map<std::string, std::vector<PartTemplate>> templates;  // by object name

    void validate(const Vocabulary& vocab) const;

    /// Canonical layouts for the object/part names of `vocab`: known part names get
    /// fixed regions, other objects tile their parts over the box.
    static std::map<std::string, std::vector<PartTemplate>> default_templates(const Vocabulary& vocab);

    /// key=value text (templates are not configurable this way).
    static SceneSpec parse(const std::string& text);
    std::string to_string() const;
};

/// Dataset-wide embedding factors, fixed by (seed, widths) and addressed by name.
class EmbeddingFactors {
public:
    EmbeddingFactors(const Vocabulary& vocab, std::size_t c, std::size_t d_dino, std::uint64_t seed);

    const std::vector<double>& object(const std::string& name) const;
    const std::vector<double>& part(const std::string& name) const;
    const std::vector<double>& background() const { return background_; }
    const std::vector<double>& structural_part(const std::string& name) const;
    const std::vector<double>& structural_background() const { return dino_background_; }
    /// [d_dino x 4] map from (sin y, cos y, sin x, cos x) to structural space.
    const std::vector<double>& position_map() const { return position_; }
    std::size_t c() const { return c_; }
    std::size_t d_dino() const { return d_dino_; }

private:
    std::size_t c_, d_dino_;
    std::map<std::string, std::vector<double>> objects_, parts_, dino_parts_;
    std::vector<double> background_, dino_background_, position_;
};

/// Labels for one scene at the embedding grid, in full-vocabulary indices.
struct SceneLabels {
    LabelMap object_map;
    LabelMap obj_part_map;
};

/// D^V rows for the grid; noise seeded by (seed, pixel).
Array<float> synth_visual_embeddings(const SceneLabels& labels, const Vocabulary& vocab,
                                     const EmbeddingFactors& factors, double sigma, double part_weight,
                                     std::uint64_t seed);

struct LanguageEmbeddings {
    Array<float> obj, part, obj_part;
};
LanguageEmbeddings synth_language_embeddings(const Vocabulary& vocab, const EmbeddingFactors& factors);

/// Structural features; same generalized part => shared factor regardless of object.
Array<float> synth_structural_features(const SceneLabels& labels, const Vocabulary& vocab,
                                       const EmbeddingFactors& factors, double sigma,
                                       double position_weight, std::uint64_t seed);

/// Rasterizes one instance of `object` with jitter at resolution (H·scale) x (W·scale).
SceneLabels rasterize_scene(const SceneSpec& spec, const Vocabulary& vocab, std::size_t object,
                            std::size_t scale, std::uint64_t seed);

/// One full-vocabulary sample of the given object, fully determined by (spec, seed).
Sample generate_sample(const SceneSpec& spec, const Vocabulary& vocab, const EmbeddingFactors& factors,
                       std::size_t object, std::uint64_t seed);
Sample generate_sample(const SceneSpec& spec, const Vocabulary& vocab, std::size_t object, std::uint64_t seed);

/// Re-expresses a full-vocabulary sample over a sub-vocabulary: labels are re-indexed,
/// pixels of excluded classes become background with weight 0, and language rows are subset.
Sample restrict_sample(const Sample& sample, const Vocabulary& full, const Vocabulary& sub,
                       const std::vector<std::size_t>& kept);

struct Splits {
    Vocabulary full;
    Vocabulary train_vocab;  // seen classes only
    std::vector<std::size_t> train_kept;
    std::vector<Sample> train;
    std::vector<Sample> eval;
};

/// In-memory train/eval generation. Objects cycle round-robin; training samples carry
/// seen classes only.
Splits generate_splits(const SceneSpec& spec, const Vocabulary& vocab, std::size_t n_train,
                       std::size_t n_eval, std::uint64_t seed);

// ---- on-disk datasets -------------------------------------------------------

struct ManifestEntry {
    std::string id;
    std::filesystem::path container;
    std::filesystem::path labelmap;
};

std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path);
void write_manifest(const std::filesystem::path& path, const std::vector<ManifestEntry>& entries);

std::vector<TensorRecord> sample_to_records(const Sample& sample);
Sample sample_from_records(const std::string& id, const std::vector<TensorRecord>& records);

struct DatasetPaths {
    std::filesystem::path root;
    std::filesystem::path train_manifest() const { return root / "train.manifest"; }
    std::filesystem::path eval_manifest() const { return root / "eval.manifest"; }
    std::filesystem::path class_list() const { return root / "classes.txt"; }
};

/// Writes classes.txt, scene.cfg, {train,eval}.manifest, {train,eval}.names and per-sample
/// container + P5 files under `root`. Throws if either split would be empty.
DatasetPaths build_dataset(const std::filesystem::path& root, const SceneSpec& spec, const Vocabulary& vocab,
                           std::size_t n_train, std::size_t n_eval, std::uint64_t seed);

/// Loads every sample of a manifest (paths relative to the manifest's directory).
std::vector<Sample> load_samples(const std::filesystem::path& manifest);

/// Full vocabulary from classes.txt next to a manifest; the training vocabulary is its seen subset.
Vocabulary load_dataset_vocabulary(const std::filesystem::path& root);

}  // namespace partcat
