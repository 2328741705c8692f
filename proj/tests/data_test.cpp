#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "partcat/data.hpp"
#include "test_util.hpp"

using namespace partcat;

namespace {

Vocabulary toy_vocab() {
    return Vocabulary::build(load_class_list(std::filesystem::path(PARTCAT_DATA_DIR) / "toy_parts.txt"));
}

SceneSpec small_spec() {
    SceneSpec s;
    s.height = s.width = 8;
    s.c = 16;
    s.d_dino = 8;
    s.seed = 3;
    return s;
}

std::filesystem::path temp_dir(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / ("partcat_data_test_" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

std::vector<std::uint8_t> file_bytes(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

double cosine_rows(const Array<float>& a, std::size_t i, std::size_t j) {
    const std::size_t c = a.dim(1);
    double dot = 0, ni = 0, nj = 0;
    for (std::size_t k = 0; k < c; ++k) {
        dot += double(a.at(i, k)) * a.at(j, k);
        ni += double(a.at(i, k)) * a.at(i, k);
        nj += double(a.at(j, k)) * a.at(j, k);
    }
    return dot / std::sqrt(ni * nj);
}

double cosine_between(const Array<float>& a, std::size_t i, const Array<float>& b, std::size_t j) {
    double dot = 0, ni = 0, nj = 0;
    for (std::size_t k = 0; k < a.dim(1); ++k) {
        dot += double(a.at(i, k)) * b.at(j, k);
        ni += double(a.at(i, k)) * a.at(i, k);
        nj += double(b.at(j, k)) * b.at(j, k);
    }
    return dot / std::sqrt(ni * nj);
}

void expect_unit_rows(const Array<float>& a) {
    for (std::size_t i = 0; i < a.dim(0); ++i) {
        double n = 0;
        for (std::size_t k = 0; k < a.dim(1); ++k) n += double(a.at(i, k)) * a.at(i, k);
        EXPECT_NEAR(std::sqrt(n), 1.0, 1e-6);
    }
}

// Three labelled pixels: cat's head, dog's head, dog's tail.
SceneLabels three_pixels(const Vocabulary& v) {
    SceneLabels l{LabelMap(3, 1), LabelMap(3, 1)};
    const std::vector<std::string> names{"cat's head", "dog's head", "dog's tail"};
    for (std::size_t i = 0; i < 3; ++i) {
        const auto q = v.obj_part_index(names[i]);
        l.obj_part_map.labels[i] = static_cast<std::uint8_t>(q);
        l.object_map.labels[i] = static_cast<std::uint8_t>(v.object_of(q));
    }
    return l;
}

}  // namespace

// ---------------------------------------------------------------- container

TEST(TensorContainer, EmptyListRoundTrips) {
    const auto bytes = encode_tensor_container({});
    EXPECT_EQ(bytes.size(), 10u);
    EXPECT_EQ(std::memcmp(bytes.data(), "PTNSR1", 6), 0);
    EXPECT_TRUE(decode_tensor_container(bytes).empty());
}

TEST(TensorContainer, TwoByThreeRecordLayout) {
    const Array<float> a(Shape{2, 3}, {1, 2, 3, 4, 5, -0.0f});
    const auto rec = TensorRecord::from("w", a);
    const auto bytes = encode_tensor_container({rec});
    // magic 6, count 4, name len 2 + 1, dtype 1, rank 1, dims 8, payload 24
    ASSERT_EQ(bytes.size(), 6u + 4 + 3 + 1 + 1 + 8 + 24);
    EXPECT_EQ(bytes[6], 1u);
    EXPECT_EQ(bytes[10], 1u);
    EXPECT_EQ(bytes[12], 'w');
    EXPECT_EQ(bytes[13], 0u);  // f32
    EXPECT_EQ(bytes[14], 2u);  // rank
    EXPECT_EQ(bytes[15], 2u);
    EXPECT_EQ(bytes[19], 3u);
    EXPECT_EQ(bytes[23], 0x00);  // 1.0f = 0x3f800000 little-endian
    EXPECT_EQ(bytes[26], 0x3f);
    const auto back = decode_tensor_container(bytes);
    ASSERT_EQ(back.size(), 1u);
    EXPECT_EQ(back[0], rec);
    const auto arr = back[0].to_array<float>();
    EXPECT_TRUE(std::signbit(arr[5]));
    EXPECT_EQ(arr.shape(), a.shape());
}

TEST(TensorContainer, HundredRandomRecordsRewriteByteEqual) {
    Rng rng(1);
    std::vector<TensorRecord> records;
    for (int k = 0; k < 100; ++k) {
        Shape shape;
        const std::size_t rank = 1 + rng.below(3);
        for (std::size_t r = 0; r < rank; ++r) shape.push_back(1 + rng.below(5));
        const std::string name = "rec_" + std::to_string(k) + std::string(rng.below(3), 'x');
        switch (rng.below(3)) {
            case 0: records.push_back(TensorRecord::from(name, partcat::testing::random_array<float>(shape, rng, -1e6, 1e6))); break;
            case 1: records.push_back(TensorRecord::from(name, partcat::testing::random_array<double>(shape, rng, -1e-9, 1e-9))); break;
            default: {
                std::vector<std::uint32_t> dims(shape.begin(), shape.end());
                std::vector<std::uint8_t> bytes(shape_size(shape));
                for (auto& b : bytes) b = static_cast<std::uint8_t>(rng.below(256));
                records.push_back(TensorRecord::from_bytes(name, dims, bytes));
            }
        }
    }
    const auto dir = temp_dir("hundred");
    write_tensor_container(dir / "a.ptnsr", records);
    const auto back = read_tensor_container(dir / "a.ptnsr");
    EXPECT_EQ(back, records);
    write_tensor_container(dir / "b.ptnsr", back);
    EXPECT_EQ(file_bytes(dir / "a.ptnsr"), file_bytes(dir / "b.ptnsr"));
}

TEST(TensorContainer, CorruptInputsRejected) {
    const auto good = encode_tensor_container({TensorRecord::from("a", Array<float>(Shape{2}, 1.0f))});
    auto bad_magic = good;
    bad_magic[0] = 'X';
    EXPECT_THROW(decode_tensor_container(bad_magic), DataError);
    const std::vector<std::uint8_t> truncated(good.begin(), good.end() - 1);
    EXPECT_THROW(decode_tensor_container(truncated), DataError);
    auto trailing = good;
    trailing.push_back(0);
    EXPECT_THROW(decode_tensor_container(trailing), DataError);
    auto bad_dtype = good;
    bad_dtype[13] = 7;
    EXPECT_THROW(decode_tensor_container(bad_dtype), DataError);
    const auto rec = TensorRecord::from("a", Array<float>(Shape{1}, 1.0f));
    EXPECT_THROW(encode_tensor_container({rec, rec}), DataError);
    EXPECT_THROW(find_record({rec}, "b"), DataError);
    EXPECT_THROW(rec.bytes(), DataError);
}

// ---------------------------------------------------------------- embeddings

TEST(Synth, EmbeddingsAreUnitNorm) {
    const auto v = toy_vocab();
    SceneSpec spec = small_spec();
    spec.sigma = 0.3;
    const auto s = generate_sample(spec, v, 2, 17);
    expect_unit_rows(s.embeddings.visual);
    expect_unit_rows(s.embeddings.language_obj);
    expect_unit_rows(s.embeddings.language_part);
    expect_unit_rows(s.embeddings.language_obj_part);
    ASSERT_TRUE(s.embeddings.structural);
    expect_unit_rows(*s.embeddings.structural);
}

TEST(Synth, NoiselessPixelsOfOneClassShareEmbedding) {
    const auto v = toy_vocab();
    const EmbeddingFactors f(v, 16, 8, 5);
    auto labels = three_pixels(v);
    labels.obj_part_map.labels[2] = labels.obj_part_map.labels[0];
    labels.object_map.labels[2] = labels.object_map.labels[0];
    const auto e = synth_visual_embeddings(labels, v, f, 0.0, 0.6, 1);
    for (std::size_t k = 0; k < 16; ++k) EXPECT_EQ(e.at(0, k), e.at(2, k));
}

TEST(Synth, SharedPartBeatsUnrelatedInExpectation) {
    const auto v = toy_vocab();
    double shared = 0, unrelated = 0;
    for (std::uint64_t seed = 0; seed < 200; ++seed) {
        const EmbeddingFactors f(v, 16, 8, seed);
        const auto e = synth_visual_embeddings(three_pixels(v), v, f, 0.0, 0.6, seed);
        shared += cosine_rows(e, 0, 1);     // cat's head vs dog's head
        unrelated += cosine_rows(e, 0, 2);  // cat's head vs dog's tail
    }
    EXPECT_GT(shared / 200, unrelated / 200);
}

TEST(Synth, LanguageSharesObjectFactor) {
    const auto v = toy_vocab();
    const EmbeddingFactors f(v, 16, 8, 5);
    const auto lang = synth_language_embeddings(v, f);
    const auto head = v.obj_part_index("cat's head"), tail = v.obj_part_index("cat's tail");
    // both are normalize(W_cat + W_part): removing the part terms leaves the same direction
    const auto& wc = f.object("cat");
    const auto& wh = f.part("head");
    const auto& wt = f.part("tail");
    double nh = 0, nt = 0;
    for (std::size_t k = 0; k < 16; ++k) {
        nh += (wc[k] + wh[k]) * (wc[k] + wh[k]);
        nt += (wc[k] + wt[k]) * (wc[k] + wt[k]);
    }
    for (std::size_t k = 0; k < 16; ++k) {
        EXPECT_NEAR(lang.obj_part.at(head, k) * std::sqrt(nh) - wh[k], wc[k], 1e-5);
        EXPECT_NEAR(lang.obj_part.at(tail, k) * std::sqrt(nt) - wt[k], wc[k], 1e-5);
    }
}

TEST(Synth, TextOfTheTrueClassScoresHighest) {
    const auto v = toy_vocab();
    const EmbeddingFactors f(v, 32, 8, 11);
    const auto lang = synth_language_embeddings(v, f);
    for (std::size_t q = 0; q < v.num_obj_parts(); ++q) {
        SceneLabels l{LabelMap(1, 1), LabelMap(1, 1)};
        l.obj_part_map.labels[0] = static_cast<std::uint8_t>(q);
        l.object_map.labels[0] = static_cast<std::uint8_t>(v.object_of(q));
        const auto e = synth_visual_embeddings(l, v, f, 0.0, 0.6, 0);
        const double own = cosine_between(e, 0, lang.obj_part, q);
        for (std::size_t r = 0; r < v.num_obj_parts(); ++r) {
            if (r != q) EXPECT_GT(own, cosine_between(e, 0, lang.obj_part, r)) << v.obj_parts()[q];
        }
    }
}

TEST(Synth, StructuralFeaturesFollowGeneralizedPart) {
    const auto v = toy_vocab();
    const EmbeddingFactors f(v, 16, 8, 5);
    const auto s = synth_structural_features(three_pixels(v), v, f, 0.0, 0.0, 1);
    EXPECT_GT(cosine_rows(s, 0, 1), cosine_rows(s, 1, 2));
    EXPECT_NEAR(cosine_rows(s, 0, 1), 1.0, 1e-6);
    SceneLabels bg{LabelMap(2, 1), LabelMap(2, 1)};
    const auto b = synth_structural_features(bg, v, f, 0.0, 0.0, 1);
    for (std::size_t k = 0; k < 8; ++k) EXPECT_EQ(b.at(0, k), b.at(1, k));
    EXPECT_THROW(synth_structural_features(bg, v, EmbeddingFactors(v, 16, 0, 5), 0.0, 0.0, 1), DataError);
}

// ---------------------------------------------------------------- scenes

TEST(Scenes, ZeroJitterGivesCanonicalLayout) {
    const auto v = toy_vocab();
    SceneSpec spec = small_spec();
    spec.jitter = 0;
    spec.object_scale = 1.0;
    const auto cat = v.object_index("cat");
    const auto labels = rasterize_scene(spec, v, cat, 1, 99);
    const auto head = v.obj_part_index("cat's head"), tail = v.obj_part_index("cat's tail");
    // head template covers x < .3, y < .45 of the unit box; on an 8x8 grid that is x 0..1, y 0..3
    EXPECT_EQ(labels.obj_part_map.at(0, 0), head);
    EXPECT_EQ(labels.obj_part_map.at(3, 1), head);
    EXPECT_NE(labels.obj_part_map.at(4, 1), head);
    EXPECT_EQ(labels.obj_part_map.at(3, 7), tail);
    EXPECT_EQ(rasterize_scene(spec, v, cat, 1, 1).obj_part_map, labels.obj_part_map);
}

TEST(Scenes, SameSeedIsBitIdentical) {
    const auto v = toy_vocab();
    const auto a = generate_sample(small_spec(), v, 1, 42);
    const auto b = generate_sample(small_spec(), v, 1, 42);
    EXPECT_EQ(sample_to_records(a), sample_to_records(b));
    const auto c = generate_sample(small_spec(), v, 1, 43);
    EXPECT_NE(sample_to_records(a), sample_to_records(c));
}

TEST(Scenes, PartsLieInsideTheirObject) {
    const auto v = toy_vocab();
    SceneSpec spec = small_spec();
    spec.label_scale = 2;
    for (std::uint64_t seed = 0; seed < 40; ++seed) {
        const auto s = generate_sample(spec, v, seed % v.num_objects(), seed);
        ASSERT_EQ(s.label_scale(), 2u);
        for (std::size_t i = 0; i < s.obj_part_map.size(); ++i) {
            const auto q = s.obj_part_map.labels[i];
            if (q == kBackground) {
                EXPECT_EQ(s.object_map.labels[i], kBackground);
            } else {
                EXPECT_EQ(s.object_map.labels[i], v.object_of(q));
            }
        }
    }
}

TEST(Scenes, LabelNoiseStaysWithinObject) {
    const auto v = toy_vocab();
    SceneSpec spec = small_spec();
    spec.label_noise = 0.5;
    const auto s = generate_sample(spec, v, 0, 3);
    for (std::size_t i = 0; i < s.obj_part_map.size(); ++i) {
        if (s.obj_part_map.labels[i] != kBackground) EXPECT_EQ(v.object_of(s.obj_part_map.labels[i]), 0u);
    }
}

TEST(Scenes, UnknownTemplatePartThrows) {
    const auto v = toy_vocab();
    SceneSpec spec = small_spec();
    spec.templates["cat"] = {{"wing", Rect{0, 0, 1, 1}}};
    EXPECT_THROW(spec.validate(v), DataError);
    EXPECT_THROW(generate_sample(spec, v, v.object_index("cat"), 1), std::exception);
}

TEST(SceneSpec, TextRoundTrip) {
    SceneSpec spec = small_spec();
    spec.sigma = 0.25;
    spec.label_noise = 0.125;
    EXPECT_EQ(SceneSpec::parse(spec.to_string()).to_string(), spec.to_string());
    EXPECT_THROW(SceneSpec::parse("sigma=abc\n"), DataError);
    EXPECT_THROW(SceneSpec::parse("colour=3\n"), DataError);
}

// ---------------------------------------------------------------- splits / datasets

TEST(Splits, TrainingNeverSeesNovelClasses) {
    const auto v = toy_vocab();
    const auto splits = generate_splits(small_spec(), v, 12, 8, 5);
    EXPECT_EQ(splits.train_vocab.num_obj_parts(), 12u);
    for (const auto& s : splits.train) {
        EXPECT_EQ(s.embeddings.language_obj_part.dim(0), 12u);
        for (std::size_t i = 0; i < s.obj_part_map.size(); ++i) {
            const auto q = s.obj_part_map.labels[i];
            if (q != kBackground) {
                EXPECT_TRUE(v.is_seen(splits.train_kept[q]));
                EXPECT_EQ(s.pixel_weight[i], 1.0f);
            }
        }
    }
    bool any_masked = false;
    for (const auto& s : splits.train)
        for (float w : s.pixel_weight) any_masked = any_masked || w == 0.0f;
    EXPECT_TRUE(any_masked);
    for (const auto& s : splits.eval) EXPECT_EQ(s.embeddings.language_obj_part.dim(0), 16u);
}

TEST(Splits, HoldingOutOneClassRemovesItFromTraining) {
    auto list = load_class_list(std::filesystem::path(PARTCAT_DATA_DIR) / "toy_parts.txt");
    for (std::size_t q = 0; q < list.names.size(); ++q) list.seen[q] = list.names[q] != "cat's tail";
    const auto v = Vocabulary::build(list);
    const auto splits = generate_splits(small_spec(), v, 8, 4, 1);
    EXPECT_THROW(splits.train_vocab.obj_part_index("cat's tail"), VocabError);
    std::size_t tail_pixels = 0;
    const auto tail = v.obj_part_index("cat's tail");
    for (const auto& s : splits.eval)
        for (auto l : s.obj_part_map.labels) tail_pixels += l == tail;
    EXPECT_GT(tail_pixels, 0u);
}

TEST(Splits, EmptyOrFullySeenRejected) {
    const auto v = toy_vocab();
    EXPECT_THROW(generate_splits(small_spec(), v, 0, 4, 1), DataError);
    auto list = load_class_list(std::filesystem::path(PARTCAT_DATA_DIR) / "toy_parts.txt");
    list.seen.assign(list.names.size(), true);
    EXPECT_THROW(generate_splits(small_spec(), Vocabulary::build(list), 4, 4, 1), DataError);
}

TEST(Dataset, ManifestsRegenerateIdentically) {
    const auto v = toy_vocab();
    const auto a = temp_dir("ds_a"), b = temp_dir("ds_b");
    build_dataset(a, small_spec(), v, 6, 4, 9);
    build_dataset(b, small_spec(), v, 6, 4, 9);
    for (const auto* f : {"train.manifest", "eval.manifest", "classes.txt", "scene.cfg", "train.names"}) {
        EXPECT_EQ(file_bytes(a / f), file_bytes(b / f)) << f;
    }
    for (const auto& e : read_manifest(a / "train.manifest")) {
        EXPECT_EQ(file_bytes(a / e.container), file_bytes(b / e.container));
    }
}

TEST(Dataset, TrainingManifestScanFindsNoNovelLabels) {
    const auto v = toy_vocab();
    const auto dir = temp_dir("ds_scan");
    const auto paths = build_dataset(dir, small_spec(), v, 8, 4, 2);
    const auto train_names = read_label_names(dir / "train.names");
    for (const auto& e : read_manifest(paths.train_manifest())) {
        const auto map = read_pgm(dir / e.labelmap);
        for (auto l : map.labels) {
            if (l == kBackground) continue;
            ASSERT_LT(l, train_names.size());
            EXPECT_TRUE(v.is_seen(v.obj_part_index(train_names[l])));
        }
    }
}

TEST(Dataset, LoadedSamplesMatchGenerated) {
    const auto v = toy_vocab();
    const auto dir = temp_dir("ds_load");
    const auto paths = build_dataset(dir, small_spec(), v, 4, 3, 6);
    const auto splits = generate_splits(small_spec(), v, 4, 3, 6);
    const auto train = load_samples(paths.train_manifest());
    const auto eval = load_samples(paths.eval_manifest());
    ASSERT_EQ(train.size(), 4u);
    ASSERT_EQ(eval.size(), 3u);
    for (std::size_t k = 0; k < 4; ++k) EXPECT_EQ(sample_to_records(train[k]), sample_to_records(splits.train[k]));
    for (std::size_t k = 0; k < 3; ++k) EXPECT_EQ(sample_to_records(eval[k]), sample_to_records(splits.eval[k]));
    EXPECT_EQ(load_dataset_vocabulary(dir), v);
}

TEST(Dataset, TamperedLabelFileDetected) {
    const auto v = toy_vocab();
    const auto dir = temp_dir("ds_tamper");
    const auto paths = build_dataset(dir, small_spec(), v, 2, 2, 6);
    const auto entries = read_manifest(paths.eval_manifest());
    auto map = read_pgm(dir / entries[0].labelmap);
    map.labels[0] = map.labels[0] == 0 ? 1 : 0;
    write_pgm(dir / entries[0].labelmap, map);
    EXPECT_THROW(load_samples(paths.eval_manifest()), DataError);
}

TEST(Dataset, MalformedManifestLineThrows) {
    const auto dir = temp_dir("ds_manifest");
    {
        std::ofstream out(dir / "m.manifest");
        out << "only_one_field\n";
    }
    EXPECT_THROW(read_manifest(dir / "m.manifest"), DataError);
}

TEST(Sample, GroundTruthMasksUnsupervisedCells) {
    const auto v = toy_vocab();
    const auto splits = generate_splits(small_spec(), v, 8, 2, 4);
    for (const auto& s : splits.train) {
        const auto gt = make_ground_truth(s, splits.train_vocab);
        EXPECT_NO_THROW(gt.validate(splits.train_vocab));
        for (std::size_t i = 0; i < s.pixel_weight.size(); ++i) {
            EXPECT_EQ(gt.pixel_weight[i], s.pixel_weight[i]);
            if (s.pixel_weight[i] == 0.0f) EXPECT_EQ(gt.cost_weight[i], 0.0f);
        }
    }
}
