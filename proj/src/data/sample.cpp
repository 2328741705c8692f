#include "partcat/sample.hpp"

namespace partcat {

std::size_t Sample::label_scale() const {
    if (embeddings.width == 0 || obj_part_map.width % embeddings.width != 0 ||
        obj_part_map.height != embeddings.height * (obj_part_map.width / embeddings.width)) {
        throw std::invalid_argument("sample '" + id + "': label map is not an integer multiple of the grid");
    }
    return obj_part_map.width / embeddings.width;
}

GroundTruth make_ground_truth(const Sample& sample, const Vocabulary& vocab) {
    const std::size_t n = sample.obj_part_map.size();
    if (sample.object_map.size() != n || sample.pixel_weight.size() != n) {
        throw std::invalid_argument("sample '" + sample.id + "': label maps and weights differ in size");
    }
    sample.obj_part_map.validate(vocab.num_obj_parts());
    sample.object_map.validate(vocab.num_objects());
    GroundTruth gt{Array<float>(Shape{n, vocab.num_objects()}), Array<float>(Shape{n, vocab.num_parts()}),
                   Array<float>(Shape{n, vocab.num_obj_parts()}), Array<float>(Shape{n}),
                   Array<float>(Shape{sample.embeddings.height * sample.embeddings.width}, 1.0f)};
    for (std::size_t i = 0; i < n; ++i) {
        gt.pixel_weight[i] = sample.pixel_weight[i];
        const std::uint8_t o = sample.object_map.labels[i];
        if (o != kBackground) gt.obj.at(i, o) = 1.0f;
        const std::uint8_t q = sample.obj_part_map.labels[i];
        if (q != kBackground) {
            gt.obj_part.at(i, q) = 1.0f;
            gt.part.at(i, vocab.part_of(q)) = 1.0f;
        }
    }
    const std::size_t s = sample.label_scale();
    const std::size_t w = sample.embeddings.width, lw = sample.obj_part_map.width;
    for (std::size_t i = 0; i < n; ++i) {
        if (sample.pixel_weight[i] == 0.0f) {
            const std::size_t y = (i / lw) / s, x = (i % lw) / s;
            gt.cost_weight[y * w + x] = 0.0f;
        }
    }
    return gt;
}

}  // namespace partcat
