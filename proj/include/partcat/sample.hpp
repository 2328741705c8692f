#pragma once

#include <string>
#include <vector>

#include "partcat/labelmap.hpp"
#include "partcat/losses.hpp"
#include "partcat/model.hpp"
#include "partcat/vocab.hpp"

namespace partcat {

/// One scene: encoder outputs plus ground truth. Label maps are at the prediction
/// resolution (embedding grid times the label scale); obj-part labels index the
/// vocabulary the sample was written for.
struct Sample {
    std::string id;
    EmbeddingBundle<float> embeddings;
    LabelMap object_map;
    LabelMap obj_part_map;
    std::vector<float> pixel_weight;  // 0 where the pixel is not supervised

    std::size_t label_scale() const;
};

/// Binary masks for every vocabulary level; part masks follow from the obj-part map.
/// Cost-grid weights are 0 for any grid cell containing an unsupervised label pixel.
GroundTruth make_ground_truth(const Sample& sample, const Vocabulary& vocab);

}  // namespace partcat
