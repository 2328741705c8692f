#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "partcat/array.hpp"
#include "partcat/labelmap.hpp"
#include "partcat/model.hpp"
#include "partcat/sample.hpp"
#include "partcat/vocab.hpp"

namespace partcat {

class EvalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum class Protocol { pred_all, oracle_obj };

/// "pred-all" or "oracle-obj".
Protocol parse_protocol(const std::string& text);
const char* protocol_name(Protocol p);

/// Per pixel: the arg-max class when its probability exceeds tau, else background.
/// Ties go to the lowest index. `prob` is [HW x Q].
template <typename T>
LabelMap predict_pred_all(const Array<T>& prob, std::size_t height, std::size_t width, double tau);

/// Inside GT object o: arg-max over o's parts (no threshold). Outside objects: background.
template <typename T>
LabelMap predict_oracle_obj(const Array<T>& prob, const LabelMap& gt_object, const Vocabulary& vocab);

/// Counts of (prediction, ground truth) pairs; index `classes` is background.
class ConfusionTable {
public:
    explicit ConfusionTable(std::size_t classes);

    void add(const LabelMap& pred, const LabelMap& gt);
    void merge(const ConfusionTable& other);

    std::size_t classes() const { return classes_; }
    std::uint64_t count(std::size_t pred, std::size_t gt) const;
    std::uint64_t predicted(std::size_t c) const;
    std::uint64_t actual(std::size_t c) const;

    friend bool operator==(const ConfusionTable&, const ConfusionTable&) = default;

private:
    std::size_t slot(std::uint8_t label) const;
    std::size_t classes_;
    std::vector<std::uint64_t> counts_;
};

/// nullopt where the class is absent from both prediction and ground truth.
std::vector<std::optional<double>> iou_per_class(const ConfusionTable& table);
/// nullopt where the class is absent from the ground truth.
std::vector<std::optional<double>> recall_per_class(const ConfusionTable& table);

std::vector<std::optional<double>> iou_per_class(const LabelMap& pred, const LabelMap& gt, std::size_t classes);
std::vector<std::optional<double>> recall_per_class(const LabelMap& pred, const LabelMap& gt, std::size_t classes);

/// Mean over the defined entries among `subset`; throws if none are defined.
double mean_iou(std::span<const std::optional<double>> per_class, std::span<const std::size_t> subset);
double mean_iou(std::span<const std::optional<double>> per_class);

/// 2ab/(a+b) for a, b > 0.
double harmonic_mean(double a, double b);

struct MetricsReport {
    Protocol protocol = Protocol::pred_all;
    std::vector<std::string> class_names;
    std::vector<bool> seen;
    std::vector<std::optional<double>> per_class_iou;
    std::vector<std::optional<double>> per_class_recall;
    double miou_all = 0.0;
    double miou_seen = 0.0;
    double miou_unseen = 0.0;
    double h_iou = 0.0;  // 0 when either side is 0
    double recall_seen = 0.0;
    double recall_unseen = 0.0;
    double h_recall = 0.0;

    static MetricsReport from_confusion(const ConfusionTable& table, const Vocabulary& vocab, Protocol protocol);

    /// key=value lines, values in percent with fixed precision.
    std::string to_key_values() const;
    /// Aligned per-class table followed by the summary rows.
    std::string to_table() const;
};

struct EvalResult {
    MetricsReport report;
    ConfusionTable confusion{0};
    std::vector<LabelMap> predictions;
};

/// Forward + protocol decoding per sample, one global confusion table.
/// Samples must carry obj-part labels in `vocab`'s index space.
EvalResult evaluate(const ModelParams<float>& params, const ModelConfig& cfg, const Vocabulary& vocab,
                    std::span<const Sample> samples, Protocol protocol, double tau = 0.5);

/// Runs the model forward without recording gradients; returns [N x Q] obj-part probabilities.
Array<float> predict_probabilities(const ModelParams<float>& params, const ModelConfig& cfg,
                                   const Vocabulary& vocab, const EmbeddingBundle<float>& sample);

}  // namespace partcat
