#include "partcat/eval.hpp"

#include <cstdio>
#include <exception>
#include <iomanip>
#include <sstream>

#include "partcat/tape.hpp"

namespace partcat {

Protocol parse_protocol(const std::string& text) {
    if (text == "pred-all" || text == "pred_all") return Protocol::pred_all;
    if (text == "oracle-obj" || text == "oracle_obj") return Protocol::oracle_obj;
    throw EvalError("unknown protocol '" + text + "' (expected pred-all or oracle-obj)");
}

const char* protocol_name(Protocol p) {
    return p == Protocol::pred_all ? "pred-all" : "oracle-obj";
}

template <typename T>
LabelMap predict_pred_all(const Array<T>& prob, std::size_t height, std::size_t width, double tau) {
    if (!(tau > 0.0 && tau < 1.0)) throw EvalError("tau must lie in (0, 1)");
    if (prob.rank() != 2 || prob.dim(0) != height * width) {
        throw EvalError("probability map " + shape_string(prob.shape()) + " does not cover the grid");
    }
    if (prob.dim(1) >= kBackground) throw EvalError("too many classes for 8-bit label maps");
    const std::size_t classes = prob.dim(1);
    LabelMap out(width, height);
    for (std::size_t i = 0; i < out.size(); ++i) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < classes; ++c) {
            if (prob.at(i, c) > prob.at(i, best)) best = c;
        }
        if (static_cast<double>(prob.at(i, best)) > tau) out.labels[i] = static_cast<std::uint8_t>(best);
    }
    return out;
}

template <typename T>
LabelMap predict_oracle_obj(const Array<T>& prob, const LabelMap& gt_object, const Vocabulary& vocab) {
    if (prob.rank() != 2 || prob.dim(0) != gt_object.size() || prob.dim(1) != vocab.num_obj_parts()) {
        throw EvalError("probability map " + shape_string(prob.shape()) + " does not match the object map");
    }
    LabelMap out(gt_object.width, gt_object.height);
    for (std::size_t i = 0; i < out.size(); ++i) {
        const std::uint8_t o = gt_object.labels[i];
        if (o == kBackground) continue;
        if (o >= vocab.num_objects()) throw EvalError("object label " + std::to_string(o) + " out of range");
        const auto& siblings = vocab.parts_of_object(o);
        if (siblings.empty()) throw EvalError("object '" + vocab.objects()[o] + "' has no parts");
        std::size_t best = siblings.front();
        for (std::size_t q : siblings) {
            if (prob.at(i, q) > prob.at(i, best)) best = q;
        }
        out.labels[i] = static_cast<std::uint8_t>(best);
    }
    return out;
}

ConfusionTable::ConfusionTable(std::size_t classes)
    : classes_(classes), counts_((classes + 1) * (classes + 1), 0) {}

std::size_t ConfusionTable::slot(std::uint8_t label) const {
    if (label == kBackground) return classes_;
    if (label >= classes_) {
        throw EvalError("label " + std::to_string(label) + " out of range for " + std::to_string(classes_) +
                        " classes");
    }
    return label;
}

void ConfusionTable::add(const LabelMap& pred, const LabelMap& gt) {
    if (pred.width != gt.width || pred.height != gt.height) {
        throw EvalError("prediction is " + std::to_string(pred.width) + "x" + std::to_string(pred.height) +
                        " but ground truth is " + std::to_string(gt.width) + "x" + std::to_string(gt.height));
    }
    for (std::size_t i = 0; i < pred.size(); ++i) {
        ++counts_[slot(pred.labels[i]) * (classes_ + 1) + slot(gt.labels[i])];
    }
}

void ConfusionTable::merge(const ConfusionTable& other) {
    if (other.classes_ != classes_) throw EvalError("cannot merge confusion tables of different sizes");
    for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
}

std::uint64_t ConfusionTable::count(std::size_t pred, std::size_t gt) const {
    return counts_.at(pred * (classes_ + 1) + gt);
}

std::uint64_t ConfusionTable::predicted(std::size_t c) const {
    std::uint64_t s = 0;
    for (std::size_t g = 0; g <= classes_; ++g) s += count(c, g);
    return s;
}

std::uint64_t ConfusionTable::actual(std::size_t c) const {
    std::uint64_t s = 0;
    for (std::size_t p = 0; p <= classes_; ++p) s += count(p, c);
    return s;
}

std::vector<std::optional<double>> iou_per_class(const ConfusionTable& table) {
    std::vector<std::optional<double>> out(table.classes());
    for (std::size_t c = 0; c < table.classes(); ++c) {
        const std::uint64_t tp = table.count(c, c);
        const std::uint64_t uni = table.predicted(c) + table.actual(c) - tp;
        if (uni > 0) out[c] = static_cast<double>(tp) / static_cast<double>(uni);
    }
    return out;
}

std::vector<std::optional<double>> recall_per_class(const ConfusionTable& table) {
    std::vector<std::optional<double>> out(table.classes());
    for (std::size_t c = 0; c < table.classes(); ++c) {
        const std::uint64_t gt = table.actual(c);
        if (gt > 0) out[c] = static_cast<double>(table.count(c, c)) / static_cast<double>(gt);
    }
    return out;
}

std::vector<std::optional<double>> iou_per_class(const LabelMap& pred, const LabelMap& gt, std::size_t classes) {
    ConfusionTable t(classes);
    t.add(pred, gt);
    return iou_per_class(t);
}

std::vector<std::optional<double>> recall_per_class(const LabelMap& pred, const LabelMap& gt,
                                                    std::size_t classes) {
    ConfusionTable t(classes);
    t.add(pred, gt);
    return recall_per_class(t);
}

double mean_iou(std::span<const std::optional<double>> per_class, std::span<const std::size_t> subset) {
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t c : subset) {
        if (c >= per_class.size()) throw EvalError("class index " + std::to_string(c) + " out of range");
        if (per_class[c]) {
            sum += *per_class[c];
            ++n;
        }
    }
    if (n == 0) throw EvalError("mean over an empty set of defined classes");
    return sum / static_cast<double>(n);
}

double mean_iou(std::span<const std::optional<double>> per_class) {
    std::vector<std::size_t> all(per_class.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    return mean_iou(per_class, all);
}

double harmonic_mean(double a, double b) {
    if (!(a > 0.0) || !(b > 0.0)) throw EvalError("harmonic mean needs positive inputs");
    return 2.0 * a * b / (a + b);
}

namespace {

// Mean over the defined members; 0 when none are defined.
double mean_or_zero(std::span<const std::optional<double>> values, const std::vector<std::size_t>& subset) {
    for (std::size_t c : subset) {
        if (values[c]) return mean_iou(values, subset);
    }
    return 0.0;
}

double harmonic_or_zero(double a, double b) {
    return (a > 0.0 && b > 0.0) ? harmonic_mean(a, b) : 0.0;
}

std::string percent(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", 100.0 * v);
    return buf;
}

std::string percent(const std::optional<double>& v) {
    return v ? percent(*v) : std::string("-");
}

}  // namespace

MetricsReport MetricsReport::from_confusion(const ConfusionTable& table, const Vocabulary& vocab,
                                            Protocol protocol) {
    if (table.classes() != vocab.num_obj_parts()) throw EvalError("confusion table does not match the vocabulary");
    MetricsReport r;
    r.protocol = protocol;
    r.class_names = vocab.obj_parts();
    r.seen = vocab.seen_mask();
    r.per_class_iou = iou_per_class(table);
    r.per_class_recall = recall_per_class(table);
    std::vector<std::size_t> seen, unseen, all;
    for (std::size_t q = 0; q < vocab.num_obj_parts(); ++q) {
        (vocab.is_seen(q) ? seen : unseen).push_back(q);
        all.push_back(q);
    }
    r.miou_all = mean_or_zero(r.per_class_iou, all);
    r.miou_seen = mean_or_zero(r.per_class_iou, seen);
    r.miou_unseen = mean_or_zero(r.per_class_iou, unseen);
    r.h_iou = harmonic_or_zero(r.miou_seen, r.miou_unseen);
    r.recall_seen = mean_or_zero(r.per_class_recall, seen);
    r.recall_unseen = mean_or_zero(r.per_class_recall, unseen);
    r.h_recall = harmonic_or_zero(r.recall_seen, r.recall_unseen);
    return r;
}

std::string MetricsReport::to_key_values() const {
    std::ostringstream out;
    out << "protocol=" << protocol_name(protocol) << '\n'
        << "miou=" << percent(miou_all) << '\n'
        << "miou_seen=" << percent(miou_seen) << '\n'
        << "miou_unseen=" << percent(miou_unseen) << '\n'
        << "h_iou=" << percent(h_iou) << '\n'
        << "recall_seen=" << percent(recall_seen) << '\n'
        << "recall_unseen=" << percent(recall_unseen) << '\n'
        << "h_recall=" << percent(h_recall) << '\n';
    for (std::size_t q = 0; q < class_names.size(); ++q) {
        out << "iou[" << class_names[q] << "]=" << percent(per_class_iou[q]) << '\n';
    }
    for (std::size_t q = 0; q < class_names.size(); ++q) {
        out << "recall[" << class_names[q] << "]=" << percent(per_class_recall[q]) << '\n';
    }
    return out.str();
}

std::string MetricsReport::to_table() const {
    std::size_t width = 5;
    for (const auto& n : class_names) width = std::max(width, n.size());
    std::ostringstream out;
    out << "protocol: " << protocol_name(protocol) << '\n';
    out << std::left << std::setw(static_cast<int>(width)) << "class" << "  split   " << std::right
        << std::setw(8) << "IoU" << std::setw(9) << "Recall" << '\n';
    for (std::size_t q = 0; q < class_names.size(); ++q) {
        out << std::left << std::setw(static_cast<int>(width)) << class_names[q] << "  "
            << (seen[q] ? "seen    " : "unseen  ") << std::right << std::setw(8) << percent(per_class_iou[q])
            << std::setw(9) << percent(per_class_recall[q]) << '\n';
    }
    out << '\n' << std::left << std::setw(10) << "" << std::right << std::setw(8) << "seen" << std::setw(9)
        << "unseen" << std::setw(9) << "harmonic" << '\n';
    out << std::left << std::setw(10) << "mIoU" << std::right << std::setw(8) << percent(miou_seen)
        << std::setw(9) << percent(miou_unseen) << std::setw(9) << percent(h_iou) << '\n';
    out << std::left << std::setw(10) << "recall" << std::right << std::setw(8) << percent(recall_seen)
        << std::setw(9) << percent(recall_unseen) << std::setw(9) << percent(h_recall) << '\n';
    return out.str();
}

Array<float> predict_probabilities(const ModelParams<float>& params, const ModelConfig& cfg,
                                   const Vocabulary& vocab, const EmbeddingBundle<float>& sample) {
    Tape<float> tape;
    const BoundParams bound = BoundParams::bind(tape, params, false);
    const ModelOutputs out = forward(tape, sample, bound, vocab, cfg);
    return tape.value(out.pred_obj_part);
}

EvalResult evaluate(const ModelParams<float>& params, const ModelConfig& cfg, const Vocabulary& vocab,
                    std::span<const Sample> samples, Protocol protocol, double tau) {
    if (samples.empty()) throw EvalError("evaluation dataset is empty");
    const std::size_t n = samples.size();
    std::vector<LabelMap> preds(n);
    std::vector<std::exception_ptr> errors(n);
#pragma omp parallel for schedule(dynamic)
    for (std::size_t s = 0; s < n; ++s) {
        try {
            const Sample& smp = samples[s];
            const Array<float> prob = predict_probabilities(params, cfg, vocab, smp.embeddings);
            preds[s] = protocol == Protocol::pred_all
                           ? predict_pred_all(prob, smp.obj_part_map.height, smp.obj_part_map.width, tau)
                           : predict_oracle_obj(prob, smp.object_map, vocab);
        } catch (...) {
            errors[s] = std::current_exception();
        }
    }
    EvalResult result;
    result.confusion = ConfusionTable(vocab.num_obj_parts());
    for (std::size_t s = 0; s < n; ++s) {
        try {
            if (errors[s]) std::rethrow_exception(errors[s]);
            result.confusion.add(preds[s], samples[s].obj_part_map);
        } catch (const std::exception& e) {
            throw EvalError("sample " + std::to_string(s) + " (" + samples[s].id + "): " + e.what());
        }
    }
    result.report = MetricsReport::from_confusion(result.confusion, vocab, protocol);
    result.predictions = std::move(preds);
    return result;
}

template LabelMap predict_pred_all<float>(const Array<float>&, std::size_t, std::size_t, double);
template LabelMap predict_pred_all<double>(const Array<double>&, std::size_t, std::size_t, double);
template LabelMap predict_oracle_obj<float>(const Array<float>&, const LabelMap&, const Vocabulary&);
template LabelMap predict_oracle_obj<double>(const Array<double>&, const LabelMap&, const Vocabulary&);

}  // namespace partcat
