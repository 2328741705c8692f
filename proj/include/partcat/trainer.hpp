#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "partcat/eval.hpp"
#include "partcat/losses.hpp"
#include "partcat/model.hpp"
#include "partcat/sample.hpp"

namespace partcat {

class TrainError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct TrainConfig {
    ModelConfig model;
    double learning_rate = 1e-4;
    std::size_t iterations = 2000;
    std::size_t batch_size = 4;
    LossWeights weights;
    CompMode comp_mode = CompMode::softmax;
    Divergence divergence = Divergence::symmetric_kl;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double weight_decay = 1e-4;
    std::uint64_t seed = 0;  // shuffling; the model's init seed is model.seed
    std::size_t checkpoint_interval = 0;  // 0: no periodic checkpoints
    std::filesystem::path checkpoint_dir;
    std::size_t eval_interval = 0;  // 0: no evaluation snapshots

    void validate() const;

    /// key=value text holding training keys and any model keys.
    static TrainConfig parse(const std::string& text);
    static TrainConfig load(const std::filesystem::path& path);
    std::string to_string() const;
};

/// Decoupled-weight-decay Adam. Moments and step counts are kept per parameter;
/// a parameter whose whole gradient is exactly zero is left untouched that step.
class AdamW {
public:
    AdamW(const ModelParams<float>& params, double lr, double beta1, double beta2, double eps, double decay);

    void step(ModelParams<float>& params, const std::vector<Array<float>>& grads);

    std::vector<Array<float>>& first_moments() { return m_; }
    std::vector<Array<float>>& second_moments() { return v_; }
    std::vector<std::uint64_t>& steps() { return t_; }
    const std::vector<Array<float>>& first_moments() const { return m_; }
    const std::vector<Array<float>>& second_moments() const { return v_; }
    const std::vector<std::uint64_t>& steps() const { return t_; }

private:
    double lr_, beta1_, beta2_, eps_, decay_;
    std::vector<Array<float>> m_, v_;
    std::vector<std::uint64_t> t_;
};

struct LogEntry {
    std::size_t iteration = 0;
    double total = 0, obj_part = 0, disentangle = 0, comp = 0;
    friend bool operator==(const LogEntry&, const LogEntry&) = default;
};

struct EvalSnapshot {
    std::size_t iteration = 0;
    double miou_seen = 0, miou_unseen = 0, h_iou = 0;
    friend bool operator==(const EvalSnapshot&, const EvalSnapshot&) = default;
};

struct TrainLog {
    std::vector<LogEntry> entries;
    std::vector<EvalSnapshot> snapshots;

    /// Tab-separated, header line first; values printed with round-trip precision.
    std::string to_tsv() const;
    friend bool operator==(const TrainLog&, const TrainLog&) = default;
};

struct TrainState {
    ModelParams<float> params;
    AdamW optimizer;
    std::size_t iteration = 0;  // completed iterations
};

/// Loss terms and parameter gradients for one sample; gradients follow params' entry order.
struct SampleGradient {
    LogEntry losses;
    std::vector<Array<float>> grads;
};
SampleGradient sample_gradient(const ModelParams<float>& params, const TrainConfig& cfg, const Vocabulary& vocab,
                               const Sample& sample);

/// Index of the `position`-th sample drawn overall: epoch e uses a fresh seeded permutation.
std::size_t batch_sample_index(std::uint64_t seed, std::size_t dataset_size, std::size_t position);

struct TrainResult {
    ModelParams<float> params;
    TrainLog log;
    std::optional<AdamW> optimizer;  // final state, for writing a resumable checkpoint
};

/// Optional evaluation hook for snapshots.
struct TrainHooks {
    std::span<const Sample> eval_samples;
    const Vocabulary* eval_vocab = nullptr;
    std::function<void(const LogEntry&)> on_iteration;
};

/// Trains from scratch, or continues `resume` (whose iteration count marks the restart point).
TrainResult train(const TrainConfig& cfg, std::span<const Sample> data, const Vocabulary& vocab,
                  std::optional<TrainState> resume = std::nullopt, const TrainHooks& hooks = {});

void save_checkpoint(const std::filesystem::path& path, const TrainState& state, const TrainConfig& cfg);
/// Restores parameters, optimizer state and iteration; `cfg` receives the stored config.
TrainState load_checkpoint(const std::filesystem::path& path, TrainConfig* cfg = nullptr);

// ---- ablations --------------------------------------------------------------

struct AblationCell {
    std::string label;
    ModelMode mode = ModelMode::disentangled;
    GuidanceLevels guidance;
    CompMode comp = CompMode::softmax;
};

/// Cost Agg / +DINO / +DINO+comp-L1 / +DINO+comp-SM.
std::vector<AblationCell> comp_loss_axis();
/// Guidance at none / Obj / Part / Obj+Part, all with comp-SM.
std::vector<AblationCell> guidance_axis();

struct AblationRow {
    std::string label;
    std::uint64_t seed = 0;
    MetricsReport pred_all;
    MetricsReport oracle_obj;
    std::vector<LabelMap> oracle_predictions;  // per eval sample, for mask checks
};

struct AblationData {
    std::span<const Sample> train;
    const Vocabulary* train_vocab = nullptr;
    std::span<const Sample> eval;
    const Vocabulary* eval_vocab = nullptr;
};

/// Trains and evaluates every cell for every seed on the same data.
std::vector<AblationRow> run_ablation(const TrainConfig& base, const std::vector<AblationCell>& cells,
                                      const std::vector<std::uint64_t>& seeds, const AblationData& data,
                                      double tau = 0.5);

/// Rows in cell order with seen/unseen/harmonic mIoU for both protocols.
std::string ablation_table(const std::vector<AblationRow>& rows);

}  // namespace partcat
