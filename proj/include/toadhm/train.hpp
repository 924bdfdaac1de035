#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "toadhm/augment.hpp"
#include "toadhm/conv.hpp"
#include "toadhm/data.hpp"
#include "toadhm/losses.hpp"
#include "toadhm/model.hpp"

namespace toadhm {

struct TrainConfig {
    double initial_lr = 1e-4;
    int batch_size = 4;
    int plateau_patience = 10;  ///< epochs without improvement before halving the rate
    int abort_patience = 32;    ///< epochs without improvement before aborting a run
    int n_restarts = 4;
    double head_weight_decay = 1e-5;
    double split_ratio = 0.8;
    std::uint64_t split_seed = 0;
    std::uint64_t head_seed = 0;
    LossConfig loss;
    int epochs_cap = 1000;       ///< total epochs over all restarts
    double time_budget_s = 0.0;  ///< 0 disables the wall-clock limit

    void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

// ---------------------------------------------------------------------------
// Dataset split

struct DatasetSplit {
    std::vector<std::size_t> train;  ///< indices into the manifest
    std::vector<std::size_t> val;
};

/// Seeded random partition with |train| = floor(ratio * N). Both parts must be non-empty.
DatasetSplit split_dataset(const DatasetManifest& manifest, double ratio, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Learning-rate schedule

struct SchedulerState {
    double current_lr = 1e-4;
    double best_val_loss = std::numeric_limits<double>::infinity();
    int epochs_since_best = 0;       ///< drives the abort rule
    int epochs_since_lr_change = 0;  ///< drives the halving rule; reset on halving
    int restart_index = 0;
};

enum class SchedulerAction { continue_training, halve_lr, abort };

std::string to_string(SchedulerAction action);

struct SchedulerStep {
    SchedulerState state;
    SchedulerAction action = SchedulerAction::continue_training;
    bool improved = false;  ///< new best validation loss: checkpoint now
    std::string diagnostic;
};

/// Starting state of run `restart_index`: rate initial_lr / 2^k, best loss carried over.
SchedulerState scheduler_start(const TrainConfig& config, int restart_index,
                               double best_val_loss = std::numeric_limits<double>::infinity());

SchedulerStep scheduler_step(const SchedulerState& state, double val_loss, const TrainConfig& config);

/// Starting learning rate of every run: initial_lr / 2^k for k = 0..n_restarts.
std::vector<double> restart_learning_rates(const TrainConfig& config);

// ---------------------------------------------------------------------------
// Optimizer

/// Adam with Keras defaults (beta1 0.9, beta2 0.999, epsilon 1e-7).
class Adam {
public:
    explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double epsilon = 1e-7)
        : lr_(lr), beta1_(beta1), beta2_(beta2), epsilon_(epsilon) {}

    void set_learning_rate(double lr) { lr_ = lr; }
    double learning_rate() const { return lr_; }
    long steps() const { return t_; }

    void step(const std::vector<Parameter*>& params);

private:
    double lr_, beta1_, beta2_, epsilon_;
    long t_ = 0;
    std::vector<std::vector<float>> m_, v_;
};

// ---------------------------------------------------------------------------
// Training

struct EpochRecord {
    int epoch = 0;  ///< 1-based, counted across restarts
    double train_loss = 0.0;
    double val_loss = 0.0;
    double lr = 0.0;
    int restart = 0;
    std::string action;
    bool improved = false;
    double seconds = 0.0;
};

struct TrainHistory {
    double initial_val_loss = std::numeric_limits<double>::quiet_NaN();
    std::vector<EpochRecord> epochs;
    double best_val_loss = std::numeric_limits<double>::infinity();
    int best_epoch = 0;
    std::filesystem::path best_checkpoint;
    std::vector<double> restart_start_lrs;
    std::string stop_reason;

    /// epoch,train_loss,val_loss,lr,restart
    void write_csv(const std::filesystem::path& path) const;
    nlohmann::json summary() const;
};

struct TrainOptions {
    std::filesystem::path run_dir;  ///< checkpoints, history and traces; empty keeps everything in memory
    bool trace = false;             ///< write per-sample augmentation logs (trace.jsonl)
    int threads = 0;                ///< image-level workers; 0 uses every hardware thread
    std::function<void(const std::string&)> log;
};

struct TrainResult {
    HeatmapModel model;  ///< weights with the smallest validation loss
    TrainHistory history;
};

/// Augmentation seed of one record in one epoch; `stream` separates training from validation.
std::uint64_t sample_seed(std::uint64_t split_seed, int epoch, const std::string& record_id, int stream);

/// Order of the training indices in a given epoch.
std::vector<std::size_t> epoch_order(const std::vector<std::size_t>& train, std::uint64_t split_seed, int epoch);

/// Mean loss of `model` over augmented samples of `indices` for the given epoch.
double evaluate_loss(const HeatmapModel& model, const DatasetManifest& manifest, const std::vector<std::size_t>& indices,
                     const TrainConfig& config, const AugmentConfig& augment, int epoch);

TrainResult run_training(const DatasetManifest& manifest, const TrainConfig& config, const AugmentConfig& augment,
                         const BackboneConfig& backbone, const TrainOptions& options = {});

}  // namespace toadhm
