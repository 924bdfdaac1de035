#include "toadhm/train.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <optional>
#include <sstream>

#include "toadhm/checkpoint.hpp"
#include "toadhm/parallel.hpp"
#include "toadhm/rng.hpp"

namespace fs = std::filesystem;

namespace toadhm {

// ---------------------------------------------------------------------------
// Config

void TrainConfig::validate() const {
    if (!(initial_lr > 0.0)) throw std::invalid_argument("train initial_lr must be > 0");
    if (batch_size < 1) throw std::invalid_argument("train batch_size must be >= 1");
    if (plateau_patience < 1) throw std::invalid_argument("train plateau_patience must be >= 1");
    if (abort_patience <= plateau_patience)
        throw std::invalid_argument("train plateau_patience must be smaller than abort_patience");
    if (n_restarts < 0) throw std::invalid_argument("train n_restarts must be >= 0");
    if (!(head_weight_decay >= 0.0)) throw std::invalid_argument("train head_weight_decay must be >= 0");
    if (!(split_ratio > 0.0 && split_ratio < 1.0)) throw std::invalid_argument("train split_ratio must lie in (0, 1)");
    if (epochs_cap < 1) throw std::invalid_argument("train epochs_cap must be >= 1");
    if (!(time_budget_s >= 0.0)) throw std::invalid_argument("train time_budget_s must be >= 0");
    loss.validate();
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = nlohmann::json{{"initial_lr", c.initial_lr},
                       {"batch_size", c.batch_size},
                       {"plateau_patience", c.plateau_patience},
                       {"abort_patience", c.abort_patience},
                       {"n_restarts", c.n_restarts},
                       {"head_weight_decay", c.head_weight_decay},
                       {"split_ratio", c.split_ratio},
                       {"split_seed", c.split_seed},
                       {"head_seed", c.head_seed},
                       {"loss", c.loss},
                       {"epochs_cap", c.epochs_cap},
                       {"time_budget_s", c.time_budget_s}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
    static const std::vector<std::string> known{"initial_lr",  "batch_size",        "plateau_patience", "abort_patience",
                                                "n_restarts",  "head_weight_decay", "split_ratio",      "split_seed",
                                                "head_seed",   "loss",              "epochs_cap",       "time_budget_s"};
    for (const auto& [key, _] : j.items())
        if (std::find(known.begin(), known.end(), key) == known.end())
            throw std::invalid_argument("unknown train key: " + key);
    if (j.contains("initial_lr")) c.initial_lr = j.at("initial_lr").get<double>();
    if (j.contains("batch_size")) c.batch_size = j.at("batch_size").get<int>();
    if (j.contains("plateau_patience")) c.plateau_patience = j.at("plateau_patience").get<int>();
    if (j.contains("abort_patience")) c.abort_patience = j.at("abort_patience").get<int>();
    if (j.contains("n_restarts")) c.n_restarts = j.at("n_restarts").get<int>();
    if (j.contains("head_weight_decay")) c.head_weight_decay = j.at("head_weight_decay").get<double>();
    if (j.contains("split_ratio")) c.split_ratio = j.at("split_ratio").get<double>();
    if (j.contains("split_seed")) c.split_seed = j.at("split_seed").get<std::uint64_t>();
    if (j.contains("head_seed")) c.head_seed = j.at("head_seed").get<std::uint64_t>();
    if (j.contains("loss")) c.loss = j.at("loss").get<LossConfig>();
    if (j.contains("epochs_cap")) c.epochs_cap = j.at("epochs_cap").get<int>();
    if (j.contains("time_budget_s")) c.time_budget_s = j.at("time_budget_s").get<double>();
    c.validate();
}

// ---------------------------------------------------------------------------
// Split

DatasetSplit split_dataset(const DatasetManifest& manifest, double ratio, std::uint64_t seed) {
    if (manifest.empty()) throw std::invalid_argument("cannot split an empty manifest");
    if (!(ratio > 0.0 && ratio <= 1.0)) throw std::invalid_argument("split ratio must lie in (0, 1]");
    const std::size_t n = manifest.size();
    const auto n_train = static_cast<std::size_t>(std::floor(ratio * static_cast<double>(n) + 1e-9));
    if (n_train == 0) throw std::invalid_argument("split leaves the training subset empty");
    if (n_train >= n) throw std::invalid_argument("split leaves the validation subset empty");

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(hash_values(seed, 0x73706c6974ULL));
    rng.shuffle(order.begin(), order.end());

    DatasetSplit split;
    split.train.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
    split.val.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train), order.end());
    std::sort(split.train.begin(), split.train.end());
    std::sort(split.val.begin(), split.val.end());
    return split;
}

// ---------------------------------------------------------------------------
// Scheduler

std::string to_string(SchedulerAction action) {
    switch (action) {
        case SchedulerAction::continue_training: return "continue";
        case SchedulerAction::halve_lr: return "halve_lr";
        case SchedulerAction::abort: return "abort";
    }
    return "unknown";
}

SchedulerState scheduler_start(const TrainConfig& config, int restart_index, double best_val_loss) {
    SchedulerState s;
    s.current_lr = std::ldexp(config.initial_lr, -restart_index);
    s.best_val_loss = best_val_loss;
    s.restart_index = restart_index;
    return s;
}

SchedulerStep scheduler_step(const SchedulerState& state, double val_loss, const TrainConfig& config) {
    SchedulerStep step;
    step.state = state;
    if (!std::isfinite(val_loss)) {
        step.action = SchedulerAction::abort;
        step.diagnostic = "non-finite validation loss";
        return step;
    }
    SchedulerState& s = step.state;
    if (val_loss < s.best_val_loss) {
        s.best_val_loss = val_loss;
        s.epochs_since_best = 0;
        s.epochs_since_lr_change = 0;
        step.improved = true;
        return step;
    }
    ++s.epochs_since_best;
    ++s.epochs_since_lr_change;
    if (s.epochs_since_best >= config.abort_patience) {
        step.action = SchedulerAction::abort;
        step.diagnostic = "no improvement for " + std::to_string(s.epochs_since_best) + " epochs";
    } else if (s.epochs_since_lr_change >= config.plateau_patience) {
        step.action = SchedulerAction::halve_lr;
        s.current_lr *= 0.5;
        s.epochs_since_lr_change = 0;
    }
    return step;
}

std::vector<double> restart_learning_rates(const TrainConfig& config) {
    std::vector<double> out;
    for (int k = 0; k <= config.n_restarts; ++k) out.push_back(std::ldexp(config.initial_lr, -k));
    return out;
}

// ---------------------------------------------------------------------------
// Adam

void Adam::step(const std::vector<Parameter*>& params) {
    const FlushDenormals ftz;
    if (m_.size() != params.size()) {
        m_.assign(params.size(), {});
        v_.assign(params.size(), {});
        for (std::size_t i = 0; i < params.size(); ++i) {
            m_[i].assign(params[i]->value.size(), 0.0f);
            v_[i].assign(params[i]->value.size(), 0.0f);
        }
    }
    ++t_;
    const double lr_t = lr_ * std::sqrt(1.0 - std::pow(beta2_, static_cast<double>(t_))) /
                        (1.0 - std::pow(beta1_, static_cast<double>(t_)));
    const auto b1 = static_cast<float>(beta1_), b2 = static_cast<float>(beta2_);
    const auto lr = static_cast<float>(lr_t), eps = static_cast<float>(epsilon_);
    for (std::size_t i = 0; i < params.size(); ++i) {
        Parameter& p = *params[i];
        float* m = m_[i].data();
        float* v = v_[i].data();
        for (std::size_t k = 0; k < p.value.size(); ++k) {
            const float g = p.grad[k];
            m[k] = b1 * m[k] + (1.0f - b1) * g;
            v[k] = b2 * v[k] + (1.0f - b2) * g * g;
            p.value[k] -= lr * m[k] / (std::sqrt(v[k]) + eps);
        }
    }
}

// ---------------------------------------------------------------------------
// History

void TrainHistory::write_csv(const fs::path& path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << "epoch,train_loss,val_loss,lr,restart\n";
    out << std::setprecision(9);
    for (const auto& e : epochs)
        out << e.epoch << ',' << e.train_loss << ',' << e.val_loss << ',' << e.lr << ',' << e.restart << '\n';
    if (!out) throw std::runtime_error("cannot write " + path.string());
}

nlohmann::json TrainHistory::summary() const {
    return nlohmann::json{{"initial_val_loss", initial_val_loss},
                          {"best_val_loss", best_val_loss},
                          {"best_epoch", best_epoch},
                          {"epochs", epochs.size()},
                          {"best_checkpoint", best_checkpoint.string()},
                          {"restart_start_lrs", restart_start_lrs},
                          {"stop_reason", stop_reason}};
}

// ---------------------------------------------------------------------------
// Training loop

std::uint64_t sample_seed(std::uint64_t split_seed, int epoch, const std::string& record_id, int stream) {
    return hash_values(split_seed, static_cast<std::uint64_t>(epoch), hash_string(record_id),
                       static_cast<std::uint64_t>(stream));
}

std::vector<std::size_t> epoch_order(const std::vector<std::size_t>& train, std::uint64_t split_seed, int epoch) {
    std::vector<std::size_t> order = train;
    Rng rng(hash_values(split_seed, static_cast<std::uint64_t>(epoch), 0x6f72646572ULL));
    rng.shuffle(order.begin(), order.end());
    return order;
}

namespace {

constexpr int kTrainStream = 0;
constexpr int kValStream = 1;

class TraceWriter {
public:
    explicit TraceWriter(const fs::path& path) {
        if (!path.empty()) out_.open(path, std::ios::trunc);
    }
    bool enabled() const { return out_.is_open(); }

    void write(int epoch, const std::string& split, const std::string& id, std::uint64_t seed,
               const std::vector<AugmentStep>& trace) {
        if (!out_.is_open()) return;
        nlohmann::json steps = nlohmann::json::array();
        for (const auto& s : trace) steps.push_back({{"step", s.name}, {"params", s.params}});
        out_ << nlohmann::json{{"epoch", epoch}, {"split", split}, {"id", id}, {"seed", seed}, {"steps", steps}}.dump()
             << '\n';
    }

private:
    std::ofstream out_;
};

struct SampleOutcome {
    std::string id;
    std::uint64_t seed = 0;
    double loss = 0.0;
    std::vector<AugmentStep> trace;
};

double mean_loss(const HeatmapModel& model, const DatasetManifest& manifest, const std::vector<std::size_t>& indices,
                 const TrainConfig& config, const AugmentConfig& augment, int epoch, TraceWriter* trace,
                 unsigned threads) {
    if (indices.empty()) return std::numeric_limits<double>::quiet_NaN();
    std::vector<SampleOutcome> out(indices.size());
    parallel_for(indices.size(), threads, [&](std::size_t k) {
        const FrameRecord record = manifest.load(indices[k]);
        SampleOutcome& o = out[k];
        o.id = record.id();
        o.seed = sample_seed(config.split_seed, epoch, o.id, kValStream);
        TrainingSample sample = augment_pair(record, o.seed, augment);
        const Heatmap p = model.heatmap_forward(sample.x);
        o.loss = compute_loss(config.loss, sample.y, p).loss;
        if (trace && trace->enabled()) o.trace = std::move(sample.trace);
    });
    double total = 0.0;
    for (const SampleOutcome& o : out) {
        if (trace) trace->write(epoch, "val", o.id, o.seed, o.trace);
        total += o.loss;
    }
    return total / static_cast<double>(indices.size());
}

// Per-slot model copies so that the images of one batch run concurrently.
// Every slot owns its gradients; they are summed in slot order, which keeps
// results independent of the worker count.
class BatchWorkers {
public:
    BatchWorkers(const HeatmapModel& model, int slots) : replicas_(static_cast<std::size_t>(slots), model),
                                                         caches_(static_cast<std::size_t>(slots)) {}

    HeatmapModel& replica(std::size_t slot) { return replicas_[slot]; }
    ForwardCache& cache(std::size_t slot) { return caches_[slot]; }

    void sync_from(HeatmapModel& model, std::size_t used) {
        const auto source = model.parameters();
        for (std::size_t s = 0; s < used; ++s) {
            const auto target = replicas_[s].parameters();
            for (std::size_t k = 0; k < source.size(); ++k) target[k]->value = source[k]->value;
            replicas_[s].zero_grad();
        }
    }

    void accumulate_into(HeatmapModel& model, std::size_t used) {
        const auto target = model.parameters();
        for (std::size_t s = 0; s < used; ++s) {
            const auto source = replicas_[s].parameters();
            for (std::size_t k = 0; k < target.size(); ++k) {
                auto& g = target[k]->grad;
                const auto& h = source[k]->grad;
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += h[i];
            }
        }
    }

private:
    std::vector<HeatmapModel> replicas_;
    std::vector<ForwardCache> caches_;
};

void check_both_classes(const DatasetManifest& manifest) {
    const auto counts = manifest.counts();
    if (counts.at(Label::toad) == 0 || counts.at(Label::not_toad) == 0)
        throw std::invalid_argument("training needs both toad and not_toad records (got " +
                                    std::to_string(counts.at(Label::toad)) + " toad, " +
                                    std::to_string(counts.at(Label::not_toad)) + " not_toad)");
}

}  // namespace

double evaluate_loss(const HeatmapModel& model, const DatasetManifest& manifest, const std::vector<std::size_t>& indices,
                     const TrainConfig& config, const AugmentConfig& augment, int epoch) {
    return mean_loss(model, manifest, indices, config, augment, epoch, nullptr, resolve_threads(0));
}

TrainResult run_training(const DatasetManifest& manifest, const TrainConfig& config, const AugmentConfig& augment,
                         const BackboneConfig& backbone, const TrainOptions& options) {
    using clock = std::chrono::steady_clock;
    config.validate();
    augment.validate();
    check_both_classes(manifest);
    const DatasetSplit split = split_dataset(manifest, config.split_ratio, config.split_seed);
    auto log = [&](const std::string& msg) {
        if (options.log) options.log(msg);
    };

    if (!options.run_dir.empty()) fs::create_directories(options.run_dir);
    TraceWriter trace(options.trace && !options.run_dir.empty() ? options.run_dir / "trace.jsonl" : fs::path{});

    auto backbone_net = build_reference_backbone(backbone);
    const int features = backbone_net->feature_channels();
    HeatmapModel model(std::move(backbone_net),
                       init_head(features, config.head_seed, static_cast<float>(config.head_weight_decay)));
    HeatmapModel best = model;

    TrainHistory history;
    history.restart_start_lrs = restart_learning_rates(config);
    const unsigned threads = resolve_threads(options.threads);
    history.initial_val_loss = mean_loss(model, manifest, split.val, config, augment, 0, nullptr, threads);
    {
        std::ostringstream msg;
        msg << "train " << split.train.size() << " / val " << split.val.size() << " records, "
            << model.parameter_count() << " parameters, initial val loss " << history.initial_val_loss;
        log(msg.str());
    }

    const nlohmann::json provenance{{"train", config}, {"augment", augment}, {"split_sizes", {split.train.size(), split.val.size()}}};
    const auto start = clock::now();
    int epoch = 0;
    bool out_of_budget = false;

    for (int restart = 0; restart <= config.n_restarts && !out_of_budget; ++restart) {
        if (restart > 0) {
            model = best;
            log("restart " + std::to_string(restart) + " from best checkpoint (epoch " +
                std::to_string(history.best_epoch) + ")");
        }
        SchedulerState state = scheduler_start(config, restart, history.best_val_loss);
        Adam adam(state.current_lr);

        while (true) {
            if (epoch >= config.epochs_cap) {
                history.stop_reason = "epochs_cap";
                out_of_budget = true;
                break;
            }
            if (config.time_budget_s > 0.0 &&
                std::chrono::duration<double>(clock::now() - start).count() >= config.time_budget_s) {
                history.stop_reason = "time_budget";
                out_of_budget = true;
                break;
            }
            ++epoch;
            const auto epoch_start = clock::now();
            adam.set_learning_rate(state.current_lr);

            const std::vector<std::size_t> order = epoch_order(split.train, config.split_seed, epoch);
            double train_total = 0.0;
            BatchWorkers workers(model, config.batch_size);
            std::vector<SampleOutcome> slots(static_cast<std::size_t>(config.batch_size));
            for (std::size_t b = 0; b < order.size(); b += static_cast<std::size_t>(config.batch_size)) {
                const std::size_t used = std::min(order.size() - b, static_cast<std::size_t>(config.batch_size));
                const auto batch = static_cast<float>(used);
                workers.sync_from(model, used);
                parallel_for(used, threads, [&](std::size_t s) {
                    const FrameRecord record = manifest.load(order[b + s]);
                    SampleOutcome& o = slots[s];
                    o.id = record.id();
                    o.seed = sample_seed(config.split_seed, epoch, o.id, kTrainStream);
                    TrainingSample sample = augment_pair(record, o.seed, augment);
                    HeatmapModel& replica = workers.replica(s);
                    const Heatmap p = replica.forward_train(sample.x, workers.cache(s));
                    LossValue<float> loss = compute_loss(config.loss, sample.y, p, true);
                    for (float& g : loss.grad.values()) g /= batch;
                    o.loss = loss.loss;
                    replica.backward(workers.cache(s), p, loss.grad);
                    if (trace.enabled()) o.trace = std::move(sample.trace);
                });
                model.zero_grad();
                workers.accumulate_into(model, used);
                for (std::size_t s = 0; s < used; ++s) {
                    trace.write(epoch, "train", slots[s].id, slots[s].seed, slots[s].trace);
                    train_total += slots[s].loss;
                }
                model.apply_weight_decay();
                adam.step(model.parameters());
            }
            const double train_loss = train_total / static_cast<double>(order.size());
            const double val_loss = mean_loss(model, manifest, split.val, config, augment, epoch, &trace, threads);

            const SchedulerStep step = scheduler_step(state, val_loss, config);
            EpochRecord rec;
            rec.epoch = epoch;
            rec.train_loss = train_loss;
            rec.val_loss = val_loss;
            rec.lr = state.current_lr;
            rec.restart = restart;
            rec.action = to_string(step.action);
            rec.improved = step.improved;
            rec.seconds = std::chrono::duration<double>(clock::now() - epoch_start).count();
            history.epochs.push_back(rec);

            if (step.improved) {
                best = model;
                history.best_val_loss = val_loss;
                history.best_epoch = epoch;
                if (!options.run_dir.empty()) {
                    nlohmann::json prov = provenance;
                    prov["epoch"] = epoch;
                    prov["val_loss"] = val_loss;
                    history.best_checkpoint = save_checkpoint(best, options.run_dir, "best", config.head_seed, prov);
                }
            }
            {
                std::ostringstream msg;
                msg << std::setprecision(5) << "epoch " << epoch << " restart " << restart << " lr " << state.current_lr
                    << " train " << train_loss << " val " << val_loss << (step.improved ? " *" : "") << " ["
                    << rec.action << ", " << std::setprecision(3) << rec.seconds << " s]";
                if (!step.diagnostic.empty()) msg << " " << step.diagnostic;
                log(msg.str());
            }
            if (!options.run_dir.empty()) history.write_csv(options.run_dir / "history.csv");

            state = step.state;
            if (step.action == SchedulerAction::abort) break;
        }
    }
    if (history.stop_reason.empty()) history.stop_reason = "completed";

    if (!options.run_dir.empty()) {
        history.write_csv(options.run_dir / "history.csv");
        std::ofstream(options.run_dir / "history.json") << history.summary().dump(2) << '\n';
    }
    return TrainResult{std::move(best), std::move(history)};
}

}  // namespace toadhm
