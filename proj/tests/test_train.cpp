#include <doctest.h>

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "support.hpp"
#include "toadhm/checkpoint.hpp"
#include "toadhm/train.hpp"

using namespace toadhm;

namespace {

DatasetManifest fake_manifest(int n_toad, int n_not_toad) {
    DatasetManifest m;
    for (int i = 0; i < n_toad + n_not_toad; ++i) {
        RecordRef r;
        r.clip_id = "c" + std::to_string(i);
        r.label = i < n_toad ? Label::toad : Label::not_toad;
        m.records.push_back(r);
    }
    return m;
}

std::vector<std::string> replay(const std::vector<double>& losses, const TrainConfig& cfg, SchedulerState& state) {
    std::vector<std::string> actions;
    for (double v : losses) {
        const SchedulerStep step = scheduler_step(state, v, cfg);
        state = step.state;
        actions.push_back(to_string(step.action));
    }
    return actions;
}

struct TinySetup {
    test::TempDir dir{"train"};
    DatasetManifest manifest;
    TrainConfig train;
    AugmentConfig augment;
    BackboneConfig backbone;

    TinySetup() {
        for (int i = 0; i < 10; ++i) {
            FrameRecord r = synth_scene(static_cast<std::uint64_t>(i), i < 4 ? Label::toad : Label::not_toad, 96, 128);
            r.clip_id = "tiny" + std::to_string(i);
            write_record(dir / "data", r);
        }
        manifest = load_manifest(dir / "data");
        train.batch_size = 2;
        train.epochs_cap = 3;
        train.initial_lr = 1e-3;
        train.split_seed = 3;
        train.head_seed = 4;
        augment.crop1 = {96, 96};
        augment.crop2 = {64, 64};
        backbone.widths = {4, 4, 4, 4, 4};
        backbone.extra_convs = {0, 0, 0, 0, 0};
    }
};

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace

TEST_SUITE("train") {

TEST_CASE("split sizes and disjointness") {
    const DatasetManifest m = fake_manifest(66, 669);
    const DatasetSplit s = split_dataset(m, 0.8, 1);
    CHECK(s.train.size() == 588);
    CHECK(s.val.size() == 147);
    std::set<std::size_t> all(s.train.begin(), s.train.end());
    for (std::size_t i : s.val) CHECK(all.insert(i).second);
    CHECK(all.size() == 735);
    const DatasetSplit again = split_dataset(m, 0.8, 1);
    CHECK(again.train == s.train);
    CHECK(split_dataset(m, 0.8, 2).train != s.train);
}

TEST_CASE("degenerate splits are rejected") {
    CHECK_THROWS_AS(split_dataset(fake_manifest(1, 0), 0.8, 1), std::invalid_argument);
    CHECK_THROWS_AS(split_dataset(fake_manifest(1, 1), 0.4, 1), std::invalid_argument);
    CHECK_THROWS_AS(split_dataset(DatasetManifest{}, 0.8, 1), std::invalid_argument);
    CHECK(split_dataset(fake_manifest(1, 1), 0.5, 1).train.size() == 1);
}

TEST_CASE("scheduler keeps the rate while the loss falls") {
    const TrainConfig cfg;
    SchedulerState s = scheduler_start(cfg, 0);
    std::vector<double> losses;
    for (int i = 0; i < 20; ++i) losses.push_back(1.0 - 0.01 * i);
    for (const auto& a : replay(losses, cfg, s)) CHECK(a == "continue");
    CHECK(s.current_lr == 1e-4);
    CHECK(s.best_val_loss == doctest::Approx(0.81));
}

TEST_CASE("scheduler halves after a ten-epoch plateau") {
    const TrainConfig cfg;
    SchedulerState s = scheduler_start(cfg, 0);
    const auto actions = replay(std::vector<double>(11, 0.5), cfg, s);
    for (int i = 0; i < 10; ++i) CHECK(actions[i] == "continue");
    CHECK(actions[10] == "halve_lr");
    CHECK(s.current_lr == 5e-5);
    CHECK(s.epochs_since_lr_change == 0);
    CHECK(s.epochs_since_best == 10);
}

TEST_CASE("scheduler aborts after a 32-epoch plateau") {
    const TrainConfig cfg;
    SchedulerState s = scheduler_start(cfg, 0);
    const auto actions = replay(std::vector<double>(33, 0.5), cfg, s);
    CHECK(actions[10] == "halve_lr");
    CHECK(actions[20] == "halve_lr");
    CHECK(actions[30] == "halve_lr");
    CHECK(actions[32] == "abort");
    CHECK(std::count(actions.begin(), actions.end(), "abort") == 1);
}

TEST_CASE("an improvement resets both counters") {
    const TrainConfig cfg;
    SchedulerState s = scheduler_start(cfg, 0);
    std::vector<double> losses(9, 1.0);
    losses.push_back(0.5);
    losses.insert(losses.end(), 10, 0.7);
    const auto actions = replay(losses, cfg, s);
    CHECK(std::count(actions.begin(), actions.end(), "halve_lr") == 1);
    CHECK(actions.back() == "halve_lr");
}

TEST_CASE("replaying a loss sequence reproduces the trace") {
    const TrainConfig cfg;
    std::vector<double> losses;
    for (int i = 0; i < 80; ++i) losses.push_back(1.0 / (1 + i % 23) + 0.001 * (i % 7));
    SchedulerState a = scheduler_start(cfg, 0), b = scheduler_start(cfg, 0);
    CHECK(replay(losses, cfg, a) == replay(losses, cfg, b));
    CHECK(a.current_lr == b.current_lr);
}

TEST_CASE("non-finite losses abort with a diagnostic") {
    const TrainConfig cfg;
    const SchedulerStep step = scheduler_step(scheduler_start(cfg, 0), std::nan(""), cfg);
    CHECK(step.action == SchedulerAction::abort);
    CHECK_FALSE(step.diagnostic.empty());
}

TEST_CASE("restart rates halve from the initial rate") {
    const TrainConfig cfg;
    CHECK(restart_learning_rates(cfg) == std::vector<double>{1e-4, 5e-5, 2.5e-5, 1.25e-5, 6.25e-6});
    const SchedulerState s = scheduler_start(cfg, 2, 0.3);
    CHECK(s.current_lr == 2.5e-5);
    CHECK(s.best_val_loss == 0.3);
    TrainConfig none;
    none.n_restarts = 0;
    CHECK(restart_learning_rates(none) == std::vector<double>{1e-4});
}

TEST_CASE("adam first step moves each weight by about the learning rate") {
    Parameter p("w", 3);
    p.value = {1.0f, -2.0f, 0.5f};
    p.grad = {0.3f, -4.0f, 1e-3f};
    Adam adam(1e-3);
    adam.step({&p});
    CHECK(p.value[0] == doctest::Approx(1.0 - 1e-3).epsilon(1e-5));
    CHECK(p.value[1] == doctest::Approx(-2.0 + 1e-3).epsilon(1e-5));
    CHECK(p.value[2] == doctest::Approx(0.5 - 1e-3).epsilon(1e-4));
    CHECK(adam.steps() == 1);
}

TEST_CASE("epoch order is a deterministic permutation") {
    const std::vector<std::size_t> train{0, 2, 3, 5, 8, 9, 11};
    const auto a = epoch_order(train, 5, 1);
    CHECK(a == epoch_order(train, 5, 1));
    CHECK(std::is_permutation(a.begin(), a.end(), train.begin()));
    CHECK(epoch_order(train, 5, 2) != a);
    CHECK(sample_seed(1, 2, "x", 0) != sample_seed(1, 2, "x", 1));
}

TEST_CASE("config json rejects unknown keys and bad values") {
    CHECK_THROWS(nlohmann::json({{"learning_rate", 1e-3}}).get<TrainConfig>());
    CHECK_THROWS(nlohmann::json({{"abort_patience", 5}, {"plateau_patience", 10}}).get<TrainConfig>());
    const auto c = nlohmann::json({{"batch_size", 8}, {"loss", {{"kind", "weighted_bce"}, {"wt", 50}}}}).get<TrainConfig>();
    CHECK(c.batch_size == 8);
    CHECK(c.loss.kind == LossKind::weighted_bce);
    CHECK(nlohmann::json(c).get<TrainConfig>().loss.toad_weight == 50.0);
}

TEST_CASE("training needs both classes") {
    TinySetup t;
    DatasetManifest one = t.manifest;
    std::erase_if(one.records, [](const RecordRef& r) { return r.label == Label::toad; });
    CHECK_THROWS_AS(run_training(one, t.train, t.augment, t.backbone), std::invalid_argument);
}

TEST_CASE("a short run writes history and the best checkpoint") {
    TinySetup t;
    TrainOptions opts;
    opts.run_dir = t.dir / "run";
    opts.trace = true;
    const TrainResult r = run_training(t.manifest, t.train, t.augment, t.backbone, opts);
    const TrainHistory& h = r.history;
    REQUIRE(h.epochs.size() == 3);
    CHECK(std::isfinite(h.initial_val_loss));
    double best = std::numeric_limits<double>::infinity();
    for (const auto& e : h.epochs) best = std::min(best, e.val_loss);
    CHECK(h.best_val_loss == best);
    CHECK(std::filesystem::exists(opts.run_dir / "best.json"));
    CHECK(std::filesystem::exists(opts.run_dir / "best.bin"));
    CHECK(std::filesystem::exists(opts.run_dir / "trace.jsonl"));
    const std::string csv = slurp(opts.run_dir / "history.csv");
    CHECK(csv.rfind("epoch,train_loss,val_loss,lr,restart\n", 0) == 0);

    const HeatmapModel saved = load_checkpoint(opts.run_dir);
    const auto a = saved.parameters();
    const auto b = r.model.parameters();
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i]->value == b[i]->value);

    const TrainResult again = run_training(t.manifest, t.train, t.augment, t.backbone, {});
    REQUIRE(again.history.epochs.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) CHECK(again.history.epochs[i].val_loss == h.epochs[i].val_loss);
}

TEST_CASE("results do not depend on the worker count") {
    TinySetup t;
    t.train.batch_size = 3;
    t.train.epochs_cap = 2;
    TrainOptions one, three;
    one.threads = 1;
    three.threads = 3;
    const TrainResult a = run_training(t.manifest, t.train, t.augment, t.backbone, one);
    const TrainResult b = run_training(t.manifest, t.train, t.augment, t.backbone, three);
    REQUIRE(a.history.epochs.size() == b.history.epochs.size());
    for (std::size_t i = 0; i < a.history.epochs.size(); ++i) {
        CHECK(a.history.epochs[i].train_loss == b.history.epochs[i].train_loss);
        CHECK(a.history.epochs[i].val_loss == b.history.epochs[i].val_loss);
    }
    const auto pa = a.model.parameters();
    const auto pb = b.model.parameters();
    for (std::size_t i = 0; i < pa.size(); ++i) CHECK(pa[i]->value == pb[i]->value);
}

TEST_CASE("restarts begin at halved rates") {
    TinySetup t;
    t.train.plateau_patience = 1;
    t.train.abort_patience = 2;
    t.train.n_restarts = 2;
    t.train.initial_lr = 1e-9;
    t.train.epochs_cap = 20;
    const TrainResult r = run_training(t.manifest, t.train, t.augment, t.backbone, {});
    std::vector<double> starts;
    int last = -1;
    for (const auto& e : r.history.epochs)
        if (e.restart != last) {
            starts.push_back(e.lr);
            last = e.restart;
        }
    REQUIRE(starts.size() >= 2);
    for (std::size_t k = 0; k < starts.size(); ++k) CHECK(starts[k] == std::ldexp(1e-9, -static_cast<int>(k)));
}

}  // TEST_SUITE
