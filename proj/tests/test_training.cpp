#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "exotst/baselines.hpp"
#include "exotst/model.hpp"
#include "exotst/training.hpp"

using namespace exotst;

namespace {

// Validation losses come from a script, one entry per epoch; the train-mode
// loss is a taped constant so the optimizer has something to chew on.
struct ScriptModel {
    Tensor p = Tensor::full({1}, 0.5, true);
    std::vector<double> script;
    std::size_t eval_calls = 0;

    std::vector<std::pair<std::string, Tensor>> parameters() const {
        return {{"p", p}};
    }
    std::vector<std::pair<std::string, Tensor>> buffers() const { return {}; }
};

Tensor sample_loss(ScriptModel& m, const WindowSample&, Mode mode) {
    if (mode == Mode::train) return sum_all(square(m.p));
    const std::size_t i = std::min(m.eval_calls++, m.script.size() - 1);
    return Tensor::full({1}, m.script[i]);
}

// Predicts the target plus a fixed per-window offset, keyed by target_start.
struct OffsetModel {
    std::map<std::size_t, std::vector<double>> offsets;

    std::vector<std::pair<std::string, Tensor>> parameters() const {
        return {};
    }
    std::vector<std::pair<std::string, Tensor>> buffers() const { return {}; }
};

std::vector<double> predict_standardized(const OffsetModel& m,
                                         const WindowSample& w) {
    std::vector<double> out = w.y_future;
    auto it = m.offsets.find(w.target_start);
    if (it != m.offsets.end())
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += it->second[i];
    return out;
}

struct ZeroModel {
    std::vector<std::pair<std::string, Tensor>> parameters() const {
        return {};
    }
    std::vector<std::pair<std::string, Tensor>> buffers() const { return {}; }
};

std::vector<double> predict_standardized(const ZeroModel&,
                                         const WindowSample& w) {
    return std::vector<double>(w.y_future.size(), 0.0);
}

ExoTSTConfig tiny_config() {
    ExoTSTConfig cfg;
    cfg.lookback = 16;
    cfg.horizon = 4;
    cfg.patch_length = 4;
    cfg.stride = 2;
    cfg.model_dim = 8;
    cfg.heads = 2;
    cfg.ffn_dim = 8;
    cfg.encoder_layers = 1;
    cfg.fusion_layers = 1;
    cfg.decoder_layers = 1;
    cfg.channels = 2;
    cfg.seed = 5;
    return cfg;
}

struct TinyData {
    std::vector<WindowSample> train, val, test;
};

TinyData tiny_data(std::size_t L, std::size_t f, std::size_t channels) {
    RawSeries series = synth_generate(400, channels, 3, "driver-dominant");
    SplitResult split = split_and_standardize(series);
    TinyData d;
    d.train = make_windows(split.train, L, f, 1);
    d.val = make_windows(split.val, L, f, 1);
    d.test = make_windows(split.test, L, f, 1);
    return d;
}

double checksum(const std::vector<std::pair<std::string, Tensor>>& named) {
    double s = 0.0;
    for (const auto& [name, t] : named)
        for (double v : t.value()) s += v * 1e-3 + v * v;
    return s;
}

WindowSample dummy_window() { return WindowSample{}; }

}  // namespace

TEST_CASE("early stopping follows the patience rule exactly") {
    TrainOptions opt;
    opt.max_epochs = 10;
    opt.learning_rate = 1e-6;
    const std::vector<WindowSample> one = {dummy_window()};

    SECTION("improvement resets the counter") {
        ScriptModel m;
        m.script = {1.0, 0.9, 0.95, 0.96, 0.97};
        opt.patience = 2;
        TrainReport rep = train_model(m, one, one, opt);
        CHECK(rep.val_losses.size() == 4);
        CHECK(rep.best_epoch == 2);
        CHECK(rep.stop_reason == "patience");
    }
    SECTION("patience one stops on the first non-improvement") {
        ScriptModel m;
        m.script = {1.0, 2.0, 0.1, 0.01};
        opt.patience = 1;
        TrainReport rep = train_model(m, one, one, opt);
        CHECK(rep.val_losses.size() == 2);
        CHECK(rep.best_epoch == 1);
        CHECK(rep.stop_reason == "patience");
    }
    SECTION("a plateau is not an improvement") {
        ScriptModel m;
        m.script = {1.0, 1.0, 1.0, 1.0};
        opt.patience = 2;
        TrainReport rep = train_model(m, one, one, opt);
        CHECK(rep.val_losses.size() == 3);
        CHECK(rep.best_epoch == 1);
        CHECK(rep.stop_reason == "patience");
    }
    SECTION("steady improvement runs to the epoch cap") {
        ScriptModel m;
        for (int i = 0; i < 12; ++i) m.script.push_back(1.0 - 0.05 * i);
        opt.patience = 2;
        TrainReport rep = train_model(m, one, one, opt);
        CHECK(rep.val_losses.size() == 10);
        CHECK(rep.best_epoch == 10);
        CHECK(rep.stop_reason == "max_epochs");
    }
}

TEST_CASE("train options and splits are validated") {
    ScriptModel m;
    m.script = {1.0};
    const std::vector<WindowSample> one = {dummy_window()};
    TrainOptions bad;
    bad.learning_rate = 0.0;
    bad.batch_size = 0;
    const std::string msg = [&] {
        try {
            train_model(m, one, one, bad);
        } catch (const ConfigError& e) {
            return std::string(e.what());
        }
        return std::string();
    }();
    CHECK(msg.find("learning rate must be positive") != std::string::npos);
    CHECK(msg.find("batch size must be at least 1") != std::string::npos);

    TrainOptions ok;
    CHECK_THROWS_AS(train_model(m, {}, one, ok), DataError);
    CHECK_THROWS_AS(train_model(m, one, {}, ok), DataError);
}

TEST_CASE("the restored weights achieve the minimum recorded validation loss") {
    ExoTSTConfig cfg = tiny_config();
    TinyData d = tiny_data(cfg.lookback, cfg.horizon, cfg.channels);
    d.train.resize(40);
    d.val.resize(10);
    ExoTSTModel m = init_model(cfg);
    TrainOptions opt;
    opt.learning_rate = 1e-3;
    opt.max_epochs = 5;
    opt.patience = 10;
    opt.seed = 1;
    TrainReport rep = train_model(m, d.train, d.val, opt);
    REQUIRE(rep.val_losses.size() >= 1);
    double min_val = rep.val_losses[0];
    for (double v : rep.val_losses) min_val = std::min(min_val, v);
    CHECK(validation_loss(m, d.val) == min_val);
    CHECK(rep.val_losses[rep.best_epoch - 1] == min_val);
    CHECK(rep.wall_seconds > 0.0);
}

TEST_CASE("one small Adam step decreases the batch loss") {
    ExoTSTConfig cfg = tiny_config();
    TinyData d = tiny_data(cfg.lookback, cfg.horizon, cfg.channels);
    d.train.resize(8);
    ExoTSTModel m = init_model(cfg);
    auto named = m.parameters();
    std::vector<Tensor> params;
    for (auto& [name, t] : named) params.push_back(t);
    AdamState adam = make_adam_state(params, 1e-6);

    auto batch_loss = [&] {
        std::vector<Tensor> losses;
        for (const WindowSample& w : d.train)
            losses.push_back(sample_loss(m, w, Mode::train));
        return mean_of_scalars(losses);
    };
    Tensor before = batch_loss();
    const double before_value = before.item();
    backward(before);
    adam_step(params, adam);
    NoGradGuard guard;
    const double after_value = batch_loss().item();
    CHECK(after_value < before_value);
}

TEST_CASE("training is deterministic in the seed") {
    ExoTSTConfig cfg = tiny_config();
    TinyData d = tiny_data(cfg.lookback, cfg.horizon, cfg.channels);
    d.train.resize(24);
    d.val.resize(6);
    TrainOptions opt;
    opt.learning_rate = 1e-3;
    opt.max_epochs = 3;
    opt.seed = 9;

    ExoTSTModel a = init_model(cfg);
    ExoTSTModel b = init_model(cfg);
    TrainReport ra = train_model(a, d.train, d.val, opt);
    TrainReport rb = train_model(b, d.train, d.val, opt);
    CHECK(ra.train_losses == rb.train_losses);
    CHECK(ra.val_losses == rb.val_losses);
    auto pa = a.parameters(), pb = b.parameters();
    for (std::size_t i = 0; i < pa.size(); ++i)
        CHECK(pa[i].second.value() == pb[i].second.value());
}

TEST_CASE("non-finite parameters abort training with a name") {
    ExoTSTConfig cfg = tiny_config();
    TinyData d = tiny_data(cfg.lookback, cfg.horizon, cfg.channels);
    d.train.resize(4);
    d.val.resize(2);
    ExoTSTModel m = init_model(cfg);
    m.W_head.value()[0] = std::numeric_limits<double>::quiet_NaN();
    TrainOptions opt;
    std::string msg;
    try {
        train_model(m, d.train, d.val, opt);
    } catch (const NumericError& e) {
        msg = e.what();
    }
    CHECK(msg.find("exo_embed.W_p") != std::string::npos);
}

TEST_CASE("evaluation never mutates the model") {
    ExoTSTConfig cfg = tiny_config();
    TinyData d = tiny_data(cfg.lookback, cfg.horizon, cfg.channels);
    d.test.resize(12);
    ExoTSTModel m = init_model(cfg);
    const double params_before = checksum(m.parameters());
    const double buffers_before = checksum(m.buffers());
    evaluate_model(m, d.test, 5);
    CHECK(checksum(m.parameters()) == params_before);
    CHECK(checksum(m.buffers()) == buffers_before);
}

TEST_CASE("evaluate metric oracles") {
    SECTION("a perfect predictor scores zero everywhere") {
        TinyData d = tiny_data(16, 4, 1);
        OffsetModel perfect;
        EvalMetrics m = evaluate_model(perfect, d.test, 5);
        CHECK(m.mse == 0.0);
        CHECK(m.mae == 0.0);
        CHECK(m.mse_first_k == 0.0);
        CHECK(m.mse_last_k == 0.0);
        for (double v : m.per_step_mse) CHECK(v == 0.0);
    }
    SECTION("a constant offset scores its square") {
        TinyData d = tiny_data(16, 4, 1);
        OffsetModel biased;
        for (const WindowSample& w : d.test)
            biased.offsets[w.target_start] = std::vector<double>(4, 0.25);
        EvalMetrics m = evaluate_model(biased, d.test, 5);
        CHECK(m.mse == Catch::Approx(0.0625).epsilon(1e-12));
        CHECK(m.mae == Catch::Approx(0.25).epsilon(1e-12));
        CHECK(m.mse_first_k == Catch::Approx(0.0625).epsilon(1e-12));
        CHECK(m.mse_last_k == Catch::Approx(0.0625).epsilon(1e-12));
        for (double v : m.per_step_mse)
            CHECK(v == Catch::Approx(0.0625).epsilon(1e-12));
        for (double v : m.per_step_mae)
            CHECK(v == Catch::Approx(0.25).epsilon(1e-12));
    }
    SECTION("the zero predictor scores the target second moment") {
        TinyData d = tiny_data(16, 4, 1);
        ZeroModel z;
        EvalMetrics m = evaluate_model(z, d.test, 5);
        double expect = 0.0;
        std::size_t n = 0;
        for (const WindowSample& w : d.test)
            for (double v : w.y_future) {
                expect += v * v;
                ++n;
            }
        expect /= static_cast<double>(n);
        CHECK(m.mse == Catch::Approx(expect).epsilon(1e-12));
        CHECK(m.mse > 0.5);  // standardized targets have near-unit variance
        CHECK(m.mse < 1.5);
    }
}

TEST_CASE("the first and last k steps are chronological") {
    // Two overlapping windows, horizon 2: predictions land on times
    // {10, 11} and {11, 12} with errors 1,2 and 3,4.
    WindowSample w1, w2;
    w1.target_start = 10;
    w1.y_future = {0.0, 0.0};
    w1.y_past = {0.0};
    w2.target_start = 11;
    w2.y_future = {0.0, 0.0};
    w2.y_past = {0.0};
    OffsetModel m;
    m.offsets[10] = {1.0, 2.0};
    m.offsets[11] = {3.0, 4.0};
    const std::vector<WindowSample> test = {w1, w2};

    EvalMetrics k1 = evaluate_model(m, test, 1);
    CHECK(k1.mse_first_k == Catch::Approx(1.0));          // time 10: {1}
    CHECK(k1.mse_last_k == Catch::Approx(16.0));          // time 12: {4}
    EvalMetrics k2 = evaluate_model(m, test, 2);
    CHECK(k2.mse_first_k == Catch::Approx(14.0 / 3.0));   // times <= 11
    CHECK(k2.mse_last_k == Catch::Approx(29.0 / 3.0));    // times >= 11
    CHECK(k2.mse == Catch::Approx(30.0 / 4.0));

    std::string msg;
    try {
        evaluate_model(m, test, 4);
    } catch (const DataError& e) {
        msg = e.what();
    }
    CHECK(msg.find("k=4") != std::string::npos);
    CHECK(msg.find("3 forecast time steps") != std::string::npos);
    CHECK_THROWS_AS(evaluate_model(m, {}, 1), DataError);
    CHECK_THROWS_AS(evaluate_model(m, test, 0), ConfigError);
}

TEST_CASE("the robustness sweep emits the seven-row grid") {
    TinyData d = tiny_data(16, 4, 2);
    d.test.resize(10);
    ZeroModel z;
    auto rows = robustness_sweep(z, d.test, 77, 5);
    REQUIRE(rows.size() == 7);
    CHECK(rows[0].mask_fraction == 0.0);
    CHECK(rows[0].noise_sigma == 0.0);
    CHECK(rows[1].noise_sigma == 0.8);
    CHECK(rows[3].mask_fraction == 0.8);
    CHECK(rows[4].noise_sigma == 1.2);
    CHECK(rows[6].mask_fraction == 0.8);
    CHECK(rows[6].noise_sigma == 1.2);
    // the clean row matches a direct evaluation, and y is never corrupted,
    // so the target-only zero predictor scores identically everywhere
    EvalMetrics direct = evaluate_model(z, d.test, 5);
    for (const RobustnessRow& r : rows) CHECK(r.metrics.mse == direct.mse);

    std::ostringstream os;
    write_robustness_table(rows, os);
    const std::string text = os.str();
    CHECK(text.find("mask_fraction,noise_sigma,mse_all,mse_first_5,mse_last_5") == 0);
    std::size_t lines = 0;
    for (char c : text)
        if (c == '\n') ++lines;
    CHECK(lines == 8);
}

TEST_CASE("train reports serialize as key=value plus a loss table") {
    TrainReport rep;
    rep.train_losses = {0.5, 0.25};
    rep.val_losses = {0.75, 0.5};
    rep.best_epoch = 2;
    rep.stop_reason = "max_epochs";
    std::ostringstream os;
    write_train_report(rep, os);
    CHECK(os.str() ==
          "best_epoch=2\n"
          "stop_reason=max_epochs\n"
          "epoch,train_loss,val_loss\n"
          "1,0.5,0.75\n"
          "2,0.25,0.5\n");
}

TEST_CASE("one window can be memorized") {
    ExoTSTConfig cfg = tiny_config();
    TinyData d = tiny_data(cfg.lookback, cfg.horizon, cfg.channels);
    const std::vector<WindowSample> one = {d.train[0]};
    ExoTSTModel m = init_model(cfg);
    TrainOptions opt;
    opt.learning_rate = 1e-2;
    opt.batch_size = 1;
    opt.max_epochs = 500;
    opt.patience = 500;
    opt.seed = 0;
    TrainReport rep = train_model(m, one, one, opt);
    double min_train = rep.train_losses[0];
    for (double v : rep.train_losses) min_train = std::min(min_train, v);
    CHECK(min_train < 1e-3);
}
