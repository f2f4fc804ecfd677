// Command-line front end: dataset synthesis, training, prediction,
// evaluation, robustness sweeps, attention export, and baselines. Exit codes:
// 0 success, 1 usage, 2 data, 3 numeric failure.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "exotst/baselines.hpp"
#include "exotst/csv.hpp"
#include "exotst/dataset.hpp"
#include "exotst/errors.hpp"
#include "exotst/model.hpp"
#include "exotst/training.hpp"

namespace {

using namespace exotst;

std::ofstream open_out(const std::string& path) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw DataError("cannot open '" + path + "' for writing");
    return f;
}

// Cumulative metrics over the first h forecast steps, one row per supported
// grid horizon plus the trained horizon itself, which also carries the
// chronological first/last-k breakdown.
void write_horizon_table(const EvalMetrics& m, std::ostream& os) {
    const std::size_t f = m.per_step_mse.size();
    os << "horizon,mse,mae,mse_first_" << m.k << ",mse_last_" << m.k << "\n";
    std::set<std::size_t> grid = {1, 7, 14, 30, 60, 90, 120};
    grid.insert(f);
    double run_mse = 0.0, run_mae = 0.0;
    for (std::size_t h = 1; h <= f; ++h) {
        run_mse += m.per_step_mse[h - 1];
        run_mae += m.per_step_mae[h - 1];
        if (!grid.count(h)) continue;
        os << h << "," << csv::g17(run_mse / static_cast<double>(h)) << ","
           << csv::g17(run_mae / static_cast<double>(h));
        if (h == f)
            os << "," << csv::g17(m.mse_first_k) << ","
               << csv::g17(m.mse_last_k);
        else
            os << ",,";
        os << "\n";
    }
}

struct DataArgs {
    std::string path;
    std::string target = "y";
};

void add_data_flags(CLI::App* sub, DataArgs& d) {
    sub->add_option("--data", d.path, "Input CSV with timestamp, target, and driver columns")
        ->required();
    sub->add_option("--target", d.target, "Endogenous column name")
        ->capture_default_str();
}

SplitResult load_split(const DataArgs& d) {
    return split_and_standardize(load_csv(d.path, d.target));
}

void add_model_flags(CLI::App* sub, ExoTSTConfig& cfg) {
    sub->add_option("--lookback", cfg.lookback, "Past steps per window")
        ->capture_default_str();
    sub->add_option("--horizon", cfg.horizon, "Future steps predicted per window")
        ->capture_default_str();
    sub->add_option("--patch-length", cfg.patch_length, "Steps per patch token")
        ->capture_default_str();
    sub->add_option("--stride", cfg.stride, "Offset between patch starts")
        ->capture_default_str();
    sub->add_option("--model-dim", cfg.model_dim, "Token embedding width")
        ->capture_default_str();
    sub->add_option("--heads", cfg.heads, "Attention heads")
        ->capture_default_str();
    sub->add_option("--ffn-dim", cfg.ffn_dim, "Encoder/decoder MLP width")
        ->capture_default_str();
    sub->add_option("--encoder-layers", cfg.encoder_layers,
                    "Layers per exogenous encoder")
        ->capture_default_str();
    sub->add_option("--fusion-layers", cfg.fusion_layers,
                    "Cross-stream fusion layers")
        ->capture_default_str();
    sub->add_option("--decoder-layers", cfg.decoder_layers, "Decoder layers")
        ->capture_default_str();
}

void add_train_flags(CLI::App* sub, TrainOptions& opt) {
    sub->add_option("--learning-rate", opt.learning_rate, "Adam step size")
        ->capture_default_str();
    sub->add_option("--batch-size", opt.batch_size, "Windows per optimizer step")
        ->capture_default_str();
    sub->add_option("--max-epochs", opt.max_epochs, "Epoch cap")
        ->capture_default_str();
    sub->add_option("--patience", opt.patience,
                    "Epochs without validation improvement before stopping")
        ->capture_default_str();
}

std::size_t checked_window_index(const std::vector<WindowSample>& windows,
                                 std::size_t index) {
    if (index >= windows.size())
        throw DataError("window index " + std::to_string(index) +
                        " out of range, test split has " +
                        std::to_string(windows.size()) + " windows");
    return index;
}

std::string trim_ws(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    return s.substr(b, s.find_last_not_of(" \t\r\n") - b + 1);
}

// Only one subcommand parses per invocation, so a shared sink is enough.
// The file is applied by expand_config below; the option exists so the
// flag is accepted and documented.
std::string config_path_sink;

void add_config_flag(CLI::App* sub) {
    sub->add_option("--config", config_path_sink,
                    "key=value defaults file; explicit flags win");
}

// Read key=value lines (blank lines and # comments allowed), validate each
// key against the subcommand's long flags, and return --key=value tokens.
std::vector<std::string> config_tokens(const CLI::App* sub,
                                       const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot read config file '" + path + "'");
    std::vector<std::string> tokens;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        const std::string s = trim_ws(line);
        if (s.empty() || s[0] == '#') continue;
        const std::string at = path + ":" + std::to_string(lineno);
        const auto eq = s.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config " + at + ": expected key=value, got '" +
                              s + "'");
        const std::string key = trim_ws(s.substr(0, eq));
        if (key.empty() || key == "config")
            throw ConfigError("config " + at + ": bad key '" + key + "'");
        if (sub->get_option_no_throw("--" + key) == nullptr)
            throw ConfigError("config " + at + ": unknown key '" + key +
                              "' for subcommand '" + sub->get_name() + "'");
        tokens.push_back("--" + key + "=" + trim_ws(s.substr(eq + 1)));
    }
    return tokens;
}

// Expand a `--config FILE` given after a subcommand into ordinary flag
// tokens inserted right after the subcommand name. Every option takes its
// last value, so flags typed on the command line override the file.
std::vector<std::string> expand_config(const CLI::App& app, int argc,
                                       char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    if (args.empty()) return args;
    const CLI::App* sub = app.get_subcommand_no_throw(args[0]);
    if (sub == nullptr) return args;
    std::string path;
    for (std::size_t i = 1; i < args.size(); ++i) {
        if (args[i].rfind("--config=", 0) == 0)
            path = args[i].substr(9);
        else if (args[i] == "--config" && i + 1 < args.size() &&
                 args[i + 1].rfind('-', 0) != 0)
            path = args[i + 1];
    }
    if (path.empty()) return args;
    const auto tokens = config_tokens(sub, path);
    args.insert(args.begin() + 1, tokens.begin(), tokens.end());
    return args;
}

int run(int argc, char** argv) {
    CLI::App app{"Transformer forecaster for time series with exogenous drivers"};
    app.require_subcommand(1);

    // --- synth ---------------------------------------------------------
    auto* synth = app.add_subcommand("synth", "Generate a synthetic driver/target CSV");
    add_config_flag(synth);
    struct {
        std::size_t length = 2000;
        std::size_t drivers = 4;
        std::uint64_t seed = 42;
        std::string regime = "driver-dominant";
        std::string out;
    } sy;
    synth->add_option("--length", sy.length, "Time steps")->capture_default_str();
    synth->add_option("--drivers", sy.drivers, "Exogenous channels")
        ->capture_default_str();
    synth->add_option("--seed", sy.seed, "Generator seed")->capture_default_str();
    synth
        ->add_option("--regime", sy.regime,
                     "driver-dominant or autoregressive dynamics")
        ->capture_default_str()
        ->check(CLI::IsMember({"driver-dominant", "autoregressive"}));
    synth->add_option("--out", sy.out, "Output CSV path")->required();
    synth->callback([&] {
        write_csv(synth_generate(sy.length, sy.drivers, sy.seed, sy.regime),
                  sy.out);
        std::cout << "wrote " << sy.out << " (" << sy.length << " steps, "
                  << sy.drivers << " drivers)\n";
    });

    // --- train ---------------------------------------------------------
    auto* train = app.add_subcommand("train", "Fit the model and save a checkpoint");
    add_config_flag(train);
    struct {
        DataArgs data;
        ExoTSTConfig cfg;
        TrainOptions opt;
        std::uint64_t seed = 0;
        std::size_t window_stride = 1;
        std::string checkpoint = "model.ckpt";
        std::string report;
    } tr;
    add_data_flags(train, tr.data);
    add_model_flags(train, tr.cfg);
    add_train_flags(train, tr.opt);
    train->add_option("--seed", tr.seed, "Seed for weights and batch order")
        ->capture_default_str();
    train->add_option("--window-stride", tr.window_stride,
                      "Offset between consecutive training windows")
        ->capture_default_str();
    train->add_option("--checkpoint", tr.checkpoint, "Checkpoint output path")
        ->capture_default_str();
    train->add_option("--report", tr.report,
                      "Optional path for the per-epoch loss report");
    train->callback([&] {
        SplitResult split = load_split(tr.data);
        tr.cfg.channels = split.train.X.size();
        tr.cfg.seed = tr.seed;
        tr.opt.seed = tr.seed;
        tr.cfg.learning_rate = tr.opt.learning_rate;
        tr.cfg.max_epochs = tr.opt.max_epochs;
        tr.cfg.patience = tr.opt.patience;
        ExoTSTModel model = init_model(tr.cfg);
        auto train_w = make_windows(split.train, tr.cfg.lookback,
                                    tr.cfg.horizon, tr.window_stride);
        auto val_w = make_windows(split.val, tr.cfg.lookback, tr.cfg.horizon,
                                  tr.window_stride);
        TrainReport rep = train_model(model, train_w, val_w, tr.opt);
        save_checkpoint(model, tr.checkpoint);
        if (!tr.report.empty()) {
            auto f = open_out(tr.report);
            write_train_report(rep, f);
        }
        std::cout << "trained " << rep.train_losses.size()
                  << " epochs (stop: " << rep.stop_reason << "), best epoch "
                  << rep.best_epoch << ", val loss "
                  << rep.val_losses[rep.best_epoch - 1] << ", "
                  << rep.wall_seconds << "s; checkpoint " << tr.checkpoint
                  << "\n";
    });

    // --- predict -------------------------------------------------------
    auto* predict =
        app.add_subcommand("predict", "Forecast one test window from a checkpoint");
    add_config_flag(predict);
    struct {
        DataArgs data;
        std::string checkpoint;
        std::size_t window_index = 0;
        std::string out;
    } pr;
    add_data_flags(predict, pr.data);
    predict->add_option("--checkpoint", pr.checkpoint, "Trained model file")
        ->required();
    predict->add_option("--window-index", pr.window_index,
                        "Which test window to forecast")
        ->capture_default_str();
    predict->add_option("--out", pr.out, "Output CSV path")->required();
    predict->callback([&] {
        ExoTSTModel model = load_checkpoint(pr.checkpoint);
        SplitResult split = load_split(pr.data);
        auto test_w = make_windows(split.test, model.cfg.lookback,
                                   model.cfg.horizon, 1);
        const WindowSample& w =
            test_w[checked_window_index(test_w, pr.window_index)];
        ForecastResult r = forward(model, w, Mode::eval);
        auto f = open_out(pr.out);
        f << "step,y_hat,y_hat_std\n";
        for (std::size_t h = 0; h < r.y_hat.size(); ++h) {
            const double raw =
                r.y_hat[h] * split.stats.y_std + split.stats.y_mean;
            f << (h + 1) << "," << csv::g17(raw) << ","
              << csv::g17(r.y_hat[h]) << "\n";
        }
        std::cout << "wrote " << pr.out << " (" << r.y_hat.size()
                  << " steps)\n";
    });

    // --- evaluate ------------------------------------------------------
    auto* evaluate =
        app.add_subcommand("evaluate", "Test-set metrics across the horizon grid");
    add_config_flag(evaluate);
    struct {
        DataArgs data;
        std::string checkpoint;
        std::size_t k = 50;
        std::string out;
    } ev;
    add_data_flags(evaluate, ev.data);
    evaluate->add_option("--checkpoint", ev.checkpoint, "Trained model file")
        ->required();
    evaluate
        ->add_option("--first-last-k", ev.k,
                     "Breakdown width over the chronological test steps")
        ->capture_default_str();
    evaluate->add_option("--out", ev.out, "Output CSV path")->required();
    evaluate->callback([&] {
        ExoTSTModel model = load_checkpoint(ev.checkpoint);
        SplitResult split = load_split(ev.data);
        auto test_w = make_windows(split.test, model.cfg.lookback,
                                   model.cfg.horizon, 1);
        EvalMetrics m = evaluate_model(model, test_w, ev.k);
        auto f = open_out(ev.out);
        write_horizon_table(m, f);
        std::cout << "mse " << m.mse << ", mae " << m.mae << " over "
                  << test_w.size() << " windows; wrote " << ev.out << "\n";
    });

    // --- robustness ----------------------------------------------------
    auto* robustness = app.add_subcommand(
        "robustness", "Metric grid under driver masking and noise");
    add_config_flag(robustness);
    struct {
        DataArgs data;
        std::string checkpoint;
        std::uint64_t seed = 0;
        std::size_t k = 50;
        std::string out;
    } ro;
    add_data_flags(robustness, ro.data);
    robustness->add_option("--checkpoint", ro.checkpoint, "Trained model file")
        ->required();
    robustness->add_option("--seed", ro.seed, "Corruption seed")
        ->capture_default_str();
    robustness
        ->add_option("--first-last-k", ro.k,
                     "Breakdown width over the chronological test steps")
        ->capture_default_str();
    robustness->add_option("--out", ro.out, "Output CSV path")->required();
    robustness->callback([&] {
        ExoTSTModel model = load_checkpoint(ro.checkpoint);
        SplitResult split = load_split(ro.data);
        auto test_w = make_windows(split.test, model.cfg.lookback,
                                   model.cfg.horizon, 1);
        auto rows = robustness_sweep(model, test_w, ro.seed, ro.k);
        auto f = open_out(ro.out);
        write_robustness_table(rows, f);
        std::cout << "wrote " << ro.out << " (" << rows.size() << " rows)\n";
    });

    // --- export-attention ------------------------------------------------
    auto* export_attention = app.add_subcommand(
        "export-attention", "Dump attention maps for one test window");
    add_config_flag(export_attention);
    struct {
        DataArgs data;
        std::string checkpoint;
        std::size_t window_index = 0;
        std::string out_dir = "attention";
    } ex;
    add_data_flags(export_attention, ex.data);
    export_attention
        ->add_option("--checkpoint", ex.checkpoint, "Trained model file")
        ->required();
    export_attention
        ->add_option("--window-index", ex.window_index,
                     "Which test window to trace")
        ->capture_default_str();
    export_attention->add_option("--out-dir", ex.out_dir, "Output directory")
        ->capture_default_str();
    export_attention->callback([&] {
        ExoTSTModel model = load_checkpoint(ex.checkpoint);
        SplitResult split = load_split(ex.data);
        auto test_w = make_windows(split.test, model.cfg.lookback,
                                   model.cfg.horizon, 1);
        const WindowSample& w =
            test_w[checked_window_index(test_w, ex.window_index)];
        ModelTrace trace;
        forward(model, w, Mode::eval, &trace);
        std::filesystem::create_directories(ex.out_dir);
        std::size_t written = 0;
        auto dump = [&](const AttentionTrace& t, const std::string& stem,
                        bool q_agg, bool k_agg) {
            for (std::size_t h = 0; h < t.head_maps.size(); ++h) {
                auto f = open_out(ex.out_dir + "/" + stem + "_h" +
                                  std::to_string(h) + ".csv");
                export_attention_csv(t, h, f, q_agg, k_agg);
                ++written;
            }
        };
        for (std::size_t l = 0; l < trace.past_encoder.size(); ++l)
            for (std::size_t c = 0; c < trace.past_encoder[l].size(); ++c) {
                const std::string tag =
                    "_l" + std::to_string(l) + "_c" + std::to_string(c);
                dump(trace.past_encoder[l][c], "encoder_past" + tag, true, true);
                dump(trace.future_encoder[l][c], "encoder_future" + tag, true,
                     true);
            }
        for (std::size_t c = 0; c < trace.fusion.size(); ++c)
            for (std::size_t l = 0; l < trace.fusion[c].size(); ++l) {
                const std::string tag =
                    "_l" + std::to_string(l) + "_c" + std::to_string(c);
                dump(trace.fusion[c][l].past, "fusion_past" + tag, true, true);
                dump(trace.fusion[c][l].future, "fusion_future" + tag, true,
                     true);
            }
        for (std::size_t l = 0; l < trace.decoder_self.size(); ++l) {
            const std::string tag = "_l" + std::to_string(l);
            dump(trace.decoder_self[l], "decoder_self" + tag, false, false);
            dump(trace.decoder_cross[l], "decoder_cross" + tag, false, false);
        }
        std::cout << "wrote " << written << " attention maps to " << ex.out_dir
                  << "\n";
    });

    // --- baseline ------------------------------------------------------
    auto* baseline = app.add_subcommand(
        "baseline", "Reference predictors on the shared splits");
    add_config_flag(baseline);
    struct {
        DataArgs data;
        std::string which = "persistence";
        std::string checkpoint;
        std::size_t lookback = 256;
        std::size_t horizon = 30;
        TrainOptions opt;
        std::uint64_t seed = 0;
        std::size_t k = 50;
        std::string out;
    } ba;
    add_data_flags(baseline, ba.data);
    baseline
        ->add_option("--which", ba.which,
                     "persistence, linear, or ablation (no-future view)")
        ->capture_default_str()
        ->check(CLI::IsMember({"persistence", "linear", "ablation"}));
    baseline->add_option("--checkpoint", ba.checkpoint,
                         "Trained model file (ablation only)");
    baseline->add_option("--lookback", ba.lookback, "Past steps per window")
        ->capture_default_str();
    baseline->add_option("--horizon", ba.horizon, "Future steps per window")
        ->capture_default_str();
    add_train_flags(baseline, ba.opt);
    baseline->add_option("--seed", ba.seed, "Batch-order seed (linear only)")
        ->capture_default_str();
    baseline
        ->add_option("--first-last-k", ba.k,
                     "Breakdown width over the chronological test steps")
        ->capture_default_str();
    baseline->add_option("--out", ba.out, "Output CSV path")->required();
    baseline->callback([&] {
        SplitResult split = load_split(ba.data);
        EvalMetrics metrics;
        if (ba.which == "ablation") {
            if (ba.checkpoint.empty())
                throw ConfigError("baseline ablation needs --checkpoint");
            ExoTSTModel model = load_checkpoint(ba.checkpoint);
            auto test_w = make_windows(split.test, model.cfg.lookback,
                                       model.cfg.horizon, 1);
            AblatedView view = ablate_future(model);
            metrics = evaluate_model(view, test_w, ba.k);
        } else {
            auto test_w =
                make_windows(split.test, ba.lookback, ba.horizon, 1);
            if (ba.which == "persistence") {
                PersistenceBaseline m;
                metrics = evaluate_model(m, test_w, ba.k);
            } else {
                auto train_w =
                    make_windows(split.train, ba.lookback, ba.horizon, 1);
                auto val_w =
                    make_windows(split.val, ba.lookback, ba.horizon, 1);
                ba.opt.seed = ba.seed;
                metrics =
                    linear_fit_predict(train_w, val_w, test_w, ba.opt, ba.k)
                        .metrics;
            }
        }
        auto f = open_out(ba.out);
        write_horizon_table(metrics, f);
        std::cout << ba.which << " mse " << metrics.mse << ", mae "
                  << metrics.mae << "; wrote " << ba.out << "\n";
    });

    // Later occurrences of a flag override earlier ones, which lets the
    // command line take precedence over config-file tokens injected ahead
    // of it by expand_config.
    for (auto* sub : app.get_subcommands([](const CLI::App*) { return true; }))
        for (auto* opt : sub->get_options())
            opt->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);

    app.name(argv[0]);
    try {
        auto args = expand_config(app, argc, argv);
        std::reverse(args.begin(), args.end());
        app.parse(std::move(args));
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const NumericError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}
