#pragma once
// Generic training and evaluation harness. Works for any model type offering
// parameters()/buffers() registries plus free functions sample_loss(model,
// window, mode) and predict_standardized(model, window).

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numeric>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include "exotst/adam.hpp"
#include "exotst/attention.hpp"
#include "exotst/csv.hpp"
#include "exotst/dataset.hpp"
#include "exotst/errors.hpp"
#include "exotst/ops.hpp"
#include "exotst/rng.hpp"
#include "exotst/tensor.hpp"

namespace exotst {

struct TrainOptions {
    double learning_rate = 1e-4;
    std::size_t batch_size = 32;
    std::size_t max_epochs = 20;
    std::size_t patience = 10;
    std::uint64_t seed = 0;
};

inline void validate_train_options(const TrainOptions& opt) {
    std::vector<std::string> bad;
    if (!(opt.learning_rate > 0.0))
        bad.push_back("learning rate must be positive");
    if (opt.batch_size < 1) bad.push_back("batch size must be at least 1");
    if (opt.max_epochs < 1) bad.push_back("max epochs must be at least 1");
    if (opt.patience < 1) bad.push_back("patience must be at least 1");
    if (!bad.empty()) {
        std::string msg = "invalid train options: " + bad[0];
        for (std::size_t i = 1; i < bad.size(); ++i) msg += "; " + bad[i];
        throw ConfigError(msg);
    }
}

struct TrainReport {
    std::vector<double> train_losses;  // one entry per completed epoch
    std::vector<double> val_losses;
    std::size_t best_epoch = 0;  // 1-based epoch of the restored weights
    std::string stop_reason;     // "patience" or "max_epochs"
    double wall_seconds = 0.0;
};

// key=value header followed by the per-epoch loss table. Wall time stays out
// of the file so identical runs serialize byte-identically.
inline void write_train_report(const TrainReport& rep, std::ostream& os) {
    os << "best_epoch=" << rep.best_epoch << "\n";
    os << "stop_reason=" << rep.stop_reason << "\n";
    os << "epoch,train_loss,val_loss\n";
    for (std::size_t i = 0; i < rep.train_losses.size(); ++i)
        os << (i + 1) << "," << csv::g17(rep.train_losses[i]) << ","
           << csv::g17(rep.val_losses[i]) << "\n";
}

namespace detail {

template <typename Model>
std::vector<std::vector<double>> snapshot_state(const Model& m) {
    std::vector<std::vector<double>> out;
    for (const auto& [name, t] : m.parameters()) out.push_back(t.value());
    for (const auto& [name, t] : m.buffers()) out.push_back(t.value());
    return out;
}

template <typename Model>
void restore_state(Model& m, const std::vector<std::vector<double>>& snap) {
    std::size_t i = 0;
    for (const auto& [name, t] : m.parameters()) t.value() = snap[i++];
    for (const auto& [name, t] : m.buffers()) t.value() = snap[i++];
}

inline void shuffle_indices(std::vector<std::size_t>& idx, Rng& rng) {
    for (std::size_t i = 0; i + 1 < idx.size(); ++i) {
        const std::size_t j =
            i + static_cast<std::size_t>(rng.below(idx.size() - i));
        std::swap(idx[i], idx[j]);
    }
}

}  // namespace detail

template <typename Model>
double validation_loss(Model& model, const std::vector<WindowSample>& samples) {
    if (samples.empty()) throw DataError("validation split is empty");
    NoGradGuard guard;
    double sum = 0.0;
    for (const WindowSample& w : samples)
        sum += sample_loss(model, w, Mode::eval).item();
    return sum / static_cast<double>(samples.size());
}

// Mean training loss over the index set. Models whose normalization couples
// the samples of a mini-batch (the full transformer) provide their own
// overload; everything else averages per-sample losses.
template <typename Model>
Tensor batch_loss(Model& model, const std::vector<WindowSample>& set,
                  const std::vector<std::size_t>& idx, Mode mode) {
    std::vector<Tensor> losses;
    losses.reserve(idx.size());
    for (std::size_t i : idx) losses.push_back(sample_loss(model, set[i], mode));
    return mean_of_scalars(losses);
}

// Mini-batch Adam with validation-based early stopping: training stops once
// the validation loss has not strictly decreased for `patience` consecutive
// epochs, and the weights and running stats of the best epoch are restored.
template <typename Model>
TrainReport train_model(Model& model, const std::vector<WindowSample>& train_set,
                        const std::vector<WindowSample>& val_set,
                        const TrainOptions& opt) {
    validate_train_options(opt);
    if (train_set.empty()) throw DataError("training split is empty");
    if (val_set.empty()) throw DataError("validation split is empty");
    const auto t0 = std::chrono::steady_clock::now();

    auto named = model.parameters();
    std::vector<Tensor> params;
    params.reserve(named.size());
    for (auto& [name, t] : named) params.push_back(t);
    AdamState adam = make_adam_state(params, opt.learning_rate);

    Rng rng(opt.seed);
    std::vector<std::size_t> order(train_set.size());
    std::iota(order.begin(), order.end(), 0);

    TrainReport rep;
    double best_val = std::numeric_limits<double>::infinity();
    std::vector<std::vector<double>> best_state = detail::snapshot_state(model);
    std::size_t epochs_without_improvement = 0;

    for (std::size_t epoch = 1; epoch <= opt.max_epochs; ++epoch) {
        detail::shuffle_indices(order, rng);
        double epoch_loss = 0.0;
        for (std::size_t b = 0; b < order.size(); b += opt.batch_size) {
            const std::size_t end = std::min(b + opt.batch_size, order.size());
            const std::vector<std::size_t> batch_idx(
                order.begin() + static_cast<std::ptrdiff_t>(b),
                order.begin() + static_cast<std::ptrdiff_t>(end));
            Tensor loss = batch_loss(model, train_set, batch_idx, Mode::train);
            const double batch_value = loss.item();
            backward(loss);
            adam_step(params, adam);
            for (auto& [name, t] : named) assert_all_finite(t, name);
            if (!std::isfinite(batch_value))
                throw NumericError("training loss is not finite at epoch " +
                                   std::to_string(epoch));
            epoch_loss += batch_value * static_cast<double>(end - b);
        }
        rep.train_losses.push_back(epoch_loss /
                                   static_cast<double>(order.size()));
        const double val = validation_loss(model, val_set);
        if (!std::isfinite(val))
            throw NumericError("validation loss is not finite at epoch " +
                               std::to_string(epoch));
        rep.val_losses.push_back(val);
        if (val < best_val) {
            best_val = val;
            rep.best_epoch = epoch;
            best_state = detail::snapshot_state(model);
            epochs_without_improvement = 0;
        } else if (++epochs_without_improvement >= opt.patience) {
            rep.stop_reason = "patience";
            break;
        }
    }
    if (rep.stop_reason.empty()) rep.stop_reason = "max_epochs";
    detail::restore_state(model, best_state);
    rep.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
            .count();
    return rep;
}

struct EvalMetrics {
    double mse = 0.0;
    double mae = 0.0;
    double mse_first_k = 0.0;  // over the k earliest forecast time steps
    double mse_last_k = 0.0;   // over the k latest
    std::size_t k = 0;
    std::vector<double> per_step_mse;  // indexed by forecast step, length f
    std::vector<double> per_step_mae;
};

// Metrics live in the dataset-standardized space the windows are built in.
// The first/last split is chronological: a forecast time step is the absolute
// segment index a prediction lands on, and overlapping windows contribute
// every prediction that falls on the selected steps.
template <typename Model>
EvalMetrics evaluate_model(Model& model, const std::vector<WindowSample>& test,
                           std::size_t k = 50) {
    if (test.empty()) throw DataError("evaluate: test set is empty");
    if (k < 1) throw ConfigError("evaluate: k must be at least 1");
    const std::size_t f = test[0].y_future.size();
    for (const WindowSample& w : test)
        if (w.y_future.size() != f)
            throw ContractError("evaluate: ragged horizons " +
                                std::to_string(w.y_future.size()) + " vs " +
                                std::to_string(f));
    NoGradGuard guard;
    EvalMetrics m;
    m.k = k;
    m.per_step_mse.assign(f, 0.0);
    m.per_step_mae.assign(f, 0.0);
    struct Point {
        std::size_t time;
        double sq;
        double ab;
    };
    std::vector<Point> points;
    points.reserve(test.size() * f);
    for (const WindowSample& w : test) {
        const std::vector<double> y_hat = predict_standardized(model, w);
        if (y_hat.size() != f)
            throw ContractError("evaluate: prediction length " +
                                std::to_string(y_hat.size()) +
                                " does not match horizon " + std::to_string(f));
        for (std::size_t h = 0; h < f; ++h) {
            const double err = y_hat[h] - w.y_future[h];
            const double sq = err * err, ab = std::abs(err);
            m.mse += sq;
            m.mae += ab;
            m.per_step_mse[h] += sq;
            m.per_step_mae[h] += ab;
            points.push_back({w.target_start + h, sq, ab});
        }
    }
    const double n = static_cast<double>(points.size());
    m.mse /= n;
    m.mae /= n;
    for (std::size_t h = 0; h < f; ++h) {
        m.per_step_mse[h] /= static_cast<double>(test.size());
        m.per_step_mae[h] /= static_cast<double>(test.size());
    }
    std::set<std::size_t> distinct;
    for (const Point& p : points) distinct.insert(p.time);
    if (k > distinct.size())
        throw DataError("evaluate: k=" + std::to_string(k) + " exceeds the " +
                        std::to_string(distinct.size()) +
                        " forecast time steps available");
    std::vector<std::size_t> steps(distinct.begin(), distinct.end());
    const std::size_t lo_cut = steps[k - 1];
    const std::size_t hi_cut = steps[steps.size() - k];
    double first_sq = 0.0, last_sq = 0.0;
    std::size_t first_n = 0, last_n = 0;
    for (const Point& p : points) {
        if (p.time <= lo_cut) {
            first_sq += p.sq;
            ++first_n;
        }
        if (p.time >= hi_cut) {
            last_sq += p.sq;
            ++last_n;
        }
    }
    m.mse_first_k = first_sq / static_cast<double>(first_n);
    m.mse_last_k = last_sq / static_cast<double>(last_n);
    return m;
}

// One corruption setting and its resulting test metrics.
struct RobustnessRow {
    double mask_fraction = 0.0;
    double noise_sigma = 0.0;
    EvalMetrics metrics;
};

// Clean row plus the mask {0, 0.4, 0.8} x sigma {0.8, 1.2} grid, 7 rows. All
// rows share the corruption seed, so a higher mask fraction masks a superset
// of the cells masked at a lower one.
template <typename Model>
std::vector<RobustnessRow> robustness_sweep(
    Model& model, const std::vector<WindowSample>& test, std::uint64_t seed,
    std::size_t k = 50) {
    std::vector<std::pair<double, double>> grid = {{0.0, 0.0}};
    for (double sigma : {0.8, 1.2})
        for (double mask : {0.0, 0.4, 0.8}) grid.emplace_back(mask, sigma);
    std::vector<RobustnessRow> rows;
    rows.reserve(grid.size());
    for (const auto& [mask, sigma] : grid) {
        CorruptionSpec spec;
        spec.mask_fraction = mask;
        spec.noise_sigma = sigma;
        spec.seed = seed;
        const std::vector<WindowSample> corrupted = corrupt(test, spec);
        RobustnessRow row;
        row.mask_fraction = mask;
        row.noise_sigma = sigma;
        row.metrics = evaluate_model(model, corrupted, k);
        rows.push_back(std::move(row));
    }
    return rows;
}

// Column layout follows the robustness tables: overall error first, then the
// chronological first-k / last-k breakdown.
inline void write_robustness_table(const std::vector<RobustnessRow>& rows,
                                   std::ostream& os) {
    const std::string k =
        rows.empty() ? "k" : std::to_string(rows[0].metrics.k);
    os << "mask_fraction,noise_sigma,mse_all,mse_first_" << k << ",mse_last_"
       << k << "\n";
    for (const RobustnessRow& r : rows)
        os << csv::g17(r.mask_fraction) << "," << csv::g17(r.noise_sigma) << ","
           << csv::g17(r.metrics.mse) << "," << csv::g17(r.metrics.mse_first_k)
           << "," << csv::g17(r.metrics.mse_last_k) << "\n";
}

}  // namespace exotst
