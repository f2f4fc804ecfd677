#pragma once
// Reference predictors evaluated on the same standardized windows as the full
// model: last-value persistence and a one-layer linear map from the lookback
// to the horizon.

#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "exotst/dataset.hpp"
#include "exotst/errors.hpp"
#include "exotst/ops.hpp"
#include "exotst/tensor.hpp"
#include "exotst/training.hpp"

namespace exotst {

inline std::vector<double> persistence_forecast(const WindowSample& sample) {
    if (sample.y_past.empty())
        throw ContractError("persistence: empty lookback window");
    return std::vector<double>(sample.y_future.size(), sample.y_past.back());
}

struct PersistenceBaseline {
    std::vector<std::pair<std::string, Tensor>> parameters() const {
        return {};
    }
    std::vector<std::pair<std::string, Tensor>> buffers() const { return {}; }
};

inline std::vector<double> predict_standardized(const PersistenceBaseline&,
                                                const WindowSample& sample) {
    return persistence_forecast(sample);
}

// y_hat = W y_past + b on standardized values.
struct LinearBaseline {
    Tensor W;  // (f, L)
    Tensor b;  // (f)

    std::size_t lookback() const { return W.shape()[1]; }
    std::size_t horizon() const { return W.shape()[0]; }

    std::vector<std::pair<std::string, Tensor>> parameters() const {
        return {{"linear.W", W}, {"linear.b", b}};
    }
    std::vector<std::pair<std::string, Tensor>> buffers() const { return {}; }
};

// Zero weights: the loss is convex, so no symmetry needs breaking.
inline LinearBaseline init_linear_baseline(std::size_t lookback,
                                           std::size_t horizon) {
    if (lookback < 1 || horizon < 1)
        throw ConfigError("linear baseline needs lookback and horizon >= 1");
    LinearBaseline m;
    m.W = Tensor::zeros({horizon, lookback}, true);
    m.b = Tensor::zeros({horizon}, true);
    return m;
}

inline Tensor linear_forecast_tensor(const LinearBaseline& m,
                                     const WindowSample& sample) {
    if (sample.y_past.size() != m.lookback())
        throw ShapeError("linear baseline: lookback " +
                         std::to_string(sample.y_past.size()) +
                         " does not match trained " +
                         std::to_string(m.lookback()));
    Tensor x = Tensor::from_vector({1, m.lookback()}, sample.y_past);
    return add_row(matmul(x, transpose2(m.W)), m.b);
}

inline Tensor sample_loss(LinearBaseline& m, const WindowSample& sample,
                          Mode) {
    return mse_loss(linear_forecast_tensor(m, sample), sample.y_future);
}

inline std::vector<double> predict_standardized(const LinearBaseline& m,
                                                const WindowSample& sample) {
    NoGradGuard guard;
    return linear_forecast_tensor(m, sample).value();
}

struct LinearRunResult {
    LinearBaseline model;
    TrainReport report;
    EvalMetrics metrics;
};

// Fits the linear baseline with the shared Adam/early-stopping harness and
// evaluates it on the test windows.
inline LinearRunResult linear_fit_predict(
    const std::vector<WindowSample>& train_set,
    const std::vector<WindowSample>& val_set,
    const std::vector<WindowSample>& test_set, const TrainOptions& opt,
    std::size_t k = 50) {
    if (train_set.empty()) throw DataError("training split is empty");
    LinearRunResult out;
    out.model = init_linear_baseline(train_set[0].y_past.size(),
                                     train_set[0].y_future.size());
    out.report = train_model(out.model, train_set, val_set, opt);
    out.metrics = evaluate_model(out.model, test_set, k);
    return out;
}

}  // namespace exotst
