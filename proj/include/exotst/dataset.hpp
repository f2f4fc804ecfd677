#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "exotst/csv.hpp"
#include "exotst/errors.hpp"
#include "exotst/rng.hpp"

namespace exotst {

/// One endogenous series y plus M exogenous driver series, as loaded from
/// disk or synthesized. Missing cells are flagged, not yet imputed.
struct RawSeries {
    std::vector<std::string> timestamps;
    std::vector<double> y;
    std::vector<std::vector<double>> X;  // M arrays, each length T
    std::vector<std::string> names;     // names[0] is the endogenous column
    std::vector<std::uint8_t> y_missing;
    std::vector<std::vector<std::uint8_t>> X_missing;

    std::size_t length() const { return y.size(); }
    std::size_t drivers() const { return X.size(); }
};

/// Training-segment means and standard deviations, one slot per column.
struct NormStats {
    double y_mean = 0.0;
    double y_std = 1.0;
    std::vector<double> x_mean;
    std::vector<double> x_std;
};

/// A contiguous standardized slice of the series. `offset` is the slice's
/// start index in the full series.
struct Segment {
    std::vector<double> y;
    std::vector<std::vector<double>> X;
    std::size_t offset = 0;

    std::size_t length() const { return y.size(); }
};

struct SplitResult {
    Segment train;
    Segment val;
    Segment test;
    NormStats stats;
};

/// One supervised instance: L past steps of y and X, f future steps of X as
/// covariates and of y as the target. The target never appears in an input
/// field.
struct WindowSample {
    std::vector<double> y_past;                 // length L
    std::vector<std::vector<double>> X_past;    // M x L
    std::vector<std::vector<double>> X_future;  // M x f
    std::vector<double> y_future;               // length f
    std::size_t target_start = 0;  // segment index of y_future[0]
};

/// Corruption protocol for robustness runs: mask a fraction of exogenous
/// cells (set to 0, the standardized-space missing convention) and add
/// Gaussian noise to the remaining exogenous cells. y is never touched.
struct CorruptionSpec {
    double mask_fraction = 0.0;
    double noise_sigma = 0.0;
    std::uint64_t seed = 0;
    // The corruption target is ambiguous in the source protocol ("exogenous
    // driver values" generically); both halves are corrupted by default and
    // either can be switched off.
    bool apply_to_past = true;
    bool apply_to_future = true;
};

namespace detail {

inline bool parse_double(const std::string& s, double* out) {
    if (s.empty()) return false;
    char* end = nullptr;
    const double v = std::strtod(s.c_str(), &end);
    if (end != s.c_str() + s.size()) return false;
    *out = v;
    return true;
}

inline bool parse_int64(const std::string& s, long long* out) {
    if (s.empty()) return false;
    char* end = nullptr;
    const long long v = std::strtoll(s.c_str(), &end, 10);
    if (end != s.c_str() + s.size()) return false;
    *out = v;
    return true;
}

struct ColumnStats {
    double mean = 0.0;
    double std = 0.0;
    std::size_t n = 0;
};

/// Mean and population std over the non-missing entries of [0, hi).
inline ColumnStats train_stats(const std::vector<double>& col,
                               const std::vector<std::uint8_t>& missing,
                               std::size_t hi) {
    ColumnStats st;
    double sum = 0.0;
    for (std::size_t i = 0; i < hi; ++i) {
        if (missing[i]) continue;
        sum += col[i];
        st.n += 1;
    }
    if (st.n == 0) return st;
    st.mean = sum / static_cast<double>(st.n);
    double ss = 0.0;
    for (std::size_t i = 0; i < hi; ++i) {
        if (missing[i]) continue;
        const double c = col[i] - st.mean;
        ss += c * c;
    }
    st.std = std::sqrt(ss / static_cast<double>(st.n));
    return st;
}

}  // namespace detail

/// Reads a CSV series: UTF-8, comma-separated, header row, first column a
/// timestamp (ISO-8601 string or integer index), remaining columns numeric.
/// Missing values are an empty cell or the literal "NaN". The named target
/// column becomes the endogenous series; every other non-timestamp column is
/// an exogenous driver, in file order.
inline RawSeries load_csv(const std::string& path, const std::string& target_column) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("load_csv: cannot open '" + path + "'");

    std::string line;
    if (!std::getline(in, line)) throw DataError("load_csv: '" + path + "' is empty");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const std::vector<std::string> header = csv::split(line);
    if (header.size() < 2) {
        throw DataError("load_csv: header must contain a timestamp column and at "
                        "least one data column, got " + std::to_string(header.size()));
    }

    std::size_t target_idx = 0;  // 0 is the timestamp column, so 0 = not found
    for (std::size_t c = 1; c < header.size(); ++c) {
        if (header[c] == target_column) {
            target_idx = c;
            break;
        }
    }
    if (target_idx == 0) {
        throw DataError("load_csv: target column '" + target_column + "' not found in '" +
                        path + "'");
    }

    RawSeries series;
    series.names.push_back(target_column);
    for (std::size_t c = 1; c < header.size(); ++c) {
        if (c == target_idx) continue;
        series.names.push_back(header[c]);
        series.X.emplace_back();
        series.X_missing.emplace_back();
    }

    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const std::vector<std::string> cells = csv::split(line);
        if (cells.size() != header.size()) {
            throw DataError("load_csv: line " + std::to_string(line_no) + " has " +
                            std::to_string(cells.size()) + " cells, header has " +
                            std::to_string(header.size()));
        }
        series.timestamps.push_back(cells[0]);
        std::size_t xi = 0;
        for (std::size_t c = 1; c < cells.size(); ++c) {
            const std::string& cell = cells[c];
            const bool missing = cell.empty() || cell == "NaN";
            double v = 0.0;
            if (!missing && !detail::parse_double(cell, &v)) {
                throw DataError("load_csv: line " + std::to_string(line_no) +
                                " column '" + header[c] + "': non-numeric cell '" +
                                cell + "'");
            }
            if (c == target_idx) {
                series.y.push_back(v);
                series.y_missing.push_back(missing ? 1 : 0);
            } else {
                series.X[xi].push_back(v);
                series.X_missing[xi].push_back(missing ? 1 : 0);
                ++xi;
            }
        }
    }

    if (series.length() < 2) {
        throw DataError("load_csv: '" + path + "' has " +
                        std::to_string(series.length()) + " data rows, need at least 2");
    }

    // Timestamps must strictly increase: numerically when every stamp parses
    // as an integer, lexicographically otherwise (valid for ISO-8601).
    bool all_int = true;
    std::vector<long long> as_int(series.timestamps.size());
    for (std::size_t i = 0; i < series.timestamps.size(); ++i) {
        if (!detail::parse_int64(series.timestamps[i], &as_int[i])) {
            all_int = false;
            break;
        }
    }
    for (std::size_t i = 1; i < series.timestamps.size(); ++i) {
        const bool ok = all_int ? as_int[i - 1] < as_int[i]
                                : series.timestamps[i - 1] < series.timestamps[i];
        if (!ok) {
            throw DataError("load_csv: timestamps not strictly increasing at data row " +
                            std::to_string(i + 1) + " ('" + series.timestamps[i] + "')");
        }
    }
    return series;
}

/// Chronological 7:1:2 split with train-only standardization. Segment
/// lengths are floor(0.7 T), floor(0.1 T), and the remainder (exact integer
/// arithmetic). Statistics exclude missing cells; missing cells become 0 in
/// standardized space, i.e. the training mean.
inline SplitResult split_and_standardize(const RawSeries& series) {
    const std::size_t T = series.length();
    if (T < 10) {
        throw DataError("split_and_standardize: series too short (T=" +
                        std::to_string(T) + ", need >= 10)");
    }
    const std::size_t n_train = T * 7 / 10;
    const std::size_t n_val = T / 10;
    const std::size_t M = series.drivers();

    SplitResult result;
    NormStats& stats = result.stats;

    const detail::ColumnStats ys = detail::train_stats(series.y, series.y_missing, n_train);
    if (ys.n == 0) {
        throw DataError("split_and_standardize: column '" + series.names[0] +
                        "' has no observed values in the training segment");
    }
    if (ys.std == 0.0) {
        throw DataError("split_and_standardize: column '" + series.names[0] +
                        "' is constant in the training segment (std=0)");
    }
    stats.y_mean = ys.mean;
    stats.y_std = ys.std;
    for (std::size_t m = 0; m < M; ++m) {
        const detail::ColumnStats xs =
            detail::train_stats(series.X[m], series.X_missing[m], n_train);
        if (xs.n == 0) {
            throw DataError("split_and_standardize: column '" + series.names[m + 1] +
                            "' has no observed values in the training segment");
        }
        if (xs.std == 0.0) {
            throw DataError("split_and_standardize: column '" + series.names[m + 1] +
                            "' is constant in the training segment (std=0)");
        }
        stats.x_mean.push_back(xs.mean);
        stats.x_std.push_back(xs.std);
    }

    auto build_segment = [&](std::size_t lo, std::size_t hi) {
        Segment seg;
        seg.offset = lo;
        seg.y.reserve(hi - lo);
        for (std::size_t i = lo; i < hi; ++i) {
            seg.y.push_back(series.y_missing[i] ? 0.0
                                                : (series.y[i] - stats.y_mean) / stats.y_std);
        }
        seg.X.resize(M);
        for (std::size_t m = 0; m < M; ++m) {
            seg.X[m].reserve(hi - lo);
            for (std::size_t i = lo; i < hi; ++i) {
                seg.X[m].push_back(series.X_missing[m][i]
                                       ? 0.0
                                       : (series.X[m][i] - stats.x_mean[m]) / stats.x_std[m]);
            }
        }
        return seg;
    };
    result.train = build_segment(0, n_train);
    result.val = build_segment(n_train, n_train + n_val);
    result.test = build_segment(n_train + n_val, T);
    return result;
}

/// Sliding windows at offsets 0, s, 2s, ... with full L-past and f-future
/// coverage: count = floor((T_seg - L - f)/s) + 1.
inline std::vector<WindowSample> make_windows(const Segment& segment, std::size_t L,
                                              std::size_t f, std::size_t stride) {
    if (stride < 1) throw ConfigError("make_windows: stride must be >= 1");
    if (L < 1 || f < 1) throw ConfigError("make_windows: L and f must be >= 1");
    const std::size_t T = segment.length();
    if (T < L + f) {
        throw DataError("make_windows: segment length " + std::to_string(T) +
                        " yields no windows for L=" + std::to_string(L) +
                        ", f=" + std::to_string(f));
    }
    const std::size_t M = segment.X.size();
    const std::size_t count = (T - L - f) / stride + 1;
    std::vector<WindowSample> out;
    out.reserve(count);
    for (std::size_t w = 0; w < count; ++w) {
        const std::size_t o = w * stride;
        WindowSample s;
        s.y_past.assign(segment.y.begin() + o, segment.y.begin() + o + L);
        s.y_future.assign(segment.y.begin() + o + L, segment.y.begin() + o + L + f);
        s.X_past.resize(M);
        s.X_future.resize(M);
        for (std::size_t m = 0; m < M; ++m) {
            s.X_past[m].assign(segment.X[m].begin() + o, segment.X[m].begin() + o + L);
            s.X_future[m].assign(segment.X[m].begin() + o + L,
                                 segment.X[m].begin() + o + L + f);
        }
        s.target_start = o + L;
        out.push_back(std::move(s));
    }
    return out;
}

/// Applies the corruption protocol to a copy of the samples. Exactly
/// round(mask_fraction x exogenous-cell-count) cells are chosen uniformly
/// without replacement (partial Fisher-Yates under the spec seed) and set to
/// 0; Gaussian(0, noise_sigma^2) noise is then added to every remaining
/// exogenous cell. Cells are enumerated sample-major, past before future,
/// channel-major, time-ascending; the noise draws follow the same order, so
/// equal seeds give identical outputs.
inline std::vector<WindowSample> corrupt(const std::vector<WindowSample>& samples,
                                         const CorruptionSpec& spec) {
    if (spec.mask_fraction < 0.0 || spec.mask_fraction > 1.0) {
        throw ConfigError("corrupt: mask_fraction " + std::to_string(spec.mask_fraction) +
                          " outside [0,1]");
    }
    if (spec.noise_sigma < 0.0) {
        throw ConfigError("corrupt: noise_sigma must be nonnegative");
    }
    std::vector<WindowSample> out = samples;
    std::vector<double*> cells;
    for (WindowSample& s : out) {
        if (spec.apply_to_past) {
            for (auto& ch : s.X_past)
                for (double& v : ch) cells.push_back(&v);
        }
        if (spec.apply_to_future) {
            for (auto& ch : s.X_future)
                for (double& v : ch) cells.push_back(&v);
        }
    }
    const std::size_t n = cells.size();
    const auto n_mask = static_cast<std::size_t>(
        std::llround(spec.mask_fraction * static_cast<double>(n)));

    Rng rng(spec.seed);
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    std::vector<std::uint8_t> masked(n, 0);
    for (std::size_t i = 0; i < n_mask; ++i) {
        const std::size_t j = i + rng.below(n - i);
        std::swap(idx[i], idx[j]);
        masked[idx[i]] = 1;
    }
    for (std::size_t i = 0; i < n_mask; ++i) *cells[idx[i]] = 0.0;
    if (spec.noise_sigma > 0.0) {
        for (std::size_t i = 0; i < n; ++i) {
            if (!masked[i]) *cells[i] += spec.noise_sigma * rng.normal();
        }
    }
    return out;
}

/// Deterministic synthetic series driven by M smooth exogenous processes.
/// Each driver is a sum of three fixed-period sinusoids with seeded
/// amplitudes/phases plus AR(1) noise (rho 0.6, innovation std 0.55). The
/// endogenous law with coefficients a_m = 1/sqrt(M) and noise std 0.05:
///   driver-dominant:  y_t = sum_m a_m x^m_t + 0.2  y_{t-1} + eps_t
///   autoregressive:   y_t = 0.95 y_{t-1} + 0.05 sum_m a_m x^m_t + eps_t
/// The draw order (per driver: 3 amplitudes then 3 phases; per driver time
/// loop; then the y loop) is part of the determinism contract.
inline RawSeries synth_generate(std::size_t length, std::size_t n_drivers,
                                std::uint64_t seed, const std::string& regime) {
    if (regime != "driver-dominant" && regime != "autoregressive") {
        throw ConfigError("synth_generate: unknown regime '" + regime + "'");
    }
    if (length < 400) {
        throw ConfigError("synth_generate: length must be >= 400, got " +
                          std::to_string(length));
    }
    if (n_drivers < 1) {
        throw ConfigError("synth_generate: n_drivers must be >= 1");
    }
    static constexpr double kPi = 3.14159265358979323846;
    static constexpr double kPeriods[3] = {23.0, 59.0, 127.0};
    const bool driver_dominant = regime == "driver-dominant";

    Rng rng(seed);
    const std::size_t M = n_drivers;
    std::vector<std::array<double, 3>> amp(M), phase(M);
    for (std::size_t m = 0; m < M; ++m) {
        for (int k = 0; k < 3; ++k) amp[m][k] = rng.uniform(0.2, 0.6);
        for (int k = 0; k < 3; ++k) phase[m][k] = rng.uniform(0.0, 2.0 * kPi);
    }

    RawSeries series;
    series.X.assign(M, std::vector<double>(length, 0.0));
    for (std::size_t m = 0; m < M; ++m) {
        double u = 0.0;
        for (std::size_t t = 0; t < length; ++t) {
            u = 0.6 * u + 0.55 * rng.normal();
            double s = 0.0;
            for (int k = 0; k < 3; ++k) {
                s += amp[m][k] *
                     std::sin(2.0 * kPi * static_cast<double>(t) / kPeriods[k] +
                              phase[m][k]);
            }
            series.X[m][t] = s + u;
        }
    }

    const double a = 1.0 / std::sqrt(static_cast<double>(M));
    series.y.assign(length, 0.0);
    double prev = 0.0;
    for (std::size_t t = 0; t < length; ++t) {
        const double eps = 0.05 * rng.normal();
        double drive = 0.0;
        for (std::size_t m = 0; m < M; ++m) drive += a * series.X[m][t];
        const double cur = driver_dominant ? drive + 0.2 * prev + eps
                                           : 0.95 * prev + 0.05 * drive + eps;
        series.y[t] = cur;
        prev = cur;
    }

    series.timestamps.resize(length);
    for (std::size_t t = 0; t < length; ++t) series.timestamps[t] = std::to_string(t);
    series.names.push_back("y");
    for (std::size_t m = 0; m < M; ++m) series.names.push_back("x" + std::to_string(m + 1));
    series.y_missing.assign(length, 0);
    series.X_missing.assign(M, std::vector<std::uint8_t>(length, 0));
    return series;
}

/// Writes a RawSeries in the CSV format load_csv reads (17-digit floats, so
/// write-read round trips are exact).
inline void write_csv(const RawSeries& series, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("write_csv: cannot open '" + path + "' for writing");
    out << "time," << series.names[0];
    for (std::size_t m = 0; m < series.drivers(); ++m) out << "," << series.names[m + 1];
    out << "\n";
    for (std::size_t t = 0; t < series.length(); ++t) {
        out << series.timestamps[t];
        out << ",";
        if (series.y_missing[t]) {
            out << "NaN";
        } else {
            out << csv::g17(series.y[t]);
        }
        for (std::size_t m = 0; m < series.drivers(); ++m) {
            out << ",";
            if (series.X_missing[m][t]) {
                out << "NaN";
            } else {
                out << csv::g17(series.X[m][t]);
            }
        }
        out << "\n";
    }
    if (!out.good()) throw DataError("write_csv: write to '" + path + "' failed");
}

}  // namespace exotst
