#pragma once

// Cosine log-SNR schedule with per-level shifts. Levels are numbered from the
// lowest resolution upward: level 0 is the unshifted base resolution.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace layerdiff {

inline constexpr double kScheduleTMin = 1e-5;
inline constexpr double kScheduleTMax = 1.0 - 1e-5;

struct SchedulePoint {
    double t = 0;
    int level = 0;
    double lambda = 0;
    double alpha = 0;
    double sigma = 0;
};

/// lambda_i(t) = lambda(t) + multiplier * ln(s_i).
struct ShiftConfig {
    std::vector<double> shifts{1.0};
    double multiplier = 2.0;

    void validate() const {
        if (shifts.empty()) throw std::invalid_argument("shift config: at least one level required");
        if (shifts[0] != 1.0) throw std::invalid_argument("shift config: level 0 shift must be 1");
        for (std::size_t i = 0; i < shifts.size(); ++i) {
            if (!(shifts[i] > 0.0 && shifts[i] <= 1.0)) {
                throw std::invalid_argument("shift config: shift " + std::to_string(i) + " must lie in (0, 1]");
            }
            if (i > 0 && shifts[i] > shifts[i - 1]) {
                throw std::invalid_argument("shift config: shifts must be non-increasing with resolution");
            }
        }
        if (!(multiplier > 0.0)) throw std::invalid_argument("shift config: multiplier must be positive");
    }

    /// Defaults: no shift at the base, 1/8 one level up, 1/32 two levels up.
    static ShiftConfig defaults(int num_levels) {
        static const double table[] = {1.0, 1.0 / 8.0, 1.0 / 32.0};
        ShiftConfig cfg;
        cfg.shifts.clear();
        for (int i = 0; i < num_levels; ++i) {
            cfg.shifts.push_back(i < 3 ? table[i] : cfg.shifts.back() / 4.0);
        }
        return cfg;
    }
};

inline double sigmoid(double x) {
    return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

/// lambda(t) = -2 ln tan(pi t / 2); t is clamped to [1e-5, 1 - 1e-5].
inline double cosine_logsnr(double t) {
    if (!(t >= 0.0 && t <= 1.0)) throw std::domain_error("cosine_logsnr: t must lie in [0, 1]");
    t = std::clamp(t, kScheduleTMin, kScheduleTMax);
    return -2.0 * std::log(std::tan(std::numbers::pi * t / 2.0));
}

inline SchedulePoint point_from_logsnr(double t, int level, double lambda) {
    return SchedulePoint{t, level, lambda, std::sqrt(sigmoid(lambda)), std::sqrt(sigmoid(-lambda))};
}

inline SchedulePoint shifted_point(double t, int level, const ShiftConfig& cfg) {
    if (level < 0 || level >= static_cast<int>(cfg.shifts.size())) {
        throw std::out_of_range("shifted_point: unknown level " + std::to_string(level));
    }
    double lambda = cosine_logsnr(t);
    const double s = cfg.shifts[static_cast<std::size_t>(level)];
    if (s != 1.0) lambda += cfg.multiplier * std::log(s);
    return point_from_logsnr(t, level, lambda);
}

/// table[level][step], t increasing uniformly over [1e-5, 1 - 1e-5].
using ScheduleTable = std::vector<std::vector<SchedulePoint>>;

inline ScheduleTable schedule_table(int num_steps, const ShiftConfig& cfg) {
    if (num_steps < 2) throw std::invalid_argument("schedule_table: num_steps must be >= 2");
    ScheduleTable table(cfg.shifts.size());
    for (int step = 0; step < num_steps; ++step) {
        const double t = kScheduleTMin + (kScheduleTMax - kScheduleTMin) * step / (num_steps - 1);
        for (std::size_t lv = 0; lv < cfg.shifts.size(); ++lv) {
            table[lv].push_back(shifted_point(t, static_cast<int>(lv), cfg));
        }
    }
    return table;
}

inline std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

/// CSV columns: step,t,level,lambda,alpha,sigma; one row per (step, level).
inline void write_schedule_csv(std::ostream& os, const ScheduleTable& table) {
    os << "step,t,level,lambda,alpha,sigma\n";
    if (table.empty()) return;
    for (std::size_t step = 0; step < table[0].size(); ++step) {
        for (std::size_t lv = 0; lv < table.size(); ++lv) {
            const auto& p = table[lv][step];
            os << step << ',' << format_double(p.t) << ',' << p.level << ',' << format_double(p.lambda) << ','
               << format_double(p.alpha) << ',' << format_double(p.sigma) << '\n';
        }
    }
}

inline ScheduleTable read_schedule_csv(std::istream& is) {
    std::string line;
    if (!std::getline(is, line) || line != "step,t,level,lambda,alpha,sigma") {
        throw std::runtime_error("schedule csv: missing or unexpected header");
    }
    ScheduleTable table;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::istringstream row(line);
        std::string field;
        std::vector<std::string> f;
        while (std::getline(row, field, ',')) f.push_back(field);
        if (f.size() != 6) throw std::runtime_error("schedule csv: expected 6 columns in '" + line + "'");
        const auto step = std::stoul(f[0]);
        const int level = std::stoi(f[2]);
        if (level < 0) throw std::runtime_error("schedule csv: negative level");
        if (table.size() <= static_cast<std::size_t>(level)) table.resize(static_cast<std::size_t>(level) + 1);
        auto& col = table[static_cast<std::size_t>(level)];
        if (col.size() != step) throw std::runtime_error("schedule csv: rows out of order");
        col.push_back(SchedulePoint{std::stod(f[1]), level, std::stod(f[3]), std::stod(f[4]), std::stod(f[5])});
    }
    return table;
}

}  // namespace layerdiff
