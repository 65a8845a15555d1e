#pragma once

#include <numeric>

#include "common.hpp"

namespace evreg {

// Discrete distribution over positive levels (charger powers in kW,
// battery sizes in kWh).
struct LevelPmf {
    std::vector<double> level;
    std::vector<double> prob;

    void validate(const char* name) const {
        if (level.empty() || level.size() != prob.size())
            throw config_error(std::string(name) + ": empty or mismatched pmf");
        double s = 0.0;
        for (size_t i = 0; i < level.size(); ++i) {
            if (level[i] <= 0.0) throw config_error(std::string(name) + ": level must be positive");
            if (prob[i] < 0.0) throw config_error(std::string(name) + ": negative probability");
            s += prob[i];
        }
        if (std::abs(s - 1.0) > 1e-9)
            throw config_error(std::string(name) + ": probabilities sum to " + std::to_string(s));
    }

    double mean() const {
        double m = 0.0;
        for (size_t i = 0; i < level.size(); ++i) m += level[i] * prob[i];
        return m;
    }

    static LevelPmf uniform_range(double lo, double hi, double step = 1.0) {
        LevelPmf p;
        for (double v = lo; v <= hi + 1e-9; v += step) p.level.push_back(v);
        p.prob.assign(p.level.size(), 1.0 / double(p.level.size()));
        return p;
    }
};

// Initial state-of-charge distribution, uniform or beta-shaped on [lo, hi].
struct SocDist {
    enum class Kind { uniform, beta };
    Kind kind = Kind::uniform;
    double lo = 0.3, hi = 0.8;
    double a = 2.0, b = 2.0;  // beta shape parameters

    void validate() const {
        if (!(lo >= 0.0 && hi <= 1.0 && lo < hi)) throw config_error("init_soc: need 0 <= lo < hi <= 1");
        if (kind == Kind::beta && (a <= 0.0 || b <= 0.0))
            throw config_error("init_soc: beta shapes must be positive");
    }

    // cell midpoints/probabilities on a fixed grid
    void discretize(int cells, std::vector<double>& mid, std::vector<double>& pr) const {
        mid.resize(cells);
        pr.resize(cells);
        double total = 0.0;
        for (int i = 0; i < cells; ++i) {
            double x0 = double(i) / cells, x1 = double(i + 1) / cells;
            mid[i] = lo + (hi - lo) * 0.5 * (x0 + x1);
            double w = 1.0;
            if (kind == Kind::beta) {
                double xm = 0.5 * (x0 + x1);
                w = std::pow(xm, a - 1.0) * std::pow(1.0 - xm, b - 1.0);
            }
            pr[i] = w;
            total += w;
        }
        for (auto& p : pr) p /= total;
    }

    double sample(Rng& rng) const {
        if (kind == Kind::uniform) return rng.uniform(lo, hi);
        // beta via two gammas is overkill here; rejection against the mode works
        // for the moderate shapes used in configs
        double peak = 1.0;
        double mode_x = (a > 1 && b > 1) ? (a - 1) / (a + b - 2) : 0.5;
        peak = std::pow(mode_x, a - 1.0) * std::pow(1.0 - mode_x, b - 1.0);
        for (int i = 0; i < 10000; ++i) {
            double x = rng.uniform();
            double w = std::pow(x, a - 1.0) * std::pow(1.0 - x, b - 1.0);
            if (rng.uniform() * peak <= w) return lo + (hi - lo) * x;
        }
        return lo + (hi - lo) * 0.5;
    }
};

// Lognormal parking duration in hours.
struct ParkingDist {
    double mu_log = 0.6848;
    double sigma_log = 0.9353;

    void validate() const {
        if (sigma_log <= 0.0) throw config_error("parking: sigma_log must be positive");
    }
    double cdf(double hours) const {
        if (hours <= 0.0) return 0.0;
        return 0.5 * std::erfc(-(std::log(hours) - mu_log) / (sigma_log * std::sqrt(2.0)));
    }
    double sample(Rng& rng) const { return std::exp(rng.normal(mu_log, sigma_log)); }
};

enum class VrMode { strict, flexible };

struct StationConfig {
    int stalls = 50;
    double lambda_per_hour = 10.0;  // arrival rate
    double mu_per_hour = 0.33;      // departure rate of the counting model
    int subslots_per_slot = 10;
    double slot_minutes = 10.0;
    LevelPmf power;    // charger power levels, kW
    LevelPmf battery;  // battery sizes, kWh
    SocDist init_soc;
    ParkingDist parking;
    double target_soc = 0.9;
    VrMode mode = VrMode::flexible;
    double power_cap_kw = 0.0;  // 0 = uncapped

    int soc_cells = 64;           // discretization for closed-form sums
    double parking_tail_eps = 1e-6;

    double dt_hours() const { return slot_minutes / 60.0; }
    double subslot_hours() const { return dt_hours() / subslots_per_slot; }

    void validate() const {
        if (stalls < 1) throw config_error("station: stalls must be >= 1");
        if (lambda_per_hour < 0 || mu_per_hour < 0)
            throw config_error("station: rates must be nonnegative");
        if (subslots_per_slot < 1) throw config_error("station: subslots_per_slot must be >= 1");
        if (slot_minutes <= 0) throw config_error("station: slot_minutes must be positive");
        power.validate("station power pmf");
        battery.validate("station battery pmf");
        init_soc.validate();
        parking.validate();
        if (!(target_soc > 0.0 && target_soc <= 1.0))
            throw config_error("station: target_soc outside (0,1]");
        if (power_cap_kw < 0.0) throw config_error("station: power_cap_kw negative");
    }

    // parking duration pmf on the slot grid; slot s covers ((s-1)dt, s dt]
    std::vector<double> parking_slot_pmf() const {
        std::vector<double> pmf;
        double dt = dt_hours();
        double covered = 0.0;
        for (int s = 1; s < 100000; ++s) {
            double m = parking.cdf(s * dt) - parking.cdf((s - 1) * dt);
            pmf.push_back(m);
            covered = parking.cdf(s * dt);
            if (1.0 - covered < parking_tail_eps && s * dt > 1.0) break;
        }
        pmf.back() += 1.0 - covered;  // fold the far tail into the last cell
        return pmf;
    }
};

// Conditional per-EV regulation capacity expectations, kW. The i-prefix is
// the idle class, c-prefix the charging class.
struct CapacityCoefficients {
    double p_id = 0.0;  // idle, down
    double p_cd = 0.0;  // charging, down
    double p_iu = 0.0;  // idle, up
    double p_cu = 0.0;  // charging, up

    double prob_charging = 0.0;       // P(charging | present)
    double mean_power_charging = 0.0; // E[charger power | charging], kW
};

// --- per-EV slot arithmetic -------------------------------------------------

// Slots needed to reach the target SOC; 0 if already there.
inline int charge_time(double s_i, double s_t, double e_b_kwh, double p_c_kw, double dt_hours) {
    if (!(s_i >= 0.0 && s_i <= 1.0 && s_t >= 0.0 && s_t <= 1.0))
        throw config_error("charge_time: SOC outside [0,1]");
    if (e_b_kwh <= 0.0 || p_c_kw <= 0.0 || dt_hours <= 0.0)
        throw config_error("charge_time: battery, power and slot length must be positive");
    if (s_i >= s_t) return 0;
    double hours = (s_t - s_i) * e_b_kwh / p_c_kw;
    return int(std::ceil(hours / dt_hours - 1e-12));
}

// Half the idle window rounded down: discharge slots must leave room to
// recharge before departure.
inline int vr_slots(int t_p, int t_c) {
    if (t_p < 0 || t_c < 0) throw config_error("vr_slots: negative slot count");
    return t_c < t_p ? (t_p - t_c) / 2 : 0;
}

// --- arrival/departure counting chain ----------------------------------------

// One sub-slot transition pmf from count n: at most one arrival opportunity
// (prob q_a) and n independent departure opportunities (prob q_d each).
// Support {0, ..., n+1}; index j corresponds to next count j.
inline std::vector<double> count_transition_pmf(int n, const StationConfig& cfg, double tau_s_hours) {
    if (n < 0 || n > cfg.stalls) throw config_error("count pmf: count outside [0, stalls]");
    double q_a = cfg.lambda_per_hour * tau_s_hours;
    double q_d = cfg.mu_per_hour * tau_s_hours;
    if (q_a < 0.0 || q_a > 1.0 || q_d < 0.0 || q_d > 1.0)
        throw config_error("count pmf: case probability outside [0,1]; shrink the sub-slot");
    if (n == cfg.stalls) q_a = 0.0;  // full station rejects the arrival

    auto comb = [](int nn, int kk) -> double {
        if (kk < 0 || kk > nn) return 0.0;
        double r = 1.0;
        for (int i = 1; i <= kk; ++i) r = r * double(nn - kk + i) / double(i);
        return r;
    };

    std::vector<double> pmf(n + 2, 0.0);
    pmf[n + 1] = q_a * std::pow(1.0 - q_d, n);        // arrival, none leave
    pmf[0] = (1.0 - q_a) * std::pow(q_d, n);          // no arrival, all n leave
    for (int i = -n + 1; i <= 0; ++i) {
        // net change i: either no arrival and -i departures, or one arrival
        // and 1-i departures
        double term = comb(n, -i) * (1.0 - q_a) * std::pow(q_d, -i) * std::pow(1.0 - q_d, n + i) +
                      comb(n, 1 - i) * q_a * std::pow(q_d, 1 - i) * std::pow(1.0 - q_d, n + i - 1);
        pmf[n + i] = term;
    }

    double s = std::accumulate(pmf.begin(), pmf.end(), 0.0);
    if (s <= 0.0) throw numeric_error("count pmf: degenerate distribution");
    for (auto& v : pmf) v /= s;
    return pmf;
}

// Row-stochastic sub-slot transition matrix over counts 0..stalls.
inline Mat count_transition_matrix(const StationConfig& cfg, double tau_s_hours) {
    const int m = cfg.stalls + 1;
    Mat t = Mat::Zero(m, m);
    for (int n = 0; n < m; ++n) {
        auto pmf = count_transition_pmf(n, cfg, tau_s_hours);
        for (int j = 0; j < int(pmf.size()) && j < m; ++j) t(n, j) = pmf[j];
        // mass that would exceed the stall count cannot occur by construction
    }
    return t;
}

// Most likely count after `slots_elapsed` DSSE slots without a report.
// Each slot is subslots_per_slot chain steps. Ties prefer the smaller count.
inline int pseudo_count(int n_prev, const StationConfig& cfg, int slots_elapsed) {
    if (n_prev < 0 || n_prev > cfg.stalls) throw config_error("pseudo_count: count out of range");
    if (slots_elapsed < 0) throw config_error("pseudo_count: negative elapsed time");
    if (slots_elapsed == 0) return n_prev;
    Mat t = count_transition_matrix(cfg, cfg.subslot_hours());
    int steps = slots_elapsed * cfg.subslots_per_slot;
    Vec row = Vec::Zero(cfg.stalls + 1);
    row(n_prev) = 1.0;
    // row * T^steps by squaring on the matrix, steps are small (<= ~1e4)
    Mat power = t;
    Vec acc = row;
    int k = steps;
    while (k > 0) {
        if (k & 1) acc = (acc.transpose() * power).transpose();
        power = power * power;
        k >>= 1;
    }
    int best = 0;
    double bestp = -1.0;
    for (int j = 0; j <= cfg.stalls; ++j)
        if (acc(j) > bestp + 1e-15) {
            bestp = acc(j);
            best = j;
        }
    return best;
}

// --- charging time distribution ----------------------------------------------

// Distribution of the effective charging duration in slots. pmf[s] holds the
// untruncated mass (EVs that finish before leaving); EVs whose stay ends
// first charge for their whole stay, collected in truncated_mass.
struct ChargingTimePdf {
    std::vector<double> pmf;
    double truncated_mass = 0.0;

    double total() const { return std::accumulate(pmf.begin(), pmf.end(), truncated_mass); }
};

namespace detail {

// Enumerate the discretized EV attribute grid: (battery, power, soc cell,
// parking slot) with joint probability and derived slot quantities.
template <typename F>
inline void for_each_ev_cell(const StationConfig& cfg, F&& fn) {
    std::vector<double> soc_mid, soc_pr;
    cfg.init_soc.discretize(cfg.soc_cells, soc_mid, soc_pr);
    auto park = cfg.parking_slot_pmf();
    double dt = cfg.dt_hours();
    for (size_t bi = 0; bi < cfg.battery.level.size(); ++bi)
        for (size_t pi = 0; pi < cfg.power.level.size(); ++pi)
            for (int si = 0; si < cfg.soc_cells; ++si) {
                double w_attr = cfg.battery.prob[bi] * cfg.power.prob[pi] * soc_pr[si];
                if (w_attr <= 0.0) continue;
                int tc = charge_time(soc_mid[si], cfg.target_soc, cfg.battery.level[bi],
                                     cfg.power.level[pi], dt);
                for (size_t tp1 = 0; tp1 < park.size(); ++tp1) {
                    int tp = int(tp1) + 1;
                    double w = w_attr * park[tp1];
                    if (w <= 0.0) continue;
                    fn(w, cfg.power.level[pi], soc_mid[si], cfg.battery.level[bi], tc, tp);
                }
            }
}

}  // namespace detail

inline ChargingTimePdf charging_time_pdf(const StationConfig& cfg) {
    cfg.power.validate("station power pmf");
    cfg.parking.validate();
    ChargingTimePdf out;
    detail::for_each_ev_cell(cfg, [&](double w, double, double, double, int tc, int tp) {
        if (tc > tp) {
            out.truncated_mass += w;  // departs mid-charge
        } else {
            if (int(out.pmf.size()) <= tc) out.pmf.resize(tc + 1, 0.0);
            out.pmf[tc] += w;
        }
    });
    double t = out.total();
    if (std::abs(t - 1.0) > 1e-6)
        throw numeric_error("charging_time_pdf: mass " + std::to_string(t) + " != 1");
    return out;
}

// --- capacity coefficients ----------------------------------------------------

// Closed-form conditional expectations over the population of present EVs.
// An EV present with elapsed time u (slots since arrival, 0-based) is
// charging while u < min(tc, tp) and idle for the remaining tp - tc slots.
// While idle it offers up-regulation for its first tv slots (enough stay
// left to recharge what it discharges), then down-regulation while one slot
// of charge still fits under the target, measured against the arrival SOC.
// A charging EV offers nothing in strict mode; in flexible mode it may
// pause and discharge, worth 2x its charger power, whenever tv > 0.
//
// By default the elapsed time is marginalized over the stationary
// distribution implied by Poisson arrivals, which is uniform over each
// EV's own stay; the conditional means then reduce to slot-count weighted
// sums over the attribute grid. An explicit pmf over elapsed slots
// replaces that marginal when supplied.
inline CapacityCoefficients capacity_coefficients(const StationConfig& cfg,
                                                  const std::vector<double>& elapsed_pmf = {}) {
    cfg.validate();
    double t_charge = 0.0, t_idle = 0.0;
    double up_idle = 0.0, down_idle = 0.0, up_charge = 0.0, power_charge = 0.0;
    double dt = cfg.dt_hours();
    detail::for_each_ev_cell(cfg, [&](double w, double p_c, double soc, double e_b, int tc, int tp) {
        int charging_slots = std::min(tc, tp);
        int idle_slots = std::max(tp - tc, 0);
        int tv = vr_slots(tp, tc);
        bool down_ok = soc + p_c * dt / e_b <= cfg.target_soc + 1e-12;
        bool flex_up = cfg.mode == VrMode::flexible && tv > 0;
        if (elapsed_pmf.empty()) {
            t_charge += w * charging_slots;
            t_idle += w * idle_slots;
            power_charge += w * charging_slots * p_c;
            up_idle += w * tv * p_c;
            if (down_ok) down_idle += w * (idle_slots - tv) * p_c;
            if (flex_up) up_charge += w * charging_slots * 2.0 * p_c;
        } else {
            for (int u = 0; u < int(elapsed_pmf.size()) && u < tp; ++u) {
                double wu = w * elapsed_pmf[u];
                if (wu <= 0.0) continue;
                if (u < charging_slots) {
                    t_charge += wu;
                    power_charge += wu * p_c;
                    if (flex_up) up_charge += wu * 2.0 * p_c;
                } else {
                    t_idle += wu;
                    if (u - charging_slots < tv) up_idle += wu * p_c;
                    else if (down_ok) down_idle += wu * p_c;
                }
            }
        }
    });

    CapacityCoefficients c;
    double present = t_charge + t_idle;
    if (present <= 0.0) throw numeric_error("capacity_coefficients: no presence mass");
    c.prob_charging = t_charge / present;
    c.mean_power_charging = t_charge > 0.0 ? power_charge / t_charge : cfg.power.mean();
    if (t_idle > 0.0) {
        c.p_id = down_idle / t_idle;
        c.p_iu = up_idle / t_idle;
    }
    if (cfg.mode == VrMode::flexible && t_charge > 0.0) c.p_cu = up_charge / t_charge;
    c.p_cd = 0.0;
    return c;
}

// Split a station's metered load into expected charging/idle head counts.
// Fractional values are intentional: these are expectations, rounding them
// would bias the capacity estimate.
inline std::pair<double, double> split_counts(double station_load_kw, double c_total,
                                              const CapacityCoefficients& coeff) {
    if (coeff.mean_power_charging <= 0.0)
        throw config_error("split_counts: mean charging power must be positive");
    if (c_total < 0.0) throw config_error("split_counts: negative count");
    double c_charging = station_load_kw / coeff.mean_power_charging;
    c_charging = std::clamp(c_charging, 0.0, c_total);
    return {c_charging, c_total - c_charging};
}

// Station-level regulation capacities: per-stall coefficients scaled by the
// charging/idle class counts; returns kW.
inline std::pair<double, double> station_capacity(const CapacityCoefficients& coeff,
                                                  double c_charging, double c_idle) {
    if (c_charging < -1e-9 || c_idle < -1e-9)
        throw config_error("station_capacity: negative class count");
    double p_down = coeff.p_id * c_idle + coeff.p_cd * c_charging;
    double p_up = coeff.p_iu * c_idle + coeff.p_cu * c_charging;
    return {std::max(p_down, 0.0), std::max(p_up, 0.0)};
}

}  // namespace evreg
