#pragma once

#include "ac_power_flow.hpp"
#include "measurement.hpp"

namespace evreg {

// Sign convention: up-regulation increases net injection (voltage support),
// down-regulation increases net consumption. Station setpoint changes are
// bounded by the capacities the operator believes in, [-p_down, +p_up].
struct VrLimits {
    double v_ref = 1.0;
    double v_min = 0.95;
    double v_max = 1.05;
    double backup_capacity_pu = 0.0;
    double backup_guard = 0.01;  // band above v_min the operator defends with the backup
    int backup_bus = 0;          // internal bus index; 0 (the slack) disables backup

    void validate(int n_bus) const {
        if (!(v_min < v_ref && v_ref < v_max))
            throw config_error("vr limits: need v_min < v_ref < v_max");
        if (backup_capacity_pu < 0.0) throw config_error("vr limits: negative backup capacity");
        if (backup_guard < 0.0) throw config_error("vr limits: negative backup guard band");
        if (backup_bus < 0 || backup_bus >= n_bus)
            throw config_error("vr limits: backup bus out of range");
    }
};

struct VrRequest {
    Vec station_delta;           // setpoint change per station (pu)
    double backup_delta = 0.0;   // injection change at the backup bus (pu)
    double band_violation = 0.0; // residual [v_min, v_max] excess at the linear prediction
    double objective = 0.0;      // mean squared deviation from v_ref at the prediction
};

struct VrOutcome {
    VoltageProfile voltages;          // AC solution under delivered power
    Vec delivered;                    // station setpoint change actually realized (pu)
    std::vector<int> undervoltage_buses;
    double min_voltage = 0.0;
};

namespace detail {

inline void check_bus_sets(const LinearPFModel& lin, const std::vector<int>& stations,
                           const std::vector<int>& monitored) {
    for (int b : stations)
        if (b < 1 || b >= lin.n) throw config_error("regulation: station bus out of range");
    for (int b : monitored)
        if (b < 1 || b >= lin.n) throw config_error("regulation: monitored bus out of range");
}

}  // namespace detail

// Aggregate voltage headroom: the total rise at the monitored buses if every
// station delivered its full up-capacity, through the linear sensitivities.
inline double capacity_metric(const StateVector& x, const LinearPFModel& lin,
                              const std::vector<int>& station_buses,
                              const std::vector<int>& monitored) {
    detail::check_bus_sets(lin, station_buses, monitored);
    if (int(station_buses.size()) != x.p_up.size())
        throw config_error("capacity_metric: station count mismatch");
    double dv = 0.0;
    for (int n : monitored)
        for (size_t e = 0; e < station_buses.size(); ++e)
            dv += lin.s_vp(n - 1, station_buses[e] - 1) * x.p_up(int(e));
    return dv;
}

// The same functional as a row over the flat state [P, Q, P_down, P_up]:
// capacity_metric(x) == capacity_row(...) . x.flat()
inline Vec capacity_row(const LinearPFModel& lin, const std::vector<int>& station_buses,
                        const std::vector<int>& monitored) {
    detail::check_bus_sets(lin, station_buses, monitored);
    const int nb = lin.n;
    const int ns = int(station_buses.size());
    Vec row = Vec::Zero(2 * (nb - 1) + 2 * ns);
    for (int e = 0; e < ns; ++e) {
        double sum = 0.0;
        for (int n : monitored) sum += lin.s_vp(n - 1, station_buses[e] - 1);
        row(2 * (nb - 1) + ns + e) = sum;
    }
    return row;
}

namespace detail {

// Exact box-constrained least squares, min ‖r − S d‖² over lo ≤ d ≤ hi, by
// enumerating active-set assignments (each variable at lower, upper, or
// free). The optimal assignment reproduces its own solution, so the best
// feasible candidate is the exact optimum.
inline Vec box_least_squares(const Mat& s, const Vec& r, const Vec& lo, const Vec& hi) {
    const int e = int(s.cols());
    Mat a = s.transpose() * s;
    Vec b = s.transpose() * r;

    auto objective = [&](const Vec& d) { return (r - s * d).squaredNorm(); };

    Vec best = lo;  // all-lower is always feasible
    double best_f = objective(best);

    std::vector<int> code(e, 0);  // 0 lower, 1 upper, 2 free
    long total = 1;
    for (int i = 0; i < e; ++i) total *= 3;
    for (long cfg = 1; cfg < total; ++cfg) {
        long c = cfg;
        for (int i = 0; i < e; ++i) {
            code[i] = int(c % 3);
            c /= 3;
        }
        std::vector<int> free_idx;
        Vec d(e);
        for (int i = 0; i < e; ++i) {
            if (code[i] == 0) d(i) = lo(i);
            else if (code[i] == 1) d(i) = hi(i);
            else free_idx.push_back(i);
        }
        if (!free_idx.empty()) {
            const int nf = int(free_idx.size());
            Mat aff(nf, nf);
            Vec rhs(nf);
            for (int i = 0; i < nf; ++i) {
                rhs(i) = b(free_idx[i]);
                for (int k = 0; k < e; ++k)
                    if (code[k] != 2) rhs(i) -= a(free_idx[i], k) * d(k);
                for (int j = 0; j < nf; ++j) aff(i, j) = a(free_idx[i], free_idx[j]);
            }
            Eigen::LDLT<Mat> ldlt(aff);
            Vec df = ldlt.solve(rhs);
            if (ldlt.info() != Eigen::Success || !df.allFinite()) continue;
            if ((aff * df - rhs).norm() > 1e-8 * std::max(1.0, rhs.norm())) continue;
            bool inside = true;
            for (int i = 0; i < nf; ++i) {
                d(free_idx[i]) = df(i);
                if (df(i) < lo(free_idx[i]) - 1e-12 || df(i) > hi(free_idx[i]) + 1e-12)
                    inside = false;
            }
            if (!inside) continue;
            for (int i = 0; i < nf; ++i)
                d(free_idx[i]) = std::clamp(d(free_idx[i]), lo(free_idx[i]), hi(free_idx[i]));
        }
        double f = objective(d);
        if (f < best_f) {
            best_f = f;
            best = d;
        }
    }
    return best;
}

// Projected gradient for station counts too large to enumerate.
inline Vec box_least_squares_pg(const Mat& s, const Vec& r, const Vec& lo, const Vec& hi) {
    Mat a = s.transpose() * s;
    Vec b = s.transpose() * r;
    double step = 1.0 / std::max(a.norm(), 1e-12);
    Vec d = Vec::Zero(s.cols());
    for (int it = 0; it < 500000; ++it) {
        Vec g = a * d - b;
        Vec next = (d - step * g).cwiseMax(lo).cwiseMin(hi);
        double move = (next - d).norm();
        d = next;
        if (move < 1e-14) break;
    }
    return d;
}

}  // namespace detail

// Quadratic-program dispatch: choose station setpoint changes minimizing the
// mean squared deviation from v_ref predicted by the linear model, within the
// believed capacities. The backup resource is expensive, so the operator
// commits it only when the believed station headroom (the aggregate rise the
// stations could produce at the monitored buses) cannot cover the believed
// shortfall below v_min plus a guard band; it then picks up the residual.
inline VrRequest dispatch(const VoltageProfile& v_now, const Vec& believed_down,
                          const Vec& believed_up, const LinearPFModel& lin,
                          const std::vector<int>& station_buses,
                          const std::vector<int>& monitor_buses, const VrLimits& lim) {
    const int nb = lin.n;
    lim.validate(nb);
    const int ns = int(station_buses.size());
    detail::check_bus_sets(lin, station_buses, monitor_buses);
    if (believed_down.size() != ns || believed_up.size() != ns)
        throw config_error("dispatch: capacity vector length mismatch");
    if (v_now.v.size() != nb) throw config_error("dispatch: voltage profile length mismatch");

    Vec r(nb - 1);
    for (int n = 1; n < nb; ++n) r(n - 1) = lim.v_ref - v_now.v(n);

    Mat s(nb - 1, ns);
    for (int n = 1; n < nb; ++n)
        for (int e = 0; e < ns; ++e) s(n - 1, e) = lin.s_vp(n - 1, station_buses[e] - 1);

    Vec lo = -believed_down.cwiseMax(0.0);
    Vec hi = believed_up.cwiseMax(0.0);

    VrRequest req;
    req.station_delta = ns <= 12 ? detail::box_least_squares(s, r, lo, hi)
                                 : detail::box_least_squares_pg(s, r, lo, hi);

    Vec resid = r - s * req.station_delta;

    double shortfall = 0.0;
    for (int n : monitor_buses)
        shortfall += std::max(0.0, lim.v_min + lim.backup_guard - v_now.v(n));
    double headroom = 0.0;
    for (int e = 0; e < ns; ++e) {
        double w = 0.0;
        for (int n : monitor_buses) w += lin.s_vp(n - 1, station_buses[e] - 1);
        headroom += w * std::max(believed_up(e), 0.0);
    }

    if (shortfall > 0.0 && headroom < shortfall && lim.backup_bus > 0 &&
        lim.backup_capacity_pu > 0.0) {
        Vec sb(nb - 1);
        for (int n = 1; n < nb; ++n) sb(n - 1) = lin.s_vp(n - 1, lim.backup_bus - 1);
        double denom = sb.squaredNorm();
        if (denom > 0.0)
            req.backup_delta = std::clamp(sb.dot(resid) / denom, -lim.backup_capacity_pu,
                                          lim.backup_capacity_pu);
        resid -= sb * req.backup_delta;
    }

    req.objective = resid.squaredNorm() / double(nb);
    for (int n = 1; n < nb; ++n) {
        double v_pred = lim.v_ref - resid(n - 1);
        req.band_violation = std::max(req.band_violation,
                                      std::max(lim.v_min - v_pred, v_pred - lim.v_max));
    }
    req.band_violation = std::max(req.band_violation, 0.0);
    return req;
}

// Ground truth: clip the request to the capacities actually available, add
// the delivered power to the operating point, and score with the AC solver.
inline VrOutcome apply_request(const VrRequest& req, const Vec& true_down, const Vec& true_up,
                               const Feeder& f, const Vec& p_now, const Vec& q_now,
                               const std::vector<int>& station_buses, const VrLimits& lim) {
    const int ns = int(station_buses.size());
    if (req.station_delta.size() != ns || true_down.size() != ns || true_up.size() != ns)
        throw config_error("apply_request: station vector length mismatch");
    lim.validate(f.n_bus);

    VrOutcome out;
    out.delivered = Vec(ns);
    Vec p = p_now;
    for (int e = 0; e < ns; ++e) {
        out.delivered(e) = std::clamp(req.station_delta(e), -std::max(true_down(e), 0.0),
                                      std::max(true_up(e), 0.0));
        p(station_buses[e]) += out.delivered(e);
    }
    if (lim.backup_bus > 0)
        p(lim.backup_bus) += std::clamp(req.backup_delta, -lim.backup_capacity_pu,
                                        lim.backup_capacity_pu);

    out.voltages = ac_power_flow(f, p, q_now);
    out.min_voltage = std::numeric_limits<double>::infinity();
    for (int n = 1; n < f.n_bus; ++n) {
        out.min_voltage = std::min(out.min_voltage, out.voltages.v(n));
        if (out.voltages.v(n) < lim.v_min) out.undervoltage_buses.push_back(n);
    }
    return out;
}

}  // namespace evreg
