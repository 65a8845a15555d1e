#pragma once

#include <map>

#include <Eigen/Cholesky>
#include <Eigen/QR>

#include "evcs.hpp"
#include "feeder.hpp"
#include "linear_model.hpp"

namespace evreg {

struct NoiseConfig {
    double pmu_v_sigma = 0.01;
    double pmu_theta_sigma = 0.005;
    double pseudo_sigma = 0.3;        // forecast-grade entries
    double forecast_sigma = 0.02;     // slot-ahead injection forecasts (pu)
    double count_sigma = 1.0;         // delivered counter readings, in EVs
    double pseudo_count_sigma = 3.0;  // chain-extrapolated counts
    double split_sigma = 1.0;         // load-split consistency rows, in EVs
    double tau = 0.05;                // BDD false-alarm budget

    void validate() const {
        for (double s : {pmu_v_sigma, pmu_theta_sigma, pseudo_sigma, forecast_sigma,
                         count_sigma, pseudo_count_sigma, split_sigma})
            if (s <= 0.0) throw config_error("noise: sigmas must be positive");
        if (!(tau > 0.0 && tau < 1.0)) throw config_error("noise: tau outside (0,1)");
    }
};

// Augmented state split into named blocks. Capacities are magnitudes.
struct StateVector {
    Vec p, q;             // length N-1, nodal injections (pu)
    Vec p_down, p_up;     // length E, station regulation capacities (pu)

    Vec flat() const {
        Vec x(p.size() + q.size() + p_down.size() + p_up.size());
        x << p, q, p_down, p_up;
        return x;
    }
};

inline StateVector split_state(const Vec& x, int n_bus, int n_station) {
    const int nb = n_bus - 1;
    if (x.size() != 2 * nb + 2 * n_station)
        throw numeric_error("split_state: state length mismatch");
    StateVector s;
    s.p = x.segment(0, nb);
    s.q = x.segment(nb, nb);
    s.p_down = x.segment(2 * nb, n_station);
    s.p_up = x.segment(2 * nb + n_station, n_station);
    return s;
}

// A communication-backed sensor and the measurement rows it feeds. PMU
// sensors carry a voltage and an angle row; counter sensors one count row.
struct ChannelSensor {
    bool is_pmu = true;
    int bus = 0;      // feeder bus index
    int station = 0;  // station index for counters
    std::vector<int> rows;
};

// Linear measurement model z = H x + h0 + e for the augmented state
// x = [P, Q, P_down, P_up] (pu). Rows, in order:
//   v at every non-slack bus        (PMU-backed where placed, else forecast)
//   theta at every non-slack bus    (same split)
//   one count row per station       (counter-backed)
//   one load-split row per station  (forecast-backed)
//   injection forecasts P, Q        (forecast-backed)
// The forecast rows give the redundancy the residual test needs and keep
// the capacity states observable: the count row fixes one direction of
// (P_down, P_up) through the inverse capacity map, the split row the other
// jointly with the bus injection.
class MeasurementModel {
   public:
    int n_bus = 0;
    int n_station = 0;
    int n_state = 0;
    int n_meas = 0;
    int dof = 0;
    Mat h;
    Vec h0;
    Vec sigma_realtime;  // per-row sigma with every channel sensor delivering
    std::vector<ChannelSensor> sensors;
    NoiseConfig noise;
    double epsilon = 0.0;
    Mat omega;  // all-delivered estimation matrix, kept for analysis
    double kw_scale = 0.0;  // kW per pu
    size_t mask_cache_limit = 1024;  // factorizations kept before eviction

    // per-station pieces used when assembling z
    std::vector<double> mean_charge_power_kw;
    std::vector<int> station_bus;

    // state indexing
    int p_col(int bus) const { return bus - 1; }
    int q_col(int bus) const { return n_bus - 1 + bus - 1; }
    int pdown_col(int e) const { return 2 * (n_bus - 1) + e; }
    int pup_col(int e) const { return 2 * (n_bus - 1) + n_station + e; }

    // measurement indexing
    int v_row(int bus) const { return bus - 1; }
    int theta_row(int bus) const { return n_bus - 1 + bus - 1; }
    int count_row(int e) const { return 2 * (n_bus - 1) + e; }
    int split_row(int e) const { return 2 * (n_bus - 1) + n_station + e; }
    int p_row(int bus) const { return 2 * (n_bus - 1) + 2 * n_station + bus - 1; }
    int q_row(int bus) const { return 3 * (n_bus - 1) + 2 * n_station + bus - 1; }

    uint64_t full_mask() const { return (uint64_t(1) << sensors.size()) - 1; }

    // weights and factorization for one delivery pattern; bit i of the mask
    // is set when sensor i delivered, clear rows fall back to pseudo noise
    struct Masked {
        Vec sigma;
        Vec w;  // 1/sigma^2
        Eigen::LDLT<Mat> factor;
    };

    const Masked& masked(uint64_t mask) const {
        auto it = cache_.find(mask);
        if (it != cache_.end()) return it->second;
        if (cache_.size() >= mask_cache_limit) {
            // drop cold factorizations, keeping the all-delivered base
            auto base = cache_.extract(full_mask());
            cache_.clear();
            if (!base.empty()) cache_.insert(std::move(base));
        }
        Masked mk;
        mk.sigma = sigma_realtime;
        for (size_t s = 0; s < sensors.size(); ++s) {
            if (mask & (uint64_t(1) << s)) continue;
            for (int r : sensors[s].rows)
                mk.sigma(r) = sensors[s].is_pmu ? noise.pseudo_sigma : noise.pseudo_count_sigma;
        }
        mk.w = mk.sigma.cwiseProduct(mk.sigma).cwiseInverse();
        mk.factor = Eigen::LDLT<Mat>(h.transpose() * mk.w.asDiagonal() * h);
        if (mk.factor.info() != Eigen::Success)
            throw numeric_error("measurement model: normal equations not factorizable");
        return cache_.emplace(mask, std::move(mk)).first->second;
    }

    Vec estimate(const Vec& z, uint64_t mask) const {
        check_dim(z);
        const Masked& mk = masked(mask);
        Vec y = mk.w.cwiseProduct(z - h0);
        return mk.factor.solve(h.transpose() * y);
    }

    struct BddResult {
        bool pass = false;
        Vec residual;   // raw units
        double norm = 0.0;  // noise-whitened 2-norm
    };

    BddResult bdd(const Vec& z, uint64_t mask) const {
        const Masked& mk = masked(mask);
        Vec x = estimate(z, mask);
        BddResult out;
        out.residual = (z - h0) - h * x;
        out.norm = mk.w.cwiseSqrt().cwiseProduct(out.residual).norm();
        out.pass = out.norm <= epsilon;
        return out;
    }

    void check_dim(const Vec& z) const {
        if (z.size() != n_meas)
            throw config_error("measurement vector has " + std::to_string(z.size()) +
                               " rows, model expects " + std::to_string(n_meas));
    }

   private:
    mutable std::map<uint64_t, Masked> cache_;
};

inline MeasurementModel build_measurement_model(const Feeder& f, const LinearPFModel& lin,
                                                const std::vector<CapacityCoefficients>& coeff,
                                                const NoiseConfig& noise) {
    noise.validate();
    const int nb = f.n_bus;
    const int ns = int(f.evcs_buses.size());
    if (int(coeff.size()) != ns)
        throw config_error("measurement model: need one coefficient set per station");
    if (int(f.pmu_buses.size()) + ns > 60)
        throw config_error("measurement model: too many channel sensors for a 64-bit mask");

    MeasurementModel m;
    m.n_bus = nb;
    m.n_station = ns;
    m.n_state = 2 * (nb - 1) + 2 * ns;
    m.n_meas = 4 * (nb - 1) + 2 * ns;
    m.dof = m.n_meas - m.n_state;
    m.noise = noise;
    m.kw_scale = f.base_mva * 1000.0;
    m.station_bus = f.evcs_buses;

    m.h = Mat::Zero(m.n_meas, m.n_state);
    m.h0 = Vec::Zero(m.n_meas);
    m.sigma_realtime = Vec::Constant(m.n_meas, noise.pseudo_sigma);

    // voltage and angle rows at every non-slack bus
    for (int b = 1; b < nb; ++b) {
        int rv = m.v_row(b), rt = m.theta_row(b);
        for (int k = 1; k < nb; ++k) {
            m.h(rv, m.p_col(k)) = lin.s_vp(b - 1, k - 1);
            m.h(rv, m.q_col(k)) = lin.s_vq(b - 1, k - 1);
            m.h(rt, m.p_col(k)) = lin.s_tp(b - 1, k - 1);
            m.h(rt, m.q_col(k)) = lin.s_tq(b - 1, k - 1);
        }
        m.h0(rv) = lin.m_v(b - 1);
        m.h0(rt) = lin.m_theta(b - 1);
    }
    for (int bus : f.pmu_buses) {
        ChannelSensor s;
        s.is_pmu = true;
        s.bus = bus;
        s.rows = {m.v_row(bus), m.theta_row(bus)};
        m.sigma_realtime(s.rows[0]) = noise.pmu_v_sigma;
        m.sigma_realtime(s.rows[1]) = noise.pmu_theta_sigma;
        m.sensors.push_back(std::move(s));
    }

    // count and split rows from the inverse per-station capacity map
    for (int e = 0; e < ns; ++e) {
        const auto& c = coeff[e];
        Eigen::Matrix2d a;
        a << c.p_id, c.p_cd, c.p_iu, c.p_cu;
        double scale = std::max(1.0, a.cwiseAbs().maxCoeff());
        if (std::abs(a.determinant()) <= 1e-9 * scale * scale)
            throw config_error("station " + std::to_string(e) +
                               ": capacity coefficient matrix is singular, counts cannot be "
                               "inverted (strict-mode stations cannot back a count sensor)");
        if (c.mean_power_charging <= 0.0)
            throw config_error("station " + std::to_string(e) + ": zero mean charging power");
        Eigen::Matrix2d ainv = a.inverse();
        Eigen::RowVector2d g_count = Eigen::RowVector2d(1.0, 1.0) * ainv;
        Eigen::RowVector2d g_split = Eigen::RowVector2d(0.0, 1.0) * ainv;
        int bus = f.evcs_buses[e];

        int rc = m.count_row(e);
        m.h(rc, m.pdown_col(e)) = g_count(0) * m.kw_scale;
        m.h(rc, m.pup_col(e)) = g_count(1) * m.kw_scale;
        m.sigma_realtime(rc) = noise.count_sigma;
        ChannelSensor s;
        s.is_pmu = false;
        s.bus = bus;
        s.station = e;
        s.rows = {rc};
        m.sensors.push_back(std::move(s));

        // charging head count from the metered bus load: the EV share of the
        // bus injection divided by the mean charging power must match the
        // split implied by the capacity states
        int rs = m.split_row(e);
        m.h(rs, m.p_col(bus)) = m.kw_scale / c.mean_power_charging;
        m.h(rs, m.pdown_col(e)) = g_split(0) * m.kw_scale;
        m.h(rs, m.pup_col(e)) = g_split(1) * m.kw_scale;
        m.sigma_realtime(rs) = noise.split_sigma;
        m.mean_charge_power_kw.push_back(c.mean_power_charging);
    }

    // injection forecast rows: refreshed each slot from the day-ahead schedule,
    // so they carry far less spread than the stale pseudo entries
    for (int b = 1; b < nb; ++b) {
        m.h(m.p_row(b), m.p_col(b)) = 1.0;
        m.h(m.q_row(b), m.q_col(b)) = 1.0;
        m.sigma_realtime(m.p_row(b)) = noise.forecast_sigma;
        m.sigma_realtime(m.q_row(b)) = noise.forecast_sigma;
    }

    // observability check on the whitened design matrix
    {
        Vec w = m.sigma_realtime.cwiseInverse();
        Mat wh = w.asDiagonal() * m.h;
        Eigen::ColPivHouseholderQR<Mat> qr(wh);
        qr.setThreshold(1e-10);
        if (qr.rank() < m.n_state)
            throw config_error("measurement model rank-deficient: placement leaves " +
                               std::to_string(m.n_state - qr.rank()) + " states unobservable");
    }

    m.epsilon = std::sqrt(chi2_quantile(1.0 - noise.tau, m.dof));

    const auto& base = m.masked(m.full_mask());
    m.omega = base.factor.solve(m.h.transpose() * base.w.asDiagonal());
    return m;
}

inline Vec wls_estimate(const MeasurementModel& m, const Vec& z) {
    return m.estimate(z, m.full_mask());
}

inline MeasurementModel::BddResult bdd_check(const MeasurementModel& m, const Vec& z) {
    return m.bdd(z, m.full_mask());
}

}  // namespace evreg
