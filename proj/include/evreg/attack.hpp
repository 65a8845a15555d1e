#pragma once

#include <map>
#include <queue>

#include "channel.hpp"
#include "measurement.hpp"
#include "qclp.hpp"

namespace evreg {

// Perturbation on the communication-backed measurements: PMU magnitudes and
// angles (in sensor order) followed by station counts.
struct AttackVector {
    Vec alpha_u;  // length 2U: [v per PMU..., theta per PMU...]
    Vec alpha_e;  // length E: count perturbations

    Vec combined() const {
        Vec a(alpha_u.size() + alpha_e.size());
        a << alpha_u, alpha_e;
        return a;
    }
    double norm() const { return combined().norm(); }
};

// Everything the attacker works with for one slot: the capacity functional
// over states, the estimator, and the measurement pair (true, fallback).
// Mask-keyed caches survive set_measurements, so one instance can serve a
// whole simulation run.
class ImpactModel {
   public:
    const MeasurementModel* model = nullptr;
    Vec v_state;  // capacity functional over the state vector
    Vec v_omega;  // v_state pulled back through the all-delivered estimator
    Vec z;        // measurements as delivered without interference
    Vec z_pseudo; // operator-side fallback for lost sensor rows
    double alpha_max = 0.0;

    std::vector<int> row_of;     // alpha entry -> measurement row
    std::vector<int> sensor_of;  // alpha entry -> sensor index
    int n_pmu = 0;

    static ImpactModel build(const MeasurementModel& m, const Vec& v_state, const Vec& z,
                             const Vec& z_pseudo, double alpha_max = 0.0) {
        ImpactModel im;
        im.model = &m;
        if (v_state.size() != m.n_state)
            throw config_error("impact model: capacity row length mismatch");
        im.v_state = v_state;
        im.v_omega = m.omega.transpose() * v_state;
        im.alpha_max = alpha_max > 0.0 ? alpha_max
                                       : 10.0 * std::max(1.0, z.cwiseAbs().maxCoeff());
        im.set_measurements(z, z_pseudo);

        for (size_t s = 0; s < m.sensors.size(); ++s)
            if (m.sensors[s].is_pmu) {
                im.row_of.push_back(m.sensors[s].rows[0]);
                im.sensor_of.push_back(int(s));
                ++im.n_pmu;
            }
        for (size_t s = 0; s < m.sensors.size(); ++s)
            if (m.sensors[s].is_pmu) {
                im.row_of.push_back(m.sensors[s].rows[1]);
                im.sensor_of.push_back(int(s));
            }
        for (size_t s = 0; s < m.sensors.size(); ++s)
            if (!m.sensors[s].is_pmu) {
                im.row_of.push_back(m.sensors[s].rows[0]);
                im.sensor_of.push_back(int(s));
            }
        return im;
    }

    void set_measurements(const Vec& z_new, const Vec& z_pseudo_new) {
        model->check_dim(z_new);
        model->check_dim(z_pseudo_new);
        z = z_new;
        z_pseudo = z_pseudo_new;
    }

    int n_alpha() const { return int(row_of.size()); }

    AttackVector unpack(const Vec& a) const {
        if (a.size() != n_alpha()) throw config_error("attack vector length mismatch");
        AttackVector v;
        v.alpha_u = a.head(2 * n_pmu);
        v.alpha_e = a.tail(n_alpha() - 2 * n_pmu);
        return v;
    }

    AttackVector zero_attack() const { return unpack(Vec::Zero(n_alpha())); }

    // scatter alpha entries onto measurement rows
    Vec rows_from(const Vec& a) const {
        Vec out = Vec::Zero(model->n_meas);
        for (int j = 0; j < n_alpha(); ++j) out(row_of[j]) += a(j);
        return out;
    }

    // whitened post-estimation residual operator for one delivery pattern
    Vec residual_op(uint64_t mask, const Vec& u) const {
        const auto& mk = model->masked(mask);
        Vec x = mk.factor.solve(model->h.transpose() * mk.w.cwiseProduct(u));
        return mk.w.cwiseSqrt().cwiseProduct(u - model->h * x);
    }

    // sensitivity of the whitened residual to alpha under the pattern;
    // columns of suppressed sensors vanish (their rows read the fallback)
    const Mat& stealth_matrix(uint64_t mask) const {
        auto it = stealth_.find(mask);
        if (it != stealth_.end()) return it->second;
        Mat s = Mat::Zero(model->n_meas, n_alpha());
        Vec unit = Vec::Zero(model->n_meas);
        for (int j = 0; j < n_alpha(); ++j) {
            if (!((mask >> sensor_of[j]) & 1)) continue;
            unit(row_of[j]) = 1.0;
            s.col(j) = residual_op(mask, unit);
            unit(row_of[j]) = 0.0;
        }
        return stealth_.emplace(mask, std::move(s)).first->second;
    }

    // per-pattern impact functional: psi_phi(alpha) = impact_row(mask) . alpha
    const Vec& impact_row(uint64_t mask) const {
        auto it = impact_.find(mask);
        if (it != impact_.end()) return it->second;
        const auto& mk = model->masked(mask);
        Vec y = mk.factor.solve(v_state);
        Vec gw = mk.w.cwiseProduct(model->h * y);
        Vec c(n_alpha());
        for (int j = 0; j < n_alpha(); ++j)
            c(j) = ((mask >> sensor_of[j]) & 1) ? gw(row_of[j]) : 0.0;
        return impact_.emplace(mask, std::move(c)).first->second;
    }

   private:
    mutable std::map<uint64_t, Mat> stealth_;
    mutable std::map<uint64_t, Vec> impact_;
};

// Capacity shift read through the all-delivered estimator, linear in alpha.
inline double impact_ic(const AttackVector& a, const ImpactModel& im) {
    Vec c = a.combined();
    if (c.size() != im.n_alpha()) throw config_error("impact_ic: dimension mismatch");
    double psi = 0.0;
    for (int j = 0; j < im.n_alpha(); ++j) psi += im.v_omega(im.row_of[j]) * c(j);
    return psi;
}

// Entrywise selection: delivered sensors read z (+alpha if attacked), lost
// sensors read the fallback; forecast rows always come from z.
inline Vec realized_measurement(const ImpactModel& im, const Vec& alpha_combined,
                                const CommOutcome& phi) {
    const auto& m = *im.model;
    if (int(phi.phi.size()) != int(m.sensors.size()))
        throw config_error("realized_measurement: outcome length mismatch");
    Vec out = im.z;
    for (size_t s = 0; s < m.sensors.size(); ++s)
        if (!phi.phi[s])
            for (int r : m.sensors[s].rows) out(r) = im.z_pseudo(r);
    for (int j = 0; j < im.n_alpha(); ++j)
        if (phi.phi[im.sensor_of[j]]) out(im.row_of[j]) += alpha_combined(j);
    return out;
}

struct IcResult {
    AttackVector alpha;
    double impact = 0.0;
    bool feasible = false;
};

// Best single-vector attack assuming every packet arrives: maximize the
// estimated-capacity shift subject to passing the residual test at full
// delivery, plus the entrywise magnitude cap.
inline IcResult construct_ic(const ImpactModel& im) {
    const auto& m = *im.model;
    const uint64_t full = m.full_mask();
    IcResult out;
    out.alpha = im.zero_attack();

    Vec c(im.n_alpha());
    for (int j = 0; j < im.n_alpha(); ++j) c(j) = im.v_omega(im.row_of[j]);

    if (c.norm() < 1e-14) {
        out.feasible = m.bdd(im.z, full).pass;
        return out;
    }

    QclpProblem p;
    p.c = c;
    QclpConstraint k;
    k.s = im.stealth_matrix(full);
    k.d = im.residual_op(full, im.z - m.h0);
    k.eps = m.epsilon;
    p.constraints.push_back(std::move(k));
    p.box = im.alpha_max;

    auto sol = qclp_solve(p);
    if (sol.status != QclpStatus::optimal) return out;  // clean slot already flagged
    out.alpha = im.unpack(sol.x);
    out.impact = sol.objective;
    out.feasible = true;
    return out;
}

enum class EtaMode { exhaustive, all_pass, sampled };

struct EtaStrategy {
    EtaMode mode = EtaMode::all_pass;
    int phi_budget = 64;
    long mc_samples = 20000;
};

// Delivery patterns ordered by stationary probability, largest first, via
// k-smallest subset sums over the per-sensor log-odds of deviating from the
// most likely state.
inline std::vector<std::pair<uint64_t, double>> top_outcomes(const ChannelParams& ch, int k) {
    const int n = ch.n_sensors;
    if (n > 60) throw config_error("top_outcomes: too many sensors");
    auto pi = stationary_good(ch);
    uint64_t base = 0;
    std::vector<std::pair<double, int>> cost;  // flip cost, sensor
    for (int i = 0; i < n; ++i) {
        double hi = std::max(pi[i], 1.0 - pi[i]);
        double lo = std::min(pi[i], 1.0 - pi[i]);
        if (pi[i] >= 0.5) base |= (uint64_t(1) << i);
        if (lo > 0.0) cost.push_back({std::log(hi) - std::log(lo), i});
    }
    std::sort(cost.begin(), cost.end());

    struct Node {
        double c;
        uint64_t flips;
        int last;
        bool operator>(const Node& o) const { return c > o.c; }
    };
    std::priority_queue<Node, std::vector<Node>, std::greater<Node>> heap;
    std::vector<std::pair<uint64_t, double>> out;
    auto emit = [&](uint64_t flips) {
        uint64_t mask = base ^ flips;
        out.push_back({mask, outcome_prob(CommOutcome::from_mask(mask, n), ch)});
    };
    emit(0);
    if (!cost.empty())
        heap.push({cost[0].first, uint64_t(1) << cost[0].second, 0});
    while (int(out.size()) < k && !heap.empty()) {
        Node nd = heap.top();
        heap.pop();
        emit(nd.flips);
        if (nd.last + 1 < int(cost.size())) {
            uint64_t bit = uint64_t(1) << cost[nd.last + 1].second;
            heap.push({nd.c + cost[nd.last + 1].first, nd.flips | bit, nd.last + 1});
            uint64_t prev = uint64_t(1) << cost[nd.last].second;
            heap.push({nd.c - cost[nd.last].first + cost[nd.last + 1].first,
                       (nd.flips ^ prev) | bit, nd.last + 1});
        }
    }
    return out;
}

struct ExpectedImpact {
    double psi = 0.0;
    double std_error = 0.0;  // nonzero only for Monte-Carlo evaluation
    double mass = 0.0;       // probability covered by the enumerated patterns
    long outcomes = 0;
};

// Expected capacity shift over delivery patterns: each pattern contributes
// pass-indicator x probability x realized shift. Enumerated modes sum the
// listed patterns; sampled mode averages stationary draws.
inline ExpectedImpact expected_impact(const Vec& alpha_combined, const ImpactModel& im,
                                      const ChannelParams& ch, const EtaStrategy& st,
                                      Rng* rng = nullptr) {
    const auto& m = *im.model;
    const int n_sens = int(m.sensors.size());
    if (ch.n_sensors != n_sens) throw config_error("expected_impact: sensor count mismatch");
    if (alpha_combined.size() != im.n_alpha())
        throw config_error("expected_impact: alpha length mismatch");

    ExpectedImpact out;
    auto contribution = [&](uint64_t mask) {
        Vec za = realized_measurement(im, alpha_combined, CommOutcome::from_mask(mask, n_sens));
        if (!m.bdd(za, mask).pass) return 0.0;
        return im.impact_row(mask).dot(alpha_combined);
    };

    if (st.mode == EtaMode::sampled) {
        if (!rng) throw config_error("expected_impact: sampled mode needs an rng");
        if (st.mc_samples <= 1) throw config_error("expected_impact: mc_samples too small");
        auto pi = stationary_good(ch);
        double sum = 0.0, sumsq = 0.0;
        for (long i = 0; i < st.mc_samples; ++i) {
            uint64_t mask = 0;
            for (int s = 0; s < n_sens; ++s)
                if (rng->bernoulli(pi[s])) mask |= (uint64_t(1) << s);
            double val = contribution(mask);
            sum += val;
            sumsq += val * val;
        }
        double mean = sum / double(st.mc_samples);
        double var = std::max(0.0, sumsq / double(st.mc_samples) - mean * mean);
        out.psi = mean;
        out.std_error = std::sqrt(var / double(st.mc_samples));
        out.mass = 1.0;
        out.outcomes = st.mc_samples;
        return out;
    }

    std::vector<std::pair<uint64_t, double>> patterns;
    if (st.mode == EtaMode::exhaustive) {
        if ((uint64_t(1) << n_sens) > uint64_t(st.phi_budget))
            throw config_error("expected_impact: exhaustive enumeration exceeds phi_budget");
        for (uint64_t mask = 0; mask < (uint64_t(1) << n_sens); ++mask)
            patterns.push_back({mask, outcome_prob(CommOutcome::from_mask(mask, n_sens), ch)});
    } else {
        patterns = top_outcomes(ch, st.phi_budget);
    }
    for (auto [mask, prob] : patterns) {
        if (prob <= 0.0) continue;
        out.psi += prob * contribution(mask);
        out.mass += prob;
        ++out.outcomes;
    }
    return out;
}

struct ScResult {
    AttackVector alpha;
    double psi = 0.0;
    int candidates_tried = 0;
    bool truncated = false;  // candidate space was cut down by the strategy
};

// Candidate-based construction for the lossy channel: pick a set of delivery
// patterns to stay stealthy under, solve the resulting ball-constrained
// program, and keep whichever candidate verifies best. The zero vector and
// the idealized-channel solution always compete, so the result never falls
// below either.
inline ScResult construct_sc(const ImpactModel& im, const ChannelParams& ch,
                             const EtaStrategy& st, Rng* rng = nullptr) {
    const auto& m = *im.model;
    const int n_sens = int(m.sensors.size());
    if (ch.n_sensors != n_sens) throw config_error("construct_sc: sensor count mismatch");

    // delivery patterns the candidates draw from, most probable first
    std::vector<std::pair<uint64_t, double>> pool;
    if (st.mode == EtaMode::exhaustive) {
        if (n_sens > 4)
            throw config_error("construct_sc: exhaustive mode limited to 4 sensors");
        if ((uint64_t(1) << n_sens) > uint64_t(st.phi_budget))
            throw config_error("construct_sc: exhaustive enumeration exceeds phi_budget");
        for (uint64_t mask = 0; mask < (uint64_t(1) << n_sens); ++mask)
            pool.push_back({mask, outcome_prob(CommOutcome::from_mask(mask, n_sens), ch)});
    } else if (st.mode == EtaMode::all_pass) {
        pool = top_outcomes(ch, st.phi_budget);
    } else {
        if (!rng) throw config_error("construct_sc: sampled mode needs an rng");
        auto pi = stationary_good(ch);
        std::vector<uint64_t> seen;
        long draws = 0, draw_cap = 200L * st.phi_budget;
        while (int(seen.size()) < st.phi_budget && draws++ < draw_cap) {
            uint64_t mask = 0;
            for (int s = 0; s < n_sens; ++s)
                if (rng->bernoulli(pi[s])) mask |= (uint64_t(1) << s);
            if (std::find(seen.begin(), seen.end(), mask) == seen.end()) seen.push_back(mask);
        }
        for (uint64_t mask : seen)
            pool.push_back({mask, outcome_prob(CommOutcome::from_mask(mask, n_sens), ch)});
    }

    // candidate pass-sets: every nonempty pattern subset when exhaustive,
    // otherwise prefixes of the pool at powers of two
    std::vector<std::vector<int>> candidates;
    if (st.mode == EtaMode::exhaustive) {
        for (uint64_t sub = 1; sub < (uint64_t(1) << pool.size()); ++sub) {
            std::vector<int> set;
            for (size_t i = 0; i < pool.size(); ++i)
                if ((sub >> i) & 1) set.push_back(int(i));
            candidates.push_back(std::move(set));
        }
    } else {
        for (int len = 1; len <= int(pool.size()); len *= 2) {
            std::vector<int> set(len);
            for (int i = 0; i < len; ++i) set[i] = i;
            candidates.push_back(std::move(set));
            if (len == int(pool.size())) break;
        }
        if (!candidates.empty() && int(candidates.back().size()) < int(pool.size())) {
            std::vector<int> all(pool.size());
            for (size_t i = 0; i < pool.size(); ++i) all[i] = int(i);
            candidates.push_back(std::move(all));
        }
    }

    auto verify = [&](const Vec& a) { return expected_impact(a, im, ch, st, rng).psi; };

    ScResult best;
    best.alpha = im.zero_attack();
    best.psi = 0.0;  // the zero vector shifts nothing, identically
    double best_norm = 0.0;
    ++best.candidates_tried;

    auto consider = [&](const Vec& a) {
        double psi = verify(a);
        double norm = a.norm();
        if (psi > best.psi + 1e-12 ||
            (std::abs(psi - best.psi) <= 1e-12 && norm < best_norm - 1e-12)) {
            best.psi = psi;
            best.alpha = im.unpack(a);
            best_norm = norm;
        }
    };

    auto ic = construct_ic(im);
    if (ic.feasible) {
        ++best.candidates_tried;
        consider(ic.alpha.combined());
    }

    std::map<uint64_t, Vec> d_cache;
    auto offset_for = [&](uint64_t mask) -> const Vec& {
        auto it = d_cache.find(mask);
        if (it != d_cache.end()) return it->second;
        Vec zr = realized_measurement(im, Vec::Zero(im.n_alpha()),
                                      CommOutcome::from_mask(mask, n_sens));
        return d_cache.emplace(mask, im.residual_op(mask, zr - m.h0)).first->second;
    };

    for (const auto& set : candidates) {
        QclpProblem p;
        p.c = Vec::Zero(im.n_alpha());
        p.box = im.alpha_max;
        bool weightless = true;
        for (int idx : set) {
            auto [mask, prob] = pool[idx];
            QclpConstraint k;
            k.s = im.stealth_matrix(mask);
            k.d = offset_for(mask);
            k.eps = m.epsilon;
            p.constraints.push_back(std::move(k));
            if (prob > 0.0) {
                p.c += prob * im.impact_row(mask);
                weightless = false;
            }
        }
        ++best.candidates_tried;
        if (weightless || p.c.norm() < 1e-14) continue;
        auto sol = qclp_solve(p);
        if (sol.status != QclpStatus::optimal) continue;  // unreachable pass-set
        consider(sol.x);
    }

    best.truncated = st.mode != EtaMode::exhaustive;
    return best;
}

}  // namespace evreg
