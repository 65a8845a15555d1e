#pragma once

#include <charconv>
#include <cmath>
#include <ostream>
#include <sstream>
#include <tuple>

#include "ac_power_flow.hpp"
#include "scenario.hpp"
#include "station_sim.hpp"

namespace evreg {

// One closed-loop slot: ground truth, telemetry, attack, channel, state
// estimation, dispatch, and the AC consequences. The *_clean fields rerun the
// identical slot with the attack zeroed (same measurements, same delivery
// pattern) so attacked and baseline trajectories stay seed-paired.
struct SlotRecord {
    int slot = 0;
    uint64_t phi_mask = 0;
    bool bdd_pass = false;
    bool used_pseudo = false;  // residual test failed, operator fell back to forecasts
    bool attacked = false;
    double alpha_norm = 0.0;
    double true_dv = 0.0;      // headroom functional on the ground-truth state
    double believed_dv = 0.0;  // the same functional on the operator's estimate
    double believed_dv_clean = 0.0;
    double ac_dv = 0.0;  // AC-oracle value of the headroom functional
    double capacity_error = 0.0;
    double min_voltage = 0.0;
    double min_voltage_clean = 0.0;
    int undervoltage = 0;  // buses below v_min after regulation
    int undervoltage_clean = 0;
    double backup_pu = 0.0;
    double true_pdown_kw = 0.0, true_pup_kw = 0.0;
    double believed_pdown_kw = 0.0, believed_pup_kw = 0.0;
    Vec z, z_pseudo, z_realized, x_hat, alpha;
    std::string error;  // nonempty when the slot aborted; other fields defaulted
};

struct MetricsReport {
    double mape_vr = std::numeric_limits<double>::quiet_NaN();
    double mape_vr_clean = std::numeric_limits<double>::quiet_NaN();
    double mape_linear = std::numeric_limits<double>::quiet_NaN();
    double bdd_pass_rate = 0.0;  // percent of the horizon
    int undervoltage_incidents = 0;
    int undervoltage_incidents_clean = 0;
    int attacked_slots = 0;
    int overestimated_slots = 0;  // attacked slots where believed > true headroom
    int valid_slots = 0;
    int error_slots = 0;
    int horizon = 0;
    std::vector<double> min_voltage_cdf;  // sorted post-regulation floor per slot
};

struct ScenarioRun {
    ScenarioConfig cfg;
    std::vector<SlotRecord> records;
    MetricsReport metrics;
};

inline MetricsReport compute_metrics(const std::vector<SlotRecord>& recs) {
    MetricsReport r;
    r.horizon = int(recs.size());
    double sum_att = 0.0, sum_clean = 0.0, sum_lin = 0.0;
    int n_mape = 0, n_lin = 0, passes = 0;
    for (const auto& rec : recs) {
        if (!rec.error.empty()) {
            ++r.error_slots;
            continue;
        }
        ++r.valid_slots;
        if (rec.bdd_pass) ++passes;
        if (rec.undervoltage > 0) ++r.undervoltage_incidents;
        if (rec.undervoltage_clean > 0) ++r.undervoltage_incidents_clean;
        r.min_voltage_cdf.push_back(rec.min_voltage);
        if (rec.attacked) {
            ++r.attacked_slots;
            if (rec.believed_dv > rec.true_dv) ++r.overestimated_slots;
        }
        if (std::abs(rec.true_dv) > 1e-12) {
            sum_att += std::abs(rec.believed_dv - rec.true_dv) / std::abs(rec.true_dv);
            sum_clean += std::abs(rec.believed_dv_clean - rec.true_dv) / std::abs(rec.true_dv);
            ++n_mape;
        }
        if (std::abs(rec.ac_dv) > 1e-12) {
            sum_lin += std::abs(rec.true_dv - rec.ac_dv) / std::abs(rec.ac_dv);
            ++n_lin;
        }
    }
    if (n_mape > 0) {
        r.mape_vr = 100.0 * sum_att / n_mape;
        r.mape_vr_clean = 100.0 * sum_clean / n_mape;
    }
    if (n_lin > 0) r.mape_linear = 100.0 * sum_lin / n_lin;
    if (!recs.empty()) r.bdd_pass_rate = 100.0 * passes / double(recs.size());
    std::sort(r.min_voltage_cdf.begin(), r.min_voltage_cdf.end());
    return r;
}

// Everything a scenario references, built and cross-checked. Constructing
// this is the full validation pass; the run loop only adds time.
struct SimContext {
    Feeder f;
    LinearPFModel lin;
    std::vector<StationConfig> st_cfgs;
    std::vector<CapacityCoefficients> coeffs;
    MeasurementModel m;
    Vec v_state;
    VrLimits lim;
    ChannelParams ch;
};

inline SimContext build_sim_context(const ScenarioConfig& cfg) {
    cfg.validate();
    SimContext sc;
    sc.f = load_feeder(cfg.feeder);
    sc.lin = build_linear_model(sc.f);
    sc.st_cfgs = cfg.resolve_stations(int(sc.f.evcs_buses.size()));
    sc.coeffs.reserve(sc.st_cfgs.size());
    for (const auto& s : sc.st_cfgs) sc.coeffs.push_back(capacity_coefficients(s));
    sc.m = build_measurement_model(sc.f, sc.lin, sc.coeffs, cfg.noise);
    sc.v_state = capacity_row(sc.lin, sc.f.evcs_buses, sc.f.monitor_buses);
    sc.lim = cfg.limits_for(sc.f);
    sc.ch = cfg.channel.build(int(sc.m.sensors.size()));
    if (cfg.attack.mode == AttackMode::sc && cfg.attack.eta.mode == EtaMode::exhaustive &&
        sc.m.sensors.size() > 4)
        throw config_error("attack: exhaustive eta needs <= 4 sensors, this feeder has " +
                           std::to_string(sc.m.sensors.size()));
    return sc;
}

inline void validate_scenario(const ScenarioConfig& cfg) { build_sim_context(cfg); }

inline ScenarioRun run_scenario(const ScenarioConfig& cfg_in) {
    ScenarioConfig cfg = cfg_in;
    SimContext ctx = build_sim_context(cfg);
    Feeder& f = ctx.f;
    LinearPFModel& lin = ctx.lin;
    auto& st_cfgs = ctx.st_cfgs;
    MeasurementModel& m = ctx.m;
    const Vec& v_state = ctx.v_state;
    const VrLimits& lim = ctx.lim;
    ChannelParams& ch = ctx.ch;
    const int nb = f.n_bus;
    const int ns = int(f.evcs_buses.size());
    const int n_sens = int(m.sensors.size());

    std::vector<StationTrace> traces;
    traces.reserve(ns);
    for (int e = 0; e < ns; ++e)
        traces.push_back(
            simulate_station(st_cfgs[e], cfg.horizon_slots, cfg.seeds.stations + uint64_t(e)));

    Rng rng_load(cfg.seeds.load);
    Rng rng_noise(cfg.seeds.noise);
    Rng rng_channel(cfg.seeds.channel);
    Rng rng_attack(cfg.seeds.attack);
    std::vector<int> ch_states = initial_states(ch, rng_channel);

    const Vec z_zero = Vec::Zero(m.n_meas);
    ImpactModel im = ImpactModel::build(m, v_state, z_zero, z_zero, cfg.attack.alpha_max);
    const Vec alpha_zero = Vec::Zero(im.n_alpha());
    const CommOutcome phi_none = CommOutcome::from_mask(0, n_sens);

    // counter-side pseudo tracker: last accepted reading and its age in slots
    std::vector<int> last_count(ns, 0);
    std::vector<int> count_age(ns, 1);

    ScenarioRun run;
    run.cfg = cfg;
    run.records.reserve(cfg.horizon_slots);

    for (int t = 0; t < cfg.horizon_slots; ++t) {
        SlotRecord rec;
        rec.slot = t;
        try {
            // realized loads: forecastable shape times per-bus mean-one jitter
            double hour = std::fmod((t + 0.5) * cfg.slot_minutes / 60.0, 24.0);
            double fac = cfg.load.factor(hour);
            double js = cfg.load.jitter_sigma;
            Vec p_fc_kw = Vec::Zero(nb), q_fc_kvar = Vec::Zero(nb);
            Vec p_kw = Vec::Zero(nb), q_kvar = Vec::Zero(nb);
            for (int b = 1; b < nb; ++b) {
                double jit = std::exp(js * rng_load.normal() - 0.5 * js * js);
                p_fc_kw(b) = f.load_p_kw[b] * fac;
                q_fc_kvar(b) = f.load_q_kvar[b] * fac;
                p_kw(b) = p_fc_kw(b) * jit;
                q_kvar(b) = q_fc_kvar(b) * jit;
            }

            Vec td_kw(ns), tu_kw(ns), ev_kw(ns);
            std::vector<int> counts(ns);
            for (int e = 0; e < ns; ++e) {
                counts[e] = traces[e].count[t];
                ev_kw(e) = traces[e].load_kw[t];
                td_kw(e) = traces[e].p_down_kw[t];
                tu_kw(e) = traces[e].p_up_kw[t];
            }

            // per-unit injections, loads negative; chargers draw at unity pf
            Vec p_inj = Vec::Zero(nb), q_inj = Vec::Zero(nb);
            Vec p_fc = Vec::Zero(nb), q_fc = Vec::Zero(nb);
            for (int b = 1; b < nb; ++b) {
                p_inj(b) = -p_kw(b) / m.kw_scale;
                q_inj(b) = -q_kvar(b) / m.kw_scale;
                p_fc(b) = -p_fc_kw(b) / m.kw_scale;
                q_fc(b) = -q_fc_kvar(b) / m.kw_scale;
            }
            for (int e = 0; e < ns; ++e) p_inj(m.station_bus[e]) -= ev_kw(e) / m.kw_scale;

            VoltageProfile vt = ac_power_flow(f, p_inj, q_inj);
            Vec x_true(m.n_state);
            for (int b = 1; b < nb; ++b) {
                x_true(m.p_col(b)) = p_inj(b);
                x_true(m.q_col(b)) = q_inj(b);
            }
            Vec td_pu(ns), tu_pu(ns);
            for (int e = 0; e < ns; ++e) {
                td_pu(e) = td_kw(e) / m.kw_scale;
                tu_pu(e) = tu_kw(e) / m.kw_scale;
                x_true(m.pdown_col(e)) = td_pu(e);
                x_true(m.pup_col(e)) = tu_pu(e);
            }
            rec.true_dv = v_state.dot(x_true);
            rec.true_pdown_kw = td_kw.sum();
            rec.true_pup_kw = tu_kw.sum();

            {  // AC route for the same headroom functional
                Vec p2 = p_inj;
                for (int e = 0; e < ns; ++e) p2(m.station_bus[e]) += tu_pu(e);
                VoltageProfile v2 = ac_power_flow(f, p2, q_inj);
                double dv = 0.0;
                for (int mb : f.monitor_buses) dv += v2.v(mb) - vt.v(mb);
                rec.ac_dv = dv;
            }

            // telemetry: forecast-grade defaults, live readings where sensors sit
            VoltageProfile vfc = linear_power_flow(lin, p_fc, q_fc);
            Vec z(m.n_meas);
            for (int b = 1; b < nb; ++b) {
                z(m.v_row(b)) = vfc.v(b);
                z(m.theta_row(b)) = vfc.theta(b);
                z(m.p_row(b)) = p_fc(b);
                z(m.q_row(b)) = q_fc(b);
            }
            for (int e = 0; e < ns; ++e) {
                z(m.count_row(e)) = double(counts[e]);
                z(m.split_row(e)) = -p_fc_kw(m.station_bus[e]) / m.mean_charge_power_kw[e];
            }
            for (const auto& s : m.sensors)
                if (s.is_pmu) {
                    z(s.rows[0]) = vt.v(s.bus) + m.noise.pmu_v_sigma * rng_noise.normal();
                    z(s.rows[1]) = vt.theta(s.bus) + m.noise.pmu_theta_sigma * rng_noise.normal();
                }

            // stand-ins the operator substitutes for lost sensor packets
            Vec z_ps = z;
            for (const auto& s : m.sensors) {
                if (s.is_pmu) {
                    z_ps(s.rows[0]) = vfc.v(s.bus) + m.noise.pseudo_sigma * rng_noise.normal();
                    z_ps(s.rows[1]) =
                        vfc.theta(s.bus) + m.noise.pseudo_sigma * rng_noise.normal();
                } else {
                    z_ps(s.rows[0]) = double(
                        pseudo_count(last_count[s.station], st_cfgs[s.station],
                                     count_age[s.station]));
                }
            }

            im.set_measurements(z, z_ps);
            if (cfg.attack.alpha_max <= 0.0)
                im.alpha_max = 10.0 * std::max(1.0, z.lpNorm<Eigen::Infinity>());

            Vec alpha = alpha_zero;
            bool attempt = cfg.attack.mode != AttackMode::none && t >= cfg.attack.start_slot;
            if (attempt) {
                if (cfg.attack.mode == AttackMode::ic)
                    alpha = construct_ic(im).alpha.combined();
                else
                    alpha = construct_sc(im, ch, cfg.attack.eta, &rng_attack).alpha.combined();
            }
            rec.alpha = alpha;
            rec.alpha_norm = alpha.norm();
            rec.attacked = attempt && rec.alpha_norm > 1e-12;

            CommOutcome phi = sample_outcome(ch, ch_states, rng_channel);
            const uint64_t mask = phi.mask();
            rec.phi_mask = mask;
            Vec z_ar = realized_measurement(im, alpha, phi);
            rec.z = z;
            rec.z_pseudo = z_ps;
            rec.z_realized = z_ar;

            struct SlotOp {
                bool bdd_pass = false, used_pseudo = false;
                Vec x_hat;
                double believed_dv = 0.0, min_voltage = 0.0, backup_pu = 0.0;
                double bel_down_kw = 0.0, bel_up_kw = 0.0;
                int undervoltage = 0;
            };
            auto operate = [&](const Vec& zr) {
                SlotOp o;
                auto b = m.bdd(zr, mask);
                o.bdd_pass = b.pass;
                o.used_pseudo = !b.pass;
                o.x_hat = b.pass ? m.estimate(zr, mask)
                                 : m.estimate(realized_measurement(im, alpha_zero, phi_none), 0);
                o.believed_dv = v_state.dot(o.x_hat);
                Vec bel_down(ns), bel_up(ns);
                for (int e = 0; e < ns; ++e) {
                    bel_down(e) = o.x_hat(m.pdown_col(e));
                    bel_up(e) = o.x_hat(m.pup_col(e));
                }
                o.bel_down_kw = bel_down.cwiseMax(0.0).sum() * m.kw_scale;
                o.bel_up_kw = bel_up.cwiseMax(0.0).sum() * m.kw_scale;
                Vec z_lin = m.h * o.x_hat + m.h0;
                VoltageProfile vh;
                vh.v = Vec(nb);
                vh.theta = Vec(nb);
                vh.v(0) = lin.slack_v;
                vh.theta(0) = lin.slack_theta;
                for (int b2 = 1; b2 < nb; ++b2) {
                    vh.v(b2) = z_lin(m.v_row(b2));
                    vh.theta(b2) = z_lin(m.theta_row(b2));
                }
                VrRequest req = dispatch(vh, bel_down, bel_up, lin, f.evcs_buses,
                                         f.monitor_buses, lim);
                VrOutcome outc =
                    apply_request(req, td_pu, tu_pu, f, p_inj, q_inj, f.evcs_buses, lim);
                o.backup_pu = req.backup_delta;
                o.min_voltage = outc.min_voltage;
                o.undervoltage = int(outc.undervoltage_buses.size());
                return o;
            };

            SlotOp oa = operate(z_ar);
            rec.bdd_pass = oa.bdd_pass;
            rec.used_pseudo = oa.used_pseudo;
            rec.x_hat = oa.x_hat;
            rec.believed_dv = oa.believed_dv;
            rec.capacity_error = oa.believed_dv - rec.true_dv;
            rec.min_voltage = oa.min_voltage;
            rec.undervoltage = oa.undervoltage;
            rec.backup_pu = oa.backup_pu;
            rec.believed_pdown_kw = oa.bel_down_kw;
            rec.believed_pup_kw = oa.bel_up_kw;

            if (rec.attacked) {
                SlotOp oc = operate(realized_measurement(im, alpha_zero, phi));
                rec.believed_dv_clean = oc.believed_dv;
                rec.min_voltage_clean = oc.min_voltage;
                rec.undervoltage_clean = oc.undervoltage;
            } else {
                rec.believed_dv_clean = oa.believed_dv;
                rec.min_voltage_clean = oa.min_voltage;
                rec.undervoltage_clean = oa.undervoltage;
            }

            // counters: keep the last delivered reading the residual test
            // accepted, age it otherwise
            for (int si = 0; si < n_sens; ++si) {
                const auto& s = m.sensors[si];
                if (s.is_pmu) continue;
                if (phi.phi[si] && oa.bdd_pass) {
                    long read = std::llround(z_ar(s.rows[0]));
                    last_count[s.station] =
                        int(std::clamp(read, long(0), long(st_cfgs[s.station].stalls)));
                    count_age[s.station] = 1;
                } else {
                    ++count_age[s.station];
                }
            }
        } catch (const std::exception& ex) {
            rec.error = ex.what();
        }
        run.records.push_back(std::move(rec));
    }
    run.metrics = compute_metrics(run.records);
    return run;
}

// --- result serialization -------------------------------------------------------

namespace detail {

// shortest round-trip decimal form; locale-free and reproducible
inline std::string csv_num(double x) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), x);
    return std::string(buf, res.ptr);
}

inline std::string csv_text(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += "\"\"";
        else out += c;
    }
    out += '"';
    return out;
}

}  // namespace detail

inline void write_slots_csv(const std::vector<SlotRecord>& recs, std::ostream& os) {
    os << "slot,phi_mask,bdd_pass,used_pseudo,attacked,alpha_norm,true_dv,believed_dv,"
          "believed_dv_clean,ac_dv,capacity_error,min_voltage,min_voltage_clean,undervoltage,"
          "undervoltage_clean,backup_pu,true_pdown_kw,true_pup_kw,believed_pdown_kw,"
          "believed_pup_kw,error\n";
    for (const auto& r : recs) {
        os << r.slot << ',' << r.phi_mask << ',' << int(r.bdd_pass) << ',' << int(r.used_pseudo)
           << ',' << int(r.attacked) << ',' << detail::csv_num(r.alpha_norm) << ','
           << detail::csv_num(r.true_dv) << ',' << detail::csv_num(r.believed_dv) << ','
           << detail::csv_num(r.believed_dv_clean) << ',' << detail::csv_num(r.ac_dv) << ','
           << detail::csv_num(r.capacity_error) << ',' << detail::csv_num(r.min_voltage) << ','
           << detail::csv_num(r.min_voltage_clean) << ',' << r.undervoltage << ','
           << r.undervoltage_clean << ',' << detail::csv_num(r.backup_pu) << ','
           << detail::csv_num(r.true_pdown_kw) << ',' << detail::csv_num(r.true_pup_kw) << ','
           << detail::csv_num(r.believed_pdown_kw) << ',' << detail::csv_num(r.believed_pup_kw)
           << ',' << detail::csv_text(r.error) << '\n';
    }
}

inline std::string slots_csv(const std::vector<SlotRecord>& recs) {
    std::ostringstream os;
    write_slots_csv(recs, os);
    return os.str();
}

inline Json metrics_to_json(const MetricsReport& m) {
    Json j;
    j["horizon"] = m.horizon;
    j["valid_slots"] = m.valid_slots;
    j["error_slots"] = m.error_slots;
    j["bdd_pass_rate"] = m.bdd_pass_rate;
    j["undervoltage_incidents"] = m.undervoltage_incidents;
    j["undervoltage_incidents_clean"] = m.undervoltage_incidents_clean;
    j["attacked_slots"] = m.attacked_slots;
    j["overestimated_slots"] = m.overestimated_slots;
    if (!std::isnan(m.mape_vr)) j["mape_vr"] = m.mape_vr;
    if (!std::isnan(m.mape_vr_clean)) j["mape_vr_clean"] = m.mape_vr_clean;
    if (!std::isnan(m.mape_linear)) j["mape_linear"] = m.mape_linear;
    j["min_voltage_cdf"] = m.min_voltage_cdf;
    return j;
}

}  // namespace evreg
