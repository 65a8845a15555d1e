#pragma once

#include "evcs.hpp"

namespace evreg {

struct EvRecord {
    int arrival_slot = 0;
    double battery_kwh = 0.0;
    double power_kw = 0.0;
    double soc_init = 0.0;
    int tp_slots = 1;  // stay length
    int tc_slots = 0;  // nominal charging need
    int tv_slots = 0;  // planned up-regulation window
};

struct StationTrace {
    std::vector<int> count;         // plugged-in EVs per slot
    std::vector<double> load_kw;    // drawn charging power per slot
    std::vector<double> p_down_kw;  // true down-regulation capacity per slot
    std::vector<double> p_up_kw;    // true up-regulation capacity per slot
    std::vector<EvRecord> evs;      // admitted EVs only
    int rejected = 0;               // arrivals bounced off a full station
};

// Replay a fixed admitted-EV list against the slot grid. Kept separate from
// the random simulation so tests can drive hand-built schedules.
//
// Per EV with elapsed d = slot - arrival (only 0 <= d < tp counts as
// present): charging while its remaining need is positive, subject to the
// optional station power cap (earlier arrivals get served first, deferred
// EVs resume later and their idle window shrinks); once the remaining need
// hits zero the EV idles, offering up-regulation for the first tv idle
// slots and down-regulation afterwards while one slot of charge still fits
// under the target, measured against the arrival SOC. Flexible-mode
// charging EVs with tv > 0 additionally offer twice their charger power as
// up-regulation (pause plus discharge). Work is linear in the total number
// of EV-present slots.
inline StationTrace replay_station(const StationConfig& cfg, std::vector<EvRecord> evs,
                                   int horizon_slots) {
    StationTrace tr;
    tr.count.assign(horizon_slots, 0);
    tr.load_kw.assign(horizon_slots, 0.0);
    tr.p_down_kw.assign(horizon_slots, 0.0);
    tr.p_up_kw.assign(horizon_slots, 0.0);

    std::vector<int> remaining(evs.size());
    std::vector<int> done_at(evs.size(), -1);  // elapsed slot at which charging finished
    for (size_t i = 0; i < evs.size(); ++i) {
        remaining[i] = std::min(evs[i].tc_slots, evs[i].tp_slots);
        if (remaining[i] == 0) done_at[i] = 0;
    }
    double dt = cfg.dt_hours();

    // arrival buckets, then a compacting active list in arrival order
    std::vector<std::vector<size_t>> arriving(horizon_slots);
    for (size_t i = 0; i < evs.size(); ++i) {
        int t0 = evs[i].arrival_slot;
        if (t0 < 0) throw config_error("replay_station: negative arrival slot");
        if (t0 < horizon_slots) arriving[t0].push_back(i);
    }

    std::vector<size_t> active;
    for (int t = 0; t < horizon_slots; ++t) {
        for (size_t i : arriving[t]) active.push_back(i);
        double drawn = 0.0;
        size_t keep = 0;
        for (size_t k = 0; k < active.size(); ++k) {
            size_t i = active[k];
            const auto& ev = evs[i];
            int d = t - ev.arrival_slot;
            if (d >= ev.tp_slots) continue;  // departed, drop from the list
            active[keep++] = i;
            tr.count[t] += 1;
            bool wants_charge = remaining[i] > 0;
            bool charging = false;
            if (wants_charge &&
                (cfg.power_cap_kw <= 0.0 || drawn + ev.power_kw <= cfg.power_cap_kw + 1e-9)) {
                charging = true;
                drawn += ev.power_kw;
                remaining[i] -= 1;
                if (remaining[i] == 0) done_at[i] = d + 1;
            }
            if (charging) {
                if (cfg.mode == VrMode::flexible && ev.tv_slots > 0)
                    tr.p_up_kw[t] += 2.0 * ev.power_kw;
            } else if (!wants_charge) {
                // idle phase; j counts idle slots so far
                int j = d - done_at[i];
                int idle_total = ev.tp_slots - done_at[i];
                int tv = std::min(ev.tv_slots, idle_total);
                if (j < tv) {
                    tr.p_up_kw[t] += ev.power_kw;
                } else if (ev.soc_init + ev.power_kw * dt / ev.battery_kwh <=
                           cfg.target_soc + 1e-12) {
                    tr.p_down_kw[t] += ev.power_kw;
                }
            }
            // deferred EVs (wants_charge but capped out) offer nothing
        }
        active.resize(keep);
        tr.load_kw[t] = drawn;
    }
    tr.evs = std::move(evs);
    return tr;
}

// Ground-truth station behaviour: Poisson arrivals on the slot grid,
// attribute draws from the configured distributions, stall-capped
// admission, then the deterministic replay above.
inline StationTrace simulate_station(const StationConfig& cfg, int horizon_slots, uint64_t seed) {
    cfg.validate();
    if (horizon_slots < 1) throw config_error("simulate_station: horizon must be >= 1");
    Rng rng(seed);
    double dt = cfg.dt_hours();

    std::vector<EvRecord> admitted;
    std::vector<int> depart_delta(horizon_slots + 1, 0);
    int occupancy = 0;
    int rejected = 0;

    for (int t = 0; t < horizon_slots; ++t) {
        occupancy -= depart_delta[t];
        int arrivals = rng.poisson(cfg.lambda_per_hour * dt);
        for (int a = 0; a < arrivals; ++a) {
            if (occupancy >= cfg.stalls) {
                ++rejected;
                continue;
            }
            EvRecord ev;
            ev.arrival_slot = t;
            ev.battery_kwh = cfg.battery.level[rng.categorical(cfg.battery.prob)];
            ev.power_kw = cfg.power.level[rng.categorical(cfg.power.prob)];
            ev.soc_init = cfg.init_soc.sample(rng);
            double park_h = cfg.parking.sample(rng);
            ev.tp_slots = std::max(1, int(std::ceil(park_h / dt - 1e-12)));
            ev.tc_slots = charge_time(ev.soc_init, cfg.target_soc, ev.battery_kwh, ev.power_kw, dt);
            ev.tv_slots = vr_slots(ev.tp_slots, ev.tc_slots);
            admitted.push_back(ev);
            ++occupancy;
            int leave = std::min(t + ev.tp_slots, horizon_slots);
            depart_delta[leave] += 1;
        }
    }

    auto tr = replay_station(cfg, std::move(admitted), horizon_slots);
    tr.rejected = rejected;
    return tr;
}

}  // namespace evreg
