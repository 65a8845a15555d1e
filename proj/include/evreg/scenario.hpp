#pragma once

#include <filesystem>
#include <fstream>
#include <numbers>
#include <string>

#include <json.hpp>

#include "attack.hpp"
#include "channel.hpp"
#include "evcs.hpp"
#include "feeder.hpp"
#include "measurement.hpp"
#include "regulation.hpp"

namespace evreg {

using Json = nlohmann::json;

namespace detail {

inline void check_keys(const Json& j, std::initializer_list<const char*> allowed,
                       const std::string& where) {
    if (!j.is_object()) throw config_error(where + ": expected an object");
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool known = false;
        for (const char* k : allowed)
            if (it.key() == k) {
                known = true;
                break;
            }
        if (!known) throw config_error(where + ": unknown key '" + it.key() + "'");
    }
}

template <typename T>
void read(const Json& j, const char* key, T& out, const std::string& where) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<T>();
    } catch (const Json::exception& e) {
        throw config_error(where + "." + key + ": " + e.what());
    }
}

}  // namespace detail

// Synthetic daily demand multiplier: a base level plus two raised-cosine
// peaks, periodic over 24 h. Per-bus lognormal jitter (mean one) models the
// deviation of the realized load from this forecastable shape.
struct LoadShape {
    std::string shape = "daily";  // daily | flat
    double scale = 1.0;
    double base = 0.7;
    double morning = 0.25, evening = 0.5;
    double morning_hour = 9.0, evening_hour = 19.0;
    double morning_width = 3.0, evening_width = 4.0;
    double jitter_sigma = 0.05;

    double factor(double hour) const {
        if (shape == "flat") return scale;
        auto bump = [](double u) {
            u = std::abs(u);
            if (u >= 1.0) return 0.0;
            double c = std::cos(0.5 * std::numbers::pi * u);
            return c * c;
        };
        auto dist = [](double h, double c) {
            double d = std::abs(h - c);
            return std::min(d, 24.0 - d);
        };
        return scale * (base + morning * bump(dist(hour, morning_hour) / morning_width) +
                        evening * bump(dist(hour, evening_hour) / evening_width));
    }

    void validate() const {
        if (shape != "daily" && shape != "flat")
            throw config_error("load.shape: expected 'daily' or 'flat'");
        if (scale <= 0.0) throw config_error("load.scale: must be positive");
        if (base < 0.0 || morning < 0.0 || evening < 0.0)
            throw config_error("load: shape levels must be nonnegative");
        if (morning_width <= 0.0 || evening_width <= 0.0)
            throw config_error("load: peak widths must be positive");
        if (jitter_sigma < 0.0) throw config_error("load.jitter_sigma: must be nonnegative");
    }
};

enum class AttackMode { none, ic, sc };

struct AttackConfig {
    AttackMode mode = AttackMode::none;
    double alpha_max = 0.0;  // entrywise cap; 0 sizes it from the measurement scale
    EtaStrategy eta;
    int start_slot = 0;

    void validate() const {
        if (alpha_max < 0.0) throw config_error("attack.alpha_max: must be nonnegative");
        if (eta.phi_budget < 1) throw config_error("attack.phi_budget: must be >= 1");
        if (eta.mc_samples < 2) throw config_error("attack.mc_samples: must be >= 2");
        if (start_slot < 0) throw config_error("attack.start_slot: must be nonnegative");
    }
};

struct ChannelConfig {
    bool use_ber = true;
    double ber = 0.01;
    int payload_bits = 32;
    double k_gb = 0.0, k_bg = 1.0;  // explicit chain, used when use_ber is false

    void validate() const {
        if (use_ber) {
            if (ber < 0.0 || ber > 1.0) throw config_error("channel.ber: outside [0,1]");
            if (payload_bits < 1) throw config_error("channel.payload_bits: must be >= 1");
        } else {
            check_channel_probability(k_gb, "k_gb");
            check_channel_probability(k_bg, "k_bg");
            if (k_gb + k_bg <= 0.0) throw config_error("channel: k_gb + k_bg must be positive");
        }
    }

    ChannelParams build(int n_sensors) const {
        if (use_ber) {
            auto [gb, bg] = ber_to_params(ber, payload_bits);
            return ChannelParams::uniform(n_sensors, gb, bg);
        }
        return ChannelParams::uniform(n_sensors, k_gb, k_bg);
    }
};

struct SeedConfig {
    uint64_t load = 1, stations = 2, noise = 3, channel = 4, attack = 5;
};

struct ScenarioConfig {
    std::string feeder;  // path, resolved against the config file's directory
    int horizon_slots = 144;
    double slot_minutes = 10.0;
    LoadShape load;
    StationConfig station;                // shared station parameters
    std::vector<StationConfig> stations;  // optional per-station override
    NoiseConfig noise;
    ChannelConfig channel;
    VrLimits regulation;    // backup_bus kept as a 1-based file label here
    int backup_bus_label = 0;  // 0 disables the backup resource
    AttackConfig attack;
    SeedConfig seeds;

    ScenarioConfig() {
        station.power.level = {3.0, 7.0, 11.0, 22.0};
        station.power.prob = {0.25, 0.35, 0.3, 0.1};
        station.battery.level = {30.0, 60.0};
        station.battery.prob = {0.5, 0.5};
        station.mu_per_hour = 0.5;
        regulation.backup_bus = 0;
    }

    // feederless checks; model construction catches the rest
    void validate() const {
        if (feeder.empty()) throw config_error("feeder: path is required");
        if (horizon_slots < 1) throw config_error("horizon_slots: must be >= 1");
        if (slot_minutes <= 0.0) throw config_error("slot_minutes: must be positive");
        load.validate();
        noise.validate();
        channel.validate();
        attack.validate();
        if (!(regulation.v_min < regulation.v_ref && regulation.v_ref < regulation.v_max))
            throw config_error("regulation: need v_min < v_ref < v_max");
        if (regulation.backup_capacity_pu < 0.0)
            throw config_error("regulation.backup_capacity_pu: must be nonnegative");
        if (regulation.backup_guard < 0.0)
            throw config_error("regulation.backup_guard: must be nonnegative");
        if (backup_bus_label < 0) throw config_error("regulation.backup_bus: must be >= 0");
        if (backup_bus_label == 1)
            throw config_error("regulation.backup_bus: bus 1 is the slack bus");
    }

    // per-station parameter sets with the scenario slot length applied
    std::vector<StationConfig> resolve_stations(int n) const {
        std::vector<StationConfig> out;
        if (!stations.empty()) {
            if (int(stations.size()) != n)
                throw config_error("stations: feeder has " + std::to_string(n) +
                                   " charging stations, config lists " +
                                   std::to_string(stations.size()));
            out = stations;
        } else {
            out.assign(n, station);
        }
        for (auto& s : out) {
            s.slot_minutes = slot_minutes;
            s.validate();
        }
        return out;
    }

    VrLimits limits_for(const Feeder& f) const {
        VrLimits lim = regulation;
        lim.backup_bus = 0;
        if (backup_bus_label > 0) {
            if (backup_bus_label > f.n_bus)
                throw config_error("regulation.backup_bus: bus " +
                                   std::to_string(backup_bus_label) + " not in the feeder");
            lim.backup_bus = backup_bus_label - 1;
        }
        lim.validate(f.n_bus);
        return lim;
    }
};

// --- JSON input ---------------------------------------------------------------

namespace detail {

inline StationConfig station_from_json(const Json& j, const StationConfig& base,
                                       const std::string& where) {
    check_keys(j,
               {"stalls", "lambda_per_hour", "mu_per_hour", "subslots_per_slot", "power_kw",
                "power_prob", "battery_kwh", "battery_prob", "soc", "parking", "target_soc",
                "mode", "power_cap_kw", "soc_cells"},
               where);
    StationConfig s = base;
    read(j, "stalls", s.stalls, where);
    read(j, "lambda_per_hour", s.lambda_per_hour, where);
    read(j, "mu_per_hour", s.mu_per_hour, where);
    read(j, "subslots_per_slot", s.subslots_per_slot, where);
    read(j, "power_kw", s.power.level, where);
    read(j, "power_prob", s.power.prob, where);
    read(j, "battery_kwh", s.battery.level, where);
    read(j, "battery_prob", s.battery.prob, where);
    read(j, "target_soc", s.target_soc, where);
    read(j, "power_cap_kw", s.power_cap_kw, where);
    read(j, "soc_cells", s.soc_cells, where);
    if (j.contains("soc")) {
        const auto& js = j.at("soc");
        check_keys(js, {"kind", "lo", "hi", "a", "b"}, where + ".soc");
        std::string kind = s.init_soc.kind == SocDist::Kind::beta ? "beta" : "uniform";
        read(js, "kind", kind, where + ".soc");
        if (kind == "uniform")
            s.init_soc.kind = SocDist::Kind::uniform;
        else if (kind == "beta")
            s.init_soc.kind = SocDist::Kind::beta;
        else
            throw config_error(where + ".soc.kind: expected 'uniform' or 'beta'");
        read(js, "lo", s.init_soc.lo, where + ".soc");
        read(js, "hi", s.init_soc.hi, where + ".soc");
        read(js, "a", s.init_soc.a, where + ".soc");
        read(js, "b", s.init_soc.b, where + ".soc");
    }
    if (j.contains("parking")) {
        const auto& jp = j.at("parking");
        check_keys(jp, {"mu_log", "sigma_log"}, where + ".parking");
        read(jp, "mu_log", s.parking.mu_log, where + ".parking");
        read(jp, "sigma_log", s.parking.sigma_log, where + ".parking");
    }
    if (j.contains("mode")) {
        std::string mode = j.at("mode").get<std::string>();
        if (mode == "strict")
            s.mode = VrMode::strict;
        else if (mode == "flexible")
            s.mode = VrMode::flexible;
        else
            throw config_error(where + ".mode: expected 'strict' or 'flexible'");
    }
    return s;
}

}  // namespace detail

inline ScenarioConfig scenario_from_json(const Json& j, const std::string& base_dir = "") {
    detail::check_keys(j,
                       {"feeder", "horizon_slots", "slot_minutes", "load", "station", "stations",
                        "noise", "channel", "regulation", "attack", "seeds"},
                       "scenario");
    ScenarioConfig c;
    detail::read(j, "feeder", c.feeder, "scenario");
    detail::read(j, "horizon_slots", c.horizon_slots, "scenario");
    detail::read(j, "slot_minutes", c.slot_minutes, "scenario");

    if (j.contains("load")) {
        const auto& jl = j.at("load");
        detail::check_keys(jl,
                           {"shape", "scale", "base", "morning", "evening", "morning_hour",
                            "evening_hour", "morning_width", "evening_width", "jitter_sigma"},
                           "load");
        detail::read(jl, "shape", c.load.shape, "load");
        detail::read(jl, "scale", c.load.scale, "load");
        detail::read(jl, "base", c.load.base, "load");
        detail::read(jl, "morning", c.load.morning, "load");
        detail::read(jl, "evening", c.load.evening, "load");
        detail::read(jl, "morning_hour", c.load.morning_hour, "load");
        detail::read(jl, "evening_hour", c.load.evening_hour, "load");
        detail::read(jl, "morning_width", c.load.morning_width, "load");
        detail::read(jl, "evening_width", c.load.evening_width, "load");
        detail::read(jl, "jitter_sigma", c.load.jitter_sigma, "load");
    }
    if (j.contains("station"))
        c.station = detail::station_from_json(j.at("station"), c.station, "station");
    if (j.contains("stations")) {
        const auto& ja = j.at("stations");
        if (!ja.is_array()) throw config_error("stations: expected an array");
        for (size_t i = 0; i < ja.size(); ++i)
            c.stations.push_back(detail::station_from_json(
                ja.at(i), c.station, "stations[" + std::to_string(i) + "]"));
    }
    if (j.contains("noise")) {
        const auto& jn = j.at("noise");
        detail::check_keys(jn,
                           {"pmu_v_sigma", "pmu_theta_sigma", "pseudo_sigma", "forecast_sigma",
                            "count_sigma", "pseudo_count_sigma", "split_sigma", "tau"},
                           "noise");
        detail::read(jn, "pmu_v_sigma", c.noise.pmu_v_sigma, "noise");
        detail::read(jn, "pmu_theta_sigma", c.noise.pmu_theta_sigma, "noise");
        detail::read(jn, "pseudo_sigma", c.noise.pseudo_sigma, "noise");
        detail::read(jn, "forecast_sigma", c.noise.forecast_sigma, "noise");
        detail::read(jn, "count_sigma", c.noise.count_sigma, "noise");
        detail::read(jn, "pseudo_count_sigma", c.noise.pseudo_count_sigma, "noise");
        detail::read(jn, "split_sigma", c.noise.split_sigma, "noise");
        detail::read(jn, "tau", c.noise.tau, "noise");
    }
    if (j.contains("channel")) {
        const auto& jc = j.at("channel");
        detail::check_keys(jc, {"ber", "payload_bits", "k_gb", "k_bg"}, "channel");
        bool has_ber = jc.contains("ber") || jc.contains("payload_bits");
        bool has_chain = jc.contains("k_gb") || jc.contains("k_bg");
        if (has_ber && has_chain)
            throw config_error("channel: give either ber/payload_bits or k_gb/k_bg, not both");
        if (has_chain) {
            c.channel.use_ber = false;
            detail::read(jc, "k_gb", c.channel.k_gb, "channel");
            detail::read(jc, "k_bg", c.channel.k_bg, "channel");
        } else {
            c.channel.use_ber = true;
            detail::read(jc, "ber", c.channel.ber, "channel");
            detail::read(jc, "payload_bits", c.channel.payload_bits, "channel");
        }
    }
    if (j.contains("regulation")) {
        const auto& jr = j.at("regulation");
        detail::check_keys(jr,
                           {"v_ref", "v_min", "v_max", "backup_bus", "backup_capacity_pu",
                            "backup_guard"},
                           "regulation");
        detail::read(jr, "v_ref", c.regulation.v_ref, "regulation");
        detail::read(jr, "v_min", c.regulation.v_min, "regulation");
        detail::read(jr, "v_max", c.regulation.v_max, "regulation");
        detail::read(jr, "backup_bus", c.backup_bus_label, "regulation");
        detail::read(jr, "backup_capacity_pu", c.regulation.backup_capacity_pu, "regulation");
        detail::read(jr, "backup_guard", c.regulation.backup_guard, "regulation");
    }
    if (j.contains("attack")) {
        const auto& ja = j.at("attack");
        detail::check_keys(ja, {"mode", "alpha_max", "eta", "phi_budget", "mc_samples",
                                "start_slot"},
                           "attack");
        if (ja.contains("mode")) {
            std::string mode = ja.at("mode").get<std::string>();
            if (mode == "none")
                c.attack.mode = AttackMode::none;
            else if (mode == "ic")
                c.attack.mode = AttackMode::ic;
            else if (mode == "sc")
                c.attack.mode = AttackMode::sc;
            else
                throw config_error("attack.mode: expected 'none', 'ic' or 'sc'");
        }
        detail::read(ja, "alpha_max", c.attack.alpha_max, "attack");
        if (ja.contains("eta")) {
            std::string eta = ja.at("eta").get<std::string>();
            if (eta == "exhaustive")
                c.attack.eta.mode = EtaMode::exhaustive;
            else if (eta == "all_pass")
                c.attack.eta.mode = EtaMode::all_pass;
            else if (eta == "sampled")
                c.attack.eta.mode = EtaMode::sampled;
            else
                throw config_error("attack.eta: expected 'exhaustive', 'all_pass' or 'sampled'");
        }
        detail::read(ja, "phi_budget", c.attack.eta.phi_budget, "attack");
        detail::read(ja, "mc_samples", c.attack.eta.mc_samples, "attack");
        detail::read(ja, "start_slot", c.attack.start_slot, "attack");
    }
    if (j.contains("seeds")) {
        const auto& js = j.at("seeds");
        detail::check_keys(js, {"load", "stations", "noise", "channel", "attack"}, "seeds");
        detail::read(js, "load", c.seeds.load, "seeds");
        detail::read(js, "stations", c.seeds.stations, "seeds");
        detail::read(js, "noise", c.seeds.noise, "seeds");
        detail::read(js, "channel", c.seeds.channel, "seeds");
        detail::read(js, "attack", c.seeds.attack, "seeds");
    }

    if (!base_dir.empty() && !c.feeder.empty()) {
        std::filesystem::path p(c.feeder);
        if (p.is_relative()) c.feeder = (std::filesystem::path(base_dir) / p).string();
    }
    c.validate();
    return c;
}

// --- JSON output (fully resolved defaults) -------------------------------------

namespace detail {

inline Json station_to_json(const StationConfig& s) {
    Json j;
    j["stalls"] = s.stalls;
    j["lambda_per_hour"] = s.lambda_per_hour;
    j["mu_per_hour"] = s.mu_per_hour;
    j["subslots_per_slot"] = s.subslots_per_slot;
    j["power_kw"] = s.power.level;
    j["power_prob"] = s.power.prob;
    j["battery_kwh"] = s.battery.level;
    j["battery_prob"] = s.battery.prob;
    j["soc"] = {{"kind", s.init_soc.kind == SocDist::Kind::beta ? "beta" : "uniform"},
                {"lo", s.init_soc.lo},
                {"hi", s.init_soc.hi},
                {"a", s.init_soc.a},
                {"b", s.init_soc.b}};
    j["parking"] = {{"mu_log", s.parking.mu_log}, {"sigma_log", s.parking.sigma_log}};
    j["target_soc"] = s.target_soc;
    j["mode"] = s.mode == VrMode::strict ? "strict" : "flexible";
    j["power_cap_kw"] = s.power_cap_kw;
    j["soc_cells"] = s.soc_cells;
    return j;
}

}  // namespace detail

inline Json scenario_to_json(const ScenarioConfig& c) {
    Json j;
    j["feeder"] = c.feeder;
    j["horizon_slots"] = c.horizon_slots;
    j["slot_minutes"] = c.slot_minutes;
    j["load"] = {{"shape", c.load.shape},
                 {"scale", c.load.scale},
                 {"base", c.load.base},
                 {"morning", c.load.morning},
                 {"evening", c.load.evening},
                 {"morning_hour", c.load.morning_hour},
                 {"evening_hour", c.load.evening_hour},
                 {"morning_width", c.load.morning_width},
                 {"evening_width", c.load.evening_width},
                 {"jitter_sigma", c.load.jitter_sigma}};
    j["station"] = detail::station_to_json(c.station);
    if (!c.stations.empty()) {
        Json arr = Json::array();
        for (const auto& s : c.stations) arr.push_back(detail::station_to_json(s));
        j["stations"] = arr;
    }
    j["noise"] = {{"pmu_v_sigma", c.noise.pmu_v_sigma},
                  {"pmu_theta_sigma", c.noise.pmu_theta_sigma},
                  {"pseudo_sigma", c.noise.pseudo_sigma},
                  {"forecast_sigma", c.noise.forecast_sigma},
                  {"count_sigma", c.noise.count_sigma},
                  {"pseudo_count_sigma", c.noise.pseudo_count_sigma},
                  {"split_sigma", c.noise.split_sigma},
                  {"tau", c.noise.tau}};
    if (c.channel.use_ber)
        j["channel"] = {{"ber", c.channel.ber}, {"payload_bits", c.channel.payload_bits}};
    else
        j["channel"] = {{"k_gb", c.channel.k_gb}, {"k_bg", c.channel.k_bg}};
    j["regulation"] = {{"v_ref", c.regulation.v_ref},
                       {"v_min", c.regulation.v_min},
                       {"v_max", c.regulation.v_max},
                       {"backup_bus", c.backup_bus_label},
                       {"backup_capacity_pu", c.regulation.backup_capacity_pu},
                       {"backup_guard", c.regulation.backup_guard}};
    const char* mode = c.attack.mode == AttackMode::none ? "none"
                       : c.attack.mode == AttackMode::ic ? "ic"
                                                         : "sc";
    const char* eta = c.attack.eta.mode == EtaMode::exhaustive ? "exhaustive"
                      : c.attack.eta.mode == EtaMode::all_pass ? "all_pass"
                                                               : "sampled";
    j["attack"] = {{"mode", mode},
                   {"alpha_max", c.attack.alpha_max},
                   {"eta", eta},
                   {"phi_budget", c.attack.eta.phi_budget},
                   {"mc_samples", c.attack.eta.mc_samples},
                   {"start_slot", c.attack.start_slot}};
    j["seeds"] = {{"load", c.seeds.load},
                  {"stations", c.seeds.stations},
                  {"noise", c.seeds.noise},
                  {"channel", c.seeds.channel},
                  {"attack", c.seeds.attack}};
    return j;
}

inline ScenarioConfig load_scenario(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw config_error("scenario: cannot open '" + path + "'");
    Json j;
    try {
        j = Json::parse(in, nullptr, true, /*ignore_comments=*/true);
    } catch (const Json::exception& e) {
        throw config_error("scenario " + path + ": " + e.what());
    }
    return scenario_from_json(j, std::filesystem::path(path).parent_path().string());
}

}  // namespace evreg
