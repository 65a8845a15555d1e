#pragma once

#include <atomic>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <thread>

#include <CLI11.hpp>

#include "sim.hpp"

namespace evreg {

namespace detail {

// --seed N fans out to the per-purpose streams with fixed offsets
inline void apply_seed_override(ScenarioConfig& cfg, uint64_t seed) {
    cfg.seeds.load = seed;
    cfg.seeds.stations = seed + 1;
    cfg.seeds.noise = seed + 2;
    cfg.seeds.channel = seed + 3;
    cfg.seeds.attack = seed + 4;
}

inline void write_text(const std::filesystem::path& p, const std::string& text) {
    std::ofstream out(p, std::ios::binary);
    if (!out) throw config_error("cannot write '" + p.string() + "'");
    out << text;
    if (!out) throw config_error("short write on '" + p.string() + "'");
}

inline void write_run_outputs(const ScenarioRun& run, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    write_text(dir / "slots.csv", slots_csv(run.records));
    write_text(dir / "metrics.json", metrics_to_json(run.metrics).dump(2) + "\n");
    write_text(dir / "config.resolved.json", scenario_to_json(run.cfg).dump(2) + "\n");
}

inline std::string run_summary(const ScenarioRun& run) {
    std::ostringstream os;
    const auto& m = run.metrics;
    os << "slots=" << m.horizon << " errors=" << m.error_slots
       << " bdd_pass_rate=" << csv_num(m.bdd_pass_rate)
       << " undervoltage=" << m.undervoltage_incidents;
    if (!std::isnan(m.mape_vr)) os << " mape_vr=" << csv_num(m.mape_vr);
    if (!std::isnan(m.mape_linear)) os << " mape_linear=" << csv_num(m.mape_linear);
    return os.str();
}

// write `value` at a dotted path like "attack.mode", creating objects on the way
inline void set_dotted(Json& root, const std::string& path, const Json& value) {
    Json* cur = &root;
    size_t start = 0;
    for (;;) {
        size_t dot = path.find('.', start);
        std::string key =
            dot == std::string::npos ? path.substr(start) : path.substr(start, dot - start);
        if (key.empty()) throw config_error("sweep: empty segment in grid key '" + path + "'");
        if (dot == std::string::npos) {
            (*cur)[key] = value;
            return;
        }
        Json& next = (*cur)[key];
        if (next.is_null()) next = Json::object();
        if (!next.is_object())
            throw config_error("sweep: grid key '" + path + "' descends into a non-object");
        cur = &next;
        start = dot + 1;
    }
}

inline std::string dir_token(const Json& v) {
    std::string s = v.is_string() ? v.get<std::string>() : v.dump();
    for (char& c : s)
        if (c == '/' || c == '\\' || c == ' ' || c == '"') c = '-';
    return s;
}

}  // namespace detail

// Reference figures that bypass the estimator entirely: the ground-truth side
// of the loop scored by the AC solver against the linear headroom functional,
// plus the station capacity map the measurement model embeds.
inline Json oracle_report(const ScenarioConfig& cfg) {
    SimContext ctx = build_sim_context(cfg);
    const Feeder& f = ctx.f;
    const MeasurementModel& m = ctx.m;
    const int nb = f.n_bus;
    const int ns = int(f.evcs_buses.size());

    std::vector<StationTrace> traces;
    traces.reserve(ns);
    for (int e = 0; e < ns; ++e)
        traces.push_back(
            simulate_station(ctx.st_cfgs[e], cfg.horizon_slots, cfg.seeds.stations + uint64_t(e)));

    Rng rng_load(cfg.seeds.load);
    double sum_rel = 0.0, worst_rel = 0.0, vmin = std::numeric_limits<double>::infinity();
    int n_rel = 0;
    for (int t = 0; t < cfg.horizon_slots; ++t) {
        double hour = std::fmod((t + 0.5) * cfg.slot_minutes / 60.0, 24.0);
        double fac = cfg.load.factor(hour);
        double js = cfg.load.jitter_sigma;
        Vec p_inj = Vec::Zero(nb), q_inj = Vec::Zero(nb);
        for (int b = 1; b < nb; ++b) {
            double jit = std::exp(js * rng_load.normal() - 0.5 * js * js);
            p_inj(b) = -f.load_p_kw[b] * fac * jit / m.kw_scale;
            q_inj(b) = -f.load_q_kvar[b] * fac * jit / m.kw_scale;
        }
        Vec x_true = Vec::Zero(m.n_state);
        for (int b = 1; b < nb; ++b) {
            x_true(m.p_col(b)) = p_inj(b);
            x_true(m.q_col(b)) = q_inj(b);
        }
        Vec p2 = p_inj;
        for (int e = 0; e < ns; ++e) {
            double ev_pu = traces[e].load_kw[t] / m.kw_scale;
            p_inj(m.station_bus[e]) -= ev_pu;
            p2(m.station_bus[e]) -= ev_pu;
            double up_pu = traces[e].p_up_kw[t] / m.kw_scale;
            x_true(m.pdown_col(e)) = traces[e].p_down_kw[t] / m.kw_scale;
            x_true(m.pup_col(e)) = up_pu;
            p2(m.station_bus[e]) += up_pu;
        }
        double lin_dv = ctx.v_state.dot(x_true);
        VoltageProfile vt = ac_power_flow(f, p_inj, q_inj);
        VoltageProfile v2 = ac_power_flow(f, p2, q_inj);
        vmin = std::min(vmin, vt.v.tail(nb - 1).minCoeff());
        double ac_dv = 0.0;
        for (int mb : f.monitor_buses) ac_dv += v2.v(mb) - vt.v(mb);
        if (std::abs(ac_dv) > 1e-12) {
            double rel = std::abs(lin_dv - ac_dv) / std::abs(ac_dv);
            sum_rel += rel;
            worst_rel = std::max(worst_rel, rel);
            ++n_rel;
        }
    }

    Json j;
    j["feeder"] = cfg.feeder;
    j["n_bus"] = nb;
    j["n_sensors"] = int(m.sensors.size());
    j["n_state"] = m.n_state;
    j["n_meas"] = m.n_meas;
    j["dof"] = m.dof;
    j["epsilon"] = m.epsilon;
    Json stations = Json::array();
    for (int e = 0; e < ns; ++e) {
        const auto& c = ctx.coeffs[e];
        stations.push_back({{"bus", m.station_bus[e] + 1},
                            {"p_id_kw", c.p_id},
                            {"p_cd_kw", c.p_cd},
                            {"p_iu_kw", c.p_iu},
                            {"p_cu_kw", c.p_cu},
                            {"prob_charging", c.prob_charging},
                            {"mean_power_charging_kw", c.mean_power_charging}});
    }
    j["stations"] = stations;
    Json lva;
    lva["slots"] = cfg.horizon_slots;
    lva["scored_slots"] = n_rel;
    if (n_rel > 0) {
        lva["mape_pct"] = 100.0 * sum_rel / n_rel;
        lva["max_rel_error_pct"] = 100.0 * worst_rel;
    }
    lva["min_voltage_unregulated"] = vmin;
    j["linear_vs_ac"] = lva;
    return j;
}

namespace detail {

struct SweepRow {
    bool ok = false;
    std::string dir;
    std::string message;
    std::vector<std::string> values;  // grid values, aligned with the key order
    MetricsReport metrics;
};

}  // namespace detail

inline int cli_sweep(const std::string& sweep_path, const std::string& out_dir, bool seed_set,
                     uint64_t seed, int jobs, bool quiet, std::ostream& out) {
    namespace fs = std::filesystem;
    std::ifstream in(sweep_path);
    if (!in) throw config_error("sweep: cannot open '" + sweep_path + "'");
    Json sj;
    try {
        sj = Json::parse(in, nullptr, true, /*ignore_comments=*/true);
    } catch (const Json::exception& e) {
        throw config_error("sweep " + sweep_path + ": " + e.what());
    }
    detail::check_keys(sj, {"base", "config", "grid"}, "sweep");

    Json base_json;
    std::string base_dir;
    if (sj.contains("base") && sj.contains("config"))
        throw config_error("sweep: give either 'base' or 'config', not both");
    if (sj.contains("base")) {
        fs::path bp(sj.at("base").get<std::string>());
        if (bp.is_relative()) bp = fs::path(sweep_path).parent_path() / bp;
        std::ifstream bin(bp);
        if (!bin) throw config_error("sweep: cannot open base config '" + bp.string() + "'");
        try {
            base_json = Json::parse(bin, nullptr, true, true);
        } catch (const Json::exception& e) {
            throw config_error("sweep base " + bp.string() + ": " + e.what());
        }
        base_dir = bp.parent_path().string();
    } else if (sj.contains("config")) {
        base_json = sj.at("config");
        base_dir = fs::path(sweep_path).parent_path().string();
    } else {
        throw config_error("sweep: need 'base' or 'config'");
    }

    if (!sj.contains("grid") || !sj.at("grid").is_object() || sj.at("grid").empty())
        throw config_error("sweep: empty grid");
    const Json& grid = sj.at("grid");
    std::vector<std::string> keys;
    std::vector<std::vector<Json>> values;
    size_t n_points = 1;
    for (auto it = grid.begin(); it != grid.end(); ++it) {
        if (!it.value().is_array() || it.value().empty())
            throw config_error("sweep: grid key '" + it.key() + "' needs a nonempty array");
        keys.push_back(it.key());
        values.emplace_back(it.value().begin(), it.value().end());
        n_points *= it.value().size();
    }

    // row-major cartesian product over the (alphabetical) key order
    std::vector<std::vector<size_t>> pick(n_points, std::vector<size_t>(keys.size(), 0));
    for (size_t p = 0; p < n_points; ++p) {
        size_t rem = p;
        for (size_t k = keys.size(); k-- > 0;) {
            pick[p][k] = rem % values[k].size();
            rem /= values[k].size();
        }
    }

    fs::create_directories(out_dir);
    std::vector<detail::SweepRow> rows(n_points);
    std::atomic<size_t> next{0};
    auto work = [&]() {
        for (;;) {
            size_t p = next.fetch_add(1);
            if (p >= n_points) return;
            detail::SweepRow& row = rows[p];
            std::ostringstream name;
            name << std::setw(3) << std::setfill('0') << p;
            for (size_t k = 0; k < keys.size(); ++k) {
                row.values.push_back(detail::dir_token(values[k][pick[p][k]]));
                name << "_" << keys[k] << "=" << row.values.back();
            }
            row.dir = name.str();
            try {
                Json patched = base_json;
                for (size_t k = 0; k < keys.size(); ++k)
                    detail::set_dotted(patched, keys[k], values[k][pick[p][k]]);
                ScenarioConfig cfg = scenario_from_json(patched, base_dir);
                if (seed_set) detail::apply_seed_override(cfg, seed);
                ScenarioRun run = run_scenario(cfg);
                detail::write_run_outputs(run, fs::path(out_dir) / row.dir);
                row.metrics = run.metrics;
                row.ok = true;
            } catch (const std::exception& e) {
                row.message = e.what();
            }
        }
    };
    int n_workers = std::clamp<int>(jobs, 1, int(n_points));
    std::vector<std::thread> pool;
    for (int w = 1; w < n_workers; ++w) pool.emplace_back(work);
    work();
    for (auto& th : pool) th.join();

    std::ostringstream csv;
    csv << "point,dir,status,message";
    for (const auto& k : keys) csv << ',' << detail::csv_text(k);
    csv << ",horizon,valid_slots,error_slots,bdd_pass_rate,mape_vr,mape_vr_clean,mape_linear,"
           "undervoltage_incidents,undervoltage_incidents_clean,attacked_slots,"
           "overestimated_slots\n";
    bool any_failed = false;
    for (size_t p = 0; p < n_points; ++p) {
        const auto& row = rows[p];
        csv << p << ',' << detail::csv_text(row.dir) << ',' << (row.ok ? "ok" : "error") << ','
            << detail::csv_text(row.message);
        for (const auto& v : row.values) csv << ',' << detail::csv_text(v);
        auto num = [&](double x) { return std::isnan(x) ? std::string() : detail::csv_num(x); };
        const auto& m = row.metrics;
        csv << ',' << m.horizon << ',' << m.valid_slots << ',' << m.error_slots << ','
            << detail::csv_num(m.bdd_pass_rate) << ',' << num(m.mape_vr) << ','
            << num(m.mape_vr_clean) << ',' << num(m.mape_linear) << ','
            << m.undervoltage_incidents << ',' << m.undervoltage_incidents_clean << ','
            << m.attacked_slots << ',' << m.overestimated_slots << '\n';
        if (!row.ok) any_failed = true;
    }
    detail::write_text(fs::path(out_dir) / "sweep_summary.csv", csv.str());
    if (!quiet) {
        for (size_t p = 0; p < n_points; ++p)
            out << "[" << (rows[p].ok ? "ok" : "error") << "] " << rows[p].dir
                << (rows[p].ok ? "" : ": " + rows[p].message) << "\n";
        out << "wrote " << (fs::path(out_dir) / "sweep_summary.csv").string() << "\n";
    }
    return any_failed ? 3 : 0;
}

inline int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"EV-charging-station voltage regulation, state estimation and "
                 "false-data-injection studies on radial feeders"};
    app.require_subcommand(1);

    std::string config_path, out_dir;
    uint64_t seed = 0;
    int jobs = 1;
    bool quiet = false;

    auto* cmd_run = app.add_subcommand("run", "run one scenario and write its artifacts");
    cmd_run->add_option("--config", config_path, "scenario config (json)")->required();
    cmd_run->add_option("--out", out_dir, "output directory")->required();
    auto* seed_run = cmd_run->add_option("--seed", seed, "override every seed stream");
    cmd_run->add_flag("--quiet", quiet, "suppress the summary line");

    auto* cmd_sweep = app.add_subcommand("sweep", "run a parameter grid of scenarios");
    cmd_sweep->add_option("--config", config_path, "sweep config (json)")->required();
    cmd_sweep->add_option("--out", out_dir, "output directory")->required();
    auto* seed_sweep = cmd_sweep->add_option("--seed", seed, "override every seed stream");
    cmd_sweep->add_option("--jobs", jobs, "worker threads")->check(CLI::PositiveNumber);
    cmd_sweep->add_flag("--quiet", quiet, "suppress per-point lines");

    auto* cmd_validate =
        app.add_subcommand("validate", "check a config and print its resolved form");
    cmd_validate->add_option("--config", config_path, "scenario config (json)")->required();

    auto* cmd_oracle =
        app.add_subcommand("oracle", "model reference figures without the estimation loop");
    cmd_oracle->add_option("--config", config_path, "scenario config (json)")->required();
    auto* seed_oracle = cmd_oracle->add_option("--seed", seed, "override every seed stream");

    std::vector<const char*> argv;
    argv.reserve(args.size() + 1);
    argv.push_back("evreg");
    for (const auto& a : args) argv.push_back(a.c_str());
    try {
        app.parse(int(argv.size()), argv.data());
    } catch (const CLI::ParseError& e) {
        int rc = app.exit(e, out, err);
        return rc == 0 ? 0 : 2;
    }

    try {
        if (cmd_run->parsed()) {
            ScenarioConfig cfg = load_scenario(config_path);
            if (seed_run->count() > 0) detail::apply_seed_override(cfg, seed);
            validate_scenario(cfg);  // fail before touching the output directory
            ScenarioRun run = run_scenario(cfg);
            detail::write_run_outputs(run, out_dir);
            if (!quiet) {
                out << detail::run_summary(run) << "\n";
                out << "wrote " << (std::filesystem::path(out_dir) / "slots.csv").string()
                    << ", metrics.json, config.resolved.json\n";
            }
            return 0;
        }
        if (cmd_sweep->parsed())
            return cli_sweep(config_path, out_dir, seed_sweep->count() > 0, seed, jobs, quiet,
                             out);
        if (cmd_validate->parsed()) {
            ScenarioConfig cfg = load_scenario(config_path);
            validate_scenario(cfg);
            out << scenario_to_json(cfg).dump(2) << "\n";
            return 0;
        }
        if (cmd_oracle->parsed()) {
            ScenarioConfig cfg = load_scenario(config_path);
            if (seed_oracle->count() > 0) detail::apply_seed_override(cfg, seed);
            out << oracle_report(cfg).dump(2) << "\n";
            return 0;
        }
    } catch (const config_error& e) {
        err << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 3;
    }
    return 2;
}

}  // namespace evreg
