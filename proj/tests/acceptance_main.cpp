// End-to-end acceptance checks for the shipped scenarios and the numeric
// kernels behind them. Each criterion prints one PASS/FAIL line; the exit
// code is the number of failures. Tolerances are pinned here, not in config.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <limits>
#include <string>
#include <vector>

#include "evreg/cli.hpp"
#include "evreg/qclp.hpp"

using namespace evreg;

namespace {

std::string path(const std::string& rel) { return std::string(EVREG_SOURCE_DIR) + "/" + rel; }

int g_failures = 0;

void report(int idx, const char* label, bool ok, const std::string& detail) {
    std::printf("[%2d/10] %-34s %s  %s\n", idx, label, ok ? "PASS" : "FAIL", detail.c_str());
    std::fflush(stdout);
    if (!ok) ++g_failures;
}

std::string fmt(const char* f, ...) {
    va_list ap;
    va_start(ap, f);
    char buf[512];
    std::vsnprintf(buf, sizeof(buf), f, ap);
    va_end(ap);
    return buf;
}

struct TimedRun {
    ScenarioRun run;
    double seconds = 0.0;
};

TimedRun timed_run(const ScenarioConfig& cfg) {
    auto t0 = std::chrono::steady_clock::now();
    TimedRun out{run_scenario(cfg), 0.0};
    out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return out;
}

ScenarioConfig ideal_channel(ScenarioConfig cfg) {
    cfg.channel.use_ber = false;
    cfg.channel.k_gb = 0.0;  // good state is absorbing: every packet arrives
    cfg.channel.k_bg = 1.0;
    return cfg;
}

// All attacked slots in `run` keep the residual test quiet.
bool stealth_everywhere(const ScenarioRun& run, int& attacked, int& passed) {
    attacked = passed = 0;
    for (const auto& r : run.records) {
        if (!r.attacked) continue;
        ++attacked;
        if (r.bdd_pass) ++passed;
    }
    return attacked > 0 && passed == attacked;
}

// ---- solver oracle helpers (criterion 6) ----------------------------------

QclpConstraint ball(const Mat& s, const Vec& d, double eps) {
    QclpConstraint k;
    k.s = s;
    k.d = d;
    k.eps = eps;
    return k;
}

QclpConstraint centered_ball(int n, const Vec& center, double eps) {
    return ball(Mat::Identity(n, n), -center, eps);
}

// Minimize the worst constraint excess by projected subgradient from many
// random starts; with `level` set, beating the level joins the excess terms.
double subgradient_best(const QclpProblem& p, Rng& rng, int starts, int iters,
                        double level = std::numeric_limits<double>::quiet_NaN()) {
    const int n = int(p.c.size());
    const double cnorm = p.c.norm();
    auto eval = [&](const Vec& x, Vec& g) {
        double worst = -std::numeric_limits<double>::infinity();
        for (const auto& k : p.constraints) {
            Vec r = k.s * x + k.d;
            double rn = r.norm();
            if (rn - k.eps > worst) {
                worst = rn - k.eps;
                g = rn > 1e-12 ? Vec(k.s.transpose() * r / rn) : Vec(Vec::Zero(n));
            }
        }
        if (p.box > 0.0) {
            int arg = 0;
            double mag = x.cwiseAbs().maxCoeff(&arg);
            if (mag - p.box > worst) {
                worst = mag - p.box;
                g = Vec::Zero(n);
                g(arg) = x(arg) >= 0.0 ? 1.0 : -1.0;
            }
        }
        if (!std::isnan(level)) {
            double gap = (level - p.c.dot(x)) / cnorm;
            if (gap > worst) {
                worst = gap;
                g = -p.c / cnorm;
            }
        }
        return worst;
    };

    double best = std::numeric_limits<double>::infinity();
    for (int s = 0; s < starts; ++s) {
        Vec x(n);
        for (int i = 0; i < n; ++i) x(i) = rng.uniform(-5.0, 5.0);
        Vec g(n);
        for (int k = 1; k <= iters; ++k) {
            double f = eval(x, g);
            best = std::min(best, f);
            double gn = g.norm();
            if (gn < 1e-14) break;
            x -= (6.0 / std::sqrt(double(k))) * g / gn;
        }
        if (best < -1e-3) break;
    }
    return best;
}

}  // namespace

int main() {
    const auto cfg33_none = load_scenario(path("data/scenarios/ieee33_default.json"));
    const auto cfg33_ic = load_scenario(path("data/scenarios/ieee33_ic.json"));
    const auto cfg33_sc = load_scenario(path("data/scenarios/ieee33_sc.json"));
    const auto cfg123_none = load_scenario(path("data/scenarios/ieee123_default.json"));
    const auto cfg123_ic = load_scenario(path("data/scenarios/ieee123_ic.json"));
    const auto cfg123_sc = load_scenario(path("data/scenarios/ieee123_sc.json"));

    // 1. The linear voltage model tracks the AC oracle on the shipped 33-bus
    //    day, and a full horizon stays interactive.
    auto r33_none = timed_run(cfg33_none);
    {
        double mape = r33_none.run.metrics.mape_linear;
        bool ok = mape <= 3.0 && r33_none.seconds < 60.0;
        report(1, "linear capacity fidelity", ok,
               fmt("mape %.3f%% (limit 3%%), 144 slots in %.2fs (limit 60s)", mape,
                   r33_none.seconds));
    }

    // 2. The residual test's false-alarm rate matches its significance level.
    {
        auto ctx = build_sim_context(cfg33_none);
        Rng rng(1234);
        Vec x(ctx.m.n_state);
        for (int i = 0; i < ctx.m.n_state; ++i) x(i) = rng.normal(0.0, 0.05);
        for (int e = 0; e < ctx.m.n_station; ++e) {
            x(ctx.m.pdown_col(e)) = std::abs(x(ctx.m.pdown_col(e)));
            x(ctx.m.pup_col(e)) = std::abs(x(ctx.m.pup_col(e)));
        }
        const auto& mk = ctx.m.masked(ctx.m.full_mask());
        const int trials = 10000;
        int passed = 0;
        for (int k = 0; k < trials; ++k) {
            Vec z = ctx.m.h * x + ctx.m.h0;
            for (int i = 0; i < ctx.m.n_meas; ++i) z(i) += mk.sigma(i) * rng.normal();
            if (ctx.m.bdd(z, ctx.m.full_mask()).pass) ++passed;
        }
        double rate = double(passed) / trials;
        bool ok = std::abs(rate - 0.95) <= 0.02;
        report(2, "residual test calibration", ok,
               fmt("pass rate %.4f over %d noise-only trials (want 0.95 +- 0.02)", rate, trials));
    }

    // 3. The full-delivery attack stays invisible to the residual test, makes
    //    the operator strictly overestimate regulation capacity, and inflates
    //    the capacity error far beyond the no-attack baseline.
    auto r33_ic = timed_run(cfg33_ic);
    {
        auto ideal = timed_run(ideal_channel(cfg33_ic));
        int attacked = 0, passed = 0;
        bool stealth = stealth_everywhere(ideal.run, attacked, passed);
        const auto& m = ideal.run.metrics;
        double over = m.attacked_slots > 0
                          ? double(m.overestimated_slots) / double(m.attacked_slots)
                          : 0.0;
        double ratio = r33_ic.run.metrics.mape_vr / r33_none.run.metrics.mape_vr;
        bool ok = stealth && over >= 0.90 && ratio >= 50.0;
        report(3, "full-delivery attack stealth", ok,
               fmt("stealth %d/%d slots, overestimated %.1f%% (floor 90%%), capacity error "
                   "%.0fx baseline (floor 50x)",
                   passed, attacked, 100.0 * over, ratio));
    }

    // 4. Designing the injection against likely delivery outcomes beats the
    //    full-delivery design under the same lossy channel and seeds.
    auto r33_sc = timed_run(cfg33_sc);
    {
        double gap = r33_sc.run.metrics.bdd_pass_rate - r33_ic.run.metrics.bdd_pass_rate;
        int inc_sc = r33_sc.run.metrics.undervoltage_incidents;
        int inc_ic = r33_ic.run.metrics.undervoltage_incidents;
        double pair_s = r33_ic.seconds + r33_sc.seconds;
        bool ok = gap >= 10.0 && inc_sc >= inc_ic && pair_s < 600.0;
        report(4, "outcome-aware attack dominance", ok,
               fmt("pass-rate gap %.2fpp (floor 10), incidents %d >= %d, pair in %.1fs "
                   "(limit 600s)",
                   gap, inc_sc, inc_ic, pair_s));
    }

    // 5. Undervoltage happens exactly when an attack is present.
    {
        int n0 = r33_none.run.metrics.undervoltage_incidents;
        int ni = r33_ic.run.metrics.undervoltage_incidents;
        int ns = r33_sc.run.metrics.undervoltage_incidents;
        int nc = r33_ic.run.metrics.undervoltage_incidents_clean +
                 r33_sc.run.metrics.undervoltage_incidents_clean;
        bool ok = n0 == 0 && ni >= 1 && ns >= 1 && nc == 0;
        report(5, "attack-caused undervoltage", ok,
               fmt("incidents: none %d (want 0), attacked %d and %d (want >= 1), "
                   "paired clean replays %d (want 0)",
                   n0, ni, ns, nc));
    }

    // 6. The constrained solver agrees with independent oracles.
    {
        std::string why;
        bool ok = true;

        {  // closed form: single ball, centered and shifted
            Vec c(4);
            c << 1.0, -2.0, 0.5, 3.0;
            const double eps = 2.5;
            QclpProblem p;
            p.c = c;
            p.constraints.push_back(centered_ball(4, Vec::Zero(4), eps));
            auto sol = qclp_solve(p);
            if (sol.status != QclpStatus::optimal ||
                std::abs(sol.objective - eps * c.norm()) > 1e-6)
                ok = false, why += "centered ball off; ";

            Vec center(4);
            center << 0.3, -1.1, 2.0, 0.7;
            p.constraints[0] = centered_ball(4, center, eps);
            sol = qclp_solve(p);
            if (sol.status != QclpStatus::optimal ||
                std::abs(sol.objective - (c.dot(center) + eps * c.norm())) > 1e-6)
                ok = false, why += "shifted ball off; ";
        }

        {  // two overlapping unit balls: apex of the lens, grid-checked
            QclpProblem p;
            p.c = Vec(2);
            p.c << 0.0, 1.0;
            Vec c2(2);
            c2 << 1.5, 0.0;
            p.constraints.push_back(centered_ball(2, Vec::Zero(2), 1.0));
            p.constraints.push_back(centered_ball(2, c2, 1.0));
            auto sol = qclp_solve(p);
            double best = 0.0;
            const int cells = 1'000'000;
            for (int i = 0; i <= cells; ++i) {
                double x = 0.5 + 0.5 * double(i) / double(cells);
                double y1 = std::sqrt(std::max(0.0, 1.0 - x * x));
                double y2 = std::sqrt(std::max(0.0, 1.0 - (x - 1.5) * (x - 1.5)));
                best = std::max(best, std::min(y1, y2));
            }
            if (sol.status != QclpStatus::optimal || std::abs(sol.objective - best) > 1e-4)
                ok = false, why += "lens apex off; ";
        }

        int agree = 0;
        const int instances = 100;
        {  // random feasibility calls vs the multi-start oracle
            Rng rng(0x51a7e3ULL);
            const int n = 10;
            for (int inst = 0; inst < instances; ++inst) {
                QclpProblem p;
                p.c = Vec(n);
                for (int i = 0; i < n; ++i) p.c(i) = rng.normal();
                if (p.c.norm() < 0.1) p.c(0) += 1.0;
                Vec anchor(n);
                for (int i = 0; i < n; ++i) anchor(i) = rng.normal();
                if (rng.bernoulli(0.4)) {
                    Mat s = Mat::Identity(n, n);
                    for (int r = 0; r < n; ++r)
                        for (int q = 0; q < n; ++q) s(r, q) += 0.3 * rng.normal();
                    double e1 = rng.uniform(0.5, 1.5), e2 = rng.uniform(0.5, 1.5);
                    Vec w(n);
                    for (int i = 0; i < n; ++i) w(i) = rng.normal();
                    w.normalize();
                    Vec d1 = -s * anchor;
                    Vec d2 = d1 + rng.uniform(1.3, 2.0) * (e1 + e2) * w;
                    p.constraints.push_back(ball(s, d1, e1));
                    p.constraints.push_back(ball(s, d2, e2));
                } else {
                    int balls = 1 + int(rng.below(3));
                    for (int j = 0; j < balls; ++j) {
                        int m = 5 + int(rng.below(8));
                        Mat s(m, n);
                        for (int r = 0; r < m; ++r)
                            for (int q = 0; q < n; ++q)
                                s(r, q) = rng.normal() / std::sqrt(double(n));
                        double eps = rng.uniform(0.5, 2.5);
                        Vec u(m);
                        for (int r = 0; r < m; ++r) u(r) = rng.normal();
                        u.normalize();
                        Vec d = rng.uniform(0.0, 1.6) * eps * u - s * anchor;
                        p.constraints.push_back(ball(s, d, eps));
                    }
                }
                p.box = 6.0;

                auto sol = qclp_solve(p, 1e-8);
                auto feas = qclp_feasible(p, 1e-8);
                bool inst_ok = feas.feasible == (sol.status == QclpStatus::optimal);
                if (sol.status == QclpStatus::optimal) {
                    double mineps = std::numeric_limits<double>::infinity();
                    for (const auto& k : p.constraints) mineps = std::min(mineps, k.eps);
                    double margin = 1e-3 * (1.0 + std::abs(sol.objective));
                    inst_ok = inst_ok && sol.max_violation <= 1e-6 * mineps &&
                              subgradient_best(p, rng, 60, 2500, sol.objective + margin) > 0.0;
                } else {
                    inst_ok = inst_ok && subgradient_best(p, rng, 60, 2500) > -1e-6;
                }
                if (inst_ok) ++agree;
            }
            if (agree != instances) ok = false, why += "random instances disagree; ";
        }

        report(6, "constrained solver vs oracles", ok,
               fmt("%sclosed form 1e-6, lens grid 1e-4, random agreement %d/%d", why.c_str(),
                   agree, instances));
    }

    // 7. The station count chain and the loss chain match their analytic laws.
    {
        auto ctx = build_sim_context(cfg33_none);
        StationConfig st = ctx.st_cfgs[0];
        double tau = st.subslot_hours();
        const int n0 = 8;
        auto pmf = count_transition_pmf(n0, st, tau);
        Rng rng(0x5eedc0de);
        std::vector<double> emp(n0 + 2, 0.0);
        const int trials = 1000000;
        double q_a = st.lambda_per_hour * tau, q_d = st.mu_per_hour * tau;
        for (int k = 0; k < trials; ++k) {
            int next = n0;
            for (int j = 0; j < n0; ++j)
                if (rng.bernoulli(q_d)) --next;
            if (rng.bernoulli(q_a)) ++next;
            emp[next] += 1.0;
        }
        double tv = 0.0;
        for (int j = 0; j < n0 + 2; ++j) tv += std::abs(emp[j] / trials - pmf[j]);
        tv /= 2.0;

        ChannelParams p = ChannelParams::uniform(1, 0.02, 0.08);  // slow-mixing chain
        Rng crng(5);
        auto states = initial_states(p, crng);
        long good = 0;
        const int steps = 1000000;
        for (int s = 0; s < steps; ++s) good += sample_outcome(p, states, crng).phi[0];
        double frac = double(good) / steps;
        double want = stationary(0.02, 0.08).first;

        bool ok = tv < 0.005 && std::abs(frac - want) <= 0.003;
        report(7, "count and loss chain oracles", ok,
               fmt("count pmf TV %.5f (limit 0.005), delivery fraction %.4f vs %.4f "
                   "(margin 0.003)",
                   tv, frac, want));
    }

    // 8. Closed-form station capacity coefficients match a large synthetic
    //    EV population, in both charging-discipline modes.
    {
        auto ctx = build_sim_context(cfg33_none);
        bool ok = true;
        std::string detail;
        for (auto mode : {VrMode::strict, VrMode::flexible}) {
            StationConfig cfg = ctx.st_cfgs[0];
            cfg.mode = mode;
            auto c = capacity_coefficients(cfg);

            Rng rng(mode == VrMode::strict ? 0x11111111 : 0x22222222);
            double dt = cfg.dt_hours();
            double t_charge = 0, t_idle = 0, up_i = 0, down_i = 0, up_c = 0, pw_c = 0;
            const int trials = 1000000;
            for (int k = 0; k < trials; ++k) {
                double e_b = cfg.battery.level[rng.categorical(cfg.battery.prob)];
                double p_c = cfg.power.level[rng.categorical(cfg.power.prob)];
                double s_i = cfg.init_soc.sample(rng);
                double park_h = cfg.parking.sample(rng);
                int tp = std::max(1, int(std::ceil(park_h / dt - 1e-12)));
                int tc = charge_time(s_i, cfg.target_soc, e_b, p_c, dt);
                int tv = vr_slots(tp, tc);
                int ch = std::min(tc, tp);
                int id = std::max(tp - tc, 0);
                bool down_ok = s_i + p_c * dt / e_b <= cfg.target_soc + 1e-12;
                t_charge += ch;
                t_idle += id;
                pw_c += double(ch) * p_c;
                up_i += double(tv) * p_c;
                if (down_ok) down_i += double(id - tv) * p_c;
                if (mode == VrMode::flexible && tv > 0) up_c += double(ch) * 2.0 * p_c;
            }
            double mc_iu = up_i / t_idle, mc_id = down_i / t_idle, mc_pw = pw_c / t_charge;
            double worst = std::max({std::abs(c.p_iu - mc_iu) / mc_iu,
                                     std::abs(c.p_id - mc_id) / mc_id,
                                     std::abs(c.mean_power_charging - mc_pw) / mc_pw});
            if (mode == VrMode::flexible) {
                double mc_cu = up_c / t_charge;
                worst = std::max(worst, std::abs(c.p_cu - mc_cu) / mc_cu);
            } else if (c.p_cu != 0.0 || c.p_cd != 0.0) {
                worst = 1.0;
            }
            ok = ok && worst < 0.02;
            detail += fmt("%s %.2f%% ", mode == VrMode::strict ? "strict" : "flexible",
                          100.0 * worst);
        }
        report(8, "capacity coefficients vs trace", ok,
               detail + "max relative error per 1e6-EV trace (limit 2%)");
    }

    // 9. The whole pipeline scales to the 123-bus feeder with the same
    //    attack-effect inequalities.
    {
        auto r123_none = timed_run(cfg123_none);
        auto r123_ic = timed_run(cfg123_ic);
        auto r123_sc = timed_run(cfg123_sc);
        auto ideal = timed_run(ideal_channel(cfg123_ic));

        int attacked = 0, passed = 0;
        bool stealth = stealth_everywhere(ideal.run, attacked, passed);
        const auto& mi = ideal.run.metrics;
        double over =
            mi.attacked_slots > 0 ? double(mi.overestimated_slots) / mi.attacked_slots : 0.0;
        double ratio = r123_ic.run.metrics.mape_vr / r123_none.run.metrics.mape_vr;
        double gap = r123_sc.run.metrics.bdd_pass_rate - r123_ic.run.metrics.bdd_pass_rate;
        int inc0 = r123_none.run.metrics.undervoltage_incidents;
        int inc_ic = r123_ic.run.metrics.undervoltage_incidents;
        int inc_sc = r123_sc.run.metrics.undervoltage_incidents;

        bool ok = r123_sc.seconds < 1800.0 && stealth && over >= 0.90 && ratio >= 50.0 &&
                  gap >= 10.0 && inc_sc >= inc_ic && inc0 == 0 && inc_ic >= 1 && inc_sc >= 1;
        report(9, "123-bus scale and inequalities", ok,
               fmt("sc run %.1fs (limit 1800s); stealth %d/%d, overest %.1f%%, error %.0fx, "
                   "gap %.2fpp, incidents %d/%d/%d",
                   r123_sc.seconds, passed, attacked, 100.0 * over, ratio, gap, inc0,
                   inc_ic, inc_sc));
    }

    // 10. Identical config and seeds reproduce the per-slot table bytewise.
    {
        auto a = run_scenario(cfg33_none);
        auto b = run_scenario(cfg33_none);
        auto c = run_scenario(cfg33_ic);
        auto d = run_scenario(cfg33_ic);
        bool ok = slots_csv(a.records) == slots_csv(b.records) &&
                  slots_csv(c.records) == slots_csv(d.records);
        report(10, "bytewise determinism", ok,
               ok ? "repeated runs match on both a clean and an attacked scenario"
                  : "repeated runs differ");
    }

    if (g_failures == 0) std::printf("all criteria satisfied\n");
    else std::printf("%d criteria failed\n", g_failures);
    return g_failures;
}
