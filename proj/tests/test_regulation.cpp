#include <catch2/catch_amalgamated.hpp>

#include "evreg/regulation.hpp"
#include "helpers.hpp"

using namespace evreg;
using evreg::test::ieee33;

namespace {

// loads as negative injections, optionally scaled
std::pair<Vec, Vec> injections(const Feeder& f, double scale = 1.0) {
    Vec p = Vec::Zero(f.n_bus), q = Vec::Zero(f.n_bus);
    for (int b = 0; b < f.n_bus; ++b) {
        p(b) = -scale * f.kw_to_pu(f.load_p_kw[b]);
        q(b) = -scale * f.kw_to_pu(f.load_q_kvar[b]);
    }
    return {p, q};
}

StateVector zero_state(int n_bus, int n_station) {
    StateVector x;
    x.p = Vec::Zero(n_bus - 1);
    x.q = Vec::Zero(n_bus - 1);
    x.p_down = Vec::Zero(n_station);
    x.p_up = Vec::Zero(n_station);
    return x;
}

// independent high-precision reference for the dispatch QP
double projected_gradient_objective(const Mat& s, const Vec& r, const Vec& lo, const Vec& hi,
                                    int n_bus) {
    Mat a = 2.0 * s.transpose() * s;
    Vec b = 2.0 * s.transpose() * r;
    double lips = 0.0;
    for (int i = 0; i < a.rows(); ++i) lips = std::max(lips, a.row(i).cwiseAbs().sum());
    double step = 1.0 / lips;
    Vec d = 0.5 * (lo + hi);
    for (int it = 0; it < 500000; ++it) {
        Vec g = a * d - b;
        Vec next = (d - step * g).cwiseMax(lo).cwiseMin(hi);
        if ((next - d).norm() < 1e-15) {
            d = next;
            break;
        }
        d = next;
    }
    return (r - s * d).squaredNorm() / double(n_bus);
}

}  // namespace

TEST_CASE("capacity metric: zero without up-capacity, linear otherwise", "[regulation]") {
    Feeder f = ieee33();
    auto lin = build_linear_model(f);
    std::vector<int> stations = f.evcs_buses;    // internal 17, 32
    std::vector<int> monitored = f.monitor_buses;

    auto x = zero_state(f.n_bus, 2);
    CHECK(capacity_metric(x, lin, stations, monitored) == 0.0);

    x.p_up << 0.1, 0.2;
    double expect = 0.0;
    for (int n : monitored)
        expect += lin.s_vp(n - 1, 16) * 0.1 + lin.s_vp(n - 1, 31) * 0.2;
    double dv = capacity_metric(x, lin, stations, monitored);
    CHECK(std::abs(dv - expect) < 1e-15);
    CHECK(dv > 0.0);

    auto x3 = x;
    x3.p_up *= 3.0;
    CHECK(std::abs(capacity_metric(x3, lin, stations, monitored) - 3.0 * dv) < 1e-15);

    // single station, single monitored bus: one sensitivity term
    auto x1 = zero_state(f.n_bus, 1);
    x1.p_up << 0.25;
    double one = capacity_metric(x1, lin, {17}, {30});
    CHECK(std::abs(one - lin.s_vp(29, 16) * 0.25) < 1e-15);

    CHECK_THROWS_AS(capacity_metric(x1, lin, {0}, {30}), config_error);
    CHECK_THROWS_AS(capacity_metric(x1, lin, {17}, {33}), config_error);
    CHECK_THROWS_AS(capacity_metric(x, lin, {17}, {30}), config_error);  // count mismatch
}

TEST_CASE("capacity row reproduces the metric on flat states", "[regulation]") {
    Feeder f = ieee33();
    auto lin = build_linear_model(f);
    std::vector<int> stations = f.evcs_buses;
    std::vector<int> monitored = f.monitor_buses;

    Vec row = capacity_row(lin, stations, monitored);
    REQUIRE(row.size() == 2 * (f.n_bus - 1) + 4);

    // only the up-capacity block is active
    for (int i = 0; i < 2 * (f.n_bus - 1) + 2; ++i) CHECK(row(i) == 0.0);
    CHECK(row(2 * (f.n_bus - 1) + 2) != 0.0);

    Rng rng(0xf00dULL);
    for (int trial = 0; trial < 5; ++trial) {
        StateVector x;
        x.p = Vec::NullaryExpr(f.n_bus - 1, [&](Eigen::Index) { return rng.normal(); });
        x.q = Vec::NullaryExpr(f.n_bus - 1, [&](Eigen::Index) { return rng.normal(); });
        x.p_down = Vec::NullaryExpr(2, [&](Eigen::Index) { return std::abs(rng.normal()); });
        x.p_up = Vec::NullaryExpr(2, [&](Eigen::Index) { return std::abs(rng.normal()); });
        double via_row = row.dot(x.flat());
        double direct = capacity_metric(x, lin, stations, monitored);
        CHECK(std::abs(via_row - direct) < 1e-12);
    }
}

TEST_CASE("capacity metric tracks the AC voltage rise", "[regulation]") {
    Feeder f = ieee33();
    auto lin = build_linear_model(f);
    auto [p, q] = injections(f);
    std::vector<int> stations = f.evcs_buses;

    auto x = zero_state(f.n_bus, 2);
    x.p_up << 0.2, 0.2;

    auto before = ac_power_flow(f, p, q);
    Vec p_after = p;
    for (size_t e = 0; e < stations.size(); ++e) p_after(stations[e]) += x.p_up(int(e));
    auto after = ac_power_flow(f, p_after, q);

    double ac_sum = 0.0;
    for (int n : f.monitor_buses) {
        double ac_rise = after.v(n) - before.v(n);
        double lin_rise = lin.s_vp(n - 1, 16) * 0.2 + lin.s_vp(n - 1, 31) * 0.2;
        CHECK(std::abs(lin_rise - ac_rise) <= 0.01);
        ac_sum += ac_rise;
    }
    double metric = capacity_metric(x, lin, stations, f.monitor_buses);
    CHECK(std::abs(metric - ac_sum) <= 0.01 * double(f.monitor_buses.size()));
}

TEST_CASE("dispatch leaves a flat profile alone", "[regulation]") {
    Feeder f = ieee33();
    auto lin = build_linear_model(f);
    VoltageProfile flat{Vec::Ones(f.n_bus), Vec::Zero(f.n_bus)};
    VrLimits lim;
    lim.backup_bus = 5;
    lim.backup_capacity_pu = 1.0;

    Vec down = Vec::Constant(2, 0.1), up = Vec::Constant(2, 0.1);
    auto req = dispatch(flat, down, up, lin, f.evcs_buses, f.monitor_buses, lim);
    CHECK(req.station_delta.cwiseAbs().maxCoeff() < 1e-12);
    CHECK(req.backup_delta == 0.0);
    CHECK(req.objective < 1e-24);
    CHECK(req.band_violation == 0.0);
}

TEST_CASE("single-station dispatch pushes to the bound when capacity binds", "[regulation]") {
    Feeder f = ieee33();
    auto lin = build_linear_model(f);
    auto [p, q] = injections(f, 1.3);
    auto v_now = ac_power_flow(f, p, q);
    std::vector<int> station{32};
    VrLimits lim;

    // scalar least squares: delta* = s.r / s.s
    Vec r(f.n_bus - 1), s(f.n_bus - 1);
    for (int n = 1; n < f.n_bus; ++n) {
        r(n - 1) = lim.v_ref - v_now.v(n);
        s(n - 1) = lin.s_vp(n - 1, 31);
    }
    double unconstrained = s.dot(r) / s.squaredNorm();
    REQUIRE(unconstrained > 0.0);

    Vec down = Vec::Constant(1, 0.0);
    Vec roomy = Vec::Constant(1, 2.0 * unconstrained);
    auto free_req = dispatch(v_now, down, roomy, lin, station, f.monitor_buses, lim);
    CHECK(std::abs(free_req.station_delta(0) - unconstrained) < 1e-9);

    Vec tight = Vec::Constant(1, 0.5 * unconstrained);
    auto tight_req = dispatch(v_now, down, tight, lin, station, f.monitor_buses, lim);
    CHECK(std::abs(tight_req.station_delta(0) - tight(0)) < 1e-12);
    CHECK(tight_req.objective > free_req.objective);
}

TEST_CASE("dispatch matches a projected-gradient reference on a peak snapshot", "[regulation]") {
    Feeder f = ieee33();
    auto lin = build_linear_model(f);
    auto [p, q] = injections(f, 1.25);
    auto v_now = ac_power_flow(f, p, q);
    VrLimits lim;

    Vec down(2), up(2);
    down << 0.05, 0.05;
    up << 0.15, 0.12;
    auto req = dispatch(v_now, down, up, lin, f.evcs_buses, f.monitor_buses, lim);

    Vec r(f.n_bus - 1);
    Mat s(f.n_bus - 1, 2);
    for (int n = 1; n < f.n_bus; ++n) {
        r(n - 1) = lim.v_ref - v_now.v(n);
        s(n - 1, 0) = lin.s_vp(n - 1, 16);
        s(n - 1, 1) = lin.s_vp(n - 1, 31);
    }
    double f_dispatch = (r - s * req.station_delta).squaredNorm() / double(f.n_bus);
    CHECK(std::abs(f_dispatch - req.objective) < 1e-12);

    double f_oracle = projected_gradient_objective(s, r, -down, up, f.n_bus);
    CHECK(std::abs(f_dispatch - f_oracle) < 1e-6);
    CHECK(f_dispatch <= f_oracle + 1e-9);
}

TEST_CASE("dispatch never violates believed capacities", "[regulation]") {
    Feeder f = ieee33();
    auto lin = build_linear_model(f);
    VrLimits lim;
    lim.backup_bus = 3;
    lim.backup_capacity_pu = 0.2;
    Rng rng(0xbeefULL);

    for (int trial = 0; trial < 25; ++trial) {
        VoltageProfile vp{Vec::Ones(f.n_bus), Vec::Zero(f.n_bus)};
        for (int n = 1; n < f.n_bus; ++n) vp.v(n) = 1.0 + 0.02 * rng.normal();
        Vec down(2), up(2);
        for (int e = 0; e < 2; ++e) {
            down(e) = rng.uniform(0.0, 0.2);
            up(e) = rng.uniform(0.0, 0.2);
        }
        auto req = dispatch(vp, down, up, lin, f.evcs_buses, f.monitor_buses, lim);
        for (int e = 0; e < 2; ++e) {
            CHECK(req.station_delta(e) >= -down(e) - 1e-12);
            CHECK(req.station_delta(e) <= up(e) + 1e-12);
        }
        CHECK(std::abs(req.backup_delta) <= lim.backup_capacity_pu + 1e-12);
    }
}

TEST_CASE("backup engages only when believed headroom misses the shortfall", "[regulation]") {
    Feeder f = ieee33();
    auto lin = build_linear_model(f);
    VrLimits lim;
    lim.backup_bus = 5;
    lim.backup_capacity_pu = 0.5;

    auto [p, q] = injections(f, 1.3);
    auto v_now = ac_power_flow(f, p, q);
    REQUIRE(v_now.v.minCoeff() < lim.v_min);

    // starved stations cannot cover the sag, so the backup picks up the rest
    Vec tiny = Vec::Constant(2, 0.01);
    auto starved = dispatch(v_now, tiny, tiny, lin, f.evcs_buses, f.monitor_buses, lim);
    CHECK(starved.station_delta.isApprox(Vec::Constant(2, 0.01), 1e-9));
    CHECK(starved.backup_delta > 0.0);
    CHECK(starved.backup_delta <= lim.backup_capacity_pu + 1e-12);

    auto no_backup = dispatch(v_now, tiny, tiny, lin, f.evcs_buses, f.monitor_buses, VrLimits{});
    CHECK(no_backup.backup_delta == 0.0);
    CHECK(starved.objective < no_backup.objective);

    // believed headroom covering the shortfall keeps the backup idle, even if
    // that belief is wrong: this is exactly what a capacity inflation buys
    Vec roomy = Vec::Constant(2, 3.0);
    auto trusting = dispatch(v_now, roomy, roomy, lin, f.evcs_buses, f.monitor_buses, lim);
    CHECK(trusting.backup_delta == 0.0);

    VoltageProfile flat{Vec::Ones(f.n_bus), Vec::Zero(f.n_bus)};
    auto idle = dispatch(flat, Vec::Constant(2, 0.1), Vec::Constant(2, 0.1), lin, f.evcs_buses,
                         f.monitor_buses, lim);
    CHECK(idle.backup_delta == 0.0);
}

TEST_CASE("delivered power is clipped to true capacity", "[regulation]") {
    Feeder f = ieee33();
    auto [p, q] = injections(f, 1.2);
    VrLimits lim;

    VrRequest req;
    req.station_delta = Vec(2);
    req.station_delta << 0.1, 0.08;

    Vec true_down = Vec::Zero(2);
    Vec true_up(2);
    true_up << 0.05, 0.2;
    auto out = apply_request(req, true_down, true_up, f, p, q, f.evcs_buses, lim);
    CHECK(out.delivered(0) == 0.05);
    CHECK(out.delivered(1) == 0.08);

    // outcome equals a hand-built AC solve at the delivered point
    Vec p_hand = p;
    p_hand(17) += 0.05;
    p_hand(32) += 0.08;
    auto hand = ac_power_flow(f, p_hand, q);
    CHECK((out.voltages.v - hand.v).cwiseAbs().maxCoeff() < 1e-12);

    double vmin = 2.0;
    std::vector<int> below;
    for (int n = 1; n < f.n_bus; ++n) {
        vmin = std::min(vmin, hand.v(n));
        if (hand.v(n) < lim.v_min) below.push_back(n);
    }
    CHECK(out.min_voltage == vmin);
    CHECK(out.undervoltage_buses == below);

    // an overstated believed capacity delivers nothing and reads lower
    auto none = apply_request(req, true_down, Vec::Zero(2), f, p, q, f.evcs_buses, lim);
    CHECK(none.delivered.cwiseAbs().maxCoeff() == 0.0);
    CHECK(none.min_voltage < out.min_voltage);
}

TEST_CASE("more true up-capacity never lowers the minimum voltage", "[regulation]") {
    Feeder f = ieee33();
    auto [p, q] = injections(f, 1.25);
    VrLimits lim;

    VrRequest req;
    req.station_delta = Vec::Constant(2, 0.3);

    double prev = -1.0;
    for (double cap : {0.0, 0.05, 0.1, 0.2, 0.3}) {
        auto out = apply_request(req, Vec::Zero(2), Vec::Constant(2, cap), f, p, q,
                                 f.evcs_buses, lim);
        CHECK(out.min_voltage >= prev - 1e-12);
        prev = out.min_voltage;
    }
}

TEST_CASE("band violation is reported when capacity falls short", "[regulation]") {
    Feeder f = ieee33();
    auto lin = build_linear_model(f);
    auto [p, q] = injections(f, 1.2);
    auto v_now = ac_power_flow(f, p, q);
    VrLimits lim;

    Vec tiny = Vec::Constant(2, 0.005);
    auto starved = dispatch(v_now, tiny, tiny, lin, f.evcs_buses, f.monitor_buses, lim);
    CHECK(starved.band_violation > 0.0);

    Vec roomy = Vec::Constant(2, 5.0);
    auto supported = dispatch(v_now, Vec::Zero(2), roomy, lin, f.evcs_buses, f.monitor_buses, lim);
    CHECK(supported.band_violation == 0.0);
    CHECK(supported.objective < starved.objective);
}

TEST_CASE("regulation input validation", "[regulation]") {
    Feeder f = ieee33();
    auto lin = build_linear_model(f);
    VoltageProfile flat{Vec::Ones(f.n_bus), Vec::Zero(f.n_bus)};

    VrLimits bad;
    bad.v_min = 1.2;
    CHECK_THROWS_AS(dispatch(flat, Vec::Zero(2), Vec::Zero(2), lin, f.evcs_buses, f.monitor_buses, bad),
                    config_error);

    VrLimits oob;
    oob.backup_bus = f.n_bus;
    CHECK_THROWS_AS(dispatch(flat, Vec::Zero(2), Vec::Zero(2), lin, f.evcs_buses, f.monitor_buses, oob),
                    config_error);

    VrLimits lim;
    CHECK_THROWS_AS(dispatch(flat, Vec::Zero(1), Vec::Zero(2), lin, f.evcs_buses, f.monitor_buses, lim),
                    config_error);
    CHECK_THROWS_AS(dispatch(flat, Vec::Zero(2), Vec::Zero(2), lin, {0, 17}, f.monitor_buses, lim),
                    config_error);

    VrRequest req;
    req.station_delta = Vec::Zero(1);
    auto [p, q] = injections(f);
    CHECK_THROWS_AS(apply_request(req, Vec::Zero(2), Vec::Zero(2), f, p, q, f.evcs_buses, lim),
                    config_error);
}
