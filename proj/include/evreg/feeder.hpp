#pragma once

#include <algorithm>
#include <fstream>
#include <sstream>

#include "common.hpp"

namespace evreg {

// Radial distribution feeder. Buses are 1-based in files and 0-based
// internally; index 0 is always the slack bus after validation.
struct Branch {
    int from = 0;        // parent bus (0-based)
    int to = 0;          // child bus (0-based)
    double r_ohm = 0.0;
    double x_ohm = 0.0;
    double r_pu = 0.0;
    double x_pu = 0.0;
};

struct Feeder {
    int n_bus = 0;
    int slack = 0;  // 0-based, normalized to 0
    double base_kv = 0.0;
    double base_mva = 0.0;
    double slack_v = 1.0;      // per-unit reference voltage at the slack bus
    double slack_theta = 0.0;  // rad

    std::vector<Branch> branches;       // n_bus-1 entries, child-indexed order
    std::vector<int> parent;            // parent[bus], -1 for slack
    std::vector<int> branch_of;         // branch index whose "to" is bus, -1 for slack
    std::vector<std::vector<int>> children;
    std::vector<int> bfs_order;         // slack first, parents before children

    std::vector<double> load_p_kw;      // nominal loads per bus
    std::vector<double> load_q_kvar;

    std::vector<int> pmu_buses;      // 0-based, file order
    std::vector<int> evcs_buses;     // 0-based, file order
    std::vector<int> monitor_buses;  // 0-based, file order

    double z_base_ohm() const { return base_kv * base_kv / base_mva; }
    double kw_to_pu(double kw) const { return kw / (base_mva * 1000.0); }
    double pu_to_kw(double pu) const { return pu * base_mva * 1000.0; }
};

namespace detail {

inline bool bus_in(const std::vector<int>& v, int b) {
    return std::find(v.begin(), v.end(), b) != v.end();
}

// Orient edges away from the slack and derive traversal order.
inline void build_topology(Feeder& f, std::vector<std::array<double, 2>>& edge_z,
                           std::vector<std::array<int, 2>>& edge_bus) {
    const int n = f.n_bus;
    if (int(edge_bus.size()) != n - 1)
        throw config_error("feeder: expected " + std::to_string(n - 1) + " LINE entries, got " +
                           std::to_string(edge_bus.size()));

    std::vector<std::vector<std::pair<int, int>>> adj(n);  // (neighbor, edge index)
    for (size_t e = 0; e < edge_bus.size(); ++e) {
        adj[edge_bus[e][0]].push_back({edge_bus[e][1], int(e)});
        adj[edge_bus[e][1]].push_back({edge_bus[e][0], int(e)});
    }

    f.parent.assign(n, -1);
    f.branch_of.assign(n, -1);
    f.children.assign(n, {});
    f.bfs_order.clear();
    f.branches.clear();
    std::vector<bool> seen(n, false);
    std::vector<int> queue{0};
    seen[0] = true;
    while (!queue.empty()) {
        int b = queue.front();
        queue.erase(queue.begin());
        f.bfs_order.push_back(b);
        for (auto [nb, e] : adj[b]) {
            if (seen[nb]) {
                if (nb != f.parent[b]) throw config_error("feeder: network is not radial (cycle)");
                continue;
            }
            seen[nb] = true;
            f.parent[nb] = b;
            Branch br;
            br.from = b;
            br.to = nb;
            br.r_ohm = edge_z[e][0];
            br.x_ohm = edge_z[e][1];
            br.r_pu = br.r_ohm / f.z_base_ohm();
            br.x_pu = br.x_ohm / f.z_base_ohm();
            f.branch_of[nb] = int(f.branches.size());
            f.branches.push_back(br);
            f.children[b].push_back(nb);
            queue.push_back(nb);
        }
    }
    if (int(f.bfs_order.size()) != n)
        throw config_error("feeder: network is disconnected");
}

}  // namespace detail

// Parses the line-oriented feeder format:
//   N <count> SLACK <bus> BASEKV <kv> BASEMVA <mva>
//   LINE <from> <to> <r_ohm> <x_ohm>
//   LOAD <bus> <p_kw> <q_kvar>
//   PMU <bus> / EVCS <bus> / MONITOR <bus>
// '#' starts a comment, indices are 1-based.
inline Feeder parse_feeder(std::istream& in, const std::string& origin = "<stream>") {
    Feeder f;
    bool header_seen = false;
    int slack_1based = 1;
    std::vector<std::array<double, 2>> edge_z;
    std::vector<std::array<int, 2>> edge_bus;
    std::vector<std::array<int, 2>> raw_edges;  // for duplicate detection before remap

    std::string line;
    int lineno = 0;
    auto fail = [&](const std::string& msg) {
        throw config_error("feeder " + origin + ":" + std::to_string(lineno) + ": " + msg);
    };

    auto parse_bus = [&](std::istringstream& ss) {
        int b;
        if (!(ss >> b)) fail("expected bus index");
        if (b < 1 || b > f.n_bus) fail("bus index " + std::to_string(b) + " out of range");
        return b - 1;
    };

    while (std::getline(in, line)) {
        ++lineno;
        auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        std::istringstream ss(line);
        std::string kw;
        if (!(ss >> kw)) continue;

        if (kw == "N") {
            if (header_seen) fail("duplicate header");
            std::string t1, t2, t3;
            if (!(ss >> f.n_bus >> t1 >> slack_1based >> t2 >> f.base_kv >> t3 >> f.base_mva) ||
                t1 != "SLACK" || t2 != "BASEKV" || t3 != "BASEMVA")
                fail("malformed header, expected: N <count> SLACK <bus> BASEKV <kv> BASEMVA <mva>");
            if (f.n_bus < 2) fail("need at least 2 buses");
            if (f.base_kv <= 0 || f.base_mva <= 0) fail("base quantities must be positive");
            if (slack_1based < 1 || slack_1based > f.n_bus) fail("slack bus out of range");
            f.load_p_kw.assign(f.n_bus, 0.0);
            f.load_q_kvar.assign(f.n_bus, 0.0);
            header_seen = true;
            continue;
        }
        if (!header_seen) fail("header line must come first");

        if (kw == "LINE") {
            int a = parse_bus(ss), b = parse_bus(ss);
            double r, x;
            if (!(ss >> r >> x)) fail("malformed LINE");
            if (a == b) fail("LINE endpoints coincide");
            if (r < 0 || x < 0) fail("negative impedance");
            for (auto& e : raw_edges)
                if ((e[0] == a && e[1] == b) || (e[0] == b && e[1] == a))
                    fail("network is not radial (duplicate line)");
            raw_edges.push_back({a, b});
            edge_bus.push_back({a, b});
            edge_z.push_back({r, x});
        } else if (kw == "LOAD") {
            int b = parse_bus(ss);
            double p, q;
            if (!(ss >> p >> q)) fail("malformed LOAD");
            f.load_p_kw[b] += p;
            f.load_q_kvar[b] += q;
        } else if (kw == "PMU") {
            f.pmu_buses.push_back(parse_bus(ss));
        } else if (kw == "EVCS") {
            f.evcs_buses.push_back(parse_bus(ss));
        } else if (kw == "MONITOR") {
            f.monitor_buses.push_back(parse_bus(ss));
        } else if (kw == "SLACKV") {
            if (!(ss >> f.slack_v)) fail("malformed SLACKV");
        } else {
            fail("unknown keyword '" + kw + "'");
        }
        std::string extra;
        if (ss >> extra) fail("trailing token '" + extra + "'");
    }
    if (!header_seen) throw config_error("feeder " + origin + ": missing header");

    // Normalize so the slack is bus 0.
    if (slack_1based != 1) {
        int s = slack_1based - 1;
        auto remap = [&](int b) { return b == s ? 0 : (b == 0 ? s : b); };
        for (auto& e : edge_bus) e = {remap(e[0]), remap(e[1])};
        for (auto* v : {&f.pmu_buses, &f.evcs_buses, &f.monitor_buses})
            for (auto& b : *v) b = remap(b);
        std::swap(f.load_p_kw[0], f.load_p_kw[s]);
        std::swap(f.load_q_kvar[0], f.load_q_kvar[s]);
    }
    f.slack = 0;

    for (auto* v : {&f.pmu_buses, &f.evcs_buses, &f.monitor_buses}) {
        auto sorted = *v;
        std::sort(sorted.begin(), sorted.end());
        if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
            throw config_error("feeder " + origin + ": duplicate sensor bus");
    }
    for (int b : f.pmu_buses)
        if (detail::bus_in(f.evcs_buses, b))
            throw config_error("feeder " + origin + ": bus hosts both PMU and EVCS");

    detail::build_topology(f, edge_z, edge_bus);
    return f;
}

inline Feeder load_feeder(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw config_error("feeder: cannot open '" + path + "'");
    return parse_feeder(in, path);
}

}  // namespace evreg
