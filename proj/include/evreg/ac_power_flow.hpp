#pragma once

#include <complex>

#include "linear_model.hpp"

namespace evreg {

// Backward/forward sweep power flow for radial feeders. Injections are per
// unit, loads negative. Converges when the nodal power mismatch drops below
// tol at every bus.
inline VoltageProfile ac_power_flow(const Feeder& f, const Vec& p, const Vec& q,
                                    double tol = 1e-8, int max_iter = 100) {
    using cplx = std::complex<double>;
    const int n = f.n_bus;
    if (p.size() != n || q.size() != n)
        throw numeric_error("ac_power_flow: injection vector length mismatch");

    std::vector<cplx> volt(n, std::polar(f.slack_v, f.slack_theta));
    std::vector<cplx> inj(n);
    for (int b = 0; b < n; ++b) inj[b] = cplx(p(b), q(b));
    std::vector<cplx> zbr(f.branches.size());
    for (size_t e = 0; e < f.branches.size(); ++e)
        zbr[e] = cplx(f.branches[e].r_pu, f.branches[e].x_pu);

    std::vector<cplx> jbr(f.branches.size());
    double mismatch = 0.0;
    for (int it = 0; it < max_iter; ++it) {
        // Backward: branch current = downstream branch currents - injection current.
        for (int i = n - 1; i >= 1; --i) {
            int b = f.bfs_order[i];
            cplx sum = -std::conj(inj[b] / volt[b]);
            for (int c : f.children[b]) sum += jbr[f.branch_of[c]];
            jbr[f.branch_of[b]] = sum;
        }
        // Forward: propagate voltage drops from the slack.
        for (int i = 1; i < n; ++i) {
            int b = f.bfs_order[i];
            int e = f.branch_of[b];
            volt[b] = volt[f.parent[b]] - zbr[e] * jbr[e];
        }
        // Nodal power balance with the updated voltages: net power leaving
        // bus b over its incident lines must equal the injection there.
        mismatch = 0.0;
        for (int i = n - 1; i >= 1; --i) {
            int b = f.bfs_order[i];
            cplx out_current = (volt[b] - volt[f.parent[b]]) / zbr[f.branch_of[b]];
            for (int c : f.children[b])
                out_current += (volt[b] - volt[c]) / zbr[f.branch_of[c]];
            cplx s_impl = volt[b] * std::conj(out_current);
            mismatch = std::max(mismatch, std::abs(s_impl - inj[b]));
        }
        if (mismatch < tol) {
            VoltageProfile out;
            out.v = Vec(n);
            out.theta = Vec(n);
            for (int b = 0; b < n; ++b) {
                out.v(b) = std::abs(volt[b]);
                out.theta(b) = std::arg(volt[b]);
            }
            return out;
        }
    }
    throw numeric_error("ac_power_flow: no convergence after " + std::to_string(max_iter) +
                        " iterations, max mismatch " + std::to_string(mismatch));
}

}  // namespace evreg
