#pragma once

#include "common.hpp"

namespace evreg {

// Two-state Gilbert-Elliott loss model per sensor. State G delivers the
// packet, state B drops it. k_gb = P(G->B), k_bg = P(B->G).
struct ChannelParams {
    int n_sensors = 0;
    std::vector<double> k_gb;
    std::vector<double> k_bg;

    static ChannelParams uniform(int n, double gb, double bg) {
        ChannelParams p;
        p.n_sensors = n;
        p.k_gb.assign(n, gb);
        p.k_bg.assign(n, bg);
        return p;
    }
};

// Delivery outcome for one reporting interval: phi[i] = 1 iff sensor i's
// packet arrived.
struct CommOutcome {
    std::vector<int> phi;

    uint64_t mask() const {
        uint64_t m = 0;
        for (size_t i = 0; i < phi.size(); ++i)
            if (phi[i]) m |= (1ULL << i);
        return m;
    }
    static CommOutcome from_mask(uint64_t m, int n) {
        CommOutcome o;
        o.phi.resize(n);
        for (int i = 0; i < n; ++i) o.phi[i] = int((m >> i) & 1);
        return o;
    }
};

inline void check_channel_probability(double k, const char* name) {
    if (k < 0.0 || k > 1.0)
        throw config_error(std::string("channel: ") + name + " outside [0,1]");
}

// Stationary distribution of the two-state chain.
inline std::pair<double, double> stationary(double k_gb, double k_bg) {
    check_channel_probability(k_gb, "k_gb");
    check_channel_probability(k_bg, "k_bg");
    double denom = k_gb + k_bg;
    if (denom <= 0.0) throw config_error("channel: degenerate chain, k_gb + k_bg = 0");
    return {k_bg / denom, k_gb / denom};
}

// Per-sensor stationary delivery probabilities.
inline std::vector<double> stationary_good(const ChannelParams& p) {
    std::vector<double> pi(p.n_sensors);
    for (int i = 0; i < p.n_sensors; ++i) pi[i] = stationary(p.k_gb[i], p.k_bg[i]).first;
    return pi;
}

// Draws initial states from the stationary distribution.
inline std::vector<int> initial_states(const ChannelParams& p, Rng& rng) {
    std::vector<int> st(p.n_sensors);
    auto pi = stationary_good(p);
    for (int i = 0; i < p.n_sensors; ++i) st[i] = rng.uniform() < pi[i] ? 1 : 0;  // 1 = good
    return st;
}

// Advances every sensor chain one step and reports delivery.
inline CommOutcome sample_outcome(const ChannelParams& p, std::vector<int>& states, Rng& rng) {
    if (int(states.size()) != p.n_sensors)
        throw config_error("channel: state vector length mismatch");
    CommOutcome out;
    out.phi.resize(p.n_sensors);
    for (int i = 0; i < p.n_sensors; ++i) {
        double u = rng.uniform();
        if (states[i] == 1)
            states[i] = (u < p.k_gb[i]) ? 0 : 1;
        else
            states[i] = (u < p.k_bg[i]) ? 1 : 0;
        out.phi[i] = states[i];
    }
    return out;
}

// Stationary probability of a joint outcome (sensors independent).
inline double outcome_prob(const CommOutcome& phi, const ChannelParams& p) {
    if (int(phi.phi.size()) != p.n_sensors)
        throw config_error("channel: outcome length mismatch");
    double prob = 1.0;
    for (int i = 0; i < p.n_sensors; ++i) {
        auto [pg, pb] = stationary(p.k_gb[i], p.k_bg[i]);
        prob *= phi.phi[i] ? pg : pb;
    }
    return prob;
}

// Maps a bit error rate and payload size to a memoryless loss chain:
// packet loss probability 1-(1-ber)^bits, no state memory.
inline std::pair<double, double> ber_to_params(double ber, int payload_bits) {
    if (ber < 0.0 || ber > 1.0) throw config_error("channel: ber outside [0,1]");
    if (payload_bits <= 0) throw config_error("channel: payload_bits must be positive");
    double p_loss = 1.0 - std::pow(1.0 - ber, payload_bits);
    return {p_loss, 1.0 - p_loss};
}

}  // namespace evreg
