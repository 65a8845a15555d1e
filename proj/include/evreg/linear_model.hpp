#pragma once

#include "feeder.hpp"

namespace evreg {

struct VoltageProfile {
    Vec v;      // magnitudes, pu
    Vec theta;  // angles, rad
};

// Linearized power flow around the flat profile. m1/m2 hold the published
// coefficient matrices (off-diagonal r/(r^2+x^2) resp. x/(r^2+x^2), diagonal =
// row sum). The operative relation uses their Laplacian form L = D - A, which
// is what makes zero injections reproduce the slack conditions:
//   p' = L2' th' + L1' v' + l2c th1 + l1c v1
//   q' = -L1' th' + L2' v' - l1c th1 + l2c v1
// Inverting the 2(N-1) block system gives the sensitivity blocks below.
struct LinearPFModel {
    int n = 0;
    double slack_v = 1.0;
    double slack_theta = 0.0;

    Mat m1, m2;    // n x n, published convention
    Mat m1p, m2p;  // reduced (N-1) sub-blocks of m1/m2

    // th' = s_tp p' + s_tq q' + m_theta ; v' = s_vp p' + s_vq q' + m_v
    Mat s_tp, s_tq, s_vp, s_vq;
    Vec m_theta, m_v;
};

inline LinearPFModel build_linear_model(const Feeder& f) {
    const int n = f.n_bus;
    LinearPFModel m;
    m.n = n;
    m.slack_v = f.slack_v;
    m.slack_theta = f.slack_theta;

    Mat a1 = Mat::Zero(n, n), a2 = Mat::Zero(n, n);
    for (const auto& br : f.branches) {
        double den = br.r_pu * br.r_pu + br.x_pu * br.x_pu;
        if (den <= 0.0)
            throw numeric_error("linear model: zero-impedance branch " +
                                std::to_string(br.from + 1) + "-" + std::to_string(br.to + 1));
        a1(br.from, br.to) = a1(br.to, br.from) = br.r_pu / den;
        a2(br.from, br.to) = a2(br.to, br.from) = br.x_pu / den;
    }
    Vec d1 = a1.rowwise().sum(), d2 = a2.rowwise().sum();

    m.m1 = a1;
    m.m2 = a2;
    m.m1.diagonal() = d1;
    m.m2.diagonal() = d2;
    m.m1p = m.m1.bottomRightCorner(n - 1, n - 1);
    m.m2p = m.m2.bottomRightCorner(n - 1, n - 1);

    Mat l1 = Mat(d1.asDiagonal()) - a1;
    Mat l2 = Mat(d2.asDiagonal()) - a2;
    Mat l1p = l1.bottomRightCorner(n - 1, n - 1);
    Mat l2p = l2.bottomRightCorner(n - 1, n - 1);
    Vec l1c = l1.col(0).tail(n - 1);
    Vec l2c = l2.col(0).tail(n - 1);

    Mat k(2 * (n - 1), 2 * (n - 1));
    k << l2p, l1p, -l1p, l2p;
    Eigen::PartialPivLU<Mat> lu(k);
    if (std::abs(lu.determinant()) < 1e-300)
        throw numeric_error("linear model: block system is singular");

    Mat kinv = lu.inverse();
    m.s_tp = kinv.topLeftCorner(n - 1, n - 1);
    m.s_tq = kinv.topRightCorner(n - 1, n - 1);
    m.s_vp = kinv.bottomLeftCorner(n - 1, n - 1);
    m.s_vq = kinv.bottomRightCorner(n - 1, n - 1);

    Vec slack_term(2 * (n - 1));
    slack_term << l2c * m.slack_theta + l1c * m.slack_v,
                  -l1c * m.slack_theta + l2c * m.slack_v;
    Vec offset = -(kinv * slack_term);
    m.m_theta = offset.head(n - 1);
    m.m_v = offset.tail(n - 1);
    return m;
}

// p, q are full-length injection vectors (slack entries ignored), loads negative.
inline VoltageProfile linear_power_flow(const LinearPFModel& m, const Vec& p, const Vec& q) {
    if (p.size() != m.n || q.size() != m.n)
        throw numeric_error("linear_power_flow: injection vector length mismatch");
    Vec pp = p.tail(m.n - 1), qp = q.tail(m.n - 1);
    VoltageProfile out;
    out.v = Vec(m.n);
    out.theta = Vec(m.n);
    out.v(0) = m.slack_v;
    out.theta(0) = m.slack_theta;
    out.v.tail(m.n - 1) = m.s_vp * pp + m.s_vq * qp + m.m_v;
    out.theta.tail(m.n - 1) = m.s_tp * pp + m.s_tq * qp + m.m_theta;
    return out;
}

}  // namespace evreg
