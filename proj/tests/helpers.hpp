#pragma once

#include <sstream>
#include <string>

#include "evreg/feeder.hpp"

namespace evreg::test {

inline std::string data_path(const std::string& rel) {
    return std::string(EVREG_SOURCE_DIR) + "/" + rel;
}

inline Feeder feeder_from_string(const std::string& text) {
    std::istringstream in(text);
    return parse_feeder(in, "<inline>");
}

// 2-bus feeder, r=0.3 x=0.4 pu (base chosen so ohms == pu).
inline Feeder two_bus(double r = 0.3, double x = 0.4) {
    std::ostringstream os;
    os << "N 2 SLACK 1 BASEKV 1 BASEMVA 1\n";
    os << "LINE 1 2 " << r << " " << x << "\n";
    return feeder_from_string(os.str());
}

inline Feeder ieee33() { return load_feeder(data_path("data/feeders/ieee33.feeder")); }

}  // namespace evreg::test
