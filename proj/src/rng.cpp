#include "hvq/rng.hpp"

#include <sstream>

#include "hvq/error.hpp"

namespace hvq {

std::string Rng::save_state() const {
    std::ostringstream os;
    os << engine_;
    return os.str();
}

void Rng::load_state(const std::string& state) {
    std::istringstream is(state);
    is >> engine_;
    if (!is) throw FormatError("corrupt RNG state");
}

}  // namespace hvq
