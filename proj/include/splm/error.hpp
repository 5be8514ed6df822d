#pragma once

#include <sstream>
#include <stdexcept>
#include <string>

namespace splm {

// Project-wide exception. Messages are one line and start with the
// component or kernel that rejected the input.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

namespace detail {
inline void cat_one(std::ostringstream&) {}
template <typename A, typename... Rest>
void cat_one(std::ostringstream& os, const A& a, const Rest&... rest) {
    os << a;
    cat_one(os, rest...);
}
}  // namespace detail

template <typename... Args>
std::string cat(const Args&... args) {
    std::ostringstream os;
    detail::cat_one(os, args...);
    return os.str();
}

template <typename... Args>
[[noreturn]] void fail(const Args&... args) {
    throw Error(cat(args...));
}

template <typename... Args>
void require(bool cond, const Args&... args) {
    if (!cond) fail(args...);
}

}  // namespace splm
