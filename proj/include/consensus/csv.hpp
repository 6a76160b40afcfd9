#pragma once

#include <cmath>
#include <cstdio>
#include <initializer_list>
#include <ostream>
#include <string>
#include <string_view>
#include <type_traits>

namespace consensus {

/// `%.12g`, with `inf`/`-inf`/`nan` spelled out so files diff byte-for-byte across platforms.
inline std::string format_number(double x) {
    if (std::isnan(x)) return "nan";
    if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.12g", x);
    return buf;
}

/// Minimal CSV emitter with fixed numeric formatting.
class CsvWriter {
public:
    explicit CsvWriter(std::ostream& out) : out_(out) {}

    /// `# key=value` metadata line.
    void comment(std::string_view text) { out_ << "# " << text << '\n'; }

    void header(std::initializer_list<std::string_view> names) {
        bool first = true;
        for (auto n : names) {
            if (!first) out_ << ',';
            out_ << n;
            first = false;
        }
        out_ << '\n';
    }

    template <typename... Fields>
    void row(const Fields&... fields) {
        bool first = true;
        ((emit(fields, first)), ...);
        out_ << '\n';
    }

private:
    template <typename T>
    void emit(const T& value, bool& first) {
        if (!first) out_ << ',';
        first = false;
        if constexpr (std::is_same_v<T, bool>) {
            out_ << (value ? "true" : "false");
        } else if constexpr (std::is_floating_point_v<T>) {
            out_ << format_number(static_cast<double>(value));
        } else if constexpr (std::is_integral_v<T>) {
            out_ << value;
        } else {
            out_ << std::string_view(value);
        }
    }

    std::ostream& out_;
};

}  // namespace consensus
