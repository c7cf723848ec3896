#pragma once

// Little-endian float64 payloads and key/value text headers shared by the
// weight and emission file formats.

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <map>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "cmtrace/error.hpp"

namespace cmtrace::detail {

inline void write_f64_le(std::ostream& out, std::span<const double> values) {
    std::vector<char> buf(values.size() * 8);
    for (std::size_t i = 0; i < values.size(); ++i) {
        const auto bits = std::bit_cast<std::uint64_t>(values[i]);
        for (int b = 0; b < 8; ++b) buf[i * 8 + b] = static_cast<char>((bits >> (8 * b)) & 0xffu);
    }
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
}

inline void read_f64_le(std::istream& in, std::span<double> values, const char* what) {
    std::vector<unsigned char> buf(values.size() * 8);
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (static_cast<std::size_t>(in.gcount()) != buf.size())
        throw FormatError(std::string(what) + ": truncated tensor payload");
    for (std::size_t i = 0; i < values.size(); ++i) {
        std::uint64_t bits = 0;
        for (int b = 0; b < 8; ++b) bits |= std::uint64_t{buf[i * 8 + b]} << (8 * b);
        values[i] = std::bit_cast<double>(bits);
    }
}

// Ordered "key value..." lines up to end_header. The first line is the magic.
struct TextHeader {
    std::string magic;
    std::vector<std::pair<std::string, std::string>> lines;
    std::map<std::string, std::string> values;

    const std::string& get(const std::string& key, const char* what) const {
        auto it = values.find(key);
        if (it == values.end()) throw FormatError(std::string(what) + ": header missing '" + key + "'");
        return it->second;
    }
    bool has(const std::string& key) const { return values.contains(key); }
};

inline TextHeader read_text_header(std::istream& in, const std::string& expected_magic, const char* what) {
    TextHeader h;
    std::string line;
    std::size_t line_no = 0;
    bool ended = false;
    while (std::getline(in, line)) {
        ++line_no;
        if (line_no == 1) {
            h.magic = line;
            if (line != expected_magic)
                throw FormatError(std::string(what) + ": bad magic line '" + line + "', expected '" + expected_magic + "'");
            continue;
        }
        if (line == "end_header") {
            ended = true;
            break;
        }
        if (line.empty()) continue;
        const auto sp = line.find(' ');
        std::string key = line.substr(0, sp);
        std::string value = sp == std::string::npos ? std::string() : line.substr(sp + 1);
        if (h.values.contains(key))
            throw FormatError(std::string(what) + ": duplicate header key '" + key + "' on line " + std::to_string(line_no));
        h.values.emplace(key, value);
        h.lines.emplace_back(std::move(key), std::move(value));
    }
    if (!ended) throw FormatError(std::string(what) + ": header not terminated by end_header");
    return h;
}

template <typename T>
T parse_header_number(const std::string& text, const std::string& key, const char* what) {
    std::istringstream ss(text);
    T v{};
    ss >> v;
    if (!ss || !(ss >> std::ws).eof())
        throw FormatError(std::string(what) + ": header '" + key + "' is not a number: '" + text + "'");
    return v;
}

// Payload must end exactly at EOF.
inline void expect_eof(std::istream& in, const char* what) {
    if (in.peek() != std::char_traits<char>::eof())
        throw FormatError(std::string(what) + ": trailing bytes after tensor payload");
}

}  // namespace cmtrace::detail
