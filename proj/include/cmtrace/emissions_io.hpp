#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>

#include "cmtrace/aligner.hpp"

namespace cmtrace {

// Emissions file:
//
//   cmtrace-emissions 1
//   frames <T>
//   labels <V>
//   label_set <V characters, no whitespace>
//   blank <c>
//   boundary <c>
//   sample_rate <sr>
//   samples <M>
//   token_rate <tr>        optional, integer / decimal / fraction
//   end_header
//   <T*V little-endian float64 log-probabilities, row-major>
struct EmissionsFile {
    EmissionMatrix emissions;
    std::int64_t sample_rate = 0;
    std::int64_t sample_count = 0;
    std::optional<Rational> token_rate;

    AudioMeta meta(const Rational& token_rate) const;
};

void save_emissions(std::ostream& out, const EmissionsFile& file);
void save_emissions(const std::filesystem::path& path, const EmissionsFile& file);
EmissionsFile load_emissions(std::istream& in);
EmissionsFile load_emissions(const std::filesystem::path& path);

}  // namespace cmtrace
