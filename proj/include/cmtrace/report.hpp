#pragma once

#include <array>
#include <json.hpp>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "cmtrace/aligner.hpp"
#include "cmtrace/tracer.hpp"

namespace cmtrace {

// Self-describing grid document: metadata, bucket order, layer-major raw and
// log values (null for absent cells) and per-cell prompt counts.
nlohmann::ordered_json grid_to_json(const AieGrid& grid);
AieGrid grid_from_json(const nlohmann::ordered_json& doc);
AieGrid load_grid(const std::filesystem::path& path);
void save_grid(const std::filesystem::path& path, const AieGrid& grid);

// Shortest decimal text that parses back to exactly the same double.
std::string format_double(double v);
double parse_double(std::string_view text);

// Long-form trace table: prompt_id,kind,layer,bucket,raw_position_count,ie_mean
void write_trace_table(std::ostream& out, std::span<const TraceResult> results);

// One row per cell: bucket,layer,aie,log_aie,n_prompts (empty fields when absent).
void write_grid_table(std::ostream& out, const AieGrid& grid);
// Parses write_grid_table output: bucket order, layer count, values and
// counts. Grid metadata (kind, window, noise) is not part of the table.
AieGrid read_grid_table(std::istream& in);

struct Rgb {
    std::uint8_t r = 0, g = 0, b = 0;
    bool operator==(const Rgb&) const = default;
};

// Five-anchor ramp (viridis endpoints and quartiles), linear in between.
inline constexpr std::array<Rgb, 5> kColorRamp = {
    Rgb{68, 1, 84}, Rgb{59, 82, 139}, Rgb{33, 145, 140}, Rgb{94, 201, 98}, Rgb{253, 231, 37}};
inline constexpr Rgb kAbsentColor{255, 255, 255};
inline constexpr Rgb kPathColor{220, 20, 60};

Rgb ramp_color(double t);  // t clamped to [0, 1]
std::string hex(Rgb c);

// SVG heatmap of the log grid: x-axis layers, y-axis buckets, legend on the right.
std::string grid_heatmap_svg(const AieGrid& grid);

// SVG heatmap of the trellis (frames on x, transcript labels on y) with the
// best path overlaid.
std::string trellis_heatmap_svg(const Alignment& alignment);

nlohmann::ordered_json alignment_to_json(const Alignment& alignment);

}  // namespace cmtrace
