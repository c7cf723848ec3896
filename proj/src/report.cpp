#include "cmtrace/report.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>

#include "cmtrace/error.hpp"

namespace cmtrace {

using json = nlohmann::ordered_json;

namespace {
constexpr const char* kGridFormat = "cmtrace-aie-grid";
}

std::string format_double(double v) {
    char buf[64];
    auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
    if (ec != std::errc()) throw Error("format_double failed");
    return std::string(buf, p);
}

double parse_double(std::string_view text) {
    double v = 0.0;
    auto [p, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
    if (ec != std::errc() || p != text.data() + text.size())
        throw FormatError("not a number: '" + std::string(text) + "'");
    return v;
}

// ---------------------------------------------------------------------------
// Grid documents

json grid_to_json(const AieGrid& grid) {
    json doc;
    doc["format"] = kGridFormat;
    doc["version"] = 1;
    doc["kind"] = std::string(to_string(grid.kind));
    doc["window"] = grid.window;
    doc["n_layers"] = grid.n_layers;
    doc["n_prompts_total"] = grid.total_prompts;
    doc["noise_scale"] = grid.noise_scale;
    doc["sigma"] = grid.sigma;
    doc["seed"] = grid.seed;
    doc["log_floor"] = kLogFloor;
    json buckets = json::array();
    for (TokenBucket b : grid.buckets) buckets.push_back(std::string(to_string(b)));
    doc["buckets"] = buckets;
    doc["layout"] = "values[layer][bucket]";

    const auto layer_major = [&](const auto& cells) {
        json rows = json::array();
        for (std::size_t l = 0; l < grid.n_layers; ++l) {
            json row = json::array();
            for (std::size_t b = 0; b < grid.buckets.size(); ++b) {
                const auto& cell = cells[b][l];
                if constexpr (std::is_same_v<std::decay_t<decltype(cell)>, std::optional<double>>) {
                    row.push_back(cell ? json(*cell) : json(nullptr));
                } else {
                    row.push_back(cell);
                }
            }
            rows.push_back(std::move(row));
        }
        return rows;
    };
    doc["values"] = layer_major(grid.values);
    doc["log_values"] = layer_major(grid.log_values);
    doc["n_prompts"] = layer_major(grid.n_prompts);
    return doc;
}

AieGrid grid_from_json(const json& doc) {
    try {
        if (doc.value("format", "") != kGridFormat) throw FormatError("grid file: missing format tag '" + std::string(kGridFormat) + "'");
        AieGrid g;
        g.kind = parse_component_kind(doc.at("kind").get<std::string>());
        g.window = doc.at("window").get<std::size_t>();
        g.n_layers = doc.at("n_layers").get<std::size_t>();
        g.total_prompts = doc.value("n_prompts_total", std::size_t{0});
        g.noise_scale = doc.value("noise_scale", 0.0);
        g.sigma = doc.value("sigma", 0.0);
        g.seed = doc.value("seed", std::uint64_t{0});
        for (const auto& b : doc.at("buckets")) g.buckets.push_back(parse_token_bucket(b.get<std::string>()));
        for (std::size_t i = 1; i < g.buckets.size(); ++i)
            if (static_cast<int>(g.buckets[i]) <= static_cast<int>(g.buckets[i - 1]))
                throw FormatError("grid file: buckets must follow the canonical order");
        const std::size_t nb = g.buckets.size();
        const auto read_cells = [&](const char* key, auto& cells, auto convert) {
            const auto& rows = doc.at(key);
            if (rows.size() != g.n_layers) throw FormatError(std::string("grid file: '") + key + "' has wrong layer count");
            cells.assign(nb, {});
            for (auto& c : cells) c.resize(g.n_layers);
            for (std::size_t l = 0; l < g.n_layers; ++l) {
                if (rows[l].size() != nb) throw FormatError(std::string("grid file: '") + key + "' has wrong bucket count");
                for (std::size_t b = 0; b < nb; ++b) cells[b][l] = convert(rows[l][b]);
            }
        };
        const auto opt = [](const json& v) -> std::optional<double> {
            if (v.is_null()) return std::nullopt;
            return v.get<double>();
        };
        read_cells("values", g.values, opt);
        if (doc.contains("log_values")) {
            read_cells("log_values", g.log_values, opt);
        } else {
            g.log_values = g.values;
            for (auto& row : g.log_values)
                for (auto& c : row)
                    if (c) c = log_aie(*c);
        }
        if (doc.contains("n_prompts")) {
            read_cells("n_prompts", g.n_prompts, [](const json& v) { return v.get<std::size_t>(); });
        } else {
            g.n_prompts.assign(nb, std::vector<std::size_t>(g.n_layers, 0));
        }
        return g;
    } catch (const json::exception& e) {
        throw FormatError(std::string("grid file: ") + e.what());
    } catch (const InvalidArgument& e) {
        throw FormatError(std::string("grid file: ") + e.what());
    }
}

AieGrid load_grid(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open " + path.string());
    json doc;
    try {
        doc = json::parse(in);
    } catch (const json::parse_error& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
    return grid_from_json(doc);
}

void save_grid(const std::filesystem::path& path, const AieGrid& grid) {
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path.string());
    out << grid_to_json(grid).dump(2) << '\n';
}

// ---------------------------------------------------------------------------
// Tables

namespace {

std::string csv_field(std::string_view s) {
    if (s.find_first_of(",\"\n") == std::string_view::npos) return std::string(s);
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        const char c = line[i];
        if (quoted) {
            if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
                cur += '"';
                ++i;
            } else if (c == '"') {
                quoted = false;
            } else {
                cur += c;
            }
        } else if (c == '"') {
            quoted = true;
        } else if (c == ',') {
            out.push_back(std::move(cur));
            cur.clear();
        } else {
            cur += c;
        }
    }
    out.push_back(std::move(cur));
    return out;
}

}  // namespace

void write_trace_table(std::ostream& out, std::span<const TraceResult> results) {
    out << "prompt_id,kind,layer,bucket,raw_position_count,ie_mean\n";
    for (const auto& r : results) {
        for (std::size_t l = 0; l < r.n_layers(); ++l) {
            for (std::size_t b = 0; b < kBucketCount; ++b) {
                const auto& cell = r.buckets[l][b];
                if (!cell) continue;
                out << csv_field(r.prompt_id) << ',' << to_string(r.kind) << ',' << l << ',' << to_string(kAllBuckets[b])
                    << ',' << cell->raw_position_count << ',' << format_double(cell->ie_mean) << '\n';
            }
        }
    }
}

void write_grid_table(std::ostream& out, const AieGrid& grid) {
    out << "bucket,layer,aie,log_aie,n_prompts\n";
    for (std::size_t b = 0; b < grid.buckets.size(); ++b) {
        for (std::size_t l = 0; l < grid.n_layers; ++l) {
            out << to_string(grid.buckets[b]) << ',' << l << ',';
            if (const auto& v = grid.values[b][l]) out << format_double(*v);
            out << ',';
            if (const auto& v = grid.log_values[b][l]) out << format_double(*v);
            out << ',' << grid.n_prompts[b][l] << '\n';
        }
    }
}

AieGrid read_grid_table(std::istream& in) {
    std::string line;
    if (!std::getline(in, line) || line != "bucket,layer,aie,log_aie,n_prompts")
        throw FormatError("grid table: unexpected header");
    struct Row {
        std::optional<double> value, log_value;
        std::size_t n = 0;
    };
    std::map<std::pair<int, std::size_t>, Row> rows;
    std::size_t n_layers = 0;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        const auto f = split_csv_line(line);
        if (f.size() != 5) throw FormatError("grid table: line " + std::to_string(line_no) + " has " + std::to_string(f.size()) + " fields");
        const auto bucket = static_cast<int>(parse_token_bucket(f[0]));
        const auto layer = static_cast<std::size_t>(parse_double(f[1]));
        Row r;
        if (!f[2].empty()) r.value = parse_double(f[2]);
        if (!f[3].empty()) r.log_value = parse_double(f[3]);
        r.n = static_cast<std::size_t>(parse_double(f[4]));
        rows[{bucket, layer}] = r;
        n_layers = std::max(n_layers, layer + 1);
    }
    AieGrid g;
    g.n_layers = n_layers;
    for (const auto& [key, row] : rows) {
        const auto b = static_cast<TokenBucket>(key.first);
        if (g.buckets.empty() || g.buckets.back() != b) {
            g.buckets.push_back(b);
            g.values.emplace_back(n_layers);
            g.log_values.emplace_back(n_layers);
            g.n_prompts.emplace_back(n_layers, 0);
        }
        g.values.back()[key.second] = row.value;
        g.log_values.back()[key.second] = row.log_value;
        g.n_prompts.back()[key.second] = row.n;
    }
    return g;
}

// ---------------------------------------------------------------------------
// Heatmaps

Rgb ramp_color(double t) {
    if (!(t > 0.0)) t = 0.0;
    if (t > 1.0) t = 1.0;
    const double x = t * static_cast<double>(kColorRamp.size() - 1);
    const auto i = std::min<std::size_t>(static_cast<std::size_t>(x), kColorRamp.size() - 2);
    const double f = x - static_cast<double>(i);
    const auto lerp = [f](std::uint8_t a, std::uint8_t b) {
        return static_cast<std::uint8_t>(std::lround(a + (static_cast<double>(b) - a) * f));
    };
    const Rgb& a = kColorRamp[i];
    const Rgb& b = kColorRamp[i + 1];
    return {lerp(a.r, b.r), lerp(a.g, b.g), lerp(a.b, b.b)};
}

std::string hex(Rgb c) {
    char buf[8];
    std::snprintf(buf, sizeof buf, "#%02x%02x%02x", c.r, c.g, c.b);
    return buf;
}

namespace {

std::string fixed(double v, int digits = 2) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

std::string xml_escape(std::string_view s) {
    std::string out;
    for (char c : s) {
        switch (c) {
            case '&': out += "&amp;"; break;
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '"': out += "&quot;"; break;
            default: out += c;
        }
    }
    return out;
}

class Svg {
public:
    Svg(int width, int height) {
        out_ << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
             << "\" viewBox=\"0 0 " << width << ' ' << height << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
        out_ << "<rect x=\"0\" y=\"0\" width=\"" << width << "\" height=\"" << height << "\" fill=\"#ffffff\"/>\n";
    }
    void rect(double x, double y, double w, double h, Rgb fill, const char* extra = "") {
        out_ << "<rect x=\"" << fixed(x) << "\" y=\"" << fixed(y) << "\" width=\"" << fixed(w) << "\" height=\""
             << fixed(h) << "\" fill=\"" << hex(fill) << "\"" << extra << "/>\n";
    }
    void text(double x, double y, std::string_view s, const char* anchor = "start", const char* extra = "") {
        out_ << "<text x=\"" << fixed(x) << "\" y=\"" << fixed(y) << "\" text-anchor=\"" << anchor << "\"" << extra
             << '>' << xml_escape(s) << "</text>\n";
    }
    void raw(std::string_view s) { out_ << s; }
    std::string finish() {
        out_ << "</svg>\n";
        return out_.str();
    }

private:
    std::ostringstream out_;
};

// Vertical legend: five ramp anchors, min/max labels and the absent swatch.
void legend(Svg& svg, double x, double y, double h, double lo, double hi, const std::string& title) {
    const int steps = 40;
    for (int i = 0; i < steps; ++i) {
        const double t = 1.0 - (i + 0.5) / steps;
        svg.rect(x, y + h * i / steps, 14, h / steps + 0.5, ramp_color(t));
    }
    svg.text(x + 18, y + 9, fixed(hi, 3));
    svg.text(x + 18, y + h, fixed(lo, 3));
    svg.text(x, y - 8, title);
    svg.rect(x, y + h + 12, 14, 14, kAbsentColor, " stroke=\"#999999\"");
    svg.text(x + 18, y + h + 23, "absent");
}

}  // namespace

std::string grid_heatmap_svg(const AieGrid& grid) {
    const double cell_w = 28, cell_h = 24, left = 130, top = 40, legend_w = 110;
    const double plot_w = cell_w * static_cast<double>(grid.n_layers);
    const double plot_h = cell_h * static_cast<double>(grid.buckets.size());
    const int width = static_cast<int>(left + plot_w + legend_w);
    const int height = static_cast<int>(top + std::max(plot_h, 150.0) + 50);

    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (const auto& row : grid.log_values)
        for (const auto& c : row)
            if (c) {
                lo = std::min(lo, *c);
                hi = std::max(hi, *c);
            }
    if (lo > hi) lo = hi = 0.0;

    Svg svg(width, height);
    svg.text(left, 20,
             std::string(to_string(grid.kind)) + " log10 AIE, window " + std::to_string(grid.window) + ", " +
                 std::to_string(grid.total_prompts) + " prompts",
             "start", " font-size=\"13\"");
    for (std::size_t b = 0; b < grid.buckets.size(); ++b) {
        const double y = top + cell_h * static_cast<double>(b);
        svg.text(left - 6, y + cell_h * 0.65, to_string(grid.buckets[b]), "end");
        for (std::size_t l = 0; l < grid.n_layers; ++l) {
            const double x = left + cell_w * static_cast<double>(l);
            const auto& v = grid.log_values[b][l];
            if (v) {
                const double t = hi > lo ? (*v - lo) / (hi - lo) : 0.5;
                svg.rect(x, y, cell_w, cell_h, ramp_color(t), " class=\"cell\"");
            } else {
                svg.rect(x, y, cell_w, cell_h, kAbsentColor, " class=\"cell absent\" stroke=\"#bbbbbb\" stroke-dasharray=\"2,2\"");
            }
        }
    }
    for (std::size_t l = 0; l < grid.n_layers; ++l)
        svg.text(left + cell_w * (static_cast<double>(l) + 0.5), top + plot_h + 14, std::to_string(l), "middle");
    svg.text(left + plot_w / 2, top + plot_h + 32, grid.window > 1 ? "center layer of patched window" : "layer", "middle");
    legend(svg, left + plot_w + 20, top + 10, 120, lo, hi, "log10 AIE");
    return svg.finish();
}

std::string trellis_heatmap_svg(const Alignment& a) {
    const auto& k = a.trellis.k;
    const double cell = 10, left = 40, top = 40, legend_w = 110;
    const double plot_w = cell * static_cast<double>(k.rows());
    const double plot_h = cell * static_cast<double>(k.cols());
    const int width = static_cast<int>(left + plot_w + legend_w);
    const int height = static_cast<int>(top + std::max(plot_h, 180.0) + 40);

    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (double v : k.flat())
        if (std::isfinite(v)) {
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }

    Svg svg(width, height);
    svg.text(left, 20, "trellis for \"" + a.transcript.joined + "\", score " + fixed(a.trellis.best_score(), 4), "start",
             " font-size=\"13\"");
    // Row j (label index) drawn top to bottom, column t (frame) left to right.
    for (std::size_t j = 0; j < k.cols(); ++j) {
        const double y = top + cell * static_cast<double>(j);
        if (j > 0) svg.text(left - 4, y + cell * 0.85, std::string(1, a.transcript.joined[j - 1]), "end", " font-size=\"9\"");
        for (std::size_t t = 0; t < k.rows(); ++t) {
            const double v = k(t, j);
            const double x = left + cell * static_cast<double>(t);
            if (std::isfinite(v)) {
                svg.rect(x, y, cell, cell, ramp_color(hi > lo ? (v - lo) / (hi - lo) : 0.5));
            } else {
                svg.rect(x, y, cell, cell, kAbsentColor);
            }
        }
    }
    std::string points = fixed(left + cell * 0.5) + "," + fixed(top + cell * 0.5);
    for (const auto& p : a.path)
        points += " " + fixed(left + cell * (static_cast<double>(p.time_index) + 0.5)) + "," +
                  fixed(top + cell * (static_cast<double>(p.label_index) + 0.5));
    svg.raw("<polyline points=\"" + points + "\" fill=\"none\" stroke=\"" + hex(kPathColor) + "\" stroke-width=\"1.5\"/>\n");
    for (std::size_t t = 0; t < k.rows(); t += 10)
        svg.text(left + cell * (static_cast<double>(t) + 0.5), top + plot_h + 12, std::to_string(t), "middle", " font-size=\"9\"");
    legend(svg, left + plot_w + 20, top + 10, 120, lo, hi, "log-prob");
    return svg.finish();
}

json alignment_to_json(const Alignment& a) {
    json doc;
    doc["transcript"] = a.transcript.joined;
    doc["spoken_tokens"] = a.transcript.spoken_tokens;
    doc["frames"] = a.trellis.frames();
    doc["labels"] = a.trellis.labels();
    doc["score"] = a.trellis.best_score();
    json spans = json::array();
    for (const auto& s : a.spans) {
        json o;
        o["token"] = s.token_text;
        o["frame_start"] = s.frame_start;
        o["frame_end"] = s.frame_end;
        o["time_start"] = s.time.start_seconds();
        o["time_end"] = s.time.end_seconds();
        o["time_start_exact"] = format_rational(s.time.start);
        o["time_end_exact"] = format_rational(s.time.end);
        o["speech_token_start"] = s.speech_tokens.start;
        o["speech_token_end"] = s.speech_tokens.end;
        o["score"] = s.score;
        spans.push_back(std::move(o));
    }
    doc["spans"] = spans;
    doc["warnings"] = a.warnings;
    return doc;
}

}  // namespace cmtrace
