#include <doctest.h>

#include <sstream>

#include "cmtrace/error.hpp"
#include "cmtrace/fixtures.hpp"
#include "cmtrace/report.hpp"
#include "support.hpp"

using namespace cmtrace;
namespace t = cmtrace::testing;

namespace {

std::size_t count(const std::string& hay, const std::string& needle) {
    std::size_t n = 0;
    for (auto at = hay.find(needle); at != std::string::npos; at = hay.find(needle, at + 1)) ++n;
    return n;
}

// Two buckets x three layers, one absent cell.
AieGrid toy_grid() {
    AieGrid g;
    g.kind = ComponentKind::mlp_out;
    g.window = 5;
    g.n_layers = 3;
    g.buckets = {TokenBucket::last_subject, TokenBucket::last_token};
    g.values = {{0.5, 0.1 + 0.2, -0.25}, {1e-9, std::nullopt, 0.125}};
    g.log_values.resize(2);
    g.n_prompts = {{4, 4, 4}, {2, 0, 3}};
    for (std::size_t b = 0; b < 2; ++b)
        for (const auto& v : g.values[b])
            g.log_values[b].push_back(v ? std::optional<double>(log_aie(*v)) : std::nullopt);
    g.total_prompts = 4;
    g.noise_scale = 3.0;
    g.sigma = 0.7071067811865476;
    g.seed = 11;
    return g;
}

void check_same(const AieGrid& a, const AieGrid& b) {
    CHECK(a.buckets == b.buckets);
    CHECK(a.n_layers == b.n_layers);
    CHECK(a.values == b.values);
    CHECK(a.log_values == b.log_values);
    CHECK(a.n_prompts == b.n_prompts);
}

}  // namespace

TEST_CASE("doubles print in shortest round-trip form") {
    for (double v : {0.1 + 0.2, 1e-300, -0.0, 123456789.125, 5e-324, 0.3})
        CHECK(parse_double(format_double(v)) == v);
    CHECK(format_double(0.25) == "0.25");
    CHECK_THROWS_AS(parse_double("0.25x"), FormatError);
}

TEST_CASE("grid documents round-trip exactly") {
    const auto g = toy_grid();
    const auto doc = grid_to_json(g);
    CHECK(doc["format"] == "cmtrace-aie-grid");
    CHECK(doc["values"][1][1].is_null());  // layer 1, bucket last_token
    CHECK(doc["values"][0][0] == 0.5);
    const auto back = grid_from_json(nlohmann::ordered_json::parse(doc.dump()));
    check_same(g, back);
    CHECK(back.kind == g.kind);
    CHECK(back.window == 5);
    CHECK(back.sigma == g.sigma);
    CHECK(back.seed == 11);

    const auto dir = t::scratch_dir("grid_rt");
    save_grid(dir / "g.json", g);
    check_same(g, load_grid(dir / "g.json"));

    auto bad = doc;
    bad["buckets"] = {"last_token", "last_subject"};
    CHECK_THROWS_AS(grid_from_json(bad), FormatError);
    bad = doc;
    bad.erase("format");
    CHECK_THROWS_AS(grid_from_json(bad), FormatError);
    bad = doc;
    bad["values"][0] = {1.0};
    CHECK_THROWS_AS(grid_from_json(bad), FormatError);
}

TEST_CASE("grid tables") {
    const auto g = toy_grid();
    std::stringstream table;
    write_grid_table(table, g);
    const std::string text = table.str();
    CHECK(text.starts_with("bucket,layer,aie,log_aie,n_prompts\n"));
    CHECK(count(text, "\n") == 1 + 6);
    CHECK(text.find("last_token,1,,,0\n") != std::string::npos);
    std::istringstream in(text);
    check_same(g, read_grid_table(in));

    std::istringstream broken("bucket,layer,aie,log_aie,n_prompts\nlast_token,x,1,0,1\n");
    CHECK_THROWS_AS(read_grid_table(broken), FormatError);
}

TEST_CASE("heatmap images") {
    const auto svg = grid_heatmap_svg(toy_grid());
    CHECK(svg.starts_with("<svg"));
    CHECK(count(svg, "class=\"cell") == 6);
    CHECK(count(svg, "class=\"cell absent\"") == 1);
    CHECK(svg.find("fill=\"" + hex(kAbsentColor) + "\" class=\"cell absent\"") != std::string::npos);
    CHECK(svg.find("last_subject") != std::string::npos);

    // a whole absent row
    auto g = toy_grid();
    g.values[1] = {std::nullopt, std::nullopt, std::nullopt};
    g.log_values[1] = g.values[1];
    CHECK(count(grid_heatmap_svg(g), "class=\"cell absent\"") == 3);

    CHECK(ramp_color(0.0) == kColorRamp.front());
    CHECK(ramp_color(1.0) == kColorRamp.back());
    CHECK(ramp_color(0.5) == kColorRamp[2]);
    CHECK(ramp_color(-3.0) == kColorRamp.front());
    CHECK(hex(Rgb{253, 231, 37}) == "#fde725");
}

TEST_CASE("trace tables") {
    TraceResult r;
    r.prompt_id = "p,1";
    r.kind = ComponentKind::attn_out;
    r.window = 5;
    r.buckets.resize(1);
    r.buckets[0][5] = BucketValue{0.125, 1};
    std::stringstream out;
    write_trace_table(out, std::vector<TraceResult>{r});
    CHECK(out.str() == "prompt_id,kind,layer,bucket,raw_position_count,ie_mean\n\"p,1\",attn_out,0,last_token,1,0.125\n");
}

TEST_CASE("alignment records keep a stable field order") {
    const auto fx = make_synthetic_emissions("Roman Republic", LabelVocab::english());
    const auto al = align(fx.file.emissions, "Roman Republic", fx.file.meta(Rational(25)));
    const auto doc = alignment_to_json(al);
    std::vector<std::string> keys;
    for (const auto& [k, v] : doc.items()) keys.push_back(k);
    CHECK(keys == std::vector<std::string>{"transcript", "spoken_tokens", "frames", "labels", "score", "spans", "warnings"});
    std::vector<std::string> span_keys;
    for (const auto& [k, v] : doc["spans"][0].items()) span_keys.push_back(k);
    CHECK(span_keys == std::vector<std::string>{"token", "frame_start", "frame_end", "time_start", "time_end",
                                                "time_start_exact", "time_end_exact", "speech_token_start",
                                                "speech_token_end", "score"});
    CHECK(doc["spans"][1]["token"] == "REPUBLIC");

    const auto svg = trellis_heatmap_svg(al);
    CHECK(svg.find("<polyline") != std::string::npos);
    CHECK(svg.find(hex(kPathColor)) != std::string::npos);
}
