#include <doctest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "cli.hpp"
#include "cmtrace/report.hpp"
#include "support.hpp"

using namespace cmtrace;
namespace t = cmtrace::testing;
namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

struct Run {
    int code;
    std::string out, err;
};

Run invoke(std::vector<std::string> args) {
    args.insert(args.begin(), "cmtrace");
    std::ostringstream out, err;
    const int code = cmtrace::cli::run(args, out, err);
    return {code, out.str(), err.str()};
}

// Fixture bundle shared by all cases.
const fs::path& fixture() {
    static const fs::path dir = [] {
        auto d = t::scratch_dir("cli_fixture");
        REQUIRE(invoke({"make-fixture", "--output-dir", d.string()}).code == 0);
        return d;
    }();
    return dir;
}

std::string model() { return (fixture() / "planted.cmw").string(); }
std::string known() { return (fixture() / "known.json").string(); }

std::vector<std::vector<std::string>> read_csv_rows(const fs::path& p) {
    std::vector<std::vector<std::string>> rows;
    std::istringstream in(t::read_file(p));
    std::string line;
    while (std::getline(in, line)) {
        std::vector<std::string> cells;
        std::istringstream ls(line);
        std::string c;
        while (std::getline(ls, c, ',')) cells.push_back(c);
        rows.push_back(cells);
    }
    return rows;
}

}  // namespace

TEST_CASE("usage") {
    CHECK(invoke({"--help"}).code == 0);
    CHECK(invoke({}).code == 2);
    CHECK(invoke({"frobnicate"}).code == 2);
    CHECK(invoke({"trace", "--model", model()}).code == 2);
}

TEST_CASE("make-fixture writes the bundle") {
    for (const char* f : {"planted.cmw", "known.json", "planted_meta.json", "roman_republic.emissions"})
        CHECK(fs::exists(fixture() / f));
    const auto meta = json::parse(t::read_file(fixture() / "planted_meta.json"));
    CHECK(meta["expected_site"]["kind"] == "mlp_out");
}

TEST_CASE("shipped fixtures match a fresh make-fixture run") {
    CHECK(t::read_tree(fixture()) == t::read_tree(CMTRACE_FIXTURE_DIR));
}

TEST_CASE("filter") {
    const auto out = t::scratch_dir("cli_filter");
    SUBCASE("fixture bundle is fully retained") {
        const auto r = invoke({"filter", "--model", model(), "--dataset", known(), "--output-dir", out.string()});
        CHECK(r.code == 0);
        const auto summary = json::parse(t::read_file(out / "known_t2t_summary.json"));
        CHECK(summary["retention"] == 1.0);
        const auto kept = json::parse(t::read_file(out / "known_t2t.json"));
        CHECK(kept.size() == 8);
        CHECK(kept[0]["judgment"] == "exact");
    }
    SUBCASE("empty dataset") {
        std::ofstream(out / "empty.json") << "[]";
        const auto r = invoke({"filter", "--model", model(), "--dataset", (out / "empty.json").string(), "--output-dir",
                            out.string(), "--modality", "s2t"});
        CHECK(r.code == 0);
        CHECK(json::parse(t::read_file(out / "known_s2t.json")).empty());
    }
    SUBCASE("invalid modality") {
        CHECK(invoke({"filter", "--model", model(), "--dataset", known(), "--modality", "t2s"}).code == 2);
    }
    SUBCASE("skipped records only warn") {
        std::ofstream(out / "mixed.json") << R"([{"prompt":"The capital of Italy is","subject":"Peru","attribute":"Rome"}])";
        const auto r = invoke({"filter", "--model", model(), "--dataset", (out / "mixed.json").string(), "--output-dir",
                            out.string()});
        CHECK(r.code == 0);
        CHECK(r.err.find("warning") != std::string::npos);
    }
}

TEST_CASE("trace") {
    const auto out = t::scratch_dir("cli_trace");
    SUBCASE("planted localisation shows up in the MLP grid") {
        const auto r = invoke({"trace", "--model", model(), "--dataset", known(), "--output-dir", out.string(), "--window",
                            "mlp_out=1", "--noise-scale", "10", "--jobs", "2"});
        REQUIRE(r.code == 0);
        CHECK(r.out.find("traced 8 prompts") != std::string::npos);
        const auto grid = load_grid(out / "grid_mlp_out_w1.json");
        const auto meta = json::parse(t::read_file(fixture() / "planted_meta.json"));
        std::size_t best_b = 0, best_l = 0;
        double best = -1;
        for (std::size_t b = 0; b < grid.buckets.size(); ++b)
            for (std::size_t l = 0; l < grid.n_layers; ++l)
                if (grid.values[b][l] && *grid.values[b][l] > best) {
                    best = *grid.values[b][l];
                    best_b = b;
                    best_l = l;
                }
        CHECK(grid.buckets[best_b] == TokenBucket::last_subject);
        CHECK(best_l == meta["store_layer"].get<std::size_t>());
        for (const char* f : {"prompts.csv", "summary.json", "trace_hidden_state_w1.csv", "trace_attn_out_w5.csv",
                              "grid_hidden_state_w1.json", "grid_attn_out_w5.json"})
            CHECK(fs::exists(out / f));
    }
    SUBCASE("zero noise gives all-zero tables") {
        REQUIRE(invoke({"trace", "--model", model(), "--dataset", known(), "--output-dir", out.string(), "--noise-scale",
                     "0", "--kinds", "mlp_out,hidden_state"})
                    .code == 0);
        for (const char* f : {"trace_mlp_out_w5.csv", "trace_hidden_state_w1.csv"}) {
            const auto rows = read_csv_rows(out / f);
            REQUIRE(rows.size() > 1);
            for (std::size_t i = 1; i < rows.size(); ++i) CHECK(rows[i].back() == "0");
        }
        CHECK_FALSE(fs::exists(out / "trace_attn_out_w5.csv"));
    }
    SUBCASE("same seed, same bytes") {
        const auto a = out / "a", b = out / "b";
        REQUIRE(invoke({"trace", "--model", model(), "--dataset", known(), "--output-dir", a.string(), "--seed", "4",
                     "--jobs", "1"})
                    .code == 0);
        REQUIRE(invoke({"trace", "--model", model(), "--dataset", known(), "--output-dir", b.string(), "--seed", "4",
                     "--jobs", "3"})
                    .code == 0);
        CHECK(t::read_tree(a) == t::read_tree(b));
    }
    SUBCASE("speech modality") {
        const auto r = invoke({"trace", "--model", model(), "--dataset", known(), "--output-dir", out.string(),
                            "--modality", "s2t", "--kinds", "hidden_state"});
        CHECK(r.code == 0);
        CHECK(json::parse(t::read_file(out / "summary.json"))["modality"] == "s2t");
    }
    SUBCASE("record errors give exit 1 but the rest is traced") {
        std::ofstream(out / "bad.json")
            << R"([{"prompt":"The capital of Italy is","subject":"Italy","attribute":"Rome"},
                   {"prompt":"The capital of Italy is","subject":"Italy","attribute":"..."}])";
        const auto r = invoke({"trace", "--model", model(), "--dataset", (out / "bad.json").string(), "--output-dir",
                            out.string(), "--kinds", "mlp_out"});
        CHECK(r.code == 1);
        CHECK(r.err.find("record '1'") != std::string::npos);
        CHECK(json::parse(t::read_file(out / "summary.json"))["n_prompts"] == 1);
    }
    SUBCASE("bad window specs") {
        CHECK(invoke({"trace", "--model", model(), "--dataset", known(), "--window", "mlp_out=4"}).code == 2);
        CHECK(invoke({"trace", "--model", model(), "--dataset", known(), "--window", "mlp_out"}).code == 2);
    }
    SUBCASE("output directory from the environment") {
        const auto env_dir = out / "from_env";
        ::setenv("CMTRACE_OUTPUT_DIR", env_dir.string().c_str(), 1);
        const auto r = invoke({"trace", "--model", model(), "--dataset", known(), "--kinds", "attn_out"});
        ::unsetenv("CMTRACE_OUTPUT_DIR");
        CHECK(r.code == 0);
        CHECK(fs::exists(env_dir / "grid_attn_out_w5.json"));
    }
}

TEST_CASE("align") {
    const auto out = t::scratch_dir("cli_align");
    const auto em = (fixture() / "roman_republic.emissions").string();
    SUBCASE("six spans in order, with subject and heatmap") {
        const auto r = invoke({"align", "--emissions", em, "--transcript", "The capital of Roman Republic is",
                            "--token-rate", "25", "--subject", "Roman Republic", "--trellis-heatmap", "--output-dir",
                            out.string()});
        REQUIRE(r.code == 0);
        const auto doc = json::parse(t::read_file(out / "alignment.json"));
        std::vector<std::string> tokens;
        for (const auto& s : doc["spans"]) tokens.push_back(s["token"]);
        CHECK(tokens == std::vector<std::string>{"THE", "CAPITAL", "OF", "ROMAN", "REPUBLIC", "IS"});
        CHECK(doc["subject"]["speech_token_start"] == doc["spans"][3]["speech_token_start"]);
        CHECK(doc["subject"]["speech_token_end"] == doc["spans"][4]["speech_token_end"]);
        CHECK(fs::exists(out / "trellis.svg"));
    }
    SUBCASE("missing emissions file") {
        CHECK(invoke({"align", "--emissions", (out / "none").string(), "--transcript", "x", "--token-rate", "25"}).code == 2);
    }
    SUBCASE("token rate is required") {
        const auto r = invoke({"align", "--emissions", em, "--transcript", "The capital"});
        CHECK(r.code == 2);
        CHECK(r.err.find("token rate") != std::string::npos);
    }
    SUBCASE("infeasible alignment") {
        std::string long_text;
        for (int i = 0; i < 40; ++i) long_text += "republic ";
        const auto r = invoke({"align", "--emissions", em, "--transcript", long_text, "--token-rate", "25"});
        CHECK(r.code == 1);
        CHECK(r.err.find("T=100") != std::string::npos);
        CHECK(r.err.find("N=") != std::string::npos);
    }
    SUBCASE("unknown subject") {
        CHECK(invoke({"align", "--emissions", em, "--transcript", "The capital of Roman Republic is", "--token-rate", "25",
                   "--subject", "Carthage", "--output-dir", out.string()})
                  .code == 1);
    }
}

TEST_CASE("report") {
    const auto out = t::scratch_dir("cli_report");
    AieGrid g;
    g.kind = ComponentKind::attn_out;
    g.window = 1;
    g.n_layers = 3;
    g.buckets = {TokenBucket::middle_subject, TokenBucket::last_token};
    g.values = {{std::nullopt, std::nullopt, std::nullopt}, {0.1, 0.2, 0.4}};
    g.log_values = {{std::nullopt, std::nullopt, std::nullopt}, {-1.0, log_aie(0.2), log_aie(0.4)}};
    g.n_prompts = {{0, 0, 0}, {1, 1, 1}};
    save_grid(out / "grid_toy.json", g);

    SUBCASE("table and image per grid") {
        REQUIRE(invoke({"report", "--grids", out.string()}).code == 0);
        const auto rows = read_csv_rows(out / "grid_toy.csv");
        CHECK(rows.size() == 1 + 6);
        const auto svg = t::read_file(out / "grid_toy.svg");
        CHECK(svg.find(hex(kAbsentColor)) != std::string::npos);
        std::ifstream table(out / "grid_toy.csv");
        const auto back = read_grid_table(table);
        CHECK(back.values == g.values);
    }
    SUBCASE("format selection and output dir") {
        const auto dst = out / "dst";
        REQUIRE(invoke({"report", "--grids", (out / "grid_toy.json").string(), "--format", "svg", "--output-dir",
                     dst.string()})
                    .code == 0);
        CHECK(fs::exists(dst / "grid_toy.svg"));
        CHECK_FALSE(fs::exists(dst / "grid_toy.csv"));
        CHECK(invoke({"report", "--grids", out.string(), "--format", "png"}).code == 2);
    }
    SUBCASE("malformed grid") {
        std::ofstream(out / "grid_bad.json") << "{\"format\": \"nope\"}";
        CHECK(invoke({"report", "--grids", (out / "grid_bad.json").string()}).code == 1);
        CHECK(invoke({"report", "--grids", (out / "missing").string()}).code == 2);
    }
}
