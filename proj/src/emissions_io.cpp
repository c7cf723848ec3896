#include "cmtrace/emissions_io.hpp"

#include <fstream>

#include "binary_io.hpp"
#include "cmtrace/error.hpp"

namespace cmtrace {

namespace {
constexpr const char* kMagic = "cmtrace-emissions 1";
constexpr const char* kWhat = "emissions file";
}  // namespace

AudioMeta EmissionsFile::meta(const Rational& token_rate) const {
    AudioMeta m;
    m.sample_count = sample_count;
    m.sample_rate = sample_rate;
    m.frame_count = static_cast<std::int64_t>(emissions.frames());
    m.token_rate = token_rate;
    return m;
}

void save_emissions(std::ostream& out, const EmissionsFile& file) {
    const auto& em = file.emissions;
    out << kMagic << '\n';
    out << "frames " << em.frames() << '\n';
    out << "labels " << em.vocab.size() << '\n';
    out << "label_set " << em.vocab.labels() << '\n';
    out << "blank " << em.vocab.blank() << '\n';
    out << "boundary " << em.vocab.boundary() << '\n';
    out << "sample_rate " << file.sample_rate << '\n';
    out << "samples " << file.sample_count << '\n';
    if (file.token_rate) out << "token_rate " << format_rational(*file.token_rate) << '\n';
    out << "end_header\n";
    detail::write_f64_le(out, em.log_probs.flat());
}

void save_emissions(const std::filesystem::path& path, const EmissionsFile& file) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write " + path.string());
    save_emissions(out, file);
}

EmissionsFile load_emissions(std::istream& in) {
    using detail::parse_header_number;
    const auto h = detail::read_text_header(in, kMagic, kWhat);
    const auto frames = parse_header_number<std::size_t>(h.get("frames", kWhat), "frames", kWhat);
    const auto n_labels = parse_header_number<std::size_t>(h.get("labels", kWhat), "labels", kWhat);
    const std::string& labels = h.get("label_set", kWhat);
    const std::string& blank = h.get("blank", kWhat);
    const std::string& boundary = h.get("boundary", kWhat);
    if (labels.size() != n_labels)
        throw FormatError(std::string(kWhat) + ": label_set has " + std::to_string(labels.size()) +
                          " labels, header declares " + std::to_string(n_labels));
    if (blank.size() != 1 || boundary.size() != 1)
        throw FormatError(std::string(kWhat) + ": blank and boundary must be single characters");
    if (frames == 0) throw FormatError(std::string(kWhat) + ": zero frames");

    std::optional<LabelVocab> vocab;
    try {
        vocab.emplace(labels, blank[0], boundary[0]);
    } catch (const Error& e) {
        throw FormatError(std::string(kWhat) + ": " + e.what());
    }
    EmissionsFile file{EmissionMatrix{Matrix(frames, n_labels), *vocab}, 0, 0, std::nullopt};
    file.sample_rate = parse_header_number<std::int64_t>(h.get("sample_rate", kWhat), "sample_rate", kWhat);
    file.sample_count = parse_header_number<std::int64_t>(h.get("samples", kWhat), "samples", kWhat);
    if (file.sample_rate <= 0 || file.sample_count <= 0)
        throw FormatError(std::string(kWhat) + ": sample_rate and samples must be positive");
    if (h.has("token_rate")) {
        try {
            file.token_rate = parse_rational(h.get("token_rate", kWhat));
        } catch (const Error& e) {
            throw FormatError(std::string(kWhat) + ": " + e.what());
        }
    }
    detail::read_f64_le(in, file.emissions.log_probs.flat(), kWhat);
    detail::expect_eof(in, kWhat);
    file.emissions.validate();
    return file;
}

EmissionsFile load_emissions(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open " + path.string());
    return load_emissions(in);
}

}  // namespace cmtrace
