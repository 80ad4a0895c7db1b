#include "rebalance/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <cstring>

#include "bytes.hpp"
#include "rebalance/rng.hpp"

namespace rebalance {

namespace {

using namespace rebalance::bytes;

constexpr std::size_t kHeaderSize = 32;  // magic + version + n + d + classes + spurious

EmbeddingDataset parse_gemb(const std::vector<unsigned char>& bytes) {
    if (bytes.size() < kHeaderSize) {
        throw ParseError("truncated header: need " + std::to_string(kHeaderSize) + " bytes, have " +
                             std::to_string(bytes.size()),
                         bytes.size());
    }
    if (std::memcmp(bytes.data(), "GEMB", 4) != 0) {
        throw ParseError("magic mismatch: expected GEMB", 0);
    }
    const std::uint32_t version = get_u32(bytes.data() + 4);
    if (version != 1) throw ParseError("unsupported version " + std::to_string(version), 4);
    const std::uint64_t n = get_u64(bytes.data() + 8);
    const std::uint64_t d = get_u64(bytes.data() + 16);
    const std::uint32_t num_classes = get_u32(bytes.data() + 24);
    const std::uint32_t num_spurious = get_u32(bytes.data() + 28);
    if (n == 0) throw ParseError("n must be >= 1", 8);
    if (d == 0) throw ParseError("d must be >= 1", 16);
    if (num_classes == 0) throw ParseError("num_classes must be >= 1", 24);

    // Size arithmetic in 128 bits so a hostile header cannot wrap.
    const unsigned __int128 cells = static_cast<unsigned __int128>(n) * d;
    if (cells > (static_cast<unsigned __int128>(1) << 58)) {
        throw ParseError("n*d overflows addressable storage", 16);
    }
    const unsigned __int128 expected128 = static_cast<unsigned __int128>(kHeaderSize) +
                                          4 * cells + 4 * static_cast<unsigned __int128>(n) +
                                          (num_spurious > 0 ? 4 * static_cast<unsigned __int128>(n) : 0);
    if (expected128 > (static_cast<unsigned __int128>(1) << 62)) {
        throw ParseError("declared payload overflows addressable storage", 16);
    }
    const std::size_t expected = static_cast<std::size_t>(expected128);
    if (bytes.size() < expected) {
        throw ParseError("truncated payload: expected " + std::to_string(expected) +
                             " bytes, have " + std::to_string(bytes.size()),
                         bytes.size());
    }
    if (bytes.size() > expected) {
        throw ParseError("trailing bytes after declared payload", expected);
    }

    EmbeddingDataset ds;
    ds.num_classes = num_classes;
    ds.num_spurious = num_spurious;
    ds.features = Matrix(static_cast<std::size_t>(n), static_cast<std::size_t>(d));
    std::size_t off = kHeaderSize;
    for (std::size_t i = 0; i < ds.features.data.size(); ++i, off += 4) {
        ds.features.data[i] = static_cast<double>(get_f32(bytes.data() + off));
    }
    ds.class_labels.resize(static_cast<std::size_t>(n));
    for (std::size_t i = 0; i < n; ++i, off += 4) {
        const std::uint32_t y = get_u32(bytes.data() + off);
        if (y >= num_classes) {
            throw ParseError("class label " + std::to_string(y) + " out of range at row " +
                                 std::to_string(i),
                             off);
        }
        ds.class_labels[i] = y;
    }
    if (num_spurious > 0) {
        ds.spurious_labels.resize(static_cast<std::size_t>(n));
        for (std::size_t i = 0; i < n; ++i, off += 4) {
            const std::uint32_t s = get_u32(bytes.data() + off);
            if (s >= num_spurious) {
                throw ParseError("spurious label " + std::to_string(s) + " out of range at row " +
                                     std::to_string(i),
                                 off);
            }
            ds.spurious_labels[i] = s;
        }
    }
    return ds;
}

// Strict unsigned integer field: digits only.
bool parse_u32_field(const std::string& s, std::uint32_t& out) {
    if (s.empty() || s.size() > 10) return false;
    std::uint64_t v = 0;
    for (char c : s) {
        if (c < '0' || c > '9') return false;
        v = v * 10 + static_cast<unsigned>(c - '0');
    }
    if (v > UINT32_MAX) return false;
    out = static_cast<std::uint32_t>(v);
    return true;
}

std::vector<std::string> split_fields(const std::string& line) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        const std::size_t pos = line.find(',', start);
        if (pos == std::string::npos) {
            out.push_back(line.substr(start));
            return out;
        }
        out.push_back(line.substr(start, pos - start));
        start = pos + 1;
    }
}

EmbeddingDataset parse_csv(const std::vector<unsigned char>& bytes) {
    const std::string text(bytes.begin(), bytes.end());
    std::vector<std::pair<std::size_t, std::string>> lines;  // (byte offset, content)
    std::size_t start = 0;
    while (start <= text.size()) {
        std::size_t end = text.find('\n', start);
        if (end == std::string::npos) end = text.size();
        std::string line = text.substr(start, end - start);
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (!line.empty()) lines.emplace_back(start, line);
        if (end == text.size()) break;
        start = end + 1;
    }
    if (lines.empty()) throw ParseError("empty csv", 0);

    const auto header = split_fields(lines[0].second);
    bool has_spurious = false;
    std::size_t d = 0;
    if (header.size() >= 2 && header.back() == "spurious" && header[header.size() - 2] == "class") {
        has_spurious = true;
        d = header.size() - 2;
    } else if (!header.empty() && header.back() == "class") {
        d = header.size() - 1;
    } else {
        throw ParseError("csv header must end in class[,spurious]", lines[0].first);
    }
    if (d == 0) throw ParseError("csv header has no feature columns", lines[0].first);
    for (std::size_t j = 0; j < d; ++j) {
        if (header[j] != "f" + std::to_string(j)) {
            throw ParseError("csv header: expected column f" + std::to_string(j) + ", got " +
                                 header[j],
                             lines[0].first);
        }
    }

    const std::size_t n = lines.size() - 1;
    if (n == 0) throw ParseError("csv has no data rows", lines[0].first);

    EmbeddingDataset ds;
    ds.features = Matrix(n, d);
    ds.class_labels.resize(n);
    if (has_spurious) ds.spurious_labels.resize(n);
    std::uint32_t max_class = 0;
    std::uint32_t max_spurious = 0;
    const std::size_t want = d + 1 + (has_spurious ? 1 : 0);
    for (std::size_t i = 0; i < n; ++i) {
        const auto& [off, line] = lines[i + 1];
        const auto fields = split_fields(line);
        if (fields.size() != want) {
            throw ParseError("csv row " + std::to_string(i + 1) + ": expected " +
                                 std::to_string(want) + " fields, got " +
                                 std::to_string(fields.size()),
                             off);
        }
        for (std::size_t j = 0; j < d; ++j) {
            const char* s = fields[j].c_str();
            char* endp = nullptr;
            // Parsed at 32-bit precision: features are float32 on disk.
            const float v = std::strtof(s, &endp);
            if (endp == s || *endp != '\0' || !std::isfinite(v)) {
                throw ParseError("csv row " + std::to_string(i + 1) + ": bad feature value '" +
                                     fields[j] + "'",
                                 off);
            }
            ds.features.at(i, j) = static_cast<double>(v);
        }
        if (!parse_u32_field(fields[d], ds.class_labels[i])) {
            throw ParseError("csv row " + std::to_string(i + 1) + ": bad class label '" +
                                 fields[d] + "'",
                             off);
        }
        max_class = std::max(max_class, ds.class_labels[i]);
        if (has_spurious) {
            if (!parse_u32_field(fields[d + 1], ds.spurious_labels[i])) {
                throw ParseError("csv row " + std::to_string(i + 1) + ": bad spurious label '" +
                                     fields[d + 1] + "'",
                                 off);
            }
            max_spurious = std::max(max_spurious, ds.spurious_labels[i]);
        }
    }
    ds.num_classes = max_class + 1;
    ds.num_spurious = has_spurious ? max_spurious + 1 : 0;
    return ds;
}

}  // namespace

std::uint32_t EmbeddingDataset::group_of(std::size_t row) const {
    if (!has_spurious()) throw MissingAnnotation("group_of: dataset has no spurious labels");
    if (row >= size()) throw InvalidInput("group_of: row out of range");
    return class_labels[row] * num_spurious + spurious_labels[row];
}

void EmbeddingDataset::validate() const {
    if (size() == 0) throw InvalidInput("EmbeddingDataset: n must be >= 1");
    if (dim() == 0) throw InvalidInput("EmbeddingDataset: d must be >= 1");
    if (num_classes == 0) throw InvalidInput("EmbeddingDataset: num_classes must be >= 1");
    if (class_labels.size() != size()) {
        throw InvalidInput("EmbeddingDataset: class label count mismatch");
    }
    for (std::uint32_t y : class_labels) {
        if (y >= num_classes) throw InvalidInput("EmbeddingDataset: class label out of range");
    }
    if (num_spurious == 0) {
        if (!spurious_labels.empty()) {
            throw InvalidInput("EmbeddingDataset: spurious labels present but num_spurious = 0");
        }
    } else {
        if (spurious_labels.size() != size()) {
            throw InvalidInput("EmbeddingDataset: spurious label count mismatch");
        }
        for (std::uint32_t s : spurious_labels) {
            if (s >= num_spurious) {
                throw InvalidInput("EmbeddingDataset: spurious label out of range");
            }
        }
    }
    for (double v : features.data) {
        if (!std::isfinite(v)) throw InvalidInput("EmbeddingDataset: non-finite feature");
    }
}

EmbeddingDataset EmbeddingDataset::subset(const std::vector<std::size_t>& rows) const {
    EmbeddingDataset out;
    out.num_classes = num_classes;
    out.num_spurious = num_spurious;
    out.features = Matrix(rows.size(), dim());
    out.class_labels.resize(rows.size());
    if (has_spurious()) out.spurious_labels.resize(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const std::size_t r = rows[i];
        if (r >= size()) throw InvalidInput("subset: row index out of range");
        std::copy(features.row(r), features.row(r) + dim(), out.features.row(i));
        out.class_labels[i] = class_labels[r];
        if (has_spurious()) out.spurious_labels[i] = spurious_labels[r];
    }
    return out;
}

void SplitSpec::validate() const {
    if (fractions.empty()) throw InvalidInput("SplitSpec: no fractions");
    double sum = 0.0;
    for (double f : fractions) {
        if (!(f > 0.0 && f < 1.0)) throw InvalidInput("SplitSpec: fractions must be in (0,1)");
        sum += f;
    }
    if (std::abs(sum - 1.0) > 1e-9) throw InvalidInput("SplitSpec: fractions must sum to 1");
}

AnnotationLedger::AnnotationLedger(std::size_t dataset_size)
    : class_seen_(dataset_size, false), group_seen_(dataset_size, false) {}

void AnnotationLedger::reveal(const std::vector<std::size_t>& rows, LabelKind kind) {
    auto& seen = (kind == LabelKind::Class) ? class_seen_ : group_seen_;
    auto& count = (kind == LabelKind::Class) ? class_count_ : group_count_;
    for (std::size_t r : rows) {
        if (r >= seen.size()) throw InvalidInput("reveal: index out of bounds");
        if (!seen[r]) {
            seen[r] = true;
            ++count;
        }
    }
}

void AnnotationLedger::reveal_all(LabelKind kind) {
    auto& seen = (kind == LabelKind::Class) ? class_seen_ : group_seen_;
    auto& count = (kind == LabelKind::Class) ? class_count_ : group_count_;
    for (std::size_t r = 0; r < seen.size(); ++r) {
        if (!seen[r]) {
            seen[r] = true;
            ++count;
        }
    }
}

EmbeddingDataset load_embeddings(const std::string& path) {
    const auto bytes = read_file(path);
    EmbeddingDataset ds;
    if (path.size() >= 4 && path.compare(path.size() - 4, 4, ".csv") == 0) {
        ds = parse_csv(bytes);
    } else {
        ds = parse_gemb(bytes);
    }
    ds.validate();
    return ds;
}

void save_embeddings(const EmbeddingDataset& ds, const std::string& path) {
    ds.validate();
    std::string out;
    out.reserve(kHeaderSize + 4 * ds.features.data.size() + 8 * ds.size());
    out.append("GEMB");
    put_u32(out, 1);
    put_u64(out, ds.size());
    put_u64(out, ds.dim());
    put_u32(out, ds.num_classes);
    put_u32(out, ds.num_spurious);
    for (double v : ds.features.data) put_f32(out, static_cast<float>(v));
    for (std::uint32_t y : ds.class_labels) put_u32(out, y);
    for (std::uint32_t s : ds.spurious_labels) put_u32(out, s);
    write_file(path, out);
}

std::vector<EmbeddingDataset> split(const EmbeddingDataset& ds, const SplitSpec& spec) {
    spec.validate();
    const std::size_t n = ds.size();
    if (n < spec.fractions.size()) {
        throw DegenerateSplit("split: fewer rows than parts");
    }
    std::vector<std::size_t> sizes(spec.fractions.size());
    std::size_t assigned = 0;
    for (std::size_t i = 0; i < spec.fractions.size(); ++i) {
        // The epsilon keeps exact products like 0.95 * 1000 from flooring low.
        sizes[i] = static_cast<std::size_t>(
            std::floor(spec.fractions[i] * static_cast<double>(n) + 1e-9));
        assigned += sizes[i];
    }
    sizes[0] += n - assigned;  // remainder to the first part
    for (std::size_t i = 0; i < sizes.size(); ++i) {
        if (sizes[i] == 0) {
            throw DegenerateSplit("split: part " + std::to_string(i) + " is empty");
        }
    }

    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    Rng rng(spec.seed);
    rng.shuffle(order);

    std::vector<EmbeddingDataset> parts;
    parts.reserve(sizes.size());
    std::size_t cursor = 0;
    for (std::size_t s : sizes) {
        std::vector<std::size_t> rows(order.begin() + static_cast<std::ptrdiff_t>(cursor),
                                      order.begin() + static_cast<std::ptrdiff_t>(cursor + s));
        parts.push_back(ds.subset(rows));
        cursor += s;
    }
    return parts;
}

std::map<std::uint32_t, std::size_t> group_counts(const EmbeddingDataset& ds) {
    if (!ds.has_spurious()) throw MissingAnnotation("group_counts: no spurious labels");
    std::map<std::uint32_t, std::size_t> counts;
    for (std::size_t i = 0; i < ds.size(); ++i) counts[ds.group_of(i)]++;
    return counts;
}

}  // namespace rebalance
