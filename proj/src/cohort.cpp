#include "ehrgan/cohort.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <set>
#include <sstream>
#include <unordered_set>

#include "ehrgan/checkpoint.hpp"
#include "ehrgan/error.hpp"
#include "ehrgan/hash.hpp"
#include "ehrgan/rng.hpp"

namespace ehrgan {

const char* to_string(Label l) { return l == Label::Case ? "case" : "control"; }

const char* to_string(Split s) {
    switch (s) {
        case Split::Train: return "train";
        case Split::Val: return "val";
        case Split::Test: return "test";
        default: return "-";
    }
}

Label parse_label(const std::string& s) {
    if (s == "case") return Label::Case;
    if (s == "control") return Label::Control;
    throw ParseError("unknown label '" + s + "' (expected case or control)");
}

Split parse_split(const std::string& s) {
    if (s == "train") return Split::Train;
    if (s == "val") return Split::Val;
    if (s == "test") return Split::Test;
    if (s == "-") return Split::Unassigned;
    throw ParseError("unknown split '" + s + "'");
}

Vocabulary::Vocabulary(std::size_t size, std::size_t diagnosis_count) : size_(size), diagnosis_count_(diagnosis_count) {
    if (diagnosis_count > size) throw InvalidArgument("diagnosis count exceeds vocabulary size");
}

CodeKind Vocabulary::kind(std::int32_t id) const {
    if (!contains(id)) throw InvalidArgument("code " + std::to_string(id) + " outside vocabulary");
    return static_cast<std::size_t>(id) < diagnosis_count_ ? CodeKind::Diagnosis : CodeKind::Medication;
}

EventCode Vocabulary::code(std::int32_t id) const {
    EventCode c{id, kind(id), {}};
    char buf[24];
    if (c.kind == CodeKind::Diagnosis) std::snprintf(buf, sizeof buf, "D%04d", id);
    else std::snprintf(buf, sizeof buf, "M%04d", id - static_cast<std::int32_t>(diagnosis_count_));
    c.display = buf;
    return c;
}

std::vector<std::int32_t> PatientRecord::codes() const {
    std::vector<std::int32_t> out;
    out.reserve(events.size());
    for (const auto& e : events) out.push_back(e.code);
    return out;
}

std::vector<const PatientRecord*> Cohort::in_split(Split s) const {
    std::vector<const PatientRecord*> out;
    for (std::size_t i = 0; i < records.size(); ++i)
        if (i < splits.size() && splits[i] == s) out.push_back(&records[i]);
    return out;
}

std::vector<const PatientRecord*> Cohort::all() const {
    std::vector<const PatientRecord*> out;
    for (const auto& r : records) out.push_back(&r);
    return out;
}

std::size_t Cohort::count(Label l) const {
    return static_cast<std::size_t>(
        std::count_if(records.begin(), records.end(), [l](const PatientRecord& r) { return r.label == l; }));
}

// ---------------------------------------------------------------------------

void CohortSpec::validate() const {
    auto prob = [](double p, const char* what) {
        if (!(p >= 0 && p <= 1)) throw InvalidArgument(std::string(what) + " must lie in [0,1]");
    };
    if (vocab_size == 0) throw InvalidArgument("vocabulary size must be positive");
    prob(diagnosis_fraction, "diagnosis_fraction");
    prob(case_draw_prob, "case_draw_prob");
    prob(noise, "noise");
    prob(cluster_prob_min, "cluster_prob_min");
    prob(cluster_prob_max, "cluster_prob_max");
    if (cluster_prob_min > cluster_prob_max) throw InvalidArgument("cluster_prob_min exceeds cluster_prob_max");
    if (case_count > control_count) throw InvalidArgument("case count must not exceed control count");
    if (case_count + control_count == 0) throw InvalidArgument("cohort must contain at least one patient");
    if (!(events_per_window >= 1)) throw InvalidArgument("events_per_window must be >= 1");
    if (!(length_log_sd >= 0) || !std::isfinite(length_log_mean)) throw InvalidArgument("invalid length distribution");

    const std::size_t n_clusters = clusters.empty() ? cluster_count : clusters.size();
    if (clusters.empty() && cluster_count * cluster_size > vocab_size)
        throw InvalidArgument("clusters need more codes than the vocabulary holds");
    for (const auto& c : clusters) {
        prob(c.draw_prob, "cluster draw_prob");
        if (c.codes.empty()) throw InvalidArgument("explicit cluster has no codes");
        for (auto code : c.codes)
            if (code < 0 || static_cast<std::size_t>(code) >= vocab_size)
                throw InvalidArgument("cluster code " + std::to_string(code) + " outside vocabulary");
    }
    for (auto c : case_clusters)
        if (c >= n_clusters) throw InvalidArgument("case cluster index " + std::to_string(c) + " out of range");
    if (n_clusters == 0 && noise < 1) throw InvalidArgument("noise must be 1 when no clusters are defined");

    // The length support must reach [50, 250]: reject when more than
    // 99.9% of the lognormal mass lies outside it.
    const double lo = std::log(kMinRecordLength - 0.5), hi = std::log(kMaxRecordLength + 0.5);
    auto cdf = [&](double x) {
        if (length_log_sd == 0) return x >= length_log_mean ? 1.0 : 0.0;
        return 0.5 * std::erfc(-(x - length_log_mean) / (length_log_sd * std::sqrt(2.0)));
    };
    if (cdf(hi) - cdf(lo) < 1e-3) throw InvalidArgument("length distribution puts no mass on [50, 250] events");
}

std::string CohortSpec::canonical() const {
    std::ostringstream os;
    os.precision(17);
    os << "name=" << name << "\nvocab_size=" << vocab_size << "\ndiagnosis_fraction=" << diagnosis_fraction
       << "\ncluster_count=" << cluster_count << "\ncluster_size=" << cluster_size
       << "\ncluster_prob_min=" << cluster_prob_min << "\ncluster_prob_max=" << cluster_prob_max
       << "\ncase_draw_prob=" << case_draw_prob << "\ncase_count=" << case_count << "\ncontrol_count=" << control_count
       << "\nlength_log_mean=" << length_log_mean << "\nlength_log_sd=" << length_log_sd
       << "\nevents_per_window=" << events_per_window << "\nnoise=" << noise << "\nbackground_zipf=" << background_zipf
       << "\ncluster_zipf=" << cluster_zipf << "\nseed=" << seed << "\ncase_clusters=";
    for (auto c : case_clusters) os << c << ",";
    for (const auto& c : clusters) {
        os << "\ncluster=" << c.draw_prob << ":";
        for (auto code : c.codes) os << code << ",";
    }
    os << "\n";
    return os.str();
}

std::string CohortSpec::hash() const { return content_hash(canonical()); }

std::string GenerationStats::to_text() const {
    std::ostringstream os;
    os << "generated=" << generated << "\ndropped_short=" << dropped_short << "\ntruncated=" << truncated
       << "\ncase_count=" << case_count << "\ncontrol_count=" << control_count << "\n";
    for (std::size_t c = 0; c < cluster_active_case.size(); ++c)
        os << "cluster." << c << ".active_case=" << cluster_active_case[c] << "\ncluster." << c
           << ".active_control=" << cluster_active_control[c] << "\n";
    return os.str();
}

std::vector<ClusterSpec> resolve_clusters(const CohortSpec& spec) {
    if (!spec.clusters.empty()) return spec.clusters;
    Rng rng(derive_seed(spec.seed, "clusters"));
    std::vector<std::int32_t> pool(spec.vocab_size);
    for (std::size_t i = 0; i < pool.size(); ++i) pool[i] = static_cast<std::int32_t>(i);
    rng.shuffle(pool);
    std::vector<ClusterSpec> out(spec.cluster_count);
    for (std::size_t c = 0; c < spec.cluster_count; ++c) {
        out[c].codes.assign(pool.begin() + static_cast<std::ptrdiff_t>(c * spec.cluster_size),
                            pool.begin() + static_cast<std::ptrdiff_t>((c + 1) * spec.cluster_size));
        out[c].draw_prob = rng.uniform(spec.cluster_prob_min, spec.cluster_prob_max);
    }
    return out;
}

bool clamp_and_order(PatientRecord& record, GenerationStats* stats) {
    std::stable_sort(record.events.begin(), record.events.end(),
                     [](const Event& a, const Event& b) { return a.window < b.window; });
    if (record.events.size() < kMinRecordLength) {
        if (stats) ++stats->dropped_short;
        return false;
    }
    if (record.events.size() > kMaxRecordLength) {
        record.events.erase(record.events.begin(),
                            record.events.end() - static_cast<std::ptrdiff_t>(kMaxRecordLength));
        if (stats) ++stats->truncated;
    }
    return true;
}

namespace {

class ZipfTable {
public:
    ZipfTable(std::vector<std::int32_t> items, double exponent) : items_(std::move(items)) {
        double acc = 0;
        for (std::size_t r = 0; r < items_.size(); ++r) {
            acc += 1.0 / std::pow(static_cast<double>(r + 1), exponent);
            cum_.push_back(acc);
        }
    }
    std::int32_t draw(Rng& rng) const {
        const double u = rng.uniform() * cum_.back();
        auto it = std::upper_bound(cum_.begin(), cum_.end(), u);
        return items_[std::min<std::size_t>(static_cast<std::size_t>(it - cum_.begin()), items_.size() - 1)];
    }

private:
    std::vector<std::int32_t> items_;
    std::vector<double> cum_;
};

}  // namespace

Cohort generate_cohort(const CohortSpec& spec, GenerationStats* stats) {
    spec.validate();
    const auto clusters = resolve_clusters(spec);
    GenerationStats local;
    GenerationStats& st = stats ? *stats : local;
    st = GenerationStats{};
    st.cluster_active_case.assign(clusters.size(), 0);
    st.cluster_active_control.assign(clusters.size(), 0);

    std::vector<std::int32_t> background(spec.vocab_size);
    for (std::size_t i = 0; i < background.size(); ++i) background[i] = static_cast<std::int32_t>(i);
    Rng bg_rng(derive_seed(spec.seed, "background"));
    bg_rng.shuffle(background);
    const ZipfTable background_table(background, spec.background_zipf);
    std::vector<ZipfTable> cluster_tables;
    for (const auto& c : clusters) cluster_tables.emplace_back(c.codes, spec.cluster_zipf);
    std::vector<bool> is_case_cluster(clusters.size(), false);
    for (auto c : spec.case_clusters) is_case_cluster[c] = true;

    Cohort cohort;
    cohort.name = spec.name;
    cohort.vocab = Vocabulary(spec.vocab_size,
                              static_cast<std::size_t>(std::llround(spec.diagnosis_fraction * spec.vocab_size)));
    cohort.spec_hash = spec.hash();

    const std::size_t total = spec.case_count + spec.control_count;
    for (std::size_t pid = 0; pid < total; ++pid) {
        Rng rng(derive_seed(spec.seed, "patient", pid));
        PatientRecord rec;
        rec.id = pid;
        rec.label = pid < spec.case_count ? Label::Case : Label::Control;

        std::vector<std::size_t> active;
        for (std::size_t c = 0; c < clusters.size(); ++c) {
            const double p = (rec.label == Label::Case && is_case_cluster[c]) ? spec.case_draw_prob : clusters[c].draw_prob;
            if (rng.bernoulli(p)) {
                active.push_back(c);
                ++(rec.label == Label::Case ? st.cluster_active_case[c] : st.cluster_active_control[c]);
            }
        }

        const auto target = static_cast<std::size_t>(
            std::max(0.0, std::round(std::exp(rng.normal(spec.length_log_mean, spec.length_log_sd)))));
        std::poisson_distribution<int> extra(spec.events_per_window - 1);
        std::uint32_t window = 0;
        std::size_t stalls = 0;
        while (rec.events.size() < target && stalls < 1000) {
            const std::size_t in_window = 1 + static_cast<std::size_t>(extra(rng.engine()));
            std::unordered_set<std::int32_t> seen;
            for (std::size_t e = 0; e < in_window && rec.events.size() < target; ++e) {
                std::int32_t code;
                if (active.empty() || rng.bernoulli(spec.noise)) code = background_table.draw(rng);
                else code = cluster_tables[active[rng.index(active.size())]].draw(rng);
                // observations of one code inside a window are merged
                if (seen.insert(code).second) rec.events.push_back({window, code});
                else ++stalls;
            }
            window += 1 + (rng.bernoulli(0.3) ? static_cast<std::uint32_t>(rng.index(3)) : 0u);
        }
        ++st.generated;
        if (!clamp_and_order(rec, &st)) continue;
        ++(rec.label == Label::Case ? st.case_count : st.control_count);
        cohort.records.push_back(std::move(rec));
    }
    assign_splits(cohort, derive_seed(spec.seed, "split"));
    return cohort;
}

void assign_splits(Cohort& cohort, std::uint64_t seed) {
    const std::size_t n = cohort.records.size();
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    Rng rng(seed);
    rng.shuffle(order);
    const auto n_train = static_cast<std::size_t>(std::llround(0.7 * static_cast<double>(n)));
    const auto n_val = std::min(n - n_train, static_cast<std::size_t>(std::llround(0.1 * static_cast<double>(n))));
    cohort.splits.assign(n, Split::Test);
    for (std::size_t k = 0; k < n; ++k)
        cohort.splits[order[k]] = k < n_train ? Split::Train : (k < n_train + n_val ? Split::Val : Split::Test);
}

// ---------------------------------------------------------------------------
// Corpus text format
// ---------------------------------------------------------------------------

std::string format_corpus(const Cohort& cohort) {
    std::string out = "#ehrgan-corpus\tversion=1\tname=" + cohort.name + "\tV=" + std::to_string(cohort.vocab.size()) +
                      "\tdiagnosis=" + std::to_string(cohort.vocab.diagnosis_count()) + "\tspec_hash=" +
                      (cohort.spec_hash.empty() ? "-" : cohort.spec_hash) + "\n";
    for (std::size_t i = 0; i < cohort.records.size(); ++i) {
        const auto& r = cohort.records[i];
        out += std::to_string(r.id);
        out += '\t';
        out += to_string(r.label);
        out += '\t';
        for (std::size_t e = 0; e < r.events.size(); ++e) {
            if (e) out += ',';
            out += std::to_string(r.events[e].window);
            out += ':';
            out += std::to_string(r.events[e].code);
        }
        out += '\t';
        out += to_string(i < cohort.splits.size() ? cohort.splits[i] : Split::Unassigned);
        out += '\n';
    }
    return out;
}

namespace {

std::vector<std::string> split_on(const std::string& s, char sep) {
    std::vector<std::string> parts;
    std::size_t start = 0;
    while (true) {
        auto pos = s.find(sep, start);
        parts.push_back(s.substr(start, pos == std::string::npos ? std::string::npos : pos - start));
        if (pos == std::string::npos) break;
        start = pos + 1;
    }
    return parts;
}

template <typename T>
T parse_number(const std::string& s, std::size_t line, const char* what) {
    T v{};
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size() || s.empty())
        throw ParseError(std::string("invalid ") + what + " '" + s + "'", line);
    return v;
}

}  // namespace

Cohort parse_corpus(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    std::size_t line_no = 0;
    if (!std::getline(in, line)) throw ParseError("empty corpus file: missing header", 1);
    ++line_no;
    auto header = split_on(line, '\t');
    if (header.empty() || header[0] != "#ehrgan-corpus") throw ParseError("missing #ehrgan-corpus header", 1);
    Cohort c;
    std::size_t V = 0, diag = 0;
    bool have_v = false;
    for (std::size_t i = 1; i < header.size(); ++i) {
        auto eq = header[i].find('=');
        if (eq == std::string::npos) throw ParseError("malformed header field '" + header[i] + "'", 1);
        auto key = header[i].substr(0, eq), val = header[i].substr(eq + 1);
        if (key == "version") {
            if (val != "1") throw VersionMismatch("corpus format version " + val + " is not supported");
        } else if (key == "name") c.name = val;
        else if (key == "V") {
            V = parse_number<std::size_t>(val, 1, "vocabulary size");
            have_v = true;
        } else if (key == "diagnosis") diag = parse_number<std::size_t>(val, 1, "diagnosis count");
        else if (key == "spec_hash") c.spec_hash = val == "-" ? "" : val;
        else throw ParseError("unknown header field '" + key + "'", 1);
    }
    if (!have_v) throw ParseError("header lacks V", 1);
    if (diag > V) throw ParseError("diagnosis count exceeds V", 1);
    c.vocab = Vocabulary(V, diag);

    std::set<std::uint64_t> ids;
    bool terminated = text.empty() || text.back() == '\n';
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) throw ParseError("empty record line", line_no);
        auto cols = split_on(line, '\t');
        if (cols.size() != 3 && cols.size() != 4)
            throw ParseError("expected 3 or 4 tab-separated fields, found " + std::to_string(cols.size()), line_no);
        PatientRecord r;
        r.id = parse_number<std::uint64_t>(cols[0], line_no, "patient id");
        try {
            r.label = parse_label(cols[1]);
        } catch (const ParseError& e) {
            throw ParseError(e.what(), line_no);
        }
        if (cols[2].empty()) throw ParseError("record has no events", line_no);
        std::uint32_t last_window = 0;
        for (const auto& tok : split_on(cols[2], ',')) {
            auto colon = tok.find(':');
            if (colon == std::string::npos) throw ParseError("event '" + tok + "' is not window:code", line_no);
            Event e;
            e.window = parse_number<std::uint32_t>(tok.substr(0, colon), line_no, "window index");
            e.code = parse_number<std::int32_t>(tok.substr(colon + 1), line_no, "code");
            if (!c.vocab.contains(e.code))
                throw ParseError("code " + std::to_string(e.code) + " outside vocabulary of size " + std::to_string(V),
                                 line_no);
            if (!r.events.empty() && e.window < last_window)
                throw ParseError("window indices must be non-decreasing", line_no);
            last_window = e.window;
            r.events.push_back(e);
        }
        Split s = Split::Unassigned;
        if (cols.size() == 4) {
            try {
                s = parse_split(cols[3]);
            } catch (const ParseError& e) {
                throw ParseError(e.what(), line_no);
            }
        }
        if (!ids.insert(r.id).second) throw ParseError("duplicate patient id " + std::to_string(r.id), line_no);
        c.records.push_back(std::move(r));
        c.splits.push_back(s);
    }
    if (!terminated) throw ParseError("file is truncated (last record has no newline)", line_no);
    return c;
}

void save_corpus(const std::string& path, const Cohort& cohort) { write_file(path, format_corpus(cohort)); }

Cohort load_corpus(const std::string& path) { return parse_corpus(read_file(path)); }

}  // namespace ehrgan
