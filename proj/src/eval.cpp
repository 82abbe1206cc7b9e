#include "ehrgan/eval.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include "ehrgan/error.hpp"
#include "json.hpp"

namespace ehrgan {

namespace {

void check_binary(std::span<const double> scores, std::span<const int> labels, std::size_t& pos, std::size_t& neg) {
    if (scores.size() != labels.size())
        throw ShapeError("score and label counts differ: " + std::to_string(scores.size()) + " vs " +
                         std::to_string(labels.size()));
    pos = neg = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        if (labels[i] != 0 && labels[i] != 1) throw InvalidArgument("labels must be 0 or 1");
        if (!std::isfinite(scores[i])) throw NonFiniteError("score " + std::to_string(i) + " is not finite");
        (labels[i] ? pos : neg)++;
    }
    if (pos == 0 || neg == 0) throw InvalidArgument("AUROC needs both classes present");
}

std::vector<double> mid_ranks(std::span<const double> v) {
    std::vector<std::size_t> order(v.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> ranks(v.size());
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
        const double r = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
        i = j + 1;
    }
    return ranks;
}

}  // namespace

double auroc(std::span<const double> scores, std::span<const int> labels) {
    std::size_t pos, neg;
    check_binary(scores, labels, pos, neg);
    const auto ranks = mid_ranks(scores);
    double rank_sum = 0;
    for (std::size_t i = 0; i < ranks.size(); ++i)
        if (labels[i]) rank_sum += ranks[i];
    const double u = rank_sum - static_cast<double>(pos) * static_cast<double>(pos + 1) / 2;
    return u / (static_cast<double>(pos) * static_cast<double>(neg));
}

RocCurve roc_curve(std::span<const double> scores, std::span<const int> labels) {
    std::size_t pos, neg;
    check_binary(scores, labels, pos, neg);
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    RocCurve c;
    c.points.push_back({std::numeric_limits<double>::infinity(), 0, 0});
    std::size_t tp = 0, fp = 0;
    double area2 = 0;  // twice the area in units of (1/neg)*(1/pos)
    for (std::size_t i = 0; i < order.size();) {
        const double thr = scores[order[i]];
        const std::size_t tp0 = tp, fp0 = fp;
        for (; i < order.size() && scores[order[i]] == thr; ++i) (labels[order[i]] ? tp : fp)++;
        area2 += static_cast<double>(fp - fp0) * static_cast<double>(tp + tp0);
        c.points.push_back({thr, static_cast<double>(fp) / static_cast<double>(neg),
                            static_cast<double>(tp) / static_cast<double>(pos)});
    }
    c.auroc = area2 / (2.0 * static_cast<double>(pos) * static_cast<double>(neg));
    return c;
}

double accuracy(std::span<const double> scores, std::span<const int> labels, double threshold) {
    if (scores.size() != labels.size()) throw ShapeError("score and label counts differ");
    if (scores.empty()) throw InvalidArgument("accuracy of an empty prediction set");
    std::size_t correct = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) correct += (scores[i] > threshold ? 1 : 0) == labels[i];
    return static_cast<double>(correct) / static_cast<double>(scores.size());
}

double pearson(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw ShapeError("correlation of vectors with different lengths");
    if (a.empty()) throw InvalidArgument("correlation of empty vectors");
    const double n = static_cast<double>(a.size());
    const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n, mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
    double sab = 0, saa = 0, sbb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
    }
    // a constant vector carries no ordering: identical vectors still count as perfectly correlated
    if (saa == 0 || sbb == 0) return std::equal(a.begin(), a.end(), b.begin()) ? 1.0 : 0.0;
    return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

double spearman(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw ShapeError("correlation of vectors with different lengths");
    const auto ra = mid_ranks(a), rb = mid_ranks(b);
    return pearson(ra, rb);
}

double median(std::vector<double> v) {
    if (v.empty()) throw InvalidArgument("median of an empty set");
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::vector<double> length_histogram(const std::vector<const PatientRecord*>& records) {
    if (records.empty()) throw InvalidArgument("length histogram of an empty corpus");
    std::vector<double> h(22, 0.0);
    for (const auto* r : records) {
        const std::size_t n = r->length();
        std::size_t bin;
        if (n < kMinRecordLength) bin = 0;
        else if (n > kMaxRecordLength) bin = 21;
        else bin = 1 + std::min<std::size_t>((n - kMinRecordLength) / 10, 19);
        h[bin] += 1;
    }
    for (auto& v : h) v /= static_cast<double>(records.size());
    return h;
}

double total_variation(std::span<const double> p, std::span<const double> q) {
    if (p.size() != q.size()) throw ShapeError("distributions over different supports");
    double s = 0;
    for (std::size_t i = 0; i < p.size(); ++i) s += std::abs(p[i] - q[i]);
    return std::min(1.0, 0.5 * s);
}

namespace {

std::vector<double> code_frequencies(const std::vector<const PatientRecord*>& records, std::size_t V) {
    std::vector<double> f(V, 0.0);
    double total = 0;
    for (const auto* r : records)
        for (const auto& e : r->events) {
            f[static_cast<std::size_t>(e.code)] += 1;
            total += 1;
        }
    if (total > 0)
        for (auto& v : f) v /= total;
    return f;
}

// Codes ranked by descending frequency, ties by id.
std::vector<std::int32_t> rank_codes(const std::vector<double>& freq, const Vocabulary& vocab, bool diagnosis_only,
                                     std::size_t k) {
    std::vector<std::int32_t> ids;
    for (std::size_t i = 0; i < freq.size(); ++i)
        if (!diagnosis_only || vocab.kind(static_cast<std::int32_t>(i)) == CodeKind::Diagnosis)
            ids.push_back(static_cast<std::int32_t>(i));
    std::stable_sort(ids.begin(), ids.end(), [&](std::int32_t a, std::int32_t b) { return freq[a] > freq[b]; });
    ids.resize(std::min(k, ids.size()));
    return ids;
}

std::vector<double> co_presence(const std::vector<const PatientRecord*>& records, const std::vector<std::int32_t>& codes) {
    const std::size_t k = codes.size();
    std::unordered_map<std::int32_t, std::size_t> slot;
    for (std::size_t i = 0; i < k; ++i) slot[codes[i]] = i;
    std::vector<double> m(k * k, 0.0);
    std::vector<std::size_t> present;
    for (const auto* r : records) {
        std::vector<bool> seen(k, false);
        present.clear();
        for (const auto& e : r->events) {
            auto it = slot.find(e.code);
            if (it != slot.end() && !seen[it->second]) {
                seen[it->second] = true;
                present.push_back(it->second);
            }
        }
        for (auto i : present)
            for (auto j : present) m[i * k + j] += 1;
    }
    return m;
}

std::vector<double> upper_pairs(const std::vector<double>& m, std::size_t k) {
    std::vector<double> out;
    for (std::size_t i = 0; i < k; ++i)
        for (std::size_t j = i + 1; j < k; ++j) out.push_back(m[i * k + j]);
    return out;
}

}  // namespace

FidelityReport fidelity(const std::vector<const PatientRecord*>& original,
                        const std::vector<const PatientRecord*>& generated, const Vocabulary& vocab,
                        const FidelityOptions& opt) {
    if (original.empty() || generated.empty()) throw InvalidArgument("fidelity needs two non-empty corpora");
    for (const auto* set : {&original, &generated})
        for (const auto* r : *set)
            for (const auto& e : r->events)
                if (!vocab.contains(e.code)) throw InvalidArgument("code " + std::to_string(e.code) + " outside the shared vocabulary");

    FidelityReport rep;
    rep.lengths.edges.push_back(0);
    for (std::size_t e = kMinRecordLength; e <= kMaxRecordLength; e += 10) rep.lengths.edges.push_back(static_cast<double>(e));
    rep.lengths.edges.push_back(std::numeric_limits<double>::infinity());
    rep.lengths.original = length_histogram(original);
    rep.lengths.generated = length_histogram(generated);
    rep.lengths.tv_distance = total_variation(rep.lengths.original, rep.lengths.generated);

    const auto fo = code_frequencies(original, vocab.size()), fg = code_frequencies(generated, vocab.size());
    rep.freq_codes = rank_codes(fo, vocab, false, opt.top_k_freq);
    for (auto c : rep.freq_codes) {
        rep.freq_original.push_back(fo[static_cast<std::size_t>(c)]);
        rep.freq_generated.push_back(fg[static_cast<std::size_t>(c)]);
    }
    rep.freq_spearman = rep.freq_codes.empty() ? 0.0 : spearman(rep.freq_original, rep.freq_generated);

    rep.cooc_codes = rank_codes(fo, vocab, opt.cooc_diagnosis_only, opt.top_k_cooc);
    const std::size_t k = rep.cooc_codes.size();
    rep.cooc_original_raw = co_presence(original, rep.cooc_codes);
    rep.cooc_generated_raw = co_presence(generated, rep.cooc_codes);
    rep.cooc_original = rep.cooc_original_raw;
    rep.cooc_generated = rep.cooc_generated_raw;
    for (auto& v : rep.cooc_original) v /= static_cast<double>(original.size());
    for (auto& v : rep.cooc_generated) v /= static_cast<double>(generated.size());
    rep.cooc_correlation = k < 2 ? 0.0 : pearson(upper_pairs(rep.cooc_original, k), upper_pairs(rep.cooc_generated, k));
    return rep;
}

FidelityReport fidelity(const Cohort& original, const Cohort& generated, const FidelityOptions& opt) {
    if (!(original.vocab == generated.vocab)) throw InvalidArgument("fidelity needs corpora over the same vocabulary");
    return fidelity(original.all(), generated.all(), original.vocab, opt);
}

std::string FidelityReport::to_text() const {
    std::ostringstream os;
    os << std::setprecision(6);
    os << "length_tv\t" << lengths.tv_distance << "\n";
    os << "freq_spearman\t" << freq_spearman << "\n";
    os << "cooc_correlation\t" << cooc_correlation << "\n";
    os << "length_histogram\tlo\thi\toriginal\tgenerated\n";
    for (std::size_t i = 0; i < lengths.original.size(); ++i)
        os << "bin\t" << lengths.edges[i] << "\t" << lengths.edges[i + 1] << "\t" << lengths.original[i] << "\t"
           << lengths.generated[i] << "\n";
    os << "frequency\trank\tcode\toriginal\tgenerated\n";
    for (std::size_t i = 0; i < freq_codes.size(); ++i)
        os << "freq\t" << i + 1 << "\t" << freq_codes[i] << "\t" << freq_original[i] << "\t" << freq_generated[i] << "\n";
    const std::size_t k = cooc_codes.size();
    for (const auto* m : {&cooc_original, &cooc_generated}) {
        os << (m == &cooc_original ? "cooc_original" : "cooc_generated") << "\n";
        for (std::size_t i = 0; i < k; ++i) {
            for (std::size_t j = 0; j < k; ++j) os << (j ? " " : "") << (*m)[i * k + j];
            os << "\n";
        }
    }
    return os.str();
}

std::vector<ComparisonRow> compare_runs(const std::vector<RunResult>& runs) {
    std::vector<std::string> groups;
    std::map<std::string, std::map<std::string, std::vector<double>>> values;
    for (const auto& r : runs) {
        if (!values.count(r.group)) groups.push_back(r.group);
        auto& g = values[r.group];
        for (const auto& [metric, v] : r.metrics) g[metric].push_back(v);
    }
    std::vector<ComparisonRow> rows;
    for (const auto& g : groups)
        for (const auto& [metric, vs] : values[g]) {
            ComparisonRow row;
            row.group = g;
            row.metric = metric;
            row.runs = vs.size();
            row.median = median(vs);
            row.min = *std::min_element(vs.begin(), vs.end());
            row.max = *std::max_element(vs.begin(), vs.end());
            rows.push_back(row);
        }
    return rows;
}

std::string format_table(const std::vector<ComparisonRow>& rows) {
    std::size_t wg = 5, wm = 6;
    for (const auto& r : rows) {
        wg = std::max(wg, r.group.size());
        wm = std::max(wm, r.metric.size());
    }
    std::ostringstream os;
    os << std::left << std::setw(static_cast<int>(wg)) << "group" << "  " << std::setw(static_cast<int>(wm)) << "metric"
       << std::right << "  runs    median       min       max    spread\n";
    os << std::fixed << std::setprecision(4);
    for (const auto& r : rows)
        os << std::left << std::setw(static_cast<int>(wg)) << r.group << "  " << std::setw(static_cast<int>(wm)) << r.metric
           << std::right << "  " << std::setw(4) << r.runs << std::setw(10) << r.median << std::setw(10) << r.min
           << std::setw(10) << r.max << std::setw(10) << r.spread() << "\n";
    return os.str();
}

std::string format_jsonl(const std::vector<ComparisonRow>& rows) {
    std::string out;
    for (const auto& r : rows) {
        nlohmann::ordered_json j;
        j["group"] = r.group;
        j["metric"] = r.metric;
        j["runs"] = r.runs;
        j["median"] = r.median;
        j["min"] = r.min;
        j["max"] = r.max;
        j["spread"] = r.spread();
        out += j.dump() + "\n";
    }
    return out;
}

}  // namespace ehrgan
