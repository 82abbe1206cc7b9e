#include <algorithm>
#include <map>
#include <set>

#include "doctest.h"
#include "ehrgan/cohort.hpp"
#include "ehrgan/error.hpp"

using namespace ehrgan;

namespace {

CohortSpec small_spec(std::uint64_t seed = 7) {
    CohortSpec s;
    s.vocab_size = 300;
    s.cluster_count = 6;
    s.cluster_size = 8;
    s.case_count = 100;
    s.control_count = 200;
    s.seed = seed;
    return s;
}

PatientRecord record_of_length(std::size_t n) {
    PatientRecord r;
    for (std::size_t i = 0; i < n; ++i)
        r.events.push_back({static_cast<std::uint32_t>(n - i), static_cast<std::int32_t>(i % 10)});
    return r;
}

}  // namespace

TEST_CASE("single always-active cluster without noise emits only its codes") {
    CohortSpec s;
    s.vocab_size = 100;
    s.clusters = {ClusterSpec{{3, 5, 7, 11, 13, 17, 19, 23, 29, 31}, 1.0}};
    s.case_clusters = {};
    s.noise = 0.0;
    s.case_count = 5;
    s.control_count = 10;
    s.events_per_window = 3;
    const auto c = generate_cohort(s);
    REQUIRE(!c.records.empty());
    const std::set<std::int32_t> allowed{3, 5, 7, 11, 13, 17, 19, 23, 29, 31};
    for (const auto& r : c.records) {
        CHECK(r.length() >= kMinRecordLength);
        CHECK(r.length() <= kMaxRecordLength);
        for (const auto& e : r.events) CHECK(allowed.count(e.code) == 1);
    }
}

TEST_CASE("generation is deterministic per seed") {
    const auto a = format_corpus(generate_cohort(small_spec(3)));
    const auto b = format_corpus(generate_cohort(small_spec(3)));
    const auto c = format_corpus(generate_cohort(small_spec(4)));
    CHECK(a == b);
    CHECK(a != c);
}

TEST_CASE("case fraction, length bounds and split proportions") {
    GenerationStats st;
    const auto c = generate_cohort(small_spec(), &st);
    const double frac = static_cast<double>(c.count(Label::Case)) / static_cast<double>(c.records.size());
    CHECK(std::abs(frac - 1.0 / 3.0) < 0.02);
    CHECK(st.generated == 300);
    CHECK(st.case_count + st.control_count == c.records.size());
    for (const auto& r : c.records) {
        CHECK(r.length() >= kMinRecordLength);
        CHECK(r.length() <= kMaxRecordLength);
        CHECK(std::is_sorted(r.events.begin(), r.events.end(),
                             [](const Event& x, const Event& y) { return x.window < y.window; }));
    }
    const double n = static_cast<double>(c.records.size());
    CHECK(std::abs(static_cast<double>(c.in_split(Split::Train).size()) - 0.7 * n) <= 1.0);
    CHECK(std::abs(static_cast<double>(c.in_split(Split::Val).size()) - 0.1 * n) <= 1.0);
    CHECK(std::abs(static_cast<double>(c.in_split(Split::Test).size()) - 0.2 * n) <= 1.0);
    CHECK_FALSE(st.to_text().empty());
}

TEST_CASE("within-cluster co-occurrence exceeds cross-cluster co-occurrence") {
    CohortSpec spec;
    spec.case_count = 200;
    spec.control_count = 400;
    spec.seed = 11;
    const auto c = generate_cohort(spec);
    const auto clusters = resolve_clusters(spec);
    std::map<std::int32_t, std::size_t> cluster_of;
    for (std::size_t k = 0; k < clusters.size(); ++k)
        for (auto code : clusters[k].codes) cluster_of[code] = k;

    double within = 0, cross = 0;
    std::size_t within_pairs = 0, cross_pairs = 0;
    std::vector<std::int32_t> codes;
    for (const auto& [code, _] : cluster_of) codes.push_back(code);
    std::vector<std::set<std::int32_t>> present;
    for (const auto& r : c.records) {
        auto v = r.codes();
        present.emplace_back(v.begin(), v.end());
    }
    for (std::size_t i = 0; i < codes.size(); ++i)
        for (std::size_t j = i + 1; j < codes.size(); ++j) {
            std::size_t both = 0;
            for (const auto& p : present) both += p.count(codes[i]) && p.count(codes[j]);
            if (cluster_of[codes[i]] == cluster_of[codes[j]]) {
                within += static_cast<double>(both);
                ++within_pairs;
            } else {
                cross += static_cast<double>(both);
                ++cross_pairs;
            }
        }
    CHECK(within / static_cast<double>(within_pairs) >= 3.0 * cross / static_cast<double>(cross_pairs));
}

TEST_CASE("case clusters are activated more often in cases") {
    GenerationStats st;
    const auto c = generate_cohort(small_spec(5), &st);
    for (auto k : small_spec().case_clusters) {
        const double pc = static_cast<double>(st.cluster_active_case[k]) / 100.0;
        const double pn = static_cast<double>(st.cluster_active_control[k]) / 200.0;
        CHECK(pc > pn);
    }
}

TEST_CASE("clamp_and_order keeps the most recent events") {
    auto r = record_of_length(300);
    GenerationStats st;
    CHECK(clamp_and_order(r, &st));
    CHECK(r.length() == 250);
    CHECK(r.events.back().window == 300);
    CHECK(r.events.front().window == 51);
    CHECK(st.truncated == 1);

    auto exact = record_of_length(250);
    CHECK(clamp_and_order(exact, &st));
    CHECK(exact.length() == 250);
    CHECK(st.truncated == 1);

    auto short_rec = record_of_length(49);
    CHECK_FALSE(clamp_and_order(short_rec, &st));
    CHECK(st.dropped_short == 1);

    auto min_rec = record_of_length(50);
    CHECK(clamp_and_order(min_rec, &st));
}

TEST_CASE("corpus text round trip is identical") {
    const auto c = generate_cohort(small_spec());
    const auto text = format_corpus(c);
    const auto back = parse_corpus(text);
    CHECK(back.records == c.records);
    CHECK(back.splits == c.splits);
    CHECK(back.vocab == c.vocab);
    CHECK(back.spec_hash == c.spec_hash);
    CHECK(format_corpus(back) == text);
}

TEST_CASE("corpus parse errors carry line numbers") {
    const auto text = format_corpus(generate_cohort(small_spec()));
    SUBCASE("truncated file") {
        const auto cut = text.substr(0, text.size() - 5);
        try {
            parse_corpus(cut);
            FAIL("expected ParseError");
        } catch (const ParseError& e) {
            CHECK(e.line() > 1);
        }
    }
    SUBCASE("unknown code") {
        std::string bad = "#ehrgan-corpus\tversion=1\tname=x\tV=10\tdiagnosis=5\tspec_hash=0\n1\tcase\t0:3,1:12\ttrain\n";
        try {
            parse_corpus(bad);
            FAIL("expected ParseError");
        } catch (const ParseError& e) {
            CHECK(e.line() == 2);
        }
    }
    SUBCASE("decreasing windows and duplicate ids") {
        CHECK_THROWS_AS(parse_corpus("#ehrgan-corpus\tversion=1\tV=10\n1\tcase\t2:3,1:4\n"), ParseError);
        CHECK_THROWS_AS(parse_corpus("#ehrgan-corpus\tversion=1\tV=10\n1\tcase\t1:3\n1\tcontrol\t1:4\n"), ParseError);
    }
    SUBCASE("version and header") {
        CHECK_THROWS_AS(parse_corpus("#ehrgan-corpus\tversion=9\tV=10\n"), VersionMismatch);
        CHECK_THROWS_AS(parse_corpus("id\tlabel\n"), ParseError);
    }
}

TEST_CASE("spec validation rejects impossible settings") {
    auto s = small_spec();
    s.case_count = 500;
    CHECK_THROWS_AS(s.validate(), InvalidArgument);
    s = small_spec();
    s.length_log_mean = 10;
    CHECK_THROWS_AS(s.validate(), InvalidArgument);
    s = small_spec();
    s.cluster_count = 100;
    CHECK_THROWS_AS(s.validate(), InvalidArgument);
    s = small_spec();
    s.case_clusters = {50};
    CHECK_THROWS_AS(s.validate(), InvalidArgument);
}
