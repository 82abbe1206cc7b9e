#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace ehrgan {

enum class CodeKind : std::uint8_t { Diagnosis, Medication };
enum class Label : std::uint8_t { Control = 0, Case = 1 };
enum class Split : std::uint8_t { Train, Val, Test, Unassigned };

const char* to_string(Label l);
const char* to_string(Split s);
Label parse_label(const std::string& s);
Split parse_split(const std::string& s);

struct EventCode {
    std::int32_t id = 0;
    CodeKind kind = CodeKind::Diagnosis;
    std::string display;
};

/// Dense code ids [0, size): the first `diagnosis_count` are diagnoses, the rest medications.
class Vocabulary {
public:
    Vocabulary() = default;
    Vocabulary(std::size_t size, std::size_t diagnosis_count);

    std::size_t size() const { return size_; }
    std::size_t diagnosis_count() const { return diagnosis_count_; }
    bool contains(std::int64_t id) const { return id >= 0 && static_cast<std::size_t>(id) < size_; }
    CodeKind kind(std::int32_t id) const;
    EventCode code(std::int32_t id) const;

    friend bool operator==(const Vocabulary&, const Vocabulary&) = default;

private:
    std::size_t size_ = 0;
    std::size_t diagnosis_count_ = 0;
};

struct Event {
    std::uint32_t window = 0;  // 90-day bucket index
    std::int32_t code = 0;
    friend bool operator==(const Event&, const Event&) = default;
};

struct PatientRecord {
    std::uint64_t id = 0;
    Label label = Label::Control;
    std::vector<Event> events;

    std::size_t length() const { return events.size(); }
    std::vector<std::int32_t> codes() const;
    friend bool operator==(const PatientRecord&, const PatientRecord&) = default;
};

inline constexpr std::size_t kMinRecordLength = 50;
inline constexpr std::size_t kMaxRecordLength = 250;

struct Cohort {
    std::string name;
    Vocabulary vocab;
    std::vector<PatientRecord> records;
    std::vector<Split> splits;  // parallel to records
    std::string spec_hash;

    std::vector<const PatientRecord*> in_split(Split s) const;
    std::vector<const PatientRecord*> all() const;
    std::size_t count(Label l) const;
};

struct ClusterSpec {
    std::vector<std::int32_t> codes;
    /// Probability that the cluster is active for a patient; all of its codes
    /// are then co-drawn into that patient's record.
    double draw_prob = 0.2;
};

struct CohortSpec {
    std::string name = "synthetic";
    std::size_t vocab_size = 2000;
    double diagnosis_fraction = 0.6;

    /// Explicit clusters. When empty, `cluster_count` clusters of
    /// `cluster_size` disjoint codes are drawn from the seed with draw
    /// probabilities uniform in [cluster_prob_min, cluster_prob_max].
    std::vector<ClusterSpec> clusters;
    std::size_t cluster_count = 16;
    std::size_t cluster_size = 12;
    double cluster_prob_min = 0.1;
    double cluster_prob_max = 0.3;

    /// Clusters whose activation probability is raised to `case_draw_prob` for cases.
    std::vector<std::size_t> case_clusters = {0, 1, 2};
    double case_draw_prob = 0.65;

    std::size_t case_count = 1000;
    std::size_t control_count = 2000;

    /// Event count per record ~ round(exp(N(log_mean, log_sd))).
    double length_log_mean = 4.55;  // median ~95 events
    double length_log_sd = 0.35;
    double events_per_window = 2.5;

    /// Fraction of events drawn from the Zipf background rather than active clusters.
    double noise = 0.3;
    double background_zipf = 1.0;
    double cluster_zipf = 1.0;

    std::uint64_t seed = 42;

    void validate() const;
    /// Canonical key=value text; its hash identifies generated corpora.
    std::string canonical() const;
    std::string hash() const;
};

/// Diagnostics recorded while generating or clamping a cohort.
struct GenerationStats {
    std::size_t generated = 0;
    std::size_t dropped_short = 0;
    std::size_t truncated = 0;
    std::size_t case_count = 0;
    std::size_t control_count = 0;
    std::vector<std::size_t> cluster_active_case;
    std::vector<std::size_t> cluster_active_control;

    std::string to_text() const;
};

/// Resolve (possibly implicit) cluster definitions for a validated spec.
std::vector<ClusterSpec> resolve_clusters(const CohortSpec& spec);

/// Sort by window, keep the most recent kMaxRecordLength events; records
/// under kMinRecordLength events are dropped (returns false).
bool clamp_and_order(PatientRecord& record, GenerationStats* stats = nullptr);

Cohort generate_cohort(const CohortSpec& spec, GenerationStats* stats = nullptr);

/// Assign a 7:1:2 train/val/test split by patient using `seed`.
void assign_splits(Cohort& cohort, std::uint64_t seed);

// Line-delimited corpus files.
std::string format_corpus(const Cohort& cohort);
Cohort parse_corpus(const std::string& text);
void save_corpus(const std::string& path, const Cohort& cohort);
Cohort load_corpus(const std::string& path);

}  // namespace ehrgan
