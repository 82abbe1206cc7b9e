#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "ehrgan/cohort.hpp"
#include "ehrgan/embedding.hpp"
#include "ehrgan/gan.hpp"
#include "ehrgan/optim.hpp"
#include "ehrgan/predictor.hpp"

namespace ehrgan {

static_assert(std::is_same_v<std::size_t, std::uint64_t>, "seeds and counts share one integer field type");

/// Named fields of config structs exposed as flat `key = value` text.
class Fields {
public:
    void add(const std::string& key, double& v);
    void add(const std::string& key, std::size_t& v);
    void add(const std::string& key, bool& v);
    void add(const std::string& key, std::string& v);
    void add(const std::string& key, std::vector<std::size_t>& v);
    void add(const std::string& key, std::vector<double>& v);
    void add(const std::string& key, std::function<std::string()> get, std::function<void(const std::string&)> set);

    bool has(const std::string& key) const { return index_.count(key) != 0; }
    /// Throws InvalidArgument on unknown keys or unparsable values.
    void set(const std::string& key, const std::string& value);
    std::string get(const std::string& key) const;
    /// key/value pairs in registration order.
    std::vector<std::pair<std::string, std::string>> dump() const;

private:
    struct Field {
        std::string key;
        std::function<std::string()> get;
        std::function<void(const std::string&)> set;
    };
    std::vector<Field> fields_;
    std::map<std::string, std::size_t> index_;
};

std::string format_real(double v);

void bind_fields(Fields& f, const std::string& prefix, OptimConfig& c);
void bind_fields(Fields& f, const std::string& prefix, TrunkConfig& c);
void bind_fields(Fields& f, const std::string& prefix, CohortSpec& c);
void bind_fields(Fields& f, const std::string& prefix, EmbeddingConfig& c);
void bind_fields(Fields& f, const std::string& prefix, GanConfig& c);
void bind_fields(Fields& f, const std::string& prefix, PredictorConfig& c);
void bind_fields(Fields& f, const std::string& prefix, SslConfig& c);

struct EvalConfig {
    double labeled_fraction = 0.5;
    std::size_t top_k_freq = 100;
    std::size_t top_k_cooc = 20;
    std::size_t samples_per_source = 1;
};

struct SweepConfig {
    std::vector<double> rho = {0, 0.001, 0.01, 0.1, 0.2, 1};
    std::vector<double> mu = {0.2, 0.4, 0.6, 0.8, 1.0, 1.2, 1.4};
    /// Held-off real records added in FULL mode, per labeled record.
    std::vector<double> full = {0, 0.25, 0.5, 1.0};
    std::size_t seeds = 5;
    /// Comma-separated grids to run: modes, rho, mu, full.
    std::string grids = "modes,rho,mu";
};

/// Everything one pipeline run depends on. Component seeds derive from `seed`.
struct RunConfig {
    std::uint64_t seed = 1;
    CohortSpec cohort;
    EmbeddingConfig embedding;
    GanConfig gan;
    PredictorConfig predictor;
    SslConfig ssl;
    EvalConfig eval;
    SweepConfig sweep;

    /// Re-derive each component seed from the root seed.
    void derive_seeds();
    void validate() const;
};

void bind_fields(Fields& f, RunConfig& c);

/// Parse `section.key = value` lines; `#` starts a comment. Unknown keys are errors.
RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::string& path);
/// Resolved configuration with every key, including defaults.
std::string format_run_config(const RunConfig& c);
std::string config_hash(const RunConfig& c);

/// Echo a struct's fields into checkpoint metadata and read them back.
template <class T>
std::map<std::string, std::string> config_entries(const T& c, const std::string& prefix) {
    T copy = c;
    Fields f;
    bind_fields(f, prefix, copy);
    std::map<std::string, std::string> out;
    for (auto& [k, v] : f.dump()) out[k] = v;
    return out;
}

template <class T>
T config_from_entries(const std::map<std::string, std::string>& entries, const std::string& prefix) {
    T c;
    Fields f;
    bind_fields(f, prefix, c);
    for (const auto& [k, v] : entries)
        if (k.rfind(prefix, 0) == 0 && f.has(k)) f.set(k, v);
    return c;
}

}  // namespace ehrgan
