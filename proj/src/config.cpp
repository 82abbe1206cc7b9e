#include "ehrgan/config.hpp"

#include <charconv>
#include <sstream>

#include "ehrgan/checkpoint.hpp"
#include "ehrgan/error.hpp"
#include "ehrgan/hash.hpp"
#include "ehrgan/rng.hpp"

namespace ehrgan {

std::string format_real(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

namespace {

std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

double parse_real(const std::string& key, const std::string& s) {
    double v = 0;
    const auto t = trim(s);
    const auto res = std::from_chars(t.data(), t.data() + t.size(), v);
    if (res.ec != std::errc() || res.ptr != t.data() + t.size() || t.empty())
        throw InvalidArgument(key + ": '" + s + "' is not a number");
    return v;
}

std::size_t parse_count(const std::string& key, const std::string& s) {
    std::size_t v = 0;
    const auto t = trim(s);
    const auto res = std::from_chars(t.data(), t.data() + t.size(), v);
    if (res.ec != std::errc() || res.ptr != t.data() + t.size() || t.empty())
        throw InvalidArgument(key + ": '" + s + "' is not a non-negative integer");
    return v;
}

bool parse_flag(const std::string& key, const std::string& s) {
    const auto t = trim(s);
    if (t == "true" || t == "1" || t == "yes") return true;
    if (t == "false" || t == "0" || t == "no") return false;
    throw InvalidArgument(key + ": '" + s + "' is not a boolean (true/false)");
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::string item;
    std::istringstream in(s);
    while (std::getline(in, item, ','))
        if (!trim(item).empty()) out.push_back(trim(item));
    return out;
}

template <class T, class F>
std::string join(const std::vector<T>& v, F fmt) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + fmt(v[i]);
    return s;
}

}  // namespace

void Fields::add(const std::string& key, double& v) {
    add(key, [&v] { return format_real(v); }, [&v, key](const std::string& s) { v = parse_real(key, s); });
}
void Fields::add(const std::string& key, std::size_t& v) {
    add(key, [&v] { return std::to_string(v); }, [&v, key](const std::string& s) { v = parse_count(key, s); });
}
void Fields::add(const std::string& key, bool& v) {
    add(key, [&v] { return std::string(v ? "true" : "false"); }, [&v, key](const std::string& s) { v = parse_flag(key, s); });
}
void Fields::add(const std::string& key, std::string& v) {
    add(key, [&v] { return v; }, [&v](const std::string& s) { v = trim(s); });
}
void Fields::add(const std::string& key, std::vector<std::size_t>& v) {
    add(
        key, [&v] { return join(v, [](std::size_t x) { return std::to_string(x); }); },
        [&v, key](const std::string& s) {
            v.clear();
            for (const auto& item : split_list(s)) v.push_back(parse_count(key, item));
        });
}
void Fields::add(const std::string& key, std::vector<double>& v) {
    add(
        key, [&v] { return join(v, [](double x) { return format_real(x); }); },
        [&v, key](const std::string& s) {
            v.clear();
            for (const auto& item : split_list(s)) v.push_back(parse_real(key, item));
        });
}
void Fields::add(const std::string& key, std::function<std::string()> get, std::function<void(const std::string&)> set) {
    if (index_.count(key)) throw Error("config key registered twice: " + key);
    index_[key] = fields_.size();
    fields_.push_back({key, std::move(get), std::move(set)});
}

void Fields::set(const std::string& key, const std::string& value) {
    auto it = index_.find(key);
    if (it == index_.end()) throw InvalidArgument("unknown config key '" + key + "'");
    fields_[it->second].set(value);
}

std::string Fields::get(const std::string& key) const {
    auto it = index_.find(key);
    if (it == index_.end()) throw InvalidArgument("unknown config key '" + key + "'");
    return fields_[it->second].get();
}

std::vector<std::pair<std::string, std::string>> Fields::dump() const {
    std::vector<std::pair<std::string, std::string>> out;
    for (const auto& f : fields_) out.emplace_back(f.key, f.get());
    return out;
}

void bind_fields(Fields& f, const std::string& p, OptimConfig& c) {
    f.add(p + "learning_rate", c.learning_rate);
    f.add(p + "beta1", c.beta1);
    f.add(p + "beta2", c.beta2);
    f.add(p + "epsilon", c.epsilon);
    f.add(p + "clip_norm", c.clip_norm);
    f.add(p + "l2_discriminator", c.l2_discriminator);
}

void bind_fields(Fields& f, const std::string& p, TrunkConfig& c) {
    f.add(p + "widths", c.widths);
    f.add(p + "maps", c.maps);
    f.add(p + "segments", c.segments);
}

void bind_fields(Fields& f, const std::string& p, CohortSpec& c) {
    f.add(p + "name", c.name);
    f.add(p + "vocab_size", c.vocab_size);
    f.add(p + "diagnosis_fraction", c.diagnosis_fraction);
    f.add(p + "cluster_count", c.cluster_count);
    f.add(p + "cluster_size", c.cluster_size);
    f.add(p + "cluster_prob_min", c.cluster_prob_min);
    f.add(p + "cluster_prob_max", c.cluster_prob_max);
    f.add(p + "case_clusters", c.case_clusters);
    f.add(p + "case_draw_prob", c.case_draw_prob);
    f.add(p + "case_count", c.case_count);
    f.add(p + "control_count", c.control_count);
    f.add(p + "length_log_mean", c.length_log_mean);
    f.add(p + "length_log_sd", c.length_log_sd);
    f.add(p + "events_per_window", c.events_per_window);
    f.add(p + "noise", c.noise);
    f.add(p + "background_zipf", c.background_zipf);
    f.add(p + "cluster_zipf", c.cluster_zipf);
    f.add(p + "seed", c.seed);
}

void bind_fields(Fields& f, const std::string& p, EmbeddingConfig& c) {
    f.add(p + "dim", c.dim);
    f.add(p + "window", c.window);
    f.add(p + "negatives", c.negatives);
    f.add(p + "epochs", c.epochs);
    f.add(p + "learning_rate", c.learning_rate);
    f.add(p + "seed", c.seed);
}

void bind_fields(Fields& f, const std::string& p, GanConfig& c) {
    f.add(p + "rho", c.rho);
    f.add(p + "k", c.k);
    f.add(p + "z_dim", c.z_dim);
    f.add(p + "mask_prob", c.mask_prob);
    f.add(p + "seq_len", c.seq_len);
    f.add(p + "smoothing", c.smoothing);
    f.add(p + "batch_size", c.batch_size);
    f.add(p + "max_iterations", c.max_iterations);
    f.add(p + "seed", c.seed);
    bind_fields(f, p + "trunk.", c.trunk);
    f.add(p + "encoder_segments", c.encoder_segments);
    f.add(p + "decoder_hidden", c.decoder_hidden);
    f.add(p + "decoder_maps", c.decoder_maps);
    f.add(p + "decoder_kernel", c.decoder_kernel);
    f.add(p + "batch_norm", c.batch_norm);
    f.add(p + "per_class", c.per_class);
    f.add(p + "convergence_window", c.convergence_window);
    f.add(p + "convergence_tol", c.convergence_tol);
    bind_fields(f, p + "optim.", c.optim);
}

void bind_fields(Fields& f, const std::string& p, PredictorConfig& c) {
    bind_fields(f, p + "trunk.", c.trunk);
    f.add(p + "batch_size", c.batch_size);
    f.add(p + "max_epochs", c.max_epochs);
    f.add(p + "patience", c.patience);
    f.add(p + "max_length", c.max_length);
    f.add(p + "seed", c.seed);
    bind_fields(f, p + "optim.", c.optim);
}

void bind_fields(Fields& f, const std::string& p, SslConfig& c) {
    f.add(p + "mode", [&c] { return std::string(to_string(c.mode)); }, [&c](const std::string& s) { c.mode = parse_ssl_mode(trim(s)); });
    f.add(p + "mu", c.mu);
    f.add(p + "multiplier", c.multiplier);
    f.add(p + "fixed_augmentation", c.fixed_augmentation);
}

void bind_fields(Fields& f, RunConfig& c) {
    f.add("seed", c.seed);
    bind_fields(f, "cohort.", c.cohort);
    bind_fields(f, "embedding.", c.embedding);
    bind_fields(f, "gan.", c.gan);
    bind_fields(f, "predictor.", c.predictor);
    bind_fields(f, "ssl.", c.ssl);
    f.add("eval.labeled_fraction", c.eval.labeled_fraction);
    f.add("eval.top_k_freq", c.eval.top_k_freq);
    f.add("eval.top_k_cooc", c.eval.top_k_cooc);
    f.add("eval.samples_per_source", c.eval.samples_per_source);
    f.add("sweep.rho", c.sweep.rho);
    f.add("sweep.mu", c.sweep.mu);
    f.add("sweep.full", c.sweep.full);
    f.add("sweep.seeds", c.sweep.seeds);
    f.add("sweep.grids", c.sweep.grids);
}

void RunConfig::derive_seeds() {
    cohort.seed = derive_seed(seed, "cohort");
    embedding.seed = derive_seed(seed, "embedding");
    gan.seed = derive_seed(seed, "gan");
    predictor.seed = derive_seed(seed, "predictor");
}

void RunConfig::validate() const {
    cohort.validate();
    embedding.validate();
    gan.validate();
    predictor.validate();
    ssl.validate();
    if (!(eval.labeled_fraction > 0 && eval.labeled_fraction <= 1)) throw InvalidArgument("eval.labeled_fraction must lie in (0,1]");
    if (eval.samples_per_source == 0) throw InvalidArgument("eval.samples_per_source must be positive");
    if (sweep.seeds == 0) throw InvalidArgument("sweep.seeds must be positive");
    for (const auto& g : split_list(sweep.grids))
        if (g != "modes" && g != "rho" && g != "mu" && g != "full")
            throw InvalidArgument("sweep.grids: unknown grid '" + g + "' (expected modes, rho, mu or full)");
}

RunConfig parse_run_config(const std::string& text) {
    RunConfig c;
    Fields f;
    bind_fields(f, c);
    struct Entry {
        std::size_t line;
        std::string key, value;
    };
    std::vector<Entry> entries;
    std::istringstream in(text);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        if (trim(line).empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ParseError("expected 'key = value', got '" + trim(line) + "'", line_no);
        const auto key = trim(line.substr(0, eq));
        if (!f.has(key)) throw ParseError("unknown config key '" + key + "'", line_no);
        entries.push_back({line_no, key, line.substr(eq + 1)});
    }
    auto apply = [&](const Entry& e) {
        try {
            f.set(e.key, e.value);
        } catch (const InvalidArgument& err) {
            throw ParseError(err.what(), e.line);
        }
    };
    // the root seed first, so explicit component seeds override the derived ones
    for (const auto& e : entries)
        if (e.key == "seed") apply(e);
    c.derive_seeds();
    for (const auto& e : entries)
        if (e.key != "seed") apply(e);
    c.validate();
    return c;
}

RunConfig load_run_config(const std::string& path) { return parse_run_config(read_file(path)); }

std::string format_run_config(const RunConfig& c) {
    RunConfig copy = c;
    Fields f;
    bind_fields(f, copy);
    std::string out;
    for (const auto& [k, v] : f.dump()) out += k + " = " + v + "\n";
    return out;
}

std::string config_hash(const RunConfig& c) { return content_hash(format_run_config(c)); }

}  // namespace ehrgan
