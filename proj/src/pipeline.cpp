#include "ehrgan/pipeline.hpp"

#include <algorithm>
#include <map>
#include <mutex>
#include <sstream>
#include <thread>
#include <tuple>

#include "ehrgan/error.hpp"
#include "ehrgan/rng.hpp"

namespace ehrgan {

const char* code_version() { return EHRGAN_VERSION; }

Cohort build_cohort(const RunConfig& c, GenerationStats* stats) {
    Cohort cohort = generate_cohort(c.cohort, stats);
    assign_splits(cohort, derive_seed(c.cohort.seed, "splits"));
    return cohort;
}

Score score_records(const PredictorModel& model, const EmbeddingTable& table,
                    const std::vector<const PatientRecord*>& records) {
    const auto p = predict_proba(model, table, records);
    std::vector<int> y;
    y.reserve(records.size());
    for (const auto* r : records) y.push_back(r->label == Label::Case ? 1 : 0);
    return {auroc(p, y), accuracy(p, y)};
}

namespace {

std::string format_value(const char* name, double v) {
    std::ostringstream os;
    os << name << "=" << v;
    return os.str();
}

std::vector<std::string> grid_names(const std::string& grids) {
    std::vector<std::string> out;
    std::string item;
    std::istringstream in(grids);
    while (std::getline(in, item, ',')) {
        item.erase(std::remove_if(item.begin(), item.end(), [](unsigned char ch) { return std::isspace(ch); }), item.end());
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

// BASIC-equivalent cells share one key so they are trained once per seed.
using CellKey = std::tuple<int, double, double>;
CellKey cell_key(const SweepCell& cell) {
    if (cell.mode == SslMode::Basic || cell.mu == 0) return {static_cast<int>(SslMode::Basic), 0.0, 0.0};
    return {static_cast<int>(cell.mode), cell.mode == SslMode::SslGan ? cell.rho : 0.0, cell.mu};
}

}  // namespace

std::vector<SweepCell> sweep_cells(const RunConfig& c) {
    std::vector<SweepCell> cells;
    const double rho = c.gan.rho, mu = c.ssl.mu;
    for (const auto& grid : grid_names(c.sweep.grids)) {
        if (grid == "modes") {
            const double pool_ratio = (1 - c.eval.labeled_fraction) / c.eval.labeled_fraction;
            cells.push_back({"BASIC", SslMode::Basic, 0, 0});
            cells.push_back({"RAND", SslMode::Rand, 0, mu});
            cells.push_back({"FULL", SslMode::Full, 0, pool_ratio});
            cells.push_back({"SSL_GAN", SslMode::SslGan, rho, mu});
        } else if (grid == "rho") {
            for (double r : c.sweep.rho) cells.push_back({format_value("rho", r), SslMode::SslGan, r, mu});
        } else if (grid == "mu") {
            for (double m : c.sweep.mu) cells.push_back({format_value("mu", m), SslMode::SslGan, rho, m});
        } else if (grid == "full") {
            for (double m : c.sweep.full) cells.push_back({format_value("full", m), SslMode::Full, 0, m});
        } else {
            throw InvalidArgument("unknown sweep grid '" + grid + "' (expected modes, rho, mu or full)");
        }
    }
    return cells;
}

std::uint64_t replicate_seed(std::uint64_t root, std::size_t index) { return derive_seed(root, "replicate", index); }

std::vector<RunResult> run_sweep(const RunConfig& c, const Cohort& cohort, const EmbeddingTable& table,
                                 const std::vector<SweepCell>& cells, const SweepOptions& opt) {
    if (cells.empty()) throw InvalidArgument("sweep has no cells");
    if (table.vocab_size() != cohort.vocab.size()) throw InvalidArgument("embedding vocabulary does not match the corpus");
    const auto test = cohort.in_split(Split::Test);
    if (test.empty()) throw InvalidArgument("corpus has no test split");
    std::mutex mu;
    auto log = [&](const std::string& s) {
        if (!opt.log) return;
        std::lock_guard<std::mutex> lock(mu);
        opt.log(s);
    };

    std::vector<std::vector<RunResult>> per_seed(c.sweep.seeds);
    auto run_seed = [&](std::size_t si) {
        const std::uint64_t seed = replicate_seed(c.seed, si);
        const PredictorData data = make_predictor_data(cohort, c.eval.labeled_fraction, derive_seed(seed, "labeled"));
        std::map<double, GanModel> gans;
        std::map<CellKey, std::map<std::string, double>> done;
        for (const auto& cell : cells) {
            const CellKey key = cell_key(cell);
            auto hit = done.find(key);
            if (hit == done.end()) {
                PredictorConfig pc = c.predictor;
                pc.seed = derive_seed(seed, "predictor");
                SslConfig ssl = c.ssl;
                ssl.mode = cell.mode;
                ssl.mu = cell.mu;
                std::unique_ptr<GanTransitionSampler> sampler;
                if (cell.mode == SslMode::SslGan && cell.mu > 0) {
                    auto g = gans.find(cell.rho);
                    if (g == gans.end()) {
                        GanConfig gc = c.gan;
                        gc.rho = cell.rho;
                        gc.seed = derive_seed(seed, "gan");
                        log("seed " + std::to_string(si) + ": training GAN rho=" + format_value("", cell.rho).substr(1));
                        g = gans.emplace(cell.rho, train_gan(data.labeled, table, gc).model).first;
                    }
                    sampler = std::make_unique<GanTransitionSampler>(g->second, table);
                }
                const auto res = train_predictor(data, table, pc, ssl, sampler.get());
                const Score s = score_records(res.model, table, test);
                std::map<std::string, double> m{{"test_auroc", s.auroc},
                                                {"test_accuracy", s.accuracy},
                                                {"val_auroc", res.best_val_auroc},
                                                {"best_epoch", static_cast<double>(res.best_epoch)}};
                hit = done.emplace(key, std::move(m)).first;
            }
            RunResult r{cell.group, si, hit->second};
            per_seed[si].push_back(r);
            log("seed " + std::to_string(si) + " " + cell.group + ": test AUROC " + std::to_string(r.metrics.at("test_auroc")));
            if (opt.on_result) {
                std::lock_guard<std::mutex> lock(mu);
                opt.on_result(r);
            }
        }
    };

    const std::size_t threads = std::clamp<std::size_t>(opt.threads, 1, c.sweep.seeds);
    if (threads == 1) {
        for (std::size_t si = 0; si < c.sweep.seeds; ++si) run_seed(si);
    } else {
        std::vector<std::thread> pool;
        std::size_t next = 0;
        std::exception_ptr failure;
        for (std::size_t t = 0; t < threads; ++t)
            pool.emplace_back([&] {
                while (true) {
                    std::size_t si;
                    {
                        std::lock_guard<std::mutex> lock(mu);
                        if (next >= c.sweep.seeds || failure) return;
                        si = next++;
                    }
                    try {
                        run_seed(si);
                    } catch (...) {
                        std::lock_guard<std::mutex> lock(mu);
                        if (!failure) failure = std::current_exception();
                    }
                }
            });
        for (auto& t : pool) t.join();
        if (failure) std::rethrow_exception(failure);
    }
    std::vector<RunResult> out;
    for (auto& v : per_seed) out.insert(out.end(), v.begin(), v.end());
    return out;
}

}  // namespace ehrgan
