#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "ehrgan/cohort.hpp"
#include "ehrgan/config.hpp"
#include "ehrgan/embedding.hpp"
#include "ehrgan/eval.hpp"
#include "ehrgan/gan.hpp"
#include "ehrgan/predictor.hpp"

namespace ehrgan {

const char* code_version();

/// Generate the configured cohort and assign its train/val/test split.
Cohort build_cohort(const RunConfig& c, GenerationStats* stats = nullptr);

struct Score {
    double auroc = 0;
    double accuracy = 0;
};
Score score_records(const PredictorModel& model, const EmbeddingTable& table,
                    const std::vector<const PatientRecord*>& records);

/// One predictor configuration of a sweep.
struct SweepCell {
    std::string group;
    SslMode mode = SslMode::Basic;
    double rho = 0;  // GAN weight, SSL_GAN only
    double mu = 0;
};

/// Cells of the grids named in c.sweep.grids, duplicates kept (they share results).
std::vector<SweepCell> sweep_cells(const RunConfig& c);

struct SweepOptions {
    std::size_t threads = 1;
    /// Called after every finished run, in completion order.
    std::function<void(const RunResult&)> on_result;
    /// Called with free-text progress lines.
    std::function<void(const std::string&)> log;
};

/// For each of c.sweep.seeds seeds: draw the labeled subset, train one GAN per
/// distinct rho on the labeled records, train a predictor per cell and score it
/// on the test split. Results are ordered by seed, then cell.
std::vector<RunResult> run_sweep(const RunConfig& c, const Cohort& cohort, const EmbeddingTable& table,
                                 const std::vector<SweepCell>& cells, const SweepOptions& opt = {});

/// Seed of sweep replicate `index`.
std::uint64_t replicate_seed(std::uint64_t root, std::size_t index);

}  // namespace ehrgan
