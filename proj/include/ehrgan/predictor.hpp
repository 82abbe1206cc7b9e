#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ehrgan/cohort.hpp"
#include "ehrgan/embedding.hpp"
#include "ehrgan/graph.hpp"
#include "ehrgan/optim.hpp"
#include "ehrgan/params.hpp"
#include "ehrgan/trunk.hpp"

namespace ehrgan {

struct Checkpoint;

enum class SslMode : std::uint8_t { Basic, Rand, Full, SslGan };
const char* to_string(SslMode m);
SslMode parse_ssl_mode(const std::string& s);

struct PredictorConfig {
    TrunkConfig trunk;
    std::size_t batch_size = 32;
    std::size_t max_epochs = 50;
    std::size_t patience = 5;
    /// Embedded rows per record, END included.
    std::size_t max_length = kMaxRecordLength;
    OptimConfig optim;
    std::uint64_t seed = 1;

    void validate() const;
};

struct SslConfig {
    SslMode mode = SslMode::Basic;
    /// Weight of the augmented term; in FULL mode, extra real records added per labeled record.
    double mu = 0.6;
    /// Augmented samples per labeled example per epoch.
    std::size_t multiplier = 1;
    /// Draw the augmented samples once and reuse them every epoch.
    bool fixed_augmentation = false;

    void validate() const;
};

/// Source of label-preserving transition samples x~ ~ p(x~ | x), as code sequences.
class TransitionSampler {
public:
    virtual ~TransitionSampler() = default;
    virtual std::vector<std::int32_t> sample(const PatientRecord& source, Rng& rng) const = 0;
    /// One sample per source, in order.
    virtual std::vector<std::vector<std::int32_t>> sample_batch(const std::vector<const PatientRecord*>& sources,
                                                                Rng& rng) const;
};

class PredictorModel {
public:
    PredictorModel() = default;
    PredictorModel(const PredictorConfig& cfg, std::size_t dim, std::uint64_t init_seed);

    const PredictorConfig& config() const { return cfg_; }
    std::size_t dim() const { return dim_; }
    ParamSet& params() { return params_; }
    const ParamSet& params() const { return params_; }

    /// Logits [B,2]; each example may have its own length.
    Var logits(Graph& g, const Binding& p, const std::vector<const SequenceMatrix*>& batch) const;

    /// Identity of the embedding the model was trained against.
    std::string embedding_fingerprint;
    std::size_t vocab_size = 0;

private:
    PredictorConfig cfg_;
    std::size_t dim_ = 0;
    ParamSet params_;
};

/// Embed a record for the predictor: min(length+1, max_length) rows, at least the trunk minimum.
SequenceMatrix embed_for_predictor(const PatientRecord& r, const EmbeddingTable& table, const PredictorConfig& cfg);
SequenceMatrix embed_codes_for_predictor(std::span<const std::int32_t> codes, const EmbeddingTable& table,
                                         const PredictorConfig& cfg);

struct SslLoss {
    Var loss;
    Var labeled_logits;
};
/// Supervised cross entropy plus mu times the cross entropy of the augmented batch.
SslLoss ssl_objective(Graph& g, const PredictorModel& model, const Binding& p,
                      const std::vector<const SequenceMatrix*>& labeled, const std::vector<int>& labels,
                      const std::vector<const SequenceMatrix*>& augmented, const std::vector<int>& augmented_labels,
                      double mu);

/// Case probability per sequence.
std::vector<double> predict_proba(const PredictorModel& model, const std::vector<SequenceMatrix>& data);
/// Embeds with `table`, which must match the one used for training.
std::vector<double> predict_proba(const PredictorModel& model, const EmbeddingTable& table,
                                  const std::vector<const PatientRecord*>& records);

struct PredictorData {
    std::vector<const PatientRecord*> labeled;
    std::vector<const PatientRecord*> validation;
    /// Held-off training records: real labels in FULL mode, unlabeled source in RAND mode.
    std::vector<const PatientRecord*> pool;
};

/// Split the train split into a labeled part (stratified by class) and the held-off pool.
PredictorData make_predictor_data(const Cohort& cohort, double labeled_fraction, std::uint64_t seed);

struct HistoryRecord {
    std::size_t epoch = 0;
    std::string split;
    double loss = 0;
    double accuracy = 0;
    double auroc = 0;
};
std::string history_jsonl(const std::vector<HistoryRecord>& history);

struct PredictorResult {
    PredictorModel model;
    std::vector<HistoryRecord> history;
    std::size_t best_epoch = 0;
    double best_val_auroc = 0;
    std::size_t epochs_run = 0;
    std::size_t augmented_samples = 0;
};

/// Mini-batch Adam training with early stopping on validation AUROC; the best epoch's weights are returned.
/// SSL_GAN mode needs `sampler`; RAND and FULL draw from data.pool.
PredictorResult train_predictor(const PredictorData& data, const EmbeddingTable& table, const PredictorConfig& cfg,
                                const SslConfig& ssl, const TransitionSampler* sampler = nullptr);

void export_predictor(const PredictorModel& model, Checkpoint& out);
PredictorModel import_predictor(const Checkpoint& in);

}  // namespace ehrgan
