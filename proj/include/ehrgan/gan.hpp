#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ehrgan/cohort.hpp"
#include "ehrgan/embedding.hpp"
#include "ehrgan/graph.hpp"
#include "ehrgan/optim.hpp"
#include "ehrgan/params.hpp"
#include "ehrgan/predictor.hpp"
#include "ehrgan/trunk.hpp"

namespace ehrgan {

struct Checkpoint;

struct GanConfig {
    /// Weight of the adversarial term against reconstruction.
    double rho = 0.1;
    /// Generator steps per discriminator step.
    std::size_t k = 5;
    std::size_t z_dim = 100;
    double mask_prob = 0.5;
    /// Time steps of generator input and output.
    std::size_t seq_len = 150;
    /// One-sided smoothed target for real examples.
    double smoothing = 0.9;
    std::size_t batch_size = 32;
    std::size_t max_iterations = 2000;
    std::uint64_t seed = 1;

    /// Discriminator trunk; the encoder uses the same widths and maps.
    TrunkConfig trunk;
    /// Pooling segments of the encoder trunk (1 = plain max over time).
    std::size_t encoder_segments = 1;
    std::size_t decoder_hidden = 256;
    std::size_t decoder_maps = 100;
    std::size_t decoder_kernel = 3;
    bool batch_norm = true;
    /// One generator/discriminator pair per class, trained on that class's records.
    bool per_class = true;

    std::size_t convergence_window = 100;
    double convergence_tol = 0.02;
    /// Adam settings for both networks; l2_discriminator is the discriminator weight penalty.
    OptimConfig optim;

    void validate() const;
    /// Time steps of the first decoder feature map; two stride-2 upsamplings reach seq_len.
    std::size_t decoder_base_length() const;
};

/// One generator (encoder + decoder) and its discriminator.
struct GanNet {
    ParamSet generator;
    ParamSet discriminator;
};

class GanModel {
public:
    GanModel() = default;
    /// `output_scale` bounds each generated embedding dimension.
    GanModel(const GanConfig& cfg, std::size_t dim, Tensor output_scale);

    const GanConfig& config() const { return cfg_; }
    std::size_t dim() const { return dim_; }
    const Tensor& output_scale() const { return scale_; }
    std::size_t net_count() const { return nets_.size(); }
    std::size_t net_index(Label l) const;
    GanNet& net(std::size_t i) { return nets_.at(i); }
    const GanNet& net(std::size_t i) const { return nets_.at(i); }

    std::string embedding_fingerprint;

private:
    GanConfig cfg_;
    std::size_t dim_ = 0;
    Tensor scale_;
    std::vector<GanNet> nets_;
};

/// Per-dimension maximum absolute value over all embedding rows.
Tensor embedding_scale(const EmbeddingTable& table);

/// x [B,T,M] -> latent h [B,z_dim].
Var encode(Graph& g, const GanModel& model, const Binding& gen, Var x);

enum class NormMode : std::uint8_t {
    Train,      // batch statistics; running statistics updated when the binding is trainable
    Inference,  // running statistics
};
/// h [B,z_dim] -> x [B,seq_len,M].
Var decode(Graph& g, const GanModel& model, const Binding& gen, Var h, NormMode mode);

/// Discriminator logits [B,1].
Var discriminate(Graph& g, const GanModel& model, const Binding& disc, Var x);

struct Transition {
    Tensor x_tilde;  // decode(mix(h, z, m))
    Tensor x_bar;    // decode(h)
    Tensor z;
    Tensor mask;
};

/// Draw z ~ N(0,I) and m ~ Bernoulli(mask_prob) per example, unless `mask` is given.
/// x is [T,M] or [B,T,M] with T = seq_len; decoding uses running normalization statistics.
Transition sample_transition(const GanModel& model, std::size_t net, const Tensor& x, Rng& rng,
                             const Tensor* mask = nullptr);

/// rho * mean(-log D(x~)) + (1-rho) * mean ||x_bar - x||^2, with D given as logits.
Var generator_objective(Var fake_logits, Var x_bar, Var x, double rho);
/// Cross entropy of real logits against `smoothing`, of fake logits against 0,
/// plus l2 * (sum of squared decayed discriminator weights).
Var discriminator_objective(Var real_logits, Var fake_logits, double smoothing, double l2, Graph& g,
                            const Binding& disc);

struct GanStepInputs {
    Tensor x;     // [B,T,M]
    Tensor z;     // [B,d]
    Tensor mask;  // [B,d]
};
/// Full generator loss on a batch: the generator is bound trainable, the discriminator frozen.
Var generator_loss(Graph& g, GanModel& model, std::size_t net, const GanStepInputs& in, NormMode mode);

struct GanHistoryRecord {
    std::size_t iteration = 0;
    std::string net;
    double loss_g = 0;
    double loss_d = 0;
    double mean_d_real = 0;
    double mean_d_fake = 0;
};
std::string gan_history_jsonl(const std::vector<GanHistoryRecord>& history);

struct GanTrainResult {
    GanModel model;
    std::vector<GanHistoryRecord> history;
    std::vector<std::string> stop_reasons;  // per net
};

/// Embed records at seq_len rows: most recent seq_len-1 events, END, zero padding.
Tensor embed_batch(const std::vector<const PatientRecord*>& records, const EmbeddingTable& table, std::size_t seq_len);

/// Alternating training: per iteration, k generator steps then one discriminator step.
/// On a non-finite loss, writes the last finite state to `abort_checkpoint` (if set) and throws NonFiniteError.
GanTrainResult train_gan(const std::vector<const PatientRecord*>& records, const EmbeddingTable& table,
                         const GanConfig& cfg, const std::string& abort_checkpoint = "");

struct GenerateOptions {
    std::size_t samples_per_source = 1;
    std::uint64_t seed = 1;
    /// Decode reconstructions (mask of zeros) instead of transitions.
    bool zero_mask = false;
};

struct GenerateStats {
    std::size_t sources = 0;
    std::size_t generated = 0;
    std::size_t dropped_empty = 0;
    std::size_t without_end = 0;
    std::string to_text() const;
};

/// Sample, decode row by row to the nearest code, cut at the first END, inherit the source label.
/// Event windows are the positions in the decoded sequence.
Cohort generate_corpus(const GanModel& model, const EmbeddingTable& table, const Vocabulary& vocab,
                       const std::vector<const PatientRecord*>& sources, const GenerateOptions& opt,
                       GenerateStats* stats = nullptr);

/// Transition samples for augmented predictor training, one GAN net per source label.
class GanTransitionSampler : public TransitionSampler {
public:
    GanTransitionSampler(const GanModel& model, const EmbeddingTable& table);
    std::vector<std::int32_t> sample(const PatientRecord& source, Rng& rng) const override;
    /// Sources are grouped by net and decoded a batch at a time.
    std::vector<std::vector<std::int32_t>> sample_batch(const std::vector<const PatientRecord*>& sources,
                                                        Rng& rng) const override;

private:
    const GanModel& model_;
    const EmbeddingTable& table_;
    CodeDecoder decoder_;
};

void export_gan(const GanModel& model, Checkpoint& out);
GanModel import_gan(const Checkpoint& in);

}  // namespace ehrgan
