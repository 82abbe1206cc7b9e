#include "ehrgan/predictor.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <numeric>

#include "ehrgan/checkpoint.hpp"
#include "ehrgan/error.hpp"
#include "ehrgan/eval.hpp"
#include "ehrgan/ops.hpp"
#include "json.hpp"

namespace ehrgan {

const char* to_string(SslMode m) {
    switch (m) {
        case SslMode::Basic: return "BASIC";
        case SslMode::Rand: return "RAND";
        case SslMode::Full: return "FULL";
        case SslMode::SslGan: return "SSL_GAN";
    }
    return "?";
}

SslMode parse_ssl_mode(const std::string& s) {
    std::string u = s;
    std::transform(u.begin(), u.end(), u.begin(), [](unsigned char c) { return c == '-' ? '_' : std::toupper(c); });
    if (u == "BASIC") return SslMode::Basic;
    if (u == "RAND") return SslMode::Rand;
    if (u == "FULL") return SslMode::Full;
    if (u == "SSL_GAN") return SslMode::SslGan;
    throw InvalidArgument("unknown training mode '" + s + "' (expected BASIC, RAND, FULL or SSL_GAN)");
}

void PredictorConfig::validate() const {
    trunk.validate();
    optim.validate();
    if (batch_size == 0) throw InvalidArgument("batch size must be positive");
    if (max_epochs == 0) throw InvalidArgument("max_epochs must be positive");
    if (max_length < trunk.min_length())
        throw InvalidArgument("max_length " + std::to_string(max_length) + " is shorter than the widest filter");
}

void SslConfig::validate() const {
    if (!(mu >= 0) || !std::isfinite(mu)) throw InvalidArgument("mu must be a finite non-negative number");
    if (multiplier == 0) throw InvalidArgument("augmentation multiplier must be positive");
}

PredictorModel::PredictorModel(const PredictorConfig& cfg, std::size_t dim, std::uint64_t init_seed) : cfg_(cfg), dim_(dim) {
    cfg_.validate();
    if (dim == 0) throw InvalidArgument("embedding dimension must be positive");
    Rng rng(init_seed);
    add_trunk_params(params_, "", dim, cfg_.trunk, rng);
    add_dense_params(params_, "head", cfg_.trunk.features(), 2, rng);
}

Var PredictorModel::logits(Graph& g, const Binding& p, const std::vector<const SequenceMatrix*>& batch) const {
    if (batch.empty()) throw InvalidArgument("empty predictor batch");
    std::vector<Var> pooled;
    pooled.reserve(batch.size());
    for (const auto* s : batch) {
        const Tensor& x = s->data;
        if (x.rank() != 2 || x.dim(1) != dim_)
            throw ShapeError("predictor input must be [T," + std::to_string(dim_) + "], got " + shape_string(x.shape()));
        pooled.push_back(trunk_forward(g, p, "", g.constant(x.reshaped({1, x.dim(0), x.dim(1)})), cfg_.trunk));
    }
    Var features = pooled.size() == 1 ? pooled[0] : nn::stack(pooled);
    return dense_forward(g, p, "head", features);
}

SequenceMatrix embed_codes_for_predictor(std::span<const std::int32_t> codes, const EmbeddingTable& table,
                                         const PredictorConfig& cfg) {
    const std::size_t rows = std::max(std::min(codes.size() + 1, cfg.max_length), cfg.trunk.min_length());
    return embed_codes(codes, table, rows);
}

SequenceMatrix embed_for_predictor(const PatientRecord& r, const EmbeddingTable& table, const PredictorConfig& cfg) {
    const auto codes = r.codes();
    SequenceMatrix s = embed_codes_for_predictor(codes, table, cfg);
    s.patient_id = r.id;
    s.label = r.label;
    return s;
}

SslLoss ssl_objective(Graph& g, const PredictorModel& model, const Binding& p,
                      const std::vector<const SequenceMatrix*>& labeled, const std::vector<int>& labels,
                      const std::vector<const SequenceMatrix*>& augmented, const std::vector<int>& augmented_labels,
                      double mu) {
    SslLoss out;
    out.labeled_logits = model.logits(g, p, labeled);
    out.loss = nn::softmax_xent(out.labeled_logits, labels);
    if (mu > 0 && !augmented.empty())
        out.loss = nn::add(out.loss, nn::scale(nn::softmax_xent(model.logits(g, p, augmented), augmented_labels), mu));
    return out;
}

namespace {

constexpr std::size_t kPredictChunk = 64;

std::vector<double> case_probabilities(const Tensor& logits) {
    const Tensor probs = nn::softmax(logits);
    std::vector<double> out(logits.dim(0));
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = probs.at(i, 1);
    return out;
}

int label_index(Label l) { return l == Label::Case ? 1 : 0; }

double mean_xent(std::span<const double> p_case, std::span<const int> labels) {
    double s = 0;
    for (std::size_t i = 0; i < p_case.size(); ++i) {
        const double p = std::clamp(labels[i] ? p_case[i] : 1 - p_case[i], 1e-12, 1.0);
        s -= std::log(p);
    }
    return s / static_cast<double>(p_case.size());
}

double safe_auroc(std::span<const double> scores, std::span<const int> labels) {
    const auto pos = std::count(labels.begin(), labels.end(), 1);
    if (pos == 0 || pos == static_cast<std::ptrdiff_t>(labels.size())) return 0.5;
    return auroc(scores, labels);
}

}  // namespace

std::vector<double> predict_proba(const PredictorModel& model, const std::vector<SequenceMatrix>& data) {
    std::vector<double> out;
    out.reserve(data.size());
    const Binding p = Binding::frozen(model.params());
    for (std::size_t start = 0; start < data.size(); start += kPredictChunk) {
        std::vector<const SequenceMatrix*> chunk;
        for (std::size_t i = start; i < std::min(data.size(), start + kPredictChunk); ++i) chunk.push_back(&data[i]);
        Graph g;
        const auto probs = case_probabilities(model.logits(g, p, chunk).value());
        out.insert(out.end(), probs.begin(), probs.end());
    }
    return out;
}

std::vector<double> predict_proba(const PredictorModel& model, const EmbeddingTable& table,
                                  const std::vector<const PatientRecord*>& records) {
    if (table.dim() != model.dim()) throw InvalidArgument("embedding dimension does not match the predictor");
    if (model.vocab_size && table.vocab_size() != model.vocab_size)
        throw InvalidArgument("embedding vocabulary of " + std::to_string(table.vocab_size()) +
                              " codes does not match the predictor's " + std::to_string(model.vocab_size));
    if (!model.embedding_fingerprint.empty() && table.fingerprint() != model.embedding_fingerprint)
        throw InvalidArgument("embedding table differs from the one the predictor was trained with");
    std::vector<SequenceMatrix> data;
    data.reserve(records.size());
    for (const auto* r : records) data.push_back(embed_for_predictor(*r, table, model.config()));
    return predict_proba(model, data);
}

PredictorData make_predictor_data(const Cohort& cohort, double labeled_fraction, std::uint64_t seed) {
    if (!(labeled_fraction > 0 && labeled_fraction <= 1)) throw InvalidArgument("labeled fraction must lie in (0,1]");
    PredictorData d;
    d.validation = cohort.in_split(Split::Val);
    Rng rng(seed);
    for (Label l : {Label::Control, Label::Case}) {
        std::vector<const PatientRecord*> group;
        for (const auto* r : cohort.in_split(Split::Train))
            if (r->label == l) group.push_back(r);
        rng.shuffle(group);
        const auto n = static_cast<std::size_t>(std::llround(labeled_fraction * static_cast<double>(group.size())));
        d.labeled.insert(d.labeled.end(), group.begin(), group.begin() + static_cast<std::ptrdiff_t>(n));
        d.pool.insert(d.pool.end(), group.begin() + static_cast<std::ptrdiff_t>(n), group.end());
    }
    auto by_id = [](const PatientRecord* a, const PatientRecord* b) { return a->id < b->id; };
    std::sort(d.labeled.begin(), d.labeled.end(), by_id);
    std::sort(d.pool.begin(), d.pool.end(), by_id);
    return d;
}

std::string history_jsonl(const std::vector<HistoryRecord>& history) {
    std::string out;
    for (const auto& h : history) {
        nlohmann::ordered_json j;
        j["epoch"] = h.epoch;
        j["split"] = h.split;
        j["loss"] = h.loss;
        j["accuracy"] = h.accuracy;
        j["auroc"] = h.auroc;
        out += j.dump() + "\n";
    }
    return out;
}

std::vector<std::vector<std::int32_t>> TransitionSampler::sample_batch(const std::vector<const PatientRecord*>& sources,
                                                                      Rng& rng) const {
    std::vector<std::vector<std::int32_t>> out;
    out.reserve(sources.size());
    for (const auto* r : sources) out.push_back(sample(*r, rng));
    return out;
}

PredictorResult train_predictor(const PredictorData& data, const EmbeddingTable& table, const PredictorConfig& cfg,
                                const SslConfig& ssl, const TransitionSampler* sampler) {
    cfg.validate();
    ssl.validate();
    if (data.labeled.empty()) throw InvalidArgument("no labeled training records");
    if (data.validation.empty()) throw InvalidArgument("no validation records for early stopping");
    const bool augment = ssl.mu > 0 && (ssl.mode == SslMode::SslGan || ssl.mode == SslMode::Rand);
    if (ssl.mode == SslMode::SslGan && ssl.mu > 0 && !sampler)
        throw InvalidArgument("SSL_GAN mode needs a trained transition sampler");
    if ((ssl.mode == SslMode::Rand || ssl.mode == SslMode::Full) && ssl.mu > 0 && data.pool.empty())
        throw InvalidArgument(std::string(to_string(ssl.mode)) + " mode needs a held-off record pool");

    PredictorResult res;
    res.model = PredictorModel(cfg, table.dim(), derive_seed(cfg.seed, "predictor-init"));
    res.model.vocab_size = table.vocab_size();
    res.model.embedding_fingerprint = table.fingerprint();
    PredictorModel& model = res.model;

    std::vector<const PatientRecord*> train_records = data.labeled;
    if (ssl.mode == SslMode::Full && ssl.mu > 0) {
        std::vector<const PatientRecord*> pool = data.pool;
        Rng pick(derive_seed(cfg.seed, "full-pool"));
        pick.shuffle(pool);
        const auto extra = std::min(pool.size(), static_cast<std::size_t>(std::llround(ssl.mu * static_cast<double>(data.labeled.size()))));
        train_records.insert(train_records.end(), pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(extra));
    }
    std::vector<SequenceMatrix> train_x, val_x, pool_x;
    for (const auto* r : train_records) train_x.push_back(embed_for_predictor(*r, table, cfg));
    for (const auto* r : data.validation) val_x.push_back(embed_for_predictor(*r, table, cfg));
    if (ssl.mode == SslMode::Rand && augment)
        for (const auto* r : data.pool) pool_x.push_back(embed_for_predictor(*r, table, cfg));
    std::vector<int> val_y;
    for (const auto* r : data.validation) val_y.push_back(label_index(r->label));

    Rng order_rng(derive_seed(cfg.seed, "predictor-order"));
    Rng aug_rng(derive_seed(cfg.seed, "predictor-augment"));

    // fixed-once cache: per training example, its augmented samples
    std::vector<std::vector<SequenceMatrix>> fixed;
    // multiplier samples per listed training example, grouped by example
    auto draw_transitions = [&](const std::vector<std::size_t>& idx) {
        std::vector<const PatientRecord*> sources;
        for (std::size_t i : idx)
            for (std::size_t a = 0; a < ssl.multiplier; ++a) sources.push_back(train_records[i]);
        const auto drawn = sampler->sample_batch(sources, aug_rng);
        std::vector<SequenceMatrix> out;
        for (std::size_t k = 0; k < drawn.size(); ++k) {
            out.push_back(embed_codes_for_predictor(drawn[k], table, cfg));
            out.back().label = sources[k]->label;
        }
        return out;
    };
    if (augment && ssl.mode == SslMode::SslGan && ssl.fixed_augmentation) {
        for (std::size_t start = 0; start < train_x.size(); start += cfg.batch_size) {
            std::vector<std::size_t> idx;
            for (std::size_t i = start; i < std::min(train_x.size(), start + cfg.batch_size); ++i) idx.push_back(i);
            auto drawn = draw_transitions(idx);
            for (std::size_t k = 0; k < idx.size(); ++k)
                fixed.emplace_back(std::make_move_iterator(drawn.begin() + static_cast<std::ptrdiff_t>(k * ssl.multiplier)),
                                   std::make_move_iterator(drawn.begin() + static_cast<std::ptrdiff_t>((k + 1) * ssl.multiplier)));
        }
    }

    std::vector<std::size_t> order(train_x.size());
    std::iota(order.begin(), order.end(), 0);
    ParamSet best = model.params();
    res.best_val_auroc = -1;
    std::size_t since_best = 0;

    for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        order_rng.shuffle(order);
        double loss_sum = 0;
        std::size_t batches = 0;
        std::vector<double> seen_scores;
        std::vector<int> seen_labels;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t end = std::min(order.size(), start + cfg.batch_size);
            std::vector<const SequenceMatrix*> xb;
            std::vector<int> yb;
            for (std::size_t i = start; i < end; ++i) {
                xb.push_back(&train_x[order[i]]);
                yb.push_back(label_index(train_x[order[i]].label));
            }
            std::vector<SequenceMatrix> fresh;
            std::vector<const SequenceMatrix*> ab;
            std::vector<int> ay;
            if (augment && ssl.mode == SslMode::SslGan) {
                if (ssl.fixed_augmentation) {
                    for (std::size_t i = start; i < end; ++i)
                        for (const auto& s : fixed[order[i]]) {
                            ab.push_back(&s);
                            ay.push_back(label_index(train_x[order[i]].label));
                        }
                } else {
                    fresh = draw_transitions(std::vector<std::size_t>(order.begin() + static_cast<std::ptrdiff_t>(start),
                                                                      order.begin() + static_cast<std::ptrdiff_t>(end)));
                    for (const auto& s : fresh) ay.push_back(label_index(s.label));
                }
            } else if (augment && ssl.mode == SslMode::Rand) {
                for (std::size_t k = 0; k < (end - start) * ssl.multiplier; ++k) {
                    ab.push_back(&pool_x[aug_rng.index(pool_x.size())]);
                    ay.push_back(aug_rng.bernoulli(0.5) ? 1 : 0);
                }
            }
            for (const auto& s : fresh) ab.push_back(&s);

            Graph g;
            const auto [loss, logits_l] = ssl_objective(g, model, Binding::trainable(model.params()), xb, yb, ab, ay, ssl.mu);
            const double lv = loss.value()[0];
            if (!std::isfinite(lv))
                throw NonFiniteError("predictor loss became non-finite at epoch " + std::to_string(epoch));
            for (double p : case_probabilities(logits_l.value())) seen_scores.push_back(p);
            seen_labels.insert(seen_labels.end(), yb.begin(), yb.end());
            model.params().zero_grad();
            g.backward(loss);
            clip_and_step(model.params(), cfg.optim);
            loss_sum += lv;
            ++batches;
            res.augmented_samples += ab.size();
        }
        res.history.push_back({epoch, "train", loss_sum / static_cast<double>(batches), accuracy(seen_scores, seen_labels),
                               safe_auroc(seen_scores, seen_labels)});

        const auto val_p = predict_proba(model, val_x);
        const double val_auc = safe_auroc(val_p, val_y);
        res.history.push_back({epoch, "val", mean_xent(val_p, val_y), accuracy(val_p, val_y), val_auc});
        res.epochs_run = epoch;
        if (val_auc > res.best_val_auroc) {
            res.best_val_auroc = val_auc;
            res.best_epoch = epoch;
            best = model.params();
            since_best = 0;
        } else if (++since_best >= cfg.patience) {
            break;
        }
    }
    model.params() = std::move(best);
    return res;
}

namespace {

std::string join_sizes(const std::vector<std::size_t>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
    return s;
}

std::vector<std::size_t> split_sizes(const std::string& s) {
    std::vector<std::size_t> out;
    std::size_t pos = 0;
    while (pos <= s.size()) {
        const auto comma = s.find(',', pos);
        out.push_back(std::stoul(s.substr(pos, comma - pos)));
        if (comma == std::string::npos) break;
        pos = comma + 1;
    }
    return out;
}

}  // namespace

void export_predictor(const PredictorModel& model, Checkpoint& out) {
    const auto& c = model.config();
    out.meta["kind"] = "predictor";
    out.meta["predictor.widths"] = join_sizes(c.trunk.widths);
    out.meta["predictor.maps"] = std::to_string(c.trunk.maps);
    out.meta["predictor.segments"] = std::to_string(c.trunk.segments);
    out.meta["predictor.max_length"] = std::to_string(c.max_length);
    out.meta["predictor.dim"] = std::to_string(model.dim());
    out.meta["predictor.vocab_size"] = std::to_string(model.vocab_size);
    out.meta["predictor.embedding"] = model.embedding_fingerprint;
    export_params(model.params(), "predictor/", out);
}

PredictorModel import_predictor(const Checkpoint& in) {
    if (in.meta_value("kind") != "predictor") throw InvalidArgument("checkpoint does not hold a predictor");
    PredictorConfig c;
    try {
        c.trunk.widths = split_sizes(in.meta_value("predictor.widths"));
        c.trunk.maps = std::stoul(in.meta_value("predictor.maps"));
        c.trunk.segments = std::stoul(in.meta_value("predictor.segments"));
        c.max_length = std::stoul(in.meta_value("predictor.max_length"));
    } catch (const std::logic_error&) {
        throw ParseError("predictor checkpoint has malformed configuration fields");
    }
    PredictorModel m(c, std::stoul(in.meta_value("predictor.dim")), 0);
    import_params(m.params(), "predictor/", in);
    m.vocab_size = std::stoul(in.meta_value("predictor.vocab_size"));
    m.embedding_fingerprint = in.meta_value("predictor.embedding");
    return m;
}

}  // namespace ehrgan
