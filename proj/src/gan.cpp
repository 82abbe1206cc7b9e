#include "ehrgan/gan.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "ehrgan/checkpoint.hpp"
#include "ehrgan/config.hpp"
#include "ehrgan/error.hpp"
#include "ehrgan/ops.hpp"
#include "json.hpp"

namespace ehrgan {

void GanConfig::validate() const {
    if (!(rho >= 0 && rho <= 1)) throw InvalidArgument("rho must lie in [0,1]");
    if (k == 0) throw InvalidArgument("k (generator steps per discriminator step) must be >= 1");
    if (z_dim == 0) throw InvalidArgument("z_dim must be positive");
    if (!(mask_prob >= 0 && mask_prob <= 1)) throw InvalidArgument("mask_prob must lie in [0,1]");
    if (!(smoothing > 0 && smoothing <= 1)) throw InvalidArgument("smoothing target must lie in (0,1]");
    if (batch_size == 0) throw InvalidArgument("batch_size must be positive");
    trunk.validate();
    TrunkConfig enc = trunk;
    enc.segments = encoder_segments;
    enc.validate();
    if (seq_len < std::max(trunk.min_length(), enc.min_length()))
        throw InvalidArgument("seq_len " + std::to_string(seq_len) + " is shorter than the conv trunks accept");
    if (decoder_hidden == 0 || decoder_maps == 0 || decoder_kernel == 0)
        throw InvalidArgument("decoder sizes must be positive");
    if (!(convergence_tol >= 0)) throw InvalidArgument("convergence_tol must be >= 0");
    optim.validate();
}

std::size_t GanConfig::decoder_base_length() const {
    // two stride-2 transposed convolutions of width w map L to 4L + 3w - 6
    const auto w = static_cast<std::ptrdiff_t>(decoder_kernel);
    const auto need = static_cast<std::ptrdiff_t>(seq_len) - 3 * w + 6;
    return need <= 4 ? 1 : static_cast<std::size_t>((need + 3) / 4);
}

namespace {

TrunkConfig encoder_trunk(const GanConfig& c) {
    TrunkConfig t = c.trunk;
    t.segments = c.encoder_segments;
    return t;
}

void add_norm(ParamSet& ps, const std::string& name, std::size_t channels) {
    ps.add(name + ".gamma", Tensor({channels}, 1.0), false);
    ps.add(name + ".beta", Tensor({channels}), false);
    ps.add_buffer(name + ".mean", Tensor({channels}));
    ps.add_buffer(name + ".var", Tensor({channels}, 1.0));
}

ParamSet make_generator(const GanConfig& c, std::size_t dim, Rng& rng) {
    ParamSet ps;
    const TrunkConfig enc = encoder_trunk(c);
    add_trunk_params(ps, "enc.", dim, enc, rng);
    add_dense_params(ps, "enc.fc", enc.features(), c.z_dim, rng);
    const std::size_t C = c.decoder_maps, w = c.decoder_kernel;
    add_dense_params(ps, "dec.fc1", c.z_dim, c.decoder_hidden, rng);
    add_dense_params(ps, "dec.fc2", c.decoder_hidden, c.decoder_base_length() * C, rng);
    for (const char* up : {"dec.up1", "dec.up2"}) {
        ps.add(std::string(up) + ".w", he_uniform({w, C, C}, w * C, rng), true);
        ps.add(std::string(up) + ".b", Tensor({C}), false);
    }
    ps.add("dec.out.w", he_uniform({1, C, dim}, C, rng), true);
    ps.add("dec.out.b", Tensor({dim}), false);
    if (c.batch_norm)
        for (const char* bn : {"dec.bn0", "dec.bn1", "dec.bn2"}) add_norm(ps, bn, C);
    return ps;
}

ParamSet make_discriminator(const GanConfig& c, std::size_t dim, Rng& rng) {
    ParamSet ps;
    add_trunk_params(ps, "", dim, c.trunk, rng);
    add_dense_params(ps, "out", c.trunk.features(), 1, rng);
    return ps;
}

Var normalize(Graph& g, const Binding& p, const std::string& name, Var x, NormMode mode) {
    nn::BatchNormOptions opt;
    opt.training = mode == NormMode::Train;
    ParamSet* owner = p.mutable_params();
    if (owner && opt.training)
        return nn::batch_norm(x, p(g, name + ".gamma"), p(g, name + ".beta"), (*owner)[name + ".mean"].value,
                              (*owner)[name + ".var"].value, opt);
    // read-only model: statistics are used (or updated) on copies
    Tensor mean = p.params()[name + ".mean"].value, var = p.params()[name + ".var"].value;
    return nn::batch_norm(x, p(g, name + ".gamma"), p(g, name + ".beta"), mean, var, opt);
}

Tensor check_sequence_batch(const Tensor& x, const GanModel& m) {
    const auto& c = m.config();
    if (x.rank() == 2) {
        if (x.dim(0) != c.seq_len || x.dim(1) != m.dim())
            throw ShapeError("transition input must be [" + std::to_string(c.seq_len) + "," + std::to_string(m.dim()) +
                             "], got " + shape_string(x.shape()));
        return x.reshaped({1, x.dim(0), x.dim(1)});
    }
    if (x.rank() != 3 || x.dim(1) != c.seq_len || x.dim(2) != m.dim())
        throw ShapeError("transition input must be [B," + std::to_string(c.seq_len) + "," + std::to_string(m.dim()) +
                         "], got " + shape_string(x.shape()));
    return x;
}

}  // namespace

GanModel::GanModel(const GanConfig& cfg, std::size_t dim, Tensor output_scale)
    : cfg_(cfg), dim_(dim), scale_(std::move(output_scale)) {
    cfg_.validate();
    if (dim == 0) throw InvalidArgument("embedding dimension must be positive");
    if (scale_.size() != dim) throw ShapeError("output scale must have one entry per embedding dimension");
    const std::size_t n = cfg_.per_class ? 2 : 1;
    for (std::size_t i = 0; i < n; ++i) {
        Rng rng(derive_seed(cfg_.seed, "gan-init", i));
        GanNet net;
        net.generator = make_generator(cfg_, dim, rng);
        net.discriminator = make_discriminator(cfg_, dim, rng);
        nets_.push_back(std::move(net));
    }
}

std::size_t GanModel::net_index(Label l) const { return cfg_.per_class && l == Label::Case ? 1 : 0; }

Tensor embedding_scale(const EmbeddingTable& table) {
    Tensor s({table.dim()});
    for (std::size_t r = 0; r < table.rows(); ++r) {
        auto row = table.row(static_cast<std::int32_t>(r));
        for (std::size_t m = 0; m < row.size(); ++m) s[m] = std::max(s[m], std::abs(row[m]));
    }
    for (auto& v : s.values())
        if (v == 0) v = 1;
    return s;
}

Var encode(Graph& g, const GanModel& model, const Binding& gen, Var x) {
    return dense_forward(g, gen, "enc.fc", trunk_forward(g, gen, "enc.", x, encoder_trunk(model.config())));
}

Var decode(Graph& g, const GanModel& model, const Binding& gen, Var h, NormMode mode) {
    const auto& c = model.config();
    const std::size_t B = h.shape()[0], C = c.decoder_maps;
    auto block = [&](Var x, const char* bn) { return nn::relu(c.batch_norm ? normalize(g, gen, bn, x, mode) : x); };
    Var x = nn::relu(dense_forward(g, gen, "dec.fc1", h));
    x = nn::reshape(dense_forward(g, gen, "dec.fc2", x), {B, c.decoder_base_length(), C});
    x = block(x, "dec.bn0");
    x = block(nn::deconv1d(x, gen(g, "dec.up1.w"), gen(g, "dec.up1.b"), 2), "dec.bn1");
    x = block(nn::deconv1d(x, gen(g, "dec.up2.w"), gen(g, "dec.up2.b"), 2), "dec.bn2");
    x = nn::crop_time(x, c.seq_len);
    x = nn::conv1d(x, gen(g, "dec.out.w"), gen(g, "dec.out.b"));
    return nn::scale_channels(nn::tanh(x), model.output_scale());
}

Var discriminate(Graph& g, const GanModel& model, const Binding& disc, Var x) {
    return dense_forward(g, disc, "out", trunk_forward(g, disc, "", x, model.config().trunk));
}

Transition sample_transition(const GanModel& model, std::size_t net, const Tensor& x, Rng& rng, const Tensor* mask) {
    const Tensor xb = check_sequence_batch(x, model);
    const std::size_t B = xb.dim(0), d = model.config().z_dim;
    Transition t;
    t.z = Tensor({B, d});
    for (auto& v : t.z.values()) v = rng.normal();
    if (mask) {
        if (mask->size() != B * d) throw ShapeError("mask must have " + std::to_string(B * d) + " entries");
        t.mask = mask->reshaped({B, d});
    } else {
        t.mask = Tensor({B, d});
        for (auto& v : t.mask.values()) v = rng.bernoulli(model.config().mask_prob) ? 1.0 : 0.0;
    }
    const GanNet& n = model.net(net);
    const Binding gen = Binding::frozen(n.generator);
    Graph g;
    Var h = encode(g, model, gen, g.constant(xb));
    Var x_bar = decode(g, model, gen, h, NormMode::Inference);
    Var x_tilde = decode(g, model, gen, nn::mix_latent(h, t.z, t.mask), NormMode::Inference);
    t.x_bar = x_bar.value();
    t.x_tilde = x_tilde.value();
    if (x.rank() == 2) {
        t.x_bar.reshape({model.config().seq_len, model.dim()});
        t.x_tilde.reshape({model.config().seq_len, model.dim()});
    }
    return t;
}

Var generator_objective(Var fake_logits, Var x_bar, Var x, double rho) {
    if (!(rho >= 0 && rho <= 1)) throw InvalidArgument("rho must lie in [0,1]");
    Var recon = nn::squared_error(x_bar, x);
    if (rho == 0) return recon;
    if (!fake_logits.valid()) throw InvalidArgument("adversarial term needs discriminator logits");
    const std::vector<Real> ones(fake_logits.value().size(), 1.0);
    Var adv = nn::sigmoid_xent(fake_logits, ones);
    if (rho == 1) return adv;
    return nn::add(nn::scale(adv, rho), nn::scale(recon, 1 - rho));
}

Var discriminator_objective(Var real_logits, Var fake_logits, double smoothing, double l2, Graph& g,
                            const Binding& disc) {
    const std::vector<Real> real_t(real_logits.value().size(), smoothing), fake_t(fake_logits.value().size(), 0.0);
    Var loss = nn::add(nn::sigmoid_xent(real_logits, real_t), nn::sigmoid_xent(fake_logits, fake_t));
    if (l2 > 0)
        for (const auto& [name, p] : disc.params())
            if (p.decay) loss = nn::add(loss, nn::scale(nn::sum_squares(disc(g, name)), l2));
    return loss;
}

Var generator_loss(Graph& g, GanModel& model, std::size_t net, const GanStepInputs& in, NormMode mode) {
    GanNet& n = model.net(net);
    const Binding gen = Binding::trainable(n.generator);
    Var x = g.constant(in.x);
    Var h = encode(g, model, gen, x);
    Var x_bar = decode(g, model, gen, h, mode);
    Var logits;
    if (model.config().rho > 0) {
        Var x_tilde = decode(g, model, gen, nn::mix_latent(h, in.z, in.mask), mode);
        logits = discriminate(g, model, Binding::frozen(n.discriminator), x_tilde);
    }
    return generator_objective(logits, x_bar, x, model.config().rho);
}

std::string gan_history_jsonl(const std::vector<GanHistoryRecord>& history) {
    std::string out;
    for (const auto& h : history) {
        nlohmann::ordered_json j;
        j["iteration"] = h.iteration;
        j["net"] = h.net;
        j["loss_G"] = h.loss_g;
        j["loss_D"] = h.loss_d;
        j["mean_D_real"] = h.mean_d_real;
        j["mean_D_fake"] = h.mean_d_fake;
        out += j.dump() + "\n";
    }
    return out;
}

Tensor embed_batch(const std::vector<const PatientRecord*>& records, const EmbeddingTable& table, std::size_t seq_len) {
    if (records.empty()) throw InvalidArgument("cannot embed an empty batch");
    const std::size_t M = table.dim();
    Tensor out({records.size(), seq_len, M});
    for (std::size_t i = 0; i < records.size(); ++i) {
        const auto s = embed_record(*records[i], table, seq_len);
        std::copy(s.data.values().begin(), s.data.values().end(), out.data() + i * seq_len * M);
    }
    return out;
}

namespace {

struct BatchSource {
    const Tensor& data;  // [n,T,M]
    std::size_t n, row;

    Tensor draw(std::size_t B, Rng& rng) const {
        Tensor x({B, data.dim(1), data.dim(2)});
        for (std::size_t b = 0; b < B; ++b) {
            const std::size_t i = rng.index(n);
            std::copy(data.data() + i * row, data.data() + (i + 1) * row, x.data() + b * row);
        }
        return x;
    }
};

double mean_sigmoid(const Tensor& logits) {
    double s = 0;
    for (Real v : logits.values()) s += 1 / (1 + std::exp(-v));
    return s / static_cast<double>(logits.size());
}

const char* net_name(const GanModel& m, std::size_t i) {
    if (!m.config().per_class) return "all";
    return i == 1 ? "case" : "control";
}

}  // namespace

GanTrainResult train_gan(const std::vector<const PatientRecord*>& records, const EmbeddingTable& table,
                         const GanConfig& cfg, const std::string& abort_checkpoint) {
    cfg.validate();
    GanTrainResult res;
    res.model = GanModel(cfg, table.dim(), embedding_scale(table));
    res.model.embedding_fingerprint = table.fingerprint();
    GanModel& model = res.model;
    const std::size_t B = cfg.batch_size, d = cfg.z_dim;

    for (std::size_t ni = 0; ni < model.net_count(); ++ni) {
        std::vector<const PatientRecord*> subset;
        for (const auto* r : records)
            if (model.net_index(r->label) == ni) subset.push_back(r);
        if (cfg.max_iterations == 0) {
            res.stop_reasons.push_back("no iterations requested");
            continue;
        }
        if (subset.empty()) {
            res.stop_reasons.push_back("no training records");
            continue;
        }
        const Tensor data = embed_batch(subset, table, cfg.seq_len);
        const BatchSource source{data, subset.size(), cfg.seq_len * table.dim()};
        Rng rng(derive_seed(cfg.seed, "gan-train", ni));
        GanNet& net = model.net(ni);
        auto draw_inputs = [&] {
            GanStepInputs in;
            in.x = source.draw(B, rng);
            in.z = Tensor({B, d});
            for (auto& v : in.z.values()) v = rng.normal();
            in.mask = Tensor({B, d});
            for (auto& v : in.mask.values()) v = rng.bernoulli(cfg.mask_prob) ? 1.0 : 0.0;
            return in;
        };

        std::size_t calm = 0;
        std::string reason = "max iterations reached";
        std::size_t it = 1;
        try {
            for (; it <= cfg.max_iterations; ++it) {
                GanHistoryRecord rec;
                rec.iteration = it;
                rec.net = net_name(model, ni);
                for (std::size_t s = 0; s < cfg.k; ++s) {
                    Graph g;
                    Var loss = generator_loss(g, model, ni, draw_inputs(), NormMode::Train);
                    const double lv = loss.value()[0];
                    if (!std::isfinite(lv)) throw NonFiniteError("generator loss is not finite");
                    net.generator.zero_grad();
                    g.backward(loss);
                    clip_and_step(net.generator, cfg.optim);
                    rec.loss_g += lv / static_cast<double>(cfg.k);
                }

                const Tensor real = source.draw(B, rng);
                const GanStepInputs fin = draw_inputs();
                Tensor fake;
                {
                    Graph g;
                    const Binding gen = Binding::frozen(net.generator);
                    Var h = encode(g, model, gen, g.constant(fin.x));
                    fake = decode(g, model, gen, nn::mix_latent(h, fin.z, fin.mask), NormMode::Train).value();
                }
                Graph g;
                const Binding disc = Binding::trainable(net.discriminator);
                Var real_logits = discriminate(g, model, disc, g.constant(real));
                Var fake_logits = discriminate(g, model, disc, g.constant(std::move(fake)));
                Var loss = discriminator_objective(real_logits, fake_logits, cfg.smoothing, cfg.optim.l2_discriminator, g, disc);
                rec.loss_d = loss.value()[0];
                if (!std::isfinite(rec.loss_d)) throw NonFiniteError("discriminator loss is not finite");
                rec.mean_d_real = mean_sigmoid(real_logits.value());
                rec.mean_d_fake = mean_sigmoid(fake_logits.value());
                net.discriminator.zero_grad();
                g.backward(loss);
                clip_and_step(net.discriminator, cfg.optim);
                res.history.push_back(rec);

                const bool balanced = std::abs(rec.mean_d_real - 0.5) < cfg.convergence_tol &&
                                      std::abs(rec.mean_d_fake - 0.5) < cfg.convergence_tol;
                calm = balanced ? calm + 1 : 0;
                if (cfg.convergence_window > 0 && calm >= cfg.convergence_window) {
                    reason = "converged at iteration " + std::to_string(it);
                    break;
                }
            }
        } catch (const NonFiniteError& e) {
            std::string where = std::string(e.what()) + " (net " + net_name(model, ni) + ", iteration " + std::to_string(it) + ")";
            if (!abort_checkpoint.empty()) {
                Checkpoint ck;
                export_gan(model, ck);
                ck.meta["aborted_at"] = std::to_string(it);
                write_checkpoint(abort_checkpoint, ck);
                where += "; last finite state written to " + abort_checkpoint;
            }
            throw NonFiniteError(where);
        }
        res.stop_reasons.push_back(reason);
    }
    return res;
}

std::string GenerateStats::to_text() const {
    std::ostringstream os;
    os << "sources=" << sources << "\ngenerated=" << generated << "\ndropped_empty=" << dropped_empty
       << "\nwithout_end=" << without_end << "\n";
    return os.str();
}

Cohort generate_corpus(const GanModel& model, const EmbeddingTable& table, const Vocabulary& vocab,
                       const std::vector<const PatientRecord*>& sources, const GenerateOptions& opt,
                       GenerateStats* stats) {
    if (table.dim() != model.dim()) throw InvalidArgument("embedding dimension does not match the GAN");
    if (table.vocab_size() != vocab.size()) throw InvalidArgument("embedding vocabulary does not match the corpus vocabulary");
    if (opt.samples_per_source == 0) throw InvalidArgument("samples_per_source must be positive");
    const std::size_t T = model.config().seq_len, M = model.dim(), d = model.config().z_dim;
    const CodeDecoder decoder(table);
    GenerateStats st;
    st.sources = sources.size();
    Cohort out;
    out.name = "generated";
    out.vocab = vocab;
    out.spec_hash = model.embedding_fingerprint;
    Rng rng(derive_seed(opt.seed, "generate"));
    constexpr std::size_t kChunk = 32;

    for (std::size_t ni = 0; ni < model.net_count(); ++ni) {
        std::vector<const PatientRecord*> group;
        for (const auto* r : sources)
            for (std::size_t s = 0; s < opt.samples_per_source; ++s)
                if (model.net_index(r->label) == ni) group.push_back(r);
        for (std::size_t start = 0; start < group.size(); start += kChunk) {
            const std::vector<const PatientRecord*> chunk(group.begin() + static_cast<std::ptrdiff_t>(start),
                                                          group.begin() + static_cast<std::ptrdiff_t>(std::min(group.size(), start + kChunk)));
            const Tensor x = embed_batch(chunk, table, T);
            Tensor zero_mask;
            if (opt.zero_mask) zero_mask = Tensor({chunk.size(), d});
            const Transition t = sample_transition(model, ni, x, rng, opt.zero_mask ? &zero_mask : nullptr);
            const Tensor& y = opt.zero_mask ? t.x_bar : t.x_tilde;
            for (std::size_t b = 0; b < chunk.size(); ++b) {
                const auto matches = decoder.decode_rows(y.data() + b * T * M, T);
                PatientRecord rec;
                rec.label = chunk[b]->label;
                bool saw_end = false;
                for (const auto& m : matches) {
                    if (m.code == decoder.end_id()) {
                        saw_end = true;
                        break;
                    }
                    if (m.code != kPadCode)
                        rec.events.push_back({static_cast<std::uint32_t>(rec.events.size()), m.code});
                }
                if (!saw_end) ++st.without_end;
                if (rec.events.empty()) {
                    ++st.dropped_empty;
                    continue;
                }
                rec.id = out.records.size();
                out.records.push_back(std::move(rec));
                out.splits.push_back(Split::Unassigned);
                ++st.generated;
            }
        }
    }
    if (stats) *stats = st;
    return out;
}

GanTransitionSampler::GanTransitionSampler(const GanModel& model, const EmbeddingTable& table)
    : model_(model), table_(table), decoder_(table) {
    if (table.dim() != model.dim()) throw InvalidArgument("embedding dimension does not match the GAN");
}

std::vector<std::int32_t> GanTransitionSampler::sample(const PatientRecord& source, Rng& rng) const {
    const auto x = embed_record(source, table_, model_.config().seq_len);
    const auto t = sample_transition(model_, model_.net_index(source.label), x.data, rng);
    return decode_sequence(t.x_tilde, decoder_).codes;
}

std::vector<std::vector<std::int32_t>> GanTransitionSampler::sample_batch(const std::vector<const PatientRecord*>& sources,
                                                                         Rng& rng) const {
    std::vector<std::vector<std::int32_t>> out(sources.size());
    const std::size_t T = model_.config().seq_len, M = model_.dim(), d = model_.config().z_dim;
    for (std::size_t net = 0; net < model_.net_count(); ++net) {
        std::vector<std::size_t> idx;
        std::vector<const PatientRecord*> group;
        for (std::size_t i = 0; i < sources.size(); ++i)
            if (model_.net_index(sources[i]->label) == net) {
                idx.push_back(i);
                group.push_back(sources[i]);
            }
        if (group.empty()) continue;
        const std::size_t B = group.size();
        Tensor z({B, d}), mask({B, d});
        for (auto& v : z.values()) v = rng.normal();
        for (auto& v : mask.values()) v = rng.bernoulli(model_.config().mask_prob) ? 1.0 : 0.0;
        const Binding gen = Binding::frozen(model_.net(net).generator);
        Graph g;
        Var h = encode(g, model_, gen, g.constant(embed_batch(group, table_, T)));
        const Tensor x_tilde = decode(g, model_, gen, nn::mix_latent(h, z, mask), NormMode::Inference).value();
        for (std::size_t b = 0; b < B; ++b) {
            const Tensor rows(Shape{T, M}, std::vector<Real>(x_tilde.data() + b * T * M, x_tilde.data() + (b + 1) * T * M));
            out[idx[b]] = decode_sequence(rows, decoder_).codes;
        }
    }
    return out;
}

void export_gan(const GanModel& model, Checkpoint& out) {
    out.meta["kind"] = "gan";
    for (const auto& [k, v] : config_entries(model.config(), "gan.")) out.meta[k] = v;
    out.meta["gan.dim"] = std::to_string(model.dim());
    out.meta["gan.nets"] = std::to_string(model.net_count());
    out.meta["gan.embedding"] = model.embedding_fingerprint;
    out.tensors.emplace_back("gan/output_scale", model.output_scale());
    for (std::size_t i = 0; i < model.net_count(); ++i) {
        const std::string p = "gan/net" + std::to_string(i) + "/";
        export_params(model.net(i).generator, p + "gen/", out);
        export_params(model.net(i).discriminator, p + "disc/", out);
    }
}

GanModel import_gan(const Checkpoint& in) {
    if (in.meta_value("kind") != "gan") throw InvalidArgument("checkpoint does not hold a GAN");
    const auto cfg = config_from_entries<GanConfig>(in.meta, "gan.");
    GanModel m(cfg, std::stoul(in.meta_value("gan.dim")), in.tensor("gan/output_scale"));
    if (std::stoul(in.meta_value("gan.nets")) != m.net_count()) throw ParseError("GAN checkpoint net count disagrees with its config");
    for (std::size_t i = 0; i < m.net_count(); ++i) {
        const std::string p = "gan/net" + std::to_string(i) + "/";
        import_params(m.net(i).generator, p + "gen/", in);
        import_params(m.net(i).discriminator, p + "disc/", in);
    }
    m.embedding_fingerprint = in.meta_value("gan.embedding");
    return m;
}

}  // namespace ehrgan
