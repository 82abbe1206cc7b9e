#include <cmath>
#include <cstring>
#include <filesystem>
#include <map>

#include "doctest.h"
#include "ehrgan/checkpoint.hpp"
#include "ehrgan/cohort.hpp"
#include "ehrgan/embedding.hpp"
#include "ehrgan/error.hpp"
#include "ehrgan/gan.hpp"
#include "ehrgan/ops.hpp"
#include "support/gradcheck.hpp"

using namespace ehrgan;

namespace {

GanConfig tiny_config() {
    GanConfig c;
    c.z_dim = 6;
    c.seq_len = 12;
    c.trunk.widths = {2, 3};
    c.trunk.maps = 4;
    c.decoder_hidden = 8;
    c.decoder_maps = 4;
    c.batch_size = 4;
    c.k = 2;
    c.max_iterations = 6;
    c.convergence_window = 0;
    c.optim.learning_rate = 0.005;
    return c;
}

Tensor random_batch(std::size_t B, std::size_t T, std::size_t M, Rng& rng) {
    Tensor x({B, T, M});
    for (auto& v : x.values()) v = rng.normal();
    return x;
}

struct Data {
    Cohort cohort;
    EmbeddingTable table;

    Data() {
        CohortSpec s;
        s.vocab_size = 80;
        s.cluster_count = 4;
        s.cluster_size = 6;
        s.case_count = 20;
        s.control_count = 40;
        s.seed = 2;
        cohort = generate_cohort(s);
        assign_splits(cohort, 2);
        EmbeddingConfig e;
        e.dim = 5;
        e.epochs = 1;
        table = train_embedding(cohort, e);
    }
};

// Zero biases put ReLU and max-pool inputs exactly on their kinks, where central differences are one-sided.
void jitter_biases(ParamSet& ps, Rng& rng) {
    for (auto& [name, p] : ps)
        if (p.trainable && !p.decay)
            for (auto& v : p.value.values()) v += rng.uniform(-0.2, 0.2);
}

bool bit_equal(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) return false;
    for (std::size_t i = 0; i < a.size(); ++i)
        if (std::memcmp(a.data() + i, b.data() + i, sizeof(Real)) != 0) return false;
    return true;
}

}  // namespace

TEST_CASE("decoder base length reaches seq_len after two upsamplings") {
    GanConfig c;
    CHECK(c.decoder_base_length() == 37);
    for (std::size_t T : {5, 12, 13, 50, 150, 151, 250})
        for (std::size_t w : {2, 3, 4}) {
            c.seq_len = T;
            c.decoder_kernel = w;
            const auto L = c.decoder_base_length();
            CHECK(4 * L + 3 * w - 6 >= T);
            if (L > 1) CHECK(4 * (L - 1) + 3 * w - 6 < T);
        }
}

TEST_CASE("configuration validation") {
    auto c = tiny_config();
    c.rho = 1.5;
    CHECK_THROWS_AS(c.validate(), InvalidArgument);
    c = tiny_config();
    c.k = 0;
    CHECK_THROWS_AS(c.validate(), InvalidArgument);
    c = tiny_config();
    c.seq_len = 2;
    CHECK_THROWS_AS(c.validate(), InvalidArgument);
    c = tiny_config();
    c.smoothing = 0;
    CHECK_THROWS_AS(c.validate(), InvalidArgument);
    CHECK_NOTHROW(tiny_config().validate());
}

TEST_CASE("latent mixing takes z where the mask is one") {
    Graph g;
    const Tensor h = Tensor({2, 2}, {1, 2, 3, 4});
    const Tensor z = Tensor({2, 2}, {9, 8, 7, 6});
    const Tensor m = Tensor({2, 2}, {1, 0, 0, 1});
    const Tensor out = nn::mix_latent(g.constant(h), z, m).value();
    CHECK(out[0] == 9);
    CHECK(out[1] == 2);
    CHECK(out[2] == 3);
    CHECK(out[3] == 6);
}

TEST_CASE("generated sequences have the input shape and stay within the output scale") {
    Rng rng(1);
    const auto cfg = tiny_config();
    Tensor scale({5});
    for (std::size_t i = 0; i < 5; ++i) scale[i] = 0.5 + 0.1 * static_cast<double>(i);
    const GanModel m(cfg, 5, scale);
    CHECK(m.net_count() == 2);
    CHECK(m.net_index(Label::Case) == 1);
    CHECK(m.net_index(Label::Control) == 0);
    const Tensor x = random_batch(3, cfg.seq_len, 5, rng);
    const auto t = sample_transition(m, 0, x, rng);
    CHECK(t.x_tilde.shape() == x.shape());
    CHECK(t.x_bar.shape() == x.shape());
    CHECK(t.z.shape() == Shape{3, 6});
    for (std::size_t i = 0; i < t.x_tilde.size(); ++i) CHECK(std::abs(t.x_tilde[i]) <= scale[i % 5]);
    const Tensor single = x.reshaped({cfg.seq_len * 3, 5});
    CHECK_THROWS_AS(sample_transition(m, 0, single, rng), ShapeError);
}

TEST_CASE("zero mask collapses the transition to the reconstruction, bit for bit") {
    Rng rng(2);
    Data d;
    auto cfg = tiny_config();
    auto trained = train_gan(d.cohort.all(), d.table, cfg).model;
    const GanModel fresh(cfg, d.table.dim(), embedding_scale(d.table));
    for (const GanModel* m : {&fresh, static_cast<const GanModel*>(&trained)})
        for (int trial = 0; trial < 20; ++trial) {
            const Tensor x = random_batch(2, cfg.seq_len, d.table.dim(), rng);
            const Tensor zero({2, cfg.z_dim});
            const auto t = sample_transition(*m, trial % 2, x, rng, &zero);
            CHECK(bit_equal(t.x_tilde, t.x_bar));
        }
}

TEST_CASE("transition sampling is deterministic per rng state") {
    Rng data_rng(3);
    const auto cfg = tiny_config();
    const GanModel m(cfg, 4, Tensor({4}, 1.0));
    const Tensor x = random_batch(2, cfg.seq_len, 4, data_rng);
    Rng a(9), b(9);
    CHECK(bit_equal(sample_transition(m, 1, x, a).x_tilde, sample_transition(m, 1, x, b).x_tilde));
    const auto t1 = sample_transition(m, 1, x, a), t2 = sample_transition(m, 1, x, a);
    CHECK_FALSE(bit_equal(t1.z, t2.z));
}

TEST_CASE("generator objective worked example") {
    Graph g;
    Var logits = g.constant(Tensor({2, 1}));  // D = 0.5
    Tensor xb({2, 1, 2});
    xb[0] = 0.2;  // squared distance 0.04 for the first example, 0.04 for the second
    xb[3] = -0.2;
    Var x = g.constant(Tensor({2, 1, 2}));
    const double v = generator_objective(logits, g.constant(xb), x, 0.1).value()[0];
    CHECK(v == doctest::Approx(0.1 * std::log(2.0) + 0.9 * 0.04).epsilon(1e-12));
    CHECK(generator_objective(logits, g.constant(xb), x, 0.0).value()[0] == doctest::Approx(0.04));
    CHECK(generator_objective(logits, g.constant(xb), x, 1.0).value()[0] == doctest::Approx(std::log(2.0)));
    CHECK(generator_objective(Var{}, g.constant(xb), x, 0.0).value()[0] == doctest::Approx(0.04));
}

TEST_CASE("discriminator objective matches its formula") {
    Rng rng(4);
    const auto cfg = tiny_config();
    const GanModel m(cfg, 3, Tensor({3}, 1.0));
    const Binding disc = Binding::frozen(m.net(0).discriminator);
    {
        Graph g;
        Var zero = g.constant(Tensor({3, 1}));
        CHECK(discriminator_objective(zero, zero, 0.9, 0.0, g, disc).value()[0] == doctest::Approx(2 * std::log(2.0)));
    }
    for (int trial = 0; trial < 20; ++trial) {
        Tensor r({4, 1}), f({4, 1});
        for (auto& v : r.values()) v = rng.normal(0, 2);
        for (auto& v : f.values()) v = rng.normal(0, 2);
        const double l2 = 0.01 * trial;
        double expect = 0;
        for (std::size_t i = 0; i < 4; ++i) {
            const double pr = 1 / (1 + std::exp(-r[i])), pf = 1 / (1 + std::exp(-f[i]));
            expect -= (0.9 * std::log(pr) + 0.1 * std::log(1 - pr)) / 4;
            expect -= std::log(1 - pf) / 4;
        }
        for (const auto& [name, p] : m.net(0).discriminator)
            if (p.decay)
                for (Real w : p.value.values()) expect += l2 * w * w;
        Graph g;
        const double got = discriminator_objective(g.constant(r), g.constant(f), 0.9, l2, g, disc).value()[0];
        CHECK(got == doctest::Approx(expect).epsilon(1e-10));
    }
}

TEST_CASE("gradient of the generator loss") {
    Rng rng(5);
    auto cfg = tiny_config();
    cfg.z_dim = 3;
    cfg.seq_len = 9;
    cfg.trunk.widths = {2};
    cfg.trunk.maps = 2;
    cfg.decoder_hidden = 4;
    cfg.decoder_maps = 2;
    cfg.per_class = false;
    GanModel m(cfg, 3, Tensor({3}, 1.0));
    GanStepInputs in{random_batch(3, cfg.seq_len, 3, rng), Tensor({3, 3}), Tensor({3, 3})};
    for (auto& v : in.z.values()) v = rng.normal();
    for (std::size_t i = 0; i < in.mask.size(); i += 2) in.mask[i] = 1;
    for (double rho : {0.0, 0.3, 1.0}) {
        m = GanModel([&] { auto c = cfg; c.rho = rho; return c; }(), 3, Tensor({3}, 1.0));
        jitter_biases(m.net(0).generator, rng);
        jitter_biases(m.net(0).discriminator, rng);
        const auto r = testing::check_gradients(m.net(0).generator, [&](Graph& g) {
            return generator_loss(g, m, 0, in, NormMode::Train);
        }, 1e-5, 12);
        CHECK_MESSAGE(r.ok, "rho=" << rho << " " << r.worst_entry);
    }
}

TEST_CASE("gradient of the discriminator loss including weight decay") {
    Rng rng(6);
    auto cfg = tiny_config();
    cfg.per_class = false;
    GanModel m(cfg, 3, Tensor({3}, 1.0));
    const Tensor real = random_batch(3, cfg.seq_len, 3, rng), fake = random_batch(3, cfg.seq_len, 3, rng);
    auto& ps = m.net(0).discriminator;
    jitter_biases(ps, rng);
    const auto r = testing::check_gradients(ps, [&](Graph& g) {
        const Binding b = Binding::trainable(ps);
        return discriminator_objective(discriminate(g, m, b, g.constant(real)), discriminate(g, m, b, g.constant(fake)),
                                       0.9, 0.05, g, b);
    });
    CHECK_MESSAGE(r.ok, r.worst_entry);
}

TEST_CASE("training with zero iterations leaves an empty history") {
    Data d;
    auto cfg = tiny_config();
    cfg.max_iterations = 0;
    const auto r = train_gan(d.cohort.all(), d.table, cfg);
    CHECK(r.history.empty());
    CHECK(r.stop_reasons.size() == 2);
}

TEST_CASE("training is deterministic and its history covers every net") {
    Data d;
    const auto cfg = tiny_config();
    const auto a = train_gan(d.cohort.all(), d.table, cfg);
    const auto b = train_gan(d.cohort.all(), d.table, cfg);
    CHECK(gan_history_jsonl(a.history) == gan_history_jsonl(b.history));
    Checkpoint ca, cb;
    export_gan(a.model, ca);
    export_gan(b.model, cb);
    CHECK(encode_checkpoint(ca) == encode_checkpoint(cb));
    REQUIRE(a.history.size() == 2 * cfg.max_iterations);
    CHECK(a.history.front().net == "control");
    CHECK(a.history.back().net == "case");
    for (const auto& h : a.history) {
        CHECK(std::isfinite(h.loss_g));
        CHECK(h.mean_d_real > 0);
        CHECK(h.mean_d_real < 1);
    }
    auto single = cfg;
    single.per_class = false;
    const auto s = train_gan(d.cohort.all(), d.table, single);
    CHECK(s.model.net_count() == 1);
    CHECK(s.history.size() == cfg.max_iterations);
}

TEST_CASE("reconstruction-only training reduces the reconstruction loss") {
    Data d;
    auto cfg = tiny_config();
    cfg.rho = 0;
    cfg.per_class = false;
    cfg.max_iterations = 60;
    cfg.optim.learning_rate = 0.01;
    const auto r = train_gan(d.cohort.all(), d.table, cfg);
    double first = 0, last = 0;
    for (std::size_t i = 0; i < 10; ++i) {
        first += r.history[i].loss_g;
        last += r.history[r.history.size() - 1 - i].loss_g;
    }
    CHECK(last < 0.8 * first);
}

TEST_CASE("sustained balance stops training early") {
    Data d;
    auto cfg = tiny_config();
    cfg.max_iterations = 50;
    cfg.convergence_window = 3;
    cfg.convergence_tol = 1.0;
    const auto r = train_gan(d.cohort.all(), d.table, cfg);
    CHECK(r.history.size() == 6);
    CHECK(r.stop_reasons[0].find("converged") != std::string::npos);
}

TEST_CASE("non-finite loss aborts with the last finite state on disk") {
    Data d;
    Tensor huge = d.table.matrix();
    for (auto& v : huge.values()) v *= 1e200;
    const EmbeddingTable table(d.table.vocab_size(), huge);
    auto cfg = tiny_config();
    const auto path = (std::filesystem::temp_directory_path() / "ehrgan_gan_abort.ckpt").string();
    std::filesystem::remove(path);
    CHECK_THROWS_AS(train_gan(d.cohort.all(), table, cfg, path), NonFiniteError);
    REQUIRE(std::filesystem::exists(path));
    const auto ck = read_checkpoint(path);
    CHECK(ck.meta_value("aborted_at") == "1");
    const GanModel back = import_gan(ck);
    const GanModel init(cfg, table.dim(), embedding_scale(table));
    CHECK(back.net(0).generator["dec.fc1.w"].value == init.net(0).generator["dec.fc1.w"].value);
    std::filesystem::remove(path);
}

TEST_CASE("GAN checkpoint round trip preserves sampling") {
    Data d;
    const auto cfg = tiny_config();
    const auto r = train_gan(d.cohort.all(), d.table, cfg);
    Checkpoint ck;
    export_gan(r.model, ck);
    const auto back = import_gan(decode_checkpoint(encode_checkpoint(ck)));
    CHECK(back.embedding_fingerprint == d.table.fingerprint());
    CHECK(back.config().rho == cfg.rho);
    CHECK(back.config().trunk.widths == cfg.trunk.widths);
    Rng xr(1);
    const Tensor x = random_batch(2, cfg.seq_len, d.table.dim(), xr);
    for (std::size_t n = 0; n < 2; ++n) {
        Rng a(4), b(4);
        CHECK(bit_equal(sample_transition(r.model, n, x, a).x_tilde, sample_transition(back, n, x, b).x_tilde));
    }
    Checkpoint wrong;
    wrong.meta["kind"] = "predictor";
    CHECK_THROWS_AS(import_gan(wrong), InvalidArgument);
}

TEST_CASE("generated corpus inherits labels and is reproducible") {
    Data d;
    const auto cfg = tiny_config();
    const auto r = train_gan(d.cohort.all(), d.table, cfg);
    const auto sources = d.cohort.in_split(Split::Train);
    GenerateOptions opt;
    opt.samples_per_source = 2;
    opt.seed = 5;
    GenerateStats st;
    const auto a = generate_corpus(r.model, d.table, d.cohort.vocab, sources, opt, &st);
    const auto b = generate_corpus(r.model, d.table, d.cohort.vocab, sources, opt);
    CHECK(format_corpus(a) == format_corpus(b));
    CHECK(st.sources == sources.size());
    CHECK(st.generated + st.dropped_empty == 2 * sources.size());
    CHECK(a.records.size() == st.generated);
    std::map<Label, std::size_t> src, gen;
    for (const auto* s : sources) src[s->label] += 2;
    for (const auto& rec : a.records) {
        ++gen[rec.label];
        CHECK(rec.length() <= cfg.seq_len);
        for (std::size_t i = 0; i < rec.events.size(); ++i) CHECK(rec.events[i].window == i);
    }
    if (st.dropped_empty == 0) CHECK(gen == src);
    for (std::size_t i = 0; i < a.records.size(); ++i) {
        CHECK(a.records[i].id == i);
        CHECK(a.splits[i] == Split::Unassigned);
    }
    opt.seed = 6;
    CHECK(format_corpus(generate_corpus(r.model, d.table, d.cohort.vocab, sources, opt)) != format_corpus(a));
    CHECK_FALSE(st.to_text().empty());
}

TEST_CASE("transition sampler returns vocabulary codes") {
    Data d;
    const auto model = train_gan(d.cohort.all(), d.table, tiny_config()).model;
    const GanTransitionSampler sampler(model, d.table);
    Rng rng(8);
    const auto codes = sampler.sample(d.cohort.records[0], rng);
    for (auto c : codes) {
        CHECK(c >= 0);
        CHECK(c < static_cast<std::int32_t>(d.table.vocab_size()));
    }
}

TEST_CASE("batched transition sampling matches per-record sampling when nothing is masked") {
    Data d;
    auto cfg = tiny_config();
    cfg.mask_prob = 0;
    const auto model = train_gan(d.cohort.all(), d.table, cfg).model;
    const GanTransitionSampler sampler(model, d.table);
    std::vector<const PatientRecord*> sources;
    for (std::size_t i = 0; i < 9; ++i) sources.push_back(&d.cohort.records[i * 5]);
    Rng a(1), b(2);
    const auto batch = sampler.sample_batch(sources, a);
    REQUIRE(batch.size() == sources.size());
    for (std::size_t i = 0; i < sources.size(); ++i) CHECK(batch[i] == sampler.sample(*sources[i], b));
}
