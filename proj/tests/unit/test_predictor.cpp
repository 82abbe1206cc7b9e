#include <cmath>

#include "doctest.h"
#include "ehrgan/checkpoint.hpp"
#include "ehrgan/cohort.hpp"
#include "ehrgan/embedding.hpp"
#include "ehrgan/error.hpp"
#include "ehrgan/eval.hpp"
#include "ehrgan/ops.hpp"
#include "ehrgan/predictor.hpp"
#include "support/gradcheck.hpp"

using namespace ehrgan;

namespace {

struct Fixture {
    Cohort cohort;
    EmbeddingTable table;
    PredictorData data;

    explicit Fixture(std::uint64_t seed = 3, std::size_t scale = 1) {
        CohortSpec s;
        s.vocab_size = 150;
        s.cluster_count = 6;
        s.cluster_size = 8;
        s.case_count = 60 * scale;
        s.control_count = 120 * scale;
        s.seed = seed;
        cohort = generate_cohort(s);
        assign_splits(cohort, seed);
        EmbeddingConfig e;
        e.dim = 8;
        e.epochs = 2;
        table = train_embedding(cohort, e);
        data = make_predictor_data(cohort, 0.5, seed);
    }
};

PredictorConfig small_config() {
    PredictorConfig c;
    c.trunk.widths = {2, 3};
    c.trunk.maps = 4;
    c.batch_size = 8;
    c.max_epochs = 3;
    c.patience = 2;
    c.optim.learning_rate = 0.01;
    return c;
}

// Returns the source record's codes unchanged.
class EchoSampler : public TransitionSampler {
public:
    std::vector<std::int32_t> sample(const PatientRecord& source, Rng&) const override { return source.codes(); }
};

SequenceMatrix random_sequence(std::size_t rows, std::size_t dim, Rng& rng) {
    SequenceMatrix s;
    s.data = Tensor({rows, dim});
    for (auto& v : s.data.values()) v = rng.normal();
    s.length = rows;
    return s;
}

}  // namespace

TEST_CASE("predictions are probabilities and independent of batch composition") {
    Rng rng(1);
    const auto cfg = small_config();
    PredictorModel m(cfg, 6, 7);
    std::vector<SequenceMatrix> data;
    for (std::size_t len : {3, 10, 25, 4, 3}) data.push_back(random_sequence(len, 6, rng));
    data.push_back(data[1]);
    const auto p = predict_proba(m, data);
    REQUIRE(p.size() == data.size());
    for (double v : p) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
    }
    CHECK(p[5] == p[1]);
    for (std::size_t i = 0; i < data.size(); ++i) CHECK(predict_proba(m, {data[i]})[0] == doctest::Approx(p[i]).epsilon(1e-12));

    Graph g;
    std::vector<const SequenceMatrix*> ptrs;
    for (const auto& s : data) ptrs.push_back(&s);
    const Tensor probs = nn::softmax(m.logits(g, Binding::frozen(m.params()), ptrs).value());
    for (std::size_t i = 0; i < data.size(); ++i) CHECK(probs.at(i, 0) + probs.at(i, 1) == doctest::Approx(1.0).epsilon(1e-14));
}

TEST_CASE("all-zero inputs of equal length share one prediction") {
    const auto cfg = small_config();
    PredictorModel m(cfg, 5, 2);
    SequenceMatrix z;
    z.data = Tensor({12, 5});
    const auto p = predict_proba(m, {z, z, z});
    CHECK(p[0] == p[1]);
    CHECK(p[1] == p[2]);
}

TEST_CASE("records shorter than the widest filter are padded to the trunk minimum") {
    Fixture f;
    auto cfg = small_config();
    cfg.trunk.widths = {3, 8};
    const std::vector<std::int32_t> codes{1, 2};
    const auto s = embed_codes_for_predictor(codes, f.table, cfg);
    CHECK(s.rows() == 8);
    CHECK(s.length == 3);
    const std::vector<std::int32_t> longer(400, 5);
    CHECK(embed_codes_for_predictor(longer, f.table, cfg).rows() == cfg.max_length);
}

TEST_CASE("gradient of the combined supervised and augmented loss") {
    Rng rng(4);
    auto cfg = small_config();
    cfg.trunk.maps = 3;
    PredictorModel m(cfg, 4, 9);
    std::vector<SequenceMatrix> xs;
    for (std::size_t len : {6, 9, 5, 7}) xs.push_back(random_sequence(len, 4, rng));
    const std::vector<const SequenceMatrix*> lab{&xs[0], &xs[1]}, aug{&xs[2], &xs[3]};
    const std::vector<int> ly{1, 0}, ay{0, 1};
    auto r = testing::check_gradients(m.params(), [&](Graph& g) {
        return ssl_objective(g, m, Binding::trainable(m.params()), lab, ly, aug, ay, 0.6).loss;
    });
    CHECK_MESSAGE(r.ok, r.worst_entry);
    CHECK(r.checked > 50);
}

TEST_CASE("combined loss equals supervised plus mu times augmented cross entropy") {
    Rng rng(6);
    const auto cfg = small_config();
    PredictorModel m(cfg, 4, 1);
    std::vector<SequenceMatrix> xs;
    for (std::size_t len : {6, 9, 5, 7, 8}) xs.push_back(random_sequence(len, 4, rng));
    const std::vector<const SequenceMatrix*> lab{&xs[0], &xs[1]}, aug{&xs[2], &xs[3], &xs[4]};
    const std::vector<int> ly{1, 0}, ay{0, 1, 1};
    const Binding p = Binding::frozen(m.params());
    auto xent = [&](const std::vector<const SequenceMatrix*>& b, const std::vector<int>& y) {
        Graph g;
        const Tensor pr = nn::softmax(m.logits(g, p, b).value());
        double s = 0;
        for (std::size_t i = 0; i < y.size(); ++i) s -= std::log(pr.at(i, static_cast<std::size_t>(y[i])));
        return s / static_cast<double>(y.size());
    };
    for (double mu : {0.0, 0.2, 1.4}) {
        Graph g;
        const double got = ssl_objective(g, m, p, lab, ly, aug, ay, mu).loss.value()[0];
        CHECK(got == doctest::Approx(xent(lab, ly) + mu * xent(aug, ay)).epsilon(1e-10));
    }
}

TEST_CASE("labeled/pool split is stratified and disjoint") {
    Fixture f;
    const auto& d = f.data;
    const auto train = f.cohort.in_split(Split::Train);
    CHECK(d.labeled.size() + d.pool.size() == train.size());
    std::size_t lab_cases = 0, train_cases = 0;
    for (const auto* r : d.labeled) lab_cases += r->label == Label::Case;
    for (const auto* r : train) train_cases += r->label == Label::Case;
    CHECK(std::abs(static_cast<double>(lab_cases) - 0.5 * static_cast<double>(train_cases)) <= 1.0);
    for (const auto* a : d.labeled)
        for (const auto* b : d.pool) CHECK(a != b);
    CHECK(d.validation.size() == f.cohort.in_split(Split::Val).size());
}

TEST_CASE("BASIC training is reproducible and restores the best epoch") {
    Fixture f;
    const auto cfg = small_config();
    const auto a = train_predictor(f.data, f.table, cfg, {});
    const auto b = train_predictor(f.data, f.table, cfg, {});
    CHECK(history_jsonl(a.history) == history_jsonl(b.history));
    CHECK(a.history.size() == 2 * a.epochs_run);
    CHECK(a.augmented_samples == 0);
    const auto pa = predict_proba(a.model, f.table, f.data.validation);
    CHECK(pa == predict_proba(b.model, f.table, f.data.validation));
    double best = 0;
    for (const auto& h : a.history)
        if (h.split == "val") best = std::max(best, h.auroc);
    CHECK(a.best_val_auroc == best);
    std::vector<int> y;
    for (const auto* r : f.data.validation) y.push_back(r->label == Label::Case);
    CHECK(auroc(pa, y) == doctest::Approx(a.best_val_auroc).epsilon(1e-12));
}

TEST_CASE("SSL_GAN with mu = 0 reproduces BASIC exactly") {
    Fixture f;
    const auto cfg = small_config();
    SslConfig ssl;
    ssl.mode = SslMode::SslGan;
    ssl.mu = 0;
    EchoSampler echo;
    const auto basic = train_predictor(f.data, f.table, cfg, {});
    const auto gan = train_predictor(f.data, f.table, cfg, ssl, &echo);
    CHECK(history_jsonl(basic.history) == history_jsonl(gan.history));
    CHECK(gan.augmented_samples == 0);
}

TEST_CASE("augmentation counts per mode") {
    Fixture f;
    auto cfg = small_config();
    cfg.max_epochs = 2;
    cfg.patience = 5;
    EchoSampler echo;
    SslConfig ssl;
    ssl.mode = SslMode::SslGan;
    ssl.multiplier = 2;
    const auto g = train_predictor(f.data, f.table, cfg, ssl, &echo);
    CHECK(g.augmented_samples == 2 * f.data.labeled.size() * g.epochs_run);

    ssl.fixed_augmentation = true;
    const auto fx = train_predictor(f.data, f.table, cfg, ssl, &echo);
    CHECK(fx.augmented_samples == g.augmented_samples);

    ssl.mode = SslMode::Rand;
    ssl.multiplier = 1;
    const auto r = train_predictor(f.data, f.table, cfg, ssl);
    CHECK(r.augmented_samples == f.data.labeled.size() * r.epochs_run);

    ssl.mode = SslMode::SslGan;
    CHECK_THROWS_AS(train_predictor(f.data, f.table, cfg, ssl), InvalidArgument);
    PredictorData no_pool = f.data;
    no_pool.pool.clear();
    ssl.mode = SslMode::Full;
    CHECK_THROWS_AS(train_predictor(no_pool, f.table, cfg, ssl), InvalidArgument);
}

TEST_CASE("training on the held-off pool with real labels uses more records") {
    Fixture f;
    auto cfg = small_config();
    cfg.max_epochs = 1;
    SslConfig ssl;
    ssl.mode = SslMode::Full;
    ssl.mu = 1.0;
    const auto full = train_predictor(f.data, f.table, cfg, ssl);
    const auto basic = train_predictor(f.data, f.table, cfg, {});
    CHECK(full.augmented_samples == 0);
    CHECK(history_jsonl(full.history) != history_jsonl(basic.history));
}

TEST_CASE("a trained predictor separates cases from controls") {
    Fixture f(5, 4);
    auto cfg = small_config();
    cfg.trunk.maps = 8;
    cfg.max_epochs = 15;
    cfg.patience = 5;
    const auto r = train_predictor(f.data, f.table, cfg, {});
    CHECK(r.best_val_auroc > 0.75);
}

TEST_CASE("predictor checkpoint round trip and embedding checks") {
    Fixture f;
    const auto cfg = small_config();
    const auto r = train_predictor(f.data, f.table, cfg, {});
    Checkpoint ck;
    export_predictor(r.model, ck);
    const auto back = import_predictor(decode_checkpoint(encode_checkpoint(ck)));
    CHECK(predict_proba(back, f.table, f.data.validation) == predict_proba(r.model, f.table, f.data.validation));
    CHECK(back.config().trunk.widths == cfg.trunk.widths);

    Tensor other = f.table.matrix();
    other[0] += 1;
    const EmbeddingTable changed(f.table.vocab_size(), other);
    CHECK_THROWS_AS(predict_proba(back, changed, f.data.validation), InvalidArgument);
    Checkpoint wrong;
    wrong.meta["kind"] = "gan";
    CHECK_THROWS_AS(import_predictor(wrong), InvalidArgument);
}

TEST_CASE("mode names parse case-insensitively") {
    CHECK(parse_ssl_mode("ssl-gan") == SslMode::SslGan);
    CHECK(parse_ssl_mode("Basic") == SslMode::Basic);
    CHECK(std::string(to_string(SslMode::Rand)) == "RAND");
    CHECK_THROWS_AS(parse_ssl_mode("semi"), InvalidArgument);
}
