#include <string>

#include "doctest.h"
#include "ehrgan/config.hpp"
#include "ehrgan/error.hpp"
#include "ehrgan/rng.hpp"

using namespace ehrgan;

TEST_CASE("resolved config text round-trips with the same hash") {
    const auto c = parse_run_config(R"(
# desk-scale run
seed = 9
embedding.dim = 32
gan.trunk.widths = 3, 4
gan.rho = 0.2
ssl.mode = ssl_gan
sweep.mu = 0.2, 0.6
)");
    CHECK(c.embedding.dim == 32);
    CHECK(c.gan.trunk.widths == std::vector<std::size_t>{3, 4});
    CHECK(c.ssl.mode == SslMode::SslGan);
    CHECK(c.sweep.mu == std::vector<double>{0.2, 0.6});
    const auto text = format_run_config(c);
    CHECK(text.find("gan.trunk.maps = 100") != std::string::npos);
    CHECK(text.find("gan.optim.learning_rate = 0.001") != std::string::npos);
    CHECK(text.find("cohort.vocab_size = 2000") != std::string::npos);
    const auto back = parse_run_config(text);
    CHECK(format_run_config(back) == text);
    CHECK(config_hash(back) == config_hash(c));
    auto changed = c;
    changed.gan.rho = 0.3;
    CHECK(config_hash(changed) != config_hash(c));
}

TEST_CASE("component seeds derive from the root seed unless set explicitly") {
    const auto a = parse_run_config("seed = 3\n");
    CHECK(a.cohort.seed == derive_seed(3, "cohort"));
    CHECK(a.embedding.seed == derive_seed(3, "embedding"));
    CHECK(a.gan.seed == derive_seed(3, "gan"));
    CHECK(a.predictor.seed == derive_seed(3, "predictor"));
    const auto b = parse_run_config("gan.seed = 77\nseed = 3\n");
    CHECK(b.gan.seed == 77);
    CHECK(b.cohort.seed == a.cohort.seed);
    CHECK(parse_run_config("seed = 4\n").cohort.seed != a.cohort.seed);
}

TEST_CASE("parse errors name the offending line") {
    auto line_of = [](const std::string& text) {
        try {
            parse_run_config(text);
        } catch (const ParseError& e) {
            return e.line();
        }
        return std::size_t{0};
    };
    CHECK(line_of("seed = 1\n\n# note\ngan.rhoo = 0.1\n") == 4);
    CHECK(line_of("gan.rho = abc\n") == 1);
    CHECK(line_of("seed = 1\njust words\n") == 2);
    CHECK(line_of("gan.per_class = maybe\n") == 1);
    CHECK(line_of("ssl.mode = SEMI\n") == 1);
    CHECK(line_of("predictor.batch_size = -3\n") == 1);
}

TEST_CASE("resolved values are validated") {
    CHECK_THROWS_AS(parse_run_config("gan.rho = 2\n"), InvalidArgument);
    CHECK_THROWS_AS(parse_run_config("predictor.max_length = 2\n"), InvalidArgument);
    CHECK_THROWS_AS(parse_run_config("eval.labeled_fraction = 0\n"), InvalidArgument);
    CHECK_NOTHROW(parse_run_config(""));
}

TEST_CASE("struct fields echo to entries and back") {
    GanConfig g;
    g.trunk.maps = 7;
    g.optim.clip_norm = 2.5;
    g.per_class = false;
    const auto e = config_entries(g, "gan.");
    CHECK(e.at("gan.trunk.maps") == "7");
    const auto back = config_from_entries<GanConfig>(e, "gan.");
    CHECK(back.trunk.maps == 7);
    CHECK(back.optim.clip_norm == 2.5);
    CHECK_FALSE(back.per_class);
    CHECK(format_real(0.1) == "0.1");
    for (double v : {1e-4, 0.3, 1.0 / 3, 2.5e10}) CHECK(std::stod(format_real(v)) == v);
}
