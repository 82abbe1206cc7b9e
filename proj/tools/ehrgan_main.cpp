#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "ehrgan/checkpoint.hpp"
#include "ehrgan/config.hpp"
#include "ehrgan/error.hpp"
#include "ehrgan/hash.hpp"
#include "ehrgan/pipeline.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using namespace ehrgan;
using json = nlohmann::ordered_json;

namespace {

struct Common {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::string out = ".";
};

struct Inputs {
    std::string corpus, embedding, gan, predictor;
    std::string split = "test";
};

RunConfig resolve_config(const Common& c) {
    std::string text;
    if (!c.config_path.empty()) {
        if (!fs::exists(c.config_path)) throw InvalidArgument("config file not found: " + c.config_path);
        text = read_file(c.config_path);
    }
    if (c.seed) text += "\nseed = " + std::to_string(*c.seed) + "\n";
    try {
        return parse_run_config(text);
    } catch (const ParseError& e) {
        throw ParseError(std::string(c.config_path.empty() ? "--seed" : c.config_path) + ": " + e.what());
    }
}

fs::path prepare_out(const Common& c, const RunConfig& cfg, const std::string& command) {
    fs::path dir(c.out);
    fs::create_directories(dir);
    write_file((dir / (command + ".config.txt")).string(), format_run_config(cfg));
    return dir;
}

// Every artifact gets "<file>.meta.json": producer, config hash, code version, own hash, input hashes.
void write_artifact(const fs::path& path, std::string_view bytes, const std::string& kind, const RunConfig& cfg,
                    const json& inputs) {
    write_file(path.string(), bytes);
    json m;
    m["artifact"] = kind;
    m["code_version"] = code_version();
    m["config_hash"] = config_hash(cfg);
    m["content_hash"] = content_hash(bytes);
    m["inputs"] = inputs.is_null() ? json::object() : inputs;
    write_file(path.string() + ".meta.json", m.dump(2) + "\n");
}

struct Artifact {
    std::string bytes;
    json meta;
    std::string hash() const { return meta["content_hash"].get<std::string>(); }
};

Artifact read_artifact(const std::string& path, const std::string& kind, const std::string& flag) {
    if (path.empty()) throw InvalidArgument("missing required input " + flag);
    if (!fs::exists(path)) throw InvalidArgument(flag + ": file not found: " + path);
    const std::string meta_path = path + ".meta.json";
    if (!fs::exists(meta_path))
        throw VersionMismatch(path + " has no " + meta_path + " sidecar; regenerate it with the ehrgan tool");
    Artifact a;
    a.bytes = read_file(path);
    try {
        a.meta = json::parse(read_file(meta_path));
    } catch (const json::exception& e) {
        throw ParseError(meta_path + ": " + e.what());
    }
    if (a.meta.value("artifact", "") != kind)
        throw VersionMismatch(path + " is a '" + a.meta.value("artifact", "?") + "' artifact, expected '" + kind + "'");
    if (a.meta.value("code_version", "") != code_version())
        throw VersionMismatch(path + " was produced by ehrgan " + a.meta.value("code_version", "?") + ", this is " +
                              code_version() + "; regenerate it");
    if (a.meta.value("content_hash", "") != content_hash(a.bytes))
        throw VersionMismatch(path + " does not match the hash recorded in its sidecar; it was modified after creation");
    return a;
}

void require_input(const Artifact& a, const std::string& name, const Artifact& dep, const std::string& what) {
    const auto& inputs = a.meta["inputs"];
    if (!inputs.contains(name) || inputs[name].get<std::string>() != dep.hash())
        throw VersionMismatch(what + " was not produced from the given " + name + "; pass the " + name +
                              " it was trained on");
}

struct Loaded {
    Artifact corpus_file, embedding_file;
    Cohort cohort;
    EmbeddingTable table;
};

Loaded load_corpus_and_embedding(const Inputs& in) {
    Loaded l;
    l.corpus_file = read_artifact(in.corpus, "corpus", "--corpus");
    l.cohort = parse_corpus(l.corpus_file.bytes);
    l.embedding_file = read_artifact(in.embedding, "embedding", "--embedding");
    require_input(l.embedding_file, "corpus", l.corpus_file, "embedding " + in.embedding);
    l.table = decode_embedding(l.embedding_file.bytes);
    return l;
}

Split parse_split_name(const std::string& s) {
    if (s == "train") return Split::Train;
    if (s == "val") return Split::Val;
    if (s == "test") return Split::Test;
    throw InvalidArgument("--split must be train, val or test, got '" + s + "'");
}

std::size_t thread_count() {
    const char* env = std::getenv("EHRGAN_THREADS");
    if (!env || !*env) return 1;
    try {
        const auto n = std::stoul(env);
        if (n == 0) throw std::invalid_argument("zero");
        return n;
    } catch (const std::exception&) {
        throw InvalidArgument(std::string("EHRGAN_THREADS must be a positive integer, got '") + env + "'");
    }
}

void say(const std::string& s) { std::cerr << s << "\n"; }

int cmd_gen_cohort(const Common& c) {
    const auto cfg = resolve_config(c);
    const auto dir = prepare_out(c, cfg, "gen-cohort");
    GenerationStats st;
    const Cohort cohort = build_cohort(cfg, &st);
    write_artifact(dir / "corpus.tsv", format_corpus(cohort), "corpus", cfg, json::object());
    write_file((dir / "corpus.stats.txt").string(), st.to_text());
    say("wrote " + (dir / "corpus.tsv").string() + " (" + std::to_string(cohort.records.size()) + " records)");
    return 0;
}

int cmd_train_embedding(const Common& c, const Inputs& in) {
    const auto cfg = resolve_config(c);
    const auto corpus = read_artifact(in.corpus, "corpus", "--corpus");
    const Cohort cohort = parse_corpus(corpus.bytes);
    const auto dir = prepare_out(c, cfg, "train-embedding");
    EmbeddingReport rep;
    const auto table = train_embedding(cohort, cfg.embedding, &rep);
    write_artifact(dir / "embedding.bin", encode_embedding(table), "embedding", cfg, json{{"corpus", corpus.hash()}});
    write_file((dir / "embedding.txt").string(), embedding_text(table, cohort.vocab));
    std::string stats = "absent_codes=" + std::to_string(rep.absent_codes) + "\n";
    for (std::size_t e = 0; e < rep.epoch_loss.size(); ++e)
        stats += "epoch " + std::to_string(e + 1) + " loss=" + format_real(rep.epoch_loss[e]) + "\n";
    write_file((dir / "embedding.stats.txt").string(), stats);
    say("wrote " + (dir / "embedding.bin").string());
    return 0;
}

int cmd_train_gan(const Common& c, const Inputs& in) {
    const auto cfg = resolve_config(c);
    const auto l = load_corpus_and_embedding(in);
    const auto dir = prepare_out(c, cfg, "train-gan");
    const auto records = l.cohort.in_split(Split::Train);
    const auto res = train_gan(records, l.table, cfg.gan, (dir / "gan.abort.ckpt").string());
    Checkpoint ck;
    export_gan(res.model, ck);
    write_artifact(dir / "gan.ckpt", encode_checkpoint(ck), "gan", cfg,
                   json{{"corpus", l.corpus_file.hash()}, {"embedding", l.embedding_file.hash()}});
    write_file((dir / "gan.history.jsonl").string(), gan_history_jsonl(res.history));
    std::string stats;
    for (std::size_t i = 0; i < res.stop_reasons.size(); ++i)
        stats += "net " + std::to_string(i) + ": " + res.stop_reasons[i] + "\n";
    write_file((dir / "gan.stats.txt").string(), stats);
    say("wrote " + (dir / "gan.ckpt").string());
    return 0;
}

int cmd_sample(const Common& c, const Inputs& in) {
    const auto cfg = resolve_config(c);
    const auto l = load_corpus_and_embedding(in);
    const auto gan_file = read_artifact(in.gan, "gan", "--gan");
    require_input(gan_file, "embedding", l.embedding_file, "GAN " + in.gan);
    const GanModel model = import_gan(decode_checkpoint(gan_file.bytes));
    const auto dir = prepare_out(c, cfg, "sample");
    const auto sources = l.cohort.in_split(parse_split_name(in.split));
    GenerateOptions opt;
    opt.samples_per_source = cfg.eval.samples_per_source;
    opt.seed = derive_seed(cfg.gan.seed, "sample");
    GenerateStats st;
    const Cohort generated = generate_corpus(model, l.table, l.cohort.vocab, sources, opt, &st);
    write_artifact(dir / "generated.tsv", format_corpus(generated), "corpus", cfg,
                   json{{"gan", gan_file.hash()}, {"corpus", l.corpus_file.hash()}});
    write_file((dir / "sample.stats.txt").string(), st.to_text());
    if (!generated.records.empty()) {
        FidelityOptions fo;
        fo.top_k_freq = cfg.eval.top_k_freq;
        fo.top_k_cooc = cfg.eval.top_k_cooc;
        write_file((dir / "fidelity.txt").string(), fidelity(sources, generated.all(), l.cohort.vocab, fo).to_text());
    }
    say("wrote " + (dir / "generated.tsv").string() + " (" + std::to_string(st.generated) + " records)");
    return 0;
}

int cmd_train_predictor(const Common& c, const Inputs& in) {
    const auto cfg = resolve_config(c);
    const auto l = load_corpus_and_embedding(in);
    std::optional<Artifact> gan_file;
    std::optional<GanModel> model;
    std::unique_ptr<GanTransitionSampler> sampler;
    if (cfg.ssl.mode == SslMode::SslGan) {
        gan_file = read_artifact(in.gan, "gan", "--gan");
        require_input(*gan_file, "embedding", l.embedding_file, "GAN " + in.gan);
        model = import_gan(decode_checkpoint(gan_file->bytes));
        sampler = std::make_unique<GanTransitionSampler>(*model, l.table);
    }
    const auto dir = prepare_out(c, cfg, "train-predictor");
    const auto data = make_predictor_data(l.cohort, cfg.eval.labeled_fraction, derive_seed(cfg.predictor.seed, "labeled"));
    const auto res = train_predictor(data, l.table, cfg.predictor, cfg.ssl, sampler.get());
    Checkpoint ck;
    export_predictor(res.model, ck);
    json inputs{{"corpus", l.corpus_file.hash()}, {"embedding", l.embedding_file.hash()}};
    if (gan_file) inputs["gan"] = gan_file->hash();
    write_artifact(dir / "predictor.ckpt", encode_checkpoint(ck), "predictor", cfg, inputs);
    write_file((dir / "predictor.history.jsonl").string(), history_jsonl(res.history));
    write_file((dir / "predictor.stats.txt").string(),
               "best_epoch=" + std::to_string(res.best_epoch) + "\nbest_val_auroc=" + format_real(res.best_val_auroc) +
                   "\nepochs_run=" + std::to_string(res.epochs_run) +
                   "\naugmented_samples=" + std::to_string(res.augmented_samples) + "\n");
    say("wrote " + (dir / "predictor.ckpt").string() + " (best val AUROC " + format_real(res.best_val_auroc) + ")");
    return 0;
}

int cmd_evaluate(const Common& c, const Inputs& in) {
    const auto cfg = resolve_config(c);
    const auto l = load_corpus_and_embedding(in);
    const auto pred_file = read_artifact(in.predictor, "predictor", "--predictor");
    require_input(pred_file, "corpus", l.corpus_file, "predictor " + in.predictor);
    require_input(pred_file, "embedding", l.embedding_file, "predictor " + in.predictor);
    const auto model = import_predictor(decode_checkpoint(pred_file.bytes));
    const auto dir = prepare_out(c, cfg, "evaluate");
    const auto records = l.cohort.in_split(parse_split_name(in.split));
    const Score s = score_records(model, l.table, records);
    json j;
    j["split"] = in.split;
    j["records"] = records.size();
    j["auroc"] = s.auroc;
    j["accuracy"] = s.accuracy;
    j["predictor_config_hash"] = pred_file.meta["config_hash"];
    write_file((dir / ("evaluate." + in.split + ".json")).string(), j.dump(2) + "\n");
    std::cout << j.dump() << "\n";
    return 0;
}

int cmd_sweep(const Common& c, const Inputs& in) {
    const auto cfg = resolve_config(c);
    const auto l = load_corpus_and_embedding(in);
    const auto dir = prepare_out(c, cfg, "sweep");
    const auto cells = sweep_cells(cfg);
    SweepOptions opt;
    opt.threads = thread_count();
    opt.log = say;
    const auto runs = run_sweep(cfg, l.cohort, l.table, cells, opt);
    std::string lines;
    for (const auto& r : runs) {
        json j;
        j["group"] = r.group;
        j["replicate"] = r.seed;
        for (const auto& [k, v] : r.metrics) j[k] = v;
        lines += j.dump() + "\n";
    }
    const auto rows = compare_runs(runs);
    write_artifact(dir / "sweep.runs.jsonl", lines, "sweep", cfg,
                   json{{"corpus", l.corpus_file.hash()}, {"embedding", l.embedding_file.hash()}});
    write_file((dir / "sweep.summary.jsonl").string(), format_jsonl(rows));
    const auto table = format_table(rows);
    write_file((dir / "sweep.table.txt").string(), table);
    std::cout << table;
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Synthetic EHR cohorts, embeddings, transition GANs and augmented risk predictors"};
    app.require_subcommand(1);
    app.set_version_flag("--version", std::string(code_version()));
    Common common;
    Inputs in;
    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", common.config_path, "Config file (section.key = value lines)");
        sub->add_option("--seed", common.seed, "Root seed, overrides the config");
        sub->add_option("--out", common.out, "Output directory")->capture_default_str();
    };
    auto* gen = app.add_subcommand("gen-cohort", "Generate a synthetic case/control corpus with splits");
    add_common(gen);
    auto* emb = app.add_subcommand("train-embedding", "Train code embeddings on a corpus");
    add_common(emb);
    emb->add_option("--corpus", in.corpus, "Corpus file")->required();
    auto* gan = app.add_subcommand("train-gan", "Train transition GANs on the training split");
    add_common(gan);
    auto* smp = app.add_subcommand("sample", "Generate a corpus from a trained GAN and report fidelity");
    add_common(smp);
    smp->add_option("--gan", in.gan, "GAN checkpoint")->required();
    smp->add_option("--split", in.split, "Source split (train, val, test)")->capture_default_str();
    auto* prd = app.add_subcommand("train-predictor", "Train a risk predictor (mode from ssl.mode)");
    add_common(prd);
    prd->add_option("--gan", in.gan, "GAN checkpoint (SSL_GAN mode)");
    auto* evl = app.add_subcommand("evaluate", "Score a predictor on a split");
    add_common(evl);
    evl->add_option("--predictor", in.predictor, "Predictor checkpoint")->required();
    evl->add_option("--split", in.split, "Split to score (train, val, test)")->capture_default_str();
    auto* swp = app.add_subcommand("sweep", "Run mode/rho/mu/full grids over seeds and tabulate");
    add_common(swp);
    for (auto* sub : {gan, smp, prd, evl, swp}) {
        sub->add_option("--corpus", in.corpus, "Corpus file")->required();
        sub->add_option("--embedding", in.embedding, "Embedding file")->required();
    }

    CLI11_PARSE(app, argc, argv);
    try {
        if (*gen) return cmd_gen_cohort(common);
        if (*emb) return cmd_train_embedding(common, in);
        if (*gan) return cmd_train_gan(common, in);
        if (*smp) return cmd_sample(common, in);
        if (*prd) return cmd_train_predictor(common, in);
        if (*evl) return cmd_evaluate(common, in);
        if (*swp) return cmd_sweep(common, in);
    } catch (const VersionMismatch& e) {
        std::cerr << "error: version mismatch: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 1;
}
