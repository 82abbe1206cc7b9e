#include <pybind11/pybind11.h>
#include <pybind11/numpy.h>
#include <pybind11/stl.h>

#include "ehrgan/checkpoint.hpp"
#include "ehrgan/error.hpp"
#include "ehrgan/ops.hpp"
#include "ehrgan/pipeline.hpp"
#include "ehrgan/rng.hpp"

namespace py = pybind11;
using namespace ehrgan;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a) {
    Shape shape(a.shape(), a.shape() + a.ndim());
    return Tensor(shape, std::vector<Real>(a.data(), a.data() + a.size()));
}

Array to_array(const Tensor& t) {
    std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
    Array out(shape);
    std::copy(t.data(), t.data() + t.size(), out.mutable_data());
    return out;
}

Split split_arg(const std::string& s) { return s == "all" ? Split::Unassigned : parse_split(s); }

std::vector<const PatientRecord*> select(const Cohort& c, const std::string& split, const std::string& label) {
    auto records = split == "all" ? c.all() : c.in_split(split_arg(split));
    if (label.empty()) return records;
    const Label want = parse_label(label);
    std::erase_if(records, [&](const PatientRecord* r) { return r->label != want; });
    return records;
}

py::dict record_dict(const Cohort& c, std::size_t i) {
    const auto& r = c.records.at(i);
    py::dict d;
    d["id"] = r.id;
    d["label"] = to_string(r.label);
    d["split"] = i < c.splits.size() ? to_string(c.splits[i]) : "-";
    d["codes"] = r.codes();
    std::vector<std::uint32_t> windows;
    for (const auto& e : r.events) windows.push_back(e.window);
    d["windows"] = windows;
    return d;
}

py::dict fidelity_dict(const FidelityReport& r) {
    py::dict d;
    d["length_tv"] = r.lengths.tv_distance;
    d["length_edges"] = r.lengths.edges;
    d["length_original"] = r.lengths.original;
    d["length_generated"] = r.lengths.generated;
    d["freq_spearman"] = r.freq_spearman;
    d["freq_codes"] = r.freq_codes;
    d["freq_original"] = r.freq_original;
    d["freq_generated"] = r.freq_generated;
    d["cooc_correlation"] = r.cooc_correlation;
    d["cooc_codes"] = r.cooc_codes;
    return d;
}

struct Predictor {
    PredictorModel model;
};

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Sequence GAN for medical-event records and the CNN risk predictor it augments.";
    m.attr("__version__") = code_version();

    // translators run newest first, so the base goes in before its subclasses
    auto base = py::register_exception<Error>(m, "Error", PyExc_ValueError);
    py::register_exception<VersionMismatch>(m, "VersionMismatch", base.ptr());
    py::register_exception<ParseError>(m, "ParseError", base.ptr());
    py::register_exception<NonFiniteError>(m, "NonFiniteError", base.ptr());

    py::class_<RunConfig>(m, "Config")
        .def(py::init([](const std::string& text) { return parse_run_config(text); }), py::arg("text") = "")
        .def_static("load", &load_run_config, py::arg("path"))
        .def_property_readonly("seed", [](const RunConfig& c) { return c.seed; })
        .def("hash", &config_hash)
        .def("__str__", &format_run_config);

    py::class_<Cohort>(m, "Cohort")
        .def_static("parse", &parse_corpus, py::arg("text"))
        .def_static("load", &load_corpus, py::arg("path"))
        .def("save", [](const Cohort& c, const std::string& path) { save_corpus(path, c); }, py::arg("path"))
        .def("to_text", &format_corpus)
        .def_property_readonly("vocab_size", [](const Cohort& c) { return c.vocab.size(); })
        .def_property_readonly("spec_hash", [](const Cohort& c) { return c.spec_hash; })
        .def("count", [](const Cohort& c, const std::string& label) { return c.count(parse_label(label)); },
             py::arg("label"))
        .def("record", &record_dict, py::arg("index"))
        .def("lengths",
             [](const Cohort& c, const std::string& split) {
                 std::vector<std::size_t> out;
                 for (const auto* r : select(c, split, "")) out.push_back(r->events.size());
                 return out;
             },
             py::arg("split") = "all")
        .def("__len__", [](const Cohort& c) { return c.records.size(); });

    m.def("build_cohort", [](const RunConfig& c) { return build_cohort(c); }, py::arg("config"),
          "Generate the configured synthetic cohort with its train/val/test split.");

    py::class_<EmbeddingTable>(m, "Embedding")
        .def_static("load", &load_embedding, py::arg("path"))
        .def("save", [](const EmbeddingTable& t, const std::string& path) { save_embedding(path, t); }, py::arg("path"))
        .def_property_readonly("vocab_size", &EmbeddingTable::vocab_size)
        .def_property_readonly("dim", &EmbeddingTable::dim)
        .def_property_readonly("end_id", &EmbeddingTable::end_id)
        .def_property_readonly("matrix", [](const EmbeddingTable& t) { return to_array(t.matrix()); })
        .def("fingerprint", &EmbeddingTable::fingerprint)
        .def("nearest_code",
             [](const EmbeddingTable& t, const Array& row) {
                 const auto match = nearest_code(std::span<const Real>(row.data(), row.size()), t);
                 return py::make_tuple(match.code, match.score);
             },
             py::arg("row"))
        .def("embed",
             [](const EmbeddingTable& t, const std::vector<std::int32_t>& codes, std::size_t rows) {
                 return to_array(embed_codes(codes, t, rows).data);
             },
             py::arg("codes"), py::arg("rows"));

    m.def("train_embedding", [](const Cohort& c, const RunConfig& cfg) { return train_embedding(c, cfg.embedding); },
          py::arg("cohort"), py::arg("config"), py::call_guard<py::gil_scoped_release>());

    py::class_<GanModel>(m, "Gan")
        .def_static("load", [](const std::string& path) { return import_gan(read_checkpoint(path)); }, py::arg("path"))
        .def("save",
             [](const GanModel& g, const std::string& path) {
                 Checkpoint ck;
                 export_gan(g, ck);
                 write_checkpoint(path, ck);
             },
             py::arg("path"))
        .def_property_readonly("net_count", &GanModel::net_count)
        .def_property_readonly("seq_len", [](const GanModel& g) { return g.config().seq_len; })
        .def_property_readonly("z_dim", [](const GanModel& g) { return g.config().z_dim; })
        .def("net_index", [](const GanModel& g, const std::string& label) { return g.net_index(parse_label(label)); },
             py::arg("label"))
        .def("sample_transition",
             [](const GanModel& g, const Array& x, std::uint64_t seed, std::optional<Array> mask, std::size_t net) {
                 Rng rng(seed);
                 Tensor mask_t;
                 if (mask) mask_t = to_tensor(*mask);
                 const auto t = sample_transition(g, net, to_tensor(x), rng, mask ? &mask_t : nullptr);
                 py::dict d;
                 d["x_tilde"] = to_array(t.x_tilde);
                 d["x_bar"] = to_array(t.x_bar);
                 d["z"] = to_array(t.z);
                 d["mask"] = to_array(t.mask);
                 return d;
             },
             py::arg("x"), py::arg("seed"), py::arg("mask") = py::none(), py::arg("net") = 0)
        .def("generate",
             [](const GanModel& g, const EmbeddingTable& t, const Cohort& sources, const std::string& split,
                std::uint64_t seed, bool zero_mask) {
                 GenerateOptions opt;
                 opt.seed = seed;
                 opt.zero_mask = zero_mask;
                 return generate_corpus(g, t, sources.vocab, select(sources, split, ""), opt);
             },
             py::arg("embedding"), py::arg("sources"), py::arg("split") = "train", py::arg("seed") = 1,
             py::arg("zero_mask") = false);

    m.def(
        "train_gan",
        [](const Cohort& c, const EmbeddingTable& t, const RunConfig& cfg, const std::string& split,
           const std::string& label) {
            GanTrainResult res;
            {
                py::gil_scoped_release release;
                res = train_gan(select(c, split, label), t, cfg.gan);
            }
            py::list history;
            for (const auto& h : res.history) {
                py::dict d;
                d["iteration"] = h.iteration;
                d["net"] = h.net;
                d["loss_g"] = h.loss_g;
                d["loss_d"] = h.loss_d;
                d["mean_d_real"] = h.mean_d_real;
                d["mean_d_fake"] = h.mean_d_fake;
                history.append(d);
            }
            return py::make_tuple(std::move(res.model), history, res.stop_reasons);
        },
        py::arg("cohort"), py::arg("embedding"), py::arg("config"), py::arg("split") = "train", py::arg("label") = "",
        "Train the GAN on one split (optionally one label); returns (gan, history, stop_reasons).");

    py::class_<Predictor>(m, "Predictor")
        .def("predict",
             [](const Predictor& p, const EmbeddingTable& t, const Cohort& c, const std::string& split) {
                 return predict_proba(p.model, t, select(c, split, ""));
             },
             py::arg("embedding"), py::arg("cohort"), py::arg("split") = "test")
        .def("score",
             [](const Predictor& p, const EmbeddingTable& t, const Cohort& c, const std::string& split) {
                 const auto s = score_records(p.model, t, select(c, split, ""));
                 return py::make_tuple(s.auroc, s.accuracy);
             },
             py::arg("embedding"), py::arg("cohort"), py::arg("split") = "test");

    m.def(
        "train_predictor",
        [](const Cohort& c, const EmbeddingTable& t, const RunConfig& cfg, const GanModel* gan) {
            py::gil_scoped_release release;
            const auto data = make_predictor_data(c, cfg.eval.labeled_fraction, derive_seed(cfg.predictor.seed, "labeled"));
            std::unique_ptr<GanTransitionSampler> sampler;
            if (gan) sampler = std::make_unique<GanTransitionSampler>(*gan, t);
            auto res = train_predictor(data, t, cfg.predictor, cfg.ssl, sampler.get());
            return std::make_tuple(Predictor{std::move(res.model)}, res.best_epoch, res.best_val_auroc);
        },
        py::arg("cohort"), py::arg("embedding"), py::arg("config"), py::arg("gan") = nullptr,
        "Train on the labeled part of the train split; returns (predictor, best_epoch, best_val_auroc).");

    m.def(
        "fidelity",
        [](const Cohort& original, const Cohort& generated, const std::string& split, std::size_t top_k) {
            FidelityOptions opt;
            opt.top_k_freq = top_k;
            opt.top_k_cooc = top_k;
            return fidelity_dict(fidelity(select(original, split, ""), generated.all(), original.vocab, opt));
        },
        py::arg("original"), py::arg("generated"), py::arg("split") = "all", py::arg("top_k") = 20);

    m.def(
        "auroc", [](const std::vector<double>& s, const std::vector<int>& y) { return auroc(s, y); },
        py::arg("scores"), py::arg("labels"));
    m.def(
        "accuracy",
        [](const std::vector<double>& s, const std::vector<int>& y, double threshold) { return accuracy(s, y, threshold); },
        py::arg("scores"), py::arg("labels"), py::arg("threshold") = 0.5);

    m.def(
        "conv1d",
        [](const Array& x, const Array& k, const Array& b, std::size_t stride) {
            return to_array(conv1d(to_tensor(x), to_tensor(k), to_tensor(b), stride));
        },
        py::arg("x"), py::arg("kernel"), py::arg("bias"), py::arg("stride") = 1,
        "x [B,T,C], kernel [w,C,F], bias [F] -> [B,T',F].");
    m.def(
        "deconv1d",
        [](const Array& y, const Array& k, const Array& b, std::size_t stride) {
            return to_array(deconv1d(to_tensor(y), to_tensor(k), to_tensor(b), stride));
        },
        py::arg("y"), py::arg("kernel"), py::arg("bias"), py::arg("stride") = 1,
        "Transpose of conv1d: y [B,T',F], kernel [w,C,F], bias [C] -> [B,T,C].");
}
