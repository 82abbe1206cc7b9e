#include "ehrgan/embedding.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <sstream>

#include "ehrgan/checkpoint.hpp"
#include "ehrgan/error.hpp"
#include "ehrgan/hash.hpp"
#include "ehrgan/rng.hpp"

namespace ehrgan {

void EmbeddingConfig::validate() const {
    if (dim == 0) throw InvalidArgument("embedding dimension must be positive");
    if (window == 0 || negatives == 0 || epochs == 0)
        throw InvalidArgument("embedding window, negatives and epochs must be positive");
    if (!(learning_rate > 0)) throw InvalidArgument("embedding learning rate must be positive");
}

EmbeddingTable::EmbeddingTable(std::size_t vocab_size, Tensor matrix) : vocab_size_(vocab_size), matrix_(std::move(matrix)) {
    if (matrix_.rank() != 2 || matrix_.dim(0) != vocab_size + 1)
        throw ShapeError("embedding matrix must be [V+1, M], got " + shape_string(matrix_.shape()) + " for V=" +
                         std::to_string(vocab_size));
    if (!matrix_.all_finite()) throw NonFiniteError("embedding matrix contains non-finite values");
}

std::span<const Real> EmbeddingTable::row(std::int32_t id) const {
    if (id < 0 || static_cast<std::size_t>(id) > vocab_size_)
        throw InvalidArgument("code " + std::to_string(id) + " has no embedding row");
    return {matrix_.data() + static_cast<std::size_t>(id) * dim(), dim()};
}

std::string EmbeddingTable::fingerprint() const { return content_hash(encode_embedding(*this)); }

namespace {

double sigmoid(double x) {
    if (x > 30) return 1;
    if (x < -30) return 0;
    return 1 / (1 + std::exp(-x));
}

}  // namespace

EmbeddingTable train_embedding(const Cohort& corpus, const EmbeddingConfig& cfg, EmbeddingReport* report) {
    cfg.validate();
    if (corpus.records.empty()) throw InvalidArgument("cannot train an embedding on an empty corpus");
    const std::size_t V = corpus.vocab.size(), rows = V + 1, M = cfg.dim;
    const auto end = static_cast<std::int32_t>(V);

    std::vector<std::vector<std::int32_t>> streams;
    std::vector<double> counts(rows, 0);
    std::size_t total_tokens = 0;
    for (const auto& r : corpus.records) {
        auto s = r.codes();
        s.push_back(end);
        for (auto c : s) counts[static_cast<std::size_t>(c)] += 1;
        total_tokens += s.size();
        streams.push_back(std::move(s));
    }

    // unigram^(3/4) negative-sampling distribution
    std::vector<double> cum(rows);
    double acc = 0;
    for (std::size_t i = 0; i < rows; ++i) {
        acc += std::pow(counts[i], 0.75);
        cum[i] = acc;
    }

    Rng rng(cfg.seed);
    Tensor in({rows, M});
    for (auto& v : in.values()) v = (rng.uniform() - 0.5) / static_cast<double>(M);
    std::vector<double> out(rows * M, 0.0);
    std::vector<double> grad(M);

    EmbeddingReport rep;
    rep.absent_codes = static_cast<std::size_t>(std::count(counts.begin(), counts.begin() + static_cast<std::ptrdiff_t>(V), 0.0));

    const double total_work = static_cast<double>(total_tokens * cfg.epochs);
    double done = 0;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        double loss_sum = 0;
        std::size_t pairs = 0;
        for (const auto& s : streams) {
            const auto n = static_cast<std::ptrdiff_t>(s.size());
            for (std::ptrdiff_t i = 0; i < n; ++i) {
                const double lr = std::max(cfg.learning_rate * (1 - done / total_work), cfg.learning_rate * 1e-4);
                done += 1;
                const auto reach = static_cast<std::ptrdiff_t>(1 + rng.index(cfg.window));
                for (std::ptrdiff_t j = std::max<std::ptrdiff_t>(0, i - reach); j <= std::min(n - 1, i + reach); ++j) {
                    if (j == i) continue;
                    Real* u = in.data() + static_cast<std::size_t>(s[j]) * M;
                    std::fill(grad.begin(), grad.end(), 0.0);
                    for (std::size_t k = 0; k <= cfg.negatives; ++k) {
                        std::size_t target;
                        double label;
                        if (k == 0) {
                            target = static_cast<std::size_t>(s[i]);
                            label = 1;
                        } else {
                            const double r = rng.uniform() * cum.back();
                            target = static_cast<std::size_t>(std::upper_bound(cum.begin(), cum.end(), r) - cum.begin());
                            target = std::min(target, rows - 1);
                            if (target == static_cast<std::size_t>(s[i])) continue;
                            label = 0;
                        }
                        double* o = out.data() + target * M;
                        double f = 0;
                        for (std::size_t m = 0; m < M; ++m) f += u[m] * o[m];
                        const double p = sigmoid(f);
                        loss_sum -= label ? std::log(std::max(p, 1e-12)) : std::log(std::max(1 - p, 1e-12));
                        const double gcoef = (label - p) * lr;
                        for (std::size_t m = 0; m < M; ++m) {
                            grad[m] += gcoef * o[m];
                            o[m] += gcoef * u[m];
                        }
                    }
                    for (std::size_t m = 0; m < M; ++m) u[m] += grad[m];
                    ++pairs;
                }
            }
        }
        rep.epoch_loss.push_back(pairs ? loss_sum / static_cast<double>(pairs) : 0.0);
    }

    EmbeddingTable table(V, std::move(in));
    table.meta["dim"] = std::to_string(M);
    table.meta["window"] = std::to_string(cfg.window);
    table.meta["negatives"] = std::to_string(cfg.negatives);
    table.meta["epochs"] = std::to_string(cfg.epochs);
    table.meta["seed"] = std::to_string(cfg.seed);
    table.meta["absent_codes"] = std::to_string(rep.absent_codes);
    table.meta["corpus_hash"] = content_hash(format_corpus(corpus));
    if (report) *report = std::move(rep);
    return table;
}

SequenceMatrix embed_codes(std::span<const std::int32_t> codes, const EmbeddingTable& table, std::size_t target_rows) {
    if (target_rows == 0) throw InvalidArgument("target row count must be positive");
    const std::size_t M = table.dim();
    const std::size_t keep = std::min(codes.size(), target_rows - 1);
    const std::size_t first = codes.size() - keep;
    SequenceMatrix sm;
    sm.data = Tensor({target_rows, M});
    for (std::size_t t = 0; t < keep; ++t) {
        const auto c = codes[first + t];
        if (c < 0 || static_cast<std::size_t>(c) >= table.vocab_size())
            throw InvalidArgument("code " + std::to_string(c) + " is not in the embedding vocabulary");
        auto r = table.row(c);
        std::copy(r.begin(), r.end(), sm.data.data() + t * M);
    }
    auto e = table.row(table.end_id());
    std::copy(e.begin(), e.end(), sm.data.data() + keep * M);
    sm.length = keep + 1;
    return sm;
}

SequenceMatrix embed_record(const PatientRecord& record, const EmbeddingTable& table, std::size_t target_rows) {
    const auto codes = record.codes();
    SequenceMatrix sm = embed_codes(codes, table, target_rows);
    sm.patient_id = record.id;
    sm.label = record.label;
    return sm;
}

namespace {

double norm(std::span<const Real> v) {
    double s = 0;
    for (auto x : v) s += x * x;
    return std::sqrt(s);
}

}  // namespace

CodeMatch nearest_code(std::span<const Real> row, const EmbeddingTable& table) {
    if (row.size() != table.dim())
        throw ShapeError("query row has " + std::to_string(row.size()) + " entries, table dimension is " +
                         std::to_string(table.dim()));
    const double qn = norm(row);
    if (qn == 0) return {kPadCode, 0};
    CodeMatch best{kPadCode, -2};
    for (std::size_t id = 0; id < table.rows(); ++id) {
        auto r = table.row(static_cast<std::int32_t>(id));
        const double rn = norm(r);
        double s = 0;
        if (rn > 0) {
            for (std::size_t m = 0; m < r.size(); ++m) s += row[m] * r[m];
            s /= qn * rn;
        }
        if (s > best.score) best = {static_cast<std::int32_t>(id), s};
    }
    best.score = std::clamp(best.score, -1.0, 1.0);
    return best;
}

CodeDecoder::CodeDecoder(const EmbeddingTable& table)
    : unit_(table.matrix()), dim_(table.dim()), end_id_(table.end_id()) {
    for (std::size_t i = 0; i < table.rows(); ++i) {
        Real* r = unit_.data() + i * dim_;
        double n = 0;
        for (std::size_t m = 0; m < dim_; ++m) n += r[m] * r[m];
        n = std::sqrt(n);
        if (n > 0)
            for (std::size_t m = 0; m < dim_; ++m) r[m] /= n;
    }
}

std::vector<CodeMatch> CodeDecoder::decode_rows(const Real* rows, std::size_t count) const {
    using RowMat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    const auto V1 = static_cast<Eigen::Index>(unit_.dim(0)), M = static_cast<Eigen::Index>(dim_);
    Eigen::Map<const RowMat> q(rows, static_cast<Eigen::Index>(count), M);
    Eigen::Map<const RowMat> u(unit_.data(), V1, M);
    RowMat scores = q * u.transpose();
    std::vector<CodeMatch> out(count);
    for (std::size_t t = 0; t < count; ++t) {
        const double qn = q.row(static_cast<Eigen::Index>(t)).norm();
        if (qn == 0) continue;
        const Real* s = scores.data() + t * static_cast<std::size_t>(V1);
        std::size_t best = 0;
        for (std::size_t i = 1; i < static_cast<std::size_t>(V1); ++i)
            if (s[i] > s[best]) best = i;
        out[t] = {static_cast<std::int32_t>(best), std::clamp(s[best] / qn, -1.0, 1.0)};
    }
    return out;
}

DecodedSequence decode_sequence(const Tensor& matrix, const CodeDecoder& decoder) {
    if (matrix.rank() != 2) throw ShapeError("decode_sequence expects a [T, M] matrix");
    constexpr std::size_t kChunk = 16;
    DecodedSequence d;
    const std::size_t T = matrix.dim(0), M = matrix.dim(1);
    for (std::size_t start = 0; start < T; start += kChunk) {
        for (const auto& m : decoder.decode_rows(matrix.data() + start * M, std::min(kChunk, T - start))) {
            if (m.code == decoder.end_id()) {
                d.saw_end = true;
                return d;
            }
            if (m.code != kPadCode) d.codes.push_back(m.code);
        }
    }
    return d;
}

namespace {
constexpr std::string_view kEmbMagic = "EHRGEMBD";
constexpr std::uint32_t kEmbVersion = 1;
}  // namespace

std::string encode_embedding(const EmbeddingTable& table) {
    std::string out(kEmbMagic);
    bin::put_u32(out, kEmbVersion);
    bin::put_u64(out, table.rows());
    bin::put_u64(out, table.dim());
    bin::put_u32(out, static_cast<std::uint32_t>(table.meta.size()));
    for (const auto& [k, v] : table.meta) {
        bin::put_str(out, k);
        bin::put_str(out, v);
    }
    for (Real v : table.matrix().values()) bin::put_f64(out, v);
    return out;
}

EmbeddingTable decode_embedding(std::string_view bytes) {
    bin::Reader r(bytes);
    if (r.raw(kEmbMagic.size()) != kEmbMagic) throw ParseError("not an embedding file (bad magic)");
    const auto version = r.u32();
    if (version != kEmbVersion) throw VersionMismatch("embedding format version " + std::to_string(version) + " is not supported");
    const auto rows = r.u64(), dim = r.u64();
    if (rows < 1 || dim < 1 || rows * dim * 8 > bytes.size()) throw ParseError("embedding header has invalid extents");
    std::map<std::string, std::string> meta;
    const auto n_meta = r.u32();
    for (std::uint32_t i = 0; i < n_meta; ++i) {
        auto k = r.str();
        meta[k] = r.str();
    }
    std::vector<Real> data(rows * dim);
    for (auto& v : data) v = r.f64();
    if (!r.done()) throw ParseError("trailing bytes after embedding rows");
    EmbeddingTable t(rows - 1, Tensor({rows, dim}, std::move(data)));
    t.meta = std::move(meta);
    return t;
}

void save_embedding(const std::string& path, const EmbeddingTable& table) { write_file(path, encode_embedding(table)); }

EmbeddingTable load_embedding(const std::string& path) { return decode_embedding(read_file(path)); }

std::string embedding_text(const EmbeddingTable& table, const Vocabulary& vocab) {
    std::ostringstream os;
    os.precision(17);
    for (std::size_t i = 0; i < table.rows(); ++i) {
        os << (i < table.vocab_size() ? vocab.code(static_cast<std::int32_t>(i)).display : std::string("<END>")) << '\t';
        auto r = table.row(static_cast<std::int32_t>(i));
        for (std::size_t m = 0; m < r.size(); ++m) os << (m ? " " : "") << r[m];
        os << '\n';
    }
    return os.str();
}

}  // namespace ehrgan
