#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string_view>
#include <string>
#include <vector>

#include "ehrgan/cohort.hpp"
#include "ehrgan/tensor.hpp"

namespace ehrgan {

/// Sentinel returned when decoding an all-zero (padding) row.
inline constexpr std::int32_t kPadCode = -1;

struct EmbeddingConfig {
    std::size_t dim = 200;
    std::size_t window = 5;
    std::size_t negatives = 5;
    std::size_t epochs = 5;
    double learning_rate = 0.025;
    std::uint64_t seed = 1;

    void validate() const;
};

/// Code vectors learned by skip-gram with negative sampling. Row V is the
/// learned END mark; padding is the zero vector and has no row.
class EmbeddingTable {
public:
    EmbeddingTable() = default;
    EmbeddingTable(std::size_t vocab_size, Tensor matrix);

    std::size_t vocab_size() const { return vocab_size_; }
    std::size_t rows() const { return vocab_size_ + 1; }
    std::size_t dim() const { return matrix_.empty() ? 0 : matrix_.dim(1); }
    std::int32_t end_id() const { return static_cast<std::int32_t>(vocab_size_); }
    const Tensor& matrix() const { return matrix_; }
    std::span<const Real> row(std::int32_t id) const;

    /// Free-form provenance (training settings, corpus hash, absent-code count).
    std::map<std::string, std::string> meta;

    /// Hash of the binary encoding; used to pin downstream artifacts.
    std::string fingerprint() const;

private:
    std::size_t vocab_size_ = 0;
    Tensor matrix_;  // [V+1, M]
};

struct EmbeddingReport {
    std::vector<double> epoch_loss;  // mean negative-sampling objective per epoch
    std::size_t absent_codes = 0;
};

/// Each record contributes the stream (codes in time order, END).
EmbeddingTable train_embedding(const Cohort& corpus, const EmbeddingConfig& cfg, EmbeddingReport* report = nullptr);

/// Embedded record: rows are code vectors, one END row, zero padding.
struct SequenceMatrix {
    Tensor data;             // [T, M]
    std::size_t length = 0;  // rows before padding, END included
    std::uint64_t patient_id = 0;
    Label label = Label::Control;

    std::size_t rows() const { return data.dim(0); }
};

/// Keeps the most recent target_rows-1 events, appends END, zero-pads to target_rows.
SequenceMatrix embed_record(const PatientRecord& record, const EmbeddingTable& table, std::size_t target_rows);
SequenceMatrix embed_codes(std::span<const std::int32_t> codes, const EmbeddingTable& table, std::size_t target_rows);

struct CodeMatch {
    std::int32_t code = kPadCode;  // END is table.end_id(), zero rows give kPadCode
    double score = 0;              // cosine similarity
};

/// Exhaustive cosine scan; ties go to the smallest id.
CodeMatch nearest_code(std::span<const Real> row, const EmbeddingTable& table);

/// Batched nearest-code decoding over precomputed unit rows.
class CodeDecoder {
public:
    explicit CodeDecoder(const EmbeddingTable& table);
    /// Decode each row of a [T, M] matrix.
    std::vector<CodeMatch> decode_rows(const Real* rows, std::size_t count) const;
    std::int32_t end_id() const { return end_id_; }

private:
    Tensor unit_;  // [V+1, M], zero rows stay zero
    std::size_t dim_ = 0;
    std::int32_t end_id_ = 0;
};

struct DecodedSequence {
    std::vector<std::int32_t> codes;  // up to (excluding) the first END
    bool saw_end = false;
};
/// Decode rows and cut at the first END; zero rows are skipped.
DecodedSequence decode_sequence(const Tensor& matrix, const CodeDecoder& decoder);

std::string encode_embedding(const EmbeddingTable& table);
EmbeddingTable decode_embedding(std::string_view bytes);
void save_embedding(const std::string& path, const EmbeddingTable& table);
EmbeddingTable load_embedding(const std::string& path);
/// One line per row: display name, tab, space-separated values.
std::string embedding_text(const EmbeddingTable& table, const Vocabulary& vocab);

}  // namespace ehrgan
