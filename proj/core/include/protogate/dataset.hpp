#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "protogate/common.hpp"

namespace protogate {

struct ModalityDims {
    int depth = 0;
    int height = 0;
    int width = 0;
    bool operator==(const ModalityDims&) const = default;
};

/// Header mirrored by the sidecar JSON manifest.
struct DatasetManifest {
    uint32_t version = 1;
    int class_count = 0;  // K
    std::vector<std::string> class_names;
    int64_t sample_count = 0;
    ModalityDims image_dims;
    ModalityDims genetic_dims;  // zero dims when no sample carries genetics
};

struct Sample {
    int64_t id = 0;
    int label = 0;
    EmbeddingMap image;
    std::optional<EmbeddingMap> genetic;
};

struct Dataset {
    DatasetManifest manifest;
    std::vector<Sample> samples;
};

/// Train / validation(=calibration) / test position lists over a dataset,
/// plus the dense class renumbering produced by the minimum-count filter.
struct SplitSpec {
    std::vector<int64_t> train;
    std::vector<int64_t> validation;  // doubles as the calibration set
    std::vector<int64_t> test;
    uint64_t seed = 0;
    std::vector<int> class_remap;  // old label -> new label, -1 = dropped
    int class_count_after = 0;
};

/// Stratified per-class split. Classes with fewer than min_per_class samples
/// are dropped and the surviving classes renumbered densely; each retained
/// class is divided per `ratios` with largest-remainder rounding, so per-class
/// counts stay within one sample of the target. Deterministic per seed.
SplitSpec make_splits(const std::vector<int>& labels, const std::array<double, 3>& ratios,
                      int min_per_class, uint64_t seed);

/// Epoch index multiset over the given (train) labels: every class appears
/// exactly max-class-count times, majority classes as a permutation of their
/// own indices, minority classes as uniform with-replacement draws. The
/// combined list is shuffled. Deterministic per seed.
std::vector<int64_t> oversample_indices(const std::vector<int>& labels, uint64_t seed);

/// Materializes the retained samples with remapped labels and a refreshed
/// manifest; returned position lists index into the filtered dataset.
struct FilteredDataset {
    Dataset data;
    std::vector<int64_t> train;
    std::vector<int64_t> validation;
    std::vector<int64_t> test;
};
FilteredDataset apply_split(const Dataset& ds, const SplitSpec& split);

// ---------------------------------------------------------------------------
// Synthetic generation
// ---------------------------------------------------------------------------

/// Desk-scale generator. Classes get Gaussian latent patch means; a
/// confusable pair shares its image mean but keeps distinct genetic means,
/// so images alone cannot separate the pair while genetics can.
struct SynthConfig {
    int class_count = 8;
    int per_class = 20;
    ModalityDims image_dims{16, 3, 3};
    ModalityDims genetic_dims{12, 1, 8};
    double image_separability = 5.0;
    double genetic_separability = 5.0;
    std::vector<std::pair<int, int>> confusable_pairs;
    double noise_sigma = 1.0;
    /// Class mean directions with pairwise cosine exactly -1/(K-1) instead of
    /// independent random directions. Gives every class a uniform angular
    /// margin, which similarity-threshold routing needs; requires each
    /// modality's channel depth >= class_count.
    bool simplex_means = false;
};

Dataset synth_generate(const SynthConfig& cfg, uint64_t seed);

/// Embedding-space Gaussian jitter. Plumbing only: a stand-in for raw-input
/// augmentation when data starts life as embeddings.
EmbeddingMap jitter_embedding(const EmbeddingMap& e, double sigma, uint64_t seed);

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

/// Writes `<path>` (binary container) and `<path>.json` (manifest mirror).
void save_dataset(const Dataset& ds, const std::filesystem::path& path);

/// Accepts either the binary path or its `.json` sidecar. Cross-checks the
/// sidecar against the binary header when both exist.
Dataset load_dataset(const std::filesystem::path& path);

void save_split(const SplitSpec& split, const std::filesystem::path& json_path);
SplitSpec load_split(const std::filesystem::path& json_path);

/// CLI-facing CSV of per-sample split membership (position, id, labels, split).
void export_split_csv(const Dataset& ds, const SplitSpec& split,
                      const std::filesystem::path& csv_path);

// ---------------------------------------------------------------------------
// Genetic cost accounting
// ---------------------------------------------------------------------------

/// Gatekeeper for the expensive modality. All inference-time reads of genetic
/// embeddings go through here so "samples classified without genetics" is an
/// auditable fact, not a convention. Audit reads (evaluating abstention error
/// on abstained samples) are tallied separately and never count as queries.
class CostLedger {
public:
    /// Returns the genetic embedding or nullptr when the sample has none.
    /// Counts one query per distinct sample (audit=false only).
    const EmbeddingMap* fetch_genetic(const Sample& s, bool audit = false);

    int64_t queries() const { return queries_; }
    int64_t audit_reads() const { return audit_reads_; }
    int max_fetches_per_sample() const;
    void reset();

private:
    int64_t queries_ = 0;
    int64_t audit_reads_ = 0;
    std::map<int64_t, int> per_sample_;
};

}  // namespace protogate
