#pragma once

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "protogate/common.hpp"

namespace protogate {

/// Where a projected prototype came from: a specific latent patch of a
/// specific training sample.
struct PatchProvenance {
    int64_t sample_id = -1;
    int h = -1;
    int w = -1;
    bool operator==(const PatchProvenance&) const = default;
};

/// P prototype vectors of dimension `dim`, stored row-major. class_of is
/// present for class-assigned prototypes (ProtoPNet) and empty for trees;
/// provenance is filled by projection.
struct PrototypeSet {
    int dim = 0;
    std::vector<double> values;  // P * dim
    std::vector<int> class_of;
    std::vector<PatchProvenance> provenance;

    PrototypeSet() = default;
    PrototypeSet(int count, int d) : dim(d), values(static_cast<size_t>(count) * d, 0.0) {
        if (count < 1 || d < 1) throw ValidationError("prototype set needs P >= 1 and dim >= 1");
    }

    int count() const { return dim == 0 ? 0 : static_cast<int>(values.size()) / dim; }
    std::span<double> row(int p) { return {values.data() + static_cast<size_t>(p) * dim, static_cast<size_t>(dim)}; }
    std::span<const double> row(int p) const {
        return {values.data() + static_cast<size_t>(p) * dim, static_cast<size_t>(dim)};
    }
    bool has_classes() const { return !class_of.empty(); }
};

/// Per-prototype similarity at each spatial location; entries in [0,1].
struct SimilarityMap {
    int proto_count = 0;
    int height = 0;
    int width = 0;
    std::vector<double> values;  // p * H * W

    double at(int p, int h, int w) const {
        return values[(static_cast<size_t>(p) * height + h) * width + w];
    }
    double& at(int p, int h, int w) {
        return values[(static_cast<size_t>(p) * height + h) * width + w];
    }
};

/// Spatially max-pooled similarities plus the argmax location per prototype.
struct SimilarityVector {
    std::vector<double> s;
    std::vector<std::pair<int, int>> argmax;  // (h, w), lowest row-major index on ties
};

struct LinearHead {
    int class_count = 0;
    int proto_count = 0;
    std::vector<double> weights;  // K * P
    std::vector<double> bias;     // empty = no bias, else K

    LinearHead() = default;
    LinearHead(int k, int p)
        : class_count(k), proto_count(p), weights(static_cast<size_t>(k) * p, 0.0) {
        if (k < 1 || p < 1) throw ValidationError("linear head needs K >= 1 and P >= 1");
    }

    double at(int k, int p) const { return weights[static_cast<size_t>(k) * proto_count + p]; }
    double& at(int k, int p) { return weights[static_cast<size_t>(k) * proto_count + p]; }
};

/// A training sample's latent grid for one modality, as seen by projection
/// and the analysis tools.
struct LatentExample {
    int64_t sample_id = -1;
    int label = -1;
    const EmbeddingMap* embedding = nullptr;
};

// ---------------------------------------------------------------------------
// Forward operations
// ---------------------------------------------------------------------------

/// Rescaled cosine similarity of one prototype against one latent patch:
/// (1 + cos)/2 in [0,1]. Either vector all-zero -> 0.5 by convention.
double patch_similarity(std::span<const double> proto, const EmbeddingMap& e, int h, int w);

SimilarityMap similarity_map(const EmbeddingMap& e, const PrototypeSet& protos);

SimilarityVector max_pool(const SimilarityMap& m);

std::vector<double> head_forward(const SimilarityVector& s, const LinearHead& head);

/// (cluster, separation). With class assignments: cluster = -max own-class
/// pooled similarity, separation = +max other-class pooled similarity (0 when
/// no other class exists). Without assignments (tree prototypes): cluster
/// runs over all prototypes and separation is 0.
std::pair<double, double> cluster_separation_loss(const SimilarityMap& m, int label,
                                                  const PrototypeSet& protos);

/// ||row_normalized(P) * row_normalized(P)^T - I||_F^2.
double orthogonality_loss(const PrototypeSet& protos);

/// -(1/(H*W)) * sum over locations of the across-prototype sample variance
/// (1/(P-1) denominator). Requires P >= 2.
double variability_loss(const SimilarityMap& m);

/// Replaces each prototype by its most similar candidate latent patch
/// (restricted to own-class samples when requested). Idempotent: a prototype
/// already equal to a candidate patch keeps its values, and ties go to the
/// earliest (sample, h, w). Provenance is recorded.
PrototypeSet project_prototypes(const PrototypeSet& protos, std::span<const LatentExample> examples,
                                bool restrict_to_class);

struct LocalMatch {
    int proto = -1;
    double similarity = 0.0;
    int h = -1;
    int w = -1;
};
/// All prototypes ranked by pooled similarity to the sample, descending;
/// ties broken by lower prototype index.
std::vector<LocalMatch> local_analysis(const EmbeddingMap& e, const PrototypeSet& protos);

struct GlobalMatch {
    int64_t sample_id = -1;
    double similarity = 0.0;
    int h = -1;
    int w = -1;
};
/// Top-n samples ranked by the prototype's pooled similarity, descending;
/// ties broken by input order.
std::vector<GlobalMatch> global_analysis(const PrototypeSet& protos, int proto_index,
                                         std::span<const LatentExample> examples, int top_n);

/// K x P head with correct-class connections at `correct_weight` and all
/// others at `incorrect_weight`.
LinearHead init_class_head(int class_count, const std::vector<int>& class_of,
                           double correct_weight, double incorrect_weight);

/// Sum of |W_kp| over incorrect-class connections (class_of[p] != k).
double head_incorrect_l1(const LinearHead& head, const std::vector<int>& class_of);

// ---------------------------------------------------------------------------
// Analytic gradients
//
// All accumulate `upstream * d(value)/d(param)` into caller-owned buffers so
// composite losses sum naturally. Buffers must be pre-sized and zeroed by the
// caller on the first use.
// ---------------------------------------------------------------------------

/// d(patch_similarity)/d(proto) at one location.
void patch_similarity_backward(std::span<const double> proto, const EmbeddingMap& e, int h, int w,
                               double upstream, std::span<double> grad_proto);

/// Chains dL/ds (pooled similarities) through the argmax locations into
/// prototype gradients.
void pooled_similarity_backward(const EmbeddingMap& e, const PrototypeSet& protos,
                                const SimilarityVector& s, std::span<const double> grad_s,
                                std::vector<double>& grad_protos);

/// y = W s (+ b). Pass nullptr for any gradient not needed.
void head_backward(const SimilarityVector& s, const LinearHead& head,
                   std::span<const double> grad_logits, std::vector<double>* grad_weights,
                   std::vector<double>* grad_bias, std::vector<double>* grad_s);

void cluster_separation_backward(const SimilarityMap& m, int label, const PrototypeSet& protos,
                                 const EmbeddingMap& e, double upstream_cluster,
                                 double upstream_separation, std::vector<double>& grad_protos);

void orthogonality_backward(const PrototypeSet& protos, double upstream,
                            std::vector<double>& grad_protos);

void variability_backward(const SimilarityMap& m, const EmbeddingMap& e,
                          const PrototypeSet& protos, double upstream,
                          std::vector<double>& grad_protos);

void head_incorrect_l1_backward(const LinearHead& head, const std::vector<int>& class_of,
                                double upstream, std::vector<double>& grad_weights);

}  // namespace protogate
