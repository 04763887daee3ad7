#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "protogate/dataset.hpp"
#include "protogate/protopnet.hpp"
#include "protogate/prototype.hpp"

namespace protogate::tree {

enum class TreeKind { image, genetic, multimodal };

const char* to_string(TreeKind kind);
TreeKind tree_kind_from_string(const std::string& name);

/// Internal routing node. sigma(m) weights the GENETIC similarity — the
/// opposite orientation from the logit-level mixer — so m -> -inf is a pure
/// image node and m -> +inf a pure genetic one. Unimodal trees ignore m and
/// the other modality's prototype index.
struct TreeNode {
    int proto_image = -1;
    int proto_genetic = -1;
    double m = 0.0;
};

/// Full binary decision tree over prototype similarities. Nodes are stored in
/// heap order (children of i at 2i+1 / 2i+2); leaf l sits at heap index
/// (2^depth - 1) + l. Leaves hold class distributions (nonnegative, sum 1);
/// the tree's output is the routing-weighted mixture of them.
struct ProtoTree {
    TreeKind kind = TreeKind::image;
    int depth = 0;
    int class_count = 0;
    std::vector<TreeNode> nodes;
    std::vector<std::vector<double>> leaves;
    PrototypeSet protos_image;    // empty unless the tree uses images
    PrototypeSet protos_genetic;  // empty unless the tree uses genetics

    int node_count() const { return (1 << depth) - 1; }
    int leaf_count() const { return 1 << depth; }
    bool uses(Modality mod) const {
        return kind == TreeKind::multimodal || (kind == TreeKind::image) == (mod == Modality::image);
    }
};

/// Uniform-leaf tree with identity node->prototype wiring and m = 0
/// everywhere; prototype payloads are installed by callers. depth 0 is the
/// degenerate single-leaf tree.
ProtoTree make_tree(TreeKind kind, int depth, int class_count);

/// Genetic-side mixing weight of one node: 0 on image trees, 1 on genetic
/// trees, sigma(m) on multimodal nodes.
double genetic_weight(const ProtoTree& t, int node);

/// The modality a hard traversal charges a step to: m > 0 is genetic, a tie
/// stays with the image side.
Modality dominant_modality(const ProtoTree& t, int node);

/// Per-node genetic/image mixture sigma(m)*s_gen + (1-sigma(m))*s_img. A
/// saturated weight selects one side exactly. The argmax locations do not
/// survive mixing; only .s is filled.
SimilarityVector mix_similarity(const SimilarityVector& s_img, const SimilarityVector& s_gen,
                                std::span<const double> m);

/// Routing similarity per node for one sample: pools each modality the tree
/// uses and mixes per node. Pass nullptr for an unused modality.
std::vector<double> node_similarities(const ProtoTree& t, const EmbeddingMap* image,
                                      const EmbeddingMap* genetic);

/// Probability mass reaching each leaf: products of (1-s)/s branch weights
/// along the path. Nonnegative, sums to 1 for s in [0,1]^P.
std::vector<double> leaf_weights(const ProtoTree& t, std::span<const double> s);

/// Leaf-weighted mixture of leaf distributions, computed by the bottom-up
/// recursion r(n) = (1-s_n) r(left) + s_n r(right).
std::vector<double> soft_traverse(const ProtoTree& t, std::span<const double> s);

struct PathStep {
    int node = -1;
    Modality modality = Modality::image;  // the node's dominant side
    double similarity = 0.0;
    bool went_right = false;
};

struct PathRecord {
    std::vector<PathStep> steps;
    bool genetic_used = false;  // some step's dominant side is genetic
};

/// Greedy descent: right iff s > 0.5 (exactly 0.5 goes left). Returns the
/// leaf index; fills `path` when given.
int hard_traverse(const ProtoTree& t, std::span<const double> s, PathRecord* path = nullptr);

/// Cost-aware hard traversal straight from a sample. Each modality is pooled
/// lazily: genetics are fetched through the ledger only once a node with a
/// nonzero genetic weight is reached. When that fetch fails the traversal
/// stops with leaf = predicted = -1 and genetic_available = false.
struct HardDecision {
    int leaf = -1;
    int predicted = -1;
    bool genetic_needed = false;
    bool genetic_available = true;
    PathRecord path;
};
HardDecision classify_hard(const ProtoTree& t, const Sample& sample, CostLedger& ledger);

/// Hard-traversal accuracy per leaf over an image-only tree; unreached
/// leaves get acc = 0 so their subtrees stay eligible for replacement.
struct LeafStats {
    std::vector<int64_t> routed;
    std::vector<int64_t> correct;
    std::vector<double> acc;
};
LeafStats leaf_accuracy(const ProtoTree& t, const Dataset& ds, std::span<const int64_t> positions);

/// Per-node weights from leaf quality: -tau (image) for every ancestor of a
/// leaf with acc > threshold, +tau (genetic) elsewhere.
std::vector<double> threshold_assignment(int depth, const LeafStats& stats, double threshold,
                                         double tau);

/// Mean binary entropy of sigma(m); zero exactly on clipped (+/-inf) weights.
/// Minimizing polarizes every node toward a single modality.
double routing_loss(std::span<const double> m);

/// Saturates every node to one modality: m > 0 -> +inf (genetic), else -inf
/// (a tie prefers the cheaper image side).
void clip_modalities(ProtoTree& t);

/// Copies each leaf from the image tree when every ancestor is image-sided
/// (m <= 0), from the genetic tree otherwise. Topologies must match.
void init_multimodal_leaves(ProtoTree& multi, const ProtoTree& image_tree,
                            const ProtoTree& genetic_tree);

/// Multimodal tree assembled from two unimodal ones: prototypes copied,
/// weights from threshold_assignment, leaves from init_multimodal_leaves.
ProtoTree init_alp(const ProtoTree& image_tree, const ProtoTree& genetic_tree,
                   const LeafStats& stats, double threshold, double tau);

/// One derivative-free multiplicative update: per-leaf mass for the true class
/// accumulates leaf-weight * leaf-posterior / mixture-posterior over the
/// batch, then renormalizes. A leaf with no accumulated mass is unchanged.
void leaf_update(ProtoTree& t, std::span<const std::vector<double>> node_sims,
                 std::span<const int> labels);

/// -log of the mixture mass on `label`; accumulates d/ds into grad_s.
double traverse_backward(const ProtoTree& t, std::span<const double> s, int label,
                         std::span<double> grad_s);

/// Multipliers on the regularizers. `cluster` scales each sample's maximum
/// pooled similarity directly, so negative values pull prototypes toward the
/// data; `variability` scales the negated across-prototype activation
/// variance, so positive values spread activations apart. Weight decay is
/// (1/2)||protos||^2 over the trainable set only; routing applies to
/// multimodal trees only.
struct TreeLossCoefficients {
    double cluster = -0.5;
    double orthogonality = 0.01;
    double variability = 0.1;
    double weight_decay = 1e-4;
    double routing = 0.01;
};

/// Mean batch loss and gradients for the trainable side. `m` stays empty for
/// unimodal trees.
struct TreeBatchGradient {
    double loss = 0.0;
    double ce = 0.0;
    std::vector<double> protos;
    std::vector<double> m;
};

TreeBatchGradient tree_batch_gradient(const ProtoTree& t, const TreeLossCoefficients& coefs,
                                      std::span<const LatentExample> batch);

/// A training sample with both latent grids.
struct PairedExample {
    int64_t sample_id = -1;
    int label = -1;
    const EmbeddingMap* image = nullptr;
    const EmbeddingMap* genetic = nullptr;
};

TreeBatchGradient alp_batch_gradient(const ProtoTree& t, const TreeLossCoefficients& coefs,
                                     std::span<const PairedExample> batch,
                                     bool anti_polarize_routing = false);

/// Central finite differences of CE(soft_traverse) over the similarity
/// inputs.
GradCheckReport traverse_gradient_check(const ProtoTree& t, std::span<const double> s, int label,
                                        double eps = 1e-5, double tol = 1e-4);

/// Central finite differences over the unimodal prototype values.
GradCheckReport tree_gradient_check(const ProtoTree& t, const TreeLossCoefficients& coefs,
                                    std::span<const LatentExample> batch, double eps = 1e-5,
                                    double tol = 1e-4, int corrupt_index = -1,
                                    double corrupt_delta = 0.0);

/// Central finite differences over [genetic prototypes | modality weights].
GradCheckReport alp_gradient_check(const ProtoTree& t, const TreeLossCoefficients& coefs,
                                   std::span<const PairedExample> batch, double eps = 1e-5,
                                   double tol = 1e-4, int corrupt_index = -1,
                                   double corrupt_delta = 0.0);

struct TreeTrainConfig {
    int depth = 3;
    TreeLossCoefficients loss;
    PhaseSchedule schedule;
    /// Full-data derivative-free leaf passes at the start of each epoch and
    /// after each projection.
    int leaf_refresh_passes = 2;
};

/// Unimodal tree: prototypes start as random training patches, leaves
/// uniform. Each epoch refreshes leaves, then runs SGD on the prototypes;
/// projections follow the phase schedule. Deterministic per seed.
ProtoTree train_prototree(const Dataset& ds, std::span<const int64_t> train_positions,
                          Modality modality, const TreeTrainConfig& cfg,
                          TrainReport* report = nullptr);

struct AlpConfig {
    /// Leaf-accuracy threshold for keeping image structure; defaults to the
    /// genetic tree's balanced accuracy on the training split.
    std::optional<double> threshold;
    double tau = 5.0;  // initial weight magnitude; finite keeps gradients alive
    TreeLossCoefficients loss;
    int epochs = 8;
    int batch_size = 32;
    double lr = 0.05;
    int lr_step_size = 0;
    double lr_gamma = 0.5;
    uint64_t seed = 0;
    int leaf_refresh_passes = 2;
    /// Flip the routing term's sign (minimizing then spreads weights toward
    /// sigma = 1/2 instead of polarizing them); for comparison runs only.
    bool anti_polarize_routing = false;
};

/// Multimodal training: initializes via init_alp, freezes the image side,
/// and optimizes genetic prototypes + modality weights by SGD with
/// derivative-free leaf refreshes. Unless the epoch count is zero, finishes
/// by clipping every node to one modality, projecting the genetic
/// prototypes, and refreshing leaves once more.
ProtoTree train_alp(const Dataset& ds, std::span<const int64_t> train_positions,
                    const ProtoTree& image_tree, const ProtoTree& genetic_tree,
                    const AlpConfig& cfg, TrainReport* report = nullptr);

}  // namespace protogate::tree
