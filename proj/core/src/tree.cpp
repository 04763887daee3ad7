#include "protogate/tree.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <stdexcept>

namespace protogate::tree {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

int heap_size(int depth) { return (1 << (depth + 1)) - 1; }

void check_similarities(const ProtoTree& t, std::span<const double> s, bool range_check) {
    if (static_cast<int>(s.size()) != t.node_count())
        throw ValidationError("similarity vector length does not match the node count");
    if (!range_check) return;
    for (double x : s)
        if (!(x >= 0.0 && x <= 1.0))
            throw ValidationError("routing similarities must lie in [0, 1]");
}

/// The label component of every heap node's output, bottom-up.
std::vector<double> label_component_values(const ProtoTree& t, std::span<const double> s,
                                           int label) {
    const int internal = t.node_count();
    std::vector<double> vals(static_cast<size_t>(heap_size(t.depth)), 0.0);
    for (int l = 0; l < t.leaf_count(); ++l)
        vals[static_cast<size_t>(internal + l)] = t.leaves[static_cast<size_t>(l)][static_cast<size_t>(label)];
    for (int i = internal - 1; i >= 0; --i)
        vals[static_cast<size_t>(i)] = (1.0 - s[static_cast<size_t>(i)]) * vals[static_cast<size_t>(2 * i + 1)] +
                                       s[static_cast<size_t>(i)] * vals[static_cast<size_t>(2 * i + 2)];
    return vals;
}

/// -log mixture mass on `label`; adds upstream * d/ds into ds when given.
/// No input validation, so finite-difference probes may step outside [0,1].
double ce_over_nodes(const ProtoTree& t, std::span<const double> s, int label, double upstream,
                     std::span<double> ds) {
    const auto vals = label_component_values(t, s, label);
    const double r = vals[0];
    if (!(r > 0.0) || !std::isfinite(r)) return kInf;
    if (!ds.empty()) {
        std::vector<double> up(vals.size(), 0.0);
        up[0] = upstream * (-1.0 / r);
        for (int i = 0; i < t.node_count(); ++i) {
            const auto ui = static_cast<size_t>(i);
            ds[ui] += up[ui] * (vals[static_cast<size_t>(2 * i + 2)] - vals[static_cast<size_t>(2 * i + 1)]);
            up[static_cast<size_t>(2 * i + 1)] += (1.0 - s[ui]) * up[ui];
            up[static_cast<size_t>(2 * i + 2)] += s[ui] * up[ui];
        }
    }
    return -std::log(r);
}

void check_label(int label, int class_count) {
    if (label < 0 || label >= class_count) throw ValidationError("label out of range");
}

const PrototypeSet& active_protos(const ProtoTree& t) {
    return t.kind == TreeKind::genetic ? t.protos_genetic : t.protos_image;
}

int node_proto(const ProtoTree& t, int node, Modality mod) {
    const auto& n = t.nodes[static_cast<size_t>(node)];
    const int p = mod == Modality::image ? n.proto_image : n.proto_genetic;
    const auto& set = mod == Modality::image ? t.protos_image : t.protos_genetic;
    if (p < 0 || p >= set.count())
        throw ValidationError("node prototype index out of range");
    return p;
}

std::vector<double> modality_weights_of(const ProtoTree& t) {
    std::vector<double> m;
    m.reserve(t.nodes.size());
    for (const auto& n : t.nodes) m.push_back(n.m);
    return m;
}

/// d routing_loss / d m_n for one node (mean over P nodes handled by caller).
double routing_grad_one(double m) {
    if (!std::isfinite(m)) return 0.0;  // saturated: entropy pinned at 0
    return -m * sigmoid_grad(m);
}

void check_topology_match(const ProtoTree& a, const ProtoTree& b, const char* what) {
    if (a.depth != b.depth || a.class_count != b.class_count)
        throw ValidationError(std::string("tree topology mismatch: ") + what);
}

}  // namespace

double genetic_weight(const ProtoTree& t, int node) {
    switch (t.kind) {
        case TreeKind::image: return 0.0;
        case TreeKind::genetic: return 1.0;
        case TreeKind::multimodal: return sigmoid(t.nodes[static_cast<size_t>(node)].m);
    }
    return 0.0;
}

Modality dominant_modality(const ProtoTree& t, int node) {
    if (t.kind == TreeKind::image) return Modality::image;
    if (t.kind == TreeKind::genetic) return Modality::genetic;
    return t.nodes[static_cast<size_t>(node)].m > 0.0 ? Modality::genetic : Modality::image;
}

const char* to_string(TreeKind kind) {
    switch (kind) {
        case TreeKind::image: return "image";
        case TreeKind::genetic: return "genetic";
        case TreeKind::multimodal: return "multimodal";
    }
    return "image";
}

TreeKind tree_kind_from_string(const std::string& name) {
    if (name == "image") return TreeKind::image;
    if (name == "genetic") return TreeKind::genetic;
    if (name == "multimodal") return TreeKind::multimodal;
    throw ValidationError("unknown tree kind: " + name);
}

ProtoTree make_tree(TreeKind kind, int depth, int class_count) {
    if (depth < 0) throw ValidationError("tree depth must be >= 0");
    if (depth > 20) throw ValidationError("tree depth above 20 is not supported");
    if (class_count < 2) throw ValidationError("tree needs at least two classes");
    ProtoTree t;
    t.kind = kind;
    t.depth = depth;
    t.class_count = class_count;
    t.nodes.resize(static_cast<size_t>(t.node_count()));
    for (int i = 0; i < t.node_count(); ++i) {
        t.nodes[static_cast<size_t>(i)].proto_image = i;
        t.nodes[static_cast<size_t>(i)].proto_genetic = i;
    }
    t.leaves.assign(static_cast<size_t>(t.leaf_count()),
                    std::vector<double>(static_cast<size_t>(class_count), 1.0 / class_count));
    return t;
}

SimilarityVector mix_similarity(const SimilarityVector& s_img, const SimilarityVector& s_gen,
                                std::span<const double> m) {
    if (s_img.s.size() != s_gen.s.size() || s_img.s.size() != m.size())
        throw ValidationError("similarity mixing needs equal-length inputs");
    SimilarityVector out;
    out.s.resize(m.size());
    for (size_t i = 0; i < m.size(); ++i) {
        const double w = sigmoid(m[i]);
        out.s[i] = w * s_gen.s[i] + (1.0 - w) * s_img.s[i];
    }
    return out;
}

std::vector<double> node_similarities(const ProtoTree& t, const EmbeddingMap* image,
                                      const EmbeddingMap* genetic) {
    const bool need_img = t.kind != TreeKind::genetic;
    const bool need_gen = t.kind != TreeKind::image;
    if (need_img && image == nullptr) throw ValidationError("tree needs an image embedding");
    if (need_gen && genetic == nullptr) throw ValidationError("tree needs a genetic embedding");

    SimilarityVector pooled_img, pooled_gen;
    if (need_img) {
        if (t.protos_image.count() == 0) throw ValidationError("tree has no image prototypes");
        pooled_img = max_pool(similarity_map(*image, t.protos_image));
    }
    if (need_gen) {
        if (t.protos_genetic.count() == 0) throw ValidationError("tree has no genetic prototypes");
        pooled_gen = max_pool(similarity_map(*genetic, t.protos_genetic));
    }

    std::vector<double> s(static_cast<size_t>(t.node_count()), 0.0);
    for (int n = 0; n < t.node_count(); ++n) {
        const double w = genetic_weight(t, n);
        double value = 0.0;
        if (w < 1.0) value += (1.0 - w) * pooled_img.s[static_cast<size_t>(node_proto(t, n, Modality::image))];
        if (w > 0.0) value += w * pooled_gen.s[static_cast<size_t>(node_proto(t, n, Modality::genetic))];
        s[static_cast<size_t>(n)] = value;
    }
    return s;
}

std::vector<double> leaf_weights(const ProtoTree& t, std::span<const double> s) {
    check_similarities(t, s, /*range_check=*/true);
    std::vector<double> w(static_cast<size_t>(heap_size(t.depth)), 0.0);
    w[0] = 1.0;
    for (int i = 0; i < t.node_count(); ++i) {
        const double wi = w[static_cast<size_t>(i)];
        w[static_cast<size_t>(2 * i + 1)] += (1.0 - s[static_cast<size_t>(i)]) * wi;
        w[static_cast<size_t>(2 * i + 2)] += s[static_cast<size_t>(i)] * wi;
    }
    return {w.begin() + t.node_count(), w.end()};
}

std::vector<double> soft_traverse(const ProtoTree& t, std::span<const double> s) {
    check_similarities(t, s, /*range_check=*/true);
    const int internal = t.node_count();
    std::vector<std::vector<double>> vals(static_cast<size_t>(heap_size(t.depth)));
    for (int l = 0; l < t.leaf_count(); ++l)
        vals[static_cast<size_t>(internal + l)] = t.leaves[static_cast<size_t>(l)];
    for (int i = internal - 1; i >= 0; --i) {
        const auto& left = vals[static_cast<size_t>(2 * i + 1)];
        const auto& right = vals[static_cast<size_t>(2 * i + 2)];
        const double si = s[static_cast<size_t>(i)];
        std::vector<double> r(left.size());
        for (size_t k = 0; k < r.size(); ++k) r[k] = (1.0 - si) * left[k] + si * right[k];
        vals[static_cast<size_t>(i)] = std::move(r);
    }
    return vals[0];
}

int hard_traverse(const ProtoTree& t, std::span<const double> s, PathRecord* path) {
    check_similarities(t, s, /*range_check=*/false);
    if (path) {
        path->steps.clear();
        path->genetic_used = false;
    }
    int idx = 0;
    while (idx < t.node_count()) {
        const double si = s[static_cast<size_t>(idx)];
        const bool right = si > 0.5;
        if (path) {
            PathStep step;
            step.node = idx;
            step.modality = dominant_modality(t, idx);
            step.similarity = si;
            step.went_right = right;
            path->steps.push_back(step);
            path->genetic_used |= step.modality == Modality::genetic;
        }
        idx = 2 * idx + (right ? 2 : 1);
    }
    return idx - t.node_count();
}

HardDecision classify_hard(const ProtoTree& t, const Sample& sample, CostLedger& ledger) {
    HardDecision d;
    SimilarityVector pooled_img, pooled_gen;
    bool have_img = false, have_gen = false;

    int idx = 0;
    while (idx < t.node_count()) {
        const double w = genetic_weight(t, idx);
        if (w < 1.0 && !have_img) {
            if (t.protos_image.count() == 0) throw ValidationError("tree has no image prototypes");
            pooled_img = max_pool(similarity_map(sample.image, t.protos_image));
            have_img = true;
        }
        if (w > 0.0) {
            d.genetic_needed = true;
            if (!have_gen) {
                const EmbeddingMap* g = ledger.fetch_genetic(sample);
                if (g == nullptr) {
                    d.genetic_available = false;
                    return d;
                }
                if (t.protos_genetic.count() == 0)
                    throw ValidationError("tree has no genetic prototypes");
                pooled_gen = max_pool(similarity_map(*g, t.protos_genetic));
                have_gen = true;
            }
        }
        double si = 0.0;
        if (w < 1.0) si += (1.0 - w) * pooled_img.s[static_cast<size_t>(node_proto(t, idx, Modality::image))];
        if (w > 0.0) si += w * pooled_gen.s[static_cast<size_t>(node_proto(t, idx, Modality::genetic))];

        PathStep step;
        step.node = idx;
        step.modality = dominant_modality(t, idx);
        step.similarity = si;
        step.went_right = si > 0.5;
        d.path.steps.push_back(step);
        d.path.genetic_used |= step.modality == Modality::genetic;
        idx = 2 * idx + (step.went_right ? 2 : 1);
    }
    d.leaf = idx - t.node_count();
    d.predicted = argmax_index(t.leaves[static_cast<size_t>(d.leaf)]);
    return d;
}

LeafStats leaf_accuracy(const ProtoTree& t, const Dataset& ds,
                        std::span<const int64_t> positions) {
    if (t.kind != TreeKind::image)
        throw ValidationError("leaf accuracy is defined over an image-only tree");
    LeafStats stats;
    stats.routed.assign(static_cast<size_t>(t.leaf_count()), 0);
    stats.correct.assign(static_cast<size_t>(t.leaf_count()), 0);
    stats.acc.assign(static_cast<size_t>(t.leaf_count()), 0.0);
    for (int64_t pos : positions) {
        const Sample& sample = ds.samples.at(static_cast<size_t>(pos));
        const auto s = node_similarities(t, &sample.image, nullptr);
        const int leaf = hard_traverse(t, s);
        const int pred = argmax_index(t.leaves[static_cast<size_t>(leaf)]);
        stats.routed[static_cast<size_t>(leaf)] += 1;
        stats.correct[static_cast<size_t>(leaf)] += pred == sample.label;
    }
    for (int l = 0; l < t.leaf_count(); ++l)
        if (stats.routed[static_cast<size_t>(l)] > 0)
            stats.acc[static_cast<size_t>(l)] = static_cast<double>(stats.correct[static_cast<size_t>(l)]) /
                                                static_cast<double>(stats.routed[static_cast<size_t>(l)]);
    return stats;
}

std::vector<double> threshold_assignment(int depth, const LeafStats& stats, double threshold,
                                         double tau) {
    if (!(tau > 0.0)) throw ValidationError("threshold assignment needs tau > 0");
    const int internal = (1 << depth) - 1;
    const int leaves = 1 << depth;
    if (static_cast<int>(stats.acc.size()) != leaves)
        throw ValidationError("leaf stats do not match the tree depth");
    std::vector<double> m(static_cast<size_t>(internal), tau);
    for (int l = 0; l < leaves; ++l) {
        if (!(stats.acc[static_cast<size_t>(l)] > threshold)) continue;
        int h = internal + l;
        while (h > 0) {
            h = (h - 1) / 2;
            m[static_cast<size_t>(h)] = -tau;
        }
    }
    return m;
}

double routing_loss(std::span<const double> m) {
    if (m.empty()) return 0.0;
    double acc = 0.0;
    for (double x : m) {
        const double p = sigmoid(x);
        if (p <= 0.0 || p >= 1.0) continue;  // saturated weights carry no entropy
        acc += -(p * std::log(p) + (1.0 - p) * std::log(1.0 - p));
    }
    return acc / static_cast<double>(m.size());
}

void clip_modalities(ProtoTree& t) {
    if (t.kind != TreeKind::multimodal)
        throw ValidationError("only multimodal trees carry modality weights to clip");
    for (auto& n : t.nodes) n.m = n.m > 0.0 ? kInf : -kInf;
}

void init_multimodal_leaves(ProtoTree& multi, const ProtoTree& image_tree,
                            const ProtoTree& genetic_tree) {
    if (multi.kind != TreeKind::multimodal || image_tree.kind != TreeKind::image ||
        genetic_tree.kind != TreeKind::genetic)
        throw ValidationError("leaf initialization needs multimodal, image, genetic trees");
    check_topology_match(multi, image_tree, "image donor");
    check_topology_match(multi, genetic_tree, "genetic donor");
    const int internal = multi.node_count();
    for (int l = 0; l < multi.leaf_count(); ++l) {
        bool image_only = true;
        int h = internal + l;
        while (h > 0) {
            h = (h - 1) / 2;
            image_only &= multi.nodes[static_cast<size_t>(h)].m <= 0.0;
        }
        multi.leaves[static_cast<size_t>(l)] =
            image_only ? image_tree.leaves[static_cast<size_t>(l)] : genetic_tree.leaves[static_cast<size_t>(l)];
    }
}

ProtoTree init_alp(const ProtoTree& image_tree, const ProtoTree& genetic_tree,
                   const LeafStats& stats, double threshold, double tau) {
    if (image_tree.kind != TreeKind::image || genetic_tree.kind != TreeKind::genetic)
        throw ValidationError("multimodal initialization needs an image and a genetic tree");
    check_topology_match(image_tree, genetic_tree, "unimodal donors");
    ProtoTree t = make_tree(TreeKind::multimodal, image_tree.depth, image_tree.class_count);
    t.protos_image = image_tree.protos_image;
    t.protos_genetic = genetic_tree.protos_genetic;
    const auto m = threshold_assignment(t.depth, stats, threshold, tau);
    for (int i = 0; i < t.node_count(); ++i) {
        t.nodes[static_cast<size_t>(i)].proto_image = image_tree.nodes[static_cast<size_t>(i)].proto_image;
        t.nodes[static_cast<size_t>(i)].proto_genetic = genetic_tree.nodes[static_cast<size_t>(i)].proto_genetic;
        t.nodes[static_cast<size_t>(i)].m = m[static_cast<size_t>(i)];
    }
    init_multimodal_leaves(t, image_tree, genetic_tree);
    return t;
}

void leaf_update(ProtoTree& t, std::span<const std::vector<double>> node_sims,
                 std::span<const int> labels) {
    if (node_sims.size() != labels.size())
        throw ValidationError("leaf update needs one label per similarity row");
    std::vector<std::vector<double>> mass(
        static_cast<size_t>(t.leaf_count()),
        std::vector<double>(static_cast<size_t>(t.class_count), 0.0));
    for (size_t i = 0; i < node_sims.size(); ++i) {
        check_label(labels[i], t.class_count);
        const auto pi = leaf_weights(t, node_sims[i]);
        const auto y = static_cast<size_t>(labels[i]);
        double r = 0.0;
        for (int l = 0; l < t.leaf_count(); ++l)
            r += pi[static_cast<size_t>(l)] * t.leaves[static_cast<size_t>(l)][y];
        for (int l = 0; l < t.leaf_count(); ++l) {
            const double contrib = pi[static_cast<size_t>(l)] * t.leaves[static_cast<size_t>(l)][y];
            if (contrib > 0.0) mass[static_cast<size_t>(l)][y] += contrib / r;
        }
    }
    for (int l = 0; l < t.leaf_count(); ++l) {
        auto& u = mass[static_cast<size_t>(l)];
        double z = 0.0;
        for (double v : u) z += v;
        if (z <= 0.0) continue;  // untouched leaves keep their distribution
        auto& q = t.leaves[static_cast<size_t>(l)];
        for (size_t k = 0; k < q.size(); ++k) q[k] = u[k] / z;
    }
}

double traverse_backward(const ProtoTree& t, std::span<const double> s, int label,
                         std::span<double> grad_s) {
    check_similarities(t, s, /*range_check=*/true);
    check_label(label, t.class_count);
    if (static_cast<int>(grad_s.size()) != t.node_count())
        throw ValidationError("gradient buffer length does not match the node count");
    return ce_over_nodes(t, s, label, 1.0, grad_s);
}

TreeBatchGradient tree_batch_gradient(const ProtoTree& t, const TreeLossCoefficients& coefs,
                                      std::span<const LatentExample> batch) {
    if (t.kind == TreeKind::multimodal)
        throw ValidationError("unimodal batch gradient on a multimodal tree");
    const PrototypeSet& protos = active_protos(t);
    const Modality mod = t.kind == TreeKind::image ? Modality::image : Modality::genetic;
    TreeBatchGradient g;
    g.protos.assign(protos.values.size(), 0.0);
    if (batch.empty()) return g;

    const double inv_b = 1.0 / static_cast<double>(batch.size());
    for (const auto& ex : batch) {
        auto sm = similarity_map(*ex.embedding, protos);
        auto pooled = max_pool(sm);
        std::vector<double> s(static_cast<size_t>(t.node_count()));
        for (int n = 0; n < t.node_count(); ++n)
            s[static_cast<size_t>(n)] = pooled.s[static_cast<size_t>(node_proto(t, n, mod))];

        std::vector<double> ds(s.size(), 0.0);
        const double ce = ce_over_nodes(t, s, ex.label, inv_b, ds);
        g.ce += inv_b * ce;
        g.loss += inv_b * ce;
        if (!std::isfinite(ce)) continue;  // poisoned already; skip the chain

        std::vector<double> grad_sp(static_cast<size_t>(protos.count()), 0.0);
        for (int n = 0; n < t.node_count(); ++n)
            grad_sp[static_cast<size_t>(node_proto(t, n, mod))] += ds[static_cast<size_t>(n)];
        pooled_similarity_backward(*ex.embedding, protos, pooled, grad_sp, g.protos);

        if (coefs.cluster != 0.0) {
            auto [clst, sep] = cluster_separation_loss(sm, ex.label, protos);
            g.loss += inv_b * coefs.cluster * -clst;
            cluster_separation_backward(sm, ex.label, protos, *ex.embedding,
                                        -coefs.cluster * inv_b, 0.0, g.protos);
        }
        if (coefs.variability != 0.0) {
            g.loss += inv_b * coefs.variability * variability_loss(sm);
            variability_backward(sm, *ex.embedding, protos, coefs.variability * inv_b,
                                 g.protos);
        }
    }

    if (coefs.orthogonality != 0.0) {
        g.loss += coefs.orthogonality * orthogonality_loss(protos);
        orthogonality_backward(protos, coefs.orthogonality, g.protos);
    }
    if (coefs.weight_decay != 0.0) {
        double sumsq = 0.0;
        for (double v : protos.values) sumsq += v * v;
        g.loss += coefs.weight_decay * 0.5 * sumsq;
        for (size_t i = 0; i < protos.values.size(); ++i)
            g.protos[i] += coefs.weight_decay * protos.values[i];
    }
    return g;
}

TreeBatchGradient alp_batch_gradient(const ProtoTree& t, const TreeLossCoefficients& coefs,
                                     std::span<const PairedExample> batch,
                                     bool anti_polarize_routing) {
    if (t.kind != TreeKind::multimodal)
        throw ValidationError("multimodal batch gradient needs a multimodal tree");
    TreeBatchGradient g;
    g.protos.assign(t.protos_genetic.values.size(), 0.0);
    g.m.assign(t.nodes.size(), 0.0);
    if (batch.empty()) return g;

    const double inv_b = 1.0 / static_cast<double>(batch.size());
    for (const auto& ex : batch) {
        if (ex.image == nullptr || ex.genetic == nullptr)
            throw ValidationError("multimodal training rows need both embeddings");
        auto sm_img = similarity_map(*ex.image, t.protos_image);
        auto pooled_img = max_pool(sm_img);
        auto sm_gen = similarity_map(*ex.genetic, t.protos_genetic);
        auto pooled_gen = max_pool(sm_gen);

        std::vector<double> s(static_cast<size_t>(t.node_count()));
        std::vector<double> si(s.size()), sg(s.size());
        for (int n = 0; n < t.node_count(); ++n) {
            const auto un = static_cast<size_t>(n);
            si[un] = pooled_img.s[static_cast<size_t>(node_proto(t, n, Modality::image))];
            sg[un] = pooled_gen.s[static_cast<size_t>(node_proto(t, n, Modality::genetic))];
            const double w = sigmoid(t.nodes[un].m);
            s[un] = w * sg[un] + (1.0 - w) * si[un];
        }

        std::vector<double> ds(s.size(), 0.0);
        const double ce = ce_over_nodes(t, s, ex.label, inv_b, ds);
        g.ce += inv_b * ce;
        g.loss += inv_b * ce;
        if (!std::isfinite(ce)) continue;

        std::vector<double> grad_sp(static_cast<size_t>(t.protos_genetic.count()), 0.0);
        for (int n = 0; n < t.node_count(); ++n) {
            const auto un = static_cast<size_t>(n);
            const double w = sigmoid(t.nodes[un].m);
            g.m[un] += ds[un] * sigmoid_grad(t.nodes[un].m) * (sg[un] - si[un]);
            if (w > 0.0)
                grad_sp[static_cast<size_t>(node_proto(t, n, Modality::genetic))] += ds[un] * w;
        }
        pooled_similarity_backward(*ex.genetic, t.protos_genetic, pooled_gen, grad_sp, g.protos);

        if (coefs.cluster != 0.0) {
            auto [clst, sep] = cluster_separation_loss(sm_gen, ex.label, t.protos_genetic);
            g.loss += inv_b * coefs.cluster * -clst;
            cluster_separation_backward(sm_gen, ex.label, t.protos_genetic, *ex.genetic,
                                        -coefs.cluster * inv_b, 0.0, g.protos);
        }
        if (coefs.variability != 0.0) {
            g.loss += inv_b * coefs.variability * variability_loss(sm_gen);
            variability_backward(sm_gen, *ex.genetic, t.protos_genetic,
                                 coefs.variability * inv_b, g.protos);
        }
    }

    if (coefs.orthogonality != 0.0) {
        g.loss += coefs.orthogonality * orthogonality_loss(t.protos_genetic);
        orthogonality_backward(t.protos_genetic, coefs.orthogonality, g.protos);
    }
    if (coefs.weight_decay != 0.0) {
        double sumsq = 0.0;
        for (double v : t.protos_genetic.values) sumsq += v * v;
        g.loss += coefs.weight_decay * 0.5 * sumsq;
        for (size_t i = 0; i < t.protos_genetic.values.size(); ++i)
            g.protos[i] += coefs.weight_decay * t.protos_genetic.values[i];
    }
    if (coefs.routing != 0.0) {
        const double sign = anti_polarize_routing ? -1.0 : 1.0;
        const auto m = modality_weights_of(t);
        g.loss += coefs.routing * sign * routing_loss(m);
        const double scale = coefs.routing * sign / static_cast<double>(m.size());
        for (size_t i = 0; i < m.size(); ++i) g.m[i] += scale * routing_grad_one(m[i]);
    }
    return g;
}

GradCheckReport traverse_gradient_check(const ProtoTree& t, std::span<const double> s, int label,
                                        double eps, double tol) {
    check_similarities(t, s, /*range_check=*/true);
    check_label(label, t.class_count);
    std::vector<double> analytic(s.size(), 0.0);
    ce_over_nodes(t, s, label, 1.0, analytic);

    std::vector<double> probe(s.begin(), s.end());
    GradCheckReport report;
    double max_diff = 0.0, a_norm = 0.0, fd_norm = 0.0;
    for (size_t i = 0; i < probe.size(); ++i) {
        const double keep = probe[i];
        probe[i] = keep + eps;
        const double up = ce_over_nodes(t, probe, label, 1.0, {});
        probe[i] = keep - eps;
        const double down = ce_over_nodes(t, probe, label, 1.0, {});
        probe[i] = keep;
        const double fd = (up - down) / (2.0 * eps);
        max_diff = std::max(max_diff, std::abs(analytic[i] - fd));
        a_norm = std::max(a_norm, std::abs(analytic[i]));
        fd_norm = std::max(fd_norm, std::abs(fd));
    }
    report.max_relative_error = max_diff / std::max({a_norm, fd_norm, 1e-8});
    report.pass = report.max_relative_error < tol;
    return report;
}

namespace {

/// Shared FD harness over a parameter vector addressed by get/set callables.
template <typename LossFn>
GradCheckReport fd_compare(std::vector<double> analytic, size_t param_count, LossFn&& loss_at,
                           double eps, double tol, int corrupt_index, double corrupt_delta) {
    if (corrupt_index >= 0 && corrupt_index < static_cast<int>(analytic.size()))
        analytic[static_cast<size_t>(corrupt_index)] += corrupt_delta;
    double max_diff = 0.0, a_norm = 0.0, fd_norm = 0.0;
    for (size_t i = 0; i < param_count; ++i) {
        const double fd = loss_at(i, eps);
        max_diff = std::max(max_diff, std::abs(analytic[i] - fd));
        a_norm = std::max(a_norm, std::abs(analytic[i]));
        fd_norm = std::max(fd_norm, std::abs(fd));
    }
    GradCheckReport report;
    report.max_relative_error = max_diff / std::max({a_norm, fd_norm, 1e-8});
    report.pass = report.max_relative_error < tol;
    return report;
}

}  // namespace

GradCheckReport tree_gradient_check(const ProtoTree& t, const TreeLossCoefficients& coefs,
                                    std::span<const LatentExample> batch, double eps, double tol,
                                    int corrupt_index, double corrupt_delta) {
    const auto g = tree_batch_gradient(t, coefs, batch);
    ProtoTree probe = t;
    PrototypeSet& protos =
        probe.kind == TreeKind::genetic ? probe.protos_genetic : probe.protos_image;
    auto loss_at = [&](size_t i, double e) {
        const double keep = protos.values[i];
        protos.values[i] = keep + e;
        const double up = tree_batch_gradient(probe, coefs, batch).loss;
        protos.values[i] = keep - e;
        const double down = tree_batch_gradient(probe, coefs, batch).loss;
        protos.values[i] = keep;
        return (up - down) / (2.0 * e);
    };
    return fd_compare(g.protos, protos.values.size(), loss_at, eps, tol, corrupt_index,
                      corrupt_delta);
}

GradCheckReport alp_gradient_check(const ProtoTree& t, const TreeLossCoefficients& coefs,
                                   std::span<const PairedExample> batch, double eps, double tol,
                                   int corrupt_index, double corrupt_delta) {
    const auto g = alp_batch_gradient(t, coefs, batch);
    std::vector<double> analytic = g.protos;
    analytic.insert(analytic.end(), g.m.begin(), g.m.end());

    ProtoTree probe = t;
    const size_t proto_count = probe.protos_genetic.values.size();
    auto loss_at = [&](size_t i, double e) {
        double* slot = i < proto_count ? &probe.protos_genetic.values[i]
                                       : &probe.nodes[i - proto_count].m;
        const double keep = *slot;
        *slot = keep + e;
        const double up = alp_batch_gradient(probe, coefs, batch).loss;
        *slot = keep - e;
        const double down = alp_batch_gradient(probe, coefs, batch).loss;
        *slot = keep;
        return (up - down) / (2.0 * e);
    };
    return fd_compare(std::move(analytic), proto_count + probe.nodes.size(), loss_at, eps, tol,
                      corrupt_index, corrupt_delta);
}

namespace {

std::vector<LatentExample> gather_examples(const Dataset& ds, std::span<const int64_t> positions,
                                           Modality modality) {
    std::vector<LatentExample> out;
    out.reserve(positions.size());
    for (int64_t p : positions) {
        const Sample& s = ds.samples.at(static_cast<size_t>(p));
        out.push_back({s.id, s.label, &modality_embedding(s, modality)});
    }
    return out;
}

std::vector<PairedExample> gather_paired(const Dataset& ds, std::span<const int64_t> positions) {
    std::vector<PairedExample> out;
    out.reserve(positions.size());
    for (int64_t p : positions) {
        const Sample& s = ds.samples.at(static_cast<size_t>(p));
        out.push_back({s.id, s.label, &s.image, &modality_embedding(s, Modality::genetic)});
    }
    return out;
}

/// Routing similarities for every example under the current prototypes.
template <typename Example>
std::vector<std::vector<double>> all_node_similarities(const ProtoTree& t,
                                                       std::span<const Example> examples) {
    std::vector<std::vector<double>> sims;
    sims.reserve(examples.size());
    for (const auto& ex : examples) {
        if constexpr (std::is_same_v<Example, PairedExample>) {
            sims.push_back(node_similarities(t, ex.image, ex.genetic));
        } else {
            const bool is_img = t.kind == TreeKind::image;
            sims.push_back(node_similarities(t, is_img ? ex.embedding : nullptr,
                                             is_img ? nullptr : ex.embedding));
        }
    }
    return sims;
}

template <typename Example>
void refresh_leaves(ProtoTree& t, std::span<const Example> examples,
                    std::span<const int> labels, int passes) {
    if (passes <= 0) return;
    const auto sims = all_node_similarities(t, examples);
    for (int p = 0; p < passes; ++p) leaf_update(t, sims, labels);
}

template <typename Example>
int hard_prediction(const ProtoTree& t, const Example& ex) {
    std::vector<double> s;
    if constexpr (std::is_same_v<Example, PairedExample>) {
        s = node_similarities(t, ex.image, ex.genetic);
    } else {
        const bool is_img = t.kind == TreeKind::image;
        s = node_similarities(t, is_img ? ex.embedding : nullptr,
                              is_img ? nullptr : ex.embedding);
    }
    return argmax_index(t.leaves[static_cast<size_t>(hard_traverse(t, s))]);
}

double balanced_accuracy_on(const ProtoTree& t, std::span<const LatentExample> examples,
                            int class_count) {
    std::vector<int64_t> total(static_cast<size_t>(class_count), 0);
    std::vector<int64_t> correct(static_cast<size_t>(class_count), 0);
    for (const auto& ex : examples) {
        total[static_cast<size_t>(ex.label)] += 1;
        correct[static_cast<size_t>(ex.label)] += hard_prediction(t, ex) == ex.label;
    }
    double acc = 0.0;
    int present = 0;
    for (int c = 0; c < class_count; ++c) {
        if (total[static_cast<size_t>(c)] == 0) continue;
        acc += static_cast<double>(correct[static_cast<size_t>(c)]) /
               static_cast<double>(total[static_cast<size_t>(c)]);
        ++present;
    }
    return present > 0 ? acc / present : 0.0;
}

}  // namespace

ProtoTree train_prototree(const Dataset& ds, std::span<const int64_t> train_positions,
                          Modality modality, const TreeTrainConfig& cfg, TrainReport* report) {
    const auto& sched = cfg.schedule;
    if (cfg.depth < 1) throw ValidationError("tree training needs depth >= 1");
    if (cfg.leaf_refresh_passes < 0) throw ValidationError("leaf_refresh_passes must be >= 0");
    if (sched.pre_project_epochs < 0 || sched.n_post_project_phases < 0 ||
        sched.epochs_per_phase < 0 || sched.phase_multiplier < 0)
        throw ValidationError("phase schedule counts must be >= 0");
    if (sched.batch_size < 1) throw ValidationError("batch_size must be >= 1");
    if (sched.lr <= 0.0) throw ValidationError("lr must be > 0");

    auto examples = gather_examples(ds, train_positions, modality);
    if (examples.empty()) throw ValidationError("empty training set");
    const int k = ds.manifest.class_count;
    ProtoTree t = make_tree(modality == Modality::image ? TreeKind::image : TreeKind::genetic,
                            cfg.depth, k);

    // Prototypes start as training patches drawn round-robin over classes, so
    // every class contributes a candidate routing detector when P >= K.
    const int dim = examples.front().embedding->depth;
    PrototypeSet protos(t.node_count(), dim);
    std::mt19937_64 rng(mix_seed(sched.seed, 0x7E31));
    std::vector<std::vector<size_t>> by_class(static_cast<size_t>(k));
    for (size_t i = 0; i < examples.size(); ++i)
        by_class[static_cast<size_t>(examples[i].label)].push_back(i);
    for (int p = 0; p < t.node_count(); ++p) {
        const auto& pool = by_class[static_cast<size_t>(p % k)];
        if (pool.empty()) throw ValidationError("training split lost a class");
        std::uniform_int_distribution<size_t> pick_sample(0, pool.size() - 1);
        const auto& ex = examples[pool[pick_sample(rng)]];
        std::uniform_int_distribution<int> pick_h(0, ex.embedding->height - 1);
        std::uniform_int_distribution<int> pick_w(0, ex.embedding->width - 1);
        const int h = pick_h(rng), w = pick_w(rng);
        for (int d = 0; d < dim; ++d)
            protos.row(p)[d] = static_cast<double>(ex.embedding->at(d, h, w));
    }
    (modality == Modality::image ? t.protos_image : t.protos_genetic) = std::move(protos);

    if (report) report->phases.clear();
    if (sched.total_gradient_epochs() == 0) return t;

    std::vector<int> labels;
    labels.reserve(examples.size());
    for (const auto& ex : examples) labels.push_back(ex.label);

    PrototypeSet& active =
        modality == Modality::image ? t.protos_image : t.protos_genetic;
    int global_epoch = 0;
    auto run_phase = [&](const std::string& name, int epochs, bool project_after) {
        PhaseReport phase;
        phase.name = name;
        for (int e = 0; e < epochs; ++e, ++global_epoch) {
            refresh_leaves<LatentExample>(t, examples, labels, cfg.leaf_refresh_passes);
            const double lr =
                sched.lr_step_size > 0
                    ? sched.lr * std::pow(sched.lr_gamma, global_epoch / sched.lr_step_size)
                    : sched.lr;
            auto order = oversample_indices(labels, mix_seed(sched.seed, 0x7E0C + global_epoch));
            double loss_acc = 0.0;
            int batches = 0;
            for (size_t start = 0; start < order.size(); start += sched.batch_size) {
                const size_t stop = std::min(order.size(), start + sched.batch_size);
                std::vector<LatentExample> batch;
                batch.reserve(stop - start);
                for (size_t i = start; i < stop; ++i)
                    batch.push_back(examples[static_cast<size_t>(order[i])]);
                auto g = tree_batch_gradient(t, cfg.loss, batch);
                if (!std::isfinite(g.loss))
                    throw std::runtime_error("non-finite tree training loss in epoch " +
                                             std::to_string(global_epoch));
                for (size_t i = 0; i < active.values.size(); ++i)
                    active.values[i] -= lr * g.protos[i];
                loss_acc += g.loss;
                ++batches;
            }
            phase.epoch_losses.push_back(loss_acc / std::max(1, batches));
        }
        if (project_after) {
            std::vector<int> before;
            before.reserve(examples.size());
            for (const auto& ex : examples) before.push_back(hard_prediction(t, ex));
            active = project_prototypes(active, examples, /*restrict_to_class=*/false);
            refresh_leaves<LatentExample>(t, examples, labels, cfg.leaf_refresh_passes);
            int flips = 0;
            for (size_t i = 0; i < examples.size(); ++i)
                flips += hard_prediction(t, examples[i]) != before[i];
            phase.projection_flip_fraction =
                static_cast<double>(flips) / static_cast<double>(examples.size());
        }
        if (report) report->phases.push_back(std::move(phase));
    };

    run_phase("pre_project", sched.pre_project_epochs, /*project_after=*/true);
    const int per_phase = sched.epochs_per_phase * sched.phase_multiplier;
    for (int i = 0; i < sched.n_post_project_phases; ++i)
        run_phase("post_phase_" + std::to_string(i + 1), per_phase, /*project_after=*/true);
    return t;
}

ProtoTree train_alp(const Dataset& ds, std::span<const int64_t> train_positions,
                    const ProtoTree& image_tree, const ProtoTree& genetic_tree,
                    const AlpConfig& cfg, TrainReport* report) {
    if (cfg.epochs < 0) throw ValidationError("epochs must be >= 0");
    if (cfg.batch_size < 1) throw ValidationError("batch_size must be >= 1");
    if (cfg.lr <= 0.0) throw ValidationError("lr must be > 0");
    if (cfg.leaf_refresh_passes < 0) throw ValidationError("leaf_refresh_passes must be >= 0");

    auto paired = gather_paired(ds, train_positions);
    if (paired.empty()) throw ValidationError("empty training set");
    std::vector<int> labels;
    labels.reserve(paired.size());
    for (const auto& ex : paired) labels.push_back(ex.label);

    const auto stats = leaf_accuracy(image_tree, ds, train_positions);
    double threshold;
    if (cfg.threshold.has_value()) {
        threshold = *cfg.threshold;
    } else {
        auto genetic_examples = gather_examples(ds, train_positions, Modality::genetic);
        threshold = balanced_accuracy_on(genetic_tree, genetic_examples,
                                         genetic_tree.class_count);
    }

    ProtoTree t = init_alp(image_tree, genetic_tree, stats, threshold, cfg.tau);
    if (report) report->phases.clear();
    if (cfg.epochs == 0) return t;

    PhaseReport phase;
    phase.name = "train";
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        refresh_leaves<PairedExample>(t, paired, labels, cfg.leaf_refresh_passes);
        const double lr = cfg.lr_step_size > 0
                              ? cfg.lr * std::pow(cfg.lr_gamma, epoch / cfg.lr_step_size)
                              : cfg.lr;
        auto order = oversample_indices(labels, mix_seed(cfg.seed, 0xA1F0 + epoch));
        double loss_acc = 0.0;
        int batches = 0;
        for (size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const size_t stop = std::min(order.size(), start + cfg.batch_size);
            std::vector<PairedExample> batch;
            batch.reserve(stop - start);
            for (size_t i = start; i < stop; ++i)
                batch.push_back(paired[static_cast<size_t>(order[i])]);
            auto g = alp_batch_gradient(t, cfg.loss, batch, cfg.anti_polarize_routing);
            if (!std::isfinite(g.loss))
                throw std::runtime_error("non-finite multimodal tree loss in epoch " +
                                         std::to_string(epoch));
            for (size_t i = 0; i < t.protos_genetic.values.size(); ++i)
                t.protos_genetic.values[i] -= lr * g.protos[i];
            for (size_t i = 0; i < t.nodes.size(); ++i) t.nodes[i].m -= lr * g.m[i];
            loss_acc += g.loss;
            ++batches;
        }
        phase.epoch_losses.push_back(loss_acc / std::max(1, batches));
    }
    if (report) report->phases.push_back(std::move(phase));

    // Finalization: one modality per node, prototypes snapped to real
    // patches, leaves re-fit to the hardened routing.
    std::vector<int> before;
    before.reserve(paired.size());
    for (const auto& ex : paired) before.push_back(hard_prediction(t, ex));
    clip_modalities(t);
    auto genetic_examples = gather_examples(ds, train_positions, Modality::genetic);
    t.protos_genetic =
        project_prototypes(t.protos_genetic, genetic_examples, /*restrict_to_class=*/false);
    refresh_leaves<PairedExample>(t, paired, labels, cfg.leaf_refresh_passes);
    if (report) {
        PhaseReport finalize;
        finalize.name = "finalize";
        int flips = 0;
        for (size_t i = 0; i < paired.size(); ++i)
            flips += hard_prediction(t, paired[i]) != before[i];
        finalize.projection_flip_fraction =
            static_cast<double>(flips) / static_cast<double>(paired.size());
        report->phases.push_back(std::move(finalize));
    }
    return t;
}

}  // namespace protogate::tree
