#include "protogate/prototype.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace protogate {
namespace {

void require_dims(const EmbeddingMap& e, const PrototypeSet& protos) {
    if (protos.dim != e.depth)
        throw ValidationError("prototype dim " + std::to_string(protos.dim) +
                              " does not match embedding depth " + std::to_string(e.depth));
}

struct CosineParts {
    double dot = 0.0;
    double norm_proto = 0.0;
    double norm_patch = 0.0;
    bool degenerate = false;  // either vector exactly zero
    double cos = 0.0;         // unclamped
};

CosineParts cosine_parts(std::span<const double> proto, const EmbeddingMap& e, int h, int w) {
    CosineParts c;
    double pp = 0.0, bb = 0.0;
    bool identical = true;
    for (int d = 0; d < static_cast<int>(proto.size()); ++d) {
        const double a = proto[d];
        const double b = e.at(d, h, w);
        c.dot += a * b;
        pp += a * a;
        bb += b * b;
        identical = identical && a == b;
    }
    c.norm_proto = std::sqrt(pp);
    c.norm_patch = std::sqrt(bb);
    if (c.norm_proto == 0.0 || c.norm_patch == 0.0) {
        c.degenerate = true;
        return c;
    }
    // Exact-match fast path keeps projected prototypes at similarity exactly 1
    // on their source patch (rounding in the norms would land at 1 - ulp).
    c.cos = identical ? 1.0 : c.dot / (c.norm_proto * c.norm_patch);
    return c;
}

}  // namespace

double patch_similarity(std::span<const double> proto, const EmbeddingMap& e, int h, int w) {
    auto c = cosine_parts(proto, e, h, w);
    if (c.degenerate) return 0.5;
    return (1.0 + std::clamp(c.cos, -1.0, 1.0)) / 2.0;
}

SimilarityMap similarity_map(const EmbeddingMap& e, const PrototypeSet& protos) {
    require_dims(e, protos);
    SimilarityMap m;
    m.proto_count = protos.count();
    m.height = e.height;
    m.width = e.width;
    m.values.resize(static_cast<size_t>(m.proto_count) * m.height * m.width);
    for (int p = 0; p < m.proto_count; ++p) {
        auto row = protos.row(p);
        for (int h = 0; h < m.height; ++h)
            for (int w = 0; w < m.width; ++w) m.at(p, h, w) = patch_similarity(row, e, h, w);
    }
    return m;
}

SimilarityVector max_pool(const SimilarityMap& m) {
    SimilarityVector out;
    out.s.resize(m.proto_count);
    out.argmax.resize(m.proto_count);
    for (int p = 0; p < m.proto_count; ++p) {
        double best = -std::numeric_limits<double>::infinity();
        int bh = 0, bw = 0;
        for (int h = 0; h < m.height; ++h)
            for (int w = 0; w < m.width; ++w)
                if (m.at(p, h, w) > best) {
                    best = m.at(p, h, w);
                    bh = h;
                    bw = w;
                }
        out.s[p] = best;
        out.argmax[p] = {bh, bw};
    }
    return out;
}

std::vector<double> head_forward(const SimilarityVector& s, const LinearHead& head) {
    if (static_cast<int>(s.s.size()) != head.proto_count)
        throw ValidationError("similarity vector size does not match head width");
    std::vector<double> y(head.class_count, 0.0);
    for (int k = 0; k < head.class_count; ++k) {
        double acc = head.bias.empty() ? 0.0 : head.bias[k];
        for (int p = 0; p < head.proto_count; ++p) acc += head.at(k, p) * s.s[p];
        y[k] = acc;
    }
    return y;
}

namespace {

/// (value, prototype index) of the max pooled similarity over a subset;
/// lowest prototype index wins ties. Returns index -1 for an empty subset.
template <class Pred>
std::pair<double, int> max_pooled_over(const SimilarityVector& pooled, Pred&& include) {
    double best = -std::numeric_limits<double>::infinity();
    int best_p = -1;
    for (int p = 0; p < static_cast<int>(pooled.s.size()); ++p)
        if (include(p) && pooled.s[p] > best) {
            best = pooled.s[p];
            best_p = p;
        }
    return {best, best_p};
}

}  // namespace

std::pair<double, double> cluster_separation_loss(const SimilarityMap& m, int label,
                                                  const PrototypeSet& protos) {
    if (protos.count() != m.proto_count)
        throw ValidationError("similarity map and prototype set disagree on P");
    auto pooled = max_pool(m);
    if (!protos.has_classes()) {
        auto [best, p] = max_pooled_over(pooled, [](int) { return true; });
        return {-best, 0.0};
    }
    auto [own, own_p] = max_pooled_over(pooled, [&](int p) { return protos.class_of[p] == label; });
    if (own_p < 0)
        throw ValidationError("no prototype assigned to class " + std::to_string(label));
    auto [other, other_p] =
        max_pooled_over(pooled, [&](int p) { return protos.class_of[p] != label; });
    return {-own, other_p < 0 ? 0.0 : other};
}

double orthogonality_loss(const PrototypeSet& protos) {
    const int p_count = protos.count();
    const int dim = protos.dim;
    std::vector<double> unit(static_cast<size_t>(p_count) * dim);
    for (int p = 0; p < p_count; ++p) {
        auto row = protos.row(p);
        double norm = std::sqrt(std::inner_product(row.begin(), row.end(), row.begin(), 0.0));
        if (norm == 0.0) throw ValidationError("orthogonality loss undefined for a zero prototype");
        for (int d = 0; d < dim; ++d) unit[static_cast<size_t>(p) * dim + d] = row[d] / norm;
    }
    double loss = 0.0;
    for (int r = 0; r < p_count; ++r)
        for (int c = 0; c < p_count; ++c) {
            double g = 0.0;
            for (int d = 0; d < dim; ++d)
                g += unit[static_cast<size_t>(r) * dim + d] * unit[static_cast<size_t>(c) * dim + d];
            const double delta = g - (r == c ? 1.0 : 0.0);
            loss += delta * delta;
        }
    return loss;
}

double variability_loss(const SimilarityMap& m) {
    if (m.proto_count < 2)
        throw ValidationError("variability loss needs at least two prototypes");
    double acc = 0.0;
    for (int h = 0; h < m.height; ++h)
        for (int w = 0; w < m.width; ++w) {
            double mean = 0.0;
            for (int p = 0; p < m.proto_count; ++p) mean += m.at(p, h, w);
            mean /= m.proto_count;
            double var = 0.0;
            for (int p = 0; p < m.proto_count; ++p) {
                const double d = m.at(p, h, w) - mean;
                var += d * d;
            }
            acc += var / (m.proto_count - 1);
        }
    return -acc / (static_cast<double>(m.height) * m.width);
}

PrototypeSet project_prototypes(const PrototypeSet& protos, std::span<const LatentExample> examples,
                                bool restrict_to_class) {
    if (restrict_to_class && !protos.has_classes())
        throw ValidationError("class-restricted projection requires class assignments");

    PrototypeSet out = protos;
    out.provenance.assign(static_cast<size_t>(protos.count()), PatchProvenance{});

    for (int p = 0; p < protos.count(); ++p) {
        auto proto = protos.row(p);
        auto allowed = [&](const LatentExample& ex) {
            return !restrict_to_class || ex.label == protos.class_of[p];
        };

        // Pass 1: a bit-identical candidate patch keeps the prototype as-is,
        // which is what makes projection idempotent.
        bool identical = false;
        for (const auto& ex : examples) {
            if (!allowed(ex)) continue;
            require_dims(*ex.embedding, protos);
            for (int h = 0; h < ex.embedding->height && !identical; ++h)
                for (int w = 0; w < ex.embedding->width && !identical; ++w) {
                    bool same = true;
                    for (int d = 0; d < protos.dim; ++d)
                        if (static_cast<double>(ex.embedding->at(d, h, w)) != proto[d]) {
                            same = false;
                            break;
                        }
                    if (same) {
                        out.provenance[p] = {ex.sample_id, h, w};
                        identical = true;
                    }
                }
            if (identical) break;
        }
        if (identical) continue;

        // Pass 2: strict-argmax over candidates; earliest (sample, h, w) wins.
        double best = -std::numeric_limits<double>::infinity();
        PatchProvenance best_ref;
        for (const auto& ex : examples) {
            if (!allowed(ex)) continue;
            for (int h = 0; h < ex.embedding->height; ++h)
                for (int w = 0; w < ex.embedding->width; ++w) {
                    const double sim = patch_similarity(proto, *ex.embedding, h, w);
                    if (sim > best) {
                        best = sim;
                        best_ref = {ex.sample_id, h, w};
                    }
                }
        }
        if (best_ref.sample_id < 0)
            throw ValidationError("no candidate patches for prototype " + std::to_string(p));

        for (const auto& ex : examples) {
            if (ex.sample_id != best_ref.sample_id) continue;
            for (int d = 0; d < protos.dim; ++d)
                out.row(p)[d] = static_cast<double>(ex.embedding->at(d, best_ref.h, best_ref.w));
            break;
        }
        out.provenance[p] = best_ref;
    }
    return out;
}

std::vector<LocalMatch> local_analysis(const EmbeddingMap& e, const PrototypeSet& protos) {
    auto pooled = max_pool(similarity_map(e, protos));
    std::vector<LocalMatch> out;
    out.reserve(pooled.s.size());
    for (int p = 0; p < static_cast<int>(pooled.s.size()); ++p)
        out.push_back({p, pooled.s[p], pooled.argmax[p].first, pooled.argmax[p].second});
    std::stable_sort(out.begin(), out.end(), [](const LocalMatch& a, const LocalMatch& b) {
        return a.similarity > b.similarity;
    });
    return out;
}

std::vector<GlobalMatch> global_analysis(const PrototypeSet& protos, int proto_index,
                                         std::span<const LatentExample> examples, int top_n) {
    if (proto_index < 0 || proto_index >= protos.count())
        throw ValidationError("prototype index out of range");
    if (top_n < 1) throw ValidationError("top_n must be >= 1");
    auto proto = protos.row(proto_index);

    std::vector<GlobalMatch> out;
    out.reserve(examples.size());
    for (const auto& ex : examples) {
        require_dims(*ex.embedding, protos);
        double best = -std::numeric_limits<double>::infinity();
        int bh = 0, bw = 0;
        for (int h = 0; h < ex.embedding->height; ++h)
            for (int w = 0; w < ex.embedding->width; ++w) {
                const double sim = patch_similarity(proto, *ex.embedding, h, w);
                if (sim > best) {
                    best = sim;
                    bh = h;
                    bw = w;
                }
            }
        out.push_back({ex.sample_id, best, bh, bw});
    }
    std::stable_sort(out.begin(), out.end(), [](const GlobalMatch& a, const GlobalMatch& b) {
        return a.similarity > b.similarity;
    });
    if (static_cast<int>(out.size()) > top_n) out.resize(static_cast<size_t>(top_n));
    return out;
}

LinearHead init_class_head(int class_count, const std::vector<int>& class_of,
                           double correct_weight, double incorrect_weight) {
    if (class_of.empty()) throw ValidationError("class head needs class assignments");
    LinearHead head(class_count, static_cast<int>(class_of.size()));
    for (int p = 0; p < head.proto_count; ++p) {
        if (class_of[p] < 0 || class_of[p] >= class_count)
            throw ValidationError("prototype class assignment out of range");
        for (int k = 0; k < class_count; ++k)
            head.at(k, p) = class_of[p] == k ? correct_weight : incorrect_weight;
    }
    return head;
}

double head_incorrect_l1(const LinearHead& head, const std::vector<int>& class_of) {
    if (static_cast<int>(class_of.size()) != head.proto_count)
        throw ValidationError("class assignment size does not match head width");
    double acc = 0.0;
    for (int k = 0; k < head.class_count; ++k)
        for (int p = 0; p < head.proto_count; ++p)
            if (class_of[p] != k) acc += std::abs(head.at(k, p));
    return acc;
}

// ---------------------------------------------------------------------------
// Gradients
// ---------------------------------------------------------------------------

void patch_similarity_backward(std::span<const double> proto, const EmbeddingMap& e, int h, int w,
                               double upstream, std::span<double> grad_proto) {
    auto c = cosine_parts(proto, e, h, w);
    if (c.degenerate) return;  // constant 0.5 region
    const double inv = 1.0 / (c.norm_proto * c.norm_patch);
    const double inv_pp = c.cos / (c.norm_proto * c.norm_proto);
    for (int d = 0; d < static_cast<int>(proto.size()); ++d) {
        const double dcos = e.at(d, h, w) * inv - proto[d] * inv_pp;
        grad_proto[d] += upstream * 0.5 * dcos;
    }
}

void pooled_similarity_backward(const EmbeddingMap& e, const PrototypeSet& protos,
                                const SimilarityVector& s, std::span<const double> grad_s,
                                std::vector<double>& grad_protos) {
    grad_protos.resize(protos.values.size(), 0.0);
    for (int p = 0; p < protos.count(); ++p) {
        if (grad_s[p] == 0.0) continue;
        auto [h, w] = s.argmax[p];
        std::span<double> row{grad_protos.data() + static_cast<size_t>(p) * protos.dim,
                              static_cast<size_t>(protos.dim)};
        patch_similarity_backward(protos.row(p), e, h, w, grad_s[p], row);
    }
}

void head_backward(const SimilarityVector& s, const LinearHead& head,
                   std::span<const double> grad_logits, std::vector<double>* grad_weights,
                   std::vector<double>* grad_bias, std::vector<double>* grad_s) {
    if (grad_weights) grad_weights->resize(head.weights.size(), 0.0);
    if (grad_bias) grad_bias->resize(static_cast<size_t>(head.class_count), 0.0);
    if (grad_s) grad_s->resize(s.s.size(), 0.0);
    for (int k = 0; k < head.class_count; ++k) {
        const double g = grad_logits[k];
        if (g == 0.0) continue;
        if (grad_bias) (*grad_bias)[k] += g;
        for (int p = 0; p < head.proto_count; ++p) {
            if (grad_weights)
                (*grad_weights)[static_cast<size_t>(k) * head.proto_count + p] += g * s.s[p];
            if (grad_s) (*grad_s)[p] += g * head.at(k, p);
        }
    }
}

void cluster_separation_backward(const SimilarityMap& m, int label, const PrototypeSet& protos,
                                 const EmbeddingMap& e, double upstream_cluster,
                                 double upstream_separation, std::vector<double>& grad_protos) {
    grad_protos.resize(protos.values.size(), 0.0);
    auto pooled = max_pool(m);

    auto add = [&](int p, double upstream) {
        if (p < 0 || upstream == 0.0) return;
        auto [h, w] = pooled.argmax[p];
        std::span<double> row{grad_protos.data() + static_cast<size_t>(p) * protos.dim,
                              static_cast<size_t>(protos.dim)};
        patch_similarity_backward(protos.row(p), e, h, w, upstream, row);
    };

    if (!protos.has_classes()) {
        auto [best, p] = max_pooled_over(pooled, [](int) { return true; });
        add(p, -upstream_cluster);  // loss is -max similarity
        return;
    }
    auto [own, own_p] = max_pooled_over(pooled, [&](int p) { return protos.class_of[p] == label; });
    if (own_p < 0)
        throw ValidationError("no prototype assigned to class " + std::to_string(label));
    auto [other, other_p] =
        max_pooled_over(pooled, [&](int p) { return protos.class_of[p] != label; });
    add(own_p, -upstream_cluster);
    add(other_p, upstream_separation);
}

void orthogonality_backward(const PrototypeSet& protos, double upstream,
                            std::vector<double>& grad_protos) {
    grad_protos.resize(protos.values.size(), 0.0);
    const int p_count = protos.count();
    const int dim = protos.dim;

    std::vector<double> unit(static_cast<size_t>(p_count) * dim);
    std::vector<double> norm(p_count);
    for (int p = 0; p < p_count; ++p) {
        auto row = protos.row(p);
        norm[p] = std::sqrt(std::inner_product(row.begin(), row.end(), row.begin(), 0.0));
        if (norm[p] == 0.0)
            throw ValidationError("orthogonality loss undefined for a zero prototype");
        for (int d = 0; d < dim; ++d) unit[static_cast<size_t>(p) * dim + d] = row[d] / norm[p];
    }

    // dL/dU = 4 (G - I) U with G = U U^T, then through the normalization:
    // dL/dp_r = (1/|p_r|) (I - u_r u_r^T) dL/du_r.
    std::vector<double> gram(static_cast<size_t>(p_count) * p_count, 0.0);
    for (int r = 0; r < p_count; ++r)
        for (int c = 0; c < p_count; ++c) {
            double g = 0.0;
            for (int d = 0; d < dim; ++d)
                g += unit[static_cast<size_t>(r) * dim + d] * unit[static_cast<size_t>(c) * dim + d];
            gram[static_cast<size_t>(r) * p_count + c] = g - (r == c ? 1.0 : 0.0);
        }
    for (int r = 0; r < p_count; ++r) {
        std::vector<double> du(dim, 0.0);
        for (int c = 0; c < p_count; ++c) {
            const double g = 4.0 * gram[static_cast<size_t>(r) * p_count + c];
            if (g == 0.0) continue;
            for (int d = 0; d < dim; ++d) du[d] += g * unit[static_cast<size_t>(c) * dim + d];
        }
        double dot = 0.0;
        for (int d = 0; d < dim; ++d) dot += du[d] * unit[static_cast<size_t>(r) * dim + d];
        for (int d = 0; d < dim; ++d) {
            const double dp = (du[d] - dot * unit[static_cast<size_t>(r) * dim + d]) / norm[r];
            grad_protos[static_cast<size_t>(r) * dim + d] += upstream * dp;
        }
    }
}

void variability_backward(const SimilarityMap& m, const EmbeddingMap& e,
                          const PrototypeSet& protos, double upstream,
                          std::vector<double>& grad_protos) {
    if (m.proto_count < 2)
        throw ValidationError("variability loss needs at least two prototypes");
    grad_protos.resize(protos.values.size(), 0.0);
    const double scale = -upstream * 2.0 /
                         (static_cast<double>(m.height) * m.width * (m.proto_count - 1));
    for (int h = 0; h < m.height; ++h)
        for (int w = 0; w < m.width; ++w) {
            double mean = 0.0;
            for (int p = 0; p < m.proto_count; ++p) mean += m.at(p, h, w);
            mean /= m.proto_count;
            for (int p = 0; p < m.proto_count; ++p) {
                const double g = scale * (m.at(p, h, w) - mean);
                if (g == 0.0) continue;
                std::span<double> row{grad_protos.data() + static_cast<size_t>(p) * protos.dim,
                                      static_cast<size_t>(protos.dim)};
                patch_similarity_backward(protos.row(p), e, h, w, g, row);
            }
        }
}

void head_incorrect_l1_backward(const LinearHead& head, const std::vector<int>& class_of,
                                double upstream, std::vector<double>& grad_weights) {
    grad_weights.resize(head.weights.size(), 0.0);
    for (int k = 0; k < head.class_count; ++k)
        for (int p = 0; p < head.proto_count; ++p) {
            if (class_of[p] == k) continue;
            const double w = head.at(k, p);
            if (w != 0.0)
                grad_weights[static_cast<size_t>(k) * head.proto_count + p] +=
                    upstream * (w > 0.0 ? 1.0 : -1.0);
        }
}

}  // namespace protogate
