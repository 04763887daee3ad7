#include "protogate/protopnet.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace protogate {

std::vector<double> protopnet_logits(const ProtoPNet& model, const EmbeddingMap& e) {
    return head_forward(max_pool(similarity_map(e, model.protos)), model.head);
}

const EmbeddingMap& modality_embedding(const Sample& s, Modality modality) {
    if (modality == Modality::image) return s.image;
    if (!s.genetic)
        throw ValidationError("sample " + std::to_string(s.id) + " has no genetic embedding");
    return *s.genetic;
}

namespace {

std::vector<LatentExample> gather_examples(const Dataset& ds,
                                           std::span<const int64_t> positions, Modality modality) {
    std::vector<LatentExample> out;
    out.reserve(positions.size());
    for (int64_t p : positions) {
        const Sample& s = ds.samples.at(static_cast<size_t>(p));
        out.push_back({s.id, s.label, &modality_embedding(s, modality)});
    }
    return out;
}

ProtoPNet initialize(const Dataset& ds, const std::vector<LatentExample>& examples,
                     Modality modality, const ProtoPNetConfig& cfg) {
    const int k = ds.manifest.class_count;
    if (k < 2) throw ValidationError("training needs at least two classes");
    if (cfg.protos_per_class < 1) throw ValidationError("protos_per_class must be >= 1");

    std::vector<std::vector<const LatentExample*>> by_class(k);
    for (const auto& ex : examples) by_class[ex.label].push_back(&ex);
    for (int c = 0; c < k; ++c)
        if (by_class[c].empty())
            throw ValidationError("class " + std::to_string(c) + " has no training samples");

    const int dim = examples.front().embedding->depth;
    ProtoPNet model;
    model.modality = modality;
    model.class_count = k;
    model.protos = PrototypeSet(k * cfg.protos_per_class, dim);
    model.protos.class_of.resize(static_cast<size_t>(k) * cfg.protos_per_class);

    // Prototypes start as randomly drawn own-class latent patches.
    std::mt19937_64 rng(mix_seed(cfg.schedule.seed, 0x1717));
    int p = 0;
    for (int c = 0; c < k; ++c) {
        std::uniform_int_distribution<size_t> pick_sample(0, by_class[c].size() - 1);
        for (int j = 0; j < cfg.protos_per_class; ++j, ++p) {
            const auto& ex = *by_class[c][pick_sample(rng)];
            std::uniform_int_distribution<int> pick_h(0, ex.embedding->height - 1);
            std::uniform_int_distribution<int> pick_w(0, ex.embedding->width - 1);
            const int h = pick_h(rng), w = pick_w(rng);
            for (int d = 0; d < dim; ++d)
                model.protos.row(p)[d] = static_cast<double>(ex.embedding->at(d, h, w));
            model.protos.class_of[p] = c;
        }
    }

    const double incorrect = cfg.incorrect_class_connection.value_or(
        modality == Modality::image ? -0.5 : 0.0);
    model.head =
        init_class_head(k, model.protos.class_of, cfg.correct_class_connection, incorrect);
    return model;
}

}  // namespace

BatchGradient batch_gradient(const ProtoPNet& model, const LossCoefficients& coefs,
                             std::span<const LatentExample> batch) {
    BatchGradient g;
    g.protos.assign(model.protos.values.size(), 0.0);
    g.weights.assign(model.head.weights.size(), 0.0);
    if (batch.empty()) return g;

    const double inv_b = 1.0 / static_cast<double>(batch.size());
    for (const auto& ex : batch) {
        auto m = similarity_map(*ex.embedding, model.protos);
        auto pooled = max_pool(m);
        auto logits = head_forward(pooled, model.head);

        g.loss += inv_b * softmax_cross_entropy(logits, ex.label);
        std::vector<double> grad_logits(logits.size(), 0.0);
        softmax_cross_entropy_backward(logits, ex.label, inv_b, grad_logits);
        std::vector<double> grad_s;
        head_backward(pooled, model.head, grad_logits, &g.weights, nullptr, &grad_s);
        pooled_similarity_backward(*ex.embedding, model.protos, pooled, grad_s, g.protos);

        auto [clst, sep] = cluster_separation_loss(m, ex.label, model.protos);
        // coefs.cluster multiplies max_own_sim = -clst; coefs.separation
        // multiplies max_other_sim = sep.
        g.loss += inv_b * (coefs.cluster * -clst + coefs.separation * sep);
        cluster_separation_backward(m, ex.label, model.protos, *ex.embedding,
                                    -coefs.cluster * inv_b, coefs.separation * inv_b, g.protos);
    }

    g.loss += coefs.l1 * head_incorrect_l1(model.head, model.protos.class_of);
    head_incorrect_l1_backward(model.head, model.protos.class_of, coefs.l1, g.weights);
    return g;
}

GradCheckReport gradient_check(const ProtoPNet& model, const LossCoefficients& coefs,
                               std::span<const LatentExample> batch, double eps, double tol,
                               int corrupt_index, double corrupt_delta) {
    ProtoPNet probe = model;
    auto analytic = batch_gradient(probe, coefs, batch);
    std::vector<double> grad = analytic.protos;
    grad.insert(grad.end(), analytic.weights.begin(), analytic.weights.end());
    if (corrupt_index >= 0 && corrupt_index < static_cast<int>(grad.size()))
        grad[static_cast<size_t>(corrupt_index)] += corrupt_delta;

    const size_t n_protos = probe.protos.values.size();
    auto param = [&](size_t i) -> double& {
        return i < n_protos ? probe.protos.values[i] : probe.head.weights[i - n_protos];
    };

    double max_diff = 0.0, max_a = 0.0, max_f = 0.0;
    for (size_t i = 0; i < grad.size(); ++i) {
        double& x = param(i);
        const double keep = x;
        x = keep + eps;
        const double up = batch_gradient(probe, coefs, batch).loss;
        x = keep - eps;
        const double down = batch_gradient(probe, coefs, batch).loss;
        x = keep;
        const double fd = (up - down) / (2.0 * eps);
        max_diff = std::max(max_diff, std::abs(grad[i] - fd));
        max_a = std::max(max_a, std::abs(grad[i]));
        max_f = std::max(max_f, std::abs(fd));
    }
    GradCheckReport report;
    report.max_relative_error = max_diff / std::max({max_a, max_f, 1e-8});
    report.pass = report.max_relative_error < tol;
    return report;
}

namespace {

std::vector<int> train_argmaxes(const ProtoPNet& model, const std::vector<LatentExample>& examples) {
    std::vector<int> out;
    out.reserve(examples.size());
    for (const auto& ex : examples) {
        auto y = protopnet_logits(model, *ex.embedding);
        out.push_back(argmax_index(y));
    }
    return out;
}

double project_and_report_flips(ProtoPNet& model, const std::vector<LatentExample>& examples) {
    auto before = train_argmaxes(model, examples);
    model.protos = project_prototypes(model.protos, examples, /*restrict_to_class=*/true);
    auto after = train_argmaxes(model, examples);
    int flips = 0;
    for (size_t i = 0; i < before.size(); ++i) flips += before[i] != after[i];
    return static_cast<double>(flips) / static_cast<double>(before.size());
}

}  // namespace

ProtoPNet train_protopnet(const Dataset& ds, std::span<const int64_t> train_positions,
                          Modality modality, const ProtoPNetConfig& cfg, TrainReport* report) {
    const auto& sched = cfg.schedule;
    if (sched.pre_project_epochs < 0 || sched.n_post_project_phases < 0 ||
        sched.epochs_per_phase < 0 || sched.phase_multiplier < 0)
        throw ValidationError("phase schedule counts must be >= 0");
    if (sched.batch_size < 1) throw ValidationError("batch_size must be >= 1");
    if (sched.lr <= 0.0) throw ValidationError("lr must be > 0");

    auto examples = gather_examples(ds, train_positions, modality);
    if (examples.empty()) throw ValidationError("empty training set");
    ProtoPNet model = initialize(ds, examples, modality, cfg);
    if (report) report->phases.clear();
    if (sched.total_gradient_epochs() == 0) return model;

    std::vector<int> labels;
    labels.reserve(examples.size());
    for (const auto& ex : examples) labels.push_back(ex.label);

    int global_epoch = 0;
    auto run_phase = [&](const std::string& name, int epochs, bool project_after) {
        PhaseReport phase;
        phase.name = name;
        for (int e = 0; e < epochs; ++e, ++global_epoch) {
            const double lr =
                sched.lr_step_size > 0
                    ? sched.lr * std::pow(sched.lr_gamma, global_epoch / sched.lr_step_size)
                    : sched.lr;
            auto order = oversample_indices(labels, mix_seed(sched.seed, 0xE70C + global_epoch));
            double loss_acc = 0.0;
            int batches = 0;
            for (size_t start = 0; start < order.size(); start += sched.batch_size) {
                const size_t stop = std::min(order.size(), start + sched.batch_size);
                std::vector<LatentExample> batch;
                batch.reserve(stop - start);
                for (size_t i = start; i < stop; ++i)
                    batch.push_back(examples[static_cast<size_t>(order[i])]);
                auto g = batch_gradient(model, cfg.loss, batch);
                for (size_t i = 0; i < model.protos.values.size(); ++i)
                    model.protos.values[i] -= lr * g.protos[i];
                for (size_t i = 0; i < model.head.weights.size(); ++i)
                    model.head.weights[i] -= lr * g.weights[i];
                loss_acc += g.loss;
                ++batches;
            }
            phase.epoch_losses.push_back(loss_acc / std::max(1, batches));
        }
        if (project_after) phase.projection_flip_fraction = project_and_report_flips(model, examples);
        if (report) report->phases.push_back(std::move(phase));
    };

    run_phase("pre_project", sched.pre_project_epochs, /*project_after=*/true);
    const int per_phase = sched.epochs_per_phase * sched.phase_multiplier;
    for (int i = 0; i < sched.n_post_project_phases; ++i)
        run_phase("post_phase_" + std::to_string(i + 1), per_phase, /*project_after=*/true);
    return model;
}

}  // namespace protogate
