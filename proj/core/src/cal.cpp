#include "protogate/cal.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <set>

#include <nlohmann/json.hpp>

#include "protogate/serialize.hpp"

namespace protogate::cal {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

void require(bool ok, const char* msg) {
    if (!ok) throw ValidationError(msg);
}

void require_mixer(const ModalityMixer& mixer, size_t k) {
    require(mixer.m.size() == 1 || mixer.m.size() == k,
            "mixer needs one weight per class or a single broadcast weight");
}

void require_band(const ConformalBand& band, size_t k) {
    require(!band.delta.empty(), "conformal band is empty");
    require(band.delta.size() == 1 || band.delta.size() == k,
            "band needs one delta per class or a single broadcast delta");
}

}  // namespace

std::string to_string(BandMode mode) {
    return mode == BandMode::per_logit ? "per_logit" : "l_infinity";
}

BandMode band_mode_from_string(const std::string& name) {
    if (name == "per_logit") return BandMode::per_logit;
    if (name == "l_infinity") return BandMode::l_infinity;
    throw ValidationError("unknown band mode: " + name);
}

bool ConformalBand::is_finite() const {
    return !delta.empty() &&
           std::all_of(delta.begin(), delta.end(), [](double d) { return std::isfinite(d); });
}

long conformal_rank(int n_cal, double alpha) {
    // The product is computed in doubles, so shave one part in 1e12 to keep
    // exact-integer cases (e.g. 10 * 0.9) from rounding up a full rank.
    const double q = (n_cal + 1) * (1.0 - alpha);
    const long rank = static_cast<long>(std::ceil(q * (1.0 - 1e-12)));
    return std::max<long>(rank, 1);
}

ConformalBand calibrate(const std::vector<std::vector<double>>& residuals, double alpha,
                        BandMode mode, bool bonferroni) {
    require(!residuals.empty(), "empty calibration set");
    require(alpha >= 0.0 && alpha < 1.0, "alpha must lie in [0, 1)");
    const int n = static_cast<int>(residuals.size());
    const size_t k = residuals.front().size();
    require(k >= 1, "residual rows need at least one class");
    for (const auto& row : residuals) {
        require(row.size() == k, "ragged residual matrix");
        for (double r : row) require(std::isfinite(r), "non-finite residual");
    }

    ConformalBand band;
    band.mode = mode;
    band.alpha = alpha;
    band.n_cal = n;
    if (mode == BandMode::per_logit) {
        const double a = bonferroni ? alpha / static_cast<double>(k) : alpha;
        const long rank = conformal_rank(n, a);
        band.delta.assign(k, kInf);
        if (rank <= n) {
            std::vector<double> col(static_cast<size_t>(n));
            for (size_t j = 0; j < k; ++j) {
                for (int i = 0; i < n; ++i) col[static_cast<size_t>(i)] = std::abs(residuals[static_cast<size_t>(i)][j]);
                std::nth_element(col.begin(), col.begin() + (rank - 1), col.end());
                band.delta[j] = col[static_cast<size_t>(rank - 1)];
            }
        }
    } else {
        const long rank = conformal_rank(n, alpha);
        band.delta.assign(1, kInf);
        if (rank <= n) {
            std::vector<double> scores(static_cast<size_t>(n), 0.0);
            for (int i = 0; i < n; ++i)
                for (double r : residuals[static_cast<size_t>(i)])
                    scores[static_cast<size_t>(i)] = std::max(scores[static_cast<size_t>(i)], std::abs(r));
            std::nth_element(scores.begin(), scores.begin() + (rank - 1), scores.end());
            band.delta[0] = scores[static_cast<size_t>(rank - 1)];
        }
    }
    return band;
}

std::vector<double> mix_logits(std::span<const double> y_img, std::span<const double> y_gen,
                               const ModalityMixer& mixer) {
    require(!y_img.empty() && y_img.size() == y_gen.size(),
            "mix_logits needs equal non-empty logit vectors");
    require_mixer(mixer, y_img.size());
    std::vector<double> out(y_img.size());
    for (size_t j = 0; j < out.size(); ++j) {
        const double w = sigmoid(mixer.at(static_cast<int>(j)));
        const double v = 1.0 - w;
        // A weight of exactly 0 kills its term outright so a saturated mixer
        // never multiplies an infinite logit into NaN.
        out[j] = (w == 0.0 ? 0.0 : w * y_img[j]) + (v == 0.0 ? 0.0 : v * y_gen[j]);
    }
    return out;
}

std::vector<double> predict_genetic_logits(const SimilarityVector& s_img,
                                           const LinearHead& predictor) {
    return head_forward(s_img, predictor);
}

std::vector<double> worst_case_logits(std::span<const double> y_img,
                                      std::span<const double> y_gen_hat,
                                      const ConformalBand& band, const ModalityMixer& mixer,
                                      int k) {
    require(!y_img.empty() && y_img.size() == y_gen_hat.size(),
            "worst_case_logits needs equal non-empty logit vectors");
    require_mixer(mixer, y_img.size());
    require_band(band, y_img.size());
    require(k >= 0 && k < static_cast<int>(y_img.size()), "predicted class out of range");
    std::vector<double> out(y_img.size());
    for (size_t j = 0; j < out.size(); ++j) {
        const double w = sigmoid(mixer.at(static_cast<int>(j)));
        const double v = 1.0 - w;
        const double shifted =
            y_gen_hat[j] + (static_cast<int>(j) == k ? -band.at(static_cast<int>(j))
                                                     : band.at(static_cast<int>(j)));
        out[j] = (w == 0.0 ? 0.0 : w * y_img[j]) + (v == 0.0 ? 0.0 : v * shifted);
    }
    return out;
}

bool abstention_decision(std::span<const double> worst_case, int k) {
    require(k >= 0 && k < static_cast<int>(worst_case.size()), "predicted class out of range");
    for (size_t j = 0; j < worst_case.size(); ++j) {
        if (static_cast<int>(j) == k) continue;
        if (!(worst_case[static_cast<size_t>(k)] > worst_case[j])) return false;
    }
    return true;
}

double worst_case_margin(std::span<const double> worst_case, int k) {
    require(worst_case.size() >= 2, "margin needs at least two classes");
    require(k >= 0 && k < static_cast<int>(worst_case.size()), "predicted class out of range");
    double other = -kInf;
    for (size_t j = 0; j < worst_case.size(); ++j)
        if (static_cast<int>(j) != k) other = std::max(other, worst_case[j]);
    return worst_case[static_cast<size_t>(k)] - other;
}

double margin_loss(std::span<const double> worst_case, int k) {
    require(worst_case.size() >= 2, "margin loss needs at least two classes");
    require(k >= 0 && k < static_cast<int>(worst_case.size()), "predicted class out of range");
    std::vector<double> t;
    t.reserve(worst_case.size() - 1);
    for (size_t j = 0; j < worst_case.size(); ++j)
        if (static_cast<int>(j) != k) t.push_back(worst_case[j] - worst_case[static_cast<size_t>(k)]);
    return logsumexp(t);
}

double modality_loss(const ModalityMixer& mixer, int class_count) {
    require(class_count >= 1, "modality loss needs at least one class");
    require_mixer(mixer, static_cast<size_t>(class_count));
    double acc = 0.0;
    for (int j = 0; j < class_count; ++j) acc -= sigmoid(mixer.at(j));
    return acc;
}

double predictor_loss(std::span<const double> y_gen, std::span<const double> predicted) {
    require(!y_gen.empty() && y_gen.size() == predicted.size(),
            "predictor loss needs equal non-empty logit vectors");
    double acc = 0.0;
    for (size_t j = 0; j < y_gen.size(); ++j) {
        const double d = y_gen[j] - predicted[j];
        acc += d * d;
    }
    return acc / static_cast<double>(y_gen.size());
}

CalModel make_cal_model(const ProtoPNet& image_net, const ProtoPNet& genetic_net,
                        bool scalar_modality, double initial_modality, bool k_from_image_only) {
    require(image_net.modality == Modality::image && genetic_net.modality == Modality::genetic,
            "mixed model needs one image net and one genetic net");
    require(image_net.class_count == genetic_net.class_count,
            "modality nets disagree on class count");
    require(image_net.class_count >= 2, "mixed model needs at least two classes");
    require(std::isfinite(initial_modality), "initial modality weight must be finite");
    CalModel model;
    model.image_net = image_net;
    model.genetic_net = genetic_net;
    model.mixer.m.assign(scalar_modality ? 1 : static_cast<size_t>(image_net.class_count),
                         initial_modality);
    model.predictor = image_net.head;
    model.k_from_image_only = k_from_image_only;
    return model;
}

std::vector<CalFeatures> cal_features(const Dataset& ds, std::span<const int64_t> positions,
                                      const ProtoPNet& image_net, const ProtoPNet& genetic_net) {
    std::vector<CalFeatures> out;
    out.reserve(positions.size());
    for (int64_t pos : positions) {
        require(pos >= 0 && pos < static_cast<int64_t>(ds.samples.size()),
                "split position out of range");
        const Sample& s = ds.samples[static_cast<size_t>(pos)];
        CalFeatures f;
        f.sample_id = s.id;
        f.label = s.label;
        f.s_img = max_pool(similarity_map(modality_embedding(s, Modality::image), image_net.protos));
        f.s_gen =
            max_pool(similarity_map(modality_embedding(s, Modality::genetic), genetic_net.protos));
        out.push_back(std::move(f));
    }
    return out;
}

std::vector<std::vector<double>> prediction_residuals(const CalModel& model,
                                                      std::span<const CalFeatures> feats) {
    std::vector<std::vector<double>> residuals;
    residuals.reserve(feats.size());
    for (const CalFeatures& f : feats) {
        const std::vector<double> y_gen = head_forward(f.s_gen, model.genetic_net.head);
        const std::vector<double> pred = head_forward(f.s_img, model.predictor);
        std::vector<double> row(y_gen.size());
        for (size_t j = 0; j < row.size(); ++j) row[j] = y_gen[j] - pred[j];
        residuals.push_back(std::move(row));
    }
    return residuals;
}

ConformalBand calibrate_model(const CalModel& model, std::span<const CalFeatures> feats,
                              double alpha, BandMode mode, bool bonferroni) {
    return calibrate(prediction_residuals(model, feats), alpha, mode, bonferroni);
}

CalForward cal_forward(const CalModel& model, const ConformalBand& band, const CalFeatures& f) {
    CalForward fwd;
    fwd.image_logits = head_forward(f.s_img, model.image_net.head);
    fwd.predicted_genetic = head_forward(f.s_img, model.predictor);
    fwd.genetic_logits = head_forward(f.s_gen, model.genetic_net.head);
    fwd.gate_logits = mix_logits(fwd.image_logits, fwd.predicted_genetic, model.mixer);
    fwd.k = argmax_index(model.k_from_image_only ? fwd.image_logits : fwd.gate_logits);
    fwd.worst_case =
        worst_case_logits(fwd.image_logits, fwd.predicted_genetic, band, model.mixer, fwd.k);
    fwd.abstain = abstention_decision(fwd.worst_case, fwd.k);
    fwd.mixed_true = mix_logits(fwd.image_logits, fwd.genetic_logits, model.mixer);
    return fwd;
}

double gated_cross_entropy(const CalForward& fwd, int label) {
    return softmax_cross_entropy(fwd.abstain ? fwd.gate_logits : fwd.mixed_true, label);
}

CalGradient cal_batch_gradient(const CalModel& model, const ConformalBand& band,
                               std::span<const CalFeatures> batch, const CalTrainConfig& cfg) {
    require(!batch.empty(), "empty batch");
    const int k_classes = model.class_count();
    CalGradient g;
    g.m.assign(model.mixer.m.size(), 0.0);
    g.image_weights.assign(model.image_net.head.weights.size(), 0.0);
    g.image_bias.assign(model.image_net.head.bias.size(), 0.0);
    g.genetic_weights.assign(model.genetic_net.head.weights.size(), 0.0);
    g.genetic_bias.assign(model.genetic_net.head.bias.size(), 0.0);
    g.predictor_weights.assign(model.predictor.weights.size(), 0.0);
    g.predictor_bias.assign(model.predictor.bias.size(), 0.0);
    const double inv_b = 1.0 / static_cast<double>(batch.size());

    auto bias_sink = [](const LinearHead& head, std::vector<double>& buf) {
        return head.bias.empty() ? nullptr : &buf;
    };

    for (const CalFeatures& f : batch) {
        require(f.label >= 0 && f.label < k_classes, "label out of range");
        const CalForward fwd = cal_forward(model, band, f);

        // Gated cross entropy through the mixture.
        const std::vector<double>& z = fwd.abstain ? fwd.gate_logits : fwd.mixed_true;
        const std::vector<double>& other = fwd.abstain ? fwd.predicted_genetic : fwd.genetic_logits;
        g.ce += inv_b * softmax_cross_entropy(z, f.label);
        std::vector<double> dz(static_cast<size_t>(k_classes), 0.0);
        softmax_cross_entropy_backward(z, f.label, inv_b, dz);
        std::vector<double> d_img(static_cast<size_t>(k_classes), 0.0);
        std::vector<double> d_other(static_cast<size_t>(k_classes), 0.0);
        for (int j = 0; j < k_classes; ++j) {
            const double mj = model.mixer.at(j);
            const double w = sigmoid(mj);
            d_img[static_cast<size_t>(j)] = dz[static_cast<size_t>(j)] * w;
            d_other[static_cast<size_t>(j)] = dz[static_cast<size_t>(j)] * (1.0 - w);
            g.m[static_cast<size_t>(model.mixer.slot(j))] +=
                dz[static_cast<size_t>(j)] * sigmoid_grad(mj) *
                (fwd.image_logits[static_cast<size_t>(j)] - other[static_cast<size_t>(j)]);
        }
        head_backward(f.s_img, model.image_net.head, d_img, &g.image_weights,
                      bias_sink(model.image_net.head, g.image_bias), nullptr);
        if (fwd.abstain) {
            head_backward(f.s_img, model.predictor, d_other, &g.predictor_weights,
                          bias_sink(model.predictor, g.predictor_bias), nullptr);
        } else {
            head_backward(f.s_gen, model.genetic_net.head, d_other, &g.genetic_weights,
                          bias_sink(model.genetic_net.head, g.genetic_bias), nullptr);
        }

        // Worst-case margin loss; k and the band are constants of the sample.
        const double ml = margin_loss(fwd.worst_case, fwd.k);
        g.margin += inv_b * ml;
        if (cfg.lambda_margin > 0.0 && std::isfinite(ml)) {
            const double up = cfg.lambda_margin * inv_b;
            std::vector<double> d_img2(static_cast<size_t>(k_classes), 0.0);
            std::vector<double> d_pred2(static_cast<size_t>(k_classes), 0.0);
            for (int j = 0; j < k_classes; ++j) {
                // d margin / d ytilde: softmax weight at j != k, -1 at k.
                const double dwc =
                    j == fwd.k ? -1.0
                               : std::exp(fwd.worst_case[static_cast<size_t>(j)] -
                                          fwd.worst_case[static_cast<size_t>(fwd.k)] - ml);
                const double mj = model.mixer.at(j);
                const double w = sigmoid(mj);
                const double shifted = fwd.predicted_genetic[static_cast<size_t>(j)] +
                                       (j == fwd.k ? -band.at(j) : band.at(j));
                d_img2[static_cast<size_t>(j)] = up * dwc * w;
                d_pred2[static_cast<size_t>(j)] = up * dwc * (1.0 - w);
                const double sg = sigmoid_grad(mj);
                if (sg != 0.0 && std::isfinite(shifted))
                    g.m[static_cast<size_t>(model.mixer.slot(j))] +=
                        up * dwc * sg * (fwd.image_logits[static_cast<size_t>(j)] - shifted);
            }
            head_backward(f.s_img, model.image_net.head, d_img2, &g.image_weights,
                          bias_sink(model.image_net.head, g.image_bias), nullptr);
            head_backward(f.s_img, model.predictor, d_pred2, &g.predictor_weights,
                          bias_sink(model.predictor, g.predictor_bias), nullptr);
        }

        // Predictor MSE; pulls the predictor toward the genetic head and,
        // because both blocks are trainable, the genetic head toward the
        // predictor.
        g.predictor += inv_b * predictor_loss(fwd.genetic_logits, fwd.predicted_genetic);
        if (cfg.lambda_predictor > 0.0) {
            const double factor =
                cfg.lambda_predictor * inv_b * 2.0 / static_cast<double>(k_classes);
            std::vector<double> d_gen3(static_cast<size_t>(k_classes), 0.0);
            std::vector<double> d_pred3(static_cast<size_t>(k_classes), 0.0);
            for (int j = 0; j < k_classes; ++j) {
                const double diff = fwd.genetic_logits[static_cast<size_t>(j)] -
                                    fwd.predicted_genetic[static_cast<size_t>(j)];
                d_gen3[static_cast<size_t>(j)] = factor * diff;
                d_pred3[static_cast<size_t>(j)] = -factor * diff;
            }
            head_backward(f.s_gen, model.genetic_net.head, d_gen3, &g.genetic_weights,
                          bias_sink(model.genetic_net.head, g.genetic_bias), nullptr);
            head_backward(f.s_img, model.predictor, d_pred3, &g.predictor_weights,
                          bias_sink(model.predictor, g.predictor_bias), nullptr);
        }
    }

    // Model-level modality regularizer, once per batch.
    g.modality = modality_loss(model.mixer, k_classes);
    if (cfg.lambda_modality > 0.0)
        for (int j = 0; j < k_classes; ++j)
            g.m[static_cast<size_t>(model.mixer.slot(j))] -=
                cfg.lambda_modality * sigmoid_grad(model.mixer.at(j));

    g.loss = g.ce;
    if (cfg.lambda_modality > 0.0) g.loss += cfg.lambda_modality * g.modality;
    if (cfg.lambda_margin > 0.0) g.loss += cfg.lambda_margin * g.margin;
    if (cfg.lambda_predictor > 0.0) g.loss += cfg.lambda_predictor * g.predictor;
    return g;
}

GradCheckReport cal_gradient_check(const CalModel& model, const ConformalBand& band,
                                   std::span<const CalFeatures> batch, const CalTrainConfig& cfg,
                                   double eps, double tol, int corrupt_index,
                                   double corrupt_delta) {
    CalModel probe = model;
    const CalGradient analytic = cal_batch_gradient(probe, band, batch, cfg);
    std::vector<double> grad = analytic.m;
    auto append = [&grad](const std::vector<double>& v) {
        grad.insert(grad.end(), v.begin(), v.end());
    };
    append(analytic.image_weights);
    append(analytic.image_bias);
    append(analytic.genetic_weights);
    append(analytic.genetic_bias);
    append(analytic.predictor_weights);
    append(analytic.predictor_bias);
    if (corrupt_index >= 0 && corrupt_index < static_cast<int>(grad.size()))
        grad[static_cast<size_t>(corrupt_index)] += corrupt_delta;

    std::vector<std::vector<double>*> blocks = {
        &probe.mixer.m,
        &probe.image_net.head.weights,   &probe.image_net.head.bias,
        &probe.genetic_net.head.weights, &probe.genetic_net.head.bias,
        &probe.predictor.weights,        &probe.predictor.bias};
    auto param = [&blocks](size_t i) -> double& {
        for (std::vector<double>* b : blocks) {
            if (i < b->size()) return (*b)[i];
            i -= b->size();
        }
        throw ValidationError("parameter index out of range");
    };

    double max_diff = 0.0, max_a = 0.0, max_f = 0.0;
    for (size_t i = 0; i < grad.size(); ++i) {
        double& x = param(i);
        const double keep = x;
        x = keep + eps;
        const double up = cal_batch_gradient(probe, band, batch, cfg).loss;
        x = keep - eps;
        const double down = cal_batch_gradient(probe, band, batch, cfg).loss;
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

CalModel train_cal(const Dataset& ds, std::span<const int64_t> train_positions,
                   std::span<const int64_t> calibration_positions, const ProtoPNet& image_net,
                   const ProtoPNet& genetic_net, const CalTrainConfig& cfg,
                   CalTrainReport* report) {
    require(cfg.lambda_modality >= 0.0 && cfg.lambda_margin >= 0.0 && cfg.lambda_predictor >= 0.0,
            "loss coefficients must be >= 0");
    require(cfg.alpha_train > 0.0 && cfg.alpha_train < 1.0,
            "training confidence must lie in (0, 1)");
    require(cfg.lr >= 0.0 && std::isfinite(cfg.lr), "learning rate must be finite and >= 0");
    require(cfg.lr_gamma > 0.0, "lr decay factor must be positive");
    require(cfg.epochs >= 0, "epochs must be >= 0");
    require(cfg.batch_size >= 1, "batch size must be >= 1");
    require(!train_positions.empty(), "empty training split");
    require(!calibration_positions.empty(), "empty calibration split");
    const std::set<int64_t> train_set(train_positions.begin(), train_positions.end());
    for (int64_t pos : calibration_positions)
        require(train_set.count(pos) == 0, "train and calibration splits overlap");

    CalModel model = make_cal_model(image_net, genetic_net, cfg.scalar_modality,
                                    cfg.initial_modality, cfg.k_from_image_only);
    const std::vector<CalFeatures> train_feats =
        cal_features(ds, train_positions, image_net, genetic_net);
    const std::vector<CalFeatures> cal_feats =
        cal_features(ds, calibration_positions, image_net, genetic_net);
    if (report) *report = CalTrainReport{};

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const ConformalBand band =
            calibrate_model(model, cal_feats, cfg.alpha_train, cfg.mode, cfg.bonferroni);
        std::vector<size_t> order(train_feats.size());
        std::iota(order.begin(), order.end(), size_t{0});
        std::mt19937_64 rng(mix_seed(cfg.seed, 0xCA10 + static_cast<uint64_t>(epoch)));
        std::shuffle(order.begin(), order.end(), rng);
        const double lr = cfg.lr_step_size > 0
                              ? cfg.lr * std::pow(cfg.lr_gamma, epoch / cfg.lr_step_size)
                              : cfg.lr;

        CalEpochReport er;
        double seen = 0.0;
        for (size_t start = 0; start < order.size(); start += static_cast<size_t>(cfg.batch_size)) {
            const size_t stop = std::min(order.size(), start + static_cast<size_t>(cfg.batch_size));
            std::vector<CalFeatures> batch;
            batch.reserve(stop - start);
            for (size_t i = start; i < stop; ++i) batch.push_back(train_feats[order[i]]);

            const CalGradient grad = cal_batch_gradient(model, band, batch, cfg);
            if (!std::isfinite(grad.loss))
                throw std::runtime_error("non-finite training loss in epoch " +
                                         std::to_string(epoch));
            if (cfg.train_modality)
                for (size_t i = 0; i < model.mixer.m.size(); ++i) model.mixer.m[i] -= lr * grad.m[i];
            if (cfg.train_image_head) {
                for (size_t i = 0; i < model.image_net.head.weights.size(); ++i)
                    model.image_net.head.weights[i] -= lr * grad.image_weights[i];
                for (size_t i = 0; i < model.image_net.head.bias.size(); ++i)
                    model.image_net.head.bias[i] -= lr * grad.image_bias[i];
            }
            if (cfg.train_genetic_head) {
                for (size_t i = 0; i < model.genetic_net.head.weights.size(); ++i)
                    model.genetic_net.head.weights[i] -= lr * grad.genetic_weights[i];
                for (size_t i = 0; i < model.genetic_net.head.bias.size(); ++i)
                    model.genetic_net.head.bias[i] -= lr * grad.genetic_bias[i];
            }
            if (cfg.train_predictor) {
                for (size_t i = 0; i < model.predictor.weights.size(); ++i)
                    model.predictor.weights[i] -= lr * grad.predictor_weights[i];
                for (size_t i = 0; i < model.predictor.bias.size(); ++i)
                    model.predictor.bias[i] -= lr * grad.predictor_bias[i];
            }

            const double bs = static_cast<double>(stop - start);
            er.loss += grad.loss * bs;
            er.ce += grad.ce * bs;
            er.modality += grad.modality * bs;
            er.margin += grad.margin * bs;
            er.predictor += grad.predictor * bs;
            seen += bs;
        }
        if (report && seen > 0.0) {
            er.loss /= seen;
            er.ce /= seen;
            er.modality /= seen;
            er.margin /= seen;
            er.predictor /= seen;
            report->epochs.push_back(er);
        }
    }

    if (report)
        report->final_band =
            calibrate_model(model, cal_feats, cfg.alpha_train, cfg.mode, cfg.bonferroni);
    return model;
}

Decision infer_cal(const CalModel& model, const ConformalBand& band, const Sample& sample,
                   CostLedger& ledger) {
    Decision d;
    d.sample_id = sample.id;
    d.true_label = sample.label;
    const SimilarityVector s_img =
        max_pool(similarity_map(modality_embedding(sample, Modality::image), model.image_net.protos));
    d.image_logits = head_forward(s_img, model.image_net.head);
    d.predicted_genetic = head_forward(s_img, model.predictor);
    const std::vector<double> gate = mix_logits(d.image_logits, d.predicted_genetic, model.mixer);
    d.k = argmax_index(model.k_from_image_only ? d.image_logits : gate);
    d.worst_case = worst_case_logits(d.image_logits, d.predicted_genetic, band, model.mixer, d.k);
    d.margin = worst_case_margin(d.worst_case, d.k);
    d.abstain = abstention_decision(d.worst_case, d.k);
    if (d.abstain) {
        d.genetic_queried = false;
        d.final_class = d.k;
        return d;
    }
    const EmbeddingMap* genetic = ledger.fetch_genetic(sample);
    if (genetic == nullptr) throw MeasurementRequired(std::move(d));
    d.genetic_queried = true;
    const SimilarityVector s_gen = max_pool(similarity_map(*genetic, model.genetic_net.protos));
    const std::vector<double> y_gen = head_forward(s_gen, model.genetic_net.head);
    const std::vector<double> mixed = mix_logits(d.image_logits, y_gen, model.mixer);
    d.final_class = argmax_index(mixed);
    return d;
}

void write_decision_csv(const std::filesystem::path& path, std::span<const Decision> decisions) {
    std::ofstream out(path, std::ios::trunc);
    if (!out)
        throw ContainerError(ContainerErrc::missing_file,
                             "cannot open for write: " + path.string());
    out << "sample_id,k,abstain,genetic_queried,final_class,true_class,margin\n";
    char margin[64];
    for (const Decision& d : decisions) {
        std::snprintf(margin, sizeof margin, "%.17g", d.margin);
        out << d.sample_id << ',' << d.k << ',' << (d.abstain ? 1 : 0) << ','
            << (d.genetic_queried ? 1 : 0) << ',' << d.final_class << ',' << d.true_label << ','
            << margin << '\n';
    }
}

void save_band(const ConformalBand& band, const std::filesystem::path& path) {
    require_band(band, band.delta.size());
    nlohmann::json j;
    j["mode"] = to_string(band.mode);
    j["alpha"] = band.alpha;
    j["n_cal"] = band.n_cal;
    j["delta_count"] = band.delta.size();
    // JSON has no infinity literal; an infinite band (all-or-nothing by
    // construction) is stored as null.
    if (band.is_finite())
        j["delta"] = band.delta;
    else
        j["delta"] = nullptr;
    std::ofstream out(path, std::ios::trunc);
    if (!out)
        throw ContainerError(ContainerErrc::missing_file,
                             "cannot open for write: " + path.string());
    out << j.dump(2) << '\n';
}

ConformalBand load_band(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ContainerError(ContainerErrc::missing_file, "cannot open: " + path.string());
    nlohmann::json j;
    try {
        in >> j;
        ConformalBand band;
        band.mode = band_mode_from_string(j.at("mode").get<std::string>());
        band.alpha = j.at("alpha").get<double>();
        band.n_cal = j.at("n_cal").get<int>();
        const size_t count = j.at("delta_count").get<size_t>();
        if (j.at("delta").is_null())
            band.delta.assign(count, kInf);
        else
            band.delta = j.at("delta").get<std::vector<double>>();
        require(band.delta.size() == count, "band delta count mismatch");
        require(band.alpha >= 0.0 && band.alpha < 1.0, "band alpha must lie in [0, 1)");
        require(band.n_cal >= 1, "band calibration size must be >= 1");
        for (double d : band.delta) require(d >= 0.0, "band delta must be >= 0");
        return band;
    } catch (const nlohmann::json::exception& e) {
        throw ContainerError(ContainerErrc::manifest_mismatch,
                             "malformed band file " + path.string() + ": " + e.what());
    }
}

}  // namespace protogate::cal
