#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "protogate/dataset.hpp"
#include "protogate/protopnet.hpp"

namespace protogate::cal {

/// Per-class mixing weights. sigmoid(m_j) is the IMAGE share of class j's
/// logit (the tree module uses the opposite orientation). A single entry
/// broadcasts to every class.
struct ModalityMixer {
    std::vector<double> m;

    int slot(int j) const { return m.size() == 1 ? 0 : j; }
    double at(int j) const { return m[static_cast<size_t>(slot(j))]; }
    double image_weight(int j) const { return sigmoid(at(j)); }
};

enum class BandMode { per_logit, l_infinity };

std::string to_string(BandMode mode);
BandMode band_mode_from_string(const std::string& name);

/// Split-conformal margin of error around the predicted genetic logits.
/// delta holds one entry per class (per_logit) or a single broadcast entry
/// (l_infinity). The band degenerates to +inf everywhere when the requested
/// rank exceeds n_cal; by construction it is never partially infinite.
struct ConformalBand {
    BandMode mode = BandMode::per_logit;
    double alpha = 0.05;
    std::vector<double> delta;
    int n_cal = 0;

    double at(int j) const { return delta[delta.size() == 1 ? 0 : static_cast<size_t>(j)]; }
    bool is_finite() const;
};

/// Smallest integer rank >= (n_cal + 1) * (1 - alpha), clamped to >= 1.
/// Robust to the product landing one ulp above an exact integer.
long conformal_rank(int n_cal, double alpha);

/// residuals: one row per calibration sample, one entry per class
/// (true genetic logit minus predicted). alpha in [0, 1). bonferroni
/// tightens per-logit quantiles to alpha / K; ignored for l_infinity,
/// which is simultaneous already.
ConformalBand calibrate(const std::vector<std::vector<double>>& residuals, double alpha,
                        BandMode mode, bool bonferroni = false);

/// Per-class convex combination sigmoid(m_j) * y_img_j + (1 - sigmoid) * y_gen_j.
/// An exactly-zero weight suppresses its term even against an infinite logit.
std::vector<double> mix_logits(std::span<const double> y_img, std::span<const double> y_gen,
                               const ModalityMixer& mixer);

std::vector<double> predict_genetic_logits(const SimilarityVector& s_img,
                                           const LinearHead& predictor);

/// The least favorable mixed logits for predicted class k: the genetic term
/// drops by delta at k and rises by delta everywhere else.
std::vector<double> worst_case_logits(std::span<const double> y_img,
                                      std::span<const double> y_gen_hat,
                                      const ConformalBand& band, const ModalityMixer& mixer,
                                      int k);

/// True (skip the genetic measurement) iff worst_case is strictly maximized
/// at k; ties query genetics.
bool abstention_decision(std::span<const double> worst_case, int k);

/// min over j != k of worst_case[k] - worst_case[j].
double worst_case_margin(std::span<const double> worst_case, int k);

/// log sum_{j != k} exp(-(worst_case[k] - worst_case[j])), max-shifted.
double margin_loss(std::span<const double> worst_case, int k);

/// -sum_j sigmoid(m_j) over `class_count` classes; in (-K, 0).
double modality_loss(const ModalityMixer& mixer, int class_count);

/// Mean squared error between true and predicted genetic logits.
double predictor_loss(std::span<const double> y_gen, std::span<const double> predicted);

/// Frozen unimodal nets plus the trainable mixing weights and the
/// predicted-genetic-logit head (initialized from the image head).
struct CalModel {
    ProtoPNet image_net;
    ProtoPNet genetic_net;
    ModalityMixer mixer;
    LinearHead predictor;
    /// Take k from argmax of the raw image logits instead of the
    /// mixed-with-predicted logits.
    bool k_from_image_only = false;

    int class_count() const { return image_net.class_count; }
};

CalModel make_cal_model(const ProtoPNet& image_net, const ProtoPNet& genetic_net,
                        bool scalar_modality = false, double initial_modality = 0.0,
                        bool k_from_image_only = false);

/// Pooled similarity vectors for one sample under both frozen nets; the
/// prototype layers never move during mixed training, so these are computed
/// once.
struct CalFeatures {
    int64_t sample_id = -1;
    int label = -1;
    SimilarityVector s_img;
    SimilarityVector s_gen;
};

/// Requires a genetic embedding on every listed sample.
std::vector<CalFeatures> cal_features(const Dataset& ds, std::span<const int64_t> positions,
                                      const ProtoPNet& image_net, const ProtoPNet& genetic_net);

/// r_j = (genetic head logit) - (predictor logit), one row per sample.
std::vector<std::vector<double>> prediction_residuals(const CalModel& model,
                                                      std::span<const CalFeatures> feats);

ConformalBand calibrate_model(const CalModel& model, std::span<const CalFeatures> feats,
                              double alpha, BandMode mode, bool bonferroni = false);

/// One sample's full trainable-side forward state.
struct CalForward {
    std::vector<double> image_logits;
    std::vector<double> genetic_logits;     // true, through the genetic head
    std::vector<double> predicted_genetic;  // through the predictor head
    std::vector<double> gate_logits;        // mix(image, predicted)
    std::vector<double> mixed_true;         // mix(image, genetic)
    std::vector<double> worst_case;
    int k = -1;
    bool abstain = false;
};

CalForward cal_forward(const CalModel& model, const ConformalBand& band, const CalFeatures& f);

/// Cross entropy on the gate logits when the sample abstains at the band's
/// confidence, on the true mixed logits otherwise.
double gated_cross_entropy(const CalForward& fwd, int label);

struct CalTrainConfig {
    double lambda_modality = 0.25;   // weight on -sum sigmoid(m_j)
    double lambda_margin = 0.25;     // weight on the worst-case margin loss
    double lambda_predictor = 0.05;  // weight on the predictor MSE
    double alpha_train = 0.05;       // gate confidence for CE and margin terms
    BandMode mode = BandMode::per_logit;
    bool bonferroni = false;
    int epochs = 4;
    int batch_size = 128;
    double lr = 0.05;
    int lr_step_size = 0;  // epochs between decays; 0 disables
    double lr_gamma = 0.5;
    uint64_t seed = 0;
    bool scalar_modality = false;
    double initial_modality = 0.0;
    bool k_from_image_only = false;
    // Freeze mask over the four trainable blocks.
    bool train_modality = true;
    bool train_image_head = true;
    bool train_genetic_head = true;
    bool train_predictor = true;
};

struct CalEpochReport {
    double loss = 0.0;
    double ce = 0.0;
    double modality = 0.0;
    double margin = 0.0;
    double predictor = 0.0;
};

struct CalTrainReport {
    std::vector<CalEpochReport> epochs;
    ConformalBand final_band;
};

/// Mean batch loss and its gradient over the four trainable blocks, exactly
/// as the trainer applies them. Component values are always reported; a
/// component enters the total only when its coefficient is positive.
struct CalGradient {
    double loss = 0.0;
    double ce = 0.0;
    double modality = 0.0;
    double margin = 0.0;
    double predictor = 0.0;
    std::vector<double> m;
    std::vector<double> image_weights;
    std::vector<double> image_bias;
    std::vector<double> genetic_weights;
    std::vector<double> genetic_bias;
    std::vector<double> predictor_weights;
    std::vector<double> predictor_bias;
};

CalGradient cal_batch_gradient(const CalModel& model, const ConformalBand& band,
                               std::span<const CalFeatures> batch, const CalTrainConfig& cfg);

/// Central finite differences over [m | image head | genetic head | predictor]
/// with the band held fixed. corrupt_index perturbs the analytic gradient as
/// a negative control; -1 leaves it untouched.
GradCheckReport cal_gradient_check(const CalModel& model, const ConformalBand& band,
                                   std::span<const CalFeatures> batch, const CalTrainConfig& cfg,
                                   double eps = 1e-5, double tol = 1e-4, int corrupt_index = -1,
                                   double corrupt_delta = 0.0);

/// SGD over {m, image head, genetic head, predictor} with the gate band
/// recalibrated on the calibration split before every epoch. Prototypes are
/// never touched. The splits must be disjoint and both carry genetics.
CalModel train_cal(const Dataset& ds, std::span<const int64_t> train_positions,
                   std::span<const int64_t> calibration_positions, const ProtoPNet& image_net,
                   const ProtoPNet& genetic_net, const CalTrainConfig& cfg,
                   CalTrainReport* report = nullptr);

/// One inference outcome. abstain == true means the sample was classified
/// from image data alone (final_class == k and the genetic record was never
/// read); otherwise final_class is the argmax of the true mixed logits.
struct Decision {
    int64_t sample_id = -1;
    int true_label = -1;
    std::vector<double> image_logits;
    std::vector<double> predicted_genetic;
    std::vector<double> worst_case;
    int k = -1;
    double margin = 0.0;  // worst-case margin min_j (ytilde_k - ytilde_j)
    bool abstain = false;
    bool genetic_queried = false;
    int final_class = -1;
};

/// A non-abstaining inference hit a sample with no genetic record; carries
/// the decision state computed before the missing measurement.
struct MeasurementRequired : std::runtime_error {
    Decision decision;

    explicit MeasurementRequired(Decision d)
        : std::runtime_error("genetic measurement required for sample " +
                             std::to_string(d.sample_id)),
          decision(std::move(d)) {}
};

/// Genetic embeddings are read only through the ledger, and only for
/// non-abstaining samples.
Decision infer_cal(const CalModel& model, const ConformalBand& band, const Sample& sample,
                   CostLedger& ledger);

void write_decision_csv(const std::filesystem::path& path, std::span<const Decision> decisions);

void save_band(const ConformalBand& band, const std::filesystem::path& path);
ConformalBand load_band(const std::filesystem::path& path);

}  // namespace protogate::cal
