#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "protogate/cal.hpp"
#include "protogate/dataset.hpp"
#include "protogate/tree.hpp"

namespace protogate::eval {

/// One evaluation summary. balanced_accuracy averages the recalls of the
/// classes that actually appear; absent classes carry recall -1 and are
/// listed separately instead of polluting the mean.
struct EvalReport {
    double balanced_accuracy = 0.0;
    double raw_accuracy = 0.0;
    double success_rate = 0.0;
    /// Among abstained samples, fraction whose audited true-genetic mix
    /// flips the committed class; 0 when nothing abstained.
    double abstention_error_rate = 0.0;
    /// Same numerator over all samples.
    double unconditional_error_rate = 0.0;
    std::vector<double> per_class_recall;
    std::vector<int> absent_classes;
    std::optional<double> alpha;
    std::optional<double> threshold;
    int64_t sample_count = 0;
    uint64_t seed = 0;
    uint64_t config_hash = 0;
};

/// Mean per-class recall. preds and labels are parallel; labels must lie in
/// [0, class_count). Classes with no labeled samples are excluded from the
/// mean (their recall is undefined) and reported through `absent`.
double balanced_accuracy(std::span<const int> preds, std::span<const int> labels, int class_count,
                         std::vector<double>* per_class = nullptr,
                         std::vector<int>* absent = nullptr);

/// Fraction of decisions settled from image data alone: abstentions for the
/// gated model, genetic-free hard paths for trees. A tree decision that
/// attempted a genetic fetch is never a success, even when the fetch failed
/// or no completed step was genetic-dominant.
double success_rate(std::span<const cal::Decision> decisions);
double success_rate(std::span<const tree::HardDecision> decisions);

/// Audits every abstained decision: reads the sample's true genetic record
/// through the ledger (flagged audit-only so query accounting is unmoved),
/// mixes its logits with the stored image logits, and counts the decisions
/// whose argmax leaves the committed class k. Returns the rate conditional
/// on abstaining (0 when nothing abstained); `unconditional` receives the
/// same count over all decisions.
double abstention_error_rate(const cal::CalModel& model,
                             std::span<const cal::Decision> decisions, const Dataset& ds,
                             CostLedger& ledger, double* unconditional = nullptr);

/// Runs gated inference over `positions` and summarizes. Audit reads feed
/// the abstention error rates; genetic queries for non-abstaining samples go
/// through the same ledger un-flagged.
EvalReport evaluate_cal(const cal::CalModel& model, const cal::ConformalBand& band,
                        const Dataset& ds, std::span<const int64_t> positions, CostLedger& ledger);

/// Hard-routes every sample; a failed genetic fetch counts as a wrong
/// prediction, not an error.
EvalReport evaluate_tree(const tree::ProtoTree& t, const Dataset& ds,
                         std::span<const int64_t> positions, CostLedger& ledger);

struct SweepPoint {
    double alpha = 0.0;
    double delta_sup = 0.0;  // largest band entry; +inf for a degenerate band
    EvalReport report;
};

/// One calibration + test evaluation per alpha, calibration split fixed.
/// Alphas must be strictly increasing; the band's sup is non-increasing and
/// the success rate non-decreasing along the sweep by construction, and both
/// are re-checked here (a violation throws).
std::vector<SweepPoint> sweep_alpha(const cal::CalModel& model,
                                    std::span<const cal::CalFeatures> cal_features,
                                    const Dataset& ds, std::span<const int64_t> test_positions,
                                    std::span<const double> alphas, cal::BandMode mode,
                                    bool bonferroni = false);

/// Plot-ready series pulled from a sweep.
std::vector<std::pair<double, double>> accuracy_vs_success(std::span<const SweepPoint> points);
std::vector<std::pair<double, double>> error_vs_alpha(std::span<const SweepPoint> points);

struct AblationCell {
    std::string name;  // e.g. "Mar. + Mod."
    bool first = false;
    bool second = false;
    EvalReport report;
};

/// 2x2 grid over the margin and modality loss terms. Every cell trains the
/// mixing stage from the same frozen nets and seed, zeroing the ablated
/// coefficients, then calibrates at `alpha` on the validation split and
/// evaluates on the test split.
std::vector<AblationCell> ablate_cal(const Dataset& ds, const SplitSpec& splits,
                                     const ProtoPNet& image_net, const ProtoPNet& genetic_net,
                                     cal::CalTrainConfig base, double alpha, cal::BandMode mode);

/// 2x2 grid over the variability and routing loss terms of multimodal tree
/// training. The unimodal trees are shared across cells so only the
/// ablated stage differs.
std::vector<AblationCell> ablate_alp(const Dataset& ds, const SplitSpec& splits,
                                     const tree::ProtoTree& image_tree,
                                     const tree::ProtoTree& genetic_tree, tree::AlpConfig base);

void write_sweep_csv(const std::filesystem::path& path, std::span<const SweepPoint> points);
void write_ablation_csv(const std::filesystem::path& path, std::span<const AblationCell> cells);
void write_series_csv(const std::filesystem::path& path,
                      std::span<const std::pair<double, double>> series, std::string_view x_name,
                      std::string_view y_name);
void write_report_json(const std::filesystem::path& path, const EvalReport& report);

}  // namespace protogate::eval
