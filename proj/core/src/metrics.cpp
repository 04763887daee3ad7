#include "protogate/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <unordered_map>

#include <nlohmann/json.hpp>

#include "protogate/common.hpp"
#include "protogate/protopnet.hpp"
#include "protogate/serialize.hpp"

namespace protogate::eval {

namespace {

std::string fmt(double x) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", x);
    return buf;
}

std::ofstream open_for_write(const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out)
        throw ContainerError(ContainerErrc::missing_file,
                             "cannot open for write: " + path.string());
    return out;
}

std::unordered_map<int64_t, int64_t> position_by_id(const Dataset& ds) {
    std::unordered_map<int64_t, int64_t> map;
    map.reserve(ds.samples.size());
    for (int64_t p = 0; p < static_cast<int64_t>(ds.samples.size()); ++p)
        map.emplace(ds.samples[static_cast<size_t>(p)].id, p);
    return map;
}

/// Abstention-flip count shared by the conditional and unconditional rates.
int64_t count_abstention_errors(const cal::CalModel& model,
                                std::span<const cal::Decision> decisions, const Dataset& ds,
                                CostLedger& ledger, int64_t* abstained_out) {
    const auto by_id = position_by_id(ds);
    int64_t abstained = 0, errors = 0;
    for (const cal::Decision& d : decisions) {
        if (!d.abstain) continue;
        ++abstained;
        auto it = by_id.find(d.sample_id);
        if (it == by_id.end())
            throw ValidationError("decision references a sample the dataset does not hold");
        const Sample& sample = ds.samples[static_cast<size_t>(it->second)];
        const EmbeddingMap* g = ledger.fetch_genetic(sample, /*audit=*/true);
        if (g == nullptr) throw ValidationError("audit needs the abstained sample's genetic record");
        const auto y_gen = protopnet_logits(model.genetic_net, *g);
        const auto mixed = cal::mix_logits(d.image_logits, y_gen, model.mixer);
        if (argmax_index(mixed) != d.k) ++errors;
    }
    if (abstained_out != nullptr) *abstained_out = abstained;
    return errors;
}

void fill_accuracy(EvalReport& r, std::span<const int> preds, std::span<const int> labels,
                   int class_count) {
    r.balanced_accuracy =
        balanced_accuracy(preds, labels, class_count, &r.per_class_recall, &r.absent_classes);
    int64_t hits = 0;
    for (size_t i = 0; i < preds.size(); ++i) hits += preds[i] == labels[i];
    r.raw_accuracy = static_cast<double>(hits) / static_cast<double>(preds.size());
    r.sample_count = static_cast<int64_t>(preds.size());
}

}  // namespace

double balanced_accuracy(std::span<const int> preds, std::span<const int> labels, int class_count,
                         std::vector<double>* per_class, std::vector<int>* absent) {
    if (preds.empty()) throw ValidationError("balanced accuracy of an empty batch");
    if (preds.size() != labels.size()) throw ValidationError("preds and labels differ in length");
    if (class_count < 1) throw ValidationError("class_count must be >= 1");

    std::vector<int64_t> total(static_cast<size_t>(class_count), 0);
    std::vector<int64_t> hit(static_cast<size_t>(class_count), 0);
    for (size_t i = 0; i < labels.size(); ++i) {
        const int y = labels[i];
        if (y < 0 || y >= class_count) throw ValidationError("label outside [0, class_count)");
        ++total[static_cast<size_t>(y)];
        hit[static_cast<size_t>(y)] += preds[i] == y;
    }

    double sum = 0.0;
    int present = 0;
    std::vector<double> recall(static_cast<size_t>(class_count), -1.0);
    std::vector<int> missing;
    for (int c = 0; c < class_count; ++c) {
        if (total[static_cast<size_t>(c)] == 0) {
            missing.push_back(c);
            continue;
        }
        recall[static_cast<size_t>(c)] = static_cast<double>(hit[static_cast<size_t>(c)]) /
                                         static_cast<double>(total[static_cast<size_t>(c)]);
        sum += recall[static_cast<size_t>(c)];
        ++present;
    }
    if (per_class != nullptr) *per_class = std::move(recall);
    if (absent != nullptr) *absent = std::move(missing);
    return sum / present;
}

double success_rate(std::span<const cal::Decision> decisions) {
    if (decisions.empty()) return 0.0;
    int64_t n = 0;
    for (const auto& d : decisions) n += d.abstain;
    return static_cast<double>(n) / static_cast<double>(decisions.size());
}

double success_rate(std::span<const tree::HardDecision> decisions) {
    if (decisions.empty()) return 0.0;
    int64_t n = 0;
    for (const auto& d : decisions) n += !d.genetic_needed && !d.path.genetic_used;
    return static_cast<double>(n) / static_cast<double>(decisions.size());
}

double abstention_error_rate(const cal::CalModel& model,
                             std::span<const cal::Decision> decisions, const Dataset& ds,
                             CostLedger& ledger, double* unconditional) {
    int64_t abstained = 0;
    const int64_t errors = count_abstention_errors(model, decisions, ds, ledger, &abstained);
    if (unconditional != nullptr)
        *unconditional = decisions.empty() ? 0.0
                                           : static_cast<double>(errors) /
                                                 static_cast<double>(decisions.size());
    return abstained == 0 ? 0.0 : static_cast<double>(errors) / static_cast<double>(abstained);
}

EvalReport evaluate_cal(const cal::CalModel& model, const cal::ConformalBand& band,
                        const Dataset& ds, std::span<const int64_t> positions,
                        CostLedger& ledger) {
    if (positions.empty()) throw ValidationError("evaluation over an empty split");
    std::vector<cal::Decision> decisions;
    std::vector<int> preds, labels;
    decisions.reserve(positions.size());
    for (int64_t p : positions) {
        const Sample& s = ds.samples.at(static_cast<size_t>(p));
        decisions.push_back(cal::infer_cal(model, band, s, ledger));
        preds.push_back(decisions.back().final_class);
        labels.push_back(s.label);
    }

    EvalReport r;
    fill_accuracy(r, preds, labels, model.class_count());
    r.success_rate = success_rate(decisions);
    r.abstention_error_rate =
        abstention_error_rate(model, decisions, ds, ledger, &r.unconditional_error_rate);
    r.alpha = band.alpha;
    return r;
}

EvalReport evaluate_tree(const tree::ProtoTree& t, const Dataset& ds,
                         std::span<const int64_t> positions, CostLedger& ledger) {
    if (positions.empty()) throw ValidationError("evaluation over an empty split");
    std::vector<tree::HardDecision> decisions;
    std::vector<int> preds, labels;
    decisions.reserve(positions.size());
    for (int64_t p : positions) {
        const Sample& s = ds.samples.at(static_cast<size_t>(p));
        decisions.push_back(tree::classify_hard(t, s, ledger));
        preds.push_back(decisions.back().predicted);
        labels.push_back(s.label);
    }

    EvalReport r;
    fill_accuracy(r, preds, labels, t.class_count);
    r.success_rate = success_rate(decisions);
    return r;
}

std::vector<SweepPoint> sweep_alpha(const cal::CalModel& model,
                                    std::span<const cal::CalFeatures> cal_features,
                                    const Dataset& ds, std::span<const int64_t> test_positions,
                                    std::span<const double> alphas, cal::BandMode mode,
                                    bool bonferroni) {
    if (alphas.empty()) throw ValidationError("sweep needs at least one alpha");
    for (size_t i = 1; i < alphas.size(); ++i)
        if (!(alphas[i] > alphas[i - 1]))
            throw ValidationError("sweep alphas must be strictly increasing");

    std::vector<SweepPoint> points;
    points.reserve(alphas.size());
    for (double alpha : alphas) {
        SweepPoint pt;
        pt.alpha = alpha;
        const auto band = cal::calibrate_model(model, cal_features, alpha, mode, bonferroni);
        pt.delta_sup = *std::max_element(band.delta.begin(), band.delta.end());
        CostLedger ledger;
        pt.report = evaluate_cal(model, band, ds, test_positions, ledger);
        if (!points.empty()) {
            if (pt.delta_sup > points.back().delta_sup)
                throw std::runtime_error("band widened as alpha grew");
            if (pt.report.success_rate < points.back().report.success_rate)
                throw std::runtime_error("success rate fell as alpha grew");
        }
        points.push_back(std::move(pt));
    }
    return points;
}

std::vector<std::pair<double, double>> accuracy_vs_success(std::span<const SweepPoint> points) {
    std::vector<std::pair<double, double>> out;
    out.reserve(points.size());
    for (const auto& p : points) out.emplace_back(p.report.success_rate, p.report.balanced_accuracy);
    return out;
}

std::vector<std::pair<double, double>> error_vs_alpha(std::span<const SweepPoint> points) {
    std::vector<std::pair<double, double>> out;
    out.reserve(points.size());
    for (const auto& p : points) out.emplace_back(p.alpha, p.report.abstention_error_rate);
    return out;
}

std::vector<AblationCell> ablate_cal(const Dataset& ds, const SplitSpec& splits,
                                     const ProtoPNet& image_net, const ProtoPNet& genetic_net,
                                     cal::CalTrainConfig base, double alpha, cal::BandMode mode) {
    const struct {
        const char* name;
        bool margin, modality;
    } grid[] = {{"None", false, false},
                {"Mar.", true, false},
                {"Mod.", false, true},
                {"Mar. + Mod.", true, true}};

    std::vector<AblationCell> cells;
    for (const auto& g : grid) {
        cal::CalTrainConfig cfg = base;
        if (!g.margin) cfg.lambda_margin = 0.0;
        if (!g.modality) cfg.lambda_modality = 0.0;
        const auto model =
            cal::train_cal(ds, splits.train, splits.validation, image_net, genetic_net, cfg);
        const auto feats =
            cal::cal_features(ds, splits.validation, model.image_net, model.genetic_net);
        const auto band = cal::calibrate_model(model, feats, alpha, mode, cfg.bonferroni);

        AblationCell cell;
        cell.name = g.name;
        cell.first = g.margin;
        cell.second = g.modality;
        CostLedger ledger;
        cell.report = evaluate_cal(model, band, ds, splits.test, ledger);
        cell.report.seed = cfg.seed;
        cell.report.config_hash =
            fnv1a64("cal|margin=" + fmt(cfg.lambda_margin) + "|modality=" + fmt(cfg.lambda_modality) +
                  "|alpha=" + fmt(alpha) + "|seed=" + std::to_string(cfg.seed));
        cells.push_back(std::move(cell));
    }
    return cells;
}

std::vector<AblationCell> ablate_alp(const Dataset& ds, const SplitSpec& splits,
                                     const tree::ProtoTree& image_tree,
                                     const tree::ProtoTree& genetic_tree, tree::AlpConfig base) {
    const struct {
        const char* name;
        bool variability, routing;
    } grid[] = {{"None", false, false},
                {"Var.", true, false},
                {"Rout.", false, true},
                {"Var. + Rout.", true, true}};

    std::vector<AblationCell> cells;
    for (const auto& g : grid) {
        tree::AlpConfig cfg = base;
        if (!g.variability) cfg.loss.variability = 0.0;
        if (!g.routing) cfg.loss.routing = 0.0;
        const auto alp = tree::train_alp(ds, splits.train, image_tree, genetic_tree, cfg);

        AblationCell cell;
        cell.name = g.name;
        cell.first = g.variability;
        cell.second = g.routing;
        CostLedger ledger;
        cell.report = evaluate_tree(alp, ds, splits.test, ledger);
        cell.report.seed = cfg.seed;
        cell.report.threshold = cfg.threshold;
        cell.report.config_hash =
            fnv1a64("alp|variability=" + fmt(cfg.loss.variability) +
                  "|routing=" + fmt(cfg.loss.routing) + "|seed=" + std::to_string(cfg.seed));
        cells.push_back(std::move(cell));
    }
    return cells;
}

void write_sweep_csv(const std::filesystem::path& path, std::span<const SweepPoint> points) {
    auto out = open_for_write(path);
    out << "alpha,delta_sup,balanced_accuracy,raw_accuracy,success_rate,"
           "abstention_error_rate,unconditional_error_rate,samples\n";
    for (const auto& p : points) {
        out << fmt(p.alpha) << ',' << fmt(p.delta_sup) << ',' << fmt(p.report.balanced_accuracy)
            << ',' << fmt(p.report.raw_accuracy) << ',' << fmt(p.report.success_rate) << ','
            << fmt(p.report.abstention_error_rate) << ','
            << fmt(p.report.unconditional_error_rate) << ',' << p.report.sample_count << '\n';
    }
}

void write_ablation_csv(const std::filesystem::path& path, std::span<const AblationCell> cells) {
    auto out = open_for_write(path);
    out << "cell,first_loss,second_loss,balanced_accuracy,raw_accuracy,success_rate,samples\n";
    for (const auto& c : cells) {
        out << '"' << c.name << "\"," << (c.first ? 1 : 0) << ',' << (c.second ? 1 : 0) << ','
            << fmt(c.report.balanced_accuracy) << ',' << fmt(c.report.raw_accuracy) << ','
            << fmt(c.report.success_rate) << ',' << c.report.sample_count << '\n';
    }
}

void write_series_csv(const std::filesystem::path& path,
                      std::span<const std::pair<double, double>> series, std::string_view x_name,
                      std::string_view y_name) {
    auto out = open_for_write(path);
    out << x_name << ',' << y_name << '\n';
    for (const auto& [x, y] : series) out << fmt(x) << ',' << fmt(y) << '\n';
}

void write_report_json(const std::filesystem::path& path, const EvalReport& r) {
    nlohmann::json j;
    j["balanced_accuracy"] = r.balanced_accuracy;
    j["raw_accuracy"] = r.raw_accuracy;
    j["success_rate"] = r.success_rate;
    j["abstention_error_rate"] = r.abstention_error_rate;
    j["unconditional_error_rate"] = r.unconditional_error_rate;
    j["per_class_recall"] = r.per_class_recall;
    j["absent_classes"] = r.absent_classes;
    if (r.alpha) j["alpha"] = *r.alpha;
    else j["alpha"] = nullptr;
    if (r.threshold) j["threshold"] = *r.threshold;
    else j["threshold"] = nullptr;
    j["sample_count"] = r.sample_count;
    j["seed"] = r.seed;
    j["config_hash"] = r.config_hash;
    auto out = open_for_write(path);
    out << j.dump(2) << '\n';
}

}  // namespace protogate::eval
