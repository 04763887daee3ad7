#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <fstream>
#include <random>
#include <sstream>

#include <nlohmann/json.hpp>

#include "doctest.h"
#include "protogate/metrics.hpp"
#include "protogate/serialize.hpp"
#include "test_util.hpp"

using namespace protogate;
using namespace protogate::eval;

namespace {

using V = std::vector<double>;

/// Shared scenario: four simplex-separated classes, one image-confusable
/// pair, unimodal nets and trees trained once.
struct MetricsFixture {
    Dataset ds;
    SplitSpec split;
    ProtoPNet image_net;
    ProtoPNet genetic_net;
    tree::ProtoTree image_tree;
    tree::ProtoTree genetic_tree;
    tree::ProtoTree alp;
};

const MetricsFixture& fixture() {
    static const MetricsFixture f = [] {
        MetricsFixture x;
        SynthConfig cfg;
        cfg.class_count = 4;
        cfg.per_class = 30;
        cfg.image_dims = {10, 1, 2};
        cfg.genetic_dims = {8, 1, 2};
        cfg.image_separability = 6.0;
        cfg.genetic_separability = 12.0;
        cfg.confusable_pairs = {{0, 2}};
        cfg.simplex_means = true;
        x.ds = synth_generate(cfg, 99);
        std::vector<int> labels;
        for (const auto& s : x.ds.samples) labels.push_back(s.label);
        x.split = make_splits(labels, {0.6, 0.2, 0.2}, 1, 7);

        ProtoPNetConfig pc;
        pc.protos_per_class = 2;
        pc.schedule.pre_project_epochs = 4;
        pc.schedule.n_post_project_phases = 1;
        pc.schedule.epochs_per_phase = 2;
        pc.schedule.batch_size = 32;
        pc.schedule.lr = 0.05;
        pc.schedule.seed = 31;
        x.image_net = train_protopnet(x.ds, x.split.train, Modality::image, pc);
        pc.schedule.seed = 32;
        x.genetic_net = train_protopnet(x.ds, x.split.train, Modality::genetic, pc);

        tree::TreeTrainConfig tc;
        tc.depth = 3;
        tc.schedule.pre_project_epochs = 6;
        tc.schedule.n_post_project_phases = 1;
        tc.schedule.epochs_per_phase = 3;
        tc.schedule.batch_size = 16;
        tc.schedule.lr = 0.5;
        tc.schedule.seed = 11;
        x.image_tree = tree::train_prototree(x.ds, x.split.train, Modality::image, tc);
        tc.schedule.seed = 12;
        x.genetic_tree = tree::train_prototree(x.ds, x.split.train, Modality::genetic, tc);

        tree::AlpConfig ac;
        ac.threshold = 0.8;
        ac.epochs = 8;
        ac.batch_size = 16;
        ac.lr = 0.2;
        ac.seed = 3;
        x.alp = tree::train_alp(x.ds, x.split.train, x.image_tree, x.genetic_tree, ac);
        return x;
    }();
    return f;
}

cal::CalTrainConfig cal_cfg() {
    cal::CalTrainConfig cfg;
    cfg.lambda_modality = 1.0;
    cfg.lambda_margin = 0.3;
    cfg.lambda_predictor = 0.05;
    cfg.alpha_train = 0.05;
    cfg.epochs = 12;
    cfg.batch_size = 16;
    cfg.lr = 0.3;
    cfg.seed = 21;
    return cfg;
}

const cal::CalModel& cal_model() {
    static const cal::CalModel model = [] {
        const auto& f = fixture();
        return cal::train_cal(f.ds, f.split.train, f.split.validation, f.image_net, f.genetic_net,
                              cal_cfg());
    }();
    return model;
}

std::vector<cal::CalFeatures> validation_features() {
    const auto& f = fixture();
    const auto& m = cal_model();
    return cal::cal_features(f.ds, f.split.validation, m.image_net, m.genetic_net);
}

}  // namespace

TEST_CASE("config hashing matches the published FNV-1a vectors") {
    CHECK(fnv1a64("") == 14695981039346656037ULL);
    CHECK(fnv1a64("a") == 0xaf63dc4c8601ec8cULL);
    CHECK(fnv1a64("foobar") == 0x85944171f73967e8ULL);
}

TEST_CASE("balanced accuracy averages per-class recalls") {
    std::vector<int> perfect = {0, 1, 2, 1, 0};
    CHECK(balanced_accuracy(perfect, perfect, 3) == 1.0);

    // Class 0 recall 1.0, class 1 recall 0.5.
    std::vector<int> labels = {0, 0, 1, 1};
    std::vector<int> preds = {0, 0, 1, 0};
    CHECK(balanced_accuracy(preds, labels, 2) == 0.75);

    // Out-of-range predictions are merely wrong; out-of-range labels are errors.
    std::vector<int> missing = {-1, 0, 1, 1};
    CHECK(balanced_accuracy(missing, labels, 2) == 0.75);
    CHECK_THROWS_AS(balanced_accuracy(labels, preds, 1), ValidationError);
    CHECK_THROWS_AS(balanced_accuracy(std::vector<int>{}, std::vector<int>{}, 2), ValidationError);
    CHECK_THROWS_AS(balanced_accuracy(std::vector<int>{0}, std::vector<int>{0, 1}, 2),
                    ValidationError);
}

TEST_CASE("balanced accuracy matches a tally oracle on random confusion") {
    std::mt19937_64 rng(42);
    std::uniform_int_distribution<int> cls(0, 4);
    std::vector<int> labels, preds;
    for (int i = 0; i < 400; ++i) {
        labels.push_back(cls(rng));
        preds.push_back(cls(rng));
    }

    double total = 0.0;
    int present = 0;
    for (int c = 0; c < 5; ++c) {
        int64_t n = 0, hit = 0;
        for (size_t i = 0; i < labels.size(); ++i) {
            if (labels[i] != c) continue;
            ++n;
            hit += preds[i] == c;
        }
        if (n == 0) continue;
        total += static_cast<double>(hit) / static_cast<double>(n);
        ++present;
    }
    CHECK(balanced_accuracy(preds, labels, 5) == total / present);
}

TEST_CASE("absent classes are excluded, reported, and relabeling is neutral") {
    std::vector<int> labels = {0, 0, 2, 2};
    std::vector<int> preds = {0, 2, 2, 2};
    std::vector<double> recall;
    std::vector<int> absent;
    const double acc = balanced_accuracy(preds, labels, 4, &recall, &absent);
    CHECK(acc == 0.75);
    CHECK(absent == std::vector<int>{1, 3});
    CHECK(recall[0] == 0.5);
    CHECK(recall[1] == -1.0);
    CHECK(recall[2] == 1.0);
    CHECK(recall[3] == -1.0);

    // Swap class ids 0 <-> 3 everywhere; the mean is unchanged.
    auto relabel = [](std::vector<int> v) {
        for (int& x : v) x = x == 0 ? 3 : x == 3 ? 0 : x;
        return v;
    };
    CHECK(balanced_accuracy(relabel(preds), relabel(labels), 4) == acc);
}

TEST_CASE("success rate counts image-only outcomes") {
    CHECK(success_rate(std::vector<cal::Decision>{}) == 0.0);

    std::vector<cal::Decision> ds(10);
    for (int i = 0; i < 3; ++i) ds[static_cast<size_t>(i)].abstain = true;
    CHECK(success_rate(ds) == 0.3);

    std::vector<tree::HardDecision> hs(4);
    hs[0].path.genetic_used = true;
    hs[0].genetic_needed = true;
    hs[1].genetic_needed = true;  // failed fetch: attempted, so not a success
    CHECK(success_rate(hs) == 0.5);
}

TEST_CASE("unimodal trees sit at the success-rate boundaries") {
    const auto& f = fixture();
    CostLedger ledger;
    const auto img = evaluate_tree(f.image_tree, f.ds, f.split.test, ledger);
    CHECK(img.success_rate == 1.0);
    CHECK(ledger.queries() == 0);

    const auto gen = evaluate_tree(f.genetic_tree, f.ds, f.split.test, ledger);
    CHECK(gen.success_rate == 0.0);
    CHECK(ledger.queries() == static_cast<int64_t>(f.split.test.size()));

    // Raw accuracy equals a by-hand classify_hard tally.
    CostLedger again;
    int64_t hits = 0;
    for (int64_t p : f.split.test) {
        const Sample& s = f.ds.samples[static_cast<size_t>(p)];
        hits += tree::classify_hard(f.genetic_tree, s, again).predicted == s.label;
    }
    CHECK(gen.raw_accuracy == static_cast<double>(hits) / f.split.test.size());
    CHECK(gen.sample_count == static_cast<int64_t>(f.split.test.size()));
    CHECK(gen.per_class_recall.size() == 4);
}

TEST_CASE("abstention errors count exactly the audited flips") {
    const auto& f = fixture();
    const auto& model = cal_model();

    CostLedger empty_ledger;
    CHECK(abstention_error_rate(model, std::vector<cal::Decision>{}, f.ds, empty_ledger) == 0.0);

    const Sample& s = f.ds.samples[static_cast<size_t>(f.split.test[0])];
    const auto y_gen = protopnet_logits(model.genetic_net, *s.genetic);
    cal::Decision flip;
    flip.sample_id = s.id;
    flip.abstain = true;
    flip.image_logits = V(4, 0.0);
    const auto mixed = cal::mix_logits(flip.image_logits, y_gen, model.mixer);
    const int true_k = argmax_index(mixed);
    flip.k = true_k == 0 ? 1 : 0;

    cal::Decision keep = flip;
    keep.k = true_k;
    cal::Decision queried;
    queried.sample_id = s.id;
    queried.abstain = false;

    CostLedger ledger;
    double unconditional = -1.0;
    const double rate = abstention_error_rate(
        model, std::vector<cal::Decision>{flip, keep, queried}, f.ds, ledger, &unconditional);
    CHECK(rate == 0.5);
    CHECK(unconditional == doctest::Approx(1.0 / 3.0));
    CHECK(ledger.audit_reads() == 2);
    CHECK(ledger.queries() == 0);

    cal::Decision orphan = flip;
    orphan.sample_id = 123456789;
    CHECK_THROWS_AS(
        abstention_error_rate(model, std::vector<cal::Decision>{orphan}, f.ds, ledger),
        ValidationError);
}

TEST_CASE("gated evaluation separates queries from audit reads") {
    const auto& f = fixture();
    const auto& model = cal_model();
    const auto band = cal::calibrate_model(model, validation_features(), 0.3,
                                           cal::BandMode::per_logit);

    CostLedger ledger;
    const auto r = evaluate_cal(model, band, f.ds, f.split.test, ledger);
    REQUIRE(r.sample_count == static_cast<int64_t>(f.split.test.size()));
    CHECK(r.alpha == 0.3);
    CHECK(r.per_class_recall.size() == 4);
    CHECK(r.absent_classes.empty());
    CHECK(r.balanced_accuracy > 0.25);  // beats chance
    CHECK(r.abstention_error_rate >= 0.0);
    CHECK(r.abstention_error_rate <= 1.0);
    CHECK(r.unconditional_error_rate <= r.abstention_error_rate);

    // Every sample either queried genetics or, having abstained, was audited.
    const auto n = static_cast<int64_t>(f.split.test.size());
    const auto abstained = static_cast<int64_t>(std::lround(r.success_rate * n));
    CHECK(ledger.audit_reads() == abstained);
    CHECK(ledger.queries() == n - abstained);

    // The summary agrees with a by-hand inference loop.
    CostLedger again;
    int64_t abstain_tally = 0;
    for (int64_t p : f.split.test)
        abstain_tally +=
            cal::infer_cal(model, band, f.ds.samples[static_cast<size_t>(p)], again).abstain;
    CHECK(r.success_rate == static_cast<double>(abstain_tally) / n);
}

TEST_CASE("the alpha-zero row never abstains and scores the full multimodal mix") {
    const auto& f = fixture();
    const auto& model = cal_model();
    const auto band =
        cal::calibrate_model(model, validation_features(), 0.0, cal::BandMode::per_logit);
    CHECK_FALSE(band.is_finite());

    CostLedger ledger;
    const auto r = evaluate_cal(model, band, f.ds, f.split.test, ledger);
    CHECK(r.success_rate == 0.0);
    CHECK(r.abstention_error_rate == 0.0);
    CHECK(ledger.audit_reads() == 0);

    std::vector<int> preds, labels;
    for (int64_t p : f.split.test) {
        const Sample& s = f.ds.samples[static_cast<size_t>(p)];
        const auto mixed = cal::mix_logits(protopnet_logits(model.image_net, s.image),
                                           protopnet_logits(model.genetic_net, *s.genetic),
                                           model.mixer);
        preds.push_back(argmax_index(mixed));
        labels.push_back(s.label);
    }
    CHECK(r.balanced_accuracy == balanced_accuracy(preds, labels, 4));
}

TEST_CASE("the alpha sweep matches singleton runs and stays monotone") {
    const auto& f = fixture();
    const auto& model = cal_model();
    const auto feats = validation_features();
    const V alphas = {0.05, 0.2, 0.5};
    const auto points =
        sweep_alpha(model, feats, f.ds, f.split.test, alphas, cal::BandMode::per_logit);
    REQUIRE(points.size() == 3);

    for (size_t i = 0; i < points.size(); ++i) {
        const auto band =
            cal::calibrate_model(model, feats, alphas[i], cal::BandMode::per_logit);
        CostLedger ledger;
        const auto solo = evaluate_cal(model, band, f.ds, f.split.test, ledger);
        CHECK(points[i].report.balanced_accuracy == solo.balanced_accuracy);
        CHECK(points[i].report.success_rate == solo.success_rate);
        CHECK(points[i].report.abstention_error_rate == solo.abstention_error_rate);
        if (i > 0) {
            CHECK(points[i].delta_sup <= points[i - 1].delta_sup);
            CHECK(points[i].report.success_rate >= points[i - 1].report.success_rate);
        }
    }

    const auto acc = accuracy_vs_success(points);
    const auto err = error_vs_alpha(points);
    REQUIRE(acc.size() == 3);
    CHECK(acc[1].first == points[1].report.success_rate);
    CHECK(acc[1].second == points[1].report.balanced_accuracy);
    CHECK(err[2].first == 0.5);
    CHECK(err[2].second == points[2].report.abstention_error_rate);

    CHECK_THROWS_AS(sweep_alpha(model, feats, f.ds, f.split.test, V{0.2, 0.1},
                                cal::BandMode::per_logit),
                    ValidationError);
    CHECK_THROWS_AS(sweep_alpha(model, feats, f.ds, f.split.test, V{}, cal::BandMode::per_logit),
                    ValidationError);
}

TEST_CASE("the gated ablation grid mirrors the table and zero weights collapse cells") {
    const auto& f = fixture();
    auto base = cal_cfg();
    base.epochs = 4;
    base.lambda_margin = 0.0;  // margin term absent even in its "on" cells
    const auto cells =
        ablate_cal(f.ds, f.split, f.image_net, f.genetic_net, base, 0.05, cal::BandMode::per_logit);
    REQUIRE(cells.size() == 4);
    CHECK(cells[0].name == "None");
    CHECK(cells[1].name == "Mar.");
    CHECK(cells[2].name == "Mod.");
    CHECK(cells[3].name == "Mar. + Mod.");
    CHECK(cells[3].first);
    CHECK(cells[3].second);

    // With lambda_margin == 0 the margin-only cell trains the same model as
    // the no-loss cell, and the combined cell the same as modality-only.
    CHECK(cells[1].report.balanced_accuracy == cells[0].report.balanced_accuracy);
    CHECK(cells[1].report.success_rate == cells[0].report.success_rate);
    CHECK(cells[3].report.balanced_accuracy == cells[2].report.balanced_accuracy);
    CHECK(cells[3].report.success_rate == cells[2].report.success_rate);
    // The hash covers effective coefficients, so the collapsed cells share it.
    CHECK(cells[0].report.config_hash == cells[1].report.config_hash);
    CHECK(cells[0].report.config_hash != cells[2].report.config_hash);
    CHECK(cells[0].report.alpha == 0.05);
}

TEST_CASE("both gate losses push success at least as high as neither") {
    const auto& f = fixture();
    const auto cells = ablate_cal(f.ds, f.split, f.image_net, f.genetic_net, cal_cfg(), 0.05,
                                  cal::BandMode::per_logit);
    CHECK(cells[3].report.success_rate >= cells[0].report.success_rate);
}

TEST_CASE("the tree ablation grid shares its unimodal trees across cells") {
    const auto& f = fixture();
    tree::AlpConfig base;
    base.threshold = 0.8;
    base.epochs = 4;
    base.batch_size = 16;
    base.lr = 0.2;
    base.seed = 3;
    base.loss.variability = 0.0;
    const auto cells = ablate_alp(f.ds, f.split, f.image_tree, f.genetic_tree, base);
    REQUIRE(cells.size() == 4);
    CHECK(cells[0].name == "None");
    CHECK(cells[1].name == "Var.");
    CHECK(cells[2].name == "Rout.");
    CHECK(cells[3].name == "Var. + Rout.");

    CHECK(cells[1].report.balanced_accuracy == cells[0].report.balanced_accuracy);
    CHECK(cells[1].report.success_rate == cells[0].report.success_rate);
    CHECK(cells[3].report.balanced_accuracy == cells[2].report.balanced_accuracy);
    for (const auto& c : cells) {
        CHECK(c.report.threshold == 0.8);
        CHECK(c.report.sample_count == static_cast<int64_t>(f.split.test.size()));
    }
}

TEST_CASE("rate and series files land on disk with the advertised shapes") {
    const auto& f = fixture();
    const auto& model = cal_model();
    const auto points = sweep_alpha(model, validation_features(), f.ds, f.split.test,
                                    V{0.1, 0.4}, cal::BandMode::l_infinity);

    testutil::TempDir tmp;
    write_sweep_csv(tmp / "sweep.csv", points);
    std::ifstream in(tmp / "sweep.csv");
    std::string header, row1, row2, extra;
    std::getline(in, header);
    std::getline(in, row1);
    std::getline(in, row2);
    CHECK(header ==
          "alpha,delta_sup,balanced_accuracy,raw_accuracy,success_rate,"
          "abstention_error_rate,unconditional_error_rate,samples");
    CHECK(std::stod(row1.substr(0, row1.find(','))) == 0.1);
    CHECK(std::stod(row2.substr(0, row2.find(','))) == 0.4);
    CHECK_FALSE(std::getline(in, extra));

    const auto series = accuracy_vs_success(points);
    write_series_csv(tmp / "acc.csv", series, "success_rate", "balanced_accuracy");
    std::ifstream sin(tmp / "acc.csv");
    std::getline(sin, header);
    CHECK(header == "success_rate,balanced_accuracy");

    CHECK_THROWS_AS(write_sweep_csv(tmp / "no_dir" / "sweep.csv", points), ContainerError);
}

TEST_CASE("ablation CSV mirrors the table shape") {
    testutil::TempDir tmp;
    std::vector<AblationCell> cells(2);
    cells[0].name = "None";
    cells[1].name = "Mar. + Mod.";
    cells[1].first = cells[1].second = true;
    cells[1].report.balanced_accuracy = 0.5;
    write_ablation_csv(tmp / "ablate.csv", cells);

    std::ifstream in(tmp / "ablate.csv");
    std::string header, row1, row2;
    std::getline(in, header);
    std::getline(in, row1);
    std::getline(in, row2);
    CHECK(header == "cell,first_loss,second_loss,balanced_accuracy,raw_accuracy,success_rate,samples");
    CHECK(row1.substr(0, 11) == "\"None\",0,0,");
    CHECK(row2.substr(0, 18) == "\"Mar. + Mod.\",1,1,");
}

TEST_CASE("the JSON summary round-trips every field") {
    EvalReport r;
    r.balanced_accuracy = 0.875;
    r.raw_accuracy = 0.9;
    r.success_rate = 0.25;
    r.abstention_error_rate = 0.125;
    r.unconditional_error_rate = 0.03125;
    r.per_class_recall = {1.0, 0.75};
    r.absent_classes = {3};
    r.alpha = 0.05;
    r.sample_count = 64;
    r.seed = 9;
    r.config_hash = fnv1a64("demo");

    testutil::TempDir tmp;
    write_report_json(tmp / "report.json", r);
    std::ifstream in(tmp / "report.json");
    nlohmann::json j;
    in >> j;
    CHECK(j["balanced_accuracy"] == 0.875);
    CHECK(j["raw_accuracy"] == 0.9);
    CHECK(j["success_rate"] == 0.25);
    CHECK(j["abstention_error_rate"] == 0.125);
    CHECK(j["unconditional_error_rate"] == 0.03125);
    CHECK(j["per_class_recall"] == std::vector<double>{1.0, 0.75});
    CHECK(j["absent_classes"] == std::vector<int>{3});
    CHECK(j["alpha"] == 0.05);
    CHECK(j["threshold"].is_null());
    CHECK(j["sample_count"] == 64);
    CHECK(j["seed"] == 9);
    CHECK(j["config_hash"] == fnv1a64("demo"));
}
