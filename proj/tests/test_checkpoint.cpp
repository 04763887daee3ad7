#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

#include <nlohmann/json.hpp>

#include "doctest.h"
#include "protogate/checkpoint.hpp"
#include "protogate/serialize.hpp"
#include "test_util.hpp"

using namespace protogate;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

std::string file_bytes(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

nlohmann::json sidecar(const std::filesystem::path& p) {
    std::ifstream in(p.string() + ".json");
    nlohmann::json j;
    in >> j;
    return j;
}

/// Flip one byte at `offset` in place.
void corrupt_byte(const std::filesystem::path& p, std::streamoff offset, char value) {
    std::fstream f(p, std::ios::binary | std::ios::in | std::ios::out);
    f.seekp(offset);
    f.put(value);
}

ProtoPNet demo_net(Modality modality, uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    ProtoPNet net;
    net.modality = modality;
    net.class_count = 3;
    net.protos = PrototypeSet(6, 4);
    for (auto& v : net.protos.values) v = gauss(rng);
    net.protos.class_of = {0, 0, 1, 1, 2, 2};
    for (int p = 0; p < 6; ++p) net.protos.provenance.push_back({10 + p, p % 2, p % 3});
    net.head = LinearHead(3, 6);
    for (auto& v : net.head.weights) v = gauss(rng);
    net.head.bias = {0.1, -0.2, 0.3};
    return net;
}

/// Depth-2 multimodal tree with both prototype banks filled and chosen
/// modality weights; wiring is identity.
tree::ProtoTree demo_tree(std::vector<double> m_values, uint64_t seed) {
    tree::ProtoTree t = tree::make_tree(tree::TreeKind::multimodal, 2, 3);
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    t.protos_image = PrototypeSet(t.node_count(), 4);
    t.protos_genetic = PrototypeSet(t.node_count(), 4);
    for (auto& v : t.protos_image.values) v = gauss(rng);
    for (auto& v : t.protos_genetic.values) v = gauss(rng);
    for (int i = 0; i < t.node_count(); ++i) t.nodes[static_cast<size_t>(i)].m = m_values[static_cast<size_t>(i)];
    for (int l = 0; l < t.leaf_count(); ++l) {
        std::vector<double> d = {0.25, 0.25, 0.5};
        std::rotate(d.begin(), d.begin() + l % 3, d.end());
        t.leaves[static_cast<size_t>(l)] = d;
    }
    return t;
}

Sample demo_sample(int64_t id, uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    Sample s;
    s.id = id;
    s.label = 0;
    s.image = EmbeddingMap(Modality::image, 4, 1, 2);
    for (auto& v : s.image.values) v = static_cast<float>(gauss(rng));
    EmbeddingMap g(Modality::genetic, 4, 1, 2);
    for (auto& v : g.values) v = static_cast<float>(gauss(rng));
    s.genetic = std::move(g);
    return s;
}

}  // namespace

TEST_CASE("prototype net checkpoints round-trip and resave canonically") {
    testutil::TempDir tmp;
    const auto path = tmp / "net.pgp";
    const ProtoPNet net = demo_net(Modality::genetic, 7);
    save_protopnet(net, path);

    const ProtoPNet back = load_protopnet(path);
    CHECK(back.modality == Modality::genetic);
    CHECK(back.class_count == 3);
    CHECK(back.protos.class_of == net.protos.class_of);
    CHECK(back.protos.provenance == net.protos.provenance);
    CHECK(back.protos.dim == 4);
    CHECK(back.head.bias.size() == 3);
    for (size_t i = 0; i < net.protos.values.size(); ++i) {
        CHECK(back.protos.values[i] == static_cast<double>(static_cast<float>(net.protos.values[i])));
    }
    for (size_t i = 0; i < net.head.weights.size(); ++i)
        CHECK(back.head.weights[i] == doctest::Approx(net.head.weights[i]).epsilon(1e-6));

    const auto path2 = tmp / "net2.pgp";
    save_protopnet(back, path2);
    CHECK(file_bytes(path) == file_bytes(path2));

    const auto j = sidecar(path);
    CHECK(j["format"] == "PGPNET01");
    CHECK(j["modality"] == "genetic");
    CHECK(j["prototype_count"] == 6);
    CHECK(j["feature_dim"] == 4);
    CHECK(j["class_of"] == std::vector<int>{0, 0, 1, 1, 2, 2});
    CHECK(j["provenance"].size() == 6);
    CHECK(j["provenance"][2]["sample_id"] == 12);
}

TEST_CASE("checkpoint kinds are sniffed from their magics") {
    testutil::TempDir tmp;
    save_protopnet(demo_net(Modality::image, 1), tmp / "a.pgp");
    CHECK(checkpoint_kind(tmp / "a.pgp") == CheckpointKind::protopnet);

    save_tree(demo_tree({0.5, 0.5, 0.5}, 2), tmp / "b.pgt");
    CHECK(checkpoint_kind(tmp / "b.pgt") == CheckpointKind::tree);

    const auto model = cal::make_cal_model(demo_net(Modality::image, 3),
                                           demo_net(Modality::genetic, 4));
    save_cal(model, tmp / "c.pgc");
    CHECK(checkpoint_kind(tmp / "c.pgc") == CheckpointKind::cal_model);

    SynthConfig cfg;
    cfg.class_count = 2;
    cfg.per_class = 2;
    save_dataset(synth_generate(cfg, 1), tmp / "d.pgd");
    CHECK(checkpoint_kind(tmp / "d.pgd") == CheckpointKind::dataset);

    std::ofstream(tmp / "junk.bin") << "NOTMAGIC and then some";
    CHECK_THROWS_AS(checkpoint_kind(tmp / "junk.bin"), ContainerError);
    std::ofstream(tmp / "tiny.bin") << "abc";
    CHECK_THROWS_AS(checkpoint_kind(tmp / "tiny.bin"), ContainerError);
    CHECK_THROWS_AS(checkpoint_kind(tmp / "absent.bin"), ContainerError);
}

TEST_CASE("a clipped tree stores exactly one prototype payload per node") {
    testutil::TempDir tmp;
    const auto path = tmp / "alp.pgt";
    // Root and right child genetic, left child image.
    tree::ProtoTree t = demo_tree({kInf, -kInf, kInf}, 11);
    save_tree(t, path);

    const tree::ProtoTree back = load_tree(path);
    CHECK(back.kind == tree::TreeKind::multimodal);
    CHECK(back.depth == 2);
    CHECK(back.nodes[0].m == kInf);
    CHECK(back.nodes[1].m == -kInf);

    // Dead sides dropped: the genetic bank keeps rows for nodes 0 and 2, the
    // image bank only node 1's row.
    CHECK(back.protos_genetic.count() == 2);
    CHECK(back.protos_image.count() == 1);
    CHECK(back.nodes[0].proto_image == -1);
    CHECK(back.nodes[0].proto_genetic == 0);
    CHECK(back.nodes[1].proto_image == 0);
    CHECK(back.nodes[1].proto_genetic == -1);
    CHECK(back.nodes[2].proto_image == -1);
    CHECK(back.nodes[2].proto_genetic == 1);
    for (int d = 0; d < 4; ++d) {
        CHECK(back.protos_image.row(0)[static_cast<size_t>(d)] ==
              static_cast<double>(static_cast<float>(t.protos_image.row(1)[static_cast<size_t>(d)])));
        CHECK(back.protos_genetic.row(1)[static_cast<size_t>(d)] ==
              static_cast<double>(static_cast<float>(t.protos_genetic.row(2)[static_cast<size_t>(d)])));
    }

    // Routing is preserved through the index remap.
    for (int i = 0; i < 8; ++i) {
        const Sample s = demo_sample(i, 100 + static_cast<uint64_t>(i));
        CostLedger la, lb;
        const auto da = tree::classify_hard(t, s, la);
        const auto db = tree::classify_hard(back, s, lb);
        CHECK(da.leaf == db.leaf);
        CHECK(da.predicted == db.predicted);
    }

    const auto j = sidecar(path);
    CHECK(j["modality_census"]["image"] == 1);
    CHECK(j["modality_census"]["genetic"] == 2);
    CHECK(j["modality_census"]["mixed"] == 0);
    CHECK(j["leaves"].size() == 4);
    CHECK_FALSE(j["leaves"][0].contains("accuracy"));
}

TEST_CASE("an unclipped tree keeps both payloads and resaves canonically") {
    testutil::TempDir tmp;
    const auto path = tmp / "soft.pgt";
    const tree::ProtoTree t = demo_tree({0.25, -1.5, 3.0}, 13);
    save_tree(t, path);

    const tree::ProtoTree back = load_tree(path);
    CHECK(back.protos_image.count() == 3);
    CHECK(back.protos_genetic.count() == 3);
    for (int i = 0; i < 3; ++i) {
        CHECK(back.nodes[static_cast<size_t>(i)].proto_image == i);
        CHECK(back.nodes[static_cast<size_t>(i)].proto_genetic == i);
        CHECK(back.nodes[static_cast<size_t>(i)].m == t.nodes[static_cast<size_t>(i)].m);
    }
    CHECK(sidecar(path)["modality_census"]["mixed"] == 3);

    const auto path2 = tmp / "soft2.pgt";
    save_tree(back, path2);
    CHECK(file_bytes(path) == file_bytes(path2));
}

TEST_CASE("unimodal tree checkpoints drop the unused bank entirely") {
    testutil::TempDir tmp;
    tree::ProtoTree t = tree::make_tree(tree::TreeKind::image, 2, 3);
    t.protos_image = PrototypeSet(3, 4);
    std::mt19937_64 rng(5);
    std::normal_distribution<double> gauss(0.0, 1.0);
    for (auto& v : t.protos_image.values) v = gauss(rng);
    for (auto& leaf : t.leaves) leaf = {0.2, 0.3, 0.5};

    const auto path = tmp / "img.pgt";
    save_tree(t, path);
    const tree::ProtoTree back = load_tree(path);
    CHECK(back.kind == tree::TreeKind::image);
    CHECK(back.protos_genetic.count() == 0);
    CHECK(back.nodes[0].proto_genetic == -1);
    CHECK(back.leaves[0] ==
          std::vector<double>{static_cast<double>(0.2f), static_cast<double>(0.3f),
                              static_cast<double>(0.5f)});
    CHECK(sidecar(path)["kind"] == "image");
    CHECK(sidecar(path)["modality_census"]["image"] == 3);
}

TEST_CASE("leaf statistics surface in the tree sidecar when provided") {
    testutil::TempDir tmp;
    tree::LeafStats stats;
    stats.routed = {5, 0, 2, 1};
    stats.correct = {4, 0, 2, 0};
    stats.acc = {0.8, 0.0, 1.0, 0.0};
    const auto path = tmp / "t.pgt";
    save_tree(demo_tree({1.0, -1.0, 0.0}, 17), path, &stats);
    const auto j = sidecar(path);
    CHECK(j["leaves"][0]["accuracy"] == 0.8);
    CHECK(j["leaves"][0]["routed"] == 5);
    CHECK(j["leaves"][2]["accuracy"] == 1.0);
}

TEST_CASE("gate model checkpoints round-trip every block") {
    testutil::TempDir tmp;
    auto model = cal::make_cal_model(demo_net(Modality::image, 21),
                                     demo_net(Modality::genetic, 22), false, 0.0, true);
    model.mixer.m = {0.5, -1.25, 2.0};
    for (auto& v : model.predictor.weights) v += 0.125;

    const auto path = tmp / "gate.pgc";
    save_cal(model, path);
    const auto back = load_cal(path);
    CHECK(back.class_count() == 3);
    CHECK(back.k_from_image_only);
    CHECK(back.mixer.m == std::vector<double>{0.5, -1.25, 2.0});
    CHECK(back.image_net.modality == Modality::image);
    CHECK(back.genetic_net.modality == Modality::genetic);
    CHECK(back.predictor.proto_count == 6);
    for (size_t i = 0; i < model.predictor.weights.size(); ++i)
        CHECK(back.predictor.weights[i] ==
              doctest::Approx(model.predictor.weights[i]).epsilon(1e-6));

    const auto path2 = tmp / "gate2.pgc";
    save_cal(back, path2);
    CHECK(file_bytes(path) == file_bytes(path2));

    const auto j = sidecar(path);
    CHECK(j["scalar_modality"] == false);
    CHECK(j["k_from_image_only"] == true);
    CHECK(j["image_weight_sigma"].size() == 3);
    CHECK(j["image_weight_sigma"][0] == doctest::Approx(1.0 / (1.0 + std::exp(-0.5))));
}

TEST_CASE("container failure modes carry their distinct codes") {
    testutil::TempDir tmp;
    const auto net_path = tmp / "net.pgp";
    save_protopnet(demo_net(Modality::image, 31), net_path);
    const auto tree_path = tmp / "t.pgt";
    save_tree(demo_tree({1.0, 1.0, 1.0}, 32), tree_path);

    // Wrong container type.
    try {
        load_tree(net_path);
        FAIL("expected bad magic");
    } catch (const ContainerError& e) {
        CHECK(e.code() == ContainerErrc::bad_magic);
    }

    // Future version.
    const auto vers = tmp / "vers.pgt";
    std::filesystem::copy_file(tree_path, vers);
    corrupt_byte(vers, 8, 9);
    try {
        load_tree(vers);
        FAIL("expected bad version");
    } catch (const ContainerError& e) {
        CHECK(e.code() == ContainerErrc::bad_version);
    }

    // Unknown tree kind byte (right after the 12-byte magic+version header).
    const auto kind = tmp / "kind.pgt";
    std::filesystem::copy_file(tree_path, kind);
    corrupt_byte(kind, 12, 7);
    try {
        load_tree(kind);
        FAIL("expected manifest mismatch");
    } catch (const ContainerError& e) {
        CHECK(e.code() == ContainerErrc::manifest_mismatch);
    }

    // Truncated payload.
    const auto trunc = tmp / "trunc.pgp";
    const std::string bytes = file_bytes(net_path);
    std::ofstream(trunc, std::ios::binary) << bytes.substr(0, bytes.size() - 11);
    try {
        load_protopnet(trunc);
        FAIL("expected truncation");
    } catch (const ContainerError& e) {
        CHECK(e.code() == ContainerErrc::truncated);
    }
}

TEST_CASE("saving rejects models that disagree with their own shapes") {
    testutil::TempDir tmp;
    ProtoPNet net = demo_net(Modality::image, 41);
    net.head = LinearHead(3, 2);  // wrong prototype count
    CHECK_THROWS_AS(save_protopnet(net, tmp / "bad.pgp"), ValidationError);

    tree::ProtoTree t = demo_tree({1.0, 1.0, 1.0}, 42);
    t.nodes[1].proto_image = 99;
    CHECK_THROWS_AS(save_tree(t, tmp / "bad.pgt"), ValidationError);

    tree::ProtoTree short_leaf = demo_tree({1.0, -1.0, 1.0}, 43);
    short_leaf.leaves[2] = {0.5, 0.5};
    CHECK_THROWS_AS(save_tree(short_leaf, tmp / "bad2.pgt"), ValidationError);
}
