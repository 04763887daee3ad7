#include "protogate/checkpoint.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include <nlohmann/json.hpp>

#include "protogate/common.hpp"
#include "protogate/serialize.hpp"

namespace protogate {

namespace {

constexpr char kDatasetMagic[9] = "PGDSET01";
constexpr char kProtoPNetMagic[9] = "PGPNET01";
constexpr char kTreeMagic[9] = "PGTREE01";
constexpr char kCalMagic[9] = "PGCALM01";
constexpr uint32_t kVersion = 1;

void write_sidecar(const std::filesystem::path& path, const nlohmann::json& j) {
    std::filesystem::path sidecar = path;
    sidecar += ".json";
    std::ofstream out(sidecar, std::ios::trunc);
    if (!out)
        throw ContainerError(ContainerErrc::missing_file,
                             "cannot open for write: " + sidecar.string());
    out << j.dump(2) << '\n';
}

void write_protos(BinaryWriter& w, const PrototypeSet& p) {
    w.u32(static_cast<uint32_t>(p.dim));
    w.u32(static_cast<uint32_t>(p.count()));
    w.u8(p.has_classes() ? 1 : 0);
    if (p.has_classes())
        for (int c : p.class_of) w.u32(static_cast<uint32_t>(c));
    w.u8(p.provenance.empty() ? 0 : 1);
    for (const PatchProvenance& pr : p.provenance) {
        w.i64(pr.sample_id);
        w.i64(pr.h);
        w.i64(pr.w);
    }
    w.f32_array(p.values);
}

PrototypeSet read_protos(BinaryReader& r, const std::string& where) {
    const int dim = static_cast<int>(r.u32());
    const int count = static_cast<int>(r.u32());
    if (dim < 0 || count < 0 || (count > 0 && dim == 0))
        throw ContainerError(ContainerErrc::dim_mismatch, "bad prototype shape in " + where);
    PrototypeSet p;
    p.dim = dim;
    if (r.u8() != 0) {
        p.class_of.resize(static_cast<size_t>(count));
        for (int& c : p.class_of) c = static_cast<int>(r.u32());
    }
    if (r.u8() != 0) {
        p.provenance.resize(static_cast<size_t>(count));
        for (PatchProvenance& pr : p.provenance) {
            pr.sample_id = r.i64();
            pr.h = static_cast<int>(r.i64());
            pr.w = static_cast<int>(r.i64());
        }
    }
    p.values = r.f32_array_as_double(static_cast<size_t>(count) * static_cast<size_t>(dim));
    return p;
}

void write_head(BinaryWriter& w, const LinearHead& h) {
    w.u32(static_cast<uint32_t>(h.class_count));
    w.u32(static_cast<uint32_t>(h.proto_count));
    w.u8(h.bias.empty() ? 0 : 1);
    w.f32_array(h.weights);
    if (!h.bias.empty()) w.f32_array(h.bias);
}

LinearHead read_head(BinaryReader& r, const std::string& where) {
    const int k = static_cast<int>(r.u32());
    const int p = static_cast<int>(r.u32());
    if (k < 1 || p < 1)
        throw ContainerError(ContainerErrc::dim_mismatch, "bad head shape in " + where);
    const bool has_bias = r.u8() != 0;
    LinearHead h(k, p);
    h.weights = r.f32_array_as_double(static_cast<size_t>(k) * static_cast<size_t>(p));
    if (has_bias) h.bias = r.f32_array_as_double(static_cast<size_t>(k));
    return h;
}

void write_protopnet_body(BinaryWriter& w, const ProtoPNet& model) {
    w.u8(model.modality == Modality::genetic ? 1 : 0);
    w.u32(static_cast<uint32_t>(model.class_count));
    write_protos(w, model.protos);
    write_head(w, model.head);
}

ProtoPNet read_protopnet_body(BinaryReader& r, const std::string& where) {
    ProtoPNet model;
    model.modality = r.u8() == 1 ? Modality::genetic : Modality::image;
    model.class_count = static_cast<int>(r.u32());
    model.protos = read_protos(r, where);
    model.head = read_head(r, where);
    if (model.head.class_count != model.class_count ||
        model.head.proto_count != model.protos.count())
        throw ContainerError(ContainerErrc::dim_mismatch,
                             "head and prototype shapes disagree in " + where);
    return model;
}

nlohmann::json provenance_json(const PrototypeSet& p) {
    nlohmann::json arr = nlohmann::json::array();
    for (const PatchProvenance& pr : p.provenance)
        arr.push_back({{"sample_id", pr.sample_id}, {"h", pr.h}, {"w", pr.w}});
    return arr;
}

/// Prototype rows a node can still route on; a saturated weight kills the
/// other side's payload.
struct Survivors {
    std::vector<int> remap;  // old index -> compact index, -1 = dropped
    PrototypeSet compact;
};

Survivors compact_protos(const PrototypeSet& full, const std::vector<bool>& referenced) {
    Survivors s;
    s.remap.assign(static_cast<size_t>(full.count()), -1);
    s.compact.dim = full.dim;
    for (int i = 0; i < full.count(); ++i) {
        if (!referenced[static_cast<size_t>(i)]) continue;
        s.remap[static_cast<size_t>(i)] = static_cast<int>(s.compact.values.size()) /
                                          std::max(full.dim, 1);
        const auto row = full.row(i);
        s.compact.values.insert(s.compact.values.end(), row.begin(), row.end());
        if (!full.provenance.empty())
            s.compact.provenance.push_back(full.provenance[static_cast<size_t>(i)]);
    }
    return s;
}

}  // namespace

CheckpointKind checkpoint_kind(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ContainerError(ContainerErrc::missing_file, "cannot open: " + path.string());
    char magic[8];
    in.read(magic, 8);
    if (in.gcount() != 8)
        throw ContainerError(ContainerErrc::truncated, "no container header in " + path.string());
    if (std::memcmp(magic, kDatasetMagic, 8) == 0) return CheckpointKind::dataset;
    if (std::memcmp(magic, kProtoPNetMagic, 8) == 0) return CheckpointKind::protopnet;
    if (std::memcmp(magic, kTreeMagic, 8) == 0) return CheckpointKind::tree;
    if (std::memcmp(magic, kCalMagic, 8) == 0) return CheckpointKind::cal_model;
    throw ContainerError(ContainerErrc::bad_magic, "bad magic in " + path.string());
}

void save_protopnet(const ProtoPNet& model, const std::filesystem::path& path) {
    if (model.class_count < 1) throw ValidationError("model has no classes");
    if (model.head.proto_count != model.protos.count())
        throw ValidationError("head and prototype shapes disagree");
    BinaryWriter w(path);
    w.magic(kProtoPNetMagic);
    w.u32(kVersion);
    write_protopnet_body(w, model);
    w.close();

    write_sidecar(path, {{"format", kProtoPNetMagic},
                         {"modality", to_string(model.modality)},
                         {"class_count", model.class_count},
                         {"prototype_count", model.protos.count()},
                         {"feature_dim", model.protos.dim},
                         {"class_of", model.protos.class_of},
                         {"provenance", provenance_json(model.protos)}});
}

ProtoPNet load_protopnet(const std::filesystem::path& path) {
    BinaryReader r(path);
    r.expect_magic(kProtoPNetMagic);
    r.expect_version(kVersion);
    return read_protopnet_body(r, path.string());
}

void save_tree(const tree::ProtoTree& t, const std::filesystem::path& path,
               const tree::LeafStats* stats) {
    if (t.class_count < 1) throw ValidationError("tree has no classes");
    if (static_cast<int>(t.nodes.size()) != t.node_count() ||
        static_cast<int>(t.leaves.size()) != t.leaf_count())
        throw ValidationError("tree shape disagrees with its depth");

    std::vector<bool> img_ref(static_cast<size_t>(t.protos_image.count()), false);
    std::vector<bool> gen_ref(static_cast<size_t>(t.protos_genetic.count()), false);
    for (int i = 0; i < t.node_count(); ++i) {
        const double w = tree::genetic_weight(t, i);
        const tree::TreeNode& n = t.nodes[static_cast<size_t>(i)];
        if (t.uses(Modality::image) && w < 1.0) {
            if (n.proto_image < 0 || n.proto_image >= t.protos_image.count())
                throw ValidationError("node references a missing image prototype");
            img_ref[static_cast<size_t>(n.proto_image)] = true;
        }
        if (t.uses(Modality::genetic) && w > 0.0) {
            if (n.proto_genetic < 0 || n.proto_genetic >= t.protos_genetic.count())
                throw ValidationError("node references a missing genetic prototype");
            gen_ref[static_cast<size_t>(n.proto_genetic)] = true;
        }
    }
    const Survivors img = compact_protos(t.protos_image, img_ref);
    const Survivors gen = compact_protos(t.protos_genetic, gen_ref);

    BinaryWriter w(path);
    w.magic(kTreeMagic);
    w.u32(kVersion);
    w.u8(t.kind == tree::TreeKind::image     ? 0
         : t.kind == tree::TreeKind::genetic ? 1
                                             : 2);
    w.u32(static_cast<uint32_t>(t.depth));
    w.u32(static_cast<uint32_t>(t.class_count));
    int n_image = 0, n_genetic = 0, n_mixed = 0;
    for (int i = 0; i < t.node_count(); ++i) {
        const tree::TreeNode& n = t.nodes[static_cast<size_t>(i)];
        const double gw = tree::genetic_weight(t, i);
        (gw == 0.0 ? n_image : gw == 1.0 ? n_genetic : n_mixed) += 1;
        w.f64(n.m);
        w.i64(gw < 1.0 && n.proto_image >= 0 ? img.remap[static_cast<size_t>(n.proto_image)]
                                             : -1);
        w.i64(gw > 0.0 && n.proto_genetic >= 0 ? gen.remap[static_cast<size_t>(n.proto_genetic)]
                                               : -1);
    }
    for (const auto& leaf : t.leaves) {
        if (static_cast<int>(leaf.size()) != t.class_count)
            throw ValidationError("leaf distribution length disagrees with class count");
        w.f32_array(leaf);
    }
    write_protos(w, img.compact);
    write_protos(w, gen.compact);
    w.close();

    nlohmann::json leaves = nlohmann::json::array();
    for (int l = 0; l < t.leaf_count(); ++l) {
        nlohmann::json row = {{"leaf", l},
                              {"predicted", argmax_index(t.leaves[static_cast<size_t>(l)])}};
        if (stats != nullptr) {
            row["accuracy"] = stats->acc[static_cast<size_t>(l)];
            row["routed"] = stats->routed[static_cast<size_t>(l)];
        }
        leaves.push_back(std::move(row));
    }
    write_sidecar(path, {{"format", kTreeMagic},
                         {"kind", tree::to_string(t.kind)},
                         {"depth", t.depth},
                         {"class_count", t.class_count},
                         {"modality_census",
                          {{"image", n_image}, {"genetic", n_genetic}, {"mixed", n_mixed}}},
                         {"leaves", leaves}});
}

tree::ProtoTree load_tree(const std::filesystem::path& path) {
    BinaryReader r(path);
    r.expect_magic(kTreeMagic);
    r.expect_version(kVersion);
    const std::string where = path.string();

    const uint8_t kind_code = r.u8();
    if (kind_code > 2)
        throw ContainerError(ContainerErrc::manifest_mismatch, "unknown tree kind in " + where);
    const int depth = static_cast<int>(r.u32());
    const int class_count = static_cast<int>(r.u32());
    if (depth < 0 || depth > 25 || class_count < 1)
        throw ContainerError(ContainerErrc::dim_mismatch, "bad tree shape in " + where);

    tree::ProtoTree t;
    t.kind = kind_code == 0   ? tree::TreeKind::image
             : kind_code == 1 ? tree::TreeKind::genetic
                              : tree::TreeKind::multimodal;
    t.depth = depth;
    t.class_count = class_count;
    t.nodes.resize(static_cast<size_t>(t.node_count()));
    for (auto& n : t.nodes) {
        n.m = r.f64();
        n.proto_image = static_cast<int>(r.i64());
        n.proto_genetic = static_cast<int>(r.i64());
    }
    t.leaves.resize(static_cast<size_t>(t.leaf_count()));
    for (auto& leaf : t.leaves) leaf = r.f32_array_as_double(static_cast<size_t>(class_count));
    t.protos_image = read_protos(r, where);
    t.protos_genetic = read_protos(r, where);

    for (int i = 0; i < t.node_count(); ++i) {
        const tree::TreeNode& n = t.nodes[static_cast<size_t>(i)];
        const double gw = tree::genetic_weight(t, i);
        if (t.uses(Modality::image) && gw < 1.0 &&
            (n.proto_image < 0 || n.proto_image >= t.protos_image.count()))
            throw ContainerError(ContainerErrc::dim_mismatch,
                                 "node routes on a missing image prototype in " + where);
        if (t.uses(Modality::genetic) && gw > 0.0 &&
            (n.proto_genetic < 0 || n.proto_genetic >= t.protos_genetic.count()))
            throw ContainerError(ContainerErrc::dim_mismatch,
                                 "node routes on a missing genetic prototype in " + where);
    }
    return t;
}

void save_cal(const cal::CalModel& model, const std::filesystem::path& path) {
    if (model.mixer.m.empty()) throw ValidationError("mixed model has no modality weights");
    BinaryWriter w(path);
    w.magic(kCalMagic);
    w.u32(kVersion);
    write_protopnet_body(w, model.image_net);
    write_protopnet_body(w, model.genetic_net);
    w.u32(static_cast<uint32_t>(model.mixer.m.size()));
    w.f32_array(model.mixer.m);
    write_head(w, model.predictor);
    w.u8(model.k_from_image_only ? 1 : 0);
    w.close();

    nlohmann::json sigma = nlohmann::json::array();
    for (size_t j = 0; j < model.mixer.m.size(); ++j)
        sigma.push_back(model.mixer.image_weight(static_cast<int>(j)));
    write_sidecar(path,
                  {{"format", kCalMagic},
                   {"class_count", model.class_count()},
                   {"image_prototypes", model.image_net.protos.count()},
                   {"genetic_prototypes", model.genetic_net.protos.count()},
                   {"scalar_modality", model.mixer.m.size() == 1},
                   {"image_weight_sigma", sigma},
                   {"k_from_image_only", model.k_from_image_only}});
}

cal::CalModel load_cal(const std::filesystem::path& path) {
    BinaryReader r(path);
    r.expect_magic(kCalMagic);
    r.expect_version(kVersion);
    const std::string where = path.string();

    cal::CalModel model;
    model.image_net = read_protopnet_body(r, where);
    model.genetic_net = read_protopnet_body(r, where);
    if (model.image_net.modality != Modality::image ||
        model.genetic_net.modality != Modality::genetic ||
        model.image_net.class_count != model.genetic_net.class_count)
        throw ContainerError(ContainerErrc::manifest_mismatch,
                             "mixed model nets disagree in " + where);
    const auto mixer_size = static_cast<size_t>(r.u32());
    if (mixer_size != 1 && mixer_size != static_cast<size_t>(model.class_count()))
        throw ContainerError(ContainerErrc::dim_mismatch, "bad mixer length in " + where);
    model.mixer.m = r.f32_array_as_double(mixer_size);
    model.predictor = read_head(r, where);
    if (model.predictor.class_count != model.class_count() ||
        model.predictor.proto_count != model.image_net.protos.count())
        throw ContainerError(ContainerErrc::dim_mismatch, "bad predictor shape in " + where);
    model.k_from_image_only = r.u8() != 0;
    return model;
}

}  // namespace protogate
