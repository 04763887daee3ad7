#pragma once

#include <filesystem>
#include <string>

#include "protogate/cal.hpp"
#include "protogate/protopnet.hpp"
#include "protogate/tree.hpp"

namespace protogate {

/// Model checkpoints share the dataset container family: 8-byte magic, u32
/// version, typed shape fields, float32 parameter payloads. Every save also
/// writes a human-readable sidecar at `<path>.json`; the binary alone is
/// authoritative and loaders never read the sidecar.
///
/// Saving is canonical: identical models produce identical bytes, and
/// save(load(save(x))) == save(x).

enum class CheckpointKind { dataset, protopnet, tree, cal_model };

/// Identifies a container by its magic; ContainerError(bad_magic) otherwise.
CheckpointKind checkpoint_kind(const std::filesystem::path& path);

/// Sidecar JSON: modality, prototype/class/feature counts, class
/// assignments, projection provenance.
void save_protopnet(const ProtoPNet& model, const std::filesystem::path& path);
ProtoPNet load_protopnet(const std::filesystem::path& path);

/// Only prototypes a node can still route on are serialized: a saturated
/// node's dead modality stores index -1 and its payload is dropped, so a
/// clipped tree carries exactly one prototype per node. Sidecar JSON: depth,
/// kind, modality census, per-leaf predicted class and (when `stats` is
/// given) hard-routing accuracy.
void save_tree(const tree::ProtoTree& t, const std::filesystem::path& path,
               const tree::LeafStats* stats = nullptr);
tree::ProtoTree load_tree(const std::filesystem::path& path);

/// Sidecar JSON: class count, per-net shapes, the sigma(m) gate
/// distribution, and the k-selection flag.
void save_cal(const cal::CalModel& model, const std::filesystem::path& path);
cal::CalModel load_cal(const std::filesystem::path& path);

}  // namespace protogate
