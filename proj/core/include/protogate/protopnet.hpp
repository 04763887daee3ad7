#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "protogate/dataset.hpp"
#include "protogate/prototype.hpp"

namespace protogate {

/// Unimodal prototype classifier: similarity layer + max pool + linear head
/// over a frozen embedding space.
struct ProtoPNet {
    Modality modality = Modality::image;
    int class_count = 0;
    PrototypeSet protos;  // class-assigned
    LinearHead head;
};

std::vector<double> protopnet_logits(const ProtoPNet& model, const EmbeddingMap& e);

/// Gradient-phase structure around projection steps: `pre_project_epochs` of
/// optimization, a projection, then `n_post_project_phases` repetitions of
/// (epochs_per_phase * phase_multiplier epochs, projection). A schedule with
/// zero total epochs leaves the initialized model untouched.
struct PhaseSchedule {
    int pre_project_epochs = 5;
    int n_post_project_phases = 2;
    int epochs_per_phase = 3;
    int phase_multiplier = 1;
    int batch_size = 32;
    double lr = 0.05;
    int lr_step_size = 5;   // epochs between decays; 0 disables
    double lr_gamma = 0.5;  // decay factor
    uint64_t seed = 0;

    int total_gradient_epochs() const {
        return pre_project_epochs + n_post_project_phases * epochs_per_phase * phase_multiplier;
    }
};

/// Multipliers applied directly to the similarity maxima and the L1 penalty:
/// total = CE + cluster*max_own_sim + separation*max_other_sim + l1*L1.
/// A negative cluster coefficient therefore pulls own-class similarity up.
struct LossCoefficients {
    double cluster = -0.8;
    double separation = 0.08;
    double l1 = 1e-4;
};

struct ProtoPNetConfig {
    int protos_per_class = 2;
    double correct_class_connection = 1.0;
    /// Defaults by modality when unset: image -0.5, genetic 0.
    std::optional<double> incorrect_class_connection;
    LossCoefficients loss;
    PhaseSchedule schedule;
};

struct PhaseReport {
    std::string name;
    std::vector<double> epoch_losses;  // mean per-sample loss per epoch
    /// Fraction of train samples whose argmax changed at the projection that
    /// ended this phase (-1 when the phase had no projection).
    double projection_flip_fraction = -1.0;
};

struct TrainReport {
    std::vector<PhaseReport> phases;
};

/// Trains prototypes and head jointly with SGD over oversampled epochs,
/// projecting per the schedule. Every class needs at least one training
/// sample. Deterministic per seed.
ProtoPNet train_protopnet(const Dataset& ds, std::span<const int64_t> train_positions,
                          Modality modality, const ProtoPNetConfig& cfg,
                          TrainReport* report = nullptr);

/// The embedding a model reads from a sample; throws when absent.
const EmbeddingMap& modality_embedding(const Sample& s, Modality modality);

/// Mean total training loss and its gradient over a batch, exactly as the
/// trainer computes them.
struct BatchGradient {
    double loss = 0.0;
    std::vector<double> protos;   // d loss / d prototype values
    std::vector<double> weights;  // d loss / d head weights
};
BatchGradient batch_gradient(const ProtoPNet& model, const LossCoefficients& coefs,
                             std::span<const LatentExample> batch);

/// Central finite differences over every prototype and head parameter.
/// corrupt_index (into the concatenated [protos | weights] vector) is a
/// negative-control hook that perturbs the analytic gradient before
/// comparison; -1 leaves it untouched.
struct GradCheckReport {
    double max_relative_error = 0.0;
    bool pass = false;
};
GradCheckReport gradient_check(const ProtoPNet& model, const LossCoefficients& coefs,
                               std::span<const LatentExample> batch, double eps = 1e-5,
                               double tol = 1e-4, int corrupt_index = -1,
                               double corrupt_delta = 0.0);

}  // namespace protogate
