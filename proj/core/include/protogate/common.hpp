#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace protogate {

enum class Modality { image, genetic };

inline const char* to_string(Modality m) {
    return m == Modality::image ? "image" : "genetic";
}

/// Raised when user-supplied arguments or configuration violate a contract.
class ValidationError : public std::runtime_error {
public:
    explicit ValidationError(const std::string& what) : std::runtime_error(what) {}
};

/// Dense (depth, height, width) grid of latent activations for one modality.
/// Index order is [d][h][w], row-major.
struct EmbeddingMap {
    Modality modality = Modality::image;
    int depth = 0;
    int height = 0;
    int width = 0;
    std::vector<float> values;

    EmbeddingMap() = default;
    EmbeddingMap(Modality m, int d, int h, int w)
        : modality(m), depth(d), height(h), width(w),
          values(static_cast<size_t>(d) * h * w, 0.0f) {
        if (d < 1 || h < 1 || w < 1) throw ValidationError("EmbeddingMap dims must be >= 1");
    }

    float at(int d, int h, int w) const {
        return values[(static_cast<size_t>(d) * height + h) * width + w];
    }
    float& at(int d, int h, int w) {
        return values[(static_cast<size_t>(d) * height + h) * width + w];
    }
    int patch_count() const { return height * width; }

    bool all_finite() const {
        for (float v : values)
            if (!std::isfinite(v)) return false;
        return true;
    }
};

// ---------------------------------------------------------------------------
// Numeric helpers
// ---------------------------------------------------------------------------

inline double sigmoid(double x) {
    if (x >= 0.0) {
        return 1.0 / (1.0 + std::exp(-x));
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

/// d sigmoid / dx; exactly 0 at saturation (x = +/-inf).
inline double sigmoid_grad(double x) {
    const double s = sigmoid(x);
    return s * (1.0 - s);
}

/// log(sum_i exp(v_i)) with max-shift; tolerates -inf entries.
inline double logsumexp(std::span<const double> v) {
    double m = -std::numeric_limits<double>::infinity();
    for (double x : v) m = std::max(m, x);
    if (!std::isfinite(m)) return m;  // all -inf, or a +inf dominates
    double acc = 0.0;
    for (double x : v) acc += std::exp(x - m);
    return m + std::log(acc);
}

/// Lowest index wins ties.
inline int argmax_index(std::span<const double> v) {
    int best = 0;
    for (int i = 1; i < static_cast<int>(v.size()); ++i)
        if (v[i] > v[best]) best = i;
    return best;
}

/// -log softmax(logits)[label], max-shifted.
inline double softmax_cross_entropy(std::span<const double> logits, int label) {
    return logsumexp(logits) - logits[label];
}

/// Adds upstream * dCE/dlogits into grad (softmax - onehot).
inline void softmax_cross_entropy_backward(std::span<const double> logits, int label,
                                           double upstream, std::span<double> grad) {
    double m = -std::numeric_limits<double>::infinity();
    for (double x : logits) m = std::max(m, x);
    double z = 0.0;
    for (double x : logits) z += std::exp(x - m);
    for (size_t j = 0; j < logits.size(); ++j) {
        double p = std::exp(logits[j] - m) / z;
        grad[j] += upstream * (p - (static_cast<int>(j) == label ? 1.0 : 0.0));
    }
}

// ---------------------------------------------------------------------------
// Seeding and hashing
// ---------------------------------------------------------------------------

/// Derives an independent stream seed from a base seed (splitmix64 finalizer).
inline uint64_t mix_seed(uint64_t seed, uint64_t stream) {
    uint64_t x = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline uint64_t fnv1a64(std::string_view s) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

}  // namespace protogate
