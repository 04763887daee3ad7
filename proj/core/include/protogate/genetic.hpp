#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "protogate/common.hpp"

namespace protogate {

/// Nucleotide string over {A,C,T,G,N}; 'N' marks an unknown base.
struct GeneticSequence {
    std::string bases;

    static bool valid_base(char c) {
        return c == 'A' || c == 'C' || c == 'T' || c == 'G' || c == 'N';
    }

    /// Validates every character; throws ValidationError on anything else.
    static GeneticSequence parse(std::string s);

    size_t length() const { return bases.size(); }
};

/// One-hot tensor of shape (4 channels, 1, max_width). Channel order is
/// fixed as (A, C, T, G); 'N' and padding columns are all-zero.
struct OneHotGenetic {
    int max_width = 0;
    std::vector<float> values;  // 4 * max_width, [channel][position]

    float at(int channel, int pos) const { return values[static_cast<size_t>(channel) * max_width + pos]; }

    /// View as a genetic-modality embedding grid (D=4, H=1, W=max_width).
    EmbeddingMap to_embedding() const;
};

inline constexpr int kGeneticChannels = 4;
inline constexpr int kDefaultGeneticWidth = 720;

/// Channel index for a base, or -1 for 'N'.
int base_channel(char base);
char channel_base(int channel);

/// Right-pads to max_width and one-hot encodes. Sequences longer than
/// max_width are rejected outright; truncating here would silently corrupt
/// everything calibrated downstream.
OneHotGenetic encode_genetic(const GeneticSequence& seq, int max_width = kDefaultGeneticWidth);

/// Inverse of encode for columns inside the encoded length: unit columns map
/// back to bases, zero columns to 'N'. Trailing zero columns are treated as
/// padding. Exact round-trip for N-free sequences.
GeneticSequence decode_genetic(const OneHotGenetic& t);

/// Random substitutions (each position independently with sub_rate, replaced
/// by a uniformly chosen *different* base), then n_insert random insertions
/// and n_delete random deletions. 'N' positions are never substituted.
/// Deterministic for a given seed.
GeneticSequence augment_genetic(const GeneticSequence& seq, double sub_rate, int n_insert,
                                int n_delete, uint64_t seed);

/// Adds strength * PE to a genetic embedding grid (H must be 1), where
/// PE(w, 2i) = sin(w / 10000^(2i/D)) and PE(w, 2i+1) = cos(w / 10000^(2i/D)).
EmbeddingMap add_positional_encoding(const EmbeddingMap& e, double strength);

/// The raw PE value for one (position, dim) cell; exposed so callers can
/// reason about the encoding independently of any embedding.
double positional_encoding_value(int pos, int dim, int depth);

}  // namespace protogate
