#include "protogate/genetic.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace protogate {

GeneticSequence GeneticSequence::parse(std::string s) {
    for (char c : s) {
        if (!valid_base(c))
            throw ValidationError(std::string("invalid base '") + c + "'; expected one of A,C,T,G,N");
    }
    return GeneticSequence{std::move(s)};
}

int base_channel(char base) {
    switch (base) {
        case 'A': return 0;
        case 'C': return 1;
        case 'T': return 2;
        case 'G': return 3;
        case 'N': return -1;
        default: throw ValidationError(std::string("invalid base '") + base + "'");
    }
}

char channel_base(int channel) {
    static constexpr char kBases[4] = {'A', 'C', 'T', 'G'};
    if (channel < 0 || channel >= 4) throw ValidationError("channel out of range");
    return kBases[channel];
}

EmbeddingMap OneHotGenetic::to_embedding() const {
    EmbeddingMap e(Modality::genetic, kGeneticChannels, 1, max_width);
    e.values = values;
    return e;
}

OneHotGenetic encode_genetic(const GeneticSequence& seq, int max_width) {
    if (max_width < 1) throw ValidationError("max_width must be >= 1");
    if (static_cast<int>(seq.length()) > max_width)
        throw ValidationError("sequence length " + std::to_string(seq.length()) +
                              " exceeds max_width " + std::to_string(max_width) +
                              "; refusing to truncate");
    OneHotGenetic t;
    t.max_width = max_width;
    t.values.assign(static_cast<size_t>(kGeneticChannels) * max_width, 0.0f);
    for (size_t i = 0; i < seq.bases.size(); ++i) {
        int ch = base_channel(seq.bases[i]);
        if (ch >= 0) t.values[static_cast<size_t>(ch) * max_width + i] = 1.0f;
    }
    return t;
}

GeneticSequence decode_genetic(const OneHotGenetic& t) {
    int last = -1;
    for (int w = 0; w < t.max_width; ++w) {
        for (int c = 0; c < kGeneticChannels; ++c)
            if (t.at(c, w) != 0.0f) last = std::max(last, w);
    }
    std::string s;
    s.reserve(last + 1);
    for (int w = 0; w <= last; ++w) {
        int hit = -1;
        for (int c = 0; c < kGeneticChannels; ++c) {
            if (t.at(c, w) == 1.0f) {
                if (hit >= 0) throw ValidationError("one-hot column has multiple active channels");
                hit = c;
            } else if (t.at(c, w) != 0.0f) {
                throw ValidationError("one-hot tensor has non-binary entries");
            }
        }
        s.push_back(hit >= 0 ? channel_base(hit) : 'N');
    }
    return GeneticSequence{std::move(s)};
}

GeneticSequence augment_genetic(const GeneticSequence& seq, double sub_rate, int n_insert,
                                int n_delete, uint64_t seed) {
    if (sub_rate < 0.0 || sub_rate > 1.0) throw ValidationError("sub_rate must lie in [0,1]");
    if (n_insert < 0 || n_delete < 0) throw ValidationError("insert/delete counts must be >= 0");

    static constexpr char kBases[4] = {'A', 'C', 'T', 'G'};
    std::mt19937_64 rng(seed);
    std::string s = seq.bases;

    // Substitutions: uniformly chosen base different from the current one.
    if (sub_rate > 0.0) {
        std::uniform_real_distribution<double> coin(0.0, 1.0);
        std::uniform_int_distribution<int> pick(0, 2);
        for (char& c : s) {
            if (c == 'N') continue;
            if (coin(rng) < sub_rate) {
                int skip = base_channel(c);
                int r = pick(rng);
                if (r >= skip) ++r;
                c = kBases[r];
            }
        }
    }

    for (int i = 0; i < n_insert; ++i) {
        std::uniform_int_distribution<size_t> pos(0, s.size());
        std::uniform_int_distribution<int> pick(0, 3);
        size_t p = pos(rng);
        s.insert(s.begin() + static_cast<std::ptrdiff_t>(p), kBases[pick(rng)]);
    }

    for (int i = 0; i < n_delete && !s.empty(); ++i) {
        std::uniform_int_distribution<size_t> pos(0, s.size() - 1);
        s.erase(s.begin() + static_cast<std::ptrdiff_t>(pos(rng)));
    }

    return GeneticSequence{std::move(s)};
}

double positional_encoding_value(int pos, int dim, int depth) {
    const int pair = dim / 2;
    const double rate = std::pow(10000.0, 2.0 * pair / depth);
    const double angle = pos / rate;
    return (dim % 2 == 0) ? std::sin(angle) : std::cos(angle);
}

EmbeddingMap add_positional_encoding(const EmbeddingMap& e, double strength) {
    if (e.modality != Modality::genetic)
        throw ValidationError("positional encoding applies to the genetic modality");
    if (e.height != 1) throw ValidationError("genetic embedding must have height 1");
    if (strength < 0.0) throw ValidationError("strength must be >= 0");

    EmbeddingMap out = e;
    if (strength == 0.0) return out;
    for (int d = 0; d < e.depth; ++d)
        for (int w = 0; w < e.width; ++w)
            out.at(d, 0, w) = e.at(d, 0, w) +
                              static_cast<float>(strength * positional_encoding_value(w, d, e.depth));
    return out;
}

}  // namespace protogate
