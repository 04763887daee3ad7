#include "protogate/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include "json.hpp"
#include "protogate/serialize.hpp"

namespace protogate {
namespace {

using nlohmann::json;

constexpr char kDatasetMagic[9] = "PGDSET01";

std::vector<std::vector<int64_t>> positions_by_class(const std::vector<int>& labels, int k) {
    std::vector<std::vector<int64_t>> by_class(k);
    for (size_t i = 0; i < labels.size(); ++i)
        by_class[labels[i]].push_back(static_cast<int64_t>(i));
    return by_class;
}

int max_label(const std::vector<int>& labels) {
    int m = -1;
    for (int y : labels) {
        if (y < 0) throw ValidationError("negative class label");
        m = std::max(m, y);
    }
    return m;
}

json dims_to_json(const ModalityDims& d) {
    return json{{"depth", d.depth}, {"height", d.height}, {"width", d.width}};
}

ModalityDims dims_from_json(const json& j) {
    return ModalityDims{j.at("depth").get<int>(), j.at("height").get<int>(),
                        j.at("width").get<int>()};
}

}  // namespace

SplitSpec make_splits(const std::vector<int>& labels, const std::array<double, 3>& ratios,
                      int min_per_class, uint64_t seed) {
    double sum = ratios[0] + ratios[1] + ratios[2];
    for (double r : ratios)
        if (r < 0.0) throw ValidationError("split ratios must be >= 0");
    if (std::abs(sum - 1.0) > 1e-9) throw ValidationError("split ratios must sum to 1");
    if (min_per_class < 1) throw ValidationError("min_per_class must be >= 1");
    if (labels.empty()) throw ValidationError("cannot split an empty dataset");

    const int k_before = max_label(labels) + 1;
    auto by_class = positions_by_class(labels, k_before);

    SplitSpec split;
    split.seed = seed;
    split.class_remap.assign(k_before, -1);
    int next = 0;
    for (int c = 0; c < k_before; ++c)
        if (static_cast<int>(by_class[c].size()) >= min_per_class) split.class_remap[c] = next++;
    split.class_count_after = next;
    if (next == 0) throw ValidationError("no class has >= min_per_class samples");

    for (int c = 0; c < k_before; ++c) {
        if (split.class_remap[c] < 0) continue;
        auto& pos = by_class[c];
        std::mt19937_64 rng(mix_seed(seed, static_cast<uint64_t>(c)));
        std::shuffle(pos.begin(), pos.end(), rng);

        // Largest-remainder rounding keeps every per-class count within one
        // sample of the exact ratio target.
        const auto n = static_cast<int64_t>(pos.size());
        int64_t quota[3];
        double frac[3];
        int64_t assigned = 0;
        for (int s = 0; s < 3; ++s) {
            double exact = static_cast<double>(n) * ratios[s];
            quota[s] = static_cast<int64_t>(std::floor(exact));
            frac[s] = exact - static_cast<double>(quota[s]);
            assigned += quota[s];
        }
        int order[3] = {0, 1, 2};
        std::stable_sort(order, order + 3, [&](int a, int b) { return frac[a] > frac[b]; });
        for (int64_t r = 0; r < n - assigned; ++r) ++quota[order[r % 3]];

        auto it = pos.begin();
        split.train.insert(split.train.end(), it, it + quota[0]);
        it += quota[0];
        split.validation.insert(split.validation.end(), it, it + quota[1]);
        it += quota[1];
        split.test.insert(split.test.end(), it, it + quota[2]);
    }

    std::sort(split.train.begin(), split.train.end());
    std::sort(split.validation.begin(), split.validation.end());
    std::sort(split.test.begin(), split.test.end());
    return split;
}

std::vector<int64_t> oversample_indices(const std::vector<int>& labels, uint64_t seed) {
    if (labels.empty()) throw ValidationError("cannot oversample an empty label list");
    const int k = max_label(labels) + 1;
    auto by_class = positions_by_class(labels, k);
    size_t max_count = 0;
    for (const auto& pos : by_class) max_count = std::max(max_count, pos.size());

    std::mt19937_64 rng(mix_seed(seed, 0x05e7));
    std::vector<int64_t> epoch;
    epoch.reserve(max_count * static_cast<size_t>(k));
    for (const auto& pos : by_class) {
        if (pos.empty()) continue;
        if (pos.size() == max_count) {
            epoch.insert(epoch.end(), pos.begin(), pos.end());
        } else {
            std::uniform_int_distribution<size_t> pick(0, pos.size() - 1);
            for (size_t i = 0; i < max_count; ++i) epoch.push_back(pos[pick(rng)]);
        }
    }
    std::shuffle(epoch.begin(), epoch.end(), rng);
    return epoch;
}

FilteredDataset apply_split(const Dataset& ds, const SplitSpec& split) {
    if (static_cast<int>(split.class_remap.size()) != ds.manifest.class_count)
        throw ValidationError("split class_remap does not match dataset class count");

    const auto n = static_cast<int64_t>(ds.samples.size());
    std::vector<int64_t> new_pos(n, -1);
    auto mark = [&](const std::vector<int64_t>& list) {
        for (int64_t p : list) {
            if (p < 0 || p >= n) throw ValidationError("split index out of range");
            new_pos[p] = 0;
        }
    };
    mark(split.train);
    mark(split.validation);
    mark(split.test);

    FilteredDataset out;
    out.data.manifest = ds.manifest;
    out.data.manifest.class_count = split.class_count_after;
    out.data.manifest.class_names.clear();
    for (int c = 0; c < ds.manifest.class_count; ++c)
        if (split.class_remap[c] >= 0) out.data.manifest.class_names.push_back(ds.manifest.class_names[c]);

    int64_t next = 0;
    for (int64_t p = 0; p < n; ++p) {
        if (new_pos[p] < 0) continue;
        Sample s = ds.samples[p];
        int remapped = split.class_remap[s.label];
        if (remapped < 0) throw ValidationError("split keeps a sample of a dropped class");
        s.label = remapped;
        out.data.samples.push_back(std::move(s));
        new_pos[p] = next++;
    }
    out.data.manifest.sample_count = next;

    auto translate = [&](const std::vector<int64_t>& list) {
        std::vector<int64_t> t;
        t.reserve(list.size());
        for (int64_t p : list) t.push_back(new_pos[p]);
        return t;
    };
    out.train = translate(split.train);
    out.validation = translate(split.validation);
    out.test = translate(split.test);
    return out;
}

// ---------------------------------------------------------------------------
// Synthetic generation
// ---------------------------------------------------------------------------

namespace {

std::vector<double> scaled_unit_vector(int dim, double scale, std::mt19937_64& rng) {
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::vector<double> v(dim);
    double norm = 0.0;
    do {
        norm = 0.0;
        for (auto& x : v) {
            x = gauss(rng);
            norm += x * x;
        }
        norm = std::sqrt(norm);
    } while (norm < 1e-12);
    for (auto& x : v) x = x / norm * scale;
    return v;
}

/// K directions with pairwise cosine exactly -1/(K-1): a randomly oriented
/// regular simplex (orthonormalized Gaussians recentered on their centroid).
std::vector<std::vector<double>> simplex_directions(int k, int dim, double scale,
                                                    std::mt19937_64& rng) {
    if (dim < k)
        throw ValidationError("simplex means need modality depth >= class_count");
    std::vector<std::vector<double>> q(static_cast<size_t>(k));
    for (auto& row : q) {
        // Gram-Schmidt against the accepted rows; redraw on near-dependence.
        while (true) {
            row = scaled_unit_vector(dim, 1.0, rng);
            for (const auto& prev : q) {
                if (&prev == &row) break;
                if (prev.empty()) continue;
                double dot = 0.0;
                for (int d = 0; d < dim; ++d) dot += row[static_cast<size_t>(d)] * prev[static_cast<size_t>(d)];
                for (int d = 0; d < dim; ++d) row[static_cast<size_t>(d)] -= dot * prev[static_cast<size_t>(d)];
            }
            double norm = 0.0;
            for (double x : row) norm += x * x;
            norm = std::sqrt(norm);
            if (norm > 1e-8) {
                for (auto& x : row) x /= norm;
                break;
            }
        }
    }
    std::vector<double> centroid(static_cast<size_t>(dim), 0.0);
    for (const auto& row : q)
        for (int d = 0; d < dim; ++d) centroid[static_cast<size_t>(d)] += row[static_cast<size_t>(d)] / k;
    for (auto& row : q) {
        double norm = 0.0;
        for (int d = 0; d < dim; ++d) {
            row[static_cast<size_t>(d)] -= centroid[static_cast<size_t>(d)];
            norm += row[static_cast<size_t>(d)] * row[static_cast<size_t>(d)];
        }
        norm = std::sqrt(norm);
        for (auto& x : row) x = x / norm * scale;
    }
    return q;
}

EmbeddingMap gaussian_patches(Modality m, const ModalityDims& dims, const std::vector<double>& mean,
                              double sigma, std::mt19937_64& rng) {
    std::normal_distribution<double> gauss(0.0, 1.0);
    EmbeddingMap e(m, dims.depth, dims.height, dims.width);
    for (int d = 0; d < dims.depth; ++d)
        for (int h = 0; h < dims.height; ++h)
            for (int w = 0; w < dims.width; ++w)
                e.at(d, h, w) = static_cast<float>(mean[d] + sigma * gauss(rng));
    return e;
}

}  // namespace

Dataset synth_generate(const SynthConfig& cfg, uint64_t seed) {
    if (cfg.class_count < 1) throw ValidationError("class_count must be >= 1");
    if (cfg.per_class < 1) throw ValidationError("per_class must be >= 1");
    if (cfg.image_separability < 0.0 || cfg.genetic_separability < 0.0)
        throw ValidationError("separability must be >= 0");
    if (cfg.noise_sigma < 0.0) throw ValidationError("noise_sigma must be >= 0");
    for (auto [a, b] : cfg.confusable_pairs) {
        if (a < 0 || b < 0 || a >= cfg.class_count || b >= cfg.class_count || a == b)
            throw ValidationError("confusable pair indices must be distinct classes in range");
    }

    std::mt19937_64 mean_rng(mix_seed(seed, 1));
    std::vector<std::vector<double>> image_mean(cfg.class_count), genetic_mean(cfg.class_count);
    if (cfg.simplex_means) {
        image_mean = simplex_directions(cfg.class_count, cfg.image_dims.depth,
                                        cfg.image_separability, mean_rng);
        genetic_mean = simplex_directions(cfg.class_count, cfg.genetic_dims.depth,
                                          cfg.genetic_separability, mean_rng);
    } else {
        for (int c = 0; c < cfg.class_count; ++c) {
            image_mean[c] =
                scaled_unit_vector(cfg.image_dims.depth, cfg.image_separability, mean_rng);
            genetic_mean[c] =
                scaled_unit_vector(cfg.genetic_dims.depth, cfg.genetic_separability, mean_rng);
        }
    }
    // Confusable pairs collapse onto one image mean but keep their own genetic
    // means: images cannot separate the pair, genetics can.
    for (auto [a, b] : cfg.confusable_pairs) image_mean[std::max(a, b)] = image_mean[std::min(a, b)];

    Dataset ds;
    ds.manifest.class_count = cfg.class_count;
    for (int c = 0; c < cfg.class_count; ++c)
        ds.manifest.class_names.push_back("class_" + std::to_string(c));
    ds.manifest.image_dims = cfg.image_dims;
    ds.manifest.genetic_dims = cfg.genetic_dims;

    std::mt19937_64 noise_rng(mix_seed(seed, 2));
    int64_t id = 0;
    for (int c = 0; c < cfg.class_count; ++c) {
        for (int i = 0; i < cfg.per_class; ++i) {
            Sample s;
            s.id = id++;
            s.label = c;
            s.image = gaussian_patches(Modality::image, cfg.image_dims, image_mean[c],
                                       cfg.noise_sigma, noise_rng);
            s.genetic = gaussian_patches(Modality::genetic, cfg.genetic_dims, genetic_mean[c],
                                         cfg.noise_sigma, noise_rng);
            ds.samples.push_back(std::move(s));
        }
    }
    ds.manifest.sample_count = id;
    return ds;
}

EmbeddingMap jitter_embedding(const EmbeddingMap& e, double sigma, uint64_t seed) {
    if (sigma < 0.0) throw ValidationError("sigma must be >= 0");
    EmbeddingMap out = e;
    if (sigma == 0.0) return out;
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    for (auto& v : out.values) v = static_cast<float>(v + sigma * gauss(rng));
    return out;
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

namespace {

void check_dims(const ModalityDims& d, const char* which) {
    if (d.depth < 0 || d.height < 0 || d.width < 0)
        throw ContainerError(ContainerErrc::dim_mismatch,
                             std::string(which) + " dims must be >= 0");
}

json manifest_to_json(const DatasetManifest& m) {
    return json{{"format", "PGDSET01"},
                {"version", m.version},
                {"class_count", m.class_count},
                {"class_names", m.class_names},
                {"sample_count", m.sample_count},
                {"image_dims", dims_to_json(m.image_dims)},
                {"genetic_dims", dims_to_json(m.genetic_dims)}};
}

}  // namespace

void save_dataset(const Dataset& ds, const std::filesystem::path& path) {
    const auto& m = ds.manifest;
    if (static_cast<int>(m.class_names.size()) != m.class_count)
        throw ValidationError("manifest class_names size must equal class_count");
    if (m.sample_count != static_cast<int64_t>(ds.samples.size()))
        throw ValidationError("manifest sample_count must equal number of samples");

    BinaryWriter w(path);
    w.magic(kDatasetMagic);
    w.u32(m.version);
    w.u32(static_cast<uint32_t>(m.class_count));
    for (const auto& name : m.class_names) w.str(name);
    w.i64(m.sample_count);
    for (const ModalityDims* d : {&m.image_dims, &m.genetic_dims}) {
        w.u32(static_cast<uint32_t>(d->depth));
        w.u32(static_cast<uint32_t>(d->height));
        w.u32(static_cast<uint32_t>(d->width));
    }

    const size_t image_len = static_cast<size_t>(m.image_dims.depth) * m.image_dims.height *
                             m.image_dims.width;
    const size_t genetic_len = static_cast<size_t>(m.genetic_dims.depth) *
                               m.genetic_dims.height * m.genetic_dims.width;
    for (const Sample& s : ds.samples) {
        if (s.label < 0 || s.label >= m.class_count)
            throw ContainerError(ContainerErrc::label_out_of_range,
                                 "label " + std::to_string(s.label) + " outside [0, " +
                                     std::to_string(m.class_count) + ")");
        if (s.image.values.size() != image_len)
            throw ContainerError(ContainerErrc::dim_mismatch, "image embedding size mismatch");
        if (s.genetic && s.genetic->values.size() != genetic_len)
            throw ContainerError(ContainerErrc::dim_mismatch, "genetic embedding size mismatch");
        w.i64(s.id);
        w.u32(static_cast<uint32_t>(s.label));
        w.u8(s.genetic ? 1 : 0);
        w.f32_array(std::span<const float>(s.image.values));
        if (s.genetic) w.f32_array(std::span<const float>(s.genetic->values));
    }
    w.close();

    std::ofstream side(path.string() + ".json", std::ios::trunc);
    side << manifest_to_json(m).dump(2) << "\n";
}

Dataset load_dataset(const std::filesystem::path& path) {
    std::filesystem::path bin = path;
    if (bin.extension() == ".json") bin.replace_extension();

    BinaryReader r(bin);
    r.expect_magic(kDatasetMagic);
    Dataset ds;
    DatasetManifest& m = ds.manifest;
    r.expect_version(1);
    m.version = 1;
    m.class_count = static_cast<int>(r.u32());
    for (int c = 0; c < m.class_count; ++c) m.class_names.push_back(r.str());
    m.sample_count = r.i64();
    for (ModalityDims* d : {&m.image_dims, &m.genetic_dims}) {
        d->depth = static_cast<int>(r.u32());
        d->height = static_cast<int>(r.u32());
        d->width = static_cast<int>(r.u32());
    }
    check_dims(m.image_dims, "image");
    check_dims(m.genetic_dims, "genetic");

    const size_t image_len = static_cast<size_t>(m.image_dims.depth) * m.image_dims.height *
                             m.image_dims.width;
    const size_t genetic_len = static_cast<size_t>(m.genetic_dims.depth) *
                               m.genetic_dims.height * m.genetic_dims.width;
    for (int64_t i = 0; i < m.sample_count; ++i) {
        Sample s;
        s.id = r.i64();
        s.label = static_cast<int>(r.u32());
        if (s.label < 0 || s.label >= m.class_count)
            throw ContainerError(ContainerErrc::label_out_of_range,
                                 "sample label " + std::to_string(s.label) + " outside [0, " +
                                     std::to_string(m.class_count) + ") in " + bin.string());
        const bool has_genetic = r.u8() != 0;
        if (has_genetic && genetic_len == 0)
            throw ContainerError(ContainerErrc::dim_mismatch,
                                 "sample carries genetics but header has zero genetic dims");
        s.image = EmbeddingMap(Modality::image, m.image_dims.depth, m.image_dims.height,
                               m.image_dims.width);
        s.image.values = r.f32_array(image_len);
        if (has_genetic) {
            EmbeddingMap g(Modality::genetic, m.genetic_dims.depth, m.genetic_dims.height,
                           m.genetic_dims.width);
            g.values = r.f32_array(genetic_len);
            s.genetic = std::move(g);
        }
        ds.samples.push_back(std::move(s));
    }
    if (!r.at_end())
        throw ContainerError(ContainerErrc::dim_mismatch,
                             "trailing bytes after last sample in " + bin.string());

    const auto side_path = bin.string() + ".json";
    if (std::filesystem::exists(side_path)) {
        std::ifstream side(side_path);
        json j = json::parse(side, nullptr, true);
        json expect = manifest_to_json(m);
        for (const auto& [key, value] : expect.items()) {
            if (!j.contains(key) || j.at(key) != value)
                throw ContainerError(ContainerErrc::manifest_mismatch,
                                     "sidecar manifest disagrees with binary header on '" + key +
                                         "' in " + side_path);
        }
    }
    return ds;
}

void save_split(const SplitSpec& split, const std::filesystem::path& json_path) {
    json j{{"seed", split.seed},
           {"class_count_after", split.class_count_after},
           {"class_remap", split.class_remap},
           {"train", split.train},
           {"validation", split.validation},
           {"test", split.test}};
    std::ofstream out(json_path, std::ios::trunc);
    if (!out) throw ContainerError(ContainerErrc::missing_file, "cannot open for write: " + json_path.string());
    out << j.dump(2) << "\n";
}

SplitSpec load_split(const std::filesystem::path& json_path) {
    std::ifstream in(json_path);
    if (!in) throw ContainerError(ContainerErrc::missing_file, "cannot open: " + json_path.string());
    json j = json::parse(in, nullptr, true);
    SplitSpec s;
    s.seed = j.at("seed").get<uint64_t>();
    s.class_count_after = j.at("class_count_after").get<int>();
    s.class_remap = j.at("class_remap").get<std::vector<int>>();
    s.train = j.at("train").get<std::vector<int64_t>>();
    s.validation = j.at("validation").get<std::vector<int64_t>>();
    s.test = j.at("test").get<std::vector<int64_t>>();
    return s;
}

void export_split_csv(const Dataset& ds, const SplitSpec& split,
                      const std::filesystem::path& csv_path) {
    std::ofstream out(csv_path, std::ios::trunc);
    if (!out) throw ContainerError(ContainerErrc::missing_file, "cannot open for write: " + csv_path.string());
    out << "position,sample_id,label,remapped_label,split\n";
    auto emit = [&](const std::vector<int64_t>& list, const char* name) {
        for (int64_t p : list) {
            const Sample& s = ds.samples.at(static_cast<size_t>(p));
            out << p << ',' << s.id << ',' << s.label << ',' << split.class_remap.at(s.label)
                << ',' << name << '\n';
        }
    };
    emit(split.train, "train");
    emit(split.validation, "validation");
    emit(split.test, "test");
}

// ---------------------------------------------------------------------------
// Genetic cost accounting
// ---------------------------------------------------------------------------

const EmbeddingMap* CostLedger::fetch_genetic(const Sample& s, bool audit) {
    if (!s.genetic) return nullptr;
    if (audit) {
        ++audit_reads_;
        return &*s.genetic;
    }
    int& count = per_sample_[s.id];
    if (count == 0) ++queries_;
    ++count;
    return &*s.genetic;
}

int CostLedger::max_fetches_per_sample() const {
    int m = 0;
    for (const auto& [id, count] : per_sample_) m = std::max(m, count);
    return m;
}

void CostLedger::reset() {
    queries_ = 0;
    audit_reads_ = 0;
    per_sample_.clear();
}

}  // namespace protogate
