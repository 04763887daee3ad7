// protogate: prototype classification with conformal abstention over an
// expensive second modality. One binary, subcommand per pipeline stage.
//
// Exit codes: 0 success, 2 invalid input/config, 3 runtime failure,
// 4 measurement required (inference needs the genetic modality).

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "protogate/dataset.hpp"
#include "protogate/serialize.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace protogate;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitValidation = 2;
constexpr int kExitRuntime = 3;
constexpr int kExitMeasurementRequired = 4;

/// Stable hash of the effective settings; nlohmann::json orders object keys,
/// so the dump is canonical.
uint64_t settings_hash(const json& settings) { return fnv1a64(settings.dump()); }

void write_run_manifest(const fs::path& out_dir, const std::string& command, uint64_t seed,
                        const json& settings, const json& outputs) {
    json manifest{{"command", command},
                  {"seed", seed},
                  {"config_hash", settings_hash(settings)},
                  {"settings", settings},
                  {"outputs", outputs},
                  {"format_version", 1}};
    std::ofstream out(out_dir / "run_manifest.json", std::ios::trunc);
    out << manifest.dump(2) << "\n";
}

fs::path ensure_out_dir(const std::string& out) {
    fs::path dir(out);
    fs::create_directories(dir);
    return dir;
}

std::vector<std::pair<int, int>> parse_pairs(const std::string& text) {
    std::vector<std::pair<int, int>> pairs;
    if (text.empty()) return pairs;
    size_t start = 0;
    while (start <= text.size()) {
        size_t comma = text.find(',', start);
        std::string tok = text.substr(start, comma == std::string::npos ? comma : comma - start);
        size_t colon = tok.find(':');
        if (colon == std::string::npos)
            throw ValidationError("confusable pair must look like A:B, got '" + tok + "'");
        pairs.emplace_back(std::stoi(tok.substr(0, colon)), std::stoi(tok.substr(colon + 1)));
        if (comma == std::string::npos) break;
        start = comma + 1;
    }
    return pairs;
}

std::array<double, 3> parse_ratios(const std::string& text) {
    std::array<double, 3> r{};
    size_t start = 0;
    for (int i = 0; i < 3; ++i) {
        size_t comma = text.find(',', start);
        if ((comma == std::string::npos) != (i == 2))
            throw ValidationError("ratios must be three comma-separated numbers");
        r[i] = std::stod(text.substr(start, comma - start));
        start = comma + 1;
    }
    return r;
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

void register_synth(CLI::App& app) {
    auto* cmd = app.add_subcommand("synth", "Generate a synthetic two-modality dataset");
    auto opts = std::make_shared<SynthConfig>();
    auto out = std::make_shared<std::string>();
    auto seed = std::make_shared<uint64_t>(7);
    auto pairs = std::make_shared<std::string>();

    cmd->add_option("--out", *out, "Output directory")->required();
    cmd->add_option("--classes", opts->class_count, "Number of classes");
    cmd->add_option("--per-class", opts->per_class, "Samples per class");
    cmd->add_option("--img-depth", opts->image_dims.depth, "Image embedding channels");
    cmd->add_option("--img-height", opts->image_dims.height, "Image grid height");
    cmd->add_option("--img-width", opts->image_dims.width, "Image grid width");
    cmd->add_option("--gen-depth", opts->genetic_dims.depth, "Genetic embedding channels");
    cmd->add_option("--gen-width", opts->genetic_dims.width, "Genetic grid width");
    cmd->add_option("--image-sep", opts->image_separability, "Image class-mean separation");
    cmd->add_option("--genetic-sep", opts->genetic_separability, "Genetic class-mean separation");
    cmd->add_option("--noise", opts->noise_sigma, "Per-patch Gaussian noise sigma");
    cmd->add_option("--confusable", *pairs, "Class pairs sharing image means, e.g. 0:1,4:5");
    cmd->add_option("--seed", *seed, "RNG seed");

    cmd->callback([opts, out, seed, pairs] {
        opts->confusable_pairs = parse_pairs(*pairs);
        fs::path dir = ensure_out_dir(*out);
        Dataset ds = synth_generate(*opts, *seed);
        fs::path data_path = dir / "dataset.pgd";
        save_dataset(ds, data_path);
        json settings{{"classes", opts->class_count},
                      {"per_class", opts->per_class},
                      {"image_dims", {opts->image_dims.depth, opts->image_dims.height, opts->image_dims.width}},
                      {"genetic_dims", {opts->genetic_dims.depth, opts->genetic_dims.height, opts->genetic_dims.width}},
                      {"image_sep", opts->image_separability},
                      {"genetic_sep", opts->genetic_separability},
                      {"noise", opts->noise_sigma},
                      {"confusable", *pairs}};
        write_run_manifest(dir, "synth", *seed, settings, json{{"dataset", data_path.string()}});
        std::cout << "command=synth samples=" << ds.manifest.sample_count
                  << " classes=" << ds.manifest.class_count << " out=" << data_path.string()
                  << "\n";
    });
}

void register_split(CLI::App& app) {
    auto* cmd = app.add_subcommand("split", "Stratified train/validation/test split");
    auto data = std::make_shared<std::string>();
    auto out = std::make_shared<std::string>();
    auto ratios = std::make_shared<std::string>("0.6,0.2,0.2");
    auto min_per_class = std::make_shared<int>(10);
    auto seed = std::make_shared<uint64_t>(7);

    cmd->add_option("--data", *data, "Dataset path")->required();
    cmd->add_option("--out", *out, "Output directory")->required();
    cmd->add_option("--ratios", *ratios, "train,validation,test fractions");
    cmd->add_option("--min-per-class", *min_per_class, "Drop classes with fewer samples");
    cmd->add_option("--seed", *seed, "RNG seed");

    cmd->callback([data, out, ratios, min_per_class, seed] {
        Dataset ds = load_dataset(*data);
        std::vector<int> labels;
        labels.reserve(ds.samples.size());
        for (const auto& s : ds.samples) labels.push_back(s.label);
        SplitSpec split = make_splits(labels, parse_ratios(*ratios), *min_per_class, *seed);
        fs::path dir = ensure_out_dir(*out);
        save_split(split, dir / "split.json");
        export_split_csv(ds, split, dir / "split.csv");
        json settings{{"data", *data},
                      {"ratios", *ratios},
                      {"min_per_class", *min_per_class}};
        write_run_manifest(dir, "split", *seed, settings,
                           json{{"split", (dir / "split.json").string()},
                                {"csv", (dir / "split.csv").string()}});
        std::cout << "command=split train=" << split.train.size()
                  << " validation=" << split.validation.size() << " test=" << split.test.size()
                  << " classes_after=" << split.class_count_after << "\n";
    });
}

void inspect_dataset(const fs::path& path) {
    Dataset ds = load_dataset(path);
    int64_t with_genetic = 0;
    for (const auto& s : ds.samples)
        if (s.genetic) ++with_genetic;
    std::cout << "kind=dataset classes=" << ds.manifest.class_count
              << " samples=" << ds.manifest.sample_count << " with_genetic=" << with_genetic
              << " image_dims=" << ds.manifest.image_dims.depth << "x"
              << ds.manifest.image_dims.height << "x" << ds.manifest.image_dims.width
              << " genetic_dims=" << ds.manifest.genetic_dims.depth << "x"
              << ds.manifest.genetic_dims.height << "x" << ds.manifest.genetic_dims.width << "\n";
}

void register_inspect(CLI::App& app) {
    auto* cmd = app.add_subcommand("inspect", "Summarize a dataset or checkpoint file");
    auto path = std::make_shared<std::string>();
    cmd->add_option("--path", *path, "Artifact path")->required();
    cmd->callback([path] {
        std::ifstream probe(*path, std::ios::binary);
        if (!probe) throw ContainerError(ContainerErrc::missing_file, "cannot open: " + *path);
        char magic[9] = {};
        probe.read(magic, 8);
        probe.close();
        std::string m(magic, 8);
        if (m == "PGDSET01") {
            inspect_dataset(*path);
        } else {
            throw ContainerError(ContainerErrc::bad_magic, "unrecognized container magic in " + *path);
        }
    });
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"prototype classification with conformal genetic-measurement gating"};
    app.require_subcommand(1);

    register_synth(app);
    register_split(app);
    register_inspect(app);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitValidation;
    } catch (const ValidationError& e) {
        std::cerr << "error=validation message=\"" << e.what() << "\"\n";
        return kExitValidation;
    } catch (const ContainerError& e) {
        std::cerr << "error=container code=" << static_cast<int>(e.code()) << " message=\""
                  << e.what() << "\"\n";
        return kExitValidation;
    } catch (const std::exception& e) {
        std::cerr << "error=runtime message=\"" << e.what() << "\"\n";
        return kExitRuntime;
    }
    return kExitOk;
}
