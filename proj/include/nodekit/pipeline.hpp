#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "nodekit/augment.hpp"
#include "nodekit/losses.hpp"
#include "nodekit/postprocess.hpp"
#include "nodekit/registration.hpp"

namespace nodekit {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

/// A path as written in the config plus its resolved location.
struct ConfigPath {
    std::string raw;
    fs::path resolved;

    bool empty() const { return raw.empty(); }
};

struct AtlasInputs {
    ConfigPath ct;
    std::map<std::string, ConfigPath> structures;
    ConfigPath trachea; // falls back to structures["trachea"]
    ConfigPath lungs;
    ConfigPath pa; // defaults to <output_dir>/atlas_pa.nii.gz
    ConfigPath dm; // defaults to <output_dir>/atlas_dm.nii.gz
};

struct SubjectInputs {
    std::string id;
    ConfigPath ct;
    std::map<std::string, ConfigPath> structures;
    ConfigPath lungs;
    ConfigPath gt;
};

struct PipelineConfig {
    AtlasInputs atlas;
    std::vector<SubjectInputs> subjects;
    ConfigPath output_dir;
    RegistrationConfig registration;
    LinearOptimizerConfig linear;
    LossConfig loss;
    PostprocessConfig postprocess;
    GinConfig gin;
    RampConfig ramp;
    double atlas_sigma_vox = 5.0;
    double crop_margin_mm = 0.0;
    std::uint64_t seed = 0;

    /// Relative paths resolve against `base_dir`. Unknown keys are argument errors.
    static PipelineConfig from_json(const ojson &j, const fs::path &base_dir);
    static PipelineConfig load(const fs::path &path, const std::vector<std::string> &overrides = {});
    /// Canonical form; its SHA-256 is the config hash.
    ojson to_json() const;
    /// Numeric invariants of every section.
    void validate() const;
};

/// "a.b.c=value": value parsed as JSON when possible, else taken as a string.
void apply_override(ojson &j, const std::string &assignment);

std::string sha256_hex(std::string_view bytes);
std::string sha256_file(const fs::path &path);

void write_text_file(const fs::path &path, const std::string &text);
std::string read_text_file(const fs::path &path);

ojson crop_to_json(const CropRecord &crop);
CropRecord crop_from_json(const ojson &j);

/// Runs fn(0..n-1) on up to `jobs` threads; the first exception (by index) is rethrown.
void parallel_for(std::size_t n, int jobs, const std::function<void(std::size_t)> &fn);

/// Registers every subject to the atlas, warps ground truths into atlas
/// space and writes atlas_pa.nii.gz, atlas_dm.nii.gz and
/// build_atlas_manifest.json to the output directory. Returns the manifest.
ojson build_atlas(const PipelineConfig &cfg, int jobs = 1);

/// Registers the atlas to each selected subject (all when `ids` is empty)
/// and writes <case>_{ct,pa,dm,lungs}.nii.gz, <case>_crop.json and
/// prepare_manifest.json. Returns the manifest.
ojson prepare_cases(const PipelineConfig &cfg, const std::vector<std::string> &ids = {}, int jobs = 1);

/// One (t, min diameter) combination of a post-processing grid search.
struct GridPoint {
    double t;
    std::optional<double> min_diameter_mm;

    /// e.g. "_t0.3_diamnone", "_t0.5_diam3"
    std::string suffix() const;
};

/// Parses "t=0.5,0.3 diam=none,3,5" into the cartesian product (t-major).
std::vector<GridPoint> parse_grid(const std::string &spec);

/// out.nii.gz + "_t0.3_diam5" -> out_t0.3_diam5.nii.gz
fs::path with_suffix(const fs::path &path, const std::string &suffix);

} // namespace nodekit
