// nodekit command-line driver.

#include <cstdio>
#include <iostream>
#include <optional>

#include <CLI11.hpp>

#include "nodekit/augment.hpp"
#include "nodekit/losses.hpp"
#include "nodekit/metrics.hpp"
#include "nodekit/nifti.hpp"
#include "nodekit/pipeline.hpp"
#include "nodekit/postprocess.hpp"

using namespace nodekit;

namespace {

struct Common {
    std::string config;
    std::vector<std::string> overrides;
    std::optional<std::uint64_t> seed;
    int jobs = 1;
};

void add_common(CLI::App *cmd, Common &c)
{
    cmd->add_option("--config", c.config, "Pipeline config (JSON)");
    cmd->add_option("--set", c.overrides, "Config override key.path=value (repeatable)");
    cmd->add_option("--seed", c.seed, "Random seed (overrides config)");
    cmd->add_option("--jobs", c.jobs, "Worker threads")->check(CLI::PositiveNumber);
}

PipelineConfig load_config(const Common &c)
{
    std::vector<std::string> overrides = c.overrides;
    if (c.seed)
        overrides.push_back("seed=" + std::to_string(*c.seed));
    return PipelineConfig::load(c.config, overrides);
}

void require_input(const std::string &path, const char *what)
{
    if (!fs::exists(path))
        throw Error(ErrorCode::argument, std::string(what) + " does not exist: " + path);
}

void require_output_parent(const fs::path &path)
{
    const fs::path parent = path.parent_path();
    if (!parent.empty() && !fs::is_directory(parent))
        throw Error(ErrorCode::argument, "output directory does not exist: " + parent.string());
}

void print_json(const ojson &j) { std::cout << j.dump(2) << "\n"; }

ProbVolume read_probs(const std::string &path)
{
    ScalarVolume v = read_nifti(path);
    return ProbVolume(std::move(v));
}

// --- subcommands -----------------------------------------------------------

struct AugmentArgs {
    int epoch = 0;
    std::string in, out;
};

void run_augment(const Common &c, const AugmentArgs &a)
{
    const PipelineConfig cfg = load_config(c);
    if (a.epoch < 0)
        throw Error(ErrorCode::argument, "--epoch must be non-negative");
    require_input(a.in, "input volume");
    require_output_parent(a.out);
    const ScalarVolume vol = read_nifti(a.in);
    write_nifti(augment_pipeline(vol, a.epoch, cfg.seed, cfg.gin, cfg.ramp), a.out);
}

struct LossArgs {
    std::string pred, gt, pa, out;
    std::optional<double> alpha, beta;
};

void run_loss(const Common &c, const LossArgs &a)
{
    PipelineConfig cfg = load_config(c);
    if (a.alpha)
        cfg.loss.alpha = *a.alpha;
    if (a.beta)
        cfg.loss.beta = *a.beta;
    cfg.loss.validate();
    require_input(a.pred, "--pred");
    require_input(a.gt, "--gt");
    if (!a.pa.empty())
        require_input(a.pa, "--pa");
    if (!a.out.empty())
        require_output_parent(a.out);
    const ProbVolume pred = read_probs(a.pred);
    const LabelVolume gt = read_nifti_labels(a.gt);
    std::optional<ScalarVolume> pa;
    if (!a.pa.empty())
        pa = read_nifti(a.pa);
    std::optional<WeightMap> w;
    if (pa)
        w = pa_weight_map(gt, *pa, cfg.loss);
    ojson j;
    j["cross_entropy"] = cross_entropy(pred, gt).value;
    j["soft_dice"] = soft_dice_loss(pred, gt, nullptr, cfg.loss.smooth_eps).value;
    j["weighted_dice"] = w ? ojson(soft_dice_loss(pred, gt, &*w, cfg.loss.smooth_eps).value) : ojson();
    j["tversky"] = tversky_loss(pred, gt, cfg.loss.alpha, cfg.loss.beta, cfg.loss.smooth_eps).value;
    j["combined"] = combined_loss(pred, gt, pa ? &*pa : nullptr, cfg.loss).value;
    if (!a.out.empty())
        write_text_file(a.out, j.dump(2) + "\n");
    print_json(j);
}

struct PostArgs {
    std::optional<double> t, min_diam;
    bool no_min_diam = false;
    std::optional<int> connectivity;
    std::string pa, lungs, crop, grid;
    std::vector<std::string> files; // probs..., out
};

void run_postprocess_cmd(const Common &c, const PostArgs &a)
{
    PipelineConfig cfg = load_config(c);
    if (a.t)
        cfg.postprocess.t = *a.t;
    if (a.min_diam)
        cfg.postprocess.min_diameter_mm = *a.min_diam;
    if (a.no_min_diam)
        cfg.postprocess.min_diameter_mm.reset();
    if (a.connectivity)
        cfg.postprocess.connectivity = *a.connectivity;
    cfg.postprocess.validate();
    if (a.files.size() < 2)
        throw Error(ErrorCode::argument, "postprocess needs at least one probability map and an output path");
    const fs::path out = a.files.back();
    const std::vector<std::string> inputs(a.files.begin(), a.files.end() - 1);

    std::vector<GridPoint> grid;
    if (!a.grid.empty())
        grid = parse_grid(a.grid);
    else
        grid.push_back({cfg.postprocess.t, cfg.postprocess.min_diameter_mm});
    for (const auto &p : inputs)
        require_input(p, "probability map");
    require_input(a.pa, "--pa");
    require_input(a.lungs, "--lungs");
    if (!a.crop.empty())
        require_input(a.crop, "--crop");
    require_output_parent(out);

    std::vector<ProbVolume> probs;
    for (const auto &p : inputs)
        probs.push_back(read_probs(p));
    const ScalarVolume pa = read_nifti(a.pa);
    const LabelVolume lungs = read_nifti_labels(a.lungs);
    std::optional<CropRecord> crop;
    if (!a.crop.empty()) {
        const ojson j = ojson::parse(read_text_file(a.crop), nullptr, false);
        if (j.is_discarded())
            throw Error(ErrorCode::argument, "crop record is not valid JSON: " + a.crop);
        crop = crop_from_json(j);
    }

    std::vector<LabelVolume> results(grid.size());
    parallel_for(grid.size(), c.jobs, [&](std::size_t i) {
        PostprocessConfig pc = cfg.postprocess;
        pc.t = grid[i].t;
        pc.min_diameter_mm = grid[i].min_diameter_mm;
        results[i] = run_postprocess(probs, pa, lungs, crop ? &*crop : nullptr, pc);
    });
    for (std::size_t i = 0; i < grid.size(); ++i)
        write_nifti(results[i], a.grid.empty() ? out : with_suffix(out, grid[i].suffix()));
}

struct EvalArgs {
    std::string pred, gt, out, csv;
};

std::vector<std::string> nifti_names(const fs::path &dir)
{
    std::vector<std::string> names;
    for (const auto &e : fs::directory_iterator(dir)) {
        const std::string n = e.path().filename().string();
        if (e.is_regular_file() && (n.ends_with(".nii") || n.ends_with(".nii.gz")))
            names.push_back(n);
    }
    std::sort(names.begin(), names.end());
    return names;
}

std::string case_id(const std::string &name)
{
    for (const std::string ext : {".nii.gz", ".nii"})
        if (name.ends_with(ext))
            return name.substr(0, name.size() - ext.size());
    return name;
}

void run_evaluate(const Common &c, const EvalArgs &a)
{
    if (!fs::is_directory(a.pred) || !fs::is_directory(a.gt))
        throw Error(ErrorCode::argument, "--pred and --gt must be directories");
    require_output_parent(a.out);
    const fs::path csv = a.csv.empty() ? fs::path(a.out).replace_extension(".csv") : fs::path(a.csv);
    require_output_parent(csv);
    const auto names = nifti_names(a.gt);
    if (names.empty())
        throw Error(ErrorCode::argument, "no NIfTI files in --gt directory");
    for (const auto &n : names)
        require_input((fs::path(a.pred) / n).string(), "prediction");

    std::vector<MetricsReport> reports(names.size());
    parallel_for(names.size(), c.jobs, [&](std::size_t i) {
        const LabelVolume pred = read_nifti_labels(fs::path(a.pred) / names[i]);
        const LabelVolume gt = read_nifti_labels(fs::path(a.gt) / names[i]);
        reports[i] = evaluate_case(pred, gt, case_id(names[i]));
    });
    ojson j;
    j["cases"] = ojson::array();
    for (const auto &r : reports)
        j["cases"].push_back(r.to_json());
    j["mean"] = summarize(reports);
    write_text_file(a.out, j.dump(2) + "\n");
    write_text_file(csv, metrics_csv(reports));
}

struct PrepareArgs {
    std::vector<std::string> cases;
};

int report_error(const std::string &code, const std::string &message, int status)
{
    const ojson j = {{"error", code}, {"message", message}};
    std::cerr << j.dump() << "\n";
    return status;
}

} // namespace

int main(int argc, char **argv)
{
    CLI::App app{"nodekit: mediastinal lymph node segmentation toolkit"};
    app.require_subcommand(1);
    Common common;

    auto *atlas_cmd = app.add_subcommand("build-atlas", "Build the probabilistic atlas and distance prior");
    add_common(atlas_cmd, common);

    PrepareArgs prep;
    auto *prep_cmd = app.add_subcommand("prepare", "Crop, normalize and transfer priors for subjects");
    add_common(prep_cmd, common);
    prep_cmd->add_option("--case", prep.cases, "Subject id to prepare (repeatable; default all)");

    AugmentArgs aug;
    auto *aug_cmd = app.add_subcommand("augment", "GIN/IPA intensity augmentation");
    add_common(aug_cmd, common);
    aug_cmd->add_option("--epoch", aug.epoch, "Training epoch (ramp-up)");
    aug_cmd->add_option("input", aug.in)->required();
    aug_cmd->add_option("output", aug.out)->required();

    LossArgs loss;
    auto *loss_cmd = app.add_subcommand("loss", "Evaluate the training losses");
    add_common(loss_cmd, common);
    loss_cmd->add_option("--pred", loss.pred, "Probability map")->required();
    loss_cmd->add_option("--gt", loss.gt, "Binary ground truth")->required();
    loss_cmd->add_option("--pa", loss.pa, "Atlas prior (enables weighted Dice)");
    loss_cmd->add_option("--alpha", loss.alpha);
    loss_cmd->add_option("--beta", loss.beta);
    loss_cmd->add_option("--out", loss.out, "Write the JSON result here too");

    PostArgs post;
    auto *post_cmd = app.add_subcommand("postprocess", "Binarize, filter and mask probability maps");
    add_common(post_cmd, common);
    post_cmd->add_option("--t", post.t, "Base threshold");
    post_cmd->add_option("--min-diam", post.min_diam, "Minimum component diameter (mm)");
    post_cmd->add_flag("--no-min-diam", post.no_min_diam, "Disable the diameter filter");
    post_cmd->add_option("--connectivity", post.connectivity);
    post_cmd->add_option("--pa", post.pa, "Atlas prior on the model grid")->required();
    post_cmd->add_option("--lungs", post.lungs, "Lung mask on the model grid")->required();
    post_cmd->add_option("--crop", post.crop, "Crop record JSON (pads output to the original grid)");
    post_cmd->add_option("--grid", post.grid, "Grid search, e.g. \"t=0.5,0.3,0.2 diam=none,3,5,7\"");
    post_cmd->add_option("files", post.files, "probs... output")->required();

    EvalArgs ev;
    auto *eval_cmd = app.add_subcommand("evaluate", "Segmentation metrics over a directory of cases");
    add_common(eval_cmd, common);
    eval_cmd->add_option("--pred", ev.pred)->required();
    eval_cmd->add_option("--gt", ev.gt)->required();
    eval_cmd->add_option("--out", ev.out, "Report JSON")->required();
    eval_cmd->add_option("--csv", ev.csv, "Table CSV (default: report path with .csv)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp &e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp &e) {
        return app.exit(e);
    } catch (const CLI::ParseError &e) {
        return report_error(std::string(to_string(ErrorCode::argument)), e.what(), 2);
    }

    try {
        if (*atlas_cmd) {
            print_json(build_atlas(load_config(common), common.jobs));
        } else if (*prep_cmd) {
            print_json(prepare_cases(load_config(common), prep.cases, common.jobs));
        } else if (*aug_cmd) {
            run_augment(common, aug);
        } else if (*loss_cmd) {
            run_loss(common, loss);
        } else if (*post_cmd) {
            run_postprocess_cmd(common, post);
        } else if (*eval_cmd) {
            run_evaluate(common, ev);
        }
    } catch (const Error &e) {
        return report_error(std::string(to_string(e.code())), e.what(), e.code() == ErrorCode::argument ? 2 : 1);
    } catch (const std::exception &e) {
        return report_error("internal_error", e.what(), 1);
    }
    return 0;
}
