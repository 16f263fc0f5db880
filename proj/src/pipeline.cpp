#include "nodekit/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <exception>
#include <fstream>
#include <set>
#include <sstream>
#include <thread>

#include <openssl/evp.h>

#include "nodekit/atlas.hpp"
#include "nodekit/nifti.hpp"

namespace nodekit {

namespace {

Error config_error(const std::string &message) { return Error(ErrorCode::argument, "config: " + message); }

void check_keys(const ojson &j, std::initializer_list<std::string_view> allowed, const std::string &section)
{
    if (!j.is_object())
        throw config_error(section + " must be an object");
    for (const auto &item : j.items())
        if (std::find(allowed.begin(), allowed.end(), item.key()) == allowed.end())
            throw config_error("unknown field '" + section + "." + item.key() + "'");
}

template <typename T>
void read_field(const ojson &j, const char *key, T &dst)
{
    if (j.contains(key))
        dst = j.at(key).get<T>();
}

ConfigPath read_path(const ojson &j, const char *key, const fs::path &base, const std::string &section)
{
    ConfigPath p;
    if (!j.contains(key) || j.at(key).is_null())
        return p;
    if (!j.at(key).is_string() || j.at(key).get<std::string>().empty())
        throw config_error(section + "." + key + " must be a non-empty path string");
    p.raw = j.at(key).get<std::string>();
    const fs::path raw(p.raw);
    p.resolved = raw.is_absolute() ? raw : base / raw;
    return p;
}

std::map<std::string, ConfigPath> read_structures(const ojson &j, const fs::path &base, const std::string &section)
{
    std::map<std::string, ConfigPath> out;
    if (!j.contains("structures"))
        return out;
    const ojson &s = j.at("structures");
    if (!s.is_object())
        throw config_error(section + ".structures must be an object");
    for (const auto &item : s.items()) {
        if (item.key() == "lungs")
            throw config_error(section + ".structures may not redefine 'lungs'");
        ojson one{{item.key(), item.value()}};
        out[item.key()] = read_path(one, item.key().c_str(), base, section + ".structures");
    }
    return out;
}

void require_exists(const ConfigPath &p, const std::string &what)
{
    if (!p.empty() && !fs::exists(p.resolved))
        throw config_error(what + " does not exist: " + p.raw);
}

ojson path_json(const ConfigPath &p) { return p.empty() ? ojson() : ojson(p.raw); }

ojson structures_json(const std::map<std::string, ConfigPath> &s)
{
    ojson j = ojson::object();
    for (const auto &[name, p] : s)
        j[name] = p.raw;
    return j;
}

} // namespace

PipelineConfig PipelineConfig::from_json(const ojson &j, const fs::path &base)
{
    PipelineConfig c;
    try {
        check_keys(j,
                   {"atlas", "subjects", "output_dir", "registration", "linear", "loss", "postprocess", "gin", "ramp",
                    "atlas_sigma_vox", "crop_margin_mm", "seed"},
                   "config");
        if (j.contains("atlas")) {
            const ojson &a = j.at("atlas");
            check_keys(a, {"ct", "structures", "trachea", "lungs", "pa", "dm"}, "atlas");
            c.atlas.ct = read_path(a, "ct", base, "atlas");
            c.atlas.structures = read_structures(a, base, "atlas");
            c.atlas.trachea = read_path(a, "trachea", base, "atlas");
            c.atlas.lungs = read_path(a, "lungs", base, "atlas");
            c.atlas.pa = read_path(a, "pa", base, "atlas");
            c.atlas.dm = read_path(a, "dm", base, "atlas");
        }
        if (j.contains("subjects")) {
            if (!j.at("subjects").is_array())
                throw config_error("subjects must be an array");
            std::set<std::string> ids;
            for (const ojson &s : j.at("subjects")) {
                check_keys(s, {"id", "ct", "structures", "lungs", "gt"}, "subjects[]");
                SubjectInputs in;
                in.id = s.at("id").get<std::string>();
                if (in.id.empty() || in.id.find_first_of("/\\") != std::string::npos)
                    throw config_error("subject id must be a non-empty file-name-safe string");
                if (!ids.insert(in.id).second)
                    throw config_error("duplicate subject id '" + in.id + "'");
                const std::string sec = "subjects[" + in.id + "]";
                in.ct = read_path(s, "ct", base, sec);
                in.structures = read_structures(s, base, sec);
                in.lungs = read_path(s, "lungs", base, sec);
                in.gt = read_path(s, "gt", base, sec);
                c.subjects.push_back(std::move(in));
            }
        }
        c.output_dir = read_path(j, "output_dir", base, "config");
        if (j.contains("registration")) {
            const ojson &r = j.at("registration");
            check_keys(r, {"levels", "iterations_per_level", "regularization_sigma_mm", "step_tau", "convergence_tol"},
                       "registration");
            read_field(r, "levels", c.registration.levels);
            read_field(r, "iterations_per_level", c.registration.iterations_per_level);
            read_field(r, "regularization_sigma_mm", c.registration.regularization_sigma_mm);
            read_field(r, "step_tau", c.registration.step_tau);
            read_field(r, "convergence_tol", c.registration.convergence_tol);
        }
        if (j.contains("linear")) {
            const ojson &r = j.at("linear");
            check_keys(r, {"levels", "max_iterations", "initial_damping", "min_step_mm"}, "linear");
            read_field(r, "levels", c.linear.levels);
            read_field(r, "max_iterations", c.linear.max_iterations);
            read_field(r, "initial_damping", c.linear.initial_damping);
            read_field(r, "min_step_mm", c.linear.min_step_mm);
        }
        if (j.contains("loss")) {
            const ojson &l = j.at("loss");
            check_keys(l,
                       {"lambda_ce", "lambda_dice", "lambda_tversky", "alpha", "beta", "smooth_eps",
                        "dilation_radius_vox", "pa_cap"},
                       "loss");
            read_field(l, "lambda_ce", c.loss.lambda_ce);
            read_field(l, "lambda_dice", c.loss.lambda_dice);
            read_field(l, "lambda_tversky", c.loss.lambda_tversky);
            read_field(l, "alpha", c.loss.alpha);
            read_field(l, "beta", c.loss.beta);
            read_field(l, "smooth_eps", c.loss.smooth_eps);
            read_field(l, "dilation_radius_vox", c.loss.dilation_radius_vox);
            read_field(l, "pa_cap", c.loss.pa_cap);
        }
        if (j.contains("postprocess")) {
            const ojson &p = j.at("postprocess");
            check_keys(p, {"t", "min_diameter_mm", "connectivity"}, "postprocess");
            read_field(p, "t", c.postprocess.t);
            if (p.contains("min_diameter_mm") && !p.at("min_diameter_mm").is_null())
                c.postprocess.min_diameter_mm = p.at("min_diameter_mm").get<double>();
            read_field(p, "connectivity", c.postprocess.connectivity);
        }
        if (j.contains("gin")) {
            const ojson &g = j.at("gin");
            check_keys(g, {"layers", "kernel", "channels", "leaky_slope"}, "gin");
            read_field(g, "layers", c.gin.layers);
            read_field(g, "kernel", c.gin.kernel);
            read_field(g, "channels", c.gin.channels);
            read_field(g, "leaky_slope", c.gin.leaky_slope);
        }
        if (j.contains("ramp")) {
            const ojson &r = j.at("ramp");
            check_keys(r, {"ramp_epochs", "shape"}, "ramp");
            read_field(r, "ramp_epochs", c.ramp.ramp_epochs);
            read_field(r, "shape", c.ramp.shape);
        }
        read_field(j, "atlas_sigma_vox", c.atlas_sigma_vox);
        read_field(j, "crop_margin_mm", c.crop_margin_mm);
        read_field(j, "seed", c.seed);
    } catch (const nlohmann::json::exception &e) {
        throw config_error(e.what());
    }
    c.validate();

    require_exists(c.atlas.ct, "atlas.ct");
    for (const auto &[name, p] : c.atlas.structures)
        require_exists(p, "atlas.structures." + name);
    require_exists(c.atlas.trachea, "atlas.trachea");
    require_exists(c.atlas.lungs, "atlas.lungs");
    require_exists(c.atlas.pa, "atlas.pa");
    require_exists(c.atlas.dm, "atlas.dm");
    for (const auto &s : c.subjects) {
        require_exists(s.ct, "subjects[" + s.id + "].ct");
        for (const auto &[name, p] : s.structures)
            require_exists(p, "subjects[" + s.id + "].structures." + name);
        require_exists(s.lungs, "subjects[" + s.id + "].lungs");
        require_exists(s.gt, "subjects[" + s.id + "].gt");
    }
    return c;
}

void apply_override(ojson &j, const std::string &assignment)
{
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0)
        throw Error(ErrorCode::argument, "override must look like key.path=value: " + assignment);
    const std::string key = assignment.substr(0, eq);
    const std::string text = assignment.substr(eq + 1);
    ojson value = ojson::parse(text, nullptr, false);
    if (value.is_discarded())
        value = text;
    ojson *node = &j;
    std::size_t start = 0;
    while (true) {
        const auto dot = key.find('.', start);
        const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
        if (part.empty())
            throw Error(ErrorCode::argument, "override has an empty key segment: " + assignment);
        if (!node->is_object())
            throw Error(ErrorCode::argument, "override path crosses a non-object: " + assignment);
        if (dot == std::string::npos) {
            (*node)[part] = value;
            return;
        }
        node = &(*node)[part];
        if (node->is_null())
            *node = ojson::object();
        start = dot + 1;
    }
}

PipelineConfig PipelineConfig::load(const fs::path &path, const std::vector<std::string> &overrides)
{
    ojson j;
    if (path.empty()) {
        j = ojson::object();
    } else {
        if (!fs::exists(path))
            throw Error(ErrorCode::argument, "config file does not exist: " + path.string());
        j = ojson::parse(read_text_file(path), nullptr, false);
        if (j.is_discarded() || !j.is_object())
            throw Error(ErrorCode::argument, "config file is not a JSON object: " + path.string());
    }
    for (const auto &o : overrides)
        apply_override(j, o);
    const fs::path base = path.empty() ? fs::current_path() : fs::absolute(path).parent_path();
    return from_json(j, base);
}

ojson PipelineConfig::to_json() const
{
    ojson j;
    j["atlas"] = {{"ct", path_json(atlas.ct)},       {"structures", structures_json(atlas.structures)},
                  {"trachea", path_json(atlas.trachea)}, {"lungs", path_json(atlas.lungs)},
                  {"pa", path_json(atlas.pa)},       {"dm", path_json(atlas.dm)}};
    j["subjects"] = ojson::array();
    for (const auto &s : subjects)
        j["subjects"].push_back({{"id", s.id},
                                 {"ct", path_json(s.ct)},
                                 {"structures", structures_json(s.structures)},
                                 {"lungs", path_json(s.lungs)},
                                 {"gt", path_json(s.gt)}});
    j["output_dir"] = path_json(output_dir);
    j["registration"] = {{"levels", registration.levels},
                         {"iterations_per_level", registration.iterations_per_level},
                         {"regularization_sigma_mm", registration.regularization_sigma_mm},
                         {"step_tau", registration.step_tau},
                         {"convergence_tol", registration.convergence_tol}};
    j["linear"] = {{"levels", linear.levels},
                   {"max_iterations", linear.max_iterations},
                   {"initial_damping", linear.initial_damping},
                   {"min_step_mm", linear.min_step_mm}};
    j["loss"] = {{"lambda_ce", loss.lambda_ce},   {"lambda_dice", loss.lambda_dice},
                 {"lambda_tversky", loss.lambda_tversky}, {"alpha", loss.alpha},
                 {"beta", loss.beta},             {"smooth_eps", loss.smooth_eps},
                 {"dilation_radius_vox", loss.dilation_radius_vox}, {"pa_cap", loss.pa_cap}};
    j["postprocess"] = {{"t", postprocess.t},
                        {"min_diameter_mm", postprocess.min_diameter_mm ? ojson(*postprocess.min_diameter_mm) : ojson()},
                        {"connectivity", postprocess.connectivity}};
    j["gin"] = {{"layers", gin.layers}, {"kernel", gin.kernel}, {"channels", gin.channels},
                {"leaky_slope", gin.leaky_slope}};
    j["ramp"] = {{"ramp_epochs", ramp.ramp_epochs}, {"shape", ramp.shape}};
    j["atlas_sigma_vox"] = atlas_sigma_vox;
    j["crop_margin_mm"] = crop_margin_mm;
    j["seed"] = seed;
    return j;
}

void PipelineConfig::validate() const
{
    registration.validate();
    if (linear.levels < 1 || linear.levels > 4 || linear.max_iterations < 1 || !(linear.initial_damping > 0) ||
        !(linear.min_step_mm > 0))
        throw config_error("linear optimizer settings out of range");
    loss.validate();
    postprocess.validate();
    gin.validate();
    ramp.validate();
    if (!(atlas_sigma_vox >= 0) || !std::isfinite(atlas_sigma_vox))
        throw config_error("atlas_sigma_vox must be non-negative");
    if (!(crop_margin_mm >= 0) || !std::isfinite(crop_margin_mm))
        throw config_error("crop_margin_mm must be non-negative");
}

std::string sha256_hex(std::string_view bytes)
{
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1)
        throw Error(ErrorCode::io, "SHA-256 computation failed");
    static constexpr char hex[] = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < len; ++i) {
        out += hex[digest[i] >> 4];
        out += hex[digest[i] & 15];
    }
    return out;
}

std::string sha256_file(const fs::path &path) { return sha256_hex(read_text_file(path)); }

void write_text_file(const fs::path &path, const std::string &text)
{
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out)
        throw Error(ErrorCode::io, "cannot open for writing: " + path.string());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!out)
        throw Error(ErrorCode::io, "write failed: " + path.string());
}

std::string read_text_file(const fs::path &path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw Error(ErrorCode::io, "cannot open for reading: " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

ojson crop_to_json(const CropRecord &crop)
{
    const auto &g = crop.original;
    ojson dir = ojson::array();
    for (int r = 0; r < 3; ++r)
        dir.push_back({g.direction(r, 0), g.direction(r, 1), g.direction(r, 2)});
    return {{"original",
             {{"dims", {g.dims[0], g.dims[1], g.dims[2]}},
              {"spacing", {g.spacing[0], g.spacing[1], g.spacing[2]}},
              {"origin", {g.origin[0], g.origin[1], g.origin[2]}},
              {"direction", dir}}},
            {"start", {crop.start[0], crop.start[1], crop.start[2]}},
            {"size", {crop.size[0], crop.size[1], crop.size[2]}}};
}

CropRecord crop_from_json(const ojson &j)
{
    try {
        CropRecord c;
        const ojson &o = j.at("original");
        Mat3 dir;
        for (int r = 0; r < 3; ++r)
            for (int q = 0; q < 3; ++q)
                dir(r, q) = o.at("direction").at(r).at(q).get<double>();
        c.original = VolumeGeometry::make(
            {o.at("dims").at(0).get<int>(), o.at("dims").at(1).get<int>(), o.at("dims").at(2).get<int>()},
            Vec3(o.at("spacing").at(0).get<double>(), o.at("spacing").at(1).get<double>(),
                 o.at("spacing").at(2).get<double>()),
            Vec3(o.at("origin").at(0).get<double>(), o.at("origin").at(1).get<double>(),
                 o.at("origin").at(2).get<double>()),
            dir);
        for (int a = 0; a < 3; ++a) {
            c.start[a] = j.at("start").at(a).get<int>();
            c.size[a] = j.at("size").at(a).get<int>();
            if (c.start[a] < 0 || c.size[a] < 1 || c.start[a] + c.size[a] > c.original.dims[a])
                throw Error(ErrorCode::geometry, "crop record region lies outside the original grid");
        }
        return c;
    } catch (const nlohmann::json::exception &e) {
        throw Error(ErrorCode::argument, std::string("malformed crop record: ") + e.what());
    }
}

void parallel_for(std::size_t n, int jobs, const std::function<void(std::size_t)> &fn)
{
    std::vector<std::exception_ptr> errors(n);
    const std::size_t workers = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(1, jobs)));
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i)
            fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w)
        pool.emplace_back([&] {
            for (std::size_t i = next++; i < n; i = next++) {
                try {
                    fn(i);
                } catch (...) {
                    errors[i] = std::current_exception();
                }
            }
        });
    for (auto &t : pool)
        t.join();
    for (const auto &e : errors)
        if (e)
            std::rethrow_exception(e);
}

namespace {

const char *lungs_key = "lungs";

StructureMasks load_masks(const std::map<std::string, ConfigPath> &structures, const ConfigPath &lungs)
{
    StructureMasks m;
    for (const auto &[name, p] : structures)
        m.emplace(name, read_nifti_labels(p.resolved));
    if (!lungs.empty())
        m.emplace(lungs_key, read_nifti_labels(lungs.resolved));
    return m;
}

std::set<std::string> shared_features(const StructureMasks &a, const StructureMasks &b)
{
    std::set<std::string> wanted = default_feature_structures();
    wanted.insert(lungs_key);
    std::set<std::string> out;
    for (const auto &name : wanted)
        if (a.contains(name) && b.contains(name))
            out.insert(name);
    if (out.empty())
        throw Error(ErrorCode::argument, "atlas and subject share no feature structures (need lungs or organ masks)");
    return out;
}

LabelVolume union_of(const StructureMasks &masks, const VolumeGeometry &g)
{
    LabelVolume u(g);
    for (const auto &[name, m] : masks) {
        require_aligned(g, m.geometry(), "structure mask");
        for (std::size_t n = 0; n < u.size(); ++n)
            if (m[n])
                u[n] = 1;
    }
    return u;
}

ojson matrix_json(const AffineTransform &t)
{
    ojson rows = ojson::array();
    for (int r = 0; r < 4; ++r)
        rows.push_back({t.matrix()(r, 0), t.matrix()(r, 1), t.matrix()(r, 2), t.matrix()(r, 3)});
    return rows;
}

ojson error_json(const Error &e)
{
    return {{"error", std::string(to_string(e.code()))}, {"message", e.what()}};
}

ojson inputs_json(const std::vector<ConfigPath> &paths)
{
    std::map<std::string, std::string> hashes;
    for (const auto &p : paths)
        if (!p.empty())
            hashes.emplace(p.raw, sha256_file(p.resolved));
    ojson j = ojson::array();
    for (const auto &[raw, h] : hashes)
        j.push_back({{"path", raw}, {"sha256", h}});
    return j;
}

ojson output_json(const fs::path &path, const fs::path &dir)
{
    return {{"path", path.lexically_relative(dir).generic_string()}, {"sha256", sha256_file(path)}};
}

fs::path require_output_dir(const PipelineConfig &cfg)
{
    if (cfg.output_dir.empty())
        throw Error(ErrorCode::argument, "config: output_dir is required");
    return cfg.output_dir.resolved;
}

fs::path atlas_prior_path(const ConfigPath &explicit_path, const fs::path &out_dir, const char *name)
{
    return explicit_path.empty() ? out_dir / name : explicit_path.resolved;
}

std::string dump(const ojson &j) { return j.dump(2) + "\n"; }

struct Registered {
    AffineTransform affine;
    DisplacementField field;
    ojson residuals;
};

// fixed/moving roles: fixed grid receives the field.
Registered register_pair(const StructureMasks &fixed_masks, const ScalarVolume &fixed_norm,
                         const StructureMasks &moving_masks, const ScalarVolume &moving_norm,
                         const PipelineConfig &cfg, FieldDirection direction)
{
    const auto selection = shared_features(fixed_masks, moving_masks);
    const ScalarVolume fixed_feat = masks_to_feature(fixed_masks, selection);
    const ScalarVolume moving_feat = masks_to_feature(moving_masks, selection);
    const AffineTransform identity = AffineTransform::identity(TransformKind::rigid);
    const double mse0 = transform_mse(fixed_feat, moving_feat, identity);
    const AffineTransform rigid = register_rigid(fixed_feat, moving_feat, cfg.linear);
    const double mse_rigid = transform_mse(fixed_feat, moving_feat, rigid);
    const AffineTransform affine = register_affine(fixed_feat, moving_feat, rigid, cfg.linear);
    const double mse_affine = transform_mse(fixed_feat, moving_feat, affine);

    const ScalarVolume moved = warp(moving_norm, fixed_norm.geometry(), &affine, nullptr, Interpolation::linear);
    RegistrationConfig rc = cfg.registration;
    rc.direction = direction;
    DisplacementField field = register_variational(fixed_norm, moved, rc);
    const double before = mean_squared_difference(fixed_norm, moved);
    const double after =
        mean_squared_difference(fixed_norm, warp(moved, nullptr, &field, Interpolation::linear));

    ojson residuals = {{"features", ojson(selection)},
                       {"feature_mse", {{"initial", mse0}, {"rigid", mse_rigid}, {"affine", mse_affine}}},
                       {"intensity_mse", {{"affine", before}, {"deformable", after}}},
                       {"max_displacement_mm", field.max_norm()}};
    return {affine, std::move(field), std::move(residuals)};
}

} // namespace

ojson build_atlas(const PipelineConfig &cfg, int jobs)
{
    cfg.validate();
    const fs::path out_dir = require_output_dir(cfg);
    if (cfg.atlas.ct.empty() || cfg.atlas.lungs.empty())
        throw Error(ErrorCode::argument, "config: atlas.ct and atlas.lungs are required");
    ConfigPath trachea = cfg.atlas.trachea;
    if (trachea.empty()) {
        const auto it = cfg.atlas.structures.find("trachea");
        if (it == cfg.atlas.structures.end())
            throw Error(ErrorCode::argument, "config: atlas.trachea (or atlas.structures.trachea) is required");
        trachea = it->second;
    }
    if (cfg.subjects.empty())
        throw Error(ErrorCode::argument, "config: build-atlas needs at least one subject");
    for (const auto &s : cfg.subjects)
        if (s.ct.empty() || s.gt.empty())
            throw Error(ErrorCode::argument, "config: subject '" + s.id + "' needs ct and gt for build-atlas");

    const ScalarVolume atlas_ct = read_nifti(cfg.atlas.ct.resolved);
    const StructureMasks atlas_masks = load_masks(cfg.atlas.structures, cfg.atlas.lungs);
    const ScalarVolume atlas_norm = normalize_ct(atlas_ct, union_of(atlas_masks, atlas_ct.geometry()));
    const VolumeGeometry &atlas_geom = atlas_ct.geometry();

    std::vector<ojson> entries(cfg.subjects.size());
    std::vector<std::optional<LabelVolume>> warped(cfg.subjects.size());
    parallel_for(cfg.subjects.size(), jobs, [&](std::size_t i) {
        const SubjectInputs &s = cfg.subjects[i];
        try {
            const ScalarVolume ct = read_nifti(s.ct.resolved);
            const StructureMasks masks = load_masks(s.structures, s.lungs);
            const LabelVolume gt = read_nifti_labels(s.gt.resolved);
            require_aligned(ct.geometry(), gt.geometry(), "subject gt");
            const ScalarVolume norm = normalize_ct(ct, union_of(masks, ct.geometry()));
            Registered reg =
                register_pair(atlas_masks, atlas_norm, masks, norm, cfg, FieldDirection::subject_to_atlas);
            warped[i] = warp(gt, atlas_geom, &reg.affine, &reg.field);
            entries[i] = {{"id", s.id}, {"status", "ok"}, {"affine", matrix_json(reg.affine)},
                          {"residuals", std::move(reg.residuals)},
                          {"warped_gt_voxels", count_nonzero(*warped[i])}};
        } catch (const Error &e) {
            entries[i] = {{"id", s.id}, {"status", "failed"}, {"failure", error_json(e)}};
        }
    });

    std::vector<LabelVolume> masks;
    for (auto &w : warped)
        if (w)
            masks.push_back(std::move(*w));
    if (masks.empty())
        throw Error(ErrorCode::convergence, "every subject failed registration; no atlas written");

    const ProbAtlas pa = build_prob_atlas(masks, cfg.atlas_sigma_vox);
    const Vec3 carina = find_carina(read_nifti_labels(trachea.resolved));
    const DistanceMapPrior dm = build_distance_prior(atlas_geom, carina, bbox_mask(atlas_masks.at(lungs_key)));

    fs::create_directories(out_dir);
    const fs::path pa_path = atlas_prior_path(cfg.atlas.pa, out_dir, "atlas_pa.nii.gz");
    const fs::path dm_path = atlas_prior_path(cfg.atlas.dm, out_dir, "atlas_dm.nii.gz");
    write_nifti(pa.vol, pa_path);
    write_nifti(dm.vol, dm_path);

    std::vector<ConfigPath> inputs{cfg.atlas.ct, cfg.atlas.lungs, trachea};
    for (const auto &[name, p] : cfg.atlas.structures)
        inputs.push_back(p);
    for (const auto &s : cfg.subjects) {
        inputs.push_back(s.ct);
        inputs.push_back(s.gt);
        inputs.push_back(s.lungs);
        for (const auto &[name, p] : s.structures)
            inputs.push_back(p);
    }
    ojson manifest;
    manifest["command"] = "build-atlas";
    manifest["config_sha256"] = sha256_hex(cfg.to_json().dump());
    manifest["seed"] = cfg.seed;
    manifest["inputs"] = inputs_json(inputs);
    manifest["subjects"] = entries;
    manifest["subjects_used"] = masks.size();
    manifest["carina_mm"] = {carina[0], carina[1], carina[2]};
    manifest["outputs"] = {{"pa", output_json(pa_path, out_dir)}, {"dm", output_json(dm_path, out_dir)}};
    write_text_file(out_dir / "build_atlas_manifest.json", dump(manifest));
    return manifest;
}

ojson prepare_cases(const PipelineConfig &cfg, const std::vector<std::string> &ids, int jobs)
{
    cfg.validate();
    const fs::path out_dir = require_output_dir(cfg);
    if (cfg.atlas.ct.empty() || cfg.atlas.lungs.empty())
        throw Error(ErrorCode::argument, "config: atlas.ct and atlas.lungs are required");
    std::vector<const SubjectInputs *> selected;
    for (const auto &s : cfg.subjects)
        if (ids.empty() || std::find(ids.begin(), ids.end(), s.id) != ids.end())
            selected.push_back(&s);
    for (const auto &id : ids)
        if (std::none_of(cfg.subjects.begin(), cfg.subjects.end(), [&](const auto &s) { return s.id == id; }))
            throw Error(ErrorCode::argument, "unknown case id '" + id + "'");
    if (selected.empty())
        throw Error(ErrorCode::argument, "config: no subjects to prepare");
    for (const auto *s : selected)
        if (s->ct.empty() || s->lungs.empty())
            throw Error(ErrorCode::argument, "config: subject '" + s->id + "' needs ct and lungs for prepare");
    const fs::path pa_path = atlas_prior_path(cfg.atlas.pa, out_dir, "atlas_pa.nii.gz");
    const fs::path dm_path = atlas_prior_path(cfg.atlas.dm, out_dir, "atlas_dm.nii.gz");
    for (const auto &p : {pa_path, dm_path})
        if (!fs::exists(p))
            throw Error(ErrorCode::argument, "atlas prior missing (run build-atlas first): " + p.string());

    const ScalarVolume atlas_ct = read_nifti(cfg.atlas.ct.resolved);
    const StructureMasks atlas_masks = load_masks(cfg.atlas.structures, cfg.atlas.lungs);
    const ScalarVolume atlas_norm = normalize_ct(atlas_ct, union_of(atlas_masks, atlas_ct.geometry()));
    ProbAtlas pa{read_nifti(pa_path), cfg.atlas_sigma_vox, 0};
    DistanceMapPrior dm{read_nifti(dm_path), Vec3::Zero()};
    require_aligned(atlas_ct.geometry(), pa.vol.geometry(), "atlas pa");
    require_aligned(atlas_ct.geometry(), dm.vol.geometry(), "atlas dm");

    fs::create_directories(out_dir);
    std::vector<ojson> entries(selected.size());
    parallel_for(selected.size(), jobs, [&](std::size_t i) {
        const SubjectInputs &s = *selected[i];
        try {
            const ScalarVolume ct = read_nifti(s.ct.resolved);
            const StructureMasks masks = load_masks(s.structures, s.lungs);
            const LabelVolume &lungs = masks.at(lungs_key);
            require_aligned(ct.geometry(), lungs.geometry(), "subject lungs");
            const ScalarVolume norm = normalize_ct(ct, union_of(masks, ct.geometry()));
            Registered reg =
                register_pair(masks, norm, atlas_masks, atlas_norm, cfg, FieldDirection::atlas_to_subject);
            const auto [pa_s, dm_s] = transfer_priors(pa, dm, reg.affine, reg.field, ct.geometry());

            const CropRecord crop = crop_record_for_mask(lungs, cfg.crop_margin_mm);
            const ScalarVolume ct_crop = apply_crop(ct, crop);
            // intensity statistics over the whole lung box
            const ScalarVolume ct_out = normalize_ct(ct_crop, ct_crop.like<std::uint32_t>(1u));

            const std::vector<std::pair<std::string, fs::path>> files{
                {"ct", out_dir / (s.id + "_ct.nii.gz")},
                {"pa", out_dir / (s.id + "_pa.nii.gz")},
                {"dm", out_dir / (s.id + "_dm.nii.gz")},
                {"lungs", out_dir / (s.id + "_lungs.nii.gz")},
                {"crop", out_dir / (s.id + "_crop.json")}};
            write_nifti(ct_out, files[0].second);
            write_nifti(apply_crop(pa_s, crop), files[1].second);
            write_nifti(apply_crop(dm_s, crop), files[2].second);
            write_nifti(apply_crop(lungs, crop), files[3].second);
            write_text_file(files[4].second, dump(crop_to_json(crop)));

            ojson outputs;
            for (const auto &[name, path] : files)
                outputs[name] = output_json(path, out_dir);
            entries[i] = {{"id", s.id}, {"status", "ok"}, {"affine", matrix_json(reg.affine)},
                          {"residuals", std::move(reg.residuals)}, {"outputs", std::move(outputs)}};
        } catch (const ConvergenceError &e) {
            entries[i] = {{"id", s.id}, {"status", "convergence_error"}, {"failure", error_json(e)}};
        }
    });

    std::vector<ConfigPath> inputs{cfg.atlas.ct, cfg.atlas.lungs};
    for (const auto &[name, p] : cfg.atlas.structures)
        inputs.push_back(p);
    for (const auto *s : selected) {
        inputs.push_back(s->ct);
        inputs.push_back(s->lungs);
        for (const auto &[name, p] : s->structures)
            inputs.push_back(p);
    }
    ojson manifest;
    manifest["command"] = "prepare";
    manifest["config_sha256"] = sha256_hex(cfg.to_json().dump());
    manifest["seed"] = cfg.seed;
    manifest["inputs"] = inputs_json(inputs);
    manifest["atlas_priors"] = {{"pa", output_json(pa_path, out_dir)}, {"dm", output_json(dm_path, out_dir)}};
    manifest["cases"] = entries;
    write_text_file(out_dir / "prepare_manifest.json", dump(manifest));
    return manifest;
}

namespace {

std::string format_number(double v)
{
    char buf[32];
    std::snprintf(buf, sizeof buf, "%g", v);
    return buf;
}

std::vector<std::string> split(const std::string &s, char sep)
{
    std::vector<std::string> out;
    std::string cur;
    std::istringstream in(s);
    while (std::getline(in, cur, sep))
        out.push_back(cur);
    return out;
}

double parse_number(const std::string &text, const std::string &context)
{
    std::size_t used = 0;
    double v = 0.0;
    try {
        v = std::stod(text, &used);
    } catch (const std::exception &) {
        used = 0;
    }
    if (used == 0 || used != text.size() || !std::isfinite(v))
        throw Error(ErrorCode::argument, "not a number in " + context + ": '" + text + "'");
    return v;
}

} // namespace

std::string GridPoint::suffix() const
{
    return "_t" + format_number(t) + "_diam" + (min_diameter_mm ? format_number(*min_diameter_mm) : "none");
}

std::vector<GridPoint> parse_grid(const std::string &spec)
{
    std::vector<double> ts;
    std::vector<std::optional<double>> diams;
    bool seen_t = false, seen_d = false;
    std::istringstream in(spec);
    std::string token;
    while (in >> token) {
        const auto eq = token.find('=');
        if (eq == std::string::npos)
            throw Error(ErrorCode::argument, "grid entry must be key=v1,v2,...: '" + token + "'");
        const std::string key = token.substr(0, eq);
        const auto values = split(token.substr(eq + 1), ',');
        if (values.empty())
            throw Error(ErrorCode::argument, "grid entry has no values: '" + token + "'");
        if (key == "t" && !seen_t) {
            seen_t = true;
            for (const auto &v : values)
                ts.push_back(parse_number(v, "grid t"));
        } else if ((key == "diam" || key == "min_diameter_mm") && !seen_d) {
            seen_d = true;
            for (const auto &v : values)
                diams.push_back(v == "none" ? std::nullopt : std::optional<double>(parse_number(v, "grid diam")));
        } else {
            throw Error(ErrorCode::argument, "unknown or repeated grid key '" + key + "'");
        }
    }
    if (!seen_t || !seen_d)
        throw Error(ErrorCode::argument, "grid needs both t=... and diam=...");
    std::vector<GridPoint> out;
    for (const double t : ts)
        for (const auto &d : diams) {
            PostprocessConfig check;
            check.t = t;
            check.min_diameter_mm = d;
            check.validate();
            out.push_back({t, d});
        }
    return out;
}

fs::path with_suffix(const fs::path &path, const std::string &suffix)
{
    const std::string name = path.filename().string();
    for (const std::string ext : {".nii.gz", ".nii"})
        if (name.size() > ext.size() && name.ends_with(ext))
            return path.parent_path() / (name.substr(0, name.size() - ext.size()) + suffix + ext);
    return path.parent_path() / (path.stem().string() + suffix + path.extension().string());
}

} // namespace nodekit
