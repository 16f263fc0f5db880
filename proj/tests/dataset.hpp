#pragma once

#include <cstdlib>
#include <filesystem>
#include <string>

#include <sys/wait.h>

#include "nodekit/nifti.hpp"
#include "nodekit/pipeline.hpp"

// Small synthetic chest: two lung boxes, a heart ball and a Y-shaped trachea.
namespace dataset {

using namespace nodekit;
namespace fs = std::filesystem;

constexpr int n = 40;

struct Subject {
    ScalarVolume ct;
    LabelVolume lungs, heart, trachea, gt;
};

inline Subject make_subject(int shift)
{
    const auto g = VolumeGeometry::make({n, n, n});
    Subject s{ScalarVolume(g, 40.0), LabelVolume(g), LabelVolume(g), LabelVolume(g), LabelVolume(g)};
    for (int k = 0; k < n; ++k)
        for (int j = 0; j < n; ++j)
            for (int i = 0; i < n; ++i) {
                const double x = i - shift, y = j, z = k;
                const bool lung = y >= 8 && y <= 31 && z >= 6 && z <= 33 && ((x >= 4 && x <= 14) || (x >= 25 && x <= 35));
                const double hx = x - 20, hy = y - 22, hz = z - 12;
                const bool heart = hx * hx + hy * hy + hz * hz <= 36;
                const double tx = x - 20, ty = y - 16;
                bool trachea;
                if (z > 22) {
                    trachea = tx * tx + ty * ty <= 4 && z <= 36;
                } else {
                    const double d = 2 + 0.5 * (22 - z);
                    trachea = z >= 16 && ((tx - d) * (tx - d) + ty * ty <= 2.25 || (tx + d) * (tx + d) + ty * ty <= 2.25);
                }
                const double gx = x - 20, gy = y - 14, gz = z - 19;
                const double g2x = x - 17, g2y = y - 24, g2z = z - 24;
                const bool node = gx * gx + gy * gy + gz * gz <= 4 || g2x * g2x + g2y * g2y + g2z * g2z <= 2;
                double v = 40.0 + 5.0 * ((i * 7 + j * 3 + k) % 5);
                if (lung)
                    v = -800.0;
                if (heart)
                    v = 60.0;
                if (trachea)
                    v = -1000.0;
                if (node && !trachea)
                    v = 20.0;
                s.ct.at(i, j, k) = v;
                s.lungs.at(i, j, k) = lung;
                s.heart.at(i, j, k) = heart;
                s.trachea.at(i, j, k) = trachea;
                s.gt.at(i, j, k) = node && !trachea;
            }
    return s;
}

inline void write_subject(const Subject &s, const fs::path &dir, const std::string &id)
{
    fs::create_directories(dir);
    write_nifti(s.ct, dir / (id + "_ct.nii.gz"), NiftiDatatype::int16);
    write_nifti(s.lungs, dir / (id + "_lungs.nii.gz"));
    write_nifti(s.heart, dir / (id + "_heart.nii.gz"));
    write_nifti(s.trachea, dir / (id + "_trachea.nii.gz"));
    write_nifti(s.gt, dir / (id + "_gt.nii.gz"));
}

/// Writes atlas + subjects with the given shifts and a config.json; returns the config path.
inline fs::path make(const fs::path &root, const std::vector<int> &shifts)
{
    fs::remove_all(root);
    const fs::path data = root / "data";
    write_subject(make_subject(0), data, "atlas");
    ojson cfg;
    cfg["atlas"] = {{"ct", "data/atlas_ct.nii.gz"},
                    {"lungs", "data/atlas_lungs.nii.gz"},
                    {"structures", {{"heart", "data/atlas_heart.nii.gz"}, {"trachea", "data/atlas_trachea.nii.gz"}}}};
    cfg["subjects"] = ojson::array();
    for (std::size_t s = 0; s < shifts.size(); ++s) {
        const std::string id = "case" + std::to_string(s);
        write_subject(make_subject(shifts[s]), data, id);
        cfg["subjects"].push_back({{"id", id},
                                   {"ct", "data/" + id + "_ct.nii.gz"},
                                   {"lungs", "data/" + id + "_lungs.nii.gz"},
                                   {"gt", "data/" + id + "_gt.nii.gz"},
                                   {"structures",
                                    {{"heart", "data/" + id + "_heart.nii.gz"},
                                     {"trachea", "data/" + id + "_trachea.nii.gz"}}}});
    }
    cfg["output_dir"] = "out";
    cfg["atlas_sigma_vox"] = 2.0;
    cfg["registration"] = {{"levels", 2}, {"iterations_per_level", 20}};
    cfg["seed"] = 7;
    write_text_file(root / "config.json", cfg.dump(2));
    return root / "config.json";
}

struct Run {
    int status;
    std::string err;
};

/// Runs the CLI with stdout discarded and stderr captured.
inline Run cli(const std::string &args, const fs::path &scratch)
{
    const fs::path err = scratch / "stderr.txt";
    const std::string cmd = std::string("\"") + NODEKIT_CLI_PATH + "\" " + args + " > /dev/null 2> \"" + err.string() + "\"";
    const int raw = std::system(cmd.c_str());
    const int status = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
    return {status, read_text_file(err)};
}

inline bool same_bytes(const fs::path &a, const fs::path &b) { return read_text_file(a) == read_text_file(b); }

} // namespace dataset
