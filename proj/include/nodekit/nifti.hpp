#pragma once

#include <cstdint>
#include <filesystem>
#include <string_view>

#include "nodekit/transform.hpp"
#include "nodekit/volume.hpp"

namespace nodekit {

/// NIfTI-1 datatype codes accepted by the reader and writer.
enum class NiftiDatatype : std::int16_t {
    uint8 = 2,
    int16 = 4,
    int32 = 8,
    float32 = 16,
    float64 = 64,
    int8 = 256,
    uint16 = 512,
};

std::string_view to_string(NiftiDatatype t);

/// Header fields the reader exposes to callers.
struct NiftiInfo {
    NiftiDatatype datatype = NiftiDatatype::float32;
    int components = 1;
    double scl_slope = 0.0;
    double scl_inter = 0.0;
    bool big_endian = false;
};

/// Reads header only (.nii or .nii.gz, either byte order).
NiftiInfo read_nifti_info(const std::filesystem::path &path);

/// Samples with scl_slope/scl_inter applied when the slope is nonzero.
ScalarVolume read_nifti(const std::filesystem::path &path);
/// Integer-valued, non-negative samples; anything else is a data error.
LabelVolume read_nifti_labels(const std::filesystem::path &path);

/// `.gz` suffix selects gzip compression.
void write_nifti(const ScalarVolume &vol, const std::filesystem::path &path,
                 NiftiDatatype datatype = NiftiDatatype::float32);
/// Stored as uint8 when every label is < 256, else uint16, else int32.
void write_nifti(const LabelVolume &vol, const std::filesystem::path &path);

/// Three-component vector volume (dim[5] = 3, intent "vector").
void write_nifti_field(const DisplacementField &field, const std::filesystem::path &path);
DisplacementField read_nifti_field(const std::filesystem::path &path);

} // namespace nodekit
