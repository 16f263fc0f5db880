#include "nodekit/nifti.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <limits>
#include <memory>

#include <Eigen/Geometry>
#include <Eigen/SVD>
#include <zlib.h>

namespace nodekit {

namespace {

constexpr int header_size = 348;
constexpr int data_offset = 352;
constexpr std::int16_t intent_vector = 1007;

// Byte offsets of the NIfTI-1 header fields used here.
namespace off {
constexpr int sizeof_hdr = 0;
constexpr int dim = 40;
constexpr int intent_code = 68;
constexpr int datatype = 70;
constexpr int bitpix = 72;
constexpr int pixdim = 76;
constexpr int vox_offset = 108;
constexpr int scl_slope = 112;
constexpr int scl_inter = 116;
constexpr int xyzt_units = 123;
constexpr int descrip = 148;
constexpr int qform_code = 252;
constexpr int sform_code = 254;
constexpr int quatern_b = 256;
constexpr int qoffset_x = 268;
constexpr int srow_x = 280;
constexpr int intent_name = 328;
constexpr int magic = 344;
} // namespace off

template <typename T>
T byteswap_value(T v)
{
    unsigned char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    std::reverse(b, b + sizeof(T));
    std::memcpy(&v, b, sizeof(T));
    return v;
}

/// Little helper over the raw 348 header bytes.
class HeaderView {
public:
    HeaderView(unsigned char *bytes, bool swap) : bytes_(bytes), swap_(swap) {}

    template <typename T>
    T get(int offset) const
    {
        T v;
        std::memcpy(&v, bytes_ + offset, sizeof(T));
        return swap_ ? byteswap_value(v) : v;
    }

    template <typename T>
    void put(int offset, T v)
    {
        if (swap_)
            v = byteswap_value(v);
        std::memcpy(bytes_ + offset, &v, sizeof(T));
    }

private:
    unsigned char *bytes_;
    bool swap_;
};

int bytes_per_sample(NiftiDatatype t)
{
    switch (t) {
    case NiftiDatatype::uint8:
    case NiftiDatatype::int8: return 1;
    case NiftiDatatype::int16:
    case NiftiDatatype::uint16: return 2;
    case NiftiDatatype::int32:
    case NiftiDatatype::float32: return 4;
    case NiftiDatatype::float64: return 8;
    }
    return 0;
}

bool is_supported(std::int16_t code)
{
    switch (static_cast<NiftiDatatype>(code)) {
    case NiftiDatatype::uint8:
    case NiftiDatatype::int8:
    case NiftiDatatype::int16:
    case NiftiDatatype::uint16:
    case NiftiDatatype::int32:
    case NiftiDatatype::float32:
    case NiftiDatatype::float64: return true;
    }
    return false;
}

std::vector<unsigned char> read_all(const std::filesystem::path &path)
{
    // gzread passes uncompressed files through unchanged
    gzFile f = gzopen(path.string().c_str(), "rb");
    if (!f)
        throw Error(ErrorCode::io, "cannot open " + path.string());
    std::unique_ptr<gzFile_s, int (*)(gzFile)> guard(f, gzclose);
    std::vector<unsigned char> out;
    unsigned char chunk[1 << 16];
    for (;;) {
        const int n = gzread(f, chunk, sizeof chunk);
        if (n < 0)
            throw Error(ErrorCode::format, path.string() + ": corrupt compressed stream");
        if (n == 0)
            break;
        out.insert(out.end(), chunk, chunk + n);
    }
    return out;
}

bool has_gz_suffix(const std::filesystem::path &path)
{
    return path.extension() == ".gz";
}

void write_all(const std::filesystem::path &path, const std::vector<unsigned char> &bytes)
{
    if (has_gz_suffix(path)) {
        gzFile f = gzopen(path.string().c_str(), "wb6");
        if (!f)
            throw Error(ErrorCode::io, "cannot open " + path.string() + " for writing");
        std::size_t done = 0;
        while (done < bytes.size()) {
            const auto n = static_cast<unsigned>(std::min<std::size_t>(bytes.size() - done, 1u << 30));
            if (gzwrite(f, bytes.data() + done, n) != static_cast<int>(n)) {
                gzclose(f);
                throw Error(ErrorCode::io, "failed writing " + path.string());
            }
            done += n;
        }
        if (gzclose(f) != Z_OK)
            throw Error(ErrorCode::io, "failed closing " + path.string());
        return;
    }
    std::ofstream out(path, std::ios::binary);
    if (!out)
        throw Error(ErrorCode::io, "cannot open " + path.string() + " for writing");
    out.write(reinterpret_cast<const char *>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out)
        throw Error(ErrorCode::io, "failed writing " + path.string());
}

/// Parsed header plus decoded samples (component-major after the spatial dims).
struct RawImage {
    NiftiInfo info;
    std::string intent_name;
    VolumeGeometry geometry;
    std::vector<double> samples;
};

Mat3 quaternion_rotation(double b, double c, double d)
{
    double a = 1.0 - (b * b + c * c + d * d);
    a = a < 1e-7 ? 0.0 : std::sqrt(a);
    if (a == 0.0) {
        // 180 degree rotation: renormalize the vector part
        const double n = std::sqrt(b * b + c * c + d * d);
        if (n > 0) {
            b /= n;
            c /= n;
            d /= n;
        }
    }
    Mat3 r;
    r << a * a + b * b - c * c - d * d, 2 * b * c - 2 * a * d, 2 * b * d + 2 * a * c,
        2 * b * c + 2 * a * d, a * a + c * c - b * b - d * d, 2 * c * d - 2 * a * b,
        2 * b * d - 2 * a * c, 2 * c * d + 2 * a * b, a * a + d * d - c * c - b * b;
    return r;
}

Mat3 nearest_orthonormal(const Mat3 &m)
{
    Eigen::JacobiSVD<Mat3> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
    return svd.matrixU() * svd.matrixV().transpose();
}

RawImage parse(const std::vector<unsigned char> &bytes, const std::filesystem::path &path, bool header_only)
{
    if (bytes.size() < header_size)
        throw Error(ErrorCode::format, path.string() + ": file shorter than a NIfTI-1 header");
    std::vector<unsigned char> hdr(bytes.begin(), bytes.begin() + header_size);

    std::int32_t sizeof_hdr;
    std::memcpy(&sizeof_hdr, hdr.data(), 4);
    bool swap = false;
    if (sizeof_hdr != header_size) {
        if (byteswap_value(sizeof_hdr) != header_size)
            throw Error(ErrorCode::format, path.string() + ": sizeof_hdr is not 348");
        swap = true;
    }
    if (std::memcmp(hdr.data() + off::magic, "n+1\0", 4) != 0)
        throw Error(ErrorCode::format, path.string() + ": magic is not \"n+1\"");

    HeaderView h(hdr.data(), swap);
    RawImage img;
    img.info.big_endian = (std::endian::native == std::endian::little) == swap;

    std::int16_t dim[8];
    for (int t = 0; t < 8; ++t)
        dim[t] = h.get<std::int16_t>(off::dim + 2 * t);
    if (dim[0] < 1 || dim[0] > 7)
        throw Error(ErrorCode::format, path.string() + ": invalid dim[0]");
    for (int t = dim[0] + 1; t < 8; ++t)
        dim[t] = 1;
    for (int t = 1; t <= dim[0]; ++t)
        if (dim[t] < 1)
            throw Error(ErrorCode::format, path.string() + ": non-positive dimension");
    if (dim[4] != 1 || dim[6] != 1 || dim[7] != 1)
        throw Error(ErrorCode::unsupported, path.string() + ": only 3D scalar or vector volumes are supported");
    img.info.components = dim[5];
    img.intent_name.assign(reinterpret_cast<const char *>(hdr.data() + off::intent_name),
                           strnlen(reinterpret_cast<const char *>(hdr.data() + off::intent_name), 16));

    const auto code = h.get<std::int16_t>(off::datatype);
    if (!is_supported(code))
        throw Error(ErrorCode::unsupported, path.string() + ": unsupported datatype " + std::to_string(code));
    img.info.datatype = static_cast<NiftiDatatype>(code);
    img.info.scl_slope = h.get<float>(off::scl_slope);
    img.info.scl_inter = h.get<float>(off::scl_inter);

    float pixdim[8];
    for (int t = 0; t < 8; ++t)
        pixdim[t] = h.get<float>(off::pixdim + 4 * t);
    Vec3 spacing(pixdim[1], pixdim[2], pixdim[3]);
    for (int a = 0; a < 3; ++a)
        if (!(spacing[a] > 0.0) || !std::isfinite(spacing[a]))
            spacing[a] = 1.0;

    Mat3 direction = Mat3::Identity();
    Vec3 origin = Vec3::Zero();
    const auto sform_code = h.get<std::int16_t>(off::sform_code);
    const auto qform_code = h.get<std::int16_t>(off::qform_code);
    if (sform_code > 0) {
        Mat3 lin;
        for (int r = 0; r < 3; ++r) {
            for (int c = 0; c < 3; ++c)
                lin(r, c) = h.get<float>(off::srow_x + 16 * r + 4 * c);
            origin[r] = h.get<float>(off::srow_x + 16 * r + 12);
        }
        for (int c = 0; c < 3; ++c) {
            const double n = lin.col(c).norm();
            if (!(n > 0.0))
                throw Error(ErrorCode::format, path.string() + ": degenerate sform");
            direction.col(c) = lin.col(c) / n;
        }
        if ((direction.transpose() * direction - Mat3::Identity()).cwiseAbs().maxCoeff() > 1e-3)
            throw Error(ErrorCode::unsupported, path.string() + ": sform has a non-orthonormal direction");
    } else if (qform_code > 0) {
        const double b = h.get<float>(off::quatern_b);
        const double c = h.get<float>(off::quatern_b + 4);
        const double d = h.get<float>(off::quatern_b + 8);
        direction = quaternion_rotation(b, c, d);
        if (pixdim[0] < 0)
            direction.col(2) *= -1.0;
        for (int r = 0; r < 3; ++r)
            origin[r] = h.get<float>(off::qoffset_x + 4 * r);
    }
    direction = nearest_orthonormal(direction);

    img.geometry = VolumeGeometry::make({dim[1], dim[2], dim[3]}, spacing, origin, direction);
    if (header_only)
        return img;

    const double vox_offset = h.get<float>(off::vox_offset);
    const auto start = static_cast<std::size_t>(std::max(vox_offset, static_cast<double>(header_size)));
    const std::size_t count = img.geometry.voxel_count() * static_cast<std::size_t>(img.info.components);
    const int bps = bytes_per_sample(img.info.datatype);
    if (bytes.size() < start + count * static_cast<std::size_t>(bps))
        throw Error(ErrorCode::format, path.string() + ": truncated voxel data");

    const bool scale = img.info.scl_slope != 0.0 && std::isfinite(img.info.scl_slope);
    const double slope = img.info.scl_slope, inter = img.info.scl_inter;
    img.samples.resize(count);
    const unsigned char *src = bytes.data() + start;

    auto decode = [&](auto tag) {
        using T = decltype(tag);
        for (std::size_t n = 0; n < count; ++n) {
            T v;
            std::memcpy(&v, src + n * sizeof(T), sizeof(T));
            if (swap)
                v = byteswap_value(v);
            double x = static_cast<double>(v);
            if (scale)
                x = x * slope + inter;
            img.samples[n] = x;
        }
    };
    switch (img.info.datatype) {
    case NiftiDatatype::uint8: decode(std::uint8_t{}); break;
    case NiftiDatatype::int8: decode(std::int8_t{}); break;
    case NiftiDatatype::int16: decode(std::int16_t{}); break;
    case NiftiDatatype::uint16: decode(std::uint16_t{}); break;
    case NiftiDatatype::int32: decode(std::int32_t{}); break;
    case NiftiDatatype::float32: decode(float{}); break;
    case NiftiDatatype::float64: decode(double{}); break;
    }
    for (const double x : img.samples)
        if (!std::isfinite(x))
            throw Error(ErrorCode::data, path.string() + ": non-finite voxel values");
    return img;
}

RawImage load(const std::filesystem::path &path)
{
    return parse(read_all(path), path, false);
}

void fill_header(HeaderView &h, unsigned char *bytes, const VolumeGeometry &g, NiftiDatatype datatype,
                 int components)
{
    h.put<std::int32_t>(off::sizeof_hdr, header_size);
    std::int16_t dim[8] = {3, static_cast<std::int16_t>(g.dims[0]), static_cast<std::int16_t>(g.dims[1]),
                           static_cast<std::int16_t>(g.dims[2]), 1, 1, 1, 1};
    if (components > 1) {
        dim[0] = 5;
        dim[5] = static_cast<std::int16_t>(components);
        h.put<std::int16_t>(off::intent_code, intent_vector);
    }
    for (int t = 0; t < 8; ++t)
        h.put<std::int16_t>(off::dim + 2 * t, dim[t]);
    h.put<std::int16_t>(off::datatype, static_cast<std::int16_t>(datatype));
    h.put<std::int16_t>(off::bitpix, static_cast<std::int16_t>(8 * bytes_per_sample(datatype)));

    // qform: proper rotation plus qfac sign for left-handed grids
    Mat3 rot = g.direction;
    float qfac = 1.0f;
    if (rot.determinant() < 0) {
        qfac = -1.0f;
        rot.col(2) *= -1.0;
    }
    const float pixdim[8] = {qfac, static_cast<float>(g.spacing[0]), static_cast<float>(g.spacing[1]),
                             static_cast<float>(g.spacing[2]), 1.0f, 1.0f, 1.0f, 1.0f};
    for (int t = 0; t < 8; ++t)
        h.put<float>(off::pixdim + 4 * t, pixdim[t]);
    h.put<float>(off::vox_offset, static_cast<float>(data_offset));
    h.put<float>(off::scl_slope, 1.0f);
    h.put<float>(off::scl_inter, 0.0f);
    bytes[off::xyzt_units] = 2; // mm
    const char descrip[] = "nodekit";
    std::memcpy(bytes + off::descrip, descrip, sizeof descrip);

    Eigen::Quaterniond q(rot);
    q.normalize();
    if (q.w() < 0)
        q.coeffs() *= -1.0;
    h.put<std::int16_t>(off::qform_code, 1);
    h.put<std::int16_t>(off::sform_code, 1);
    h.put<float>(off::quatern_b, static_cast<float>(q.x()));
    h.put<float>(off::quatern_b + 4, static_cast<float>(q.y()));
    h.put<float>(off::quatern_b + 8, static_cast<float>(q.z()));
    for (int r = 0; r < 3; ++r)
        h.put<float>(off::qoffset_x + 4 * r, static_cast<float>(g.origin[r]));

    const Mat3 lin = g.index_to_physical_matrix();
    for (int r = 0; r < 3; ++r) {
        for (int c = 0; c < 3; ++c)
            h.put<float>(off::srow_x + 16 * r + 4 * c, static_cast<float>(lin(r, c)));
        h.put<float>(off::srow_x + 16 * r + 12, static_cast<float>(g.origin[r]));
    }
    std::memcpy(bytes + off::magic, "n+1\0", 4);
}

void check_dims_fit(const VolumeGeometry &g)
{
    for (int a = 0; a < 3; ++a)
        if (g.dims[a] > std::numeric_limits<std::int16_t>::max())
            throw Error(ErrorCode::unsupported, "dimension exceeds the NIfTI-1 limit of 32767");
}

template <typename T>
void encode(std::vector<unsigned char> &out, std::span<const double> values)
{
    const std::size_t base = out.size();
    out.resize(base + values.size() * sizeof(T));
    for (std::size_t n = 0; n < values.size(); ++n) {
        const double x = values[n];
        if constexpr (std::is_integral_v<T>) {
            if (x != std::floor(x) || x < static_cast<double>(std::numeric_limits<T>::lowest()) ||
                x > static_cast<double>(std::numeric_limits<T>::max()))
                throw Error(ErrorCode::data, "sample not representable in the requested integer datatype");
        }
        const T v = static_cast<T>(x);
        std::memcpy(out.data() + base + n * sizeof(T), &v, sizeof(T));
    }
}

void write_raw(const VolumeGeometry &g, std::span<const double> values, int components, NiftiDatatype datatype,
               const std::filesystem::path &path, std::string_view intent_name = {})
{
    check_dims_fit(g);
    std::vector<unsigned char> bytes(data_offset, 0);
    HeaderView h(bytes.data(), false);
    fill_header(h, bytes.data(), g, datatype, components);
    std::memcpy(bytes.data() + off::intent_name, intent_name.data(), std::min<std::size_t>(intent_name.size(), 15));
    switch (datatype) {
    case NiftiDatatype::uint8: encode<std::uint8_t>(bytes, values); break;
    case NiftiDatatype::int8: encode<std::int8_t>(bytes, values); break;
    case NiftiDatatype::int16: encode<std::int16_t>(bytes, values); break;
    case NiftiDatatype::uint16: encode<std::uint16_t>(bytes, values); break;
    case NiftiDatatype::int32: encode<std::int32_t>(bytes, values); break;
    case NiftiDatatype::float32: encode<float>(bytes, values); break;
    case NiftiDatatype::float64: encode<double>(bytes, values); break;
    }
    write_all(path, bytes);
}

} // namespace

std::string_view to_string(NiftiDatatype t)
{
    switch (t) {
    case NiftiDatatype::uint8: return "uint8";
    case NiftiDatatype::int8: return "int8";
    case NiftiDatatype::int16: return "int16";
    case NiftiDatatype::uint16: return "uint16";
    case NiftiDatatype::int32: return "int32";
    case NiftiDatatype::float32: return "float32";
    case NiftiDatatype::float64: return "float64";
    }
    return "unknown";
}

NiftiInfo read_nifti_info(const std::filesystem::path &path)
{
    gzFile f = gzopen(path.string().c_str(), "rb");
    if (!f)
        throw Error(ErrorCode::io, "cannot open " + path.string());
    std::vector<unsigned char> bytes(header_size);
    const int n = gzread(f, bytes.data(), header_size);
    gzclose(f);
    bytes.resize(static_cast<std::size_t>(std::max(n, 0)));
    return parse(bytes, path, true).info;
}

ScalarVolume read_nifti(const std::filesystem::path &path)
{
    RawImage img = load(path);
    if (img.info.components != 1)
        throw Error(ErrorCode::unsupported, path.string() + ": expected a scalar volume");
    return ScalarVolume(img.geometry, std::move(img.samples));
}

LabelVolume read_nifti_labels(const std::filesystem::path &path)
{
    RawImage img = load(path);
    if (img.info.components != 1)
        throw Error(ErrorCode::unsupported, path.string() + ": expected a scalar volume");
    std::vector<std::uint32_t> labels(img.samples.size());
    for (std::size_t n = 0; n < labels.size(); ++n) {
        const double x = img.samples[n];
        if (x < 0 || x != std::floor(x) || x > std::numeric_limits<std::uint32_t>::max())
            throw Error(ErrorCode::data, path.string() + ": label volume has non-integer or negative values");
        labels[n] = static_cast<std::uint32_t>(x);
    }
    return LabelVolume(img.geometry, std::move(labels));
}

void write_nifti(const ScalarVolume &vol, const std::filesystem::path &path, NiftiDatatype datatype)
{
    write_raw(vol.geometry(), vol.data(), 1, datatype, path);
}

void write_nifti(const LabelVolume &vol, const std::filesystem::path &path)
{
    const std::uint32_t max_label = vol.size() ? *std::max_element(vol.values().begin(), vol.values().end()) : 0;
    NiftiDatatype t = NiftiDatatype::int32;
    if (max_label < 256)
        t = NiftiDatatype::uint8;
    else if (max_label < 65536)
        t = NiftiDatatype::uint16;
    else if (max_label > static_cast<std::uint32_t>(std::numeric_limits<std::int32_t>::max()))
        throw Error(ErrorCode::unsupported, "label values exceed the int32 range");
    std::vector<double> values(vol.values().begin(), vol.values().end());
    write_raw(vol.geometry(), values, 1, t, path);
}

void write_nifti_field(const DisplacementField &field, const std::filesystem::path &path)
{
    field.validate();
    const std::size_t n = field.vectors.size();
    std::vector<double> values(3 * n);
    for (std::size_t v = 0; v < n; ++v)
        for (int c = 0; c < 3; ++c)
            values[c * n + v] = field.vectors[v][c];
    write_raw(field.geometry, values, 3, NiftiDatatype::float32, path,
              field.direction == FieldDirection::atlas_to_subject ? "a2s" : "s2a");
}

DisplacementField read_nifti_field(const std::filesystem::path &path)
{
    RawImage img = load(path);
    if (img.info.components != 3)
        throw Error(ErrorCode::format, path.string() + ": expected a 3-component vector volume");
    const FieldDirection dir =
        img.intent_name == "s2a" ? FieldDirection::subject_to_atlas : FieldDirection::atlas_to_subject;
    DisplacementField field = DisplacementField::zero(img.geometry, dir);
    const std::size_t n = field.vectors.size();
    for (std::size_t v = 0; v < n; ++v)
        field.vectors[v] = Vec3(img.samples[v], img.samples[n + v], img.samples[2 * n + v]);
    return field;
}

} // namespace nodekit
