#include "isomtl/nifti_io.h"

#include <json.hpp>
#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>
#include <stdexcept>

namespace isomtl {
namespace {

#pragma pack(push, 1)
struct Nifti1Header {
    int32_t sizeof_hdr;
    char data_type[10];
    char db_name[18];
    int32_t extents;
    int16_t session_error;
    char regular;
    char dim_info;
    int16_t dim[8];
    float intent_p1, intent_p2, intent_p3;
    int16_t intent_code;
    int16_t datatype;
    int16_t bitpix;
    int16_t slice_start;
    float pixdim[8];
    float vox_offset;
    float scl_slope, scl_inter;
    int16_t slice_end;
    char slice_code;
    char xyzt_units;
    float cal_max, cal_min;
    float slice_duration;
    float toffset;
    int32_t glmax, glmin;
    char descrip[80];
    char aux_file[24];
    int16_t qform_code, sform_code;
    float quatern_b, quatern_c, quatern_d;
    float qoffset_x, qoffset_y, qoffset_z;
    float srow_x[4], srow_y[4], srow_z[4];
    char intent_name[16];
    char magic[4];
};
#pragma pack(pop)
static_assert(sizeof(Nifti1Header) == 348);

enum : int16_t {
    DT_UINT8 = 2, DT_INT16 = 4, DT_INT32 = 8, DT_FLOAT32 = 16, DT_FLOAT64 = 64,
    DT_INT8 = 256, DT_UINT16 = 512, DT_UINT32 = 768
};

constexpr int32_t kMetaExtensionCode = 6; // NIFTI_ECODE_COMMENT

using Mat3 = std::array<std::array<double, 3>, 3>;

bool ends_with(const std::string &s, const std::string &suffix) {
    return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

Vec3 code_direction(char c) {
    switch (c) {
    case 'R': return {1, 0, 0};
    case 'L': return {-1, 0, 0};
    case 'A': return {0, 1, 0};
    case 'P': return {0, -1, 0};
    case 'S': return {0, 0, 1};
    case 'I': return {0, 0, -1};
    default: throw std::invalid_argument(std::string("bad axis code '") + c + "'");
    }
}

char direction_code(const Vec3 &col) {
    int best = 0;
    for (int k = 1; k < 3; ++k)
        if (std::abs(col[k]) > std::abs(col[best])) best = k;
    static const char pos[] = {'R', 'A', 'S'}, neg[] = {'L', 'P', 'I'};
    return col[best] >= 0 ? pos[best] : neg[best];
}

Mat3 rotation_from_codes(const std::array<char, 3> &codes) {
    Mat3 r{};
    for (int a = 0; a < 3; ++a) {
        const Vec3 d = code_direction(codes[a]);
        for (int k = 0; k < 3; ++k) r[k][a] = d[k];
    }
    return r;
}

double det3(const Mat3 &m) {
    return m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0]) +
           m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
}

// Quaternion parameters (b, c, d, qfac) of an orthogonal matrix.
std::array<double, 4> matrix_to_quatern(Mat3 r) {
    double qfac = 1.0;
    if (det3(r) < 0) {
        qfac = -1.0;
        for (int k = 0; k < 3; ++k) r[k][2] = -r[k][2];
    }
    double a = r[0][0] + r[1][1] + r[2][2] + 1.0, b, c, d;
    if (a > 0.5) {
        a = 0.5 * std::sqrt(a);
        b = 0.25 * (r[2][1] - r[1][2]) / a;
        c = 0.25 * (r[0][2] - r[2][0]) / a;
        d = 0.25 * (r[1][0] - r[0][1]) / a;
    } else {
        const double xd = 1.0 + r[0][0] - (r[1][1] + r[2][2]);
        const double yd = 1.0 + r[1][1] - (r[0][0] + r[2][2]);
        const double zd = 1.0 + r[2][2] - (r[0][0] + r[1][1]);
        if (xd > 1.0) {
            b = 0.5 * std::sqrt(xd);
            c = 0.25 * (r[0][1] + r[1][0]) / b;
            d = 0.25 * (r[0][2] + r[2][0]) / b;
            a = 0.25 * (r[2][1] - r[1][2]) / b;
        } else if (yd > 1.0) {
            c = 0.5 * std::sqrt(yd);
            b = 0.25 * (r[0][1] + r[1][0]) / c;
            d = 0.25 * (r[1][2] + r[2][1]) / c;
            a = 0.25 * (r[0][2] - r[2][0]) / c;
        } else {
            d = 0.5 * std::sqrt(zd);
            b = 0.25 * (r[0][2] + r[2][0]) / d;
            c = 0.25 * (r[1][2] + r[2][1]) / d;
            a = 0.25 * (r[1][0] - r[0][1]) / d;
        }
        if (a < 0.0) { b = -b; c = -c; d = -d; }
    }
    return {b, c, d, qfac};
}

Mat3 quatern_to_matrix(double b, double c, double d, double qfac) {
    double a = 1.0 - (b * b + c * c + d * d);
    if (a < 1e-7) {
        a = 1.0 / std::sqrt(b * b + c * c + d * d);
        b *= a; c *= a; d *= a;
        a = 0.0;
    } else {
        a = std::sqrt(a);
    }
    Mat3 r{{{a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)},
            {2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)},
            {2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - c * c - b * b}}};
    if (qfac < 0)
        for (int k = 0; k < 3; ++k) r[k][2] = -r[k][2];
    return r;
}

class GzReader {
  public:
    explicit GzReader(const std::filesystem::path &p) : f_(gzopen(p.string().c_str(), "rb")) {
        if (!f_) throw std::runtime_error("cannot open " + p.string());
    }
    ~GzReader() { if (f_) gzclose(f_); }
    GzReader(const GzReader &) = delete;
    GzReader &operator=(const GzReader &) = delete;
    void read(void *dst, size_t n, const char *what) {
        auto *out = static_cast<char *>(dst);
        while (n > 0) {
            const unsigned chunk = static_cast<unsigned>(std::min<size_t>(n, 1u << 30));
            const int got = gzread(f_, out, chunk);
            if (got <= 0) throw std::runtime_error(std::string("truncated NIfTI file while reading ") + what);
            out += got;
            n -= static_cast<size_t>(got);
        }
    }
  private:
    gzFile f_;
};

class GzWriter {
  public:
    GzWriter(const std::filesystem::path &p, bool compress)
        : f_(gzopen(p.string().c_str(), compress ? "wb6" : "wbT")) {
        if (!f_) throw std::runtime_error("cannot write " + p.string());
    }
    ~GzWriter() { if (f_) gzclose(f_); }
    GzWriter(const GzWriter &) = delete;
    GzWriter &operator=(const GzWriter &) = delete;
    void write(const void *src, size_t n) {
        const auto *in = static_cast<const char *>(src);
        while (n > 0) {
            const unsigned chunk = static_cast<unsigned>(std::min<size_t>(n, 1u << 30));
            if (gzwrite(f_, in, chunk) != static_cast<int>(chunk)) throw std::runtime_error("NIfTI write failed");
            in += chunk;
            n -= chunk;
        }
    }
    void close() {
        if (gzclose(f_) != Z_OK) { f_ = nullptr; throw std::runtime_error("NIfTI close failed"); }
        f_ = nullptr;
    }
  private:
    gzFile f_;
};

struct RawImage {
    Grid3 grid;
    int16_t datatype = 0;
    double slope = 1.0, inter = 0.0;
    std::vector<double> values;
};

template <typename T>
void decode_into(const std::vector<char> &raw, std::vector<double> &out) {
    const size_t n = raw.size() / sizeof(T);
    out.resize(n);
    for (size_t i = 0; i < n; ++i) {
        T v;
        std::memcpy(&v, raw.data() + i * sizeof(T), sizeof(T));
        out[i] = static_cast<double>(v);
    }
}

int bytes_per_voxel(int16_t dt) {
    switch (dt) {
    case DT_UINT8: case DT_INT8: return 1;
    case DT_INT16: case DT_UINT16: return 2;
    case DT_INT32: case DT_UINT32: case DT_FLOAT32: return 4;
    case DT_FLOAT64: return 8;
    default: throw std::runtime_error("unsupported NIfTI datatype " + std::to_string(dt));
    }
}

RawImage read_raw(const std::filesystem::path &path) {
    GzReader in(path);
    Nifti1Header h{};
    in.read(&h, sizeof h, "header");
    if (h.sizeof_hdr != 348) throw std::runtime_error(path.string() + ": not a little-endian NIfTI-1 file");
    if (std::memcmp(h.magic, "n+1", 4) != 0) throw std::runtime_error(path.string() + ": not a single-file NIfTI-1");
    if (h.dim[0] < 1 || h.dim[0] > 7) throw std::runtime_error(path.string() + ": bad dim[0]");
    for (int k = 4; k <= h.dim[0]; ++k)
        if (h.dim[k] > 1) throw std::runtime_error(path.string() + ": only 3D volumes are supported");

    RawImage img;
    img.datatype = h.datatype;
    Index3 dims{1, 1, 1};
    Vec3 spacing{1, 1, 1};
    for (int a = 0; a < 3; ++a) {
        dims[a] = a < h.dim[0] ? std::max<int64_t>(1, h.dim[a + 1]) : 1;
        spacing[a] = a < h.dim[0] ? h.pixdim[a + 1] : 1.0;
        if (!(spacing[a] > 0.0)) throw std::runtime_error(path.string() + ": non-positive voxel spacing");
    }

    Mat3 rot{{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}};
    Vec3 offset{0, 0, 0};
    if (h.qform_code > 0) {
        rot = quatern_to_matrix(h.quatern_b, h.quatern_c, h.quatern_d, h.pixdim[0] < 0 ? -1.0 : 1.0);
        offset = {h.qoffset_x, h.qoffset_y, h.qoffset_z};
    } else if (h.sform_code > 0) {
        const float *rows[3] = {h.srow_x, h.srow_y, h.srow_z};
        for (int a = 0; a < 3; ++a) {
            double norm = 0;
            for (int k = 0; k < 3; ++k) norm += double(rows[k][a]) * rows[k][a];
            norm = std::sqrt(norm);
            if (!(norm > 0)) throw std::runtime_error(path.string() + ": degenerate sform");
            for (int k = 0; k < 3; ++k) rot[k][a] = rows[k][a] / norm;
        }
        offset = {h.srow_x[3], h.srow_y[3], h.srow_z[3]};
    }
    std::array<char, 3> codes{};
    for (int a = 0; a < 3; ++a) codes[a] = direction_code({rot[0][a], rot[1][a], rot[2][a]});
    const Mat3 snapped = rotation_from_codes(codes);
    Vec3 origin{};
    for (int a = 0; a < 3; ++a)
        for (int k = 0; k < 3; ++k) origin[a] += snapped[k][a] * offset[k];

    int slice_axis = 2;
    if (spacing[0] > spacing[1] && spacing[0] > spacing[2]) slice_axis = 0;
    else if (spacing[1] > spacing[0] && spacing[1] > spacing[2]) slice_axis = 1;

    // Header extensions; our metadata block carries the exact doubles.
    const auto vox_offset = static_cast<size_t>(h.vox_offset);
    size_t pos = sizeof h;
    if (vox_offset > pos + 4) {
        char ext[4];
        in.read(ext, 4, "extension flag");
        pos += 4;
        while (ext[0] != 0 && pos + 8 <= vox_offset) {
            int32_t esize = 0, ecode = 0;
            in.read(&esize, 4, "extension");
            in.read(&ecode, 4, "extension");
            if (esize < 8 || pos + static_cast<size_t>(esize) > vox_offset) break;
            std::string body(static_cast<size_t>(esize - 8), '\0');
            in.read(body.data(), body.size(), "extension");
            pos += static_cast<size_t>(esize);
            if (ecode != kMetaExtensionCode) continue;
            const auto meta = nlohmann::json::parse(body.c_str(), nullptr, false);
            if (meta.is_discarded() || !meta.contains("isomtl")) continue;
            const auto &m = meta["isomtl"];
            Vec3 s = m.at("spacing").get<Vec3>(), o = m.at("origin").get<Vec3>();
            const std::string c = m.at("axis_codes").get<std::string>();
            bool consistent = c.size() == 3;
            for (int a = 0; a < 3 && consistent; ++a)
                consistent = std::abs(s[a] - spacing[a]) <= 1e-5 * spacing[a] + 1e-6 && c[a] == codes[a];
            if (!consistent) continue;
            spacing = s;
            origin = o;
            slice_axis = m.at("slice_axis").get<int>();
        }
    }
    if (pos < vox_offset) {
        std::vector<char> skip(vox_offset - pos);
        in.read(skip.data(), skip.size(), "padding");
    }

    img.grid.dims = dims;
    img.grid.spacing = spacing;
    img.grid.origin = origin;
    img.grid.axis_codes = codes;
    img.grid.slice_axis = slice_axis;
    img.grid.validate();

    const int bpv = bytes_per_voxel(h.datatype);
    std::vector<char> raw(static_cast<size_t>(img.grid.voxel_count()) * static_cast<size_t>(bpv));
    in.read(raw.data(), raw.size(), "voxel data");
    switch (h.datatype) {
    case DT_UINT8: decode_into<uint8_t>(raw, img.values); break;
    case DT_INT8: decode_into<int8_t>(raw, img.values); break;
    case DT_INT16: decode_into<int16_t>(raw, img.values); break;
    case DT_UINT16: decode_into<uint16_t>(raw, img.values); break;
    case DT_INT32: decode_into<int32_t>(raw, img.values); break;
    case DT_UINT32: decode_into<uint32_t>(raw, img.values); break;
    case DT_FLOAT32: decode_into<float>(raw, img.values); break;
    case DT_FLOAT64: decode_into<double>(raw, img.values); break;
    default: break;
    }
    if (std::isfinite(h.scl_slope) && h.scl_slope != 0.0f) {
        img.slope = h.scl_slope;
        img.inter = std::isfinite(h.scl_inter) ? h.scl_inter : 0.0;
    }
    return img;
}

bool is_integer_type(int16_t dt) { return dt != DT_FLOAT32 && dt != DT_FLOAT64; }

void write_image(const Grid3 &g, int16_t datatype, const void *data, size_t bytes,
                 const std::filesystem::path &path) {
    g.validate();
    Nifti1Header h{};
    h.sizeof_hdr = 348;
    h.regular = 'r';
    h.dim[0] = 3;
    for (int a = 0; a < 3; ++a) {
        if (g.dims[a] > 32767) throw std::invalid_argument("dimension too large for NIfTI-1");
        h.dim[a + 1] = static_cast<int16_t>(g.dims[a]);
        h.pixdim[a + 1] = static_cast<float>(g.spacing[a]);
    }
    for (int k = 4; k < 8; ++k) h.dim[k] = 1;
    h.datatype = datatype;
    h.bitpix = static_cast<int16_t>(8 * bytes_per_voxel(datatype));
    h.scl_slope = 1.0f;
    h.xyzt_units = 2; // mm
    std::strncpy(h.descrip, "isomtl", sizeof h.descrip - 1);
    std::memcpy(h.magic, "n+1", 4);

    const Mat3 rot = rotation_from_codes(g.axis_codes);
    Vec3 offset{};
    for (int k = 0; k < 3; ++k)
        for (int a = 0; a < 3; ++a) offset[k] += rot[k][a] * g.origin[a];
    const auto q = matrix_to_quatern(rot);
    h.qform_code = 1;
    h.sform_code = 1;
    h.quatern_b = static_cast<float>(q[0]);
    h.quatern_c = static_cast<float>(q[1]);
    h.quatern_d = static_cast<float>(q[2]);
    h.pixdim[0] = static_cast<float>(q[3]);
    h.qoffset_x = static_cast<float>(offset[0]);
    h.qoffset_y = static_cast<float>(offset[1]);
    h.qoffset_z = static_cast<float>(offset[2]);
    float *rows[3] = {h.srow_x, h.srow_y, h.srow_z};
    for (int k = 0; k < 3; ++k) {
        for (int a = 0; a < 3; ++a) rows[k][a] = static_cast<float>(rot[k][a] * g.spacing[a]);
        rows[k][3] = static_cast<float>(offset[k]);
    }

    nlohmann::json meta;
    meta["isomtl"] = {{"spacing", g.spacing},
                      {"origin", g.origin},
                      {"axis_codes", std::string(g.axis_codes.begin(), g.axis_codes.end())},
                      {"slice_axis", g.slice_axis}};
    std::string body = meta.dump();
    body.push_back('\0');
    const size_t esize = (body.size() + 8 + 15) / 16 * 16;
    body.resize(esize - 8, '\0');
    h.vox_offset = static_cast<float>(348 + 4 + esize);

    const std::string name = path.filename().string();
    GzWriter out(path, ends_with(name, ".gz"));
    out.write(&h, sizeof h);
    const char ext[4] = {1, 0, 0, 0};
    out.write(ext, 4);
    const int32_t es = static_cast<int32_t>(esize), ec = kMetaExtensionCode;
    out.write(&es, 4);
    out.write(&ec, 4);
    out.write(body.data(), body.size());
    out.write(data, bytes);
    out.close();
}

LabelTable table_for(const std::vector<LabelId> &labels) {
    std::set<int> ids(labels.begin(), labels.end());
    ids.insert(0);
    const LabelTable defaults = default_mtl_labels();
    LabelTable t;
    for (int id : ids) {
        auto it = defaults.find(id);
        t[id] = it != defaults.end() ? it->second : "label_" + std::to_string(id);
    }
    return t;
}

LabelVolume to_labels(RawImage img, const std::filesystem::path &path) {
    std::vector<LabelId> labels(img.values.size());
    for (size_t i = 0; i < labels.size(); ++i) {
        const double v = img.values[i] * img.slope + img.inter;
        if (v < 0 || v > 65535 || v != std::floor(v))
            throw std::runtime_error(path.string() + ": label image contains non-integer or negative values");
        labels[i] = static_cast<LabelId>(v);
    }
    const auto sidecar = label_sidecar_path(path);
    LabelTable table = std::filesystem::exists(sidecar) ? read_label_table(sidecar) : table_for(labels);
    return canonicalize(LabelVolume(img.grid, std::move(labels), std::move(table)));
}

ScalarVolume to_scalar(RawImage img) {
    if (img.slope != 1.0 || img.inter != 0.0)
        for (double &v : img.values) v = v * img.slope + img.inter;
    return canonicalize(ScalarVolume(img.grid, std::move(img.values)));
}

} // namespace

std::filesystem::path label_sidecar_path(const std::filesystem::path &image_path) {
    std::string name = image_path.filename().string();
    for (const char *ext : {".nii.gz", ".nii"})
        if (ends_with(name, ext)) {
            name.resize(name.size() - std::strlen(ext));
            break;
        }
    return image_path.parent_path() / (name + ".labels.json");
}

LabelTable read_label_table(const std::filesystem::path &json_path) {
    std::ifstream in(json_path);
    if (!in) throw std::runtime_error("cannot read label table " + json_path.string());
    const auto j = nlohmann::json::parse(in);
    LabelTable t;
    for (const auto &[k, v] : j.items()) {
        const int id = std::stoi(k);
        if (id < 0 || id > 65535) throw std::runtime_error("label id out of range in " + json_path.string());
        if (!t.emplace(id, v.get<std::string>()).second)
            throw std::runtime_error("duplicate label id in " + json_path.string());
    }
    t.try_emplace(0, "background");
    return t;
}

void write_label_table(const LabelTable &table, const std::filesystem::path &json_path) {
    nlohmann::ordered_json j;
    for (const auto &[id, name] : table) j[std::to_string(id)] = name;
    std::ofstream out(json_path);
    if (!out) throw std::runtime_error("cannot write label table " + json_path.string());
    out << j.dump(2) << '\n';
}

ScalarVolume load_scalar(const std::filesystem::path &path) { return to_scalar(read_raw(path)); }

LabelVolume load_labels(const std::filesystem::path &path) { return to_labels(read_raw(path), path); }

std::variant<ScalarVolume, LabelVolume> load_volume(const std::filesystem::path &path) {
    RawImage img = read_raw(path);
    if (is_integer_type(img.datatype)) return to_labels(std::move(img), path);
    return to_scalar(std::move(img));
}

void save_volume(const ScalarVolume &vol, const std::filesystem::path &path, ScalarStorage storage) {
    vol.validate();
    if (storage == ScalarStorage::Float64) {
        write_image(vol.grid, DT_FLOAT64, vol.values.data(), vol.values.size() * sizeof(double), path);
        return;
    }
    std::vector<float> f(vol.values.begin(), vol.values.end());
    write_image(vol.grid, DT_FLOAT32, f.data(), f.size() * sizeof(float), path);
}

void save_volume(const LabelVolume &vol, const std::filesystem::path &path) {
    vol.validate();
    write_image(vol.grid, DT_UINT16, vol.labels.data(), vol.labels.size() * sizeof(LabelId), path);
    write_label_table(vol.label_table, label_sidecar_path(path));
}

} // namespace isomtl
