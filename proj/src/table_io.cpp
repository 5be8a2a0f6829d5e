#include "isomtl/table_io.h"

#include <charconv>
#include <chrono>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace isomtl {

std::optional<size_t> CsvTable::find(const std::string &column) const {
    for (size_t i = 0; i < header.size(); ++i)
        if (header[i] == column) return i;
    return std::nullopt;
}

size_t CsvTable::col(const std::string &column) const {
    if (auto i = find(column)) return *i;
    throw std::invalid_argument("csv: missing column '" + column + "'");
}

CsvTable parse_csv(const std::string &text) {
    std::vector<std::vector<std::string>> records;
    std::vector<std::string> rec;
    std::string field;
    bool quoted = false, any = false;
    for (size_t i = 0; i < text.size(); ++i) {
        const char c = text[i];
        if (quoted) {
            if (c == '"' && i + 1 < text.size() && text[i + 1] == '"') {
                field += '"';
                ++i;
            } else if (c == '"') {
                quoted = false;
            } else {
                field += c;
            }
            continue;
        }
        if (c == '"') {
            quoted = true;
            any = true;
        } else if (c == ',') {
            rec.push_back(std::move(field));
            field.clear();
            any = true;
        } else if (c == '\n' || c == '\r') {
            if (c == '\r' && i + 1 < text.size() && text[i + 1] == '\n') ++i;
            if (any || !field.empty()) {
                rec.push_back(std::move(field));
                records.push_back(std::move(rec));
            }
            rec.clear();
            field.clear();
            any = false;
        } else {
            field += c;
            any = true;
        }
    }
    if (quoted) throw std::invalid_argument("csv: unterminated quote");
    if (any || !field.empty()) {
        rec.push_back(std::move(field));
        records.push_back(std::move(rec));
    }
    CsvTable t;
    if (records.empty()) return t;
    t.header = std::move(records.front());
    for (size_t r = 1; r < records.size(); ++r) {
        if (records[r].size() != t.header.size())
            throw std::invalid_argument("csv: row " + std::to_string(r) + " has " + std::to_string(records[r].size()) +
                                        " fields, header has " + std::to_string(t.header.size()));
        t.rows.push_back(std::move(records[r]));
    }
    return t;
}

CsvTable read_csv(const std::filesystem::path &path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    try {
        return parse_csv(ss.str());
    } catch (const std::invalid_argument &e) {
        throw std::invalid_argument(path.string() + ": " + e.what());
    }
}

namespace {

std::string quote(const std::string &s) {
    if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
    std::string o = "\"";
    for (char c : s) {
        if (c == '"') o += '"';
        o += c;
    }
    return o + '"';
}

} // namespace

std::string format_csv(const CsvTable &t) {
    std::string out;
    auto line = [&](const std::vector<std::string> &r) {
        for (size_t i = 0; i < r.size(); ++i) {
            if (i) out += ',';
            out += quote(r[i]);
        }
        out += '\n';
    };
    line(t.header);
    for (const auto &r : t.rows) line(r);
    return out;
}

void write_csv(const CsvTable &t, const std::filesystem::path &path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << format_csv(t);
}

std::string format_double(double v) {
    char buf[64];
    auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, p);
}

double parse_double(const std::string &s, const std::string &what) {
    double v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size())
        throw std::invalid_argument(what + ": not a number '" + s + "'");
    return v;
}

namespace {

std::chrono::sys_days parse_date(const std::string &s) {
    int y = 0;
    unsigned m = 0, d = 0;
    char extra = 0;
    if (std::sscanf(s.c_str(), "%d-%u-%u%c", &y, &m, &d, &extra) != 3)
        throw std::invalid_argument("bad date '" + s + "', expected YYYY-MM-DD");
    const std::chrono::year_month_day ymd{std::chrono::year{y}, std::chrono::month{m}, std::chrono::day{d}};
    if (!ymd.ok()) throw std::invalid_argument("bad date '" + s + "'");
    return std::chrono::sys_days{ymd};
}

} // namespace

int64_t days_between(const std::string &a, const std::string &b) {
    return (parse_date(b) - parse_date(a)).count();
}

std::string add_days(const std::string &date, int64_t days) {
    const std::chrono::year_month_day ymd{parse_date(date) + std::chrono::days{days}};
    char buf[16];
    std::snprintf(buf, sizeof buf, "%04d-%02u-%02u", static_cast<int>(ymd.year()), static_cast<unsigned>(ymd.month()),
                  static_cast<unsigned>(ymd.day()));
    return buf;
}

std::vector<ManifestRow> read_manifest(const std::filesystem::path &path) {
    const CsvTable t = read_csv(path);
    const std::filesystem::path base = path.parent_path();
    auto opt = [&](const std::vector<std::string> &r, const char *name) -> std::string {
        auto i = t.find(name);
        return i ? r[*i] : std::string();
    };
    auto resolve = [&](const std::string &p) -> std::filesystem::path {
        if (p.empty()) return {};
        std::filesystem::path q(p);
        return q.is_absolute() ? q : base / q;
    };
    std::vector<ManifestRow> rows;
    const size_t sid = t.col("subject_id");
    for (const auto &r : t.rows) {
        ManifestRow m;
        m.subject_id = r[sid];
        if (m.subject_id.empty()) throw std::invalid_argument(path.string() + ": empty subject_id");
        const std::string session = opt(r, "session");
        m.session = session.empty() ? 1 : static_cast<int>(parse_double(session, "session"));
        m.role = opt(r, "role");
        if (m.role.empty()) m.role = "study";
        if (m.role != "exvivo" && m.role != "atlas" && m.role != "study")
            throw std::invalid_argument(path.string() + ": unknown role '" + m.role + "'");
        m.group = opt(r, "group");
        const std::string age = opt(r, "age");
        m.age = age.empty() ? 0.0 : parse_double(age, "age");
        m.scan_date = opt(r, "scan_date");
        // Per-module manifests name the path columns <kind>_path.
        auto path_col = [&](const char *name) {
            const std::string v = opt(r, name);
            return v.empty() ? opt(r, (std::string(name) + "_path").c_str()) : v;
        };
        m.t2 = resolve(path_col("t2"));
        m.t1 = resolve(path_col("t1"));
        m.labels = resolve(path_col("labels"));
        m.truth = resolve(opt(r, "truth"));
        rows.push_back(std::move(m));
    }
    return rows;
}

void write_manifest(const std::vector<ManifestRow> &rows, const std::filesystem::path &path) {
    CsvTable t;
    t.header = {"subject_id", "session", "role", "group", "age", "scan_date", "t2", "t1", "labels", "truth"};
    const std::filesystem::path base = path.parent_path();
    auto rel = [&](const std::filesystem::path &p) {
        return p.empty() ? std::string() : std::filesystem::relative(p, base).generic_string();
    };
    for (const ManifestRow &m : rows)
        t.rows.push_back({m.subject_id, std::to_string(m.session), m.role, m.group, m.age > 0 ? format_double(m.age) : "",
                          m.scan_date, rel(m.t2), rel(m.t1), rel(m.labels), rel(m.truth)});
    write_csv(t, path);
}

std::vector<StudyRow> read_study_csv(const std::filesystem::path &path) {
    const CsvTable t = read_csv(path);
    const size_t sid = t.col("subject_id"), grp = t.col("group"), age = t.col("age");
    std::vector<StudyRow> rows;
    for (const auto &r : t.rows) {
        StudyRow s;
        s.subject_id = r[sid];
        s.group = parse_group(r[grp]);
        s.age = parse_double(r[age], "age");
        for (size_t c = 0; c < t.header.size(); ++c) {
            if (c == sid || c == grp || c == age || r[c].empty()) continue;
            s.thickness[t.header[c]] = parse_double(r[c], t.header[c]);
        }
        rows.push_back(std::move(s));
    }
    return rows;
}

void write_study_csv(const std::vector<StudyRow> &rows, const std::vector<std::string> &regions,
                     const std::filesystem::path &path) {
    CsvTable t;
    t.header = {"subject_id", "group", "age"};
    t.header.insert(t.header.end(), regions.begin(), regions.end());
    for (const StudyRow &s : rows) {
        std::vector<std::string> r{s.subject_id, group_name(s.group), format_double(s.age)};
        for (const std::string &g : regions) {
            auto it = s.thickness.find(g);
            r.push_back(it == s.thickness.end() ? "" : format_double(it->second));
        }
        t.rows.push_back(std::move(r));
    }
    write_csv(t, path);
}

std::vector<LongSessionRow> read_long_csv(const std::filesystem::path &path) {
    const CsvTable t = read_csv(path);
    const size_t sid = t.col("subject_id"), d1 = t.col("scan_date_1"), d2 = t.col("scan_date_2");
    std::vector<LongSessionRow> rows;
    for (const auto &r : t.rows) {
        LongSessionRow s{r[sid], r[d1], r[d2], {}, {}};
        for (size_t c = 0; c < t.header.size(); ++c) {
            const std::string &h = t.header[c];
            if (c == sid || c == d1 || c == d2 || r[c].empty()) continue;
            if (h.size() < 3 || h[h.size() - 2] != '_' || (h.back() != '1' && h.back() != '2'))
                throw std::invalid_argument(path.string() + ": column '" + h + "' is not <region>_1 or <region>_2");
            (h.back() == '1' ? s.thickness_1 : s.thickness_2)[h.substr(0, h.size() - 2)] = parse_double(r[c], h);
        }
        rows.push_back(std::move(s));
    }
    return rows;
}

void write_long_csv(const std::vector<LongSessionRow> &rows, const std::vector<std::string> &regions,
                    const std::filesystem::path &path) {
    CsvTable t;
    t.header = {"subject_id", "scan_date_1", "scan_date_2"};
    for (const std::string &g : regions) {
        t.header.push_back(g + "_1");
        t.header.push_back(g + "_2");
    }
    for (const LongSessionRow &s : rows) {
        std::vector<std::string> r{s.subject_id, s.scan_date_1, s.scan_date_2};
        for (const std::string &g : regions) {
            auto a = s.thickness_1.find(g), b = s.thickness_2.find(g);
            r.push_back(a == s.thickness_1.end() ? "" : format_double(a->second));
            r.push_back(b == s.thickness_2.end() ? "" : format_double(b->second));
        }
        t.rows.push_back(std::move(r));
    }
    write_csv(t, path);
}

std::vector<LongPairRow> to_pairs(const std::vector<LongSessionRow> &rows) {
    std::vector<LongPairRow> out;
    for (const LongSessionRow &s : rows)
        out.push_back(make_long_pair(s.subject_id, days_between(s.scan_date_1, s.scan_date_2), s.thickness_1,
                                     s.thickness_2));
    return out;
}

} // namespace isomtl
