// table_io.h - CSV tables: generic reader/writer, manifests, study tables.

#pragma once

#include "isomtl/biostats.h"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace isomtl {

struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    std::optional<size_t> find(const std::string &column) const;
    /// Throws std::invalid_argument naming the missing column.
    size_t col(const std::string &column) const;
};

/// RFC 4180 style: commas, optional double quotes, "" escapes a quote.
CsvTable parse_csv(const std::string &text);
CsvTable read_csv(const std::filesystem::path &path);
std::string format_csv(const CsvTable &t);
void write_csv(const CsvTable &t, const std::filesystem::path &path);

/// Shortest decimal that round-trips the double.
std::string format_double(double v);
double parse_double(const std::string &s, const std::string &what);

/// Days from a to b, both YYYY-MM-DD.
int64_t days_between(const std::string &a, const std::string &b);
std::string add_days(const std::string &date, int64_t days);

struct ManifestRow {
    std::string subject_id;
    int session = 1;
    std::string role; // exvivo | atlas | study
    std::string group;
    double age = 0.0;
    std::string scan_date;
    // Paths are stored relative to the manifest and resolved on read.
    std::filesystem::path t2, t1, labels, truth;
};

std::vector<ManifestRow> read_manifest(const std::filesystem::path &path);
void write_manifest(const std::vector<ManifestRow> &rows, const std::filesystem::path &path);

/// Cross-sectional table: subject_id, group, age, one column per region.
std::vector<StudyRow> read_study_csv(const std::filesystem::path &path);
void write_study_csv(const std::vector<StudyRow> &rows, const std::vector<std::string> &regions,
                     const std::filesystem::path &path);

struct LongSessionRow {
    std::string subject_id;
    std::string scan_date_1, scan_date_2;
    std::map<std::string, double> thickness_1, thickness_2;
};

/// Longitudinal table: subject_id, scan_date_1, scan_date_2, then <region>_1, <region>_2 per region.
std::vector<LongSessionRow> read_long_csv(const std::filesystem::path &path);
void write_long_csv(const std::vector<LongSessionRow> &rows, const std::vector<std::string> &regions,
                    const std::filesystem::path &path);
/// Annualized deltas (second minus first session) per pair.
std::vector<LongPairRow> to_pairs(const std::vector<LongSessionRow> &rows);

} // namespace isomtl
