// biostats.h - cross-sectional group tests and longitudinal consistency.

#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace isomtl {

enum class Group { ACN, APlusMCI };

Group parse_group(const std::string &s); // "A-CN" / "A+MCI" (also "CN", "MCI")
std::string group_name(Group g);

struct StudyRow {
    std::string subject_id;
    Group group = Group::ACN;
    double age = 0.0;
    std::map<std::string, double> thickness; // region -> mm
};

struct GLMResult {
    double beta_group = 0.0; // mm, A+MCI minus A-CN at equal age
    double t_stat = 0.0;
    double p_one_sided = 1.0; // alternative beta_group < 0
    double auc = 0.5;
    int df = 0;
    size_t n_cn = 0, n_mci = 0;
};

/// OLS of thickness on intercept, group (A+MCI = 1) and age. Rows lacking the
/// region are skipped. Throws on < 3 rows per group or a rank-deficient design.
GLMResult glm_group_difference(std::span<const StudyRow> rows, const std::string &region);

/// Mann-Whitney AUC = P(thickness_CN > thickness_MCI) + P(tie) / 2, by midranks.
double auc(std::span<const StudyRow> rows, const std::string &region);
double auc(std::span<const double> cn, std::span<const double> mci);

/// delta * 365 / interval_days.
double annualize(double delta_mm, int64_t interval_days);

struct LongPairRow {
    std::string subject_id;
    int64_t interval_days = 0;
    std::map<std::string, double> delta; // region -> annualized change, mm per 365 days
};

/// Pair from two sessions: raw thickness difference (second - first) annualized.
LongPairRow make_long_pair(std::string subject_id, int64_t interval_days,
                           const std::map<std::string, double> &first, const std::map<std::string, double> &second);

struct Consistency {
    double std = 0.0;     // sample standard deviation of annualized deltas
    double abs_sum = 0.0; // sum of |annualized delta|
    size_t n = 0;
};

/// Throws with fewer than two pairs carrying the region.
Consistency longitudinal_consistency(std::span<const LongPairRow> pairs, const std::string &region);

/// One-sample Kolmogorov-Smirnov test of U(0,1): statistic and asymptotic p-value.
struct KsResult {
    double d = 0.0;
    double p = 1.0;
};
KsResult ks_uniform(std::span<const double> samples);

/// Table cell formats: p below 1e-3 as 7.03E-06, otherwise two significant
/// digits (0.0057, 0.74); AUC / Std / AbsSum with two decimals.
std::string format_p(double p);
std::string format_fixed2(double v);

struct CrossColumn {
    std::string title; // e.g. "Anisotropic T2w"
    std::map<std::string, GLMResult> by_region;
};
struct LongColumn {
    std::string title;
    std::map<std::string, Consistency> by_region;
};

/// Tab-separated tables: one row per region, a (p-value, AUC) or (Std,
/// AbsSum) pair per column group. Regions print in the given order.
std::string render_cross_table(std::span<const CrossColumn> cols, std::span<const std::string> regions);
std::string render_long_table(std::span<const LongColumn> cols, std::span<const std::string> regions);

} // namespace isomtl
