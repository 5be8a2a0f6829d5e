#include "isomtl/biostats.h"

#include <Eigen/Dense>
#include <boost/math/distributions/students_t.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace isomtl {

Group parse_group(const std::string &s) {
    if (s == "A-CN" || s == "CN" || s == "A-CU") return Group::ACN;
    if (s == "A+MCI" || s == "MCI") return Group::APlusMCI;
    throw std::invalid_argument("unknown group '" + s + "'");
}

std::string group_name(Group g) { return g == Group::ACN ? "A-CN" : "A+MCI"; }

GLMResult glm_group_difference(std::span<const StudyRow> rows, const std::string &region) {
    std::vector<const StudyRow *> use;
    for (const StudyRow &r : rows)
        if (r.thickness.count(region)) use.push_back(&r);
    GLMResult out;
    for (const StudyRow *r : use) (r->group == Group::APlusMCI ? out.n_mci : out.n_cn)++;
    if (out.n_cn < 3 || out.n_mci < 3)
        throw std::invalid_argument("glm: region " + region + " needs at least 3 rows per group");

    const Eigen::Index n = static_cast<Eigen::Index>(use.size());
    Eigen::MatrixXd X(n, 3);
    Eigen::VectorXd y(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        const StudyRow &r = *use[static_cast<size_t>(i)];
        if (!(r.age > 0)) throw std::invalid_argument("glm: age must be positive (" + r.subject_id + ")");
        X(i, 0) = 1.0;
        X(i, 1) = r.group == Group::APlusMCI ? 1.0 : 0.0;
        X(i, 2) = r.age;
        y(i) = r.thickness.at(region);
    }
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(X);
    qr.setThreshold(1e-10);
    if (qr.rank() < 3) throw std::invalid_argument("glm: rank-deficient design for region " + region);

    const Eigen::Vector3d beta = qr.solve(y);
    const Eigen::VectorXd resid = y - X * beta;
    out.df = static_cast<int>(n - 3);
    const Eigen::Matrix3d xtx_inv = (X.transpose() * X).inverse();
    const double sigma2 = out.df > 0 ? resid.squaredNorm() / out.df : 0.0;
    const double se = std::sqrt(sigma2 * xtx_inv(1, 1));
    out.beta_group = beta(1);
    if (se > 0 && out.df > 0) {
        out.t_stat = beta(1) / se;
        out.p_one_sided = boost::math::cdf(boost::math::students_t(out.df), out.t_stat);
    } else {
        // Perfect fit: the sign of the effect decides.
        out.t_stat = beta(1) < 0 ? -std::numeric_limits<double>::infinity()
                                 : (beta(1) > 0 ? std::numeric_limits<double>::infinity() : 0.0);
        out.p_one_sided = beta(1) < 0 ? 0.0 : (beta(1) > 0 ? 1.0 : 0.5);
    }
    out.auc = auc(rows, region);
    return out;
}

double auc(std::span<const double> cn, std::span<const double> mci) {
    if (cn.empty() || mci.empty()) throw std::invalid_argument("auc: both groups must be non-empty");
    std::vector<std::pair<double, int>> all;
    for (double v : cn) all.push_back({v, 0});
    for (double v : mci) all.push_back({v, 1});
    std::sort(all.begin(), all.end(), [](const auto &a, const auto &b) { return a.first < b.first; });
    double rank_sum_cn = 0;
    for (size_t i = 0; i < all.size();) {
        size_t j = i;
        while (j < all.size() && all[j].first == all[i].first) ++j;
        const double mid = 0.5 * static_cast<double>(i + 1 + j); // mean of ranks i+1..j
        for (size_t k = i; k < j; ++k)
            if (all[k].second == 0) rank_sum_cn += mid;
        i = j;
    }
    const double n1 = static_cast<double>(cn.size()), n2 = static_cast<double>(mci.size());
    return (rank_sum_cn - n1 * (n1 + 1) / 2) / (n1 * n2);
}

double auc(std::span<const StudyRow> rows, const std::string &region) {
    std::vector<double> cn, mci;
    for (const StudyRow &r : rows) {
        auto it = r.thickness.find(region);
        if (it == r.thickness.end()) continue;
        (r.group == Group::ACN ? cn : mci).push_back(it->second);
    }
    return auc(cn, mci);
}

double annualize(double delta_mm, int64_t interval_days) {
    if (interval_days <= 0) throw std::invalid_argument("annualize: interval must be positive");
    return delta_mm * 365.0 / static_cast<double>(interval_days);
}

LongPairRow make_long_pair(std::string subject_id, int64_t interval_days, const std::map<std::string, double> &first,
                           const std::map<std::string, double> &second) {
    LongPairRow row{std::move(subject_id), interval_days, {}};
    for (const auto &[region, t1] : first) {
        auto it = second.find(region);
        if (it != second.end()) row.delta[region] = annualize(it->second - t1, interval_days);
    }
    return row;
}

Consistency longitudinal_consistency(std::span<const LongPairRow> pairs, const std::string &region) {
    std::vector<double> d;
    for (const LongPairRow &p : pairs) {
        if (p.interval_days <= 0) throw std::invalid_argument("longitudinal pair with non-positive interval");
        auto it = p.delta.find(region);
        if (it != p.delta.end()) d.push_back(it->second);
    }
    if (d.size() < 2) throw std::invalid_argument("longitudinal_consistency: region " + region + " needs two pairs");
    Consistency c;
    c.n = d.size();
    const double mean = std::accumulate(d.begin(), d.end(), 0.0) / static_cast<double>(d.size());
    double ss = 0;
    for (double x : d) {
        ss += (x - mean) * (x - mean);
        c.abs_sum += std::abs(x);
    }
    c.std = std::sqrt(ss / static_cast<double>(d.size() - 1));
    return c;
}

KsResult ks_uniform(std::span<const double> samples) {
    if (samples.empty()) throw std::invalid_argument("ks_uniform: no samples");
    std::vector<double> s(samples.begin(), samples.end());
    std::sort(s.begin(), s.end());
    const double n = static_cast<double>(s.size());
    KsResult r;
    for (size_t i = 0; i < s.size(); ++i) {
        const double x = std::clamp(s[i], 0.0, 1.0);
        r.d = std::max({r.d, static_cast<double>(i + 1) / n - x, x - static_cast<double>(i) / n});
    }
    // Kolmogorov limit distribution with Stephens' small-sample correction.
    const double sn = std::sqrt(n);
    const double lambda = (sn + 0.12 + 0.11 / sn) * r.d;
    if (lambda < 0.2) return {r.d, 1.0};
    double q = 0;
    for (int k = 1; k <= 100; ++k) {
        const double term = std::exp(-2.0 * k * k * lambda * lambda);
        q += (k % 2 ? 2.0 : -2.0) * term;
        if (term < 1e-16) break;
    }
    r.p = std::clamp(q, 0.0, 1.0);
    return r;
}

std::string format_p(double p) {
    char buf[32];
    if (p < 1e-3)
        std::snprintf(buf, sizeof buf, "%.2E", p);
    else
        std::snprintf(buf, sizeof buf, "%.2g", p);
    return buf;
}

std::string format_fixed2(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return buf;
}

namespace {

template <class Col, class Cell>
std::string render(std::span<const Col> cols, std::span<const std::string> regions, const char *m1, const char *m2,
                   Cell cell) {
    std::ostringstream os;
    os << "Space";
    for (const Col &c : cols) os << '\t' << c.title << '\t';
    os << "\nMeasures";
    for (size_t i = 0; i < cols.size(); ++i) os << '\t' << m1 << '\t' << m2;
    os << '\n';
    for (const std::string &r : regions) {
        os << r;
        for (const Col &c : cols) {
            auto it = c.by_region.find(r);
            if (it == c.by_region.end())
                os << "\t-\t-";
            else
                os << '\t' << cell(it->second);
        }
        os << '\n';
    }
    return os.str();
}

} // namespace

std::string render_cross_table(std::span<const CrossColumn> cols, std::span<const std::string> regions) {
    return render(cols, regions, "p-value", "AUC",
                  [](const GLMResult &g) { return format_p(g.p_one_sided) + "\t" + format_fixed2(g.auc); });
}

std::string render_long_table(std::span<const LongColumn> cols, std::span<const std::string> regions) {
    return render(cols, regions, "Std.", "AbsSum. (mm)",
                  [](const Consistency &c) { return format_fixed2(c.std) + "\t" + format_fixed2(c.abs_sum); });
}

} // namespace isomtl
