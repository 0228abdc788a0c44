#include "mmoe/gw.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

namespace mmoe {

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EVec = Eigen::VectorXd;

double MetricSpace::median_distance() const {
    std::vector<double> off;
    off.reserve(static_cast<size_t>(n * (n - 1)));
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < n; ++j)
            if (i != j) off.push_back(d(i, j));
    if (off.empty()) return 0.0;
    std::nth_element(off.begin(), off.begin() + static_cast<int64_t>(off.size()) / 2, off.end());
    return off[off.size() / 2];
}

void MetricSpace::validate() const {
    if (n < 1 || static_cast<int64_t>(dist.size()) != n * n || static_cast<int64_t>(weights.size()) != n)
        throw ShapeError("metric space: inconsistent sizes");
    double wsum = 0.0;
    for (double w : weights) {
        if (w < 0.0) throw ValueError("metric space: negative weight");
        wsum += w;
    }
    if (std::abs(wsum - 1.0) > 1e-9) throw ValueError("metric space: weights must sum to 1");
    for (int64_t i = 0; i < n; ++i) {
        if (d(i, i) != 0.0) throw ValueError("metric space: nonzero diagonal");
        for (int64_t j = i + 1; j < n; ++j) {
            if (d(i, j) < 0.0) throw ValueError("metric space: negative distance");
            if (std::abs(d(i, j) - d(j, i)) > 1e-12) throw ValueError("metric space: asymmetric distances");
        }
    }
}

MetricSpace MetricSpace::uniform(int64_t n) {
    MetricSpace s;
    s.n = n;
    s.dist.assign(static_cast<size_t>(n * n), 0.0);
    s.weights.assign(static_cast<size_t>(n), 1.0 / static_cast<double>(n));
    return s;
}

MetricSpace pairwise_distance_matrix(const Tensor& vectors, DistanceMetric metric) {
    const int64_t n = vectors.rows(), d = vectors.cols();
    if (n < 2) throw ValueError("pairwise_distance_matrix: need at least 2 points");
    MetricSpace space = MetricSpace::uniform(n);
    if (metric == DistanceMetric::Cosine) {
        std::vector<double> norms(static_cast<size_t>(n));
        for (int64_t i = 0; i < n; ++i) {
            double s = 0.0;
            for (int64_t c = 0; c < d; ++c) s += vectors.at(i, c) * vectors.at(i, c);
            norms[static_cast<size_t>(i)] = std::sqrt(s);
            if (norms[static_cast<size_t>(i)] == 0.0)
                throw ValueError("pairwise_distance_matrix: zero-norm vector at row " + std::to_string(i) +
                                 " under cosine metric");
        }
        for (int64_t i = 0; i < n; ++i)
            for (int64_t j = i + 1; j < n; ++j) {
                double dot = 0.0;
                for (int64_t c = 0; c < d; ++c) dot += vectors.at(i, c) * vectors.at(j, c);
                const double v = 1.0 - dot / (norms[static_cast<size_t>(i)] * norms[static_cast<size_t>(j)]);
                space.d(i, j) = space.d(j, i) = std::max(v, 0.0);
            }
    } else {
        for (int64_t i = 0; i < n; ++i)
            for (int64_t j = i + 1; j < n; ++j) {
                double s = 0.0;
                for (int64_t c = 0; c < d; ++c) {
                    const double diff = vectors.at(i, c) - vectors.at(j, c);
                    s += diff * diff;
                }
                space.d(i, j) = space.d(j, i) = std::sqrt(s);
            }
    }
    return space;
}

double Coupling::max_marginal_violation() const {
    double worst = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        double s = 0.0;
        for (int64_t j = 0; j < m; ++j) s += at(i, j);
        worst = std::max(worst, std::abs(s - p[static_cast<size_t>(i)]));
    }
    for (int64_t j = 0; j < m; ++j) {
        double s = 0.0;
        for (int64_t i = 0; i < n; ++i) s += at(i, j);
        worst = std::max(worst, std::abs(s - q[static_cast<size_t>(j)]));
    }
    return worst;
}

void Coupling::validate(double tol) const {
    if (static_cast<int64_t>(gamma.size()) != n * m) throw ShapeError("coupling: bad size");
    for (double g : gamma)
        if (g < 0.0) throw ValueError("coupling: negative entry");
    if (max_marginal_violation() > tol)
        throw ValueError("coupling: marginal violation " + std::to_string(max_marginal_violation()) +
                         " exceeds " + std::to_string(tol));
}

namespace {

// One marginal-scaling pass in the log domain. Returns the plan implied by
// the duals: γ_ij = exp((f_i + g_j − C_ij)/ε) · p_i q_j. Updates are
// overrelaxed (θ = 1.5) to speed up the linear tail at small ε.
struct LogSinkhorn {
    static constexpr double kTheta = 1.5;
    const EMat& cost;
    const EVec& logp, &logq;
    double eps;
    EVec f, g;

    LogSinkhorn(const EMat& c, const EVec& lp, const EVec& lq, double e)
        : cost(c), logp(lp), logq(lq), eps(e), f(EVec::Zero(c.rows())), g(EVec::Zero(c.cols())) {}

    void iterate(double theta = kTheta) {
        // f_i = -eps·LSE_j((g_j - C_ij)/eps + logq_j) ; row update enforces p.
        for (Eigen::Index i = 0; i < cost.rows(); ++i) {
            double mx = -std::numeric_limits<double>::infinity();
            for (Eigen::Index j = 0; j < cost.cols(); ++j)
                mx = std::max(mx, (g(j) - cost(i, j)) / eps + logq(j));
            double s = 0.0;
            for (Eigen::Index j = 0; j < cost.cols(); ++j)
                s += std::exp((g(j) - cost(i, j)) / eps + logq(j) - mx);
            const double target = -eps * (mx + std::log(s));
            f(i) += theta * (target - f(i));
        }
        for (Eigen::Index j = 0; j < cost.cols(); ++j) {
            double mx = -std::numeric_limits<double>::infinity();
            for (Eigen::Index i = 0; i < cost.rows(); ++i)
                mx = std::max(mx, (f(i) - cost(i, j)) / eps + logp(i));
            double s = 0.0;
            for (Eigen::Index i = 0; i < cost.rows(); ++i)
                s += std::exp((f(i) - cost(i, j)) / eps + logp(i) - mx);
            const double target = -eps * (mx + std::log(s));
            g(j) += theta * (target - g(j));
        }
    }

    EMat plan() const {
        EMat out(cost.rows(), cost.cols());
        for (Eigen::Index i = 0; i < cost.rows(); ++i)
            for (Eigen::Index j = 0; j < cost.cols(); ++j)
                out(i, j) = std::exp((f(i) + g(j) - cost(i, j)) / eps + logp(i) + logq(j));
        return out;
    }
};

double marginal_violation(const EMat& plan, const EVec& p, const EVec& q) {
    const EVec rs = plan.rowwise().sum(), cs = plan.colwise().sum();
    return std::max((rs - p).cwiseAbs().maxCoeff(), (cs - q).cwiseAbs().maxCoeff());
}

// Entropy term matching the Sinkhorn objective ⟨C,γ⟩ + ε·Σ γ(log γ − 1).
double entropy_term(const EMat& plan) {
    double h = 0.0;
    for (Eigen::Index i = 0; i < plan.rows(); ++i)
        for (Eigen::Index j = 0; j < plan.cols(); ++j) {
            const double g = plan(i, j);
            if (g > 0.0) h += g * (std::log(g) - 1.0);
        }
    return h;
}

// Projects an almost-feasible plan onto the transport polytope: cap row and
// column sums at their targets, then spread the leftover mass with a
// nonnegative rank-one term. Marginals come out exact to round-off.
void round_to_feasible(EMat& plan, const EVec& p, const EVec& q) {
    for (Eigen::Index i = 0; i < plan.rows(); ++i) {
        const double r = plan.row(i).sum();
        if (r > p(i) && r > 0.0) plan.row(i) *= p(i) / r;
    }
    for (Eigen::Index j = 0; j < plan.cols(); ++j) {
        const double c = plan.col(j).sum();
        if (c > q(j) && c > 0.0) plan.col(j) *= q(j) / c;
    }
    const EVec err_r = (p - plan.rowwise().sum().matrix()).cwiseMax(0.0);
    const EVec err_c = (q - plan.colwise().sum().transpose().matrix()).cwiseMax(0.0);
    const double total = err_r.sum();
    if (total > 0.0) plan += (err_r * err_c.transpose()) / total;
    plan = plan.cwiseMax(0.0);
}

}  // namespace

GwResult entropic_gw_coupling(const MetricSpace& src, const MetricSpace& dst, const GwOptions& opts) {
    src.validate();
    dst.validate();
    const int64_t n = src.n, m = dst.n;

    // Both sides are rescaled to unit median distance, so the alignment is
    // shape-based and epsilon has a stable meaning across inputs. The
    // reported objective is on the rescaled problem.
    const double med_src = src.median_distance(), med_dst = dst.median_distance();
    EMat d1 = Eigen::Map<const EMat>(src.dist.data(), n, n);
    EMat d2 = Eigen::Map<const EMat>(dst.dist.data(), m, m);
    if (med_src > 0.0) d1 /= med_src;
    if (med_dst > 0.0) d2 /= med_dst;

    double eps = opts.epsilon;
    if (eps <= 0.0) {
        const double med = m > 1 && med_dst > 0.0 ? 1.0 : 0.0;  // unit after rescale
        eps = opts.epsilon_scale * std::max(med * med, 1e-2);
    }

    Eigen::Map<const EVec> p(src.weights.data(), n);
    Eigen::Map<const EVec> q(dst.weights.data(), m);
    const EVec logp = p.array().log().matrix();
    const EVec logq = q.array().log().matrix();

    // constC_ij = Σ_k D1²_ik p_k + Σ_l D2²_jl q_l ; the γ-independent part of
    // the square-loss tensor product given exact marginals.
    const EVec c1 = (d1.array().square().matrix() * p);
    const EVec c2 = (d2.array().square().matrix() * q);
    EMat const_c = c1 * EVec::Ones(m).transpose() + EVec::Ones(n) * c2.transpose();

    EMat plan = p * q.transpose();  // independent coupling
    auto unreg_objective = [&](const EMat& g) {
        const EMat cross = d1 * g * d2;  // D2 symmetric
        double obj = 0.0;
        for (Eigen::Index i = 0; i < n; ++i)
            for (Eigen::Index j = 0; j < m; ++j) obj += (const_c(i, j) - 2.0 * cross(i, j)) * g(i, j);
        return obj;
    };

    GwResult res;
    res.epsilon_used = eps;
    double prev_reg = unreg_objective(plan) + eps * entropy_term(plan);
    res.reg_objective_trace.push_back(prev_reg);

    EVec f_warm = EVec::Zero(n), g_warm = EVec::Zero(m);
    EMat cost(n, m);
    for (int outer = 0; outer < opts.max_outer; ++outer) {
        cost = const_c - 2.0 * (d1 * plan * d2);
        // Anneal epsilon toward the target: plain Sinkhorn mixes too slowly
        // for small regularization, but duals carry over between levels.
        EVec f = f_warm, g = g_warm;
        for (double level = std::max(eps, 0.5); level > eps; level *= 0.5) {
            LogSinkhorn warm(cost, logp, logq, level);
            warm.f = f;
            warm.g = g;
            for (int it = 0; it < 8; ++it) warm.iterate();
            f = warm.f;
            g = warm.g;
        }
        LogSinkhorn sk(cost, logp, logq, eps);
        sk.f = f;
        sk.g = g;
        EMat candidate = sk.plan();
        for (int it = 0; it < opts.max_sinkhorn; ++it) {
            sk.iterate();
            candidate = sk.plan();
            if (marginal_violation(candidate, p, q) < opts.marginal_tol) break;
        }
        sk.iterate(1.0);  // plain polish pass
        candidate = sk.plan();
        const double violation = marginal_violation(candidate, p, q);
        if (violation > 1e-4)
            throw NumericError("entropic_gw_coupling: Sinkhorn failed to satisfy marginals (violation " +
                               std::to_string(violation) + "); try a larger epsilon");
        round_to_feasible(candidate, p, q);
        f_warm = sk.f;
        g_warm = sk.g;

        const double reg = unreg_objective(candidate) + eps * entropy_term(candidate);
        if (reg > prev_reg + 1e-9) break;  // never accept an ascent step
        const double change = (candidate - plan).cwiseAbs().sum();
        plan = candidate;
        prev_reg = reg;
        res.reg_objective_trace.push_back(reg);
        res.outer_iterations = outer + 1;
        if (change < opts.tol) break;
    }

    res.coupling.n = n;
    res.coupling.m = m;
    res.coupling.gamma.assign(plan.data(), plan.data() + n * m);
    res.coupling.p.assign(src.weights.begin(), src.weights.end());
    res.coupling.q.assign(dst.weights.begin(), dst.weights.end());
    res.coupling.validate(1e-6);
    res.objective = unreg_objective(plan);
    return res;
}

Tensor barycentric_project(const Coupling& coupling, const Tensor& source_rows) {
    if (source_rows.rows() != coupling.n)
        throw ShapeError("barycentric_project: coupling rows " + std::to_string(coupling.n) + " vs source rows " +
                         std::to_string(source_rows.rows()));
    const int64_t d = source_rows.cols();
    Tensor out = Tensor::zeros({coupling.m, d}, false);
    for (int64_t y = 0; y < coupling.m; ++y) {
        double mass = 0.0;
        for (int64_t x = 0; x < coupling.n; ++x) mass += coupling.at(x, y);
        if (mass <= 0.0)
            throw ValueError("barycentric_project: column " + std::to_string(y) + " carries zero mass");
        for (int64_t x = 0; x < coupling.n; ++x) {
            const double w = coupling.at(x, y) / mass;
            if (w == 0.0) continue;
            for (int64_t c = 0; c < d; ++c) out.at(y, c) += w * source_rows.at(x, c);
        }
    }
    return out;
}

void write_coupling(const Coupling& c, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw IoError("write_coupling: cannot open " + path);
    f << c.n << " " << c.m << "\n";
    f.precision(17);
    for (int64_t i = 0; i < c.n; ++i) {
        for (int64_t j = 0; j < c.m; ++j) f << (j ? " " : "") << c.at(i, j);
        f << "\n";
    }
    if (!f) throw IoError("write_coupling: write failed for " + path);
}

}  // namespace mmoe
