#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mmoe/tensor.hpp"

namespace mmoe {

// Finite metric space: symmetric nonnegative distances with zero diagonal and
// a probability vector over the points.
struct MetricSpace {
    int64_t n = 0;
    std::vector<double> dist;     // row-major n×n
    std::vector<double> weights;  // sums to 1

    double d(int64_t i, int64_t j) const { return dist[static_cast<size_t>(i * n + j)]; }
    double& d(int64_t i, int64_t j) { return dist[static_cast<size_t>(i * n + j)]; }
    double median_distance() const;  // over off-diagonal entries
    void validate() const;

    static MetricSpace uniform(int64_t n);
};

enum class DistanceMetric { Euclidean, Cosine };

// Pairwise distances over the rows of `vectors` [n, d]. Cosine distance is
// 1 − cos(u,v) and rejects zero-norm rows.
MetricSpace pairwise_distance_matrix(const Tensor& vectors, DistanceMetric metric);

// Transport plan between two point sets with prescribed marginals.
struct Coupling {
    int64_t n = 0, m = 0;
    std::vector<double> gamma;  // row-major n×m, entries >= 0
    std::vector<double> p, q;   // target marginals

    double at(int64_t i, int64_t j) const { return gamma[static_cast<size_t>(i * m + j)]; }
    double max_marginal_violation() const;
    void validate(double tol = 1e-6) const;
};

struct GwOptions {
    double epsilon = 0.0;          // <= 0: auto = epsilon_scale · median(dst)² after rescaling
    double epsilon_scale = 5e-3;
    int max_outer = 200;
    int max_sinkhorn = 500;
    double tol = 1e-7;             // L1 change of the coupling between outer iterations
    double marginal_tol = 1e-7;    // Sinkhorn stopping criterion (plans are rounded feasible)
};

struct GwResult {
    Coupling coupling;
    double objective = 0.0;                   // unregularized square-loss value
    double epsilon_used = 0.0;
    int outer_iterations = 0;
    std::vector<double> reg_objective_trace;  // one entry per accepted outer iteration
};

// Square-loss entropic Gromov-Wasserstein: alternates between building the
// pseudo-cost from the current coupling and an entropic transport solve
// (log-domain Sinkhorn) against it, starting from the independent coupling
// p·qᵀ. Both distance matrices are rescaled to unit median first, so the
// alignment is shape-based; the reported objective refers to the rescaled
// problem. Every accepted plan is rounded onto the transport polytope, so
// marginals hold to round-off. An outer step that would raise the
// regularized objective beyond 1e-9 slack is rejected and iteration stops,
// so the recorded trace is monotone.
GwResult entropic_gw_coupling(const MetricSpace& src, const MetricSpace& dst, const GwOptions& opts = {});

// Weighted least-squares placement of the new rows. For fixed γ the objective
//   Σ_x Σ_y γ(x,y)·‖E_t(x) − E(y)‖²
// is separable per target row; setting its gradient to zero gives
//   E(y) = (Σ_x γ(x,y)·E_t(x)) / (Σ_x γ(x,y)),
// the mass-weighted barycenter implemented here. A zero column mass has no
// minimizer and is reported as an error naming the starved column.
Tensor barycentric_project(const Coupling& coupling, const Tensor& source_rows);

// Text export: "n m" header then the n rows of γ.
void write_coupling(const Coupling& c, const std::string& path);

}  // namespace mmoe
