#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "qlcb/dataset.hpp"
#include "qlcb/errors.hpp"
#include "qlcb/parallel.hpp"

namespace qlcb {

// Entries of the pessimism vector above this are counted as genuinely
// optimistic rather than floating-point noise around zero.
inline constexpr double kOptimismThreshold = 1e-9;

enum class LcbMethod { Independent, Shared };

inline std::string method_name(LcbMethod m) {
    return m == LcbMethod::Independent ? "independent" : "shared";
}

/// Linear-kernel Gram pair and the similarity matrix C that propagates values
/// from dataset state-actions to next-state policy-actions.
struct KernelSystem {
    Matrix gram_xx; // Theta(X, X)
    Matrix gram_px; // Theta(X', X)
    Matrix c;       // gram_px * (gram_xx + ridge I)^{-1}
    double ridge = 0.0;
};

struct LcbReport {
    LcbMethod method = LcbMethod::Independent;
    int horizon_t = 0;
    Vector mean_term;
    Vector pessimism_term;
    Vector q_lcb;
    std::vector<Eigen::Index> optimistic_rows;
    double spectral_gamma_c = 0.0;
};

struct SweepRecord {
    std::uint64_t seed = 0;
    Eigen::Index rows = 0;
    double gamma_c_norm = std::numeric_limits<double>::quiet_NaN();
    bool retained = false;
    double max_pessimism_entry = std::numeric_limits<double>::quiet_NaN();
    bool optimistic = false;
};

struct SweepOutcome {
    int n_seeds = 0;
    int n_retained = 0;
    int n_optimistic = 0;
    std::vector<SweepRecord> per_seed;
};

/// Linear kernel: Theta(A, B) = A B^T.
inline Matrix linear_gram(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.cols()) throw DimensionMismatch("linear_gram: column counts differ");
    return a * b.transpose();
}

/// Builds the Gram matrices and solves C (gram_xx + ridge I) = gram_px via a
/// symmetric factorization; the explicit inverse is never formed.
inline KernelSystem build_kernel_system(const OfflineDataset& ds, double ridge) {
    ds.validate();
    if (ridge < 0.0) throw ConfigError("ridge must be >= 0");
    KernelSystem sys;
    sys.ridge = ridge;
    sys.gram_xx = linear_gram(ds.x, ds.x);
    sys.gram_px = linear_gram(ds.xp, ds.x);
    Matrix reg = sys.gram_xx;
    reg.diagonal().array() += ridge;

    Eigen::LDLT<Matrix> ldlt(reg);
    if (ldlt.info() != Eigen::Success)
        throw SingularGram("gram factorization failed (ridge too small for rank-deficient data?)");
    sys.c = ldlt.solve(sys.gram_px.transpose()).transpose();

    const double resid = (sys.c * reg - sys.gram_px).norm();
    const double scale = std::max(1.0, sys.gram_px.norm());
    if (!(resid <= 1e-8 * scale))
        throw SingularGram("gram system numerically singular (residual " + format_double(resid) + ")");
    return sys;
}

/// Sum_{k=0..t} gamma^k C^k, accumulated as B <- I + gamma C B. No inversion.
inline Matrix geometric_backup(const Matrix& c, double gamma, int t) {
    if (c.rows() != c.cols()) throw DimensionMismatch("geometric_backup: C must be square");
    if (t < 0) throw ConfigError("geometric_backup: t must be >= 0");
    if (gamma < 0.0 || gamma >= 1.0) throw ConfigError("geometric_backup: gamma must lie in [0, 1)");
    const Matrix eye = Matrix::Identity(c.rows(), c.cols());
    Matrix acc = eye;
    for (int k = 0; k < t; ++k) acc = eye + gamma * (c * acc);
    return acc;
}

/// Largest singular value via power iteration on C^T C (Rayleigh estimate).
inline double spectral_norm(const Matrix& c, double tol = 1e-12, int max_iter = 20000) {
    if (c.rows() != c.cols()) throw DimensionMismatch("spectral_norm: C must be square");
    const Eigen::Index n = c.rows();
    if (n == 0) return 0.0;
    Rng rng(0x5bec7a11u); // fixed start vector keeps the estimate deterministic
    Vector v(n);
    for (Eigen::Index i = 0; i < n; ++i) v(i) = rng.normal();
    v.normalize();
    double prev = -1.0;
    for (int it = 0; it < max_iter; ++it) {
        Vector w = c.transpose() * (c * v);
        const double lambda = v.dot(w); // Rayleigh quotient for C^T C
        const double sigma = std::sqrt(std::max(lambda, 0.0));
        const double wn = w.norm();
        if (wn == 0.0) return 0.0; // v in the null space: C v = 0
        v = w / wn;
        if (it > 0 && std::abs(sigma - prev) <= tol * std::max(sigma, 1e-300)) return sigma;
        prev = sigma;
    }
    throw NoConvergence("spectral_norm: power iteration did not converge");
}

/// sqrt(E[(Q0(X') - C Q0(X))^2]) for the linear model with theta ~ N(0, I):
/// exactly the row norms of Xp - C X.
inline Vector init_sqdev(const OfflineDataset& ds, const Matrix& c) {
    if (c.rows() != ds.rows() || c.cols() != ds.rows())
        throw DimensionMismatch("init_sqdev: C shape does not match dataset");
    return (ds.xp - c * ds.x).rowwise().norm();
}

namespace detail {

inline double check_horizon(const Matrix& c, double gamma, int t) {
    if (t < 0) throw ConfigError("horizon t must be >= 0");
    if (gamma < 0.0 || gamma >= 1.0) throw ConfigError("gamma must lie in [0, 1)");
    const double sigma = spectral_norm(c);
    if (gamma * sigma >= 1.0)
        throw DivergentHorizon("gamma * ||C|| = " + format_double(gamma * sigma) + " >= 1");
    return sigma;
}

} // namespace detail

/// Closed-form LCB estimate on X' after t+1 evaluation iterations. The
/// geometric remainder of order (gamma ||C||)^{t+1} is dropped; the iterative
/// oracle below retains it.
///
/// Both methods share the backed-up mean (sum_k gamma^k C^k) C R. Independent
/// applies the backup before the elementwise deviation norm, Shared applies it
/// after, which is what allows Shared pessimism entries to turn positive.
inline LcbReport lcb_closed_form(const KernelSystem& sys, const OfflineDataset& ds, double gamma, int t,
                                 LcbMethod method) {
    const double sigma = detail::check_horizon(sys.c, gamma, t);
    const Matrix& c = sys.c;

    LcbReport rep;
    rep.method = method;
    rep.horizon_t = t;
    rep.spectral_gamma_c = gamma * sigma;

    Vector mean = c * ds.r;
    Vector term = mean;
    const Matrix dev = ds.xp - c * ds.x;
    Matrix dev_acc, dev_term;
    Vector a_acc, a_term;
    if (method == LcbMethod::Independent) {
        dev_acc = dev;
        dev_term = dev;
    } else {
        a_acc = dev.rowwise().norm();
        a_term = a_acc;
    }
    for (int k = 0; k < t; ++k) {
        term = gamma * (c * term);
        mean += term;
        if (method == LcbMethod::Independent) {
            dev_term = gamma * (c * dev_term);
            dev_acc += dev_term;
        } else {
            a_term = gamma * (c * a_term);
            a_acc += a_term;
        }
    }
    rep.mean_term = std::move(mean);
    rep.pessimism_term = (method == LcbMethod::Independent) ? Vector(-dev_acc.rowwise().norm()) : Vector(-a_acc);
    rep.q_lcb = rep.mean_term + rep.pessimism_term;
    for (Eigen::Index i = 0; i < rep.pessimism_term.size(); ++i)
        if (rep.pessimism_term(i) > kOptimismThreshold) rep.optimistic_rows.push_back(i);
    return rep;
}

struct LinearizedFqeResult {
    Vector q_mean; // E[Q^{(t+1)}(X')] under the initial weight distribution
    Vector q_lcb;  // mean minus exact std, remainder terms included
};

/// Exact linearized fitted-Q-evaluation recursions; the oracle for
/// lcb_closed_form. Independent tracks the mean vector and the coefficient
/// matrix of theta so the variance is exact; Shared iterates the
/// deterministic target recursion with the cached deviation vector.
inline LinearizedFqeResult iterate_linearized_fqe(const KernelSystem& sys, const OfflineDataset& ds, double gamma,
                                                  int t, LcbMethod method) {
    detail::check_horizon(sys.c, gamma, t);
    const Matrix& c = sys.c;
    LinearizedFqeResult res;
    if (method == LcbMethod::Independent) {
        Vector m = Vector::Zero(ds.rows());
        Matrix w = ds.xp; // Q^{(0)}(X') = Xp theta
        const Matrix dev = ds.xp - c * ds.x;
        for (int k = 0; k <= t; ++k) {
            m = c * (ds.r + gamma * m);
            w = dev + gamma * (c * w);
        }
        res.q_mean = m;
        res.q_lcb = m - w.rowwise().norm();
    } else {
        const Vector a = (ds.xp - c * ds.x).rowwise().norm(); // same for every iteration >= 1
        Vector y = ds.r - gamma * ds.xp.rowwise().norm();     // R + gamma LCB(Q^{(0)}(X'))
        for (int k = 0; k < t; ++k) y = ds.r - gamma * a + gamma * (c * y);
        res.q_mean = c * y;
        res.q_lcb = res.q_mean - a;
    }
    return res;
}

/// Upper bound on the closed-form-vs-oracle gap from the dropped geometric
/// remainder: (gamma ||C||)^{t+1} ||Xp||_F.
inline double remainder_bound(const OfflineDataset& ds, double gamma_c_norm, int t) {
    return std::pow(gamma_c_norm, t + 1) * ds.xp.norm();
}

/// Shared-method pessimism sweep over `seeds`: per seed, generate a Gaussian
/// dataset, gate on gamma ||C|| < 1, and test the pessimism vector at horizon
/// t for positive entries. Per-seed failures are recorded, not thrown.
inline SweepOutcome run_validation_sweep(const GaussianMdpConfig& cfg, double gamma, int t,
                                         const std::vector<std::uint64_t>& seeds, double ridge, int workers = 1) {
    SweepOutcome out;
    out.n_seeds = static_cast<int>(seeds.size());
    out.per_seed.resize(seeds.size());
    parallel_for(static_cast<int>(seeds.size()), workers, [&](int idx) {
        GaussianMdpConfig per_cfg = cfg;
        per_cfg.seed = seeds[static_cast<std::size_t>(idx)];
        SweepRecord rec;
        rec.seed = per_cfg.seed;
        const OfflineDataset ds = generate_gaussian_dataset(per_cfg);
        rec.rows = ds.rows();
        try {
            const KernelSystem sys = build_kernel_system(ds, ridge);
            const double sigma = spectral_norm(sys.c);
            rec.gamma_c_norm = gamma * sigma;
            rec.retained = rec.gamma_c_norm < 1.0;
            if (rec.retained) {
                Vector acc = init_sqdev(ds, sys.c);
                Vector term = acc;
                for (int k = 0; k < t; ++k) {
                    term = gamma * (sys.c * term);
                    acc += term;
                }
                rec.max_pessimism_entry = (-acc).maxCoeff();
                rec.optimistic = rec.max_pessimism_entry > kOptimismThreshold;
            }
        } catch (const SingularGram&) {
            rec.retained = false;
        } catch (const NoConvergence&) {
            rec.retained = false;
        }
        out.per_seed[static_cast<std::size_t>(idx)] = rec;
    });
    for (const auto& rec : out.per_seed) {
        if (rec.retained) ++out.n_retained;
        if (rec.optimistic) ++out.n_optimistic;
    }
    return out;
}

inline SweepOutcome run_validation_sweep(const GaussianMdpConfig& cfg, double gamma, int t, int n_seeds,
                                         double ridge, int workers = 1) {
    if (n_seeds < 1) throw ConfigError("n_seeds must be >= 1");
    std::vector<std::uint64_t> seeds(static_cast<std::size_t>(n_seeds));
    for (int k = 0; k < n_seeds; ++k) seeds[static_cast<std::size_t>(k)] = cfg.seed + static_cast<std::uint64_t>(k);
    return run_validation_sweep(cfg, gamma, t, seeds, ridge, workers);
}

} // namespace qlcb
