#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "qlcb/dataset.hpp"
#include "qlcb/ensembles.hpp"
#include "qlcb/errors.hpp"
#include "qlcb/parallel.hpp"

namespace qlcb {

enum class TargetKind { Independent, IndependentDoubleQ, SharedMean, SharedLcb, SharedMin };

struct TargetRule {
    TargetKind kind = TargetKind::Independent;
    double lcb_k = 2.0; // std multiplier for SharedLcb

    void validate() const {
        if (kind == TargetKind::SharedLcb && !(lcb_k > 0.0)) throw ConfigError("shared-lcb needs k > 0");
    }

    bool shared() const {
        return kind == TargetKind::SharedMean || kind == TargetKind::SharedLcb || kind == TargetKind::SharedMin;
    }

    std::string name() const {
        switch (kind) {
            case TargetKind::Independent: return "independent";
            case TargetKind::IndependentDoubleQ: return "independent_double_q";
            case TargetKind::SharedMean: return "shared_mean";
            case TargetKind::SharedLcb: return "shared_lcb";
            case TargetKind::SharedMin: return "shared_min";
        }
        return "?";
    }
};

inline TargetRule target_rule_from_name(const std::string& name) {
    for (TargetKind k : {TargetKind::Independent, TargetKind::IndependentDoubleQ, TargetKind::SharedMean,
                         TargetKind::SharedLcb, TargetKind::SharedMin}) {
        TargetRule r{k, 2.0};
        if (r.name() == name) return r;
    }
    throw ConfigError("unknown target rule '" + name + "'");
}

/// Population standard deviation (divide by N) across member columns.
inline Vector rowwise_population_std(const Matrix& q) {
    const Vector mean = q.rowwise().mean();
    const Matrix dev = q.colwise() - mean;
    return (dev.rowwise().squaredNorm() / static_cast<double>(q.cols())).cwiseSqrt();
}

/// Per-member TD targets from member outputs at (s', pi(s')). Independent
/// rules touch only each member's own column (min-pooling for double-Q
/// happens inside the member's forward pass); shared rules broadcast one
/// common pessimistic column to every member.
inline Matrix compute_targets(const TargetRule& rule, const Matrix& qp, const Vector& r, double gamma) {
    rule.validate();
    if (qp.rows() != r.size()) throw DimensionMismatch("compute_targets: qp rows must match rewards");
    const Eigen::Index n = qp.cols();
    Matrix y(qp.rows(), n);
    switch (rule.kind) {
        case TargetKind::Independent:
        case TargetKind::IndependentDoubleQ:
            y = (gamma * qp).colwise() + r;
            break;
        case TargetKind::SharedMean: {
            const Vector shared = r + gamma * qp.rowwise().mean();
            y.colwise() = shared;
            break;
        }
        case TargetKind::SharedLcb: {
            const Vector shared =
                r + gamma * (qp.rowwise().mean() - rule.lcb_k * rowwise_population_std(qp));
            y.colwise() = shared;
            break;
        }
        case TargetKind::SharedMin: {
            const Vector shared = r + gamma * qp.rowwise().minCoeff();
            y.colwise() = shared;
            break;
        }
    }
    return y;
}

struct FqeConfig {
    double gamma = 0.99;
    int n_members = 64;
    int outer_iters = 1000;
    int inner_steps = 2000;
    double lr = 1e-4;
    TargetRule rule;
    std::uint64_t seed = 0;
    // network per the toy study: one hidden layer, tanh, fan-in truncated
    // normal init with scales 10.0 / 0.05
    int hidden_dim = 512;
    Activation activation = Activation::Tanh;
    double weight_scale = 10.0;
    double bias_scale = 0.05;
    EnsembleKind ensemble = EnsembleKind::Deep;
    int workers = 1;

    void validate() const {
        if (!(gamma >= 0.0 && gamma < 1.0)) throw ConfigError("fqe gamma must lie in [0, 1)");
        if (n_members < 1 || outer_iters < 1 || inner_steps < 1) throw ConfigError("fqe counts must be >= 1");
        if (!(lr > 0.0)) throw ConfigError("fqe lr must be > 0");
        if (hidden_dim < 0) throw ConfigError("fqe hidden_dim must be >= 0");
        rule.validate();
    }

    MlpSpec base_spec(int input_dim) const {
        MlpSpec spec;
        spec.input_dim = input_dim;
        if (hidden_dim > 0) spec.hidden_dims = {hidden_dim};
        spec.activation = activation;
        spec.output_dim = 1;
        spec.weight_scale = weight_scale;
        spec.bias_scale = bias_scale;
        return spec;
    }
};

struct UncertaintyCurve {
    Vector states;
    Vector mean_q;
    Vector std_q;
    Matrix per_member_q; // grid x N
};

struct FqeResult {
    QEnsemble ensemble;
    UncertaintyCurve curve;
};

namespace detail {

// One full-batch Adam step of member i of a deep ensemble toward its target
// column; returns the member's MSE.
inline double deep_member_step(QEnsemble& ens, int member, const Matrix& x, const Vector& target,
                               EnsembleWorkspace& ws, std::vector<Params>& grad_slots,
                               std::vector<AdamState>& adams) {
    const bool dq = ens.arch.double_q;
    double mse = 0.0;
    if (dq) {
        ForwardWorkspace& w1 = ws.net_ws[static_cast<std::size_t>(2 * member)];
        ForwardWorkspace& w2 = ws.net_ws[static_cast<std::size_t>(2 * member + 1)];
        const Matrix& o1 = forward(ens.nets[static_cast<std::size_t>(2 * member)], ens.spec, x, w1);
        const Matrix& o2 = forward(ens.nets[static_cast<std::size_t>(2 * member + 1)], ens.spec, x, w2);
        const Vector out = o1.col(0).cwiseMin(o2.col(0));
        const Vector resid = out - target;
        mse = resid.squaredNorm() / static_cast<double>(x.rows());
        const Vector g = (2.0 / static_cast<double>(x.rows())) * resid;
        const Vector mask = (o1.col(0).array() <= o2.col(0).array()).cast<double>();
        Params& g1 = grad_slots[static_cast<std::size_t>(2 * member)];
        Params& g2 = grad_slots[static_cast<std::size_t>(2 * member + 1)];
        g1.set_zero();
        g2.set_zero();
        backward(ens.nets[static_cast<std::size_t>(2 * member)], ens.spec, x, w1, g.cwiseProduct(mask), &g1);
        backward(ens.nets[static_cast<std::size_t>(2 * member + 1)], ens.spec, x, w2, g - g.cwiseProduct(mask),
                 &g2);
        adam_update(adams[static_cast<std::size_t>(2 * member)], ens.nets[static_cast<std::size_t>(2 * member)], g1);
        adam_update(adams[static_cast<std::size_t>(2 * member + 1)], ens.nets[static_cast<std::size_t>(2 * member + 1)],
                    g2);
    } else {
        ForwardWorkspace& w = ws.net_ws[static_cast<std::size_t>(member)];
        const Matrix& out = forward(ens.nets[static_cast<std::size_t>(member)], ens.spec, x, w);
        const Vector resid = out.col(0) - target;
        mse = resid.squaredNorm() / static_cast<double>(x.rows());
        Params& g = grad_slots[static_cast<std::size_t>(member)];
        g.set_zero();
        backward(ens.nets[static_cast<std::size_t>(member)], ens.spec, x, w,
                 Matrix((2.0 / static_cast<double>(x.rows())) * resid), &g);
        adam_update(adams[static_cast<std::size_t>(member)], ens.nets[static_cast<std::size_t>(member)], g);
    }
    return mse;
}

} // namespace detail

/// Pessimistic fitted Q-evaluation of the constant chain policy: freeze
/// per-member targets under the configured rule, fit each member with
/// inner_steps full-batch Adam steps, repeat outer_iters times, then read the
/// mean/std uncertainty curve off the evaluation grid. No target networks.
inline FqeResult run_fqe(const OfflineDataset& ds, const FqeConfig& cfg, const Matrix& grid) {
    cfg.validate();
    ds.validate();
    if (grid.cols() != ds.x.cols()) throw DimensionMismatch("run_fqe: grid width must match dataset columns");

    EnsembleArch arch;
    arch.kind = cfg.ensemble;
    arch.n_members = cfg.n_members;
    arch.base = cfg.base_spec(static_cast<int>(ds.x.cols()));
    arch.double_q = cfg.rule.kind == TargetKind::IndependentDoubleQ;
    if (arch.double_q && cfg.ensemble != EnsembleKind::Deep)
        throw ConfigError("double-Q FQE requires the deep ensemble");

    QEnsemble ens = QEnsemble::make(arch, cfg.seed);
    const AdamConfig adam_cfg{cfg.lr, 0.9, 0.999, 1e-8};

    if (arch.kind == EnsembleKind::Deep) {
        // Members are independent given frozen targets, so each worker owns a
        // member's whole inner loop; results match serial execution exactly.
        std::vector<AdamState> adams;
        std::vector<Params> grad_slots;
        for (auto& net : ens.nets) {
            adams.emplace_back(tensor_views(net), adam_cfg);
            grad_slots.push_back(Params::zeros_like(net));
        }
        std::vector<EnsembleWorkspace> member_ws(static_cast<std::size_t>(cfg.n_members));
        for (auto& ws : member_ws) ws.net_ws.resize(ens.nets.size());
        EnsembleWorkspace eval_ws;
        for (int outer = 0; outer < cfg.outer_iters; ++outer) {
            const Matrix qp = ens.member_outputs(ds.xp, eval_ws);
            const Matrix targets = compute_targets(cfg.rule, qp, ds.r, cfg.gamma);
            parallel_for(cfg.n_members, cfg.workers, [&](int i) {
                const Vector target = targets.col(i);
                for (int step = 0; step < cfg.inner_steps; ++step) {
                    const double mse = detail::deep_member_step(ens, i, ds.x, target,
                                                                member_ws[static_cast<std::size_t>(i)],
                                                                grad_slots, adams);
                    if (!std::isfinite(mse))
                        throw Diverged("fqe member " + std::to_string(i) + " diverged at outer " +
                                       std::to_string(outer) + " step " + std::to_string(step));
                }
            });
        }
    } else {
        AdamState adam(ens.views(), adam_cfg);
        EnsembleGrads grads = ens.zero_grads();
        EnsembleWorkspace ws;
        const double denom = static_cast<double>(ds.rows()) * cfg.n_members;
        for (int outer = 0; outer < cfg.outer_iters; ++outer) {
            const Matrix targets = compute_targets(cfg.rule, ens.member_outputs(ds.xp, ws), ds.r, cfg.gamma);
            for (int step = 0; step < cfg.inner_steps; ++step) {
                const Matrix& out = ens.member_outputs(ds.x, ws);
                const Matrix resid = out - targets;
                const double loss = resid.squaredNorm() / denom;
                if (!std::isfinite(loss))
                    throw Diverged("fqe ensemble diverged at outer " + std::to_string(outer));
                grads.set_zero();
                ens.backward_members(ds.x, ws, Matrix((2.0 / denom) * resid), &grads);
                auto pv = ens.views();
                auto gv = ens.grad_views(grads);
                adam.update(pv, gv);
            }
        }
    }

    FqeResult res{std::move(ens), {}};
    res.curve.states = grid.col(0);
    res.curve.per_member_q = res.ensemble.member_outputs(grid);
    res.curve.mean_q = res.curve.per_member_q.rowwise().mean();
    res.curve.std_q = rowwise_population_std(res.curve.per_member_q);
    return res;
}

struct RegionSummary {
    double lo = 0.0;
    double hi = 0.0;
    int n_points = 0;
    double mean_std = 0.0;
    double max_std = 0.0;
};

inline std::vector<RegionSummary> summarize_curve(const UncertaintyCurve& curve,
                                                  const std::vector<std::pair<double, double>>& regions) {
    std::vector<RegionSummary> out;
    out.reserve(regions.size());
    for (const auto& [lo, hi] : regions) {
        RegionSummary rs;
        rs.lo = lo;
        rs.hi = hi;
        double sum = 0.0;
        for (Eigen::Index k = 0; k < curve.states.size(); ++k) {
            const double s = curve.states(k);
            if (s < lo || s > hi) continue;
            ++rs.n_points;
            sum += curve.std_q(k);
            rs.max_std = std::max(rs.max_std, curve.std_q(k));
        }
        if (rs.n_points == 0)
            throw EmptyRegion("region [" + format_double(lo) + ", " + format_double(hi) +
                              "] captures no grid points");
        rs.mean_std = sum / rs.n_points;
        out.push_back(rs);
    }
    return out;
}

inline void write_curve_csv(const UncertaintyCurve& curve, const std::filesystem::path& path,
                            bool include_members = true) {
    CsvWriter csv(path);
    std::vector<std::string> names = {"state", "mean_q", "std_q"};
    if (include_members)
        for (Eigen::Index j = 0; j < curve.per_member_q.cols(); ++j)
            names.push_back("member_" + std::to_string(j));
    csv.header(names);
    std::vector<std::string> cells;
    for (Eigen::Index k = 0; k < curve.states.size(); ++k) {
        cells.clear();
        cells.push_back(format_double(curve.states(k)));
        cells.push_back(format_double(curve.mean_q(k)));
        cells.push_back(format_double(curve.std_q(k)));
        if (include_members)
            for (Eigen::Index j = 0; j < curve.per_member_q.cols(); ++j)
                cells.push_back(format_double(curve.per_member_q(k, j)));
        csv.row(cells);
    }
}

} // namespace qlcb
