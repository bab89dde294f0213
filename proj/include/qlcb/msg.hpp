#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "qlcb/dataset.hpp"
#include "qlcb/ensembles.hpp"
#include "qlcb/errors.hpp"
#include "qlcb/fqe.hpp"
#include "qlcb/policy.hpp"

namespace qlcb {

struct MsgHyperparams {
    double beta = -4.0;  // LCB weight, <= 0: Q_LCB = mean + beta * std
    double alpha = 0.0;  // support-regularizer weight, >= 0
    double gamma = 0.99;
    double tau = 0.995; // EMA rate: target <- tau * target + (1 - tau) * online
    int n_members = 4;
    int batch_size = 256;
    int bc_steps = 2000;
    int train_steps = 15000;
    double lr_q = 3e-4;
    double lr_pi = 3e-4;
    std::uint64_t seed = 0;
    int q_hidden = 256;
    int pi_hidden = 256;
    Activation q_activation = Activation::Relu;
    Activation pi_activation = Activation::Relu;
    double q_init_scale = 1.0;
    double action_scale = 0.3;

    void validate() const {
        if (!(beta <= 0.0)) throw ConfigError("msg beta must be <= 0");
        if (!(alpha >= 0.0)) throw ConfigError("msg alpha must be >= 0");
        if (!(gamma >= 0.0 && gamma < 1.0)) throw ConfigError("msg gamma must lie in [0, 1)");
        if (!(tau > 0.0 && tau <= 1.0)) throw ConfigError("msg tau must lie in (0, 1]");
        if (n_members < 1 || batch_size < 1) throw ConfigError("msg counts must be >= 1");
        if (bc_steps < 0 || train_steps < 0) throw ConfigError("msg step counts must be >= 0");
        if (!(lr_q > 0.0 && lr_pi > 0.0)) throw ConfigError("msg learning rates must be > 0");
        if (q_hidden < 1 || pi_hidden < 1) throw ConfigError("msg hidden widths must be >= 1");
    }
};

struct MsgBatch {
    Matrix s, a, s_next;
    Vector r;
};

inline MsgBatch sample_batch(const OfflineDataset& ds, int batch_size, Rng& rng) {
    MsgBatch b;
    b.s.resize(batch_size, ds.state_dim);
    b.a.resize(batch_size, ds.action_dim);
    b.s_next.resize(batch_size, ds.state_dim);
    b.r.resize(batch_size);
    for (int k = 0; k < batch_size; ++k) {
        const Eigen::Index row = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(ds.rows())));
        b.s.row(k) = ds.x.row(row).head(ds.state_dim);
        b.a.row(k) = ds.x.row(row).tail(ds.action_dim);
        b.s_next.row(k) = ds.xp.row(row).head(ds.state_dim);
        b.r(k) = ds.r(row);
    }
    return b;
}

/// Everything one MSG run mutates: online and target ensembles, policy,
/// optimizer states, and the RNG all minibatch/noise draws consume in order.
struct MsgState {
    QEnsemble ensemble;
    QEnsemble targets;
    GaussianPolicy policy;
    std::vector<AdamState> q_adams;
    AdamState pi_adam;
    Rng rng{0};
    long step = 0;
};

inline MsgState make_msg_state(int state_dim, int action_dim, const MsgHyperparams& hp) {
    hp.validate();
    EnsembleArch arch;
    arch.kind = EnsembleKind::Deep;
    arch.n_members = hp.n_members;
    arch.base.input_dim = state_dim + action_dim;
    arch.base.hidden_dims = {hp.q_hidden};
    arch.base.activation = hp.q_activation;
    arch.base.output_dim = 1;
    arch.base.weight_scale = hp.q_init_scale;
    arch.base.bias_scale = 0.0;

    PolicySpec pi_spec;
    pi_spec.state_dim = state_dim;
    pi_spec.action_dim = action_dim;
    pi_spec.hidden = {hp.pi_hidden};
    pi_spec.activation = hp.pi_activation;
    pi_spec.action_scale = hp.action_scale;

    MsgState st{QEnsemble::make(arch, Rng::substream(hp.seed, 0).next_u64()),
                QEnsemble{},
                GaussianPolicy::make(pi_spec, Rng::substream(hp.seed, 1).next_u64()),
                {},
                AdamState{},
                Rng::substream(hp.seed, 2)};
    st.targets = st.ensemble; // target networks start as exact copies
    for (auto& net : st.ensemble.nets)
        st.q_adams.emplace_back(tensor_views(net), AdamConfig{hp.lr_q, 0.9, 0.999, 1e-8});
    st.pi_adam = AdamState(tensor_views(st.policy.params), AdamConfig{hp.lr_pi, 0.9, 0.999, 1e-8});
    return st;
}

struct EvalStepStats {
    Vector td_loss;          // per member
    double regularizer = 0.0; // mean H over members
};

/// One TD step per member: targets come from the member's own target network
/// at (s', a' ~ pi(s')), plus the CQL-style support regularizer when
/// alpha > 0, then an Adam step and the EMA target update.
inline EvalStepStats policy_evaluation_step(MsgState& st, const MsgBatch& batch, const MsgHyperparams& hp) {
    const int n = st.ensemble.n_members();
    const Eigen::Index bsz = batch.s.rows();
    const double bf = static_cast<double>(bsz);
    EvalStepStats stats;
    stats.td_loss.resize(n);

    Matrix xb(bsz, batch.s.cols() + batch.a.cols());
    xb << batch.s, batch.a;

    PolicyEval pi_next, pi_cur;
    policy_forward(st.policy, batch.s_next, pi_next);
    if (hp.alpha > 0.0) policy_forward(st.policy, batch.s, pi_cur);

    ForwardWorkspace ws, ws_t, ws_pi;
    Params grads = Params::zeros_like(st.ensemble.nets[0]);
    PolicySample sample;
    Matrix xpb(bsz, xb.cols()), xpi;

    double reg_sum = 0.0;
    for (int i = 0; i < n; ++i) {
        // fresh policy action sample per member, as in the per-member loop
        policy_sample(st.policy, pi_next, draw_noise(st.rng, bsz, batch.a.cols()), sample);
        xpb << batch.s_next, sample.actions;
        const Matrix& qt = forward(st.targets.nets[static_cast<std::size_t>(i)], st.targets.spec, xpb, ws_t);
        const Vector y = batch.r + hp.gamma * qt.col(0);

        const Matrix& out = forward(st.ensemble.nets[static_cast<std::size_t>(i)], st.ensemble.spec, xb, ws);
        const Vector resid = out.col(0) - y;
        stats.td_loss(i) = resid.squaredNorm() / bf;
        if (!std::isfinite(stats.td_loss(i)))
            throw Diverged("msg member " + std::to_string(i) + " TD loss is not finite");

        grads.set_zero();
        Matrix gout = (2.0 / bf) * resid;
        if (hp.alpha > 0.0) {
            policy_sample(st.policy, pi_cur, draw_noise(st.rng, bsz, batch.a.cols()), sample);
            if (xpi.rows() != bsz) xpi.resize(bsz, xb.cols());
            xpi << batch.s, sample.actions;
            const Matrix& q_pi = forward(st.ensemble.nets[static_cast<std::size_t>(i)], st.ensemble.spec, xpi, ws_pi);
            reg_sum += q_pi.col(0).mean() - out.col(0).mean();
            gout.array() -= hp.alpha / bf;
            backward(st.ensemble.nets[static_cast<std::size_t>(i)], st.ensemble.spec, xpi, ws_pi,
                     Matrix::Constant(bsz, 1, hp.alpha / bf), &grads);
        }
        backward(st.ensemble.nets[static_cast<std::size_t>(i)], st.ensemble.spec, xb, ws, gout, &grads);
        adam_update(st.q_adams[static_cast<std::size_t>(i)], st.ensemble.nets[static_cast<std::size_t>(i)], grads);
    }
    st.targets.ema_from(st.ensemble, hp.tau);
    stats.regularizer = (hp.alpha > 0.0) ? reg_sum / n : 0.0;
    return stats;
}

struct PolicyStepStats {
    double policy_loss = 0.0; // minimized: -mean Q_LCB
    double q_lcb_mean = 0.0;
};

/// Mean ensemble-LCB objective at reparameterized policy actions, with trunk
/// gradients when requested. Exposed separately so the gradient can be
/// checked against finite differences under fixed noise.
inline double msg_policy_objective(const GaussianPolicy& policy, const QEnsemble& ens, const Matrix& states,
                                   const Matrix& eps, double beta, Params* pi_grads = nullptr) {
    const int n = ens.n_members();
    const Eigen::Index bsz = states.rows();
    const double bf = static_cast<double>(bsz);
    const int da = policy.spec.action_dim;

    PolicyEval eval;
    policy_forward(policy, states, eval);
    PolicySample sample;
    policy_sample(policy, eval, eps, sample);

    Matrix xa(bsz, states.cols() + da);
    xa << states, sample.actions;

    EnsembleWorkspace ws;
    const Matrix& q = ens.member_outputs(xa, ws); // batch x N
    const Vector q_mean = q.rowwise().mean();
    const Vector q_std = rowwise_population_std(q);
    const double objective = (q_mean + beta * q_std).mean();

    if (pi_grads) {
        // dJ/dQ_i per row: 1/N + beta (Q_i - mean) / (N std); std-term
        // subgradient is zero where members agree.
        Matrix gout = Matrix::Constant(bsz, n, 1.0 / (bf * n));
        if (beta != 0.0 && n > 1) {
            for (Eigen::Index row = 0; row < bsz; ++row) {
                if (q_std(row) <= 1e-12) continue;
                for (int i = 0; i < n; ++i)
                    gout(row, i) += beta * (q(row, i) - q_mean(row)) / (n * q_std(row) * bf);
            }
        }
        Matrix dxa = Matrix::Zero(bsz, xa.cols());
        ens.backward_members(xa, ws, gout, nullptr, &dxa);
        const Matrix dact = dxa.rightCols(da);
        const Matrix du =
            dact.array() * policy.spec.action_scale * (1.0 - sample.tanh_u.array().square());
        const Matrix dmean = du;
        const Matrix dlog_std = du.cwiseProduct(eval.sigma.cwiseProduct(sample.eps));
        policy_backward(policy, states, eval, dmean, dlog_std, *pi_grads);
    }
    return objective;
}

/// One gradient-ascent step on the ensemble LCB through the reparameterized
/// action sample.
inline PolicyStepStats msg_policy_optimization_step(MsgState& st, const Matrix& batch_states,
                                                    const MsgHyperparams& hp) {
    const Matrix eps = draw_noise(st.rng, batch_states.rows(), st.policy.spec.action_dim);
    Params grads = Params::zeros_like(st.policy.params);
    const double objective = msg_policy_objective(st.policy, st.ensemble, batch_states, eps, hp.beta, &grads);
    if (!std::isfinite(objective)) throw Diverged("msg policy objective is not finite");
    // ascend: minimize the negated objective
    for (auto& layer : grads.layers) {
        layer.w = -layer.w;
        layer.b = -layer.b;
    }
    adam_update(st.pi_adam, st.policy.params, grads);
    PolicyStepStats stats;
    stats.q_lcb_mean = objective;
    stats.policy_loss = -objective;
    return stats;
}

inline double bc_update_step(MsgState& st, const Matrix& states, const Matrix& actions,
                             const MsgHyperparams&) {
    Params grads = Params::zeros_like(st.policy.params);
    const BcStepResult res = bc_loss_and_grads(st.policy, states, actions, &grads);
    if (!std::isfinite(res.nll)) throw Diverged("bc loss is not finite");
    adam_update(st.pi_adam, st.policy.params, grads);
    return res.log_likelihood;
}

/// Standalone behavioral cloning on dataset actions (log-likelihood ascent of
/// the squashed Gaussian). train_msg interleaves the same update with policy
/// evaluation steps; steps = 0 leaves the policy untouched.
inline void bc_pretrain(const OfflineDataset& ds, GaussianPolicy& policy, int steps, double lr = 3e-4,
                        int batch_size = 256, std::uint64_t seed = 0) {
    if (steps < 0) throw ConfigError("bc steps must be >= 0");
    AdamState adam(tensor_views(policy.params), AdamConfig{lr, 0.9, 0.999, 1e-8});
    Rng rng = Rng::substream(seed, 3);
    for (int k = 0; k < steps; ++k) {
        Matrix s(batch_size, ds.state_dim), a(batch_size, ds.action_dim);
        for (int row = 0; row < batch_size; ++row) {
            const Eigen::Index idx = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(ds.rows())));
            s.row(row) = ds.x.row(idx).head(ds.state_dim);
            a.row(row) = ds.x.row(idx).tail(ds.action_dim);
        }
        Params grads = Params::zeros_like(policy.params);
        bc_loss_and_grads(policy, s, a, &grads);
        adam_update(adam, policy.params, grads);
    }
}

struct TrainLogRow {
    long step = 0;
    Vector td_loss;
    double regularizer = 0.0;
    double q_lcb_mean = std::numeric_limits<double>::quiet_NaN();
    double policy_loss = std::numeric_limits<double>::quiet_NaN();
};

struct TrainLog {
    std::vector<TrainLogRow> rows;

    void write_csv(const std::filesystem::path& path, int n_members) const {
        CsvWriter csv(path);
        std::vector<std::string> names = {"step"};
        for (int i = 0; i < n_members; ++i) names.push_back("td_loss_" + std::to_string(i));
        names.insert(names.end(), {"regularizer", "q_lcb_mean", "policy_loss"});
        csv.header(names);
        std::vector<std::string> cells;
        for (const auto& row : rows) {
            cells.clear();
            cells.push_back(std::to_string(row.step));
            for (Eigen::Index i = 0; i < row.td_loss.size(); ++i) cells.push_back(format_double(row.td_loss(i)));
            cells.push_back(format_double(row.regularizer));
            cells.push_back(format_double(row.q_lcb_mean));
            cells.push_back(format_double(row.policy_loss));
            csv.row(cells);
        }
    }
};

/// Full MSG training: bc_steps of (evaluation + behavioral cloning), then
/// train_steps of (evaluation + LCB policy optimization), minibatches sampled
/// uniformly with replacement. The log is filled in place so a Diverged abort
/// preserves everything up to the failing step.
inline MsgState train_msg(const OfflineDataset& ds, const MsgHyperparams& hp, TrainLog& log) {
    hp.validate();
    ds.validate();
    MsgState st = make_msg_state(ds.state_dim, ds.action_dim, hp);
    log.rows.clear();
    log.rows.reserve(static_cast<std::size_t>(hp.bc_steps + hp.train_steps));
    for (int k = 0; k < hp.bc_steps; ++k) {
        const MsgBatch batch = sample_batch(ds, hp.batch_size, st.rng);
        TrainLogRow row;
        row.step = st.step++;
        const EvalStepStats es = policy_evaluation_step(st, batch, hp);
        row.td_loss = es.td_loss;
        row.regularizer = es.regularizer;
        row.policy_loss = -bc_update_step(st, batch.s, batch.a, hp);
        log.rows.push_back(std::move(row));
    }
    for (int k = 0; k < hp.train_steps; ++k) {
        const MsgBatch batch = sample_batch(ds, hp.batch_size, st.rng);
        TrainLogRow row;
        row.step = st.step++;
        const EvalStepStats es = policy_evaluation_step(st, batch, hp);
        row.td_loss = es.td_loss;
        row.regularizer = es.regularizer;
        const PolicyStepStats ps = msg_policy_optimization_step(st, batch.s, hp);
        row.q_lcb_mean = ps.q_lcb_mean;
        row.policy_loss = ps.policy_loss;
        log.rows.push_back(std::move(row));
    }
    return st;
}

struct EvalOutcome {
    double mean_return = 0.0;
    double success_rate = 0.0;
};

/// Rolls the deterministic policy mode from uniform starts; an episode
/// succeeds once it collects any reward (s' entered the reward interval).
inline EvalOutcome evaluate_policy(const GaussianPolicy& policy, const ChainConfig& cfg, int n_episodes,
                                   int horizon, std::uint64_t eval_seed = 0xe7a1u) {
    if (n_episodes < 1 || horizon < 1) throw ConfigError("evaluate_policy needs n_episodes, horizon >= 1");
    EvalOutcome out;
    Matrix state(1, 1);
    int successes = 0;
    double total_return = 0.0;
    for (int ep = 0; ep < n_episodes; ++ep) {
        Rng rng = Rng::substream(eval_seed, static_cast<std::uint64_t>(ep));
        double s = rng.uniform(cfg.state_lo, cfg.state_hi);
        bool reached = false;
        for (int t = 0; t < horizon; ++t) {
            state(0, 0) = s;
            const double a = policy_mode_actions(policy, state)(0, 0);
            const ChainStep step = chain_step(s, a, cfg);
            total_return += step.r;
            if (step.r > 0.0) reached = true;
            s = step.s_next;
        }
        if (reached) ++successes;
    }
    out.mean_return = total_return / n_episodes;
    out.success_rate = static_cast<double>(successes) / n_episodes;
    return out;
}

} // namespace qlcb
