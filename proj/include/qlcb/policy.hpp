#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>

#include "qlcb/errors.hpp"
#include "qlcb/nnets.hpp"
#include "qlcb/rng.hpp"

namespace qlcb {

/// Tanh-squashed Gaussian policy: an MLP trunk emits per-dimension mean and
/// log-std; actions are action_scale * tanh(mean + sigma * eps).
struct PolicySpec {
    int state_dim = 1;
    int action_dim = 1;
    std::vector<int> hidden = {256};
    Activation activation = Activation::Relu;
    double action_scale = 0.3;
    double log_std_min = -5.0;
    double log_std_max = 2.0;
    double weight_scale = 1.0;
    double bias_scale = 0.0;

    void validate() const {
        if (state_dim < 1 || action_dim < 1) throw ConfigError("policy dims must be >= 1");
        if (!(action_scale > 0.0)) throw ConfigError("policy action_scale must be > 0");
        if (!(log_std_min < log_std_max)) throw ConfigError("policy log-std range is empty");
    }

    MlpSpec trunk_spec() const {
        MlpSpec spec;
        spec.input_dim = state_dim;
        spec.hidden_dims = hidden;
        spec.activation = activation;
        spec.output_dim = 2 * action_dim;
        spec.weight_scale = weight_scale;
        spec.bias_scale = bias_scale;
        return spec;
    }
};

struct GaussianPolicy {
    PolicySpec spec;
    Params params;

    static GaussianPolicy make(const PolicySpec& spec, std::uint64_t seed) {
        spec.validate();
        return {spec, init_params(spec.trunk_spec(), seed)};
    }
};

/// Trunk outputs split into mean / clamped log-std, with the clamp mask kept
/// for the backward pass (gradients die outside the clamp range).
struct PolicyEval {
    ForwardWorkspace ws;
    Matrix mean;       // batch x action_dim
    Matrix log_std;    // clamped
    Matrix sigma;      // exp(log_std)
    Matrix clamp_mask; // 1 inside [log_std_min, log_std_max]
};

inline void policy_forward(const GaussianPolicy& pi, const Matrix& states, PolicyEval& eval) {
    const MlpSpec trunk = pi.spec.trunk_spec();
    const Matrix& raw = forward(pi.params, trunk, states, eval.ws);
    const int da = pi.spec.action_dim;
    eval.mean = raw.leftCols(da);
    const auto raw_ls = raw.rightCols(da).array();
    eval.clamp_mask = ((raw_ls >= pi.spec.log_std_min) && (raw_ls <= pi.spec.log_std_max)).cast<double>();
    eval.log_std = raw_ls.cwiseMax(pi.spec.log_std_min).cwiseMin(pi.spec.log_std_max);
    eval.sigma = eval.log_std.array().exp();
}

/// Accumulates trunk gradients from dL/dmean and dL/dlog_std.
inline void policy_backward(const GaussianPolicy& pi, const Matrix& states, PolicyEval& eval,
                            const Matrix& dmean, const Matrix& dlog_std, Params& grads) {
    const MlpSpec trunk = pi.spec.trunk_spec();
    const int da = pi.spec.action_dim;
    Matrix gout(states.rows(), 2 * da);
    gout.leftCols(da) = dmean;
    gout.rightCols(da) = dlog_std.cwiseProduct(eval.clamp_mask);
    backward(pi.params, trunk, states, eval.ws, gout, &grads);
}

/// Deterministic mode: action_scale * tanh(mean).
inline Matrix policy_mode_actions(const GaussianPolicy& pi, const Matrix& states) {
    PolicyEval eval;
    policy_forward(pi, states, eval);
    return pi.spec.action_scale * eval.mean.array().tanh();
}

struct PolicySample {
    Matrix eps;     // noise used for the reparameterized draw
    Matrix u;       // pre-squash sample
    Matrix tanh_u;  // tanh(u)
    Matrix actions; // action_scale * tanh(u)
};

inline void policy_sample(const GaussianPolicy& pi, const PolicyEval& eval, const Matrix& eps,
                          PolicySample& out) {
    out.eps = eps;
    out.u = eval.mean + eval.sigma.cwiseProduct(eps);
    out.tanh_u = out.u.array().tanh();
    out.actions = pi.spec.action_scale * out.tanh_u;
}

inline Matrix draw_noise(Rng& rng, Eigen::Index rows, Eigen::Index cols) {
    Matrix eps(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i)
        for (Eigen::Index j = 0; j < cols; ++j) eps(i, j) = rng.normal();
    return eps;
}

struct BcStepResult {
    double nll = 0.0;            // minimized objective (constants dropped)
    double log_likelihood = 0.0; // mean log p(a|s), squash correction included
};

/// Log-likelihood of squashed dataset actions and its trunk gradients.
/// With u = atanh(a / scale) fixed by the data, the change-of-variables
/// correction is parameter free, so only the Gaussian term is differentiated.
inline BcStepResult bc_loss_and_grads(const GaussianPolicy& pi, const Matrix& states, const Matrix& actions,
                                      Params* grads) {
    if (actions.rows() != states.rows() || actions.cols() != pi.spec.action_dim)
        throw DimensionMismatch("bc: action batch shape mismatch");
    const double scale = pi.spec.action_scale;
    const double batch = static_cast<double>(states.rows());
    constexpr double kLogTwoPi = 1.8378770664093453;

    const Matrix ratio = (actions / scale).cwiseMax(-1.0 + 1e-12).cwiseMin(1.0 - 1e-12);
    const Matrix u = ratio.unaryExpr([](double v) { return std::atanh(v); });

    PolicyEval eval;
    policy_forward(pi, states, eval);
    const Matrix z = (u - eval.mean).cwiseQuotient(eval.sigma);

    BcStepResult res;
    res.nll = (0.5 * z.array().square() + eval.log_std.array()).sum() / batch;
    const double gauss_loglik =
        (-0.5 * z.array().square() - eval.log_std.array() - 0.5 * kLogTwoPi).sum() / batch;
    const double squash_correction =
        (scale * (1.0 - ratio.array().square())).log().sum() / batch;
    res.log_likelihood = gauss_loglik - squash_correction;

    if (grads) {
        const Matrix dmean = (eval.mean - u).cwiseQuotient(eval.sigma.cwiseProduct(eval.sigma)) / batch;
        const Matrix dlog_std = (1.0 - z.array().square()).matrix() / batch;
        PolicyEval& ev = eval;
        policy_backward(pi, states, ev, dmean, dlog_std, *grads);
    }
    return res;
}

} // namespace qlcb
