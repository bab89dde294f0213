#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <string>
#include <vector>

#include "qlcb/errors.hpp"
#include "qlcb/nnets.hpp"
#include "qlcb/rng.hpp"

namespace qlcb {

enum class EnsembleKind { Deep, MultiHead, Mimo, BatchEnsemble };

inline std::string ensemble_kind_name(EnsembleKind k) {
    switch (k) {
        case EnsembleKind::Deep: return "deep";
        case EnsembleKind::MultiHead: return "multi_head";
        case EnsembleKind::Mimo: return "mimo";
        case EnsembleKind::BatchEnsemble: return "batch_ensemble";
    }
    return "?";
}

/// Ensemble of N scalar Q-networks over a common base architecture.
///   Deep:          N separate networks (2N min-pooled subnetworks if double_q).
///   MultiHead:     shared trunk, final layer widened to N outputs.
///   Mimo:          input replicated N times, single network, N outputs.
///   BatchEnsemble: shared weights with per-member rank-1 modulations r, s and
///                  per-member biases, sigma(((W^T (x o r^i)) o s^i) + b^i).
struct EnsembleArch {
    EnsembleKind kind = EnsembleKind::Deep;
    int n_members = 1;
    MlpSpec base;
    bool double_q = false; // Deep only: members min-pool two subnetworks

    void validate() const {
        base.validate();
        if (n_members < 1) throw ConfigError("ensemble needs n_members >= 1");
        if (base.output_dim != 1) throw ConfigError("ensemble base network must have scalar output");
        if (double_q && kind != EnsembleKind::Deep)
            throw ConfigError("double-Q members are only defined for deep ensembles");
    }

    /// Spec of the concrete network(s) actually instantiated.
    MlpSpec net_spec() const {
        MlpSpec spec = base;
        if (kind == EnsembleKind::MultiHead) spec.output_dim = n_members;
        if (kind == EnsembleKind::Mimo) {
            spec.input_dim = base.input_dim * n_members;
            spec.output_dim = n_members;
        }
        return spec;
    }
};

/// Gradient container mirroring QEnsemble storage.
struct EnsembleGrads {
    std::vector<Params> nets;
    std::vector<Matrix> mod_r, mod_s, mod_b;

    void set_zero() {
        for (auto& n : nets) n.set_zero();
        for (auto& m : mod_r) m.setZero();
        for (auto& m : mod_s) m.setZero();
        for (auto& m : mod_b) m.setZero();
    }
};

struct EnsembleWorkspace {
    std::vector<ForwardWorkspace> net_ws;
    Matrix tiled;    // MIMO input staging
    Matrix outputs;  // batch x N
    Matrix min_mask; // double_q: 1 where the first subnetwork attains the min
    // batch-ensemble caches, indexed [member][layer]
    std::vector<std::vector<Matrix>> be_xt;  // modulated layer inputs
    std::vector<std::vector<Matrix>> be_lin; // pre-scale linear outputs
    std::vector<std::vector<Matrix>> be_pre; // preactivations
    std::vector<std::vector<Matrix>> be_act; // activations
    Matrix scratch;
};

class QEnsemble {
public:
    EnsembleArch arch;
    MlpSpec spec; // instantiated network spec (arch.net_spec())
    std::vector<Params> nets;
    // BatchEnsemble modulations per layer: r (in x N), s (out x N), b (out x N)
    std::vector<Matrix> mod_r, mod_s, mod_b;

    static QEnsemble make(const EnsembleArch& arch, std::uint64_t seed) {
        arch.validate();
        QEnsemble ens;
        ens.arch = arch;
        ens.spec = arch.net_spec();
        switch (arch.kind) {
            case EnsembleKind::Deep: {
                const int n_nets = arch.double_q ? 2 * arch.n_members : arch.n_members;
                ens.nets.reserve(static_cast<std::size_t>(n_nets));
                for (int i = 0; i < n_nets; ++i)
                    ens.nets.push_back(init_params(ens.spec, Rng::substream(seed, static_cast<std::uint64_t>(i)).next_u64()));
                break;
            }
            case EnsembleKind::MultiHead:
            case EnsembleKind::Mimo:
                ens.nets.push_back(init_params(ens.spec, Rng::substream(seed, 0).next_u64()));
                break;
            case EnsembleKind::BatchEnsemble: {
                ens.nets.push_back(init_params(ens.spec, Rng::substream(seed, 0).next_u64()));
                const auto sizes = ens.spec.layer_sizes();
                Rng rng = Rng::substream(seed, 1);
                for (std::size_t l = 0; l + 1 < sizes.size(); ++l) {
                    // random-sign modulations, per-member fan-in truncated normal biases
                    Matrix r(sizes[l], arch.n_members), s(sizes[l + 1], arch.n_members),
                        b(sizes[l + 1], arch.n_members);
                    for (Eigen::Index j = 0; j < r.cols(); ++j)
                        for (Eigen::Index i = 0; i < r.rows(); ++i) r(i, j) = (rng.next_u64() & 1) ? 1.0 : -1.0;
                    for (Eigen::Index j = 0; j < s.cols(); ++j)
                        for (Eigen::Index i = 0; i < s.rows(); ++i) s(i, j) = (rng.next_u64() & 1) ? 1.0 : -1.0;
                    const double b_std = ens.spec.bias_scale / std::sqrt(static_cast<double>(sizes[l]));
                    for (Eigen::Index j = 0; j < b.cols(); ++j)
                        for (Eigen::Index i = 0; i < b.rows(); ++i)
                            b(i, j) = rng.truncated_normal() / kTruncNormStd * b_std;
                    ens.mod_r.push_back(std::move(r));
                    ens.mod_s.push_back(std::move(s));
                    ens.mod_b.push_back(std::move(b));
                }
                break;
            }
        }
        return ens;
    }

    int n_members() const { return arch.n_members; }

    /// Per-member outputs, batch x N. The workspace retains everything the
    /// matching backward pass needs.
    const Matrix& member_outputs(const Matrix& x, EnsembleWorkspace& ws) const {
        const int n = arch.n_members;
        switch (arch.kind) {
            case EnsembleKind::Deep: {
                ws.net_ws.resize(nets.size());
                ws.outputs.resize(x.rows(), n);
                if (arch.double_q) {
                    ws.min_mask.resize(x.rows(), n);
                    for (int i = 0; i < n; ++i) {
                        const Matrix& o1 = forward(nets[2 * i], spec, x, ws.net_ws[2 * i]);
                        const Matrix& o2 = forward(nets[2 * i + 1], spec, x, ws.net_ws[2 * i + 1]);
                        ws.min_mask.col(i) = (o1.col(0).array() <= o2.col(0).array()).cast<double>();
                        ws.outputs.col(i) = o1.col(0).cwiseMin(o2.col(0));
                    }
                } else {
                    for (int i = 0; i < n; ++i)
                        ws.outputs.col(i) = forward(nets[i], spec, x, ws.net_ws[i]).col(0);
                }
                break;
            }
            case EnsembleKind::MultiHead: {
                ws.net_ws.resize(1);
                ws.outputs = forward(nets[0], spec, x, ws.net_ws[0]);
                break;
            }
            case EnsembleKind::Mimo: {
                if (x.cols() != arch.base.input_dim) throw DimensionMismatch("mimo takes the base input width");
                ws.net_ws.resize(1);
                ws.tiled.resize(x.rows(), spec.input_dim);
                for (int j = 0; j < n; ++j) ws.tiled.middleCols(j * arch.base.input_dim, arch.base.input_dim) = x;
                ws.outputs = forward(nets[0], spec, ws.tiled, ws.net_ws[0]);
                break;
            }
            case EnsembleKind::BatchEnsemble:
                batch_ensemble_forward(x, ws);
                break;
        }
        return ws.outputs;
    }

    Matrix member_outputs(const Matrix& x) const {
        EnsembleWorkspace ws;
        return member_outputs(x, ws);
    }

    /// Accumulates parameter gradients (and optionally input gradients) from
    /// per-member output gradients gout (batch x N). `ws` must come from a
    /// member_outputs call on the same x.
    void backward_members(const Matrix& x, EnsembleWorkspace& ws, const Matrix& gout, EnsembleGrads* grads,
                          Matrix* dx = nullptr) const {
        if (gout.rows() != x.rows() || gout.cols() != arch.n_members)
            throw DimensionMismatch("backward_members: gout must be batch x n_members");
        switch (arch.kind) {
            case EnsembleKind::Deep: {
                for (int i = 0; i < arch.n_members; ++i) {
                    if (arch.double_q) {
                        const Matrix g1 = gout.col(i).cwiseProduct(ws.min_mask.col(i));
                        const Matrix g2 = gout.col(i) - g1;
                        backward(nets[2 * i], spec, x, ws.net_ws[2 * i], g1,
                                 grads ? &grads->nets[2 * i] : nullptr, dx);
                        backward(nets[2 * i + 1], spec, x, ws.net_ws[2 * i + 1], g2,
                                 grads ? &grads->nets[2 * i + 1] : nullptr, dx);
                    } else {
                        backward(nets[i], spec, x, ws.net_ws[i], gout.col(i), grads ? &grads->nets[i] : nullptr,
                                 dx);
                    }
                }
                break;
            }
            case EnsembleKind::MultiHead:
                backward(nets[0], spec, x, ws.net_ws[0], gout, grads ? &grads->nets[0] : nullptr, dx);
                break;
            case EnsembleKind::Mimo: {
                Matrix dtiled;
                Matrix* dt = dx ? &dtiled : nullptr;
                if (dt) {
                    dtiled.resize(x.rows(), spec.input_dim);
                    dtiled.setZero();
                }
                backward(nets[0], spec, ws.tiled, ws.net_ws[0], gout, grads ? &grads->nets[0] : nullptr, dt);
                if (dx)
                    for (int j = 0; j < arch.n_members; ++j)
                        *dx += dtiled.middleCols(j * arch.base.input_dim, arch.base.input_dim);
                break;
            }
            case EnsembleKind::BatchEnsemble:
                batch_ensemble_backward(x, ws, gout, grads, dx);
                break;
        }
    }

    EnsembleGrads zero_grads() const {
        EnsembleGrads g;
        g.nets.reserve(nets.size());
        for (const auto& n : nets) g.nets.push_back(Params::zeros_like(n));
        for (const auto& m : mod_r) g.mod_r.push_back(Matrix::Zero(m.rows(), m.cols()));
        for (const auto& m : mod_s) g.mod_s.push_back(Matrix::Zero(m.rows(), m.cols()));
        for (const auto& m : mod_b) g.mod_b.push_back(Matrix::Zero(m.rows(), m.cols()));
        return g;
    }

    /// Trainable tensors in a fixed order. Batch ensembles exclude the base
    /// network's bias vectors: the per-member biases replace them.
    std::vector<TensorView> views() {
        std::vector<TensorView> out;
        if (arch.kind == EnsembleKind::BatchEnsemble) {
            for (auto& layer : nets[0].layers) out.push_back({layer.w.data(), layer.w.size()});
            for (auto& m : mod_r) out.push_back({m.data(), m.size()});
            for (auto& m : mod_s) out.push_back({m.data(), m.size()});
            for (auto& m : mod_b) out.push_back({m.data(), m.size()});
        } else {
            for (auto& n : nets) append_views(n, out);
        }
        return out;
    }

    std::vector<TensorView> grad_views(EnsembleGrads& g) const {
        std::vector<TensorView> out;
        if (arch.kind == EnsembleKind::BatchEnsemble) {
            for (auto& layer : g.nets[0].layers) out.push_back({layer.w.data(), layer.w.size()});
            for (auto& m : g.mod_r) out.push_back({m.data(), m.size()});
            for (auto& m : g.mod_s) out.push_back({m.data(), m.size()});
            for (auto& m : g.mod_b) out.push_back({m.data(), m.size()});
        } else {
            for (auto& n : g.nets) append_views(n, out);
        }
        return out;
    }

    std::size_t trainable_count() {
        std::size_t n = 0;
        for (const auto& view : views()) n += static_cast<std::size_t>(view.size);
        return n;
    }

    /// this <- tau * this + (1 - tau) * online, over all trainable tensors.
    void ema_from(QEnsemble& online, double tau) {
        auto mine = views();
        auto theirs = online.views();
        if (mine.size() != theirs.size()) throw DimensionMismatch("ema_from: mismatched ensembles");
        for (std::size_t i = 0; i < mine.size(); ++i) {
            if (mine[i].size != theirs[i].size) throw DimensionMismatch("ema_from: tensor size mismatch");
            for (Eigen::Index k = 0; k < mine[i].size; ++k)
                mine[i].data[k] = tau * mine[i].data[k] + (1.0 - tau) * theirs[i].data[k];
        }
    }

private:
    void batch_ensemble_forward(const Matrix& x, EnsembleWorkspace& ws) const {
        const int n = arch.n_members;
        const int n_layers = spec.n_layers();
        ws.be_xt.assign(static_cast<std::size_t>(n), {});
        ws.be_lin.assign(static_cast<std::size_t>(n), {});
        ws.be_pre.assign(static_cast<std::size_t>(n), {});
        ws.be_act.assign(static_cast<std::size_t>(n), {});
        ws.outputs.resize(x.rows(), n);
        for (int i = 0; i < n; ++i) {
            auto& xt = ws.be_xt[static_cast<std::size_t>(i)];
            auto& lin = ws.be_lin[static_cast<std::size_t>(i)];
            auto& pre = ws.be_pre[static_cast<std::size_t>(i)];
            auto& act = ws.be_act[static_cast<std::size_t>(i)];
            xt.resize(static_cast<std::size_t>(n_layers));
            lin.resize(static_cast<std::size_t>(n_layers));
            pre.resize(static_cast<std::size_t>(n_layers));
            act.resize(static_cast<std::size_t>(n_layers));
            const Matrix* cur = &x;
            for (int l = 0; l < n_layers; ++l) {
                const std::size_t li = static_cast<std::size_t>(l);
                xt[li] = cur->array().rowwise() * mod_r[li].col(i).transpose().array();
                detail::matmul_ordered(xt[li], nets[0].layers[li].w, lin[li]);
                pre[li] = lin[li].array().rowwise() * mod_s[li].col(i).transpose().array();
                pre[li].rowwise() += mod_b[li].col(i).transpose();
                if (l + 1 < n_layers) {
                    detail::apply_activation(spec.activation, pre[li], act[li]);
                    cur = &act[li];
                }
            }
            ws.outputs.col(i) = pre[static_cast<std::size_t>(n_layers - 1)].col(0);
        }
    }

    void batch_ensemble_backward(const Matrix& x, EnsembleWorkspace& ws, const Matrix& gout,
                                 EnsembleGrads* grads, Matrix* dx) const {
        const int n = arch.n_members;
        const int n_layers = spec.n_layers();
        for (int i = 0; i < n; ++i) {
            const auto& xt = ws.be_xt[static_cast<std::size_t>(i)];
            const auto& lin = ws.be_lin[static_cast<std::size_t>(i)];
            const auto& pre = ws.be_pre[static_cast<std::size_t>(i)];
            const auto& act = ws.be_act[static_cast<std::size_t>(i)];
            Matrix delta = gout.col(i);
            for (int l = n_layers - 1; l >= 0; --l) {
                const std::size_t li = static_cast<std::size_t>(l);
                const Matrix& input = (l == 0) ? x : act[li - 1];
                Matrix dlin = delta.array().rowwise() * mod_s[li].col(i).transpose().array();
                if (grads) {
                    grads->mod_b[li].col(i) += delta.colwise().sum().transpose();
                    grads->mod_s[li].col(i) += delta.cwiseProduct(lin[li]).colwise().sum().transpose();
                    grads->nets[0].layers[li].w.noalias() += xt[li].transpose() * dlin;
                }
                Matrix dxt = dlin * nets[0].layers[li].w.transpose();
                if (grads) grads->mod_r[li].col(i) += dxt.cwiseProduct(input).colwise().sum().transpose();
                Matrix dinput = dxt.array().rowwise() * mod_r[li].col(i).transpose().array();
                if (l > 0) {
                    delta = std::move(dinput);
                    detail::activation_grad_inplace(spec.activation, pre[li - 1], act[li - 1], delta);
                } else if (dx) {
                    *dx += dinput;
                }
            }
        }
    }
};

} // namespace qlcb
