#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "qlcb/csv.hpp"
#include "qlcb/errors.hpp"
#include "qlcb/rng.hpp"

namespace qlcb {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

enum class Activation { Tanh, Relu, Erf };

inline std::string activation_name(Activation a) {
    switch (a) {
        case Activation::Tanh: return "tanh";
        case Activation::Relu: return "relu";
        case Activation::Erf: return "erf";
    }
    return "?";
}

/// Fully connected architecture: affine-activation stack with a linear output
/// layer. Weights and biases are drawn from fan-in truncated normal
/// distributions (truncation at +-2 std, renormalized so the realized standard
/// deviation equals scale / sqrt(fan_in)).
struct MlpSpec {
    int input_dim = 1;
    std::vector<int> hidden_dims;
    Activation activation = Activation::Tanh;
    int output_dim = 1;
    double weight_scale = 1.0;
    double bias_scale = 0.05;

    void validate() const {
        if (input_dim < 1 || output_dim < 1) throw ConfigError("mlp dims must be >= 1");
        for (int h : hidden_dims)
            if (h < 1) throw ConfigError("mlp hidden dims must be >= 1");
        if (weight_scale < 0.0 || bias_scale < 0.0) throw ConfigError("init scales must be >= 0");
    }

    int n_layers() const { return static_cast<int>(hidden_dims.size()) + 1; }

    std::vector<int> layer_sizes() const {
        std::vector<int> sizes;
        sizes.push_back(input_dim);
        for (int h : hidden_dims) sizes.push_back(h);
        sizes.push_back(output_dim);
        return sizes;
    }

    std::size_t param_count() const {
        const auto sizes = layer_sizes();
        std::size_t n = 0;
        for (std::size_t l = 0; l + 1 < sizes.size(); ++l)
            n += static_cast<std::size_t>(sizes[l]) * sizes[l + 1] + sizes[l + 1];
        return n;
    }
};

struct Layer {
    Matrix w; // in x out
    Vector b; // out
};

struct Params {
    std::vector<Layer> layers;

    static Params zeros(const MlpSpec& spec) {
        Params p;
        const auto sizes = spec.layer_sizes();
        p.layers.resize(sizes.size() - 1);
        for (std::size_t l = 0; l + 1 < sizes.size(); ++l) {
            p.layers[l].w = Matrix::Zero(sizes[l], sizes[l + 1]);
            p.layers[l].b = Vector::Zero(sizes[l + 1]);
        }
        return p;
    }

    static Params zeros_like(const Params& other) {
        Params p;
        p.layers.resize(other.layers.size());
        for (std::size_t l = 0; l < other.layers.size(); ++l) {
            p.layers[l].w = Matrix::Zero(other.layers[l].w.rows(), other.layers[l].w.cols());
            p.layers[l].b = Vector::Zero(other.layers[l].b.size());
        }
        return p;
    }

    void set_zero() {
        for (auto& layer : layers) {
            layer.w.setZero();
            layer.b.setZero();
        }
    }

    std::size_t count() const {
        std::size_t n = 0;
        for (const auto& layer : layers) n += static_cast<std::size_t>(layer.w.size()) + layer.b.size();
        return n;
    }
};

/// Contiguous view of one parameter tensor; the flattened-parameter interface
/// shared by the optimizer, EMA updates and checkpointing.
struct TensorView {
    double* data = nullptr;
    Eigen::Index size = 0;
};

inline void append_views(Params& p, std::vector<TensorView>& out) {
    for (auto& layer : p.layers) {
        out.push_back({layer.w.data(), layer.w.size()});
        out.push_back({layer.b.data(), layer.b.size()});
    }
}

inline std::vector<TensorView> tensor_views(Params& p) {
    std::vector<TensorView> out;
    append_views(p, out);
    return out;
}

// Standard-normal std after truncation at +-2; initializers divide by this so
// post-truncation samples have unit std before scaling.
inline constexpr double kTruncNormStd = 0.87962566103423978;

/// Fan-in truncated normal initialization, one substream per layer.
inline Params init_params(const MlpSpec& spec, std::uint64_t seed) {
    spec.validate();
    Params p = Params::zeros(spec);
    for (std::size_t l = 0; l < p.layers.size(); ++l) {
        Rng rng = Rng::substream(seed, l);
        auto& layer = p.layers[l];
        const double fan_in = static_cast<double>(layer.w.rows());
        const double w_std = spec.weight_scale / std::sqrt(fan_in);
        const double b_std = spec.bias_scale / std::sqrt(fan_in);
        for (Eigen::Index j = 0; j < layer.w.cols(); ++j)
            for (Eigen::Index i = 0; i < layer.w.rows(); ++i)
                layer.w(i, j) = rng.truncated_normal() / kTruncNormStd * w_std;
        for (Eigen::Index j = 0; j < layer.b.size(); ++j)
            layer.b(j) = rng.truncated_normal() / kTruncNormStd * b_std;
    }
    return p;
}

namespace detail {

// out = x * w + b, accumulated as ordered rank-1 updates over input columns.
// Row i's value is computed in the same order for any batch size, so batched
// and per-row forward passes agree bit for bit.
inline void affine_ordered(const Matrix& x, const Matrix& w, const Vector& b, Matrix& out) {
    out.resize(x.rows(), w.cols());
    out.setZero();
    for (Eigen::Index k = 0; k < w.rows(); ++k) out.noalias() += x.col(k) * w.row(k);
    out.rowwise() += b.transpose();
}

// Same accumulation without the bias term (batch-ensemble layers add their
// per-member bias after the modulation).
inline void matmul_ordered(const Matrix& x, const Matrix& w, Matrix& out) {
    out.resize(x.rows(), w.cols());
    out.setZero();
    for (Eigen::Index k = 0; k < w.rows(); ++k) out.noalias() += x.col(k) * w.row(k);
}

inline void apply_activation(Activation act, const Matrix& pre, Matrix& out) {
    switch (act) {
        case Activation::Tanh:
            // tanh via one vectorized exp; saturates cleanly at +-1.
            out = 1.0 - 2.0 / ((2.0 * pre.array()).exp() + 1.0);
            break;
        case Activation::Relu:
            out = pre.cwiseMax(0.0);
            break;
        case Activation::Erf:
            out = pre.unaryExpr([](double z) { return std::erf(z); });
            break;
    }
}

// Derivative expressed from cached pre-activations/activations, consistent
// with apply_activation by construction.
inline void activation_grad_inplace(Activation act, const Matrix& pre, const Matrix& out, Matrix& delta) {
    switch (act) {
        case Activation::Tanh:
            delta.array() *= 1.0 - out.array().square();
            break;
        case Activation::Relu:
            delta.array() *= (pre.array() > 0.0).cast<double>();
            break;
        case Activation::Erf:
            delta.array() *= (2.0 / std::sqrt(3.14159265358979323846)) * (-pre.array().square()).exp();
            break;
    }
}

} // namespace detail

struct ForwardWorkspace {
    std::vector<Matrix> pre; // per layer, batch x width
    std::vector<Matrix> act; // per non-final layer, batch x width
    std::vector<Matrix> delta_scratch;
};

/// Batched forward pass; rows of x are samples. Returns a reference to the
/// final-layer output held by the workspace.
inline const Matrix& forward(const Params& p, const MlpSpec& spec, const Matrix& x, ForwardWorkspace& ws) {
    if (x.cols() != spec.input_dim) throw DimensionMismatch("forward: input width mismatch");
    const int n_layers = spec.n_layers();
    if (static_cast<int>(p.layers.size()) != n_layers) throw DimensionMismatch("forward: params do not match spec");
    ws.pre.resize(n_layers);
    ws.act.resize(n_layers > 0 ? n_layers - 1 : 0);
    const Matrix* cur = &x;
    for (int l = 0; l < n_layers; ++l) {
        detail::affine_ordered(*cur, p.layers[l].w, p.layers[l].b, ws.pre[l]);
        if (l + 1 < n_layers) {
            detail::apply_activation(spec.activation, ws.pre[l], ws.act[l]);
            cur = &ws.act[l];
        }
    }
    return ws.pre.back();
}

inline Matrix forward(const Params& p, const MlpSpec& spec, const Matrix& x) {
    ForwardWorkspace ws;
    return forward(p, spec, x, ws);
}

/// Reverse pass from dL/d(output). Accumulates parameter gradients into
/// `grads` when non-null (caller zeroes), and dL/d(input) into `dx` when
/// non-null.
inline void backward(const Params& p, const MlpSpec& spec, const Matrix& x, ForwardWorkspace& ws,
                     const Matrix& gout, Params* grads, Matrix* dx = nullptr) {
    const int n_layers = spec.n_layers();
    if (gout.rows() != x.rows() || gout.cols() != spec.output_dim)
        throw DimensionMismatch("backward: output gradient shape mismatch");
    ws.delta_scratch.resize(n_layers);
    ws.delta_scratch[n_layers - 1] = gout;
    for (int l = n_layers - 1; l >= 0; --l) {
        const Matrix& delta = ws.delta_scratch[l];
        const Matrix& input = (l == 0) ? x : ws.act[l - 1];
        if (grads) {
            grads->layers[l].w.noalias() += input.transpose() * delta;
            grads->layers[l].b.noalias() += delta.colwise().sum().transpose();
        }
        if (l > 0) {
            Matrix& dinput = ws.delta_scratch[l - 1];
            dinput.noalias() = delta * p.layers[l].w.transpose();
            detail::activation_grad_inplace(spec.activation, ws.pre[l - 1], ws.act[l - 1], dinput);
        } else if (dx) {
            dx->noalias() += delta * p.layers[0].w.transpose();
        }
    }
}

struct MseResult {
    double loss = 0.0;
    Params grads;
};

/// Mean-squared-error loss over a batch with exact reverse-mode gradients.
inline MseResult backward_mse(const Params& p, const MlpSpec& spec, const Matrix& x, const Vector& targets) {
    if (targets.size() != x.rows()) throw DimensionMismatch("backward_mse: target length mismatch");
    if (spec.output_dim != 1) throw DimensionMismatch("backward_mse: scalar-output networks only");
    ForwardWorkspace ws;
    const Matrix& out = forward(p, spec, x, ws);
    const Vector resid = out.col(0) - targets;
    MseResult res;
    res.loss = resid.squaredNorm() / static_cast<double>(x.rows());
    res.grads = Params::zeros_like(p);
    const Matrix gout = (2.0 / static_cast<double>(x.rows())) * resid;
    backward(p, spec, x, ws, gout, &res.grads);
    return res;
}

struct AdamConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Bias-corrected Adam over a fixed list of parameter tensors. Moments are
/// stored flat, aligned with the view list supplied at construction.
class AdamState {
public:
    AdamState() = default;

    AdamState(const std::vector<TensorView>& views, AdamConfig cfg) : cfg_(cfg) {
        m_.resize(views.size());
        v_.resize(views.size());
        for (std::size_t i = 0; i < views.size(); ++i) {
            m_[i].assign(static_cast<std::size_t>(views[i].size), 0.0);
            v_[i].assign(static_cast<std::size_t>(views[i].size), 0.0);
        }
    }

    long step() const { return step_; }
    const AdamConfig& config() const { return cfg_; }

    void update(const std::vector<TensorView>& params, const std::vector<TensorView>& grads) {
        if (params.size() != m_.size() || grads.size() != m_.size())
            throw DimensionMismatch("adam: tensor list does not match state");
        ++step_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
        for (std::size_t i = 0; i < params.size(); ++i) {
            double* p = params[i].data;
            const double* g = grads[i].data;
            double* m = m_[i].data();
            double* v = v_[i].data();
            const Eigen::Index n = params[i].size;
            if (grads[i].size != n || static_cast<Eigen::Index>(m_[i].size()) != n)
                throw DimensionMismatch("adam: tensor size mismatch");
            for (Eigen::Index k = 0; k < n; ++k) {
                m[k] = cfg_.beta1 * m[k] + (1.0 - cfg_.beta1) * g[k];
                v[k] = cfg_.beta2 * v[k] + (1.0 - cfg_.beta2) * g[k] * g[k];
                const double mhat = m[k] / bc1;
                const double vhat = v[k] / bc2;
                p[k] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
            }
        }
    }

private:
    std::vector<std::vector<double>> m_, v_;
    long step_ = 0;
    AdamConfig cfg_;
};

/// Single Adam step on a plain Params bundle.
inline void adam_update(AdamState& state, Params& params, const Params& grads) {
    auto pv = tensor_views(params);
    auto gv = tensor_views(const_cast<Params&>(grads));
    state.update(pv, gv);
}

// --- checkpoint format (version 1): flat little-endian doubles in
// tensor_views order, with a JSON shape manifest alongside. ---

inline void save_params(const Params& p, const MlpSpec& spec, const std::filesystem::path& prefix) {
    std::filesystem::create_directories(prefix.parent_path().empty() ? "." : prefix.parent_path());
    {
        std::ofstream bin(prefix.string() + ".bin", std::ios::binary);
        for (const auto& layer : p.layers) {
            bin.write(reinterpret_cast<const char*>(layer.w.data()),
                      static_cast<std::streamsize>(sizeof(double)) * layer.w.size());
            bin.write(reinterpret_cast<const char*>(layer.b.data()),
                      static_cast<std::streamsize>(sizeof(double)) * layer.b.size());
        }
    }
    std::ofstream manifest(prefix.string() + ".json", std::ios::binary);
    manifest << "{\n  \"format_version\": 1,\n  \"activation\": \"" << activation_name(spec.activation)
             << "\",\n  \"layer_sizes\": [";
    const auto sizes = spec.layer_sizes();
    for (std::size_t i = 0; i < sizes.size(); ++i) manifest << (i ? ", " : "") << sizes[i];
    manifest << "]\n}\n";
}

inline Params load_params(const MlpSpec& spec, const std::filesystem::path& prefix) {
    Params p = Params::zeros(spec);
    std::ifstream bin(prefix.string() + ".bin", std::ios::binary);
    if (!bin) throw std::runtime_error("cannot open checkpoint " + prefix.string() + ".bin");
    for (auto& layer : p.layers) {
        bin.read(reinterpret_cast<char*>(layer.w.data()),
                 static_cast<std::streamsize>(sizeof(double)) * layer.w.size());
        bin.read(reinterpret_cast<char*>(layer.b.data()),
                 static_cast<std::streamsize>(sizeof(double)) * layer.b.size());
    }
    if (!bin) throw std::runtime_error("checkpoint truncated: " + prefix.string() + ".bin");
    return p;
}

} // namespace qlcb
